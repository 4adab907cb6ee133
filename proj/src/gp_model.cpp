#include "ncgp/gp_model.hpp"

#include "ncgp/errors.hpp"
#include "ncgp/parallel.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ncgp {

std::string to_string(KernelFamily family) {
  switch (family) {
  case KernelFamily::RBF:
    return "rbf";
  case KernelFamily::Matern32:
    return "matern32";
  }
  return "?";
}

KernelFamily kernel_family_from_string(const std::string &name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "rbf") {
    return KernelFamily::RBF;
  }
  if (lower == "matern32") {
    return KernelFamily::Matern32;
  }
  throw ConfigError("unknown kernel family '" + name + "'");
}

void KernelSpec::validate() const {
  if (!(lengthscale > 0.0) || !std::isfinite(lengthscale)) {
    throw ConfigError("kernel lengthscale must be positive and finite");
  }
  if (!(outputscale > 0.0) || !std::isfinite(outputscale)) {
    throw ConfigError("kernel outputscale must be positive and finite");
  }
}

double kernel_eval(const KernelSpec &spec, const Eigen::Ref<const Vector> &x,
                   const Eigen::Ref<const Vector> &x2) {
  require(x.size() == x2.size(), "kernel_eval: input dimension mismatch");
  if (!x.allFinite() || !x2.allFinite()) {
    throw InputError("kernel_eval: non-finite input");
  }
  return spec.from_sqdist((x - x2).squaredNorm());
}

MultiOutputPrior::MultiOutputPrior(std::vector<KernelSpec> kernels, Vector mean)
    : kernels_(std::move(kernels)), mean_(std::move(mean)) {
  require(!kernels_.empty(), "MultiOutputPrior: need at least one output");
  require(mean_.size() == num_outputs(),
          "MultiOutputPrior: one mean per output required");
  for (const auto &k : kernels_) {
    k.validate();
  }
  for (Index c = 0; c < num_outputs(); ++c) {
    auto it = std::find_if(groups_.begin(), groups_.end(), [&](const auto &g) {
      return kernels_[g.front()] == kernels_[c];
    });
    if (it == groups_.end()) {
      groups_.push_back({c});
    } else {
      it->push_back(c);
    }
  }
}

MultiOutputPrior::MultiOutputPrior(const KernelSpec &kernel, Index num_outputs)
    : MultiOutputPrior(std::vector<KernelSpec>(std::max<Index>(num_outputs, 0),
                                               kernel),
                       Vector::Zero(std::max<Index>(num_outputs, 0))) {}

Vector MultiOutputPrior::mean_vector(Index num_points) const {
  return mean_.replicate(num_points, 1);
}

Vector reorder(const Vector &v, Ordering from, Ordering to, Index num_points,
               Index num_outputs) {
  require(v.size() == num_points * num_outputs, "reorder: length != N*C");
  if (from == to) {
    return v;
  }
  Vector out(v.size());
  for (Index n = 0; n < num_points; ++n) {
    for (Index c = 0; c < num_outputs; ++c) {
      const Index cn = n * num_outputs + c;
      const Index nc = c * num_points + n;
      if (from == Ordering::CN) {
        out[nc] = v[cn];
      } else {
        out[cn] = v[nc];
      }
    }
  }
  return out;
}

namespace {

inline double sqdist(const Matrix &Xt, Index i, const Matrix &X2t, Index j) {
  double acc = 0.0;
  for (Index d = 0; d < Xt.rows(); ++d) {
    const double diff = Xt(d, i) - X2t(d, j);
    acc += diff * diff;
  }
  return acc;
}

Index tile_count(Index n, Index tile) { return (n + tile - 1) / tile; }

} // namespace

Vector prior_matvec(const MultiOutputPrior &prior, const Matrix &X,
                    const Vector &v, Index tile) {
  const Index N = X.rows();
  const Index C = prior.num_outputs();
  require(v.size() == N * C, "prior_matvec: length(v) != N*C");
  require(tile >= 1, "prior_matvec: tile must be positive");
  if (N == 0) {
    return Vector(0);
  }
  const Matrix Xt = X.transpose();
  const Vector v_nc = reorder(v, Ordering::CN, Ordering::NC, N, C);
  Vector out_nc(N * C);
  const auto &groups = prior.kernel_groups();
  const auto &kernels = prior.kernels();

  parallel_for(static_cast<std::size_t>(tile_count(N, tile)),
               [&](std::size_t t) {
    const Index begin = static_cast<Index>(t) * tile;
    const Index end = std::min(N, begin + tile);
    std::vector<double> acc(static_cast<std::size_t>(C));
    for (Index i = begin; i < end; ++i) {
      for (const auto &group : groups) {
        const KernelSpec &spec = kernels[group.front()];
        for (Index c : group) {
          acc[c] = 0.0;
        }
        for (Index j = 0; j < N; ++j) {
          const double k = spec.from_sqdist(sqdist(Xt, i, Xt, j));
          for (Index c : group) {
            acc[c] += k * v_nc[c * N + j];
          }
        }
        for (Index c : group) {
          out_nc[c * N + i] = acc[c];
        }
      }
    }
  });
  return reorder(out_nc, Ordering::NC, Ordering::CN, N, C);
}

Matrix cross_apply(const MultiOutputPrior &prior, const Matrix &X_train,
                   const Matrix &X_query, const Matrix &V, Index tile) {
  const Index N = X_train.rows();
  const Index Nq = X_query.rows();
  const Index C = prior.num_outputs();
  require(X_train.cols() == X_query.cols(),
          "cross_apply: input dimension mismatch");
  require(V.rows() == N * C, "cross_apply: V rows != N*C");
  require(tile >= 1, "cross_apply: tile must be positive");
  const Index cols = V.cols();
  Matrix out = Matrix::Zero(Nq * C, cols);
  if (Nq == 0 || N == 0 || cols == 0) {
    return out;
  }

  // Per-output slices of V with rows in data order.
  std::vector<Matrix> slices(static_cast<std::size_t>(C));
  for (Index c = 0; c < C; ++c) {
    slices[c].resize(N, cols);
    for (Index j = 0; j < N; ++j) {
      slices[c].row(j) = V.row(j * C + c);
    }
  }
  const Matrix Xt = X_train.transpose();
  const Matrix Qt = X_query.transpose();
  const auto &groups = prior.kernel_groups();
  const auto &kernels = prior.kernels();

  parallel_for(static_cast<std::size_t>(tile_count(Nq, tile)),
               [&](std::size_t t) {
    const Index begin = static_cast<Index>(t) * tile;
    const Index end = std::min(Nq, begin + tile);
    Matrix block(end - begin, N);
    for (const auto &group : groups) {
      const KernelSpec &spec = kernels[group.front()];
      for (Index j = 0; j < N; ++j) {
        for (Index i = begin; i < end; ++i) {
          block(i - begin, j) = spec.from_sqdist(sqdist(Qt, i, Xt, j));
        }
      }
      for (Index c : group) {
        const Matrix prod = block * slices[c];
        for (Index i = begin; i < end; ++i) {
          out.row(i * C + c) = prod.row(i - begin);
        }
      }
    }
  });
  return out;
}

Matrix cross_covariance(const MultiOutputPrior &prior, const Matrix &X_train,
                        const Matrix &X_test) {
  require(X_train.cols() == X_test.cols(),
          "cross_covariance: input dimension mismatch");
  const Index N = X_train.rows();
  const Index Nt = X_test.rows();
  const Index C = prior.num_outputs();
  Matrix out = Matrix::Zero(Nt * C, N * C);
  for (Index a = 0; a < Nt; ++a) {
    for (Index b = 0; b < N; ++b) {
      const double d2 = (X_test.row(a) - X_train.row(b)).squaredNorm();
      for (Index c = 0; c < C; ++c) {
        out(a * C + c, b * C + c) = prior.kernels()[c].from_sqdist(d2);
      }
    }
  }
  return out;
}

std::string to_string(Domain domain) {
  switch (domain) {
  case Domain::Counts:
    return "counts";
  case Domain::Binary:
    return "binary";
  case Domain::ClassIndex:
    return "class-index";
  case Domain::Real:
    return "real";
  }
  return "?";
}

Domain domain_from_string(const std::string &name) {
  if (name == "counts") {
    return Domain::Counts;
  }
  if (name == "binary") {
    return Domain::Binary;
  }
  if (name == "class-index" || name == "class_index") {
    return Domain::ClassIndex;
  }
  if (name == "real") {
    return Domain::Real;
  }
  throw ConfigError("unknown data domain '" + name + "'");
}

void Dataset::validate() const {
  if (size() < 1) {
    throw InputError("dataset is empty");
  }
  if (y.size() != size()) {
    throw InputError("dataset: target count does not match input rows");
  }
  if (!X.allFinite() || !y.allFinite()) {
    throw InputError("dataset: non-finite values");
  }
  for (Index n = 0; n < size(); ++n) {
    const double t = y[n];
    const bool integral = t == std::floor(t);
    switch (domain) {
    case Domain::Counts:
      if (!integral || t < 0.0) {
        throw InputError("dataset: count target " + std::to_string(t) +
                         " at row " + std::to_string(n));
      }
      break;
    case Domain::Binary:
      if (t != 0.0 && t != 1.0) {
        throw InputError("dataset: binary label must be 0 or 1 (row " +
                         std::to_string(n) + ")");
      }
      break;
    case Domain::ClassIndex:
      if (!integral || t < 0.0 || t >= static_cast<double>(num_classes)) {
        throw InputError("dataset: class index out of range at row " +
                         std::to_string(n));
      }
      break;
    case Domain::Real:
      break;
    }
  }
}

Dataset Dataset::subset(const std::vector<Index> &rows) const {
  Dataset out;
  out.domain = domain;
  out.num_classes = num_classes;
  out.X.resize(static_cast<Index>(rows.size()), dim());
  out.y.resize(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] >= 0 && rows[k] < size(), "Dataset::subset: bad index");
    out.X.row(static_cast<Index>(k)) = X.row(rows[k]);
    out.y[static_cast<Index>(k)] = y[rows[k]];
  }
  return out;
}

namespace {

std::vector<std::string> split_csv(const std::string &line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) {
      cell.pop_back();
    }
    std::size_t lead = 0;
    while (lead < cell.size() && cell[lead] == ' ') {
      ++lead;
    }
    out.push_back(cell.substr(lead));
  }
  return out;
}

double parse_cell(const std::string &cell, const std::string &path,
                  std::size_t line) {
  try {
    std::size_t used = 0;
    const double value = std::stod(cell, &used);
    if (used != cell.size()) {
      throw std::invalid_argument(cell);
    }
    return value;
  } catch (const std::exception &) {
    throw InputError(path + ":" + std::to_string(line) + ": bad number '" +
                     cell + "'");
  }
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

CsvTable read_table(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path);
  }
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) {
    throw InputError(path + ": missing header");
  }
  table.header = split_csv(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") {
      continue;
    }
    const auto cells = split_csv(line);
    if (cells.size() != table.header.size()) {
      throw InputError(path + ":" + std::to_string(lineno) +
                       ": expected " + std::to_string(table.header.size()) +
                       " columns");
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto &cell : cells) {
      row.push_back(parse_cell(cell, path, lineno));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<std::size_t> input_columns(const CsvTable &table,
                                       const std::string &path) {
  std::vector<std::size_t> cols;
  for (std::size_t d = 0;; ++d) {
    const auto it = std::find(table.header.begin(), table.header.end(),
                              "x_" + std::to_string(d));
    if (it == table.header.end()) {
      break;
    }
    cols.push_back(static_cast<std::size_t>(it - table.header.begin()));
  }
  if (cols.empty()) {
    throw InputError(path + ": no x_0 column in header");
  }
  return cols;
}

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

Matrix inputs_from_table(const CsvTable &table, const std::string &path) {
  const auto cols = input_columns(table, path);
  Matrix X(static_cast<Index>(table.rows.size()),
           static_cast<Index>(cols.size()));
  for (std::size_t n = 0; n < table.rows.size(); ++n) {
    for (std::size_t d = 0; d < cols.size(); ++d) {
      X(static_cast<Index>(n), static_cast<Index>(d)) = table.rows[n][cols[d]];
    }
  }
  return X;
}

} // namespace

Matrix read_inputs_csv(const std::string &path) {
  return inputs_from_table(read_table(path), path);
}

Dataset read_dataset_csv(const std::string &path, Domain domain,
                         Index num_classes) {
  const CsvTable table = read_table(path);
  const auto ycol = std::find(table.header.begin(), table.header.end(), "y");
  if (ycol == table.header.end()) {
    throw InputError(path + ": no y column in header");
  }
  const auto yi = static_cast<std::size_t>(ycol - table.header.begin());

  Dataset data;
  data.domain = domain;
  data.X = inputs_from_table(table, path);
  data.y.resize(data.X.rows());
  for (std::size_t n = 0; n < table.rows.size(); ++n) {
    data.y[static_cast<Index>(n)] = table.rows[n][yi];
  }
  if (domain == Domain::ClassIndex) {
    data.num_classes =
        num_classes > 0
            ? num_classes
            : (data.y.size() ? static_cast<Index>(data.y.maxCoeff()) + 1 : 0);
  } else if (domain == Domain::Binary) {
    data.num_classes = 2;
  } else {
    data.num_classes = 1;
  }
  data.validate();
  return data;
}

void write_dataset_csv(const std::string &path, const Dataset &data) {
  // temp file + rename so readers never see a partial file
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot write " + path);
    }
    for (Index d = 0; d < data.dim(); ++d) {
      out << "x_" << d << ',';
    }
    out << "y\n";
    const bool integral = data.domain != Domain::Real;
    for (Index n = 0; n < data.size(); ++n) {
      for (Index d = 0; d < data.dim(); ++d) {
        out << format_double(data.X(n, d)) << ',';
      }
      if (integral) {
        out << static_cast<long long>(data.y[n]) << '\n';
      } else {
        out << format_double(data.y[n]) << '\n';
      }
    }
    if (!out) {
      throw IoError("write failed for " + path);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
  }
}

} // namespace ncgp
