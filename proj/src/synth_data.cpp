#include "ncgp/synth_data.hpp"

#include "ncgp/errors.hpp"
#include "ncgp/likelihoods.hpp"
#include "ncgp/random.hpp"

#include "json.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <filesystem>
#include <fstream>

namespace ncgp {

namespace {

constexpr std::uint64_t kLatentTag = 0x1A7E;
constexpr std::uint64_t kInputsTag = 0x1A7F;
constexpr std::uint64_t kMixtureTag = 0x3D3D;
constexpr std::uint64_t kRepeatTag = 0x5EED0000;

std::uint64_t sample_seed(const GeneratorSpec &spec) {
  return spec.repeat == 0 ? spec.seed
                          : random::derive_seed(spec.seed,
                                                kRepeatTag + spec.repeat);
}

void shuffle_rows(Dataset &data, std::uint64_t seed) {
  random::Stream rng(seed);
  const Index N = data.size();
  for (Index k = N - 1; k > 0; --k) {
    const auto pick = static_cast<Index>(
        rng.uniform_index(static_cast<std::uint64_t>(k + 1)));
    data.X.row(k).swap(data.X.row(pick));
    std::swap(data.y[k], data.y[pick]);
  }
}

} // namespace

std::string to_string(GeneratorKind kind) {
  switch (kind) {
  case GeneratorKind::GpBinary1D:
    return "gp-binary-1d";
  case GeneratorKind::GpBinary2D:
    return "gp-binary-2d";
  case GeneratorKind::GpPoisson1D:
    return "poisson-1d";
  case GeneratorKind::GaussianMixture3D:
    return "mixture-3d";
  }
  return "?";
}

GeneratorKind generator_kind_from_string(const std::string &name) {
  for (auto kind : {GeneratorKind::GpBinary1D, GeneratorKind::GpBinary2D,
                    GeneratorKind::GpPoisson1D,
                    GeneratorKind::GaussianMixture3D}) {
    if (to_string(kind) == name) {
      return kind;
    }
  }
  throw ConfigError("unknown generator kind '" + name + "'");
}

void GeneratorSpec::validate() const {
  switch (kind) {
  case GeneratorKind::GpPoisson1D:
    if (num_points < 2) {
      throw ConfigError("poisson-1d needs at least 2 points");
    }
    break;
  case GeneratorKind::GpBinary1D:
  case GeneratorKind::GpBinary2D:
    if (num_points < 1 || num_test < 0) {
      throw ConfigError("gp-binary needs at least 1 point");
    }
    break;
  case GeneratorKind::GaussianMixture3D:
    if (num_classes < 2 || n_per_class < 1 || n_test_per_class < 0) {
      throw ConfigError("mixture-3d needs C >= 2 and n_per_class >= 1");
    }
    break;
  }
  if (kind != GeneratorKind::GaussianMixture3D) {
    KernelSpec{KernelFamily::RBF, lengthscale, outputscale}.validate();
  }
}

GeneratorSpec GeneratorSpec::defaults(GeneratorKind kind) {
  GeneratorSpec spec;
  spec.kind = kind;
  switch (kind) {
  case GeneratorKind::GpPoisson1D:
    spec.num_points = 100;
    spec.lengthscale = 0.1;
    spec.outputscale = 5.0;
    break;
  case GeneratorKind::GpBinary1D:
    spec.num_points = 50;
    spec.num_test = 100;
    spec.lengthscale = 1.0;
    spec.outputscale = 5.0;
    break;
  case GeneratorKind::GpBinary2D:
    spec.num_points = 100;
    spec.num_test = 100;
    spec.lengthscale = 1.0;
    spec.outputscale = 10.0;
    break;
  case GeneratorKind::GaussianMixture3D:
    spec.num_classes = 10;
    spec.n_per_class = 10000;
    spec.n_test_per_class = 1000;
    break;
  }
  return spec;
}

Vector draw_gp(const KernelSpec &kernel, const Matrix &X, std::uint64_t seed,
               double jitter) {
  const Matrix K = dense_prior_covariance(MultiOutputPrior(kernel, 1), X);
  random::Stream rng(seed);
  Vector z(X.rows());
  for (Index n = 0; n < z.size(); ++n) {
    z[n] = rng.normal();
  }
  constexpr int kAttempts = 8;
  double level = jitter * kernel.outputscale;
  for (int attempt = 0;; ++attempt, level *= 100.0) {
    Matrix A = K;
    A.diagonal().array() += level;
    try {
      const linalg::CholeskyFactor chol(A);
      return chol.lower().triangularView<Eigen::Lower>() * z;
    } catch (const NotPositiveDefinite &) {
      if (attempt + 1 == kAttempts) {
        throw;
      }
    }
  }
}

GeneratedData gen_gp_poisson_1d(const GeneratorSpec &spec) {
  spec.validate();
  const Index N = spec.num_points;
  GeneratedData out;
  Matrix X(N, 1);
  for (Index n = 0; n < N; ++n) {
    X(n, 0) = static_cast<double>(n) / static_cast<double>(N - 1);
  }
  const KernelSpec kernel{KernelFamily::RBF, spec.lengthscale, spec.outputscale};
  const Vector f = draw_gp(kernel, X, random::derive_seed(spec.seed, kLatentTag));

  const std::uint64_t s = sample_seed(spec);
  auto counts = [&](std::uint64_t tag) {
    random::Stream rng(random::derive_seed(s, tag));
    Vector y(N);
    for (Index n = 0; n < N; ++n) {
      y[n] = static_cast<double>(rng.poisson(std::exp(f[n])));
    }
    return y;
  };
  out.train = Dataset{X, counts(1), Domain::Counts, 1};
  out.test = Dataset{X, counts(2), Domain::Counts, 1};
  out.true_latent_train = f;
  out.true_latent_test = f;
  return out;
}

GeneratedData gen_gaussian_mixture_3d(const GeneratorSpec &spec) {
  spec.validate();
  const Index C = spec.num_classes;
  GeneratedData out;
  const std::uint64_t process = random::derive_seed(spec.seed, kMixtureTag);
  for (Index c = 0; c < C; ++c) {
    random::Stream rng(random::derive_seed(process, static_cast<std::uint64_t>(c)));
    MixtureComponent comp;
    comp.mean.resize(3);
    for (Index d = 0; d < 3; ++d) {
      comp.mean[d] = rng.uniform(-1.0, 1.0);
    }
    Matrix U;
    for (;;) {
      Matrix A(3, 3);
      for (Index k = 0; k < 9; ++k) {
        A(k / 3, k % 3) = rng.uniform();
      }
      Eigen::SelfAdjointEigenSolver<Matrix> eig(A * A.transpose());
      const Vector ev = eig.eigenvalues();
      if (ev.minCoeff() > 1e-12 * ev.maxCoeff()) {
        U = eig.eigenvectors();
        break;
      }
    }
    comp.eigenvalues.resize(3);
    for (Index d = 0; d < 3; ++d) {
      comp.eigenvalues[d] = rng.uniform(0.001, 0.1);
    }
    comp.covariance = U * comp.eigenvalues.asDiagonal() * U.transpose();
    comp.covariance = 0.5 * (comp.covariance + comp.covariance.transpose());
    out.components.push_back(comp);
  }

  auto draw = [&](std::uint64_t s, Index per_class) {
    Dataset data;
    data.domain = Domain::ClassIndex;
    data.num_classes = C;
    data.X.resize(C * per_class, 3);
    data.y.resize(C * per_class);
    for (Index c = 0; c < C; ++c) {
      const auto &comp = out.components[c];
      Eigen::SelfAdjointEigenSolver<Matrix> eig(comp.covariance);
      const Matrix root = eig.eigenvectors() *
                          eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
      random::Stream rng(random::derive_seed(random::derive_seed(s, 1),
                                             static_cast<std::uint64_t>(c)));
      for (Index k = 0; k < per_class; ++k) {
        Vector z(3);
        for (Index d = 0; d < 3; ++d) {
          z[d] = rng.normal();
        }
        const Index row = c * per_class + k;
        data.X.row(row) = (comp.mean + root * z).transpose();
        data.y[row] = static_cast<double>(c);
      }
    }
    shuffle_rows(data, random::derive_seed(s, 3));
    return data;
  };
  const std::uint64_t s = sample_seed(spec);
  out.train = draw(s, spec.n_per_class);
  out.test = draw(s + 1, spec.n_test_per_class);
  return out;
}

GeneratedData gen_gp_binary(const GeneratorSpec &spec, int dims) {
  spec.validate();
  require(dims == 1 || dims == 2, "gen_gp_binary: dims must be 1 or 2");
  const Index N = spec.num_points;
  const Index Nt = spec.num_test;
  Matrix X(N + Nt, dims);
  random::Stream inputs(random::derive_seed(spec.seed, kInputsTag));
  for (Index n = 0; n < N + Nt; ++n) {
    X(n, 0) = inputs.uniform(-3.0, 5.0);
    if (dims == 2) {
      X(n, 1) = inputs.uniform(-4.0, 1.0);
    }
  }
  const KernelSpec kernel{KernelFamily::RBF, spec.lengthscale, spec.outputscale};
  const Vector f = draw_gp(kernel, X, random::derive_seed(spec.seed, kLatentTag));

  const std::uint64_t s = sample_seed(spec);
  auto labels = [&](Index begin, Index count, std::uint64_t tag) {
    random::Stream rng(random::derive_seed(s, tag));
    Vector y(count);
    for (Index n = 0; n < count; ++n) {
      y[n] = rng.bernoulli(sigmoid(f[begin + n])) ? 1.0 : 0.0;
    }
    return y;
  };
  GeneratedData out;
  out.train = Dataset{X.topRows(N), labels(0, N, 1), Domain::Binary, 2};
  out.test = Dataset{X.bottomRows(Nt), labels(N, Nt, 2), Domain::Binary, 2};
  out.true_latent_train = f.head(N);
  out.true_latent_test = f.tail(Nt);
  return out;
}

GeneratedData generate(const GeneratorSpec &spec) {
  switch (spec.kind) {
  case GeneratorKind::GpPoisson1D:
    return gen_gp_poisson_1d(spec);
  case GeneratorKind::GaussianMixture3D:
    return gen_gaussian_mixture_3d(spec);
  case GeneratorKind::GpBinary1D:
    return gen_gp_binary(spec, 1);
  case GeneratorKind::GpBinary2D:
    return gen_gp_binary(spec, 2);
  }
  throw ConfigError("unsupported generator");
}

namespace {

nlohmann::json vector_json(const Vector &v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

} // namespace

std::vector<std::string> write_generated(const std::string &dir,
                                         const std::string &stem,
                                         const GeneratorSpec &spec,
                                         const GeneratedData &data) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create directory " + dir + ": " + ec.message());
  }
  const std::string train = (fs::path(dir) / (stem + "_train.csv")).string();
  const std::string test = (fs::path(dir) / (stem + "_test.csv")).string();
  const std::string side = (fs::path(dir) / (stem + ".json")).string();
  write_dataset_csv(train, data.train);
  write_dataset_csv(test, data.test);

  nlohmann::json j;
  j["kind"] = to_string(spec.kind);
  j["seed"] = spec.seed;
  j["repeat"] = spec.repeat;
  j["num_points"] = spec.num_points;
  j["num_test"] = spec.num_test;
  j["num_classes"] = spec.num_classes;
  j["n_per_class"] = spec.n_per_class;
  j["n_test_per_class"] = spec.n_test_per_class;
  j["lengthscale"] = spec.lengthscale;
  j["outputscale"] = spec.outputscale;
  j["rng"] = "philox4x32-10";
  j["train_rows"] = data.train.size();
  j["test_rows"] = data.test.size();
  if (data.true_latent_train.size() > 0) {
    j["true_latent_train"] = vector_json(data.true_latent_train);
    j["true_latent_test"] = vector_json(data.true_latent_test);
  }
  for (const auto &comp : data.components) {
    nlohmann::json cj;
    cj["mean"] = vector_json(comp.mean);
    cj["eigenvalues"] = vector_json(comp.eigenvalues);
    std::vector<std::vector<double>> cov;
    for (Index r = 0; r < comp.covariance.rows(); ++r) {
      cov.push_back({comp.covariance(r, 0), comp.covariance(r, 1),
                     comp.covariance(r, 2)});
    }
    cj["covariance"] = cov;
    j["components"].push_back(cj);
  }
  const std::string tmp = side + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw IoError("cannot write " + side);
    }
    f << j.dump(2) << '\n';
    if (!f) {
      throw IoError("write failed for " + side);
    }
  }
  fs::rename(tmp, side, ec);
  if (ec) {
    throw IoError("cannot move " + tmp + " to " + side + ": " + ec.message());
  }
  return {train, test, side};
}

} // namespace ncgp
