#include "ncgp/cli.hpp"

#include "ncgp/errors.hpp"
#include "ncgp/random.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

namespace ncgp::cli {

namespace fs = std::filesystem;

Cadence cadence_from_string(const std::string &name) {
  if (name == "step") {
    return Cadence::Step;
  }
  if (name == "iter") {
    return Cadence::Iter;
  }
  if (name == "never") {
    return Cadence::Never;
  }
  throw ConfigError("cadence must be step, iter or never (got '" + name + "')");
}

std::string to_string(Cadence cadence) {
  switch (cadence) {
  case Cadence::Step:
    return "step";
  case Cadence::Iter:
    return "iter";
  case Cadence::Never:
    return "never";
  }
  return "?";
}

namespace {

// ---- strict JSON field access

void check_keys(const json &obj, const std::set<std::string> &allowed,
                const std::string &section) {
  if (!obj.is_object()) {
    throw ConfigError("section '" + section + "' must be an object");
  }
  for (const auto &item : obj.items()) {
    if (!allowed.count(item.key())) {
      throw ConfigError("unknown key '" + item.key() + "' in " + section);
    }
  }
}

double get_double(const json &obj, const char *key, double fallback,
                  const std::string &section) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const json &v = obj.at(key);
  if (!v.is_number()) {
    throw ConfigError(section + "." + key + " must be a number");
  }
  return v.get<double>();
}

std::int64_t get_int(const json &obj, const char *key, std::int64_t fallback,
                     const std::string &section) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const json &v = obj.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError(section + "." + key + " must be an integer");
  }
  return v.get<std::int64_t>();
}

std::uint64_t get_seed(const json &obj, const char *key,
                       std::uint64_t fallback, const std::string &section) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const json &v = obj.at(key);
  if (v.is_number_unsigned()) {
    return v.get<std::uint64_t>();
  }
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) {
    return static_cast<std::uint64_t>(v.get<std::int64_t>());
  }
  throw ConfigError(section + "." + key + " must be a nonnegative integer");
}

bool get_bool(const json &obj, const char *key, bool fallback,
              const std::string &section) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const json &v = obj.at(key);
  if (!v.is_boolean()) {
    throw ConfigError(section + "." + key + " must be true or false");
  }
  return v.get<bool>();
}

std::string get_string(const json &obj, const char *key,
                       const std::string &fallback,
                       const std::string &section) {
  if (!obj.contains(key)) {
    return fallback;
  }
  const json &v = obj.at(key);
  if (!v.is_string()) {
    throw ConfigError(section + "." + key + " must be a string");
  }
  return v.get<std::string>();
}

KernelSpec parse_kernel(const json &obj, const KernelSpec &fallback,
                        const std::string &section) {
  KernelSpec k = fallback;
  if (obj.contains("kernel")) {
    k.family = kernel_family_from_string(get_string(obj, "kernel", "", section));
  }
  k.lengthscale = get_double(obj, "lengthscale", k.lengthscale, section);
  k.outputscale = get_double(obj, "outputscale", k.outputscale, section);
  k.validate();
  return k;
}

json kernel_json(const KernelSpec &k) {
  return {{"kernel", to_string(k.family)},
          {"lengthscale", k.lengthscale},
          {"outputscale", k.outputscale}};
}

GeneratorSpec parse_generator(const json &obj) {
  const std::string sec = "data.generator";
  check_keys(obj,
             {"kind", "seed", "repeat", "num_points", "num_test", "num_classes",
              "n_per_class", "n_test_per_class", "lengthscale", "outputscale"},
             sec);
  if (!obj.contains("kind")) {
    throw ConfigError("data.generator.kind is required");
  }
  GeneratorSpec g = GeneratorSpec::defaults(
      generator_kind_from_string(get_string(obj, "kind", "", sec)));
  g.seed = get_seed(obj, "seed", g.seed, sec);
  g.repeat = get_seed(obj, "repeat", g.repeat, sec);
  g.num_points = get_int(obj, "num_points", g.num_points, sec);
  g.num_test = get_int(obj, "num_test", g.num_test, sec);
  g.num_classes = get_int(obj, "num_classes", g.num_classes, sec);
  g.n_per_class = get_int(obj, "n_per_class", g.n_per_class, sec);
  g.n_test_per_class = get_int(obj, "n_test_per_class", g.n_test_per_class, sec);
  g.lengthscale = get_double(obj, "lengthscale", g.lengthscale, sec);
  g.outputscale = get_double(obj, "outputscale", g.outputscale, sec);
  g.validate();
  return g;
}

Domain default_domain(LikelihoodFamily family) {
  switch (family) {
  case LikelihoodFamily::Gaussian:
    return Domain::Real;
  case LikelihoodFamily::Poisson:
    return Domain::Counts;
  case LikelihoodFamily::BernoulliLogistic:
    return Domain::Binary;
  case LikelihoodFamily::Softmax:
    return Domain::ClassIndex;
  }
  return Domain::Real;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_opt(const std::optional<double> &x) {
  return x ? fmt(*x) : std::string();
}

} // namespace

ExperimentConfig ExperimentConfig::from_json(const json &doc) {
  check_keys(doc,
             {"data", "prior", "likelihood", "method", "policy", "outer",
              "inner", "sod", "metrics", "output_dir", "seed"},
             "config");
  ExperimentConfig c;
  c.seed = get_seed(doc, "seed", 0, "config");
  c.output_dir = get_string(doc, "output_dir", c.output_dir, "config");

  // likelihood first: the data domain defaults follow from it
  if (!doc.contains("likelihood")) {
    throw ConfigError("config.likelihood is required");
  }
  {
    const json &l = doc.at("likelihood");
    if (l.is_string()) {
      c.likelihood = likelihood_family_from_string(l.get<std::string>());
    } else {
      check_keys(l, {"family", "noise_variance"}, "likelihood");
      c.likelihood = likelihood_family_from_string(
          get_string(l, "family", "", "likelihood"));
      c.noise_variance =
          get_double(l, "noise_variance", c.noise_variance, "likelihood");
      if (!(c.noise_variance > 0.0)) {
        throw ConfigError("likelihood.noise_variance must be positive");
      }
    }
  }

  if (!doc.contains("data")) {
    throw ConfigError("config.data is required");
  }
  {
    const json &d = doc.at("data");
    check_keys(d, {"generator", "csv"}, "data");
    if (d.contains("generator") == d.contains("csv")) {
      throw ConfigError("data needs exactly one of 'generator' or 'csv'");
    }
    if (d.contains("generator")) {
      c.data.generator = parse_generator(d.at("generator"));
    } else {
      const json &csv = d.at("csv");
      check_keys(csv, {"train", "test", "domain", "num_classes"}, "data.csv");
      c.data.train_csv = get_string(csv, "train", "", "data.csv");
      if (c.data.train_csv.empty()) {
        throw ConfigError("data.csv.train is required");
      }
      c.data.test_csv = get_string(csv, "test", "", "data.csv");
      c.data.domain = csv.contains("domain")
                          ? domain_from_string(
                                get_string(csv, "domain", "", "data.csv"))
                          : default_domain(c.likelihood);
      c.data.num_classes = get_int(csv, "num_classes", 0, "data.csv");
    }
  }

  if (doc.contains("prior")) {
    const json &p = doc.at("prior");
    check_keys(p, {"kernel", "lengthscale", "outputscale", "mean", "kernels"},
               "prior");
    c.prior.kernel = parse_kernel(p, c.prior.kernel, "prior");
    if (p.contains("kernels")) {
      if (!p.at("kernels").is_array()) {
        throw ConfigError("prior.kernels must be an array");
      }
      for (const auto &k : p.at("kernels")) {
        check_keys(k, {"kernel", "lengthscale", "outputscale"}, "prior.kernels");
        c.prior.per_output.push_back(parse_kernel(k, c.prior.kernel,
                                                  "prior.kernels"));
      }
    }
    if (p.contains("mean")) {
      const json &m = p.at("mean");
      if (m.is_number()) {
        c.prior.mean = {m.get<double>()};
      } else if (m.is_array()) {
        for (const auto &x : m) {
          if (!x.is_number()) {
            throw ConfigError("prior.mean entries must be numbers");
          }
          c.prior.mean.push_back(x.get<double>());
        }
      } else {
        throw ConfigError("prior.mean must be a number or an array");
      }
    }
  }

  const std::string method = get_string(doc, "method", "iterncgp", "config");
  if (method == "iterncgp") {
    c.method = Method::IterNCGP;
  } else if (method == "sod") {
    c.method = Method::SoD;
  } else {
    throw ConfigError("method must be iterncgp or sod");
  }
  c.policy = policy_from_string(get_string(doc, "policy", "residual", "config"));

  if (doc.contains("outer")) {
    const json &o = doc.at("outer");
    check_keys(o,
               {"delta", "max_newton_steps", "inner_schedule", "recycle",
                "compression_rank", "tile"},
               "outer");
    c.outer.delta = get_double(o, "delta", c.outer.delta, "outer");
    c.outer.max_newton_steps =
        get_int(o, "max_newton_steps", c.outer.max_newton_steps, "outer");
    c.outer.recycle = get_bool(o, "recycle", c.outer.recycle, "outer");
    c.outer.tile = get_int(o, "tile", c.outer.tile, "outer");
    if (o.contains("inner_schedule")) {
      const json &s = o.at("inner_schedule");
      if (s.is_number_integer()) {
        c.outer.inner_schedule = {s.get<Index>()};
      } else if (s.is_array()) {
        for (const auto &x : s) {
          if (!x.is_number_integer()) {
            throw ConfigError("outer.inner_schedule entries must be integers");
          }
          c.outer.inner_schedule.push_back(x.get<Index>());
        }
      } else {
        throw ConfigError("outer.inner_schedule must be an integer or array");
      }
    }
    if (o.contains("compression_rank")) {
      const json &r = o.at("compression_rank");
      if (r.is_null() || (r.is_string() && r.get<std::string>() == "inf")) {
        c.outer.compression_rank.reset();
      } else if (r.is_number_integer()) {
        c.outer.compression_rank = r.get<Index>();
      } else {
        throw ConfigError("outer.compression_rank must be an integer, null "
                          "or \"inf\"");
      }
    }
  }
  c.outer.validate();

  if (doc.contains("inner")) {
    const json &i = doc.at("inner");
    check_keys(i, {"max_iters", "abs_tol", "rel_tol"}, "inner");
    c.inner.max_iters = get_int(i, "max_iters", c.inner.max_iters, "inner");
    c.inner.abs_tol = get_double(i, "abs_tol", c.inner.abs_tol, "inner");
    c.inner.rel_tol = get_double(i, "rel_tol", c.inner.rel_tol, "inner");
  }
  c.inner.validate();

  if (doc.contains("sod")) {
    const json &s = doc.at("sod");
    check_keys(s, {"subset_size"}, "sod");
    c.sod_subset = get_int(s, "subset_size", c.sod_subset, "sod");
    if (c.sod_subset < 1) {
      throw ConfigError("sod.subset_size must be >= 1");
    }
  }

  if (doc.contains("metrics")) {
    const json &m = doc.at("metrics");
    check_keys(m, {"cadence", "mc_samples", "predictor", "ece_bins", "train"},
               "metrics");
    c.metrics.cadence = cadence_from_string(
        get_string(m, "cadence", to_string(c.metrics.cadence), "metrics"));
    c.metrics.mc_samples =
        get_int(m, "mc_samples", c.metrics.mc_samples, "metrics");
    const std::string predictor =
        get_string(m, "predictor", "probit", "metrics");
    if (predictor != "probit" && predictor != "mc") {
      throw ConfigError("metrics.predictor must be probit or mc");
    }
    c.metrics.mc_classification = predictor == "mc";
    c.metrics.ece_bins = get_int(m, "ece_bins", c.metrics.ece_bins, "metrics");
    c.metrics.train = get_bool(m, "train", c.metrics.train, "metrics");
    if (c.metrics.mc_samples < 1 || c.metrics.ece_bins < 1) {
      throw ConfigError("metrics.mc_samples and metrics.ece_bins must be >= 1");
    }
  }
  return c;
}

json ExperimentConfig::to_json() const {
  json doc;
  doc["seed"] = seed;
  doc["output_dir"] = output_dir;
  doc["likelihood"] = {{"family", ncgp::to_string(likelihood)},
                       {"noise_variance", noise_variance}};
  if (data.generator) {
    const GeneratorSpec &g = *data.generator;
    doc["data"]["generator"] = {{"kind", ncgp::to_string(g.kind)},
                                {"seed", g.seed},
                                {"repeat", g.repeat},
                                {"num_points", g.num_points},
                                {"num_test", g.num_test},
                                {"num_classes", g.num_classes},
                                {"n_per_class", g.n_per_class},
                                {"n_test_per_class", g.n_test_per_class},
                                {"lengthscale", g.lengthscale},
                                {"outputscale", g.outputscale}};
  } else {
    json csv = {{"train", data.train_csv},
                {"domain", ncgp::to_string(data.domain)},
                {"num_classes", data.num_classes}};
    if (!data.test_csv.empty()) {
      csv["test"] = data.test_csv;
    }
    doc["data"]["csv"] = csv;
  }
  json prior_json = kernel_json(prior.kernel);
  if (!prior.per_output.empty()) {
    prior_json["kernels"] = json::array();
    for (const auto &k : prior.per_output) {
      prior_json["kernels"].push_back(kernel_json(k));
    }
  }
  if (prior.mean.size() <= 1) {
    prior_json["mean"] = prior.mean.empty() ? 0.0 : prior.mean[0];
  } else {
    prior_json["mean"] = prior.mean;
  }
  doc["prior"] = prior_json;
  doc["method"] = method == Method::IterNCGP ? "iterncgp" : "sod";
  doc["policy"] = ncgp::to_string(policy);
  doc["outer"] = {{"delta", outer.delta},
                  {"max_newton_steps", outer.max_newton_steps},
                  {"inner_schedule", outer.inner_schedule},
                  {"recycle", outer.recycle},
                  {"compression_rank", outer.compression_rank
                                           ? json(*outer.compression_rank)
                                           : json(nullptr)},
                  {"tile", outer.tile}};
  doc["inner"] = {{"max_iters", inner.max_iters},
                  {"abs_tol", inner.abs_tol},
                  {"rel_tol", inner.rel_tol}};
  doc["sod"] = {{"subset_size", sod_subset}};
  doc["metrics"] = {{"cadence", to_string(metrics.cadence)},
                    {"mc_samples", metrics.mc_samples},
                    {"predictor", metrics.mc_classification ? "mc" : "probit"},
                    {"ece_bins", metrics.ece_bins},
                    {"train", metrics.train}};
  return doc;
}

json read_json_file(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path);
  }
  try {
    return json::parse(in);
  } catch (const json::parse_error &err) {
    throw ConfigError(path + ": " + err.what());
  }
}

ExperimentConfig load_config(const std::string &path) {
  return ExperimentConfig::from_json(read_json_file(path));
}

void write_text_atomic(const std::string &path, const std::string &content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot write " + path);
    }
    out << content;
    if (!out) {
      throw IoError("write failed for " + path);
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
  }
}

LoadedData load_data(const ExperimentConfig &config) {
  LoadedData out;
  if (config.data.generator) {
    GeneratedData g = generate(*config.data.generator);
    out.train = std::move(g.train);
    out.test = std::move(g.test);
    return out;
  }
  out.train = read_dataset_csv(config.data.train_csv, config.data.domain,
                               config.data.num_classes);
  if (!config.data.test_csv.empty()) {
    out.test = read_dataset_csv(config.data.test_csv, config.data.domain,
                                out.train.num_classes);
  }
  return out;
}

Index num_latent_outputs(LikelihoodFamily family, const Dataset &data) {
  return family == LikelihoodFamily::Softmax ? data.num_classes : 1;
}

std::shared_ptr<const MultiOutputPrior> make_prior(const PriorConfig &prior,
                                                   Index num_outputs) {
  std::vector<KernelSpec> kernels;
  if (prior.per_output.empty()) {
    kernels.assign(static_cast<std::size_t>(num_outputs), prior.kernel);
  } else {
    if (static_cast<Index>(prior.per_output.size()) != num_outputs) {
      throw ConfigError("prior.kernels has " +
                        std::to_string(prior.per_output.size()) +
                        " entries, model has " + std::to_string(num_outputs) +
                        " outputs");
    }
    kernels = prior.per_output;
  }
  Vector mean = Vector::Zero(num_outputs);
  if (prior.mean.size() == 1) {
    mean.setConstant(prior.mean[0]);
  } else if (!prior.mean.empty()) {
    if (static_cast<Index>(prior.mean.size()) != num_outputs) {
      throw ConfigError("prior.mean needs 1 or C entries");
    }
    for (Index c = 0; c < num_outputs; ++c) {
      mean[c] = prior.mean[c];
    }
  }
  return std::make_shared<const MultiOutputPrior>(std::move(kernels),
                                                  std::move(mean));
}

std::uint64_t metric_seed(std::uint64_t seed, bool train) {
  return random::derive_seed(seed, train ? 0xE7A1 : 0xE7A2);
}

MetricValues evaluate_metrics(const PosteriorBelief &belief,
                              const Dataset &data, LikelihoodFamily family,
                              double noise_variance,
                              const MetricsConfig &metrics,
                              std::uint64_t seed) {
  MetricValues out;
  if (data.size() == 0) {
    return out;
  }
  const Matrix mean = posterior_mean(belief, data.X);
  const Matrix var = posterior_marginal_var(belief, data.X);
  switch (family) {
  case LikelihoodFamily::Poisson:
    out.nll = poisson_mc_nll(mean, var, data.y, metrics.mc_samples, seed);
    break;
  case LikelihoodFamily::Gaussian:
    out.nll = gaussian_predictive_nll(mean, var, data.y, noise_variance);
    break;
  case LikelihoodFamily::BernoulliLogistic:
  case LikelihoodFamily::Softmax: {
    const Matrix probs =
        metrics.mc_classification
            ? mc_predict(mean, var, family, metrics.mc_samples, seed)
                  .probabilities
            : probit_predict(mean, var);
    out.nll = metric_nll(probs, data.y);
    out.accuracy = metric_accuracy(probs, data.y);
    out.ece = metric_ece(probs, data.y, metrics.ece_bins);
    break;
  }
  }
  return out;
}

// ---- belief artifact

namespace {

class ByteWriter {
public:
  void raw(const void *p, std::size_t n) {
    const auto *b = static_cast<const char *>(p);
    if constexpr (std::endian::native == std::endian::little) {
      buf_.append(b, n);
    } else {
      for (std::size_t k = n; k > 0; --k) {
        buf_.push_back(b[k - 1]);
      }
    }
  }
  void u32(std::uint32_t x) { raw(&x, 4); }
  void u64(std::uint64_t x) { raw(&x, 8); }
  void f64(double x) { raw(&x, 8); }
  void bytes(const std::string &s) { buf_.append(s); }
  const std::string &str() const { return buf_; }

private:
  std::string buf_;
};

class ByteReader {
public:
  ByteReader(std::string data, std::string path)
      : data_(std::move(data)), path_(std::move(path)) {}
  void raw(void *p, std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw IoError(path_ + ": truncated belief artifact");
    }
    auto *b = static_cast<char *>(p);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(b, data_.data() + pos_, n);
    } else {
      for (std::size_t k = 0; k < n; ++k) {
        b[n - 1 - k] = data_[pos_ + k];
      }
    }
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t x;
    raw(&x, 4);
    return x;
  }
  std::uint64_t u64() {
    std::uint64_t x;
    raw(&x, 8);
    return x;
  }
  double f64() {
    double x;
    raw(&x, 8);
    return x;
  }
  std::string bytes(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw IoError(path_ + ": truncated belief artifact");
    }
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

private:
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + path);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

void save_belief(const std::string &path, const PosteriorBelief &belief,
                 const json &config_echo) {
  belief.check();
  const Matrix &X = *belief.X;
  ByteWriter w;
  w.bytes("NCGP");
  w.u32(kBeliefVersion);
  w.u64(static_cast<std::uint64_t>(X.rows()));
  w.u64(static_cast<std::uint64_t>(X.cols()));
  w.u64(static_cast<std::uint64_t>(belief.num_outputs()));
  w.u64(static_cast<std::uint64_t>(belief.Q.rank()));
  w.u64(static_cast<std::uint64_t>(belief.outer_step));
  w.u64(static_cast<std::uint64_t>(belief.inner_iter));
  for (Index n = 0; n < X.rows(); ++n) {
    for (Index d = 0; d < X.cols(); ++d) {
      w.f64(X(n, d));
    }
  }
  for (Index k = 0; k < belief.v.size(); ++k) {
    w.f64(belief.v[k]);
  }
  for (Index b = 0; b < belief.Q.rank(); ++b) {
    for (Index k = 0; k < belief.Q.dim(); ++k) {
      w.f64(belief.Q.columns(k, b));
    }
  }
  json blob = config_echo;
  json prior_json;
  for (const auto &k : belief.prior->kernels()) {
    prior_json["kernels"].push_back(kernel_json(k));
  }
  prior_json["mean"] = std::vector<double>(
      belief.prior->mean().data(),
      belief.prior->mean().data() + belief.prior->mean().size());
  blob["resolved_prior"] = prior_json;
  const std::string text = blob.dump();
  w.u64(text.size());
  w.bytes(text);
  write_text_atomic(path, w.str());
}

LoadedBelief load_belief(const std::string &path) {
  ByteReader r(read_file(path), path);
  if (r.bytes(4) != "NCGP") {
    throw IoError(path + ": not a belief artifact (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kBeliefVersion) {
    throw VersionMismatch(path + ": belief format version " +
                          std::to_string(version) + " is not supported by "
                          "this build (expects " +
                          std::to_string(kBeliefVersion) +
                          "); re-run fit with this version to upgrade it");
  }
  const auto N = static_cast<Index>(r.u64());
  const auto D = static_cast<Index>(r.u64());
  const auto C = static_cast<Index>(r.u64());
  const auto B = static_cast<Index>(r.u64());
  const auto step = static_cast<Index>(r.u64());
  const auto iter = static_cast<Index>(r.u64());
  auto X = std::make_shared<Matrix>(N, D);
  for (Index n = 0; n < N; ++n) {
    for (Index d = 0; d < D; ++d) {
      (*X)(n, d) = r.f64();
    }
  }
  Vector v(N * C);
  for (Index k = 0; k < v.size(); ++k) {
    v[k] = r.f64();
  }
  Matrix Q(N * C, B);
  for (Index b = 0; b < B; ++b) {
    for (Index k = 0; k < N * C; ++k) {
      Q(k, b) = r.f64();
    }
  }
  const auto len = static_cast<std::size_t>(r.u64());
  LoadedBelief out;
  try {
    out.config = json::parse(r.bytes(len));
  } catch (const json::parse_error &err) {
    throw IoError(path + ": corrupt config blob: " + err.what());
  }
  const json &p = out.config.at("resolved_prior");
  std::vector<KernelSpec> kernels;
  for (const auto &k : p.at("kernels")) {
    kernels.push_back(parse_kernel(k, KernelSpec{}, "belief.prior"));
  }
  const auto mean_values = p.at("mean").get<std::vector<double>>();
  Vector mean(static_cast<Index>(mean_values.size()));
  for (Index c = 0; c < mean.size(); ++c) {
    mean[c] = mean_values[c];
  }
  auto prior =
      std::make_shared<const MultiOutputPrior>(std::move(kernels), std::move(mean));
  require(prior->num_outputs() == C, "belief artifact: output count mismatch");
  out.belief = PosteriorBelief{prior, X, std::move(v),
                               linalg::LowRankRoot(std::move(Q)), step, iter};
  return out;
}

// ---- commands

void apply_overrides(ExperimentConfig &config, const RunOptions &options) {
  if (options.out_dir) {
    config.output_dir = *options.out_dir;
  }
  if (options.seed) {
    config.seed = *options.seed;
  }
  if (options.cadence) {
    config.metrics.cadence = *options.cadence;
  }
}

namespace {

void ensure_dir(const std::string &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create directory " + dir + ": " + ec.message());
  }
}

std::string join(const std::string &dir, const std::string &name) {
  return (fs::path(dir) / name).string();
}

json metrics_json(const MetricValues &m) {
  json j = {{"nll", m.nll}};
  j["accuracy"] = m.accuracy ? json(*m.accuracy) : json(nullptr);
  j["ece"] = m.ece ? json(*m.ece) : json(nullptr);
  return j;
}

} // namespace

std::vector<std::string> cmd_generate(const ExperimentConfig &config) {
  if (!config.data.generator) {
    throw ConfigError("generate needs a data.generator section");
  }
  ensure_dir(config.output_dir);
  const GeneratorSpec &spec = *config.data.generator;
  return write_generated(config.output_dir, ncgp::to_string(spec.kind), spec,
                         generate(spec));
}

FitReport cmd_fit(const ExperimentConfig &config) {
  ensure_dir(config.output_dir);
  const LoadedData data = load_data(config);
  const Index C = num_latent_outputs(config.likelihood, data.train);
  const auto prior = make_prior(config.prior, C);
  LikelihoodOptions lopts;
  lopts.noise_variance = config.noise_variance;
  const auto likelihood = make_likelihood(config.likelihood, data.train, lopts);
  const auto X = std::make_shared<const Matrix>(data.train.X);

  struct Row {
    Index step, iter, cum_iters, cum_matvecs;
    double wall;
    std::optional<MetricValues> train, test;
  };
  std::vector<Row> rows;

  auto record = [&](Index step, Index iter, Index cum_iters, Index cum_matvecs,
                    double wall, const PosteriorBelief &belief) {
    Row row{step, iter, cum_iters, cum_matvecs, wall, std::nullopt,
            std::nullopt};
    if (config.metrics.train) {
      row.train = evaluate_metrics(belief, data.train, config.likelihood,
                                   config.noise_variance, config.metrics,
                                   metric_seed(config.seed, true));
    }
    if (data.test) {
      row.test = evaluate_metrics(belief, *data.test, config.likelihood,
                                  config.noise_variance, config.metrics,
                                  metric_seed(config.seed, false));
    }
    rows.push_back(std::move(row));
  };

  FitCallbacks callbacks;
  Index prev_iters = 0;
  Index prev_matvecs = 0;
  if (config.metrics.cadence == Cadence::Iter &&
      config.method == Method::IterNCGP) {
    callbacks.on_iteration = [&](Index step, const IterationRecord &rec,
                                 const PosteriorBelief &belief) {
      record(step, rec.iteration, prev_iters + rec.iteration,
             prev_matvecs + 2 * rec.iteration, rec.wallclock_s, belief);
    };
  }
  callbacks.on_step = [&](const StepRecord &rec,
                          const PosteriorBelief &belief) {
    prev_iters = rec.cum_inner_iters;
    prev_matvecs = rec.cum_matvecs;
    const bool want = config.metrics.cadence == Cadence::Step ||
                      (config.metrics.cadence == Cadence::Iter &&
                       config.method == Method::SoD);
    if (want) {
      record(rec.step, rec.inner_iters, rec.cum_inner_iters, rec.cum_matvecs,
             rec.wallclock_s, belief);
    }
  };

  FitResult result =
      config.method == Method::IterNCGP
          ? fit(prior, X, *likelihood, config.outer, config.inner,
                config.policy, callbacks)
          : sod_fit(prior, data.train.X, *likelihood,
                    std::min<Index>(config.sod_subset, data.train.size()),
                    config.seed, config.outer, callbacks);

  // metrics.csv holds only deterministic columns; timing lives beside it
  std::ostringstream metrics_csv;
  std::ostringstream timing_csv;
  metrics_csv << "outer_step,inner_iter,cum_inner_iters,cum_matvecs,"
                 "train_nll,test_nll,train_acc,test_acc,train_ece,test_ece\n";
  timing_csv << "outer_step,inner_iter,wallclock_s\n";
  for (const Row &row : rows) {
    auto nll = [](const std::optional<MetricValues> &m) {
      return m ? fmt(m->nll) : std::string();
    };
    auto acc = [](const std::optional<MetricValues> &m) {
      return m ? fmt_opt(m->accuracy) : std::string();
    };
    auto ece = [](const std::optional<MetricValues> &m) {
      return m ? fmt_opt(m->ece) : std::string();
    };
    metrics_csv << row.step << ',' << row.iter << ',' << row.cum_iters << ','
                << row.cum_matvecs << ',' << nll(row.train) << ','
                << nll(row.test) << ',' << acc(row.train) << ','
                << acc(row.test) << ',' << ece(row.train) << ','
                << ece(row.test) << '\n';
    timing_csv << row.step << ',' << row.iter << ',' << fmt(row.wall) << '\n';
  }

  std::ostringstream trace_csv;
  trace_csv << "step,inner_iters,cum_matvecs,wallclock_s,residual_norm,"
               "termination,initial_rank,memory_bytes\n";
  for (const StepRecord &s : result.trace.steps) {
    trace_csv << s.step << ',' << s.inner_iters << ',' << s.cum_matvecs << ','
              << fmt(s.wallclock_s) << ',' << fmt(s.residual_norm) << ','
              << ncgp::to_string(s.termination) << ',' << s.initial_rank << ','
              << s.memory_bytes << '\n';
  }

  json summary;
  summary["status"] = ncgp::to_string(result.trace.status);
  summary["method"] = config.method == Method::IterNCGP ? "iterncgp" : "sod";
  summary["outer_steps"] = result.trace.steps.size();
  summary["peak_memory_bytes"] = result.trace.peak_memory_bytes;
  if (config.method == Method::SoD) {
    summary["dense_size"] = result.trace.dense_size;
    summary["jitter_retries"] = result.trace.jitter_retries;
  }
  if (!result.trace.steps.empty()) {
    const StepRecord &last = result.trace.steps.back();
    summary["total_inner_iters"] = last.cum_inner_iters;
    summary["cum_matvecs"] = last.cum_matvecs;
    summary["wallclock_s"] = last.wallclock_s;
    summary["final_residual_norm"] = last.residual_norm;
    summary["final_pseudo_target_norm"] = last.pseudo_target_norm;
    summary["final_relative_change"] = last.relative_change;
  }
  summary["final_latent_norm"] = (result.f - prior->mean_vector(
                                                 result.f.size() / C))
                                     .norm();
  json final_metrics;
  if (config.metrics.train) {
    final_metrics["train"] = metrics_json(evaluate_metrics(
        result.belief, data.train, config.likelihood, config.noise_variance,
        config.metrics, metric_seed(config.seed, true)));
  }
  if (data.test) {
    final_metrics["test"] = metrics_json(evaluate_metrics(
        result.belief, *data.test, config.likelihood, config.noise_variance,
        config.metrics, metric_seed(config.seed, false)));
  }
  summary["final"] = final_metrics;
  if (!rows.empty() && data.test) {
    double best_nll = std::numeric_limits<double>::infinity();
    double best_acc = -1.0;
    for (const Row &row : rows) {
      best_nll = std::min(best_nll, row.test->nll);
      if (row.test->accuracy) {
        best_acc = std::max(best_acc, *row.test->accuracy);
      }
    }
    summary["best"]["test_nll"] = best_nll;
    if (best_acc >= 0.0) {
      summary["best"]["test_accuracy"] = best_acc;
    }
  }
  summary["config"] = config.to_json();

  FitReport report;
  report.status = result.trace.status;
  report.metrics_path = join(config.output_dir, "metrics.csv");
  report.summary_path = join(config.output_dir, "summary.json");
  report.belief_path = join(config.output_dir, "belief.bin");
  write_text_atomic(report.metrics_path, metrics_csv.str());
  write_text_atomic(join(config.output_dir, "timing.csv"), timing_csv.str());
  write_text_atomic(join(config.output_dir, "trace.csv"), trace_csv.str());
  write_text_atomic(report.summary_path, summary.dump(2) + "\n");
  json echo = config.to_json();
  echo.erase("output_dir");
  save_belief(report.belief_path, result.belief, echo);
  report.summary = std::move(summary);
  return report;
}

json cmd_predict(const std::string &belief_path, const std::string &inputs_csv,
                 const std::string &out_csv, const PredictOptions &options) {
  const LoadedBelief loaded = load_belief(belief_path);
  const ExperimentConfig config = ExperimentConfig::from_json([&] {
    json c = loaded.config;
    c.erase("resolved_prior");
    return c;
  }());

  Matrix X(0, loaded.belief.X->cols());
  std::optional<Dataset> labelled;
  std::error_code ec;
  const bool empty_file = fs::exists(inputs_csv, ec) &&
                          fs::file_size(inputs_csv, ec) == 0;
  if (!fs::exists(inputs_csv, ec)) {
    throw IoError("cannot open " + inputs_csv);
  }
  if (!empty_file) {
    std::ifstream probe(inputs_csv);
    std::string header;
    std::getline(probe, header);
    const bool has_y = header.find(",y") != std::string::npos ||
                       header.rfind("y", 0) == 0;
    if (has_y) {
      Dataset d = read_dataset_csv(inputs_csv, default_domain(config.likelihood),
                                   config.likelihood == LikelihoodFamily::Softmax
                                       ? loaded.belief.num_outputs()
                                       : 0);
      X = d.X;
      labelled = std::move(d);
    } else {
      X = read_inputs_csv(inputs_csv);
    }
  }
  if (X.rows() > 0 && X.cols() != loaded.belief.X->cols()) {
    throw InputError(inputs_csv + ": input dimension " +
                     std::to_string(X.cols()) + " does not match the belief (" +
                     std::to_string(loaded.belief.X->cols()) + ")");
  }

  const Matrix mean = posterior_mean(loaded.belief, X);
  const Matrix var = posterior_marginal_var(loaded.belief, X);
  MetricsConfig mcfg = config.metrics;
  mcfg.mc_samples = options.mc_samples;
  if (options.mc_classification) {
    mcfg.mc_classification = *options.mc_classification;
  }

  std::ostringstream out;
  const Index C = loaded.belief.num_outputs();
  switch (config.likelihood) {
  case LikelihoodFamily::BernoulliLogistic:
  case LikelihoodFamily::Softmax: {
    const Matrix probs =
        mcfg.mc_classification
            ? mc_predict(mean, var, config.likelihood, mcfg.mc_samples,
                         options.seed)
                  .probabilities
            : probit_predict(mean, var);
    const Index K = config.likelihood == LikelihoodFamily::Softmax ? C : 2;
    out << "point_id";
    for (Index k = 0; k < K; ++k) {
      out << ",p_" << k;
    }
    out << '\n';
    for (Index n = 0; n < probs.rows(); ++n) {
      out << n;
      for (Index k = 0; k < K; ++k) {
        out << ',' << fmt(probs(n, k));
      }
      out << '\n';
    }
    break;
  }
  case LikelihoodFamily::Poisson: {
    const PredictiveSummary s = mc_predict(mean, var, config.likelihood,
                                           mcfg.mc_samples, options.seed);
    out << "point_id,latent_mean,latent_var,rate_median,rate_lower,"
           "rate_upper\n";
    for (Index n = 0; n < mean.rows(); ++n) {
      out << n << ',' << fmt(mean(n, 0)) << ',' << fmt(var(n, 0)) << ','
          << fmt(s.rates.median[n]) << ',' << fmt(s.rates.lower[n]) << ','
          << fmt(s.rates.upper[n]) << '\n';
    }
    break;
  }
  case LikelihoodFamily::Gaussian:
    out << "point_id,mean,var\n";
    for (Index n = 0; n < mean.rows(); ++n) {
      out << n << ',' << fmt(mean(n, 0)) << ',' << fmt(var(n, 0)) << '\n';
    }
    break;
  }
  const fs::path parent = fs::path(out_csv).parent_path();
  if (!parent.empty()) {
    ensure_dir(parent.string());
  }
  write_text_atomic(out_csv, out.str());

  json report = {{"predictions", out_csv}, {"points", X.rows()}};
  if (labelled) {
    report["metrics"] = metrics_json(
        evaluate_metrics(loaded.belief, *labelled, config.likelihood,
                         config.noise_variance, mcfg, options.seed));
  }
  return report;
}

json merge_patch(json base, const json &patch) {
  if (!patch.is_object()) {
    return patch;
  }
  if (!base.is_object()) {
    base = json::object();
  }
  for (const auto &item : patch.items()) {
    if (item.value().is_object() && base.contains(item.key()) &&
        base[item.key()].is_object()) {
      base[item.key()] = merge_patch(base[item.key()], item.value());
    } else {
      base[item.key()] = item.value();
    }
  }
  return base;
}

namespace {

json spread(std::vector<double> values) {
  if (values.empty()) {
    return json(nullptr);
  }
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  const double median = n % 2 ? values[n / 2]
                              : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return {{"min", values.front()},
          {"median", median},
          {"max", values.back()},
          {"n", n}};
}

} // namespace

json cmd_benchmark(const json &grid, const RunOptions &options) {
  check_keys(grid, {"base", "cells", "repeats", "output_dir"}, "benchmark");
  if (!grid.contains("base") || !grid.contains("cells") ||
      !grid.at("cells").is_array() || grid.at("cells").empty()) {
    throw ConfigError("benchmark needs 'base' and a non-empty 'cells' array");
  }
  const auto repeats = get_int(grid, "repeats", 1, "benchmark");
  if (repeats < 1) {
    throw ConfigError("benchmark.repeats must be >= 1");
  }
  std::string out_dir = options.out_dir.value_or(
      get_string(grid, "output_dir", "benchmark", "benchmark"));
  ensure_dir(out_dir);

  // validate every cell before running anything
  std::vector<std::pair<std::string, json>> cells;
  std::set<std::string> names;
  for (const auto &cell : grid.at("cells")) {
    check_keys(cell, {"name", "overrides"}, "benchmark.cells");
    const std::string name = get_string(cell, "name", "", "benchmark.cells");
    if (name.empty() || !names.insert(name).second) {
      throw ConfigError("benchmark cell names must be unique and non-empty");
    }
    json merged =
        merge_patch(grid.at("base"), cell.value("overrides", json::object()));
    ExperimentConfig::from_json(merged);
    cells.emplace_back(name, std::move(merged));
  }

  const char *metric_names[] = {"final_test_nll",  "final_test_accuracy",
                                "final_test_ece",  "final_train_nll",
                                "best_test_nll",   "cum_matvecs",
                                "wallclock_s",     "peak_memory_bytes",
                                "outer_steps"};
  json table = json::array();
  json failures = json::array();
  std::ostringstream csv;
  csv << "cell,metric,n,min,median,max\n";
  for (const auto &[name, merged] : cells) {
    std::map<std::string, std::vector<double>> values;
    for (std::int64_t r = 0; r < repeats; ++r) {
      try {
        ExperimentConfig cfg = ExperimentConfig::from_json(merged);
        apply_overrides(cfg, RunOptions{std::nullopt, options.seed,
                                        options.cadence, true});
        cfg.seed += static_cast<std::uint64_t>(r);
        if (cfg.data.generator) {
          cfg.data.generator->repeat += static_cast<std::uint64_t>(r);
        }
        cfg.output_dir = join(join(out_dir, name), "run_" + std::to_string(r));
        const FitReport rep = cmd_fit(cfg);
        const json &s = rep.summary;
        auto take = [&](const char *key, const json &v) {
          if (v.is_number()) {
            values[key].push_back(v.get<double>());
          }
        };
        if (s["final"].contains("test")) {
          take("final_test_nll", s["final"]["test"]["nll"]);
          take("final_test_accuracy", s["final"]["test"]["accuracy"]);
          take("final_test_ece", s["final"]["test"]["ece"]);
        }
        if (s["final"].contains("train")) {
          take("final_train_nll", s["final"]["train"]["nll"]);
        }
        if (s.contains("best")) {
          take("best_test_nll", s["best"]["test_nll"]);
        }
        take("cum_matvecs", s.value("cum_matvecs", json(nullptr)));
        take("wallclock_s", s.value("wallclock_s", json(nullptr)));
        take("peak_memory_bytes", s["peak_memory_bytes"]);
        take("outer_steps", s["outer_steps"]);
        if (rep.status == FitStatus::ConvergenceStalled) {
          failures.push_back(
              {{"cell", name}, {"repeat", r}, {"error", "convergence stalled"}});
        }
      } catch (const std::exception &err) {
        failures.push_back({{"cell", name}, {"repeat", r}, {"error", err.what()}});
      }
    }
    json row = {{"cell", name}};
    for (const char *metric : metric_names) {
      row[metric] = spread(values[metric]);
      if (!row[metric].is_null()) {
        const json &sp = row[metric];
        csv << name << ',' << metric << ',' << sp["n"].get<std::size_t>()
            << ',' << fmt(sp["min"].get<double>()) << ','
            << fmt(sp["median"].get<double>()) << ','
            << fmt(sp["max"].get<double>()) << '\n';
      }
    }
    table.push_back(row);
  }
  json result = {{"repeats", repeats}, {"cells", table}, {"failures", failures}};
  write_text_atomic(join(out_dir, "benchmark.json"), result.dump(2) + "\n");
  write_text_atomic(join(out_dir, "benchmark.csv"), csv.str());
  return result;
}

int run_main(int argc, char **argv) {
  CLI::App app{"Iterative Laplace inference for non-conjugate GPs"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::string cadence;

  auto add_common = [&](CLI::App *sub) {
    sub->add_option("--config", config_path, "JSON config")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed (overrides config)");
    sub->add_option("--cadence", cadence, "metric cadence: step|iter|never");
  };
  CLI::App *gen = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(gen);
  CLI::App *fitc = app.add_subcommand("fit", "run inference, write trace");
  add_common(fitc);
  CLI::App *bench = app.add_subcommand("benchmark", "run a config grid");
  add_common(bench);

  CLI::App *pred = app.add_subcommand("predict", "predict from a belief");
  std::string belief_path;
  std::string inputs;
  std::string pred_out = ".";
  Index mc_samples = 1000;
  std::uint64_t pred_seed = 0;
  bool pred_mc = false;
  pred->add_option("--belief", belief_path, "belief.bin")->required();
  pred->add_option("--inputs", inputs, "inputs CSV")->required();
  pred->add_option("--out", pred_out, "output directory");
  pred->add_option("--mc-samples", mc_samples, "MC samples");
  auto *seed_opt = pred->add_option("--seed", pred_seed, "MC seed");
  pred->add_flag("--mc", pred_mc, "MC class probabilities instead of probit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunOptions opts;
    for (CLI::App *sub : {gen, fitc, bench}) {
      if (sub->parsed()) {
        if (sub->count("--out")) {
          opts.out_dir = out_dir;
        }
        if (sub->count("--seed")) {
          opts.seed = seed;
        }
        if (sub->count("--cadence")) {
          opts.cadence = cadence_from_string(cadence);
        }
      }
    }
    if (gen->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      apply_overrides(cfg, opts);
      if (opts.seed && cfg.data.generator) {
        cfg.data.generator->seed = *opts.seed;
      }
      for (const auto &p : cmd_generate(cfg)) {
        std::cout << p << '\n';
      }
      return kExitOk;
    }
    if (fitc->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      apply_overrides(cfg, opts);
      const FitReport rep = cmd_fit(cfg);
      std::cout << rep.summary_path << '\n'
                << "status: " << ncgp::to_string(rep.status) << '\n';
      return rep.status == FitStatus::ConvergenceStalled ? kExitStalled
                                                          : kExitOk;
    }
    if (bench->parsed()) {
      const json grid = read_json_file(config_path);
      const json table = cmd_benchmark(grid, opts);
      std::cout << join(opts.out_dir.value_or(grid.value("output_dir",
                                                         "benchmark")),
                        "benchmark.json")
                << '\n';
      return table["failures"].empty() ? kExitOk : kExitFailure;
    }
    if (pred->parsed()) {
      PredictOptions popts;
      popts.mc_samples = mc_samples;
      if (pred_mc) {
        popts.mc_classification = true;
      }
      if (seed_opt->count()) {
        popts.seed = pred_seed;
      } else {
        // same stream as the fit-time training metrics
        const LoadedBelief lb = load_belief(belief_path);
        popts.seed = metric_seed(lb.config.value("seed", std::uint64_t{0}), true);
        popts.mc_samples =
            lb.config["metrics"].value("mc_samples", popts.mc_samples);
        if (pred->count("--mc-samples")) {
          popts.mc_samples = mc_samples;
        }
      }
      const json rep = cmd_predict(belief_path, inputs,
                                   join(pred_out, "predictions.csv"), popts);
      std::cout << rep.dump(2) << '\n';
      return kExitOk;
    }
  } catch (const ConfigError &err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const IoError &err) {
    std::cerr << "i/o error: " << err.what() << '\n';
    return kExitIo;
  } catch (const VersionMismatch &err) {
    std::cerr << "version mismatch: " << err.what() << '\n';
    return kExitFailure;
  } catch (const std::exception &err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

} // namespace ncgp::cli
