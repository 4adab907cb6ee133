#include "ncgp/likelihoods.hpp"

#include "ncgp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ncgp {

std::string to_string(LikelihoodFamily family) {
  switch (family) {
  case LikelihoodFamily::Gaussian:
    return "gaussian";
  case LikelihoodFamily::Poisson:
    return "poisson";
  case LikelihoodFamily::BernoulliLogistic:
    return "logistic";
  case LikelihoodFamily::Softmax:
    return "softmax";
  }
  return "?";
}

LikelihoodFamily likelihood_family_from_string(const std::string &name) {
  if (name == "gaussian") {
    return LikelihoodFamily::Gaussian;
  }
  if (name == "poisson") {
    return LikelihoodFamily::Poisson;
  }
  if (name == "logistic" || name == "bernoulli") {
    return LikelihoodFamily::BernoulliLogistic;
  }
  if (name == "softmax") {
    return LikelihoodFamily::Softmax;
  }
  throw ConfigError("unknown likelihood '" + name + "'");
}

void Likelihood::check_latent(const Vector &f, const char *who) const {
  require(f.size() == dim(), std::string(who) + ": length(f) != N*C");
  if (!f.allFinite()) {
    throw InputError(std::string(who) + ": non-finite latent values");
  }
}

void Likelihood::check_pair(const Vector &f, const Vector &v,
                            const char *who) const {
  check_latent(f, who);
  require(v.size() == dim(), std::string(who) + ": length(v) != N*C");
}

namespace {

Vector gather(const Vector &x, const std::vector<Index> &rows) {
  Vector out(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] >= 0 && rows[k] < x.size(), "subset: index out of range");
    out[static_cast<Index>(k)] = x[rows[k]];
  }
  return out;
}

LinearOperator diagonal_operator(Vector diag) {
  return [d = std::move(diag)](const Vector &v) -> Vector {
    require(v.size() == d.size(), "diagonal operator: dimension mismatch");
    return d.cwiseProduct(v);
  };
}

} // namespace

double log_sigmoid(double x) {
  // -log(1 + exp(-x)) without overflow
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double poisson_log_pmf(double count, double log_rate) {
  return count * log_rate - std::exp(log_rate) - std::lgamma(count + 1.0);
}

// ---- Gaussian

GaussianLikelihood::GaussianLikelihood(Vector targets, Vector noise)
    : Likelihood(std::move(targets)), noise_(std::move(noise)) {
  if (noise_.size() == 1 && num_points() != 1) {
    noise_ = Vector::Constant(num_points(), noise_[0]);
  }
  require(noise_.size() == num_points(),
          "GaussianLikelihood: noise length must be 1 or N");
  if (!(noise_.array() > 0.0).all() || !noise_.allFinite()) {
    throw ConfigError("Gaussian noise variances must be positive");
  }
}

GaussianLikelihood::GaussianLikelihood(Vector targets, double noise)
    : GaussianLikelihood(std::move(targets), Vector::Constant(1, noise)) {}

double GaussianLikelihood::log_lik(const Vector &f) const {
  check_latent(f, "log_lik");
  double total = 0.0;
  for (Index n = 0; n < num_points(); ++n) {
    const double r = targets()[n] - f[n];
    total += -0.5 * std::log(2.0 * std::numbers::pi * noise_[n]) -
             0.5 * r * r / noise_[n];
  }
  return total;
}

Vector GaussianLikelihood::grad_log_lik(const Vector &f) const {
  check_latent(f, "grad_log_lik");
  return (targets() - f).cwiseQuotient(noise_);
}

LinearOperator GaussianLikelihood::w_operator(const Vector &f) const {
  check_latent(f, "w_operator");
  return diagonal_operator(noise_.cwiseInverse());
}

LinearOperator GaussianLikelihood::w_inv_operator(const Vector &f) const {
  check_latent(f, "w_inv_operator");
  return diagonal_operator(noise_);
}

std::unique_ptr<Likelihood>
GaussianLikelihood::subset(const std::vector<Index> &rows) const {
  return std::make_unique<GaussianLikelihood>(gather(targets(), rows),
                                              gather(noise_, rows));
}

// ---- Poisson

PoissonLikelihood::PoissonLikelihood(Vector counts)
    : Likelihood(std::move(counts)) {
  for (Index n = 0; n < num_points(); ++n) {
    const double y = targets()[n];
    if (!(y >= 0.0) || y != std::floor(y)) {
      throw InputError("Poisson targets must be nonnegative integers");
    }
  }
}

double PoissonLikelihood::log_lik(const Vector &f) const {
  check_latent(f, "log_lik");
  double total = 0.0;
  for (Index n = 0; n < num_points(); ++n) {
    total += poisson_log_pmf(targets()[n], f[n]);
  }
  return total;
}

Vector PoissonLikelihood::grad_log_lik(const Vector &f) const {
  check_latent(f, "grad_log_lik");
  return targets() - f.array().exp().matrix();
}

LinearOperator PoissonLikelihood::w_operator(const Vector &f) const {
  check_latent(f, "w_operator");
  return diagonal_operator(f.array().exp().matrix());
}

LinearOperator PoissonLikelihood::w_inv_operator(const Vector &f) const {
  check_latent(f, "w_inv_operator");
  return diagonal_operator((-f.array()).exp().matrix());
}

std::unique_ptr<Likelihood>
PoissonLikelihood::subset(const std::vector<Index> &rows) const {
  return std::make_unique<PoissonLikelihood>(gather(targets(), rows));
}

// ---- Bernoulli / logistic

LogisticLikelihood::LogisticLikelihood(Vector labels)
    : Likelihood(std::move(labels)) {
  for (Index n = 0; n < num_points(); ++n) {
    const double y = targets()[n];
    if (y != 0.0 && y != 1.0) {
      throw InputError("logistic labels must be 0 or 1");
    }
  }
}

double LogisticLikelihood::log_lik(const Vector &f) const {
  check_latent(f, "log_lik");
  double total = 0.0;
  for (Index n = 0; n < num_points(); ++n) {
    total += targets()[n] == 1.0 ? log_sigmoid(f[n]) : log_sigmoid(-f[n]);
  }
  return total;
}

Vector LogisticLikelihood::grad_log_lik(const Vector &f) const {
  check_latent(f, "grad_log_lik");
  Vector g(num_points());
  for (Index n = 0; n < num_points(); ++n) {
    g[n] = targets()[n] - sigmoid(f[n]);
  }
  return g;
}

LinearOperator LogisticLikelihood::w_operator(const Vector &f) const {
  check_latent(f, "w_operator");
  Vector d(num_points());
  for (Index n = 0; n < num_points(); ++n) {
    const double s = sigmoid(f[n]);
    d[n] = s * (1.0 - s);
  }
  return diagonal_operator(std::move(d));
}

LinearOperator LogisticLikelihood::w_inv_operator(const Vector &f) const {
  check_latent(f, "w_inv_operator");
  Vector d(num_points());
  for (Index n = 0; n < num_points(); ++n) {
    const double s =
        std::clamp(sigmoid(f[n]), kLogisticClamp, 1.0 - kLogisticClamp);
    d[n] = 1.0 / (s * (1.0 - s));
  }
  return diagonal_operator(std::move(d));
}

std::unique_ptr<Likelihood>
LogisticLikelihood::subset(const std::vector<Index> &rows) const {
  return std::make_unique<LogisticLikelihood>(gather(targets(), rows));
}

// ---- Softmax

Vector softmax_state(const Vector &f, Index num_classes) {
  require(num_classes >= 1 && f.size() % num_classes == 0,
          "softmax_state: length not a multiple of C");
  const Index N = f.size() / num_classes;
  Vector pi(f.size());
  for (Index n = 0; n < N; ++n) {
    const auto block = f.segment(n * num_classes, num_classes);
    const double top = block.maxCoeff();
    auto out = pi.segment(n * num_classes, num_classes);
    out = (block.array() - top).exp().matrix();
    out /= out.sum();
  }
  return pi;
}

SoftmaxLikelihood::SoftmaxLikelihood(Vector labels, Index num_classes)
    : Likelihood(std::move(labels)), classes_(num_classes) {
  if (classes_ < 2) {
    throw ConfigError("softmax likelihood needs at least 2 classes");
  }
  for (Index n = 0; n < num_points(); ++n) {
    const double y = targets()[n];
    if (y != std::floor(y) || y < 0.0 || y >= static_cast<double>(classes_)) {
      throw InputError("class index out of range for softmax likelihood");
    }
  }
}

double SoftmaxLikelihood::log_lik(const Vector &f) const {
  check_latent(f, "log_lik");
  double total = 0.0;
  for (Index n = 0; n < num_points(); ++n) {
    const auto block = f.segment(n * classes_, classes_);
    const double top = block.maxCoeff();
    const double lse = top + std::log((block.array() - top).exp().sum());
    total += block[static_cast<Index>(targets()[n])] - lse;
  }
  return total;
}

Vector SoftmaxLikelihood::grad_log_lik(const Vector &f) const {
  check_latent(f, "grad_log_lik");
  Vector g = -softmax_state(f, classes_);
  for (Index n = 0; n < num_points(); ++n) {
    g[n * classes_ + static_cast<Index>(targets()[n])] += 1.0;
  }
  return g;
}

LinearOperator SoftmaxLikelihood::w_operator(const Vector &f) const {
  check_latent(f, "w_operator");
  return [pi = softmax_state(f, classes_), C = classes_](const Vector &v) {
    require(v.size() == pi.size(), "softmax W: dimension mismatch");
    Vector out(v.size());
    for (Index n = 0; n < v.size() / C; ++n) {
      const auto p = pi.segment(n * C, C);
      const auto x = v.segment(n * C, C);
      out.segment(n * C, C) = p.cwiseProduct(x) - p * p.dot(x);
    }
    return out;
  };
}

LinearOperator SoftmaxLikelihood::w_inv_operator(const Vector &f) const {
  check_latent(f, "w_inv_operator");
  Vector inv_pi = softmax_state(f, classes_).cwiseMax(kSoftmaxFloor).cwiseInverse();
  return [inv_pi = std::move(inv_pi), C = classes_](const Vector &v) {
    return softmax_pinv_apply(inv_pi, v, C);
  };
}

Vector softmax_pinv_apply(const Vector &inv_pi, const Vector &v, Index C,
                          std::uint64_t *flops) {
  require(v.size() == inv_pi.size() && C >= 1 && v.size() % C == 0,
          "softmax W+: dimension mismatch");
  Vector out(v.size());
  Vector u(C);
  std::uint64_t count = 0;
  const double invC = 1.0 / static_cast<double>(C);
  for (Index n = 0; n < v.size() / C; ++n) {
    const Index base = n * C;
    double mean = 0.0;
    for (Index c = 0; c < C; ++c) {
      mean += v[base + c];
    }
    mean *= invC;
    double umean = 0.0;
    for (Index c = 0; c < C; ++c) {
      u[c] = (v[base + c] - mean) * inv_pi[base + c];
      umean += u[c];
    }
    umean *= invC;
    for (Index c = 0; c < C; ++c) {
      out[base + c] = u[c] - umean;
    }
    count += static_cast<std::uint64_t>(5 * C + 2);
  }
  if (flops) {
    *flops += count;
  }
  return out;
}

std::unique_ptr<Likelihood>
SoftmaxLikelihood::subset(const std::vector<Index> &rows) const {
  return std::make_unique<SoftmaxLikelihood>(gather(targets(), rows), classes_);
}

std::unique_ptr<Likelihood> make_likelihood(LikelihoodFamily family,
                                            const Dataset &data,
                                            const LikelihoodOptions &opts) {
  auto expect = [&](Domain domain) {
    if (data.domain != domain) {
      throw ConfigError(to_string(family) + " likelihood needs " +
                        to_string(domain) + " targets, dataset has " +
                        to_string(data.domain));
    }
  };
  switch (family) {
  case LikelihoodFamily::Gaussian:
    expect(Domain::Real);
    return std::make_unique<GaussianLikelihood>(data.y, opts.noise_variance);
  case LikelihoodFamily::Poisson:
    expect(Domain::Counts);
    return std::make_unique<PoissonLikelihood>(data.y);
  case LikelihoodFamily::BernoulliLogistic:
    expect(Domain::Binary);
    return std::make_unique<LogisticLikelihood>(data.y);
  case LikelihoodFamily::Softmax:
    expect(Domain::ClassIndex);
    return std::make_unique<SoftmaxLikelihood>(data.y, data.num_classes);
  }
  throw ConfigError("unsupported likelihood");
}

} // namespace ncgp
