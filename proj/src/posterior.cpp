#include "ncgp/posterior.hpp"

#include "ncgp/errors.hpp"
#include "ncgp/parallel.hpp"
#include "ncgp/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace ncgp {

void PosteriorBelief::check() const {
  require(prior && X, "PosteriorBelief: missing prior or inputs");
  const Index dim = X->rows() * prior->num_outputs();
  require(v.size() == dim, "PosteriorBelief: length(v) != N*C");
  require(Q.rank() == 0 || Q.dim() == dim,
          "PosteriorBelief: root rows != N*C");
}

PosteriorBelief
PosteriorBelief::prior_only(std::shared_ptr<const MultiOutputPrior> prior,
                            std::shared_ptr<const Matrix> X) {
  const Index dim = X->rows() * prior->num_outputs();
  return {std::move(prior), std::move(X), Vector::Zero(dim),
          linalg::LowRankRoot::empty(dim), 0, 0};
}

namespace {

Matrix to_points(const Vector &cn, Index num_points, Index num_outputs) {
  // CN vector -> rows = points, cols = outputs
  return Eigen::Map<const Matrix>(cn.data(), num_outputs, num_points)
      .transpose();
}

} // namespace

Matrix posterior_mean(const PosteriorBelief &belief, const Matrix &X_test) {
  belief.check();
  const Index C = belief.num_outputs();
  const Matrix Kv = cross_apply(*belief.prior, *belief.X, X_test, belief.v);
  Matrix mean = to_points(Kv.col(0), X_test.rows(), C);
  mean.rowwise() += belief.prior->mean().transpose();
  return mean;
}

Matrix posterior_marginal_var(const PosteriorBelief &belief,
                              const Matrix &X_test) {
  belief.check();
  const Index C = belief.num_outputs();
  const Index Nt = X_test.rows();
  Matrix var(Nt, C);
  for (Index c = 0; c < C; ++c) {
    var.col(c).setConstant(belief.prior->kernels()[c].from_sqdist(0.0));
  }
  if (belief.Q.rank() == 0) {
    return var;
  }
  const Matrix A = cross_apply(*belief.prior, *belief.X, X_test,
                               belief.Q.columns);
  for (Index a = 0; a < Nt; ++a) {
    for (Index c = 0; c < C; ++c) {
      var(a, c) = std::max(0.0, var(a, c) - A.row(a * C + c).squaredNorm());
    }
  }
  return var;
}

Matrix posterior_covariance(const PosteriorBelief &belief,
                            const Matrix &X_test) {
  belief.check();
  require(X_test.rows() <= kMaxFullCovariancePoints,
          "posterior_covariance: too many test points for a dense matrix");
  Matrix cov = dense_prior_covariance(*belief.prior, X_test);
  if (belief.Q.rank() > 0) {
    const Matrix A = cross_apply(*belief.prior, *belief.X, X_test,
                                 belief.Q.columns);
    cov.noalias() -= A * A.transpose();
  }
  return cov;
}

namespace {

void softmax_row(const double *logits, Index C, double *out) {
  double top = logits[0];
  for (Index c = 1; c < C; ++c) {
    top = std::max(top, logits[c]);
  }
  double total = 0.0;
  for (Index c = 0; c < C; ++c) {
    out[c] = std::exp(logits[c] - top);
    total += out[c];
  }
  for (Index c = 0; c < C; ++c) {
    out[c] /= total;
  }
}

} // namespace

Matrix probit_predict(const Matrix &mean, const Matrix &var) {
  require(mean.rows() == var.rows() && mean.cols() == var.cols(),
          "probit_predict: shape mismatch");
  const Index N = mean.rows();
  const Index C = mean.cols();
  const Matrix scaled =
      (mean.array() /
       (1.0 + (std::numbers::pi / 8.0) * var.array().max(0.0)).sqrt())
          .matrix();
  if (C == 1) {
    Matrix probs(N, 2);
    for (Index n = 0; n < N; ++n) {
      const double p = sigmoid(scaled(n, 0));
      probs(n, 0) = 1.0 - p;
      probs(n, 1) = p;
    }
    return probs;
  }
  Matrix probs(N, C);
  std::vector<double> logits(static_cast<std::size_t>(C));
  std::vector<double> row(static_cast<std::size_t>(C));
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      logits[c] = scaled(n, c);
    }
    softmax_row(logits.data(), C, row.data());
    for (Index c = 0; c < C; ++c) {
      probs(n, c) = row[c];
    }
  }
  return probs;
}

double mc_normal(std::uint64_t seed, Index point, Index output, Index sample) {
  return random::keyed_normal(seed, static_cast<std::uint32_t>(point),
                              static_cast<std::uint32_t>(output),
                              static_cast<std::uint32_t>(sample));
}

namespace {

// Linear interpolation between order statistics.
double percentile(const std::vector<double> &sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Matrix mc_class_probs(const Matrix &mean, const Matrix &var, Index n_samples,
                      std::uint64_t seed) {
  const Index N = mean.rows();
  const Index C = mean.cols();
  const Index K = C == 1 ? 2 : C;
  Matrix probs = Matrix::Zero(N, K);
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t task) {
    const auto n = static_cast<Index>(task);
    if ((var.row(n).array() <= 0.0).all()) {
      probs.row(n) = probit_predict(mean.row(n), Matrix::Zero(1, C));
      return;
    }
    std::vector<double> logits(static_cast<std::size_t>(C));
    std::vector<double> row(static_cast<std::size_t>(C));
    std::vector<double> acc(static_cast<std::size_t>(K), 0.0);
    for (Index s = 0; s < n_samples; ++s) {
      for (Index c = 0; c < C; ++c) {
        logits[c] = mean(n, c) + std::sqrt(std::max(var(n, c), 0.0)) *
                                     mc_normal(seed, n, c, s);
      }
      if (C == 1) {
        const double p = sigmoid(logits[0]);
        acc[0] += 1.0 - p;
        acc[1] += p;
      } else {
        softmax_row(logits.data(), C, row.data());
        for (Index c = 0; c < C; ++c) {
          acc[c] += row[c];
        }
      }
    }
    for (Index k = 0; k < K; ++k) {
      probs(n, k) = acc[k] / static_cast<double>(n_samples);
    }
  });
  return probs;
}

RateSummary mc_poisson_rates(const Matrix &mean, const Matrix &var,
                             Index n_samples, std::uint64_t seed) {
  const Index N = mean.rows();
  RateSummary out{Vector(N), Vector(N), Vector(N)};
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t task) {
    const auto n = static_cast<Index>(task);
    const double sd = std::sqrt(std::max(var(n, 0), 0.0));
    std::vector<double> rates(static_cast<std::size_t>(n_samples));
    for (Index s = 0; s < n_samples; ++s) {
      rates[s] = std::exp(mean(n, 0) + sd * mc_normal(seed, n, 0, s));
    }
    std::sort(rates.begin(), rates.end());
    out.median[n] = percentile(rates, 0.5);
    out.lower[n] = percentile(rates, 0.025);
    out.upper[n] = percentile(rates, 0.975);
  });
  return out;
}

} // namespace

PredictiveSummary mc_predict(const Matrix &mean, const Matrix &var,
                             LikelihoodFamily family, Index n_samples,
                             std::uint64_t seed) {
  require(n_samples >= 1, "mc_predict: need at least one sample");
  require(mean.rows() == var.rows() && mean.cols() == var.cols(),
          "mc_predict: shape mismatch");
  PredictiveSummary out;
  out.mean = mean;
  out.var = var.cwiseMax(0.0);
  switch (family) {
  case LikelihoodFamily::Poisson:
    require(mean.cols() == 1, "mc_predict: Poisson needs one output");
    out.rates = mc_poisson_rates(mean, var, n_samples, seed);
    break;
  case LikelihoodFamily::BernoulliLogistic:
  case LikelihoodFamily::Softmax:
    out.probabilities = mc_class_probs(mean, var, n_samples, seed);
    break;
  case LikelihoodFamily::Gaussian:
    break;
  }
  return out;
}

double poisson_mc_nll(const Matrix &mean, const Matrix &var,
                      const Vector &counts, Index n_samples,
                      std::uint64_t seed) {
  require(n_samples >= 1, "poisson_mc_nll: need at least one sample");
  require(mean.cols() == 1 && mean.rows() == counts.size() &&
              var.rows() == counts.size(),
          "poisson_mc_nll: shape mismatch");
  const Index N = counts.size();
  if (N == 0) {
    return 0.0;
  }
  Vector per_point(N);
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t task) {
    const auto n = static_cast<Index>(task);
    const double sd = std::sqrt(std::max(var(n, 0), 0.0));
    std::vector<double> logp(static_cast<std::size_t>(n_samples));
    double top = -std::numeric_limits<double>::infinity();
    for (Index s = 0; s < n_samples; ++s) {
      logp[s] = poisson_log_pmf(counts[n],
                                mean(n, 0) + sd * mc_normal(seed, n, 0, s));
      top = std::max(top, logp[s]);
    }
    double total = 0.0;
    for (double lp : logp) {
      total += std::exp(lp - top);
    }
    per_point[n] = -(top + std::log(total / static_cast<double>(n_samples)));
  });
  return per_point.mean();
}

double gaussian_predictive_nll(const Matrix &mean, const Matrix &var,
                               const Vector &targets, double noise) {
  require(mean.cols() == 1 && mean.rows() == targets.size(),
          "gaussian_predictive_nll: shape mismatch");
  double total = 0.0;
  for (Index n = 0; n < targets.size(); ++n) {
    const double s2 = std::max(var(n, 0), 0.0) + noise;
    const double r = targets[n] - mean(n, 0);
    total += 0.5 * std::log(2.0 * std::numbers::pi * s2) + 0.5 * r * r / s2;
  }
  return targets.size() ? total / static_cast<double>(targets.size()) : 0.0;
}

namespace {

Index label_at(const Vector &targets, Index n, Index num_classes) {
  const double y = targets[n];
  const auto k = static_cast<Index>(y);
  if (y != static_cast<double>(k) || k < 0 || k >= num_classes) {
    throw InputError("metric: target " + std::to_string(y) +
                     " is not a class index");
  }
  return k;
}

Index argmax_lowest(const Matrix &P, Index n) {
  Index best = 0;
  for (Index c = 1; c < P.cols(); ++c) {
    if (P(n, c) > P(n, best)) {
      best = c;
    }
  }
  return best;
}

} // namespace

double metric_nll(const Matrix &probabilities, const Vector &targets) {
  require(probabilities.rows() == targets.size(),
          "metric_nll: row count != target count");
  if (targets.size() == 0) {
    return 0.0;
  }
  double total = 0.0;
  for (Index n = 0; n < targets.size(); ++n) {
    const Index k = label_at(targets, n, probabilities.cols());
    total -= std::log(std::max(probabilities(n, k), kProbabilityFloor));
  }
  return total / static_cast<double>(targets.size());
}

double metric_accuracy(const Matrix &probabilities, const Vector &targets) {
  require(probabilities.rows() == targets.size(),
          "metric_accuracy: row count != target count");
  if (targets.size() == 0) {
    return 0.0;
  }
  Index correct = 0;
  for (Index n = 0; n < targets.size(); ++n) {
    if (argmax_lowest(probabilities, n) ==
        label_at(targets, n, probabilities.cols())) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(targets.size());
}

double metric_ece(const Matrix &probabilities, const Vector &targets,
                  Index n_bins) {
  require(probabilities.rows() == targets.size(),
          "metric_ece: row count != target count");
  require(n_bins >= 1, "metric_ece: need at least one bin");
  const Index N = targets.size();
  if (N == 0) {
    return 0.0;
  }
  std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> hits(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<Index> count(static_cast<std::size_t>(n_bins), 0);
  for (Index n = 0; n < N; ++n) {
    const Index pred = argmax_lowest(probabilities, n);
    const double conf = probabilities(n, pred);
    // (lo, hi] bins; 0 goes to the first, 1 to the last
    Index bin = static_cast<Index>(
                    std::ceil(conf * static_cast<double>(n_bins))) -
                1;
    bin = std::clamp<Index>(bin, 0, n_bins - 1);
    conf_sum[bin] += conf;
    hits[bin] += pred == label_at(targets, n, probabilities.cols()) ? 1.0 : 0.0;
    ++count[bin];
  }
  double ece = 0.0;
  for (Index b = 0; b < n_bins; ++b) {
    if (count[b] == 0) {
      continue;
    }
    const double cnt = static_cast<double>(count[b]);
    ece += (cnt / static_cast<double>(N)) *
           std::abs(hits[b] / cnt - conf_sum[b] / cnt);
  }
  return ece;
}

} // namespace ncgp
