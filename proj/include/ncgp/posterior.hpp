#ifndef NCGP_POSTERIOR_HPP
#define NCGP_POSTERIOR_HPP

#include "ncgp/belief.hpp"
#include "ncgp/likelihoods.hpp"

#include <cstdint>

namespace ncgp {

/// N_test x C matrix of m(x) + K(x, X) v.
Matrix posterior_mean(const PosteriorBelief &belief, const Matrix &X_test);

/// N_test x C marginal variances k(x, x) - ||Q^T K(X, x)||^2, clamped at 0.
Matrix posterior_marginal_var(const PosteriorBelief &belief,
                              const Matrix &X_test);

inline constexpr Index kMaxFullCovariancePoints = 1000;

/// Full (N_test C) x (N_test C) covariance, CN ordered. N_test is capped.
Matrix posterior_covariance(const PosteriorBelief &belief, const Matrix &X_test);

/// Row-wise softmax of mean / sqrt(1 + pi var / 8). A single output is
/// treated as the binary logit and yields columns [1 - p, p].
Matrix probit_predict(const Matrix &mean, const Matrix &var);

struct RateSummary {
  Vector median;
  Vector lower; // 2.5 % percentile
  Vector upper; // 97.5 % percentile
};

struct PredictiveSummary {
  Matrix mean;
  Matrix var;
  Matrix probabilities; // classification only
  RateSummary rates;    // Poisson only
};

/// Standard normal sample keyed by (seed, point, output, sample).
double mc_normal(std::uint64_t seed, Index point, Index output, Index sample);

/// Monte Carlo predictive: averaged class probabilities (softmax, or the
/// logistic for a single output) or exp-rate median and 95 % band.
PredictiveSummary mc_predict(const Matrix &mean, const Matrix &var,
                             LikelihoodFamily family, Index n_samples,
                             std::uint64_t seed);

// Mean over points of -log p(y | data) with p(y) the MC average of the
// Poisson likelihood over latent samples.
double poisson_mc_nll(const Matrix &mean, const Matrix &var,
                      const Vector &counts, Index n_samples,
                      std::uint64_t seed);

// Mean over points of -log N(y; mean, var + noise).
double gaussian_predictive_nll(const Matrix &mean, const Matrix &var,
                               const Vector &targets, double noise);

inline constexpr double kProbabilityFloor = 1e-300;
inline constexpr Index kDefaultEceBins = 15;

double metric_nll(const Matrix &probabilities, const Vector &targets);
double metric_accuracy(const Matrix &probabilities, const Vector &targets);
double metric_ece(const Matrix &probabilities, const Vector &targets,
                  Index n_bins = kDefaultEceBins);

} // namespace ncgp

#endif
