#ifndef NCGP_LIKELIHOODS_HPP
#define NCGP_LIKELIHOODS_HPP

#include "ncgp/gp_model.hpp"
#include "ncgp/linalg.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ncgp {

enum class LikelihoodFamily { Gaussian, Poisson, BernoulliLogistic, Softmax };

std::string to_string(LikelihoodFamily family);
LikelihoodFamily likelihood_family_from_string(const std::string &name);

// Clamp applied to sigma before inverting sigma (1 - sigma).
inline constexpr double kLogisticClamp = 1e-12;
// Floor applied to softmax probabilities before inverting them.
inline constexpr double kSoftmaxFloor = 1e-12;

/// log p(y | f) for an iid likelihood over N points with C latent values per
/// point. All vectors are CN ordered, length N*C.
class Likelihood {
public:
  explicit Likelihood(Vector targets) : targets_(std::move(targets)) {}
  virtual ~Likelihood() = default;

  virtual LikelihoodFamily family() const = 0;
  virtual Index num_outputs() const = 0;
  Index num_points() const { return targets_.size(); }
  Index dim() const { return num_points() * num_outputs(); }
  const Vector &targets() const { return targets_; }

  // Gaussian noise: a single Newton step reaches the mode.
  virtual bool is_conjugate() const { return false; }

  virtual double log_lik(const Vector &f) const = 0;
  virtual Vector grad_log_lik(const Vector &f) const = 0;

  // W(f) = -Hessian and its inverse (pseudo-inverse for softmax), bound to a
  // fixed f so per-point quantities are computed once.
  virtual LinearOperator w_operator(const Vector &f) const = 0;
  virtual LinearOperator w_inv_operator(const Vector &f) const = 0;

  Vector w_matvec(const Vector &f, const Vector &v) const {
    return w_operator(f)(v);
  }
  Vector w_inv_matvec(const Vector &f, const Vector &v) const {
    return w_inv_operator(f)(v);
  }

  // Same likelihood restricted to a subset of data points.
  virtual std::unique_ptr<Likelihood> subset(
      const std::vector<Index> &rows) const = 0;

protected:
  void check_latent(const Vector &f, const char *who) const;
  void check_pair(const Vector &f, const Vector &v, const char *who) const;

private:
  Vector targets_;
};

class GaussianLikelihood final : public Likelihood {
public:
  // noise: per-point variances (length N) or a single shared variance.
  GaussianLikelihood(Vector targets, Vector noise);
  GaussianLikelihood(Vector targets, double noise);

  LikelihoodFamily family() const override { return LikelihoodFamily::Gaussian; }
  Index num_outputs() const override { return 1; }
  bool is_conjugate() const override { return true; }
  const Vector &noise() const { return noise_; }

  double log_lik(const Vector &f) const override;
  Vector grad_log_lik(const Vector &f) const override;
  LinearOperator w_operator(const Vector &f) const override;
  LinearOperator w_inv_operator(const Vector &f) const override;
  std::unique_ptr<Likelihood> subset(
      const std::vector<Index> &rows) const override;

private:
  Vector noise_;
};

class PoissonLikelihood final : public Likelihood {
public:
  explicit PoissonLikelihood(Vector counts);

  LikelihoodFamily family() const override { return LikelihoodFamily::Poisson; }
  Index num_outputs() const override { return 1; }

  double log_lik(const Vector &f) const override;
  Vector grad_log_lik(const Vector &f) const override;
  LinearOperator w_operator(const Vector &f) const override;
  LinearOperator w_inv_operator(const Vector &f) const override;
  std::unique_ptr<Likelihood> subset(
      const std::vector<Index> &rows) const override;
};

/// Binary labels in {0, 1} with a single latent function.
class LogisticLikelihood final : public Likelihood {
public:
  explicit LogisticLikelihood(Vector labels);

  LikelihoodFamily family() const override {
    return LikelihoodFamily::BernoulliLogistic;
  }
  Index num_outputs() const override { return 1; }

  double log_lik(const Vector &f) const override;
  Vector grad_log_lik(const Vector &f) const override;
  LinearOperator w_operator(const Vector &f) const override;
  LinearOperator w_inv_operator(const Vector &f) const override;
  std::unique_ptr<Likelihood> subset(
      const std::vector<Index> &rows) const override;
};

/// Categorical with softmax link, class indices in [0, C).
class SoftmaxLikelihood final : public Likelihood {
public:
  SoftmaxLikelihood(Vector labels, Index num_classes);

  LikelihoodFamily family() const override { return LikelihoodFamily::Softmax; }
  Index num_outputs() const override { return classes_; }

  double log_lik(const Vector &f) const override;
  Vector grad_log_lik(const Vector &f) const override;
  // Per block: diag(pi) - pi pi^T.
  LinearOperator w_operator(const Vector &f) const override;
  // Per block: (I - 11^T/C) diag(1/pi) (I - 11^T/C), O(C) per block.
  LinearOperator w_inv_operator(const Vector &f) const override;
  std::unique_ptr<Likelihood> subset(
      const std::vector<Index> &rows) const override;

private:
  Index classes_;
};

/// Softmax probabilities per point (CN, length N*C) with max subtraction.
Vector softmax_state(const Vector &f, Index num_classes);

/// (I - 11^T/C) diag(inv_pi) (I - 11^T/C) applied per block of C entries.
/// When `flops` is given, the floating point operations performed are added
/// to it.
Vector softmax_pinv_apply(const Vector &inv_pi, const Vector &v, Index C,
                          std::uint64_t *flops = nullptr);

double log_sigmoid(double x);
double sigmoid(double x);
double poisson_log_pmf(double count, double log_rate);

struct LikelihoodOptions {
  double noise_variance = 1.0; // Gaussian only
};

/// Builds the likelihood that matches the dataset's domain tag.
std::unique_ptr<Likelihood> make_likelihood(LikelihoodFamily family,
                                            const Dataset &data,
                                            const LikelihoodOptions &opts = {});

} // namespace ncgp

#endif
