#ifndef NCGP_GP_MODEL_HPP
#define NCGP_GP_MODEL_HPP

#include "ncgp/linalg.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace ncgp {

enum class KernelFamily { RBF, Matern32 };

std::string to_string(KernelFamily family);
KernelFamily kernel_family_from_string(const std::string &name);

struct KernelSpec {
  KernelFamily family = KernelFamily::RBF;
  double lengthscale = 1.0;
  double outputscale = 1.0;

  void validate() const;

  // Kernel value as a function of the squared Euclidean distance.
  double from_sqdist(double sqdist) const {
    switch (family) {
    case KernelFamily::RBF:
      return outputscale * std::exp(-0.5 * sqdist / (lengthscale * lengthscale));
    case KernelFamily::Matern32: {
      const double scaled = std::sqrt(3.0 * sqdist) / lengthscale;
      return outputscale * (1.0 + scaled) * std::exp(-scaled);
    }
    }
    return 0.0;
  }

  bool operator==(const KernelSpec &) const = default;
};

double kernel_eval(const KernelSpec &spec, const Eigen::Ref<const Vector> &x,
                   const Eigen::Ref<const Vector> &x2);

/// Independent-output GP prior with constant per-output means.
class MultiOutputPrior {
public:
  MultiOutputPrior(std::vector<KernelSpec> kernels, Vector mean);
  // Same kernel for every output, zero mean.
  MultiOutputPrior(const KernelSpec &kernel, Index num_outputs);

  Index num_outputs() const { return static_cast<Index>(kernels_.size()); }
  const std::vector<KernelSpec> &kernels() const { return kernels_; }
  const Vector &mean() const { return mean_; }

  // m(X) for N points, CN ordered.
  Vector mean_vector(Index num_points) const;

  // Outputs sharing an identical kernel; the kernel is evaluated once per
  // group during products.
  const std::vector<std::vector<Index>> &kernel_groups() const {
    return groups_;
  }

private:
  std::vector<KernelSpec> kernels_;
  Vector mean_;
  std::vector<std::vector<Index>> groups_;
};

/// Layout of length N*C vectors: CN has the output index moving fastest,
/// NC the data index.
enum class Ordering { CN, NC };

Vector reorder(const Vector &v, Ordering from, Ordering to, Index num_points,
               Index num_outputs);

inline constexpr Index kDefaultTile = 256;

/// K v with v CN ordered. Row tiles are evaluated without forming K; every
/// output entry is accumulated in data order, so the result is bit-identical
/// for any tile size or thread count.
Vector prior_matvec(const MultiOutputPrior &prior, const Matrix &X,
                    const Vector &v, Index tile = kDefaultTile);

/// K(X_query, X_train) V for a block of CN-ordered columns V, tiled over
/// query points. Result rows are CN ordered over the query points.
Matrix cross_apply(const MultiOutputPrior &prior, const Matrix &X_train,
                   const Matrix &X_query, const Matrix &V,
                   Index tile = kDefaultTile);

/// Dense (N_test C) x (N_train C) cross covariance, CN on both sides.
Matrix cross_covariance(const MultiOutputPrior &prior, const Matrix &X_train,
                        const Matrix &X_test);

inline Matrix dense_prior_covariance(const MultiOutputPrior &prior,
                                     const Matrix &X) {
  return cross_covariance(prior, X, X);
}

enum class Domain { Counts, Binary, ClassIndex, Real };

std::string to_string(Domain domain);
Domain domain_from_string(const std::string &name);

struct Dataset {
  Matrix X; // N x D, one row per point
  Vector y;
  Domain domain = Domain::Real;
  Index num_classes = 1; // only meaningful for ClassIndex

  Index size() const { return X.rows(); }
  Index dim() const { return X.cols(); }

  // Throws InputError when targets do not fit the domain.
  void validate() const;

  Dataset subset(const std::vector<Index> &rows) const;
};

Dataset read_dataset_csv(const std::string &path, Domain domain,
                         Index num_classes = 0);
// Inputs-only CSV (x_0..x_{D-1}); a trailing y column is ignored.
Matrix read_inputs_csv(const std::string &path);
void write_dataset_csv(const std::string &path, const Dataset &data);

} // namespace ncgp

#endif
