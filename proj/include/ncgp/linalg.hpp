#ifndef NCGP_LINALG_HPP
#define NCGP_LINALG_HPP

#include <Eigen/Dense>

#include <functional>

namespace ncgp {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Matrix-free linear map w -> A w.
using LinearOperator = std::function<Vector(const Vector &)>;

namespace linalg {

/// Root Q of a symmetric PSD operator C = Q Q^T, stored column by column.
/// The (N C) x (N C) operator itself is never formed.
struct LowRankRoot {
  Matrix columns;

  LowRankRoot() = default;
  explicit LowRankRoot(Matrix cols) : columns(std::move(cols)) {}

  static LowRankRoot empty(Index dim) { return LowRankRoot(Matrix(dim, 0)); }

  Index dim() const { return columns.rows(); }
  Index rank() const { return columns.cols(); }

  void append(const Vector &column);
};

/// Q (Q^T w), linear in rank * dim.
Vector apply_lowrank(const LowRankRoot &root, const Vector &w);

/// Leading eigenpairs of a symmetric matrix, eigenvalues in descending order.
struct EigenPairs {
  Matrix vectors;
  Vector values;
};

/// Returns the `rank` largest eigenpairs of (M + M^T) / 2.
/// Throws InputError on non-finite entries.
EigenPairs sym_eigh_truncated(const Matrix &M, Index rank);

/// Lower Cholesky factor of an SPD matrix; throws NotPositiveDefinite naming
/// the first leading minor that fails.
class CholeskyFactor {
public:
  explicit CholeskyFactor(const Matrix &A);

  Vector solve(const Vector &b) const;
  Matrix solve(const Matrix &B) const;
  // L^{-1} b
  Matrix solve_lower(const Matrix &B) const;
  // L^{-T} b
  Matrix solve_upper(const Matrix &B) const;

  const Matrix &lower() const { return lower_; }
  Index size() const { return lower_.rows(); }

private:
  Matrix lower_;
};

Vector dense_spd_solve(const Matrix &A, const Vector &b);

/// Dense matrix of an operator, built column by column from unit vectors.
Matrix materialize(const LinearOperator &apply_A, Index dim);

/// Conjugate gradients from x0 = 0, exactly `iters` steps (fewer only when the
/// residual hits exactly zero). Directions are fully re-conjugated, so the
/// iterate stays the Krylov minimizer in floating point. Throws Breakdown
/// when p^T A p <= 0.
Vector cg_reference(const LinearOperator &apply_A, const Vector &b, Index iters);

} // namespace linalg
} // namespace ncgp

#endif
