#include "ncgp/linalg.hpp"

#include "ncgp/errors.hpp"

#include <lapacke.h>

#include <string>

namespace ncgp::linalg {

void LowRankRoot::append(const Vector &column) {
  if (columns.cols() == 0 && columns.rows() == 0) {
    columns.resize(column.size(), 0);
  }
  require(column.size() == columns.rows(),
          "LowRankRoot::append: column length " +
              std::to_string(column.size()) + " != " +
              std::to_string(columns.rows()));
  columns.conservativeResize(Eigen::NoChange, columns.cols() + 1);
  columns.col(columns.cols() - 1) = column;
}

Vector apply_lowrank(const LowRankRoot &root, const Vector &w) {
  require(w.size() == root.dim(),
          "apply_lowrank: vector length " + std::to_string(w.size()) +
              " != root dimension " + std::to_string(root.dim()));
  if (root.rank() == 0) {
    return Vector::Zero(w.size());
  }
  const Vector coeffs = root.columns.transpose() * w;
  return root.columns * coeffs;
}

EigenPairs sym_eigh_truncated(const Matrix &M, Index rank) {
  require(M.rows() == M.cols(), "sym_eigh_truncated: matrix must be square");
  require(rank >= 0 && rank <= M.rows(),
          "sym_eigh_truncated: rank bound out of range");
  if (!M.allFinite()) {
    throw InputError("sym_eigh_truncated: non-finite matrix entries");
  }
  const Index n = M.rows();
  if (n == 0 || rank == 0) {
    return {Matrix(n, 0), Vector(0)};
  }
  const Matrix sym = 0.5 * (M + M.transpose());
  // Tridiagonalisation followed by implicit symmetric QR.
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw InputError("sym_eigh_truncated: eigensolver did not converge");
  }
  // Eigen returns ascending order; the stable reverse keeps the first-computed
  // basis for repeated eigenvalues.
  EigenPairs out{Matrix(n, rank), Vector(rank)};
  for (Index k = 0; k < rank; ++k) {
    out.values(k) = solver.eigenvalues()(n - 1 - k);
    out.vectors.col(k) = solver.eigenvectors().col(n - 1 - k);
  }
  return out;
}

CholeskyFactor::CholeskyFactor(const Matrix &A) : lower_(A) {
  require(A.rows() == A.cols(), "CholeskyFactor: matrix must be square");
  if (!A.allFinite()) {
    throw InputError("CholeskyFactor: non-finite matrix entries");
  }
  const Index n = A.rows();
  if (n == 0) {
    return;
  }
  const lapack_int info =
      LAPACKE_dpotrf(LAPACK_COL_MAJOR, 'L', static_cast<lapack_int>(n),
                     lower_.data(), static_cast<lapack_int>(n));
  if (info > 0) {
    throw NotPositiveDefinite(
        info, "matrix is not positive definite: leading minor of order " +
                  std::to_string(info) + " failed");
  }
  if (info < 0) {
    throw InputError("CholeskyFactor: invalid LAPACK argument " +
                     std::to_string(-info));
  }
  lower_.triangularView<Eigen::StrictlyUpper>().setZero();
}

Vector CholeskyFactor::solve(const Vector &b) const {
  require(b.size() == size(), "CholeskyFactor::solve: dimension mismatch");
  Vector x = lower_.triangularView<Eigen::Lower>().solve(b);
  lower_.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
  return x;
}

Matrix CholeskyFactor::solve(const Matrix &B) const {
  require(B.rows() == size(), "CholeskyFactor::solve: dimension mismatch");
  Matrix X = lower_.triangularView<Eigen::Lower>().solve(B);
  lower_.triangularView<Eigen::Lower>().transpose().solveInPlace(X);
  return X;
}

Matrix CholeskyFactor::solve_lower(const Matrix &B) const {
  require(B.rows() == size(), "CholeskyFactor::solve_lower: dimension mismatch");
  return lower_.triangularView<Eigen::Lower>().solve(B);
}

Matrix CholeskyFactor::solve_upper(const Matrix &B) const {
  require(B.rows() == size(), "CholeskyFactor::solve_upper: dimension mismatch");
  return lower_.triangularView<Eigen::Lower>().transpose().solve(B);
}

Vector dense_spd_solve(const Matrix &A, const Vector &b) {
  require(A.rows() == b.size(), "dense_spd_solve: dimension mismatch");
  return CholeskyFactor(A).solve(b);
}

Vector cg_reference(const LinearOperator &apply_A, const Vector &b,
                    Index iters) {
  require(iters >= 0, "cg_reference: negative iteration count");
  // Textbook CG, but with the residual recomputed from x and every direction
  // A-conjugated against all earlier ones. Same iterates, no drift.
  const Index n = b.size();
  Vector x = Vector::Zero(n);
  Vector r = b;
  Matrix P(n, 0), AP(n, 0);
  for (Index k = 0; k < iters && k < n; ++k) {
    if (r.squaredNorm() == 0.0) {
      break;
    }
    Vector p = r;
    for (int pass = 0; pass < 2; ++pass) {
      for (Index i = 0; i < P.cols(); ++i) {
        p -= (AP.col(i).dot(p) / AP.col(i).dot(P.col(i))) * P.col(i);
      }
    }
    const Vector Ap = apply_A(p);
    require(Ap.size() == n, "cg_reference: operator output size");
    const double curvature = p.dot(Ap);
    if (!(curvature > 0.0)) {
      throw Breakdown(k, "cg_reference: non-positive curvature at iteration " +
                             std::to_string(k));
    }
    x += (p.dot(r) / curvature) * p;
    P.conservativeResize(n, k + 1);
    AP.conservativeResize(n, k + 1);
    P.col(k) = p;
    AP.col(k) = Ap;
    r = b - apply_A(x);
  }
  return x;
}

Matrix materialize(const LinearOperator &apply_A, Index dim) {
  Matrix A(dim, dim);
  for (Index k = 0; k < dim; ++k) {
    const Vector col = apply_A(Vector::Unit(dim, k));
    require(col.size() == dim, "materialize: operator output size");
    A.col(k) = col;
  }
  return A;
}

} // namespace ncgp::linalg
