#include "ncgp/inner_solver.hpp"

#include "ncgp/errors.hpp"
#include "ncgp/stopwatch.hpp"

#include <algorithm>
#include <cmath>

namespace ncgp {

void SolverBuffers::append(const Vector &s, const Vector &t) {
  require(s.size() == t.size(), "SolverBuffers::append: size mismatch");
  if (S.rows() == 0 && S.cols() == 0) {
    S.resize(s.size(), 0);
    T.resize(s.size(), 0);
  }
  require(s.size() == S.rows(), "SolverBuffers::append: wrong length");
  S.conservativeResize(Eigen::NoChange, S.cols() + 1);
  T.conservativeResize(Eigen::NoChange, T.cols() + 1);
  S.col(S.cols() - 1) = s;
  T.col(T.cols() - 1) = t;
}

std::string to_string(PolicyKind kind) {
  return kind == PolicyKind::UnitVector ? "unit" : "residual";
}

PolicyKind policy_from_string(const std::string &name) {
  if (name == "unit" || name == "unit_vector" || name == "cholesky") {
    return PolicyKind::UnitVector;
  }
  if (name == "residual" || name == "cg") {
    return PolicyKind::Residual;
  }
  throw ConfigError("unknown policy '" + name + "'");
}

void InnerConfig::validate() const {
  if (max_iters < 0) {
    throw ConfigError("inner max_iters must be nonnegative");
  }
  if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) {
    throw ConfigError("inner tolerances must be positive");
  }
}

std::string to_string(Termination t) {
  switch (t) {
  case Termination::Converged:
    return "converged";
  case Termination::MaxIters:
    return "max_iters";
  case Termination::EtaBreakdown:
    return "eta_breakdown";
  case Termination::Exhausted:
    return "exhausted";
  }
  return "?";
}

Policy::Policy(PolicyKind kind, Index dim) : kind_(kind) {
  if (kind_ == PolicyKind::UnitVector) {
    used_.assign(static_cast<std::size_t>(dim), 0);
  }
}

void Policy::mark_used(Index index) {
  if (kind_ == PolicyKind::UnitVector) {
    require(index >= 0 && index < static_cast<Index>(used_.size()),
            "Policy::mark_used: index out of range");
    used_[index] = 1;
  }
}

std::optional<Vector> Policy::next_action(const Vector &residual) {
  if (kind_ == PolicyKind::Residual) {
    // Unit length: the belief ignores action scale, but the buffers do not.
    const double norm = residual.norm();
    return norm > 0.0 ? Vector(residual / norm) : residual;
  }
  require(residual.size() == static_cast<Index>(used_.size()),
          "Policy::next_action: residual length mismatch");
  const Index dim = residual.size();
  while (cursor_ < dim && used_[cursor_]) {
    ++cursor_;
  }
  if (cursor_ >= dim) {
    return std::nullopt;
  }
  used_[cursor_] = 1;
  return Vector::Unit(dim, cursor_++);
}

bool inner_stop(double residual_norm, double rhs_norm, Index iters,
                const InnerConfig &config) {
  return residual_norm < std::max(config.abs_tol, config.rel_tol * rhs_norm) ||
         iters >= config.max_iters;
}

VirtualRun virtual_solver_run(const SolverBuffers &buffers,
                              const LinearOperator &apply_W_inv,
                              std::optional<Index> rank) {
  require(buffers.S.rows() == buffers.T.rows() &&
              buffers.S.cols() == buffers.T.cols(),
          "virtual_solver_run: S and T disagree in shape");
  const Index dim = buffers.dim();
  const Index B = buffers.size();
  VirtualRun out;
  if (B == 0) {
    out.root = linalg::LowRankRoot::empty(dim);
    out.buffers = SolverBuffers::empty(dim);
    return out;
  }
  require(!rank || *rank >= 0, "virtual_solver_run: negative rank");

  Matrix KhatS = buffers.T;
  for (Index b = 0; b < B; ++b) {
    KhatS.col(b) += apply_W_inv(buffers.S.col(b));
  }
  const Matrix M = buffers.S.transpose() * KhatS;
  const Index keep_rank = rank ? std::min(*rank, B) : B;
  const linalg::EigenPairs eig = linalg::sym_eigh_truncated(M, keep_rank);

  Index kept = 0;
  if (eig.values.size() > 0 && eig.values[0] > 0.0) {
    const double floor = kEigenFloor * eig.values[0];
    while (kept < eig.values.size() && eig.values[kept] > floor) {
      ++kept;
    }
  }
  out.dropped = eig.values.size() - kept;

  const Matrix U = eig.vectors.leftCols(kept);
  out.buffers.S = buffers.S * U;
  out.buffers.T = buffers.T * U;
  const Vector scale = eig.values.head(kept).cwiseSqrt().cwiseInverse();
  out.root = linalg::LowRankRoot(out.buffers.S * scale.asDiagonal());
  return out;
}

SolverOutcome itergp_solve(const RegressionSystem &system, PolicyKind policy,
                           SolverBuffers buffers, const InnerConfig &config,
                           std::optional<Index> compression_rank,
                           const IterationObserver &observer) {
  config.validate();
  const Index dim = system.rhs.size();
  require(dim > 0, "itergp_solve: empty system");
  require(buffers.size() == 0 || buffers.dim() == dim,
          "itergp_solve: buffer length != system dimension");
  if (!system.rhs.allFinite()) {
    throw InputError("itergp_solve: non-finite right-hand side");
  }
  if (buffers.S.rows() != dim) {
    buffers = SolverBuffers::empty(dim);
  }

  Stopwatch clock;
  clock.start();

  SolverOutcome out;
  VirtualRun seed =
      virtual_solver_run(buffers, system.apply_W_inv, compression_rank);
  out.buffers = std::move(seed.buffers);
  out.root = std::move(seed.root);
  out.dropped_eigenpairs = seed.dropped;
  out.initial_rank = out.root.rank();
  out.v = linalg::apply_lowrank(out.root, system.rhs);

  Policy actions(policy, dim);
  const double rhs_norm = system.rhs.norm();
  Index j = 0;
  for (;;) {
    if (j >= config.max_iters) {
      out.termination = Termination::MaxIters;
      break;
    }
    Vector Kv = system.apply_K(out.v);
    ++out.k_matvecs;
    const Vector r = system.rhs - Kv - system.apply_W_inv(out.v);
    out.residual_norm = r.norm();
    if (inner_stop(out.residual_norm, rhs_norm, j, config)) {
      out.termination = Termination::Converged;
      out.Kv = std::move(Kv);
      break;
    }
    std::optional<Vector> s = actions.next_action(r);
    if (!s) {
      out.termination = Termination::Exhausted;
      out.Kv = std::move(Kv);
      break;
    }
    const double alpha = s->dot(r);
    Vector t = system.apply_K(*s);
    ++out.k_matvecs;
    const Vector z = t + system.apply_W_inv(*s);
    const Vector d = *s - linalg::apply_lowrank(out.root, z);
    const double eta = z.dot(d);
    if (!(eta > kEtaBreakdown * s->norm() * z.norm())) {
      out.termination = Termination::EtaBreakdown;
      out.Kv = std::move(Kv);
      break;
    }
    out.buffers.append(*s, t);
    out.root.append(d / std::sqrt(eta));
    out.v += (alpha / eta) * d;
    ++j;
    if (observer) {
      clock.stop();
      IterationRecord rec;
      rec.iteration = j;
      rec.residual_norm = out.residual_norm;
      rec.alpha = alpha;
      rec.eta = eta;
      rec.wallclock_s = clock.elapsed();
      observer(rec, out.v, out.root);
      clock.start();
    }
  }
  out.iterations_run = j;
  clock.stop();
  out.wallclock_s = clock.elapsed();
  return out;
}

} // namespace ncgp
