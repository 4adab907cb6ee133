#ifndef NCGP_INNER_SOLVER_HPP
#define NCGP_INNER_SOLVER_HPP

#include "ncgp/linalg.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ncgp {

/// (K + W^{-1}) v = rhs, with both operators matrix-free.
struct RegressionSystem {
  LinearOperator apply_K;
  LinearOperator apply_W_inv;
  Vector rhs;
};

/// Past actions S and their images T = K S, column for column.
struct SolverBuffers {
  Matrix S;
  Matrix T;

  static SolverBuffers empty(Index dim) {
    return {Matrix(dim, 0), Matrix(dim, 0)};
  }
  Index size() const { return S.cols(); }
  Index dim() const { return S.rows(); }
  void append(const Vector &s, const Vector &t);
  std::size_t bytes() const {
    return static_cast<std::size_t>(S.size() + T.size()) * sizeof(double);
  }
};

enum class PolicyKind { UnitVector, Residual };

std::string to_string(PolicyKind kind);
PolicyKind policy_from_string(const std::string &name);

struct InnerConfig {
  Index max_iters = 100;
  double abs_tol = 1e-5;
  double rel_tol = 1e-5;

  void validate() const;
};

enum class Termination { Converged, MaxIters, EtaBreakdown, Exhausted };

std::string to_string(Termination t);

// Relative threshold on eta below which the direction counts as breakdown.
inline constexpr double kEtaBreakdown = 1e-12;
// Eigenvalues at or below this fraction of the largest are dropped.
inline constexpr double kEigenFloor = 1e-10;

/// Action selection state for one solve.
class Policy {
public:
  Policy(PolicyKind kind, Index dim);

  PolicyKind kind() const { return kind_; }
  // Next action given the current residual; empty when the unit-vector
  // policy has used every index.
  std::optional<Vector> next_action(const Vector &residual);
  // Mark a unit index as used without producing it.
  void mark_used(Index index);

private:
  PolicyKind kind_;
  std::vector<char> used_;
  Index cursor_ = 0;
};

bool inner_stop(double residual_norm, double rhs_norm, Index iters,
                const InnerConfig &config);

struct VirtualRun {
  linalg::LowRankRoot root;
  SolverBuffers buffers;
  Index dropped = 0; // eigenpairs removed by the floor (not by truncation)
};

/// Rebuilds C_0 = S M^{-1} S^T with M = S^T (T + W^{-1} S) without any new
/// products with K. With `rank` set, only the largest `rank` eigenpairs of M
/// are kept and S, T are rotated and truncated accordingly.
VirtualRun virtual_solver_run(const SolverBuffers &buffers,
                              const LinearOperator &apply_W_inv,
                              std::optional<Index> rank = std::nullopt);

struct IterationRecord {
  Index iteration = 0;       // 1-based count of completed iterations
  double residual_norm = 0;  // norm of the residual the action was built from
  double alpha = 0;
  double eta = 0;
  double wallclock_s = 0;    // solver time since the start of this solve
};

using IterationObserver = std::function<void(
    const IterationRecord &, const Vector &v, const linalg::LowRankRoot &Q)>;

struct SolverOutcome {
  Vector v;
  linalg::LowRankRoot root;
  SolverBuffers buffers;
  Index iterations_run = 0;
  Termination termination = Termination::MaxIters;
  double residual_norm = 0; // last residual norm evaluated
  Index k_matvecs = 0;
  Index dropped_eigenpairs = 0;
  Index initial_rank = 0;   // rank of C_0 after the virtual run
  // K v for the returned v when the solve evaluated it at exit.
  std::optional<Vector> Kv;
  double wallclock_s = 0;
};

/// Iterative GP solve with a virtual run over `buffers` to seed C_0 and the
/// consistent initial iterate v_0 = C_0 rhs. New actions are appended to the
/// returned buffers.
SolverOutcome itergp_solve(const RegressionSystem &system, PolicyKind policy,
                           SolverBuffers buffers, const InnerConfig &config,
                           std::optional<Index> compression_rank = std::nullopt,
                           const IterationObserver &observer = {});

} // namespace ncgp

#endif
