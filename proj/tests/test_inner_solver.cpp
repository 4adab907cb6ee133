#include "ncgp/errors.hpp"
#include "ncgp/inner_solver.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace ncgp;

namespace {

LinearOperator dense_op(const Matrix &A) {
  return [A](const Vector &v) -> Vector { return A * v; };
}

LinearOperator diag_op(const Vector &d) {
  return [d](const Vector &v) -> Vector { return d.cwiseProduct(v); };
}

struct Instance {
  Matrix K;
  Vector winv;
  Vector rhs;
  RegressionSystem system() const {
    return {dense_op(K), diag_op(winv), rhs};
  }
  Matrix khat() const { return K + Matrix(winv.asDiagonal()); }
};

Instance make_instance(std::uint64_t seed, Index n) {
  Instance in;
  const Matrix X = oracle::uniform_points(seed, n, 2, 0.0, 1.0);
  in.K = oracle::gram(KernelSpec{KernelFamily::RBF, 0.4, 1.0}, 1, X, X);
  in.winv = (oracle::normals(seed + 1, n).array().abs() + 0.1).matrix();
  in.rhs = oracle::normals(seed + 2, n);
  return in;
}

InnerConfig tight(Index iters) {
  InnerConfig c;
  c.max_iters = iters;
  c.abs_tol = 1e-300;
  c.rel_tol = 1e-300;
  return c;
}

} // namespace

TEST(Solver, ScalarWorkedInstance) {
  for (PolicyKind p : {PolicyKind::UnitVector, PolicyKind::Residual}) {
    const RegressionSystem sys{dense_op(Matrix::Constant(1, 1, 1.5)),
                               diag_op(Vector::Constant(1, 0.5)),
                               Vector::Constant(1, 4.0)};
    const SolverOutcome out =
        itergp_solve(sys, p, SolverBuffers::empty(1), tight(1));
    EXPECT_NEAR(out.v[0], 2.0, 1e-15);
    EXPECT_NEAR(linalg::apply_lowrank(out.root, Vector::Ones(1))[0], 0.5,
                1e-15);
    EXPECT_EQ(out.iterations_run, 1);
  }
}

TEST(Solver, ZeroRhsConvergesImmediately) {
  const Instance in = make_instance(1, 10);
  RegressionSystem sys = in.system();
  sys.rhs.setZero();
  const SolverOutcome out = itergp_solve(sys, PolicyKind::Residual,
                                         SolverBuffers::empty(10), InnerConfig{});
  EXPECT_EQ(out.iterations_run, 0);
  EXPECT_EQ(out.termination, Termination::Converged);
  EXPECT_EQ(out.v.norm(), 0.0);
}

TEST(Solver, UnitVectorFullBudgetIsExact) {
  const Instance in = make_instance(2, 30);
  const SolverOutcome out = itergp_solve(in.system(), PolicyKind::UnitVector,
                                         SolverBuffers::empty(30), tight(30));
  const Vector exact = linalg::dense_spd_solve(in.khat(), in.rhs);
  EXPECT_LE((out.v - exact).norm(), 1e-8 * exact.norm());
  EXPECT_EQ(out.buffers.size(), 30);
  // Exhausted once every unit vector has been used
  const SolverOutcome more = itergp_solve(in.system(), PolicyKind::UnitVector,
                                          SolverBuffers::empty(30), tight(40));
  EXPECT_EQ(more.termination, Termination::Exhausted);
  EXPECT_EQ(more.iterations_run, 30);
}

TEST(Solver, QIsKhatOrthonormal) {
  const Instance in = make_instance(3, 40);
  const SolverOutcome out = itergp_solve(in.system(), PolicyKind::Residual,
                                         SolverBuffers::empty(40), tight(12));
  const Matrix &Q = out.root.columns;
  ASSERT_EQ(Q.cols(), 12);
  EXPECT_LE((Q.transpose() * in.khat() * Q - Matrix::Identity(12, 12)).norm(),
            1e-6);
  // T holds K S column for column
  EXPECT_LE((in.K * out.buffers.S - out.buffers.T).norm(), 1e-10);
}

TEST(Solver, ResidualPolicyIsCG) {
  const Instance in = make_instance(4, 60);
  for (Index j = 1; j <= 15; ++j) {
    const SolverOutcome out = itergp_solve(in.system(), PolicyKind::Residual,
                                           SolverBuffers::empty(60), tight(j));
    const Vector cg = linalg::cg_reference(dense_op(in.khat()), in.rhs, j);
    EXPECT_LE((out.v - cg).norm(), 1e-8 * cg.norm()) << j;
  }
}

TEST(Solver, MaxItersAndObserver) {
  const Instance in = make_instance(5, 20);
  std::vector<Index> seen;
  const SolverOutcome out = itergp_solve(
      in.system(), PolicyKind::Residual, SolverBuffers::empty(20), tight(4),
      std::nullopt,
      [&](const IterationRecord &rec, const Vector &, const linalg::LowRankRoot &Q) {
        seen.push_back(rec.iteration);
        EXPECT_EQ(Q.rank(), rec.iteration);
        EXPECT_GT(rec.eta, 0.0);
      });
  EXPECT_EQ(out.termination, Termination::MaxIters);
  EXPECT_EQ(seen, (std::vector<Index>{1, 2, 3, 4}));
  EXPECT_EQ(out.k_matvecs, 8);
  EXPECT_FALSE(out.Kv.has_value());
}

TEST(Solver, BreakdownStopsWithoutProgress) {
  // K = 0 and W^{-1} = 0: every direction has eta = 0
  const RegressionSystem sys{dense_op(Matrix::Zero(3, 3)),
                             diag_op(Vector::Zero(3)), Vector::Ones(3)};
  const SolverOutcome out = itergp_solve(sys, PolicyKind::Residual,
                                         SolverBuffers::empty(3), tight(5));
  EXPECT_EQ(out.termination, Termination::EtaBreakdown);
  EXPECT_EQ(out.iterations_run, 0);
  EXPECT_EQ(out.buffers.size(), 0);
}

TEST(Solver, RecycledBuffersSolveWithoutIterations) {
  const Instance in = make_instance(6, 25);
  const SolverOutcome first = itergp_solve(in.system(), PolicyKind::UnitVector,
                                           SolverBuffers::empty(25), tight(25));
  InnerConfig cfg;
  cfg.abs_tol = 1e-8;
  cfg.rel_tol = 1e-8;
  const SolverOutcome second =
      itergp_solve(in.system(), PolicyKind::Residual, first.buffers, cfg);
  EXPECT_EQ(second.iterations_run, 0);
  EXPECT_EQ(second.initial_rank, 25);
  EXPECT_EQ(second.termination, Termination::Converged);
}

TEST(Solver, RejectsBadInput) {
  const Instance in = make_instance(7, 5);
  RegressionSystem sys = in.system();
  sys.rhs[0] = std::nan("");
  EXPECT_THROW(itergp_solve(sys, PolicyKind::Residual, SolverBuffers::empty(5),
                            InnerConfig{}),
               InputError);
  InnerConfig bad;
  bad.abs_tol = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(policy_from_string("lanczos"), ConfigError);
}

TEST(Policy, Actions) {
  Policy unit(PolicyKind::UnitVector, 3);
  unit.mark_used(0);
  EXPECT_EQ(*unit.next_action(Vector::Zero(3)), Vector::Unit(3, 1));
  EXPECT_EQ(*unit.next_action(Vector::Zero(3)), Vector::Unit(3, 2));
  EXPECT_FALSE(unit.next_action(Vector::Zero(3)).has_value());

  Policy res(PolicyKind::Residual, 2);
  EXPECT_LE((*res.next_action(Vector{{3.0, -4.0}}) - Vector{{0.6, -0.8}}).norm(),
            1e-15);
}

TEST(InnerStop, Rule) {
  const InnerConfig d;
  EXPECT_TRUE(inner_stop(0.0, 1.0, 0, d));
  EXPECT_TRUE(inner_stop(1.0, 1e7, 0, d));
  EXPECT_FALSE(inner_stop(1.0, 1.0, 0, d));
  EXPECT_TRUE(inner_stop(1.0, 1.0, d.max_iters, d));
}

TEST(VirtualRun, EmptyAndScalar) {
  const VirtualRun empty =
      virtual_solver_run(SolverBuffers::empty(4), diag_op(Vector::Ones(4)));
  EXPECT_EQ(empty.root.rank(), 0);
  EXPECT_EQ(empty.buffers.size(), 0);

  SolverBuffers b = SolverBuffers::empty(1);
  b.append(Vector::Ones(1), Vector::Constant(1, 1.5));
  const VirtualRun one =
      virtual_solver_run(b, diag_op(Vector::Constant(1, 0.25)));
  EXPECT_NEAR(linalg::apply_lowrank(one.root, Vector::Ones(1))[0], 1.0 / 1.75,
              1e-15);
}

TEST(VirtualRun, FullRankTruncationIsIdentity) {
  const Instance in = make_instance(8, 30);
  const SolverOutcome out = itergp_solve(in.system(), PolicyKind::Residual,
                                         SolverBuffers::empty(30), tight(10));
  const Matrix &S = out.buffers.S;
  const Matrix M = S.transpose() * in.khat() * S;
  const Matrix C0 = S * M.inverse() * S.transpose();
  const auto w = diag_op(in.winv);
  const VirtualRun untruncated = virtual_solver_run(out.buffers, w);
  const VirtualRun full = virtual_solver_run(out.buffers, w, 10);
  const Matrix Cu = untruncated.root.columns * untruncated.root.columns.transpose();
  const Matrix Cf = full.root.columns * full.root.columns.transpose();
  EXPECT_LE((Cu - C0).norm(), 1e-9 * C0.norm());
  EXPECT_LE((Cf - C0).norm(), 1e-9 * C0.norm());

  const VirtualRun small = virtual_solver_run(out.buffers, w, 3);
  EXPECT_EQ(small.root.rank(), 3);
  EXPECT_EQ(small.buffers.size(), 3);
  EXPECT_LE((in.K * small.buffers.S - small.buffers.T).norm(), 1e-10);
}
