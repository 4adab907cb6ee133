#include "ncgp/errors.hpp"
#include "ncgp/ncgp_outer.hpp"
#include "ncgp/posterior.hpp"
#include "ncgp/synth_data.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace ncgp;

namespace {

InnerConfig exact_inner(Index dim) {
  InnerConfig c;
  c.max_iters = dim;
  c.abs_tol = 1e-13;
  c.rel_tol = 1e-13;
  return c;
}

Vector poisson_counts(std::uint64_t seed, Index n) {
  random::Stream rng(seed);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    y[i] = static_cast<double>(rng.poisson(3.0));
  }
  return y;
}

// f = K v + m, so the prior term is v^T K v without touching K^{-1}.
double log_posterior(const Likelihood &lik, const Matrix &K, const Vector &m,
                     const Vector &v) {
  const Vector Kv = K * v;
  return lik.log_lik(Kv + m) - 0.5 * v.dot(Kv);
}

} // namespace

TEST(PseudoTargets, ScalarCases) {
  const GaussianLikelihood g(Vector{{1.5, -0.5}}, 0.2);
  for (double f0 : {0.0, 3.0}) {
    const Vector yh = pseudo_targets(g, Vector::Constant(2, f0));
    EXPECT_NEAR(yh[0], 1.5, 1e-14);
    EXPECT_NEAR(yh[1], -0.5, 1e-14);
  }
  const PoissonLikelihood p(Vector{{3.0}});
  EXPECT_NEAR(pseudo_targets(p, Vector::Zero(1))[0], 2.0, 1e-15);
  const LogisticLikelihood l(Vector{{1.0}});
  EXPECT_NEAR(pseudo_targets(l, Vector::Zero(1))[0], 2.0, 1e-15);
}

TEST(NewtonUpdate, Cases) {
  const MultiOutputPrior prior(KernelSpec{KernelFamily::RBF, 1.0, 1.5}, 1);
  const Matrix X = Matrix::Zero(1, 1);
  EXPECT_NEAR(newton_update(prior, X, Vector::Constant(1, 2.0),
                            Vector::Zero(1), kDefaultTile)[0],
              3.0, 1e-15);
  const Vector m = Vector::Constant(1, 0.7);
  EXPECT_EQ(newton_update(prior, X, Vector::Zero(1), m, kDefaultTile), m);
}

TEST(OuterStop, Cases) {
  EXPECT_FALSE(outer_stop(Vector{{1.0, 0.0}}, std::nullopt, 0.01));
  EXPECT_TRUE(outer_stop(Vector{{1.0, 2.0}}, Vector{{1.0, 2.0}}, 0.01));
  EXPECT_FALSE(outer_stop(Vector{{1.0, 0.0}}, Vector{{0.0, 1.0}}, 0.01));
  EXPECT_TRUE(outer_stop(Vector{{1.0, 0.0}}, Vector{{1.001, 0.0}}, 0.01));
  EXPECT_TRUE(outer_stop(Vector::Zero(2), Vector::Zero(2), 0.01));
}

TEST(OuterConfig, BudgetAndValidation) {
  OuterConfig o;
  InnerConfig in;
  in.max_iters = 50;
  o.inner_schedule = {1, 5, 100};
  EXPECT_EQ(o.budget(0, in), 1);
  EXPECT_EQ(o.budget(1, in), 5);
  EXPECT_EQ(o.budget(2, in), 50);
  EXPECT_EQ(o.budget(9, in), 50);
  o.delta = 0.0;
  EXPECT_THROW(o.validate(), ConfigError);
  o.delta = 0.01;
  o.inner_schedule = {0};
  EXPECT_THROW(o.validate(), ConfigError);
}

TEST(Fit, ExactStepIsDenseNewton) {
  const KernelSpec k{KernelFamily::RBF, 0.5, 2.0};
  const Matrix X = oracle::uniform_points(1, 12, 1, 0.0, 1.0);
  const Vector y = poisson_counts(2, 12);
  auto prior = std::make_shared<const MultiOutputPrior>(
      std::vector<KernelSpec>{k}, Vector::Constant(1, 0.3));
  const PoissonLikelihood lik(y);
  OuterConfig outer;
  outer.max_newton_steps = 1;
  const FitResult r = fit(prior, std::make_shared<const Matrix>(X), lik, outer,
                          exact_inner(12), PolicyKind::UnitVector);
  const Matrix K = oracle::gram(k, 1, X, X);
  const Vector m = Vector::Constant(12, 0.3);
  const Vector ref = oracle::newton_step(
      K, m, m, oracle::neg_hessian(oracle::Lik::Poisson, m, 1),
      oracle::grad(oracle::Lik::Poisson, y, m, 1));
  EXPECT_LE((r.f - ref).norm(), 1e-7 * ref.norm());
}

TEST(Fit, GaussianCollapsesToOneStep) {
  const KernelSpec k{KernelFamily::Matern32, 0.3, 1.2};
  const Matrix X = oracle::uniform_points(3, 30, 2, 0.0, 1.0);
  const Vector y = oracle::normals(4, 30);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const GaussianLikelihood lik(y, 0.1);
  OuterConfig outer;
  const FitResult r = fit(prior, std::make_shared<const Matrix>(X), lik, outer,
                          exact_inner(30), PolicyKind::UnitVector);
  EXPECT_EQ(r.trace.steps.size(), 1u);
  EXPECT_EQ(r.trace.status, FitStatus::Converged);
  const auto ref = oracle::gp_regression(k, X, y, 0.1, X);
  EXPECT_LE((posterior_mean(r.belief, X).col(0) - ref.mean).norm(),
            1e-7 * ref.mean.norm());
}

TEST(Fit, PoissonScheduleOneIterPerStep) {
  const GeneratedData data =
      gen_gp_poisson_1d(GeneratorSpec::defaults(GeneratorKind::GpPoisson1D));
  const Matrix &X = data.train.X;
  const Vector &y = data.train.y;
  auto prior = std::make_shared<const MultiOutputPrior>(
      KernelSpec{KernelFamily::RBF, 0.1, 5.0}, 1);
  const PoissonLikelihood lik(y);
  OuterConfig outer;
  outer.max_newton_steps = 100;
  outer.inner_schedule = {1};
  outer.delta = 1e-3;
  const auto Xp = std::make_shared<const Matrix>(X);
  const FitResult r =
      fit(prior, Xp, lik, outer, InnerConfig{}, PolicyKind::Residual);
  ASSERT_FALSE(r.trace.steps.empty());
  EXPECT_LE(r.trace.steps.size(), 100u);
  const PosteriorBelief prior_belief = PosteriorBelief::prior_only(prior, Xp);
  auto nll = [&](const PosteriorBelief &b) {
    return poisson_mc_nll(posterior_mean(b, X), posterior_marginal_var(b, X), y,
                          2000, 11);
  };
  EXPECT_LT(nll(r.belief), nll(prior_belief));
  for (const auto &s : r.trace.steps) {
    EXPECT_LE(s.inner_iters, 1);
  }
}

TEST(Fit, RecyclingDoesNotChangeExactSolves) {
  const KernelSpec k{KernelFamily::RBF, 0.4, 1.5};
  const Matrix X = oracle::uniform_points(6, 15, 1, 0.0, 1.0);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const LogisticLikelihood lik(Vector{{0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 1, 0, 0, 1}});
  OuterConfig outer;
  outer.max_newton_steps = 4;
  outer.delta = 1e-12;
  const auto Xp = std::make_shared<const Matrix>(X);
  outer.recycle = true;
  const FitResult on =
      fit(prior, Xp, lik, outer, exact_inner(15), PolicyKind::UnitVector);
  outer.recycle = false;
  const FitResult off =
      fit(prior, Xp, lik, outer, exact_inner(15), PolicyKind::UnitVector);
  EXPECT_LE((on.f - off.f).norm(), 1e-6);
}

namespace {

// Psi along exact Newton steps from f = m, one value per outer step.
std::vector<double> psi_trajectory(const Likelihood &lik, const KernelSpec &k,
                                   const Matrix &X, Index steps) {
  const Index n = X.rows();
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const Matrix K = oracle::gram(k, 1, X, X);
  const Vector m = Vector::Zero(n);
  std::vector<double> psi{log_posterior(lik, K, m, Vector::Zero(n))};
  FitCallbacks cb;
  cb.on_step = [&](const StepRecord &, const PosteriorBelief &b) {
    psi.push_back(log_posterior(lik, K, m, b.v));
  };
  OuterConfig outer;
  outer.max_newton_steps = steps;
  outer.delta = 1e-10;
  outer.recycle = false;
  fit(prior, std::make_shared<const Matrix>(X), lik, outer, exact_inner(n),
      PolicyKind::UnitVector, cb);
  return psi;
}

} // namespace

TEST(Fit, LogPosteriorAscends) {
  const KernelSpec k{KernelFamily::RBF, 0.3, 3.0};
  for (std::uint64_t seed : {7u, 21u, 33u}) {
    const Matrix X = oracle::uniform_points(seed, 20, 1, 0.0, 1.0);
    random::Stream rng(seed + 1);
    Vector labels(20), counts(20);
    for (Index i = 0; i < 20; ++i) {
      labels[i] = rng.uniform(0.0, 1.0) < 0.5 ? 1.0 : 0.0;
      counts[i] = static_cast<double>(rng.poisson(1.0));
    }
    const LogisticLikelihood logistic(labels);
    const PoissonLikelihood poisson(counts);
    for (const Likelihood *lik :
         {static_cast<const Likelihood *>(&logistic),
          static_cast<const Likelihood *>(&poisson)}) {
      const std::vector<double> psi = psi_trajectory(*lik, k, X, 8);
      ASSERT_GE(psi.size(), 3u);
      for (std::size_t i = 1; i < psi.size(); ++i) {
        EXPECT_GE(psi[i], psi[i - 1] - 1e-8) << seed << " step " << i;
      }
    }
  }
}

// Counts far above exp(m) make the first full Newton step overshoot. The dense
// iteration does the same thing, so only agreement is checked here.
TEST(Fit, OvershootingStepTracksDenseNewton) {
  const KernelSpec k{KernelFamily::RBF, 0.3, 3.0};
  const Matrix X = oracle::uniform_points(7, 20, 1, 0.0, 1.0);
  const Vector y = poisson_counts(8, 20);
  const PoissonLikelihood lik(y);
  const std::vector<double> psi = psi_trajectory(lik, k, X, 4);
  ASSERT_EQ(psi.size(), 5u);
  EXPECT_LT(psi[1], psi[0]);

  const Matrix K = oracle::gram(k, 1, X, X);
  const Vector m = Vector::Zero(20);
  Vector f = m;
  for (std::size_t i = 1; i < psi.size(); ++i) {
    f = oracle::newton_step(K, m, f,
                            oracle::neg_hessian(oracle::Lik::Poisson, f, 1),
                            oracle::grad(oracle::Lik::Poisson, y, f, 1));
    const Vector alpha =
        K.completeOrthogonalDecomposition().solve(Vector(f - m));
    const double ref = lik.log_lik(f) - 0.5 * (f - m).dot(alpha);
    EXPECT_NEAR(psi[i], ref, 1e-6 * std::abs(ref)) << i;
  }
  EXPECT_GT(psi.back(), psi[0]);
}

TEST(Fit, MatvecAccounting) {
  const KernelSpec k{KernelFamily::RBF, 0.2, 2.0};
  const Matrix X = oracle::uniform_points(9, 40, 1, 0.0, 1.0);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const PoissonLikelihood lik(poisson_counts(10, 40));
  OuterConfig outer;
  outer.max_newton_steps = 6;
  outer.inner_schedule = {3, 7};
  const FitResult r = fit(prior, std::make_shared<const Matrix>(X), lik, outer,
                          InnerConfig{}, PolicyKind::Residual);
  const auto &last = r.trace.steps.back();
  EXPECT_EQ(last.cum_matvecs,
            2 * last.cum_inner_iters + static_cast<Index>(r.trace.steps.size()));
  for (std::size_t i = 1; i < r.trace.steps.size(); ++i) {
    EXPECT_GE(r.trace.steps[i].cum_matvecs, r.trace.steps[i - 1].cum_matvecs);
    EXPECT_GE(r.trace.steps[i].wallclock_s, r.trace.steps[i - 1].wallclock_s);
  }
  EXPECT_LE(r.trace.steps[0].inner_iters, 3);
}

TEST(Fit, FixedPointIsPreserved) {
  // Starting from the exact mode, pseudo targets reproduce it.
  const KernelSpec k{KernelFamily::RBF, 0.3, 2.0};
  const Matrix X = oracle::uniform_points(12, 15, 1, 0.0, 1.0);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const PoissonLikelihood lik(poisson_counts(13, 15));
  OuterConfig outer;
  outer.max_newton_steps = 30;
  outer.delta = 1e-12;
  const FitResult r = fit(prior, std::make_shared<const Matrix>(X), lik, outer,
                          exact_inner(15), PolicyKind::UnitVector);
  const Vector yh = pseudo_targets(lik, r.f);
  const Matrix K = oracle::gram(k, 1, X, X);
  const Matrix Winv = linalg::materialize(lik.w_inv_operator(r.f), 15);
  const Vector v = (K + Winv).ldlt().solve(yh);
  EXPECT_LE((K * v - r.f).norm(), 1e-8 * r.f.norm());
}

TEST(Sod, FullSubsetMatchesUnitVectorFit) {
  const KernelSpec k{KernelFamily::RBF, 0.4, 2.0};
  const Matrix X = oracle::uniform_points(14, 16, 1, 0.0, 1.0);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const PoissonLikelihood lik(poisson_counts(15, 16));
  OuterConfig outer;
  outer.max_newton_steps = 5;
  outer.delta = 1e-12;
  outer.recycle = false;
  const FitResult sod = sod_fit(prior, X, lik, 16, 1, outer);
  const FitResult it = fit(prior, std::make_shared<const Matrix>(X), lik, outer,
                           exact_inner(16), PolicyKind::UnitVector);
  EXPECT_LE((sod.f - it.f).norm(), 1e-6 * it.f.norm());
  EXPECT_EQ(sod.trace.dense_size, 16);
}

TEST(Sod, SinglePointRevertsToPrior) {
  const KernelSpec k{KernelFamily::RBF, 0.1, 2.0};
  const Matrix X = oracle::uniform_points(16, 30, 1, 0.0, 1.0);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const PoissonLikelihood lik(poisson_counts(17, 30));
  const FitResult r = sod_fit(prior, X, lik, 1, 3, OuterConfig{});
  const Matrix far = Matrix::Constant(1, 1, 10.0);
  EXPECT_GE(posterior_marginal_var(r.belief, far)(0, 0), 0.99 * 2.0);
}

TEST(Sod, Deterministic) {
  const KernelSpec k{KernelFamily::RBF, 0.2, 1.0};
  const Matrix X = oracle::uniform_points(18, 50, 1, 0.0, 1.0);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 1);
  const PoissonLikelihood lik(poisson_counts(19, 50));
  const FitResult a = sod_fit(prior, X, lik, 10, 5, OuterConfig{});
  const FitResult b = sod_fit(prior, X, lik, 10, 5, OuterConfig{});
  EXPECT_EQ(a.trace.subset, b.trace.subset);
  EXPECT_EQ(a.f, b.f);
  EXPECT_EQ(sample_subset(50, 10, 5), a.trace.subset);
  EXPECT_NE(sample_subset(50, 10, 6), a.trace.subset);
  EXPECT_THROW(sample_subset(5, 6, 0), ContractViolation);
}

TEST(Sod, SoftmaxDenseSize) {
  const KernelSpec k{KernelFamily::RBF, 0.5, 1.0};
  const Matrix X = oracle::uniform_points(20, 40, 2, 0.0, 1.0);
  auto prior = std::make_shared<const MultiOutputPrior>(k, 3);
  Vector y(40);
  for (Index i = 0; i < 40; ++i) {
    y[i] = static_cast<double>(i % 3);
  }
  const SoftmaxLikelihood lik(y, 3);
  const FitResult r = sod_fit(prior, X, lik, 25, 1, OuterConfig{});
  EXPECT_EQ(r.trace.dense_size, 75);
  EXPECT_EQ(r.belief.num_points(), 25);
}
