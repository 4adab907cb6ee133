#include "ncgp/ncgp_outer.hpp"

#include "ncgp/errors.hpp"
#include "ncgp/random.hpp"
#include "ncgp/stopwatch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ncgp {

void OuterConfig::validate() const {
  if (!(delta > 0.0)) {
    throw ConfigError("outer delta must be positive");
  }
  if (max_newton_steps < 1) {
    throw ConfigError("max_newton_steps must be at least 1");
  }
  for (Index b : inner_schedule) {
    if (b < 1) {
      throw ConfigError("inner schedule entries must be >= 1");
    }
  }
  if (compression_rank && *compression_rank < 1) {
    throw ConfigError("compression rank must be >= 1");
  }
  if (tile < 1) {
    throw ConfigError("tile must be >= 1");
  }
}

Index OuterConfig::budget(Index step, const InnerConfig &inner) const {
  if (inner_schedule.empty()) {
    return inner.max_iters;
  }
  const auto k = static_cast<std::size_t>(
      std::min<Index>(step, static_cast<Index>(inner_schedule.size()) - 1));
  return std::min(inner_schedule[k], inner.max_iters);
}

Vector pseudo_targets(const Likelihood &likelihood, const Vector &f) {
  return f + likelihood.w_inv_matvec(f, likelihood.grad_log_lik(f));
}

Vector newton_update(const MultiOutputPrior &prior, const Matrix &X,
                     const Vector &v, const Vector &m_vec, Index tile) {
  require(m_vec.size() == v.size(), "newton_update: mean length mismatch");
  return prior_matvec(prior, X, v, tile) + m_vec;
}

bool outer_stop(const Vector &g_new, const std::optional<Vector> &g_old,
                double delta) {
  if (!g_old) {
    return false;
  }
  require(g_old->size() == g_new.size(), "outer_stop: length mismatch");
  const double norm_new = g_new.norm();
  const double change = (g_new - *g_old).norm();
  if (norm_new == 0.0) {
    return change == 0.0;
  }
  return change / norm_new <= delta;
}

std::string to_string(FitStatus status) {
  switch (status) {
  case FitStatus::Converged:
    return "converged";
  case FitStatus::MaxSteps:
    return "max_steps";
  case FitStatus::ConvergenceStalled:
    return "convergence_stalled";
  }
  return "?";
}

namespace {

void check_fit_inputs(const MultiOutputPrior &prior, const Matrix &X,
                      const Likelihood &likelihood) {
  require(likelihood.num_outputs() == prior.num_outputs(),
          "fit: likelihood and prior disagree on the number of outputs");
  require(likelihood.num_points() == X.rows(),
          "fit: likelihood targets and inputs disagree on N");
  require(X.rows() >= 1, "fit: empty dataset");
}

} // namespace

FitResult fit(std::shared_ptr<const MultiOutputPrior> prior,
              std::shared_ptr<const Matrix> X, const Likelihood &likelihood,
              const OuterConfig &outer, const InnerConfig &inner,
              PolicyKind policy, const FitCallbacks &callbacks) {
  require(prior && X, "fit: null prior or inputs");
  outer.validate();
  inner.validate();
  check_fit_inputs(*prior, *X, likelihood);

  const Index N = X->rows();
  const Index dim = N * prior->num_outputs();
  const Vector m = prior->mean_vector(N);
  const Index tile = outer.tile;
  const LinearOperator apply_K = [&](const Vector &w) {
    return prior_matvec(*prior, *X, w, tile);
  };

  Stopwatch clock;
  clock.start();

  FitResult result;
  result.belief = PosteriorBelief::prior_only(prior, X);
  NewtonState state{m, Vector::Zero(dim), 0};
  std::optional<Vector> g_old;
  SolverBuffers buffers = SolverBuffers::empty(dim);
  Index cum_matvecs = 0;
  Index cum_iters = 0;
  result.trace.status = FitStatus::MaxSteps;

  for (Index i = 0; i < outer.max_newton_steps; ++i) {
    const Vector y_hat = pseudo_targets(likelihood, state.f);
    RegressionSystem system{apply_K, likelihood.w_inv_operator(state.f),
                            y_hat - m};
    InnerConfig step_inner = inner;
    step_inner.max_iters = outer.budget(i, inner);

    IterationObserver observer;
    if (callbacks.on_iteration) {
      observer = [&](const IterationRecord &rec, const Vector &v,
                     const linalg::LowRankRoot &Q) {
        clock.stop();
        PosteriorBelief snapshot{prior, X, v, Q, i + 1, rec.iteration};
        IterationRecord cumulative = rec;
        cumulative.wallclock_s = clock.elapsed();
        callbacks.on_iteration(i + 1, cumulative, snapshot);
        clock.start();
      };
    }

    SolverOutcome outcome = itergp_solve(
        system, policy,
        outer.recycle ? std::move(buffers) : SolverBuffers::empty(dim),
        step_inner, outer.compression_rank, observer);

    Vector Kv;
    if (outcome.Kv) {
      Kv = std::move(*outcome.Kv);
    } else {
      Kv = apply_K(outcome.v);
      ++cum_matvecs;
    }
    cum_matvecs += outcome.k_matvecs;
    cum_iters += outcome.iterations_run;

    const Vector g_new = Kv;
    StepRecord rec;
    rec.step = i + 1;
    rec.pseudo_target_norm = y_hat.norm();
    rec.inner_iters = outcome.iterations_run;
    rec.cum_inner_iters = cum_iters;
    rec.cum_matvecs = cum_matvecs;
    rec.residual_norm = outcome.residual_norm;
    rec.termination = outcome.termination;
    rec.initial_rank = outcome.initial_rank;
    rec.buffer_columns = outcome.buffers.size();
    rec.relative_change =
        g_old && g_new.norm() > 0.0 ? (g_new - *g_old).norm() / g_new.norm()
                                    : 0.0;
    rec.memory_bytes =
        outcome.buffers.bytes() +
        static_cast<std::size_t>(outcome.root.columns.size()) * sizeof(double);
    result.trace.peak_memory_bytes =
        std::max(result.trace.peak_memory_bytes, rec.memory_bytes);

    const bool stalled = outcome.iterations_run == 0 &&
                         outcome.termination == Termination::EtaBreakdown;
    // A conjugate likelihood is done once the single regression is solved:
    // by tolerance, or because the actions span the whole space.
    const bool solved_exactly = outcome.termination != Termination::MaxIters ||
                                outcome.root.columns.cols() >= dim;
    const bool converged =
        (likelihood.is_conjugate() && solved_exactly) ||
        outer_stop(g_new, g_old, outer.delta);

    state.f = g_new + m;
    state.g = g_new;
    state.step = i + 1;
    result.belief = PosteriorBelief{prior, X, std::move(outcome.v),
                                    std::move(outcome.root), i + 1,
                                    outcome.iterations_run};
    buffers = std::move(outcome.buffers);

    rec.wallclock_s = clock.elapsed();
    result.trace.steps.push_back(rec);
    if (callbacks.on_step) {
      clock.stop();
      callbacks.on_step(rec, result.belief);
      clock.start();
    }

    if (stalled) {
      result.trace.status = FitStatus::ConvergenceStalled;
      break;
    }
    if (converged) {
      result.trace.status = FitStatus::Converged;
      break;
    }
    g_old = g_new;
  }
  result.f = std::move(state.f);
  return result;
}

std::vector<Index> sample_subset(Index population, Index subset_size,
                                 std::uint64_t seed) {
  require(subset_size >= 0 && subset_size <= population,
          "sample_subset: subset larger than population");
  std::vector<Index> perm(static_cast<std::size_t>(population));
  std::iota(perm.begin(), perm.end(), Index{0});
  random::Stream rng(random::derive_seed(seed, 0x50D5u));
  // partial Fisher-Yates
  for (Index k = 0; k < subset_size; ++k) {
    const auto pick =
        k + static_cast<Index>(rng.uniform_index(
                static_cast<std::uint64_t>(population - k)));
    std::swap(perm[k], perm[pick]);
  }
  perm.resize(static_cast<std::size_t>(subset_size));
  std::sort(perm.begin(), perm.end());
  return perm;
}

namespace {

struct JitteredFactor {
  linalg::CholeskyFactor factor;
  Index retries;
};

JitteredFactor factor_with_jitter(const Matrix &A) {
  constexpr int kMaxRetries = 6;
  const double scale = std::max(A.diagonal().cwiseAbs().mean(), 1e-300);
  double jitter = 1e-12 * scale;
  try {
    return {linalg::CholeskyFactor(A), 0};
  } catch (const NotPositiveDefinite &) {
  }
  for (int attempt = 1; attempt <= kMaxRetries; ++attempt, jitter *= 100.0) {
    Matrix B = A;
    B.diagonal().array() += jitter;
    try {
      return {linalg::CholeskyFactor(B), attempt};
    } catch (const NotPositiveDefinite &err) {
      if (attempt == kMaxRetries) {
        throw NotPositiveDefinite(
            err.dimension,
            std::string(err.what()) + " (after " +
                std::to_string(kMaxRetries) +
                " jitter retries, last jitter " + std::to_string(jitter) + ")");
      }
    }
  }
  throw NotPositiveDefinite(0, "unreachable");
}

} // namespace

FitResult sod_fit_on_subset(std::shared_ptr<const MultiOutputPrior> prior,
                            const Matrix &X, const Likelihood &likelihood,
                            std::vector<Index> rows, const OuterConfig &outer,
                            const FitCallbacks &callbacks) {
  require(prior != nullptr, "sod_fit: null prior");
  outer.validate();
  check_fit_inputs(*prior, X, likelihood);
  require(!rows.empty(), "sod_fit: empty subset");

  auto Xs = std::make_shared<Matrix>(static_cast<Index>(rows.size()), X.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] >= 0 && rows[k] < X.rows(), "sod_fit: row out of range");
    Xs->row(static_cast<Index>(k)) = X.row(rows[k]);
  }
  const auto sub_lik = likelihood.subset(rows);
  const Index Ns = Xs->rows();
  const Index dim = Ns * prior->num_outputs();
  const Vector m = prior->mean_vector(Ns);

  Stopwatch clock;
  clock.start();

  const Matrix K = dense_prior_covariance(*prior, *Xs);
  FitResult result;
  result.trace.subset = rows;
  result.trace.dense_size = dim;
  result.trace.peak_memory_bytes =
      static_cast<std::size_t>(dim) * static_cast<std::size_t>(dim) *
      sizeof(double);
  result.belief = PosteriorBelief::prior_only(prior, Xs);
  result.trace.status = FitStatus::MaxSteps;

  Vector f = m;
  std::optional<Vector> g_old;
  Index cum_matvecs = 0;
  for (Index i = 0; i < outer.max_newton_steps; ++i) {
    const Vector y_hat = pseudo_targets(*sub_lik, f);
    const Matrix W_inv = linalg::materialize(sub_lik->w_inv_operator(f), dim);
    const Matrix K_hat = K + 0.5 * (W_inv + W_inv.transpose());
    JitteredFactor chol = factor_with_jitter(K_hat);
    result.trace.jitter_retries += chol.retries;
    Vector v = chol.factor.solve(Vector(y_hat - m));
    const Vector g_new = K * v;
    ++cum_matvecs;

    StepRecord rec;
    rec.step = i + 1;
    rec.pseudo_target_norm = y_hat.norm();
    rec.inner_iters = dim;
    rec.cum_inner_iters = (i + 1) * dim;
    rec.cum_matvecs = cum_matvecs;
    rec.residual_norm = (y_hat - m - K_hat * v).norm();
    rec.termination = Termination::Converged;
    rec.buffer_columns = 0;
    rec.relative_change =
        g_old && g_new.norm() > 0.0 ? (g_new - *g_old).norm() / g_new.norm()
                                    : 0.0;
    rec.memory_bytes = result.trace.peak_memory_bytes;

    const bool converged = likelihood.is_conjugate() ||
                           outer_stop(g_new, g_old, outer.delta);
    f = g_new + m;
    result.belief = PosteriorBelief{
        prior, Xs, std::move(v),
        linalg::LowRankRoot(chol.factor.solve_upper(Matrix::Identity(dim, dim))),
        i + 1, dim};
    rec.wallclock_s = clock.elapsed();
    result.trace.steps.push_back(rec);
    if (callbacks.on_step) {
      clock.stop();
      callbacks.on_step(rec, result.belief);
      clock.start();
    }
    if (converged) {
      result.trace.status = FitStatus::Converged;
      break;
    }
    g_old = g_new;
  }
  result.f = std::move(f);
  return result;
}

FitResult sod_fit(std::shared_ptr<const MultiOutputPrior> prior,
                  const Matrix &X, const Likelihood &likelihood,
                  Index subset_size, std::uint64_t seed,
                  const OuterConfig &outer, const FitCallbacks &callbacks) {
  require(subset_size >= 1 && subset_size <= X.rows(),
          "sod_fit: subset size must be in [1, N]");
  return sod_fit_on_subset(std::move(prior), X, likelihood,
                           sample_subset(X.rows(), subset_size, seed), outer,
                           callbacks);
}

} // namespace ncgp
