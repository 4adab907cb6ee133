#ifndef NCGP_NCGP_OUTER_HPP
#define NCGP_NCGP_OUTER_HPP

#include "ncgp/belief.hpp"
#include "ncgp/gp_model.hpp"
#include "ncgp/inner_solver.hpp"
#include "ncgp/likelihoods.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ncgp {

struct NewtonState {
  Vector f;
  Vector g; // f - m
  Index step = 0;
};

struct OuterConfig {
  double delta = 0.01;
  Index max_newton_steps = 20;
  // Inner iteration cap per outer step; the last entry repeats. Empty means
  // the inner config's max_iters alone.
  std::vector<Index> inner_schedule;
  bool recycle = true;
  std::optional<Index> compression_rank; // empty: keep every eigenpair
  Index tile = kDefaultTile;

  void validate() const;
  Index budget(Index step, const InnerConfig &inner) const;
};

/// y_hat = f + W(f)^{-1} grad log p(y | f), with W^+ for softmax.
Vector pseudo_targets(const Likelihood &likelihood, const Vector &f);

/// f_{i+1} = K v + m.
Vector newton_update(const MultiOutputPrior &prior, const Matrix &X,
                     const Vector &v, const Vector &m_vec,
                     Index tile = kDefaultTile);

bool outer_stop(const Vector &g_new, const std::optional<Vector> &g_old,
                double delta);

enum class FitStatus { Converged, MaxSteps, ConvergenceStalled };

std::string to_string(FitStatus status);

struct StepRecord {
  Index step = 0;               // 1-based
  double pseudo_target_norm = 0;
  Index inner_iters = 0;
  Index cum_inner_iters = 0;
  Index cum_matvecs = 0;
  double wallclock_s = 0;       // cumulative, callbacks excluded
  double residual_norm = 0;
  Termination termination = Termination::MaxIters;
  Index initial_rank = 0;       // rank of C_0 seeded by recycling
  Index buffer_columns = 0;
  double relative_change = 0;   // ||g_new - g_old|| / ||g_new||, 0 on step 1
  std::size_t memory_bytes = 0; // S, T and Q (or dense factor for SoD)
};

struct FitTrace {
  std::vector<StepRecord> steps;
  FitStatus status = FitStatus::MaxSteps;
  std::size_t peak_memory_bytes = 0;
  Index dense_size = 0;         // SoD: dimension of the factorized matrix
  std::vector<Index> subset;    // SoD: rows used
  Index jitter_retries = 0;     // SoD
};

struct FitResult {
  PosteriorBelief belief;
  FitTrace trace;
  Vector f; // final latent iterate at the training inputs (CN)
};

struct FitCallbacks {
  // After every inner iteration; wallclock in the record is cumulative over
  // the fit.
  std::function<void(Index step, const IterationRecord &,
                     const PosteriorBelief &)>
      on_iteration;
  std::function<void(const StepRecord &, const PosteriorBelief &)> on_step;
};

FitResult fit(std::shared_ptr<const MultiOutputPrior> prior,
              std::shared_ptr<const Matrix> X, const Likelihood &likelihood,
              const OuterConfig &outer, const InnerConfig &inner,
              PolicyKind policy, const FitCallbacks &callbacks = {});

/// Exact dense Newton on the given rows only.
FitResult sod_fit_on_subset(std::shared_ptr<const MultiOutputPrior> prior,
                            const Matrix &X, const Likelihood &likelihood,
                            std::vector<Index> rows, const OuterConfig &outer,
                            const FitCallbacks &callbacks = {});

/// Exact dense Newton on a uniform random subset drawn without replacement.
FitResult sod_fit(std::shared_ptr<const MultiOutputPrior> prior,
                  const Matrix &X, const Likelihood &likelihood,
                  Index subset_size, std::uint64_t seed,
                  const OuterConfig &outer, const FitCallbacks &callbacks = {});

std::vector<Index> sample_subset(Index population, Index subset_size,
                                 std::uint64_t seed);

} // namespace ncgp

#endif
