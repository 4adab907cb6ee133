#ifndef NCGP_CLI_HPP
#define NCGP_CLI_HPP

#include "ncgp/likelihoods.hpp"
#include "ncgp/ncgp_outer.hpp"
#include "ncgp/posterior.hpp"
#include "ncgp/synth_data.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ncgp::cli {

using json = nlohmann::json;

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitStalled = 4,
};

enum class Cadence { Step, Iter, Never };
Cadence cadence_from_string(const std::string &name);
std::string to_string(Cadence cadence);

enum class Method { IterNCGP, SoD };

struct DataConfig {
  std::optional<GeneratorSpec> generator;
  std::string train_csv;
  std::string test_csv; // optional
  Domain domain = Domain::Real;
  Index num_classes = 0;
};

struct PriorConfig {
  KernelSpec kernel{KernelFamily::RBF, 1.0, 1.0};
  std::vector<KernelSpec> per_output; // overrides `kernel` when non-empty
  std::vector<double> mean;           // one value, or one per output
};

struct MetricsConfig {
  Cadence cadence = Cadence::Step;
  Index mc_samples = 1000;
  bool mc_classification = false; // probit otherwise
  Index ece_bins = kDefaultEceBins;
  bool train = true;
};

struct ExperimentConfig {
  DataConfig data;
  PriorConfig prior;
  LikelihoodFamily likelihood = LikelihoodFamily::Gaussian;
  double noise_variance = 1.0;
  Method method = Method::IterNCGP;
  PolicyKind policy = PolicyKind::Residual;
  OuterConfig outer;
  InnerConfig inner;
  Index sod_subset = 250;
  MetricsConfig metrics;
  std::string output_dir = "out";
  std::uint64_t seed = 0;

  // Throws ConfigError on unknown keys, wrong types or invalid values.
  static ExperimentConfig from_json(const json &doc);
  // Fully resolved config; from_json(to_json()) reproduces this config.
  json to_json() const;
};

ExperimentConfig load_config(const std::string &path);
json read_json_file(const std::string &path);
void write_text_atomic(const std::string &path, const std::string &content);

struct LoadedData {
  Dataset train;
  std::optional<Dataset> test;
};

LoadedData load_data(const ExperimentConfig &config);

std::shared_ptr<const MultiOutputPrior> make_prior(const PriorConfig &prior,
                                                   Index num_outputs);
Index num_latent_outputs(LikelihoodFamily family, const Dataset &data);

struct MetricValues {
  double nll = 0;
  std::optional<double> accuracy;
  std::optional<double> ece;
};

/// Predictive metrics of a belief on a dataset.
MetricValues evaluate_metrics(const PosteriorBelief &belief,
                              const Dataset &data, LikelihoodFamily family,
                              double noise_variance,
                              const MetricsConfig &metrics, std::uint64_t seed);

std::uint64_t metric_seed(std::uint64_t seed, bool train);

// ---- belief artifact

inline constexpr std::uint32_t kBeliefVersion = 1;

void save_belief(const std::string &path, const PosteriorBelief &belief,
                 const json &config_echo);

struct LoadedBelief {
  PosteriorBelief belief;
  json config;
};

LoadedBelief load_belief(const std::string &path);

// ---- commands

struct RunOptions {
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<Cadence> cadence;
  bool quiet = false;
};

void apply_overrides(ExperimentConfig &config, const RunOptions &options);

std::vector<std::string> cmd_generate(const ExperimentConfig &config);

struct FitReport {
  FitStatus status = FitStatus::MaxSteps;
  json summary;
  std::string metrics_path;
  std::string summary_path;
  std::string belief_path;
};

FitReport cmd_fit(const ExperimentConfig &config);

struct PredictOptions {
  Index mc_samples = 1000;
  std::uint64_t seed = 0;
  std::optional<bool> mc_classification;
};

/// Writes predictions for the inputs in `inputs_csv`; when the CSV carries a
/// y column the metrics are returned as well.
json cmd_predict(const std::string &belief_path, const std::string &inputs_csv,
                 const std::string &out_csv, const PredictOptions &options);

/// Grid of configs: {"base": {...}, "cells": [{"name", "overrides"}],
/// "repeats": n, "output_dir": dir}. Returns the comparison table.
json cmd_benchmark(const json &grid, const RunOptions &options);

json merge_patch(json base, const json &patch);

/// Runs a CLI verb; returns the process exit code.
int run_main(int argc, char **argv);

} // namespace ncgp::cli

#endif
