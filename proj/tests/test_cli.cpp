#include "ncgp/cli.hpp"
#include "ncgp/errors.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace ncgp;
using namespace ncgp::cli;

namespace {

std::string slurp(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json poisson_config(const std::string &out) {
  json doc = json::parse(R"({
    "seed": 4,
    "data": {"generator": {"kind": "poisson-1d"}},
    "likelihood": "poisson",
    "prior": {"kernel": "rbf", "lengthscale": 0.1, "outputscale": 5.0},
    "outer": {"delta": 0.001, "inner_schedule": 1, "max_newton_steps": 100},
    "metrics": {"mc_samples": 200}
  })");
  doc["output_dir"] = out;
  return doc;
}

int run(std::vector<std::string> args) {
  std::vector<char *> argv;
  static std::string prog = "ncgp";
  argv.push_back(prog.data());
  for (auto &a : args) {
    argv.push_back(a.data());
  }
  return run_main(static_cast<int>(argv.size()), argv.data());
}

std::size_t count_lines(const std::string &text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

} // namespace

TEST(Config, RejectsUnknownKeys) {
  json doc = poisson_config("x");
  doc["outer"]["deltaa"] = 1;
  EXPECT_THROW(ExperimentConfig::from_json(doc), ConfigError);
  json top = poisson_config("x");
  top["extra"] = 1;
  EXPECT_THROW(ExperimentConfig::from_json(top), ConfigError);
  json type = poisson_config("x");
  type["outer"]["max_newton_steps"] = "many";
  EXPECT_THROW(ExperimentConfig::from_json(type), ConfigError);
}

TEST(Config, EchoRoundTrips) {
  json doc = poisson_config("x");
  doc["outer"]["compression_rank"] = 10;
  doc["prior"]["kernels"] = json::array({{{"kernel", "matern32"}}});
  const ExperimentConfig a = ExperimentConfig::from_json(doc);
  const ExperimentConfig b = ExperimentConfig::from_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(*b.outer.compression_rank, 10);
  EXPECT_EQ(b.prior.per_output.at(0).family, KernelFamily::Matern32);
}

TEST(Cli, PoissonFitWritesOneRowPerStep) {
  oracle::TempDir dir("fit");
  const ExperimentConfig cfg =
      ExperimentConfig::from_json(poisson_config(dir.file("run")));
  const FitReport rep = cmd_fit(cfg);
  const std::size_t steps = rep.summary["outer_steps"].get<std::size_t>();
  EXPECT_GE(steps, 2u);
  EXPECT_LE(steps, 100u);
  EXPECT_EQ(count_lines(slurp(rep.metrics_path)), steps + 1);
  EXPECT_EQ(count_lines(slurp(dir.file("run/trace.csv"))), steps + 1);
  EXPECT_TRUE(rep.summary.contains("config"));
}

TEST(Cli, ScheduleOfOneForHundredSteps) {
  oracle::TempDir dir("fit100");
  json doc = poisson_config(dir.file("run"));
  doc["outer"]["delta"] = 1e-300;
  const FitReport rep = cmd_fit(ExperimentConfig::from_json(doc));
  EXPECT_EQ(rep.summary["outer_steps"].get<int>(), 100);
  EXPECT_EQ(count_lines(slurp(dir.file("run/trace.csv"))), 101u);
}

TEST(Cli, GaussianIsOneStep) {
  oracle::TempDir dir("gauss");
  // regression targets from a CSV
  Dataset d;
  d.X = oracle::uniform_points(1, 40, 1, 0.0, 1.0);
  d.y = oracle::normals(2, 40);
  write_dataset_csv(dir.file("train.csv"), d);
  json doc = {{"output_dir", dir.file("run")},
              {"data", {{"csv", {{"train", dir.file("train.csv")}}}}},
              {"likelihood", {{"family", "gaussian"}, {"noise_variance", 0.1}}},
              {"inner", {{"max_iters", 40}}}};
  const FitReport rep = cmd_fit(ExperimentConfig::from_json(doc));
  EXPECT_EQ(rep.summary["outer_steps"].get<int>(), 1);
  EXPECT_EQ(rep.status, FitStatus::Converged);
}

TEST(Cli, SodReportsDenseSize) {
  oracle::TempDir dir("sod");
  json doc = json::parse(R"({
    "data": {"generator": {"kind": "mixture-3d", "num_classes": 3,
                           "n_per_class": 100, "n_test_per_class": 20}},
    "likelihood": "softmax",
    "prior": {"kernel": "matern32", "lengthscale": 0.3, "outputscale": 1.0},
    "method": "sod",
    "sod": {"subset_size": 250}
  })");
  doc["output_dir"] = dir.file("run");
  const FitReport rep = cmd_fit(ExperimentConfig::from_json(doc));
  EXPECT_EQ(rep.summary["dense_size"].get<int>(), 750);
  EXPECT_TRUE(rep.summary["final"]["test"]["accuracy"].is_number());
}

TEST(Cli, PredictReproducesTrainingMetrics) {
  oracle::TempDir dir("predict");
  json doc = poisson_config(dir.file("run"));
  const ExperimentConfig cfg = ExperimentConfig::from_json(doc);
  const FitReport rep = cmd_fit(cfg);
  const auto paths = cmd_generate(cfg);
  PredictOptions opts;
  opts.mc_samples = cfg.metrics.mc_samples;
  opts.seed = metric_seed(cfg.seed, true);
  const json out = cmd_predict(rep.belief_path, paths.at(0),
                               dir.file("pred/predictions.csv"), opts);
  EXPECT_NEAR(out["metrics"]["nll"].get<double>(),
              rep.summary["final"]["train"]["nll"].get<double>(), 1e-12);
  EXPECT_EQ(count_lines(slurp(dir.file("pred/predictions.csv"))), 101u);
}

TEST(Cli, PredictOnEmptyInputs) {
  oracle::TempDir dir("empty");
  const ExperimentConfig cfg =
      ExperimentConfig::from_json(poisson_config(dir.file("run")));
  const FitReport rep = cmd_fit(cfg);
  { std::ofstream(dir.file("empty.csv")); }
  cmd_predict(rep.belief_path, dir.file("empty.csv"), dir.file("p.csv"), {});
  EXPECT_EQ(slurp(dir.file("p.csv")),
            "point_id,latent_mean,latent_var,rate_median,rate_lower,"
            "rate_upper\n");
  {
    std::ofstream(dir.file("header.csv")) << "x_0\n";
  }
  cmd_predict(rep.belief_path, dir.file("header.csv"), dir.file("q.csv"), {});
  EXPECT_EQ(count_lines(slurp(dir.file("q.csv"))), 1u);
}

TEST(Cli, BeliefRoundTripAndVersion) {
  oracle::TempDir dir("belief");
  const ExperimentConfig cfg =
      ExperimentConfig::from_json(poisson_config(dir.file("run")));
  const FitReport rep = cmd_fit(cfg);
  const LoadedBelief b = load_belief(rep.belief_path);
  EXPECT_EQ(b.belief.num_points(), 100);
  std::string bytes = slurp(rep.belief_path);
  EXPECT_EQ(bytes.substr(0, 4), "NCGP");
  bytes[4] = 9; // version field
  {
    std::ofstream(dir.file("old.bin"), std::ios::binary) << bytes;
  }
  EXPECT_THROW(load_belief(dir.file("old.bin")), VersionMismatch);
  EXPECT_EQ(run({"predict", "--belief", dir.file("old.bin"), "--inputs",
                 dir.file("x.csv"), "--out", dir.path()}),
            kExitFailure);
}

TEST(Cli, ExitCodes) {
  oracle::TempDir dir("exit");
  json bad = poisson_config(dir.file("run"));
  bad["typo"] = 1;
  std::ofstream(dir.file("bad.json")) << bad.dump();
  EXPECT_EQ(run({"fit", "--config", dir.file("bad.json")}), kExitConfig);
  EXPECT_EQ(run({"fit", "--config", dir.file("missing.json")}), kExitIo);
  json nodata = {{"data", {{"csv", {{"train", dir.file("nope.csv")}}}}},
                 {"likelihood", "gaussian"},
                 {"output_dir", dir.file("run")}};
  std::ofstream(dir.file("nodata.json")) << nodata.dump();
  EXPECT_EQ(run({"fit", "--config", dir.file("nodata.json")}), kExitIo);
  EXPECT_EQ(run({"frobnicate"}), kExitConfig);
  std::ofstream(dir.file("good.json")) << poisson_config(dir.file("run")).dump();
  EXPECT_EQ(run({"fit", "--config", dir.file("good.json"), "--cadence", "never"}),
            kExitOk);
  EXPECT_EQ(count_lines(slurp(dir.file("run/metrics.csv"))), 1u);
  EXPECT_EQ(run({"generate", "--config", dir.file("good.json"), "--out",
                 dir.file("gen")}),
            kExitOk);
  EXPECT_EQ(run({"predict", "--belief", dir.file("run/belief.bin"), "--inputs",
                 dir.file("gen/poisson-1d_test.csv"), "--out", dir.file("pred")}),
            kExitOk);
}

TEST(Cli, MetricsCsvIsDeterministic) {
  oracle::TempDir dir("det");
  json doc = poisson_config(dir.file("a"));
  doc["metrics"]["cadence"] = "iter";
  cmd_fit(ExperimentConfig::from_json(doc));
  doc["output_dir"] = dir.file("b");
  cmd_fit(ExperimentConfig::from_json(doc));
  EXPECT_EQ(slurp(dir.file("a/metrics.csv")), slurp(dir.file("b/metrics.csv")));
  EXPECT_EQ(slurp(dir.file("a/belief.bin")), slurp(dir.file("b/belief.bin")));
}

TEST(Cli, EchoReproducesTrace) {
  oracle::TempDir dir("echo");
  const FitReport rep =
      cmd_fit(ExperimentConfig::from_json(poisson_config(dir.file("a"))));
  json echo = rep.summary["config"];
  echo["output_dir"] = dir.file("b");
  cmd_fit(ExperimentConfig::from_json(echo));
  EXPECT_EQ(slurp(dir.file("a/metrics.csv")), slurp(dir.file("b/metrics.csv")));
}

TEST(Cli, BenchmarkTable) {
  oracle::TempDir dir("bench");
  json grid;
  grid["base"] = poisson_config(dir.file("unused"));
  grid["base"]["outer"]["max_newton_steps"] = 10;
  grid["repeats"] = 2;
  grid["cells"] = json::array(
      {{{"name", "one"}, {"overrides", {{"outer", {{"inner_schedule", 1}}}}}},
       {{"name", "five"}, {"overrides", {{"outer", {{"inner_schedule", 5}}}}}},
       {{"name", "broken"},
        {"overrides", {{"prior", {{"kernels", json::array({{{"kernel", "rbf"}}, {{"kernel", "rbf"}}})}}}}}}});
  RunOptions opts;
  opts.out_dir = dir.file("out");
  const json table = cmd_benchmark(grid, opts);
  ASSERT_EQ(table["cells"].size(), 3u);
  EXPECT_EQ(table["cells"][0]["final_test_nll"]["n"].get<int>(), 2);
  EXPECT_EQ(table["failures"].size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir.file("out/benchmark.csv")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("out/one/run_1/metrics.csv")));
}

TEST(Cli, MergePatch) {
  const json base = {{"a", {{"b", 1}, {"c", 2}}}, {"d", 3}};
  const json out = merge_patch(base, {{"a", {{"b", 5}}}, {"e", 6}});
  EXPECT_EQ(out["a"]["b"], 5);
  EXPECT_EQ(out["a"]["c"], 2);
  EXPECT_EQ(out["d"], 3);
  EXPECT_EQ(out["e"], 6);
}

TEST(Cli, WallclockExcludesMetrics) {
  oracle::TempDir dir("wall");
  json doc = json::parse(R"({
    "seed": 1,
    "data": {"generator": {"kind": "mixture-3d", "num_classes": 3,
                           "n_per_class": 300, "n_test_per_class": 100}},
    "likelihood": "softmax",
    "prior": {"kernel": "matern32", "lengthscale": 0.1, "outputscale": 1.0},
    "outer": {"delta": 1e-12, "inner_schedule": 10, "max_newton_steps": 4},
    "inner": {"abs_tol": 1e-12, "rel_tol": 1e-12},
    "metrics": {"mc_samples": 200}
  })");
  // best of three per cadence, seconds per inner iteration
  auto per_iter = [&](const std::string &cadence) {
    double best = 1e300;
    for (int rep = 0; rep < 3; ++rep) {
      doc["metrics"]["cadence"] = cadence;
      doc["output_dir"] = dir.file(cadence + std::to_string(rep));
      const json s = cmd_fit(ExperimentConfig::from_json(doc)).summary;
      best = std::min(best, s["wallclock_s"].get<double>() /
                                s["total_inner_iters"].get<double>());
    }
    return best;
  };
  const double never = per_iter("never");
  const double iter = per_iter("iter");
  EXPECT_LE(iter, 1.2 * never);
  EXPECT_GE(iter, never / 1.2);
}
