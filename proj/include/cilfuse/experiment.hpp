#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cilfuse/eval.hpp"
#include "cilfuse/fusion.hpp"
#include "cilfuse/routing.hpp"

namespace cilfuse {

inline const std::vector<std::string> kMethods{"finetune",   "conf-route",  "learned-route", "oracle-route",
                                               "featcat-rt", "logitcat-rt", "logitcat-ft",   "fusion"};

/// Real-embedding data source: a FeatureFile plus manifest replaces the
/// synthetic generator. The trunk becomes the identity.
struct FeatureSource {
  std::filesystem::path manifest;
  std::filesystem::path file;  // defaults to the manifest's feature_file
  std::size_t n_base_classes = 0;
  std::vector<std::size_t> novel_steps;
  std::size_t per_class_val = 5;
  std::size_t per_class_test = 10;
};

struct Schedules {
  SgdConfig pretrain{.base_lr = 0.1, .decay_every = 30, .decay_factor = 0.1, .epochs = 90, .batch_size = 64};
  SgdConfig stage1{.base_lr = 0.5, .decay_every = 10, .decay_factor = 0.1, .epochs = 30, .batch_size = 64};
  SgdConfig finetune{.base_lr = 0.1, .decay_every = 10, .decay_factor = 0.1, .epochs = 30, .batch_size = 64};
  SgdConfig router{.base_lr = 5.0, .decay_every = 5, .decay_factor = 0.1, .epochs = 10, .batch_size = 64};
  FusionTrainConfig fusion{.sgd{.base_lr = 3.0, .decay_every = 5, .decay_factor = 0.1, .epochs = 10, .batch_size = 64}};
  FusionTrainConfig cat;  // FeatCat / LogitCat heads
};

// Reference scenario: the generator defaults with wider class clusters.
inline ScenarioSpec reference_scenario() {
  ScenarioSpec s;
  s.stddev = 0.3;
  return s;
}

struct ExperimentConfig {
  ScenarioSpec scenario = reference_scenario();
  std::optional<FeatureSource> features;
  Architecture arch;
  Schedules schedules;
  std::size_t memory_per_class = 10;
  std::vector<std::string> methods = kMethods;
  std::vector<double> alphas{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<double> betas{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  Pooler pooler = Pooler::max;
  bool warm_start = false;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "cilfuse-out";
  bool save_checkpoints = true;

  void validate() const;
};

// Unknown keys and bad values raise ConfigError naming the field path.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

SgdConfig sgd_from_json(const nlohmann::json& j, const std::string& path, SgdConfig base);
nlohmann::json sgd_to_json(const SgdConfig& c);

// Disjoint scenario over ingested rows: the first n_base_classes labels form
// step 0, then novel_steps in label order. Each class's rows are shuffled and
// cut into val, test, then train.
Scenario scenario_from_features(const LabeledSet& data, const FeatureSource& src, std::uint64_t seed);

// The scenario a config yields for one run seed (seed replaces scenario.seed).
Scenario make_scenario(const ExperimentConfig& c, std::uint64_t seed);

struct StepRecord {
  std::size_t step = 0;
  std::vector<EvalReport> reports;  // test reports, one per method/operating point
  std::optional<double> learned_routing_accuracy;
  std::optional<double> oracle_routing_accuracy;
  std::optional<GridResult> grid;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;  // step 0 first
  std::optional<std::string> error;
  ModelBundle model;  // after the last completed step
  std::optional<FusionHead> fusion;  // best-balanced head of the last step
};

struct RunOptions {
  std::size_t threads = 1;
  // Called after each completed step; used for checkpointing.
  std::function<void(const SeedRun&, std::size_t step, const ModelBundle&, const FusionHead*)> on_step;
};

// pretrain → per-step Stage-I → every configured method → eval, for one seed.
// Failures are captured in SeedRun::error with the steps finished so far.
SeedRun run_seed(const ExperimentConfig& c, std::uint64_t seed, const RunOptions& opts = {});

std::vector<SeedRun> run_experiment(const ExperimentConfig& c, const RunOptions& opts = {});

// Deterministic report document for a set of runs.
nlohmann::json build_report(const ExperimentConfig& c, const std::vector<SeedRun>& runs);

// Final-step method rows per seed plus a mean row (with *_std) per
// method/operating point. Also embedded in report.json as "summary".
nlohmann::json summary_rows(const std::vector<SeedRun>& runs);

struct RunArtifacts {
  std::filesystem::path report;
  std::filesystem::path csv;
  std::vector<std::filesystem::path> plots;
  std::vector<std::filesystem::path> checkpoints;
  std::optional<std::filesystem::path> error_manifest;
};

// Writes checkpoints, report.json, metrics.csv, SVG plots and, on failure,
// errors.json into c.output_dir.
RunArtifacts run_to_directory(const ExperimentConfig& c, std::size_t threads);

// Re-renders metrics.csv and plots from report.json in `dir`.
RunArtifacts render_report(const std::filesystem::path& dir);

std::string summary_csv(const nlohmann::json& summary);

}  // namespace cilfuse
