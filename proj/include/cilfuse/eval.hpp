#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cilfuse/fusion.hpp"
#include "cilfuse/synth_data.hpp"

namespace cilfuse {

/// Accuracies for one configuration at one step. Splits with no test samples
/// stay empty rather than reading as 0.
struct EvalReport {
  std::string method;
  std::string operating_point;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::string pooler;
  std::uint64_t seed = 0;
  std::size_t step = 0;

  std::optional<double> acc_all;
  std::optional<double> acc_base;
  std::optional<double> acc_novel;
  std::optional<double> acc_ovlp;
  std::optional<double> acc_avg;
  std::vector<std::optional<double>> novel_by_step;  // index s-1 holds step s
};

using Predictor = std::function<std::vector<ClassId>(const Mat&)>;

// Fraction of correct rows; empty input gives nullopt.
std::optional<double> accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth);
std::optional<double> accuracy(const Predictor& predict, const LabeledSet& s);

// Mean of the split accuracies that are present.
std::optional<double> average_accuracy(std::optional<double> base, std::optional<double> novel,
                                       std::optional<double> ovlp);

enum class SplitKind { base, novel, overlap };

// Split of class c after step t: overlap if it is a base class re-introduced
// by some novel step ≤ t, base if only in 𝓨_b, novel otherwise.
SplitKind split_of(const Scenario& s, std::size_t t, ClassId c);

EvalReport metrics_report(const Scenario& s, std::size_t t, const LabeledSet& data, std::span<const ClassId> predicted);
EvalReport metrics_report(const Predictor& predict, const Scenario& s, std::size_t t, const LabeledSet& data);

struct IncrementalAccuracy {
  double inc_acc = 0.0;  // mean Acc_all over steps 0..T
  double avg_acc = 0.0;  // mean Acc_avg over steps 0..T
};

IncrementalAccuracy incremental_accuracy(std::span<const EvalReport> reports);

// ------------------------------------------------------------------ grid

enum class OperatingPoint { best_all, best_avg, best_balanced };
inline constexpr std::array<OperatingPoint, 3> kOperatingPoints{OperatingPoint::best_all, OperatingPoint::best_avg,
                                                                 OperatingPoint::best_balanced};

std::string to_string(OperatingPoint op);

struct GridCell {
  std::size_t alpha_index = 0;
  std::size_t beta_index = 0;
  double alpha = 0.0;
  double beta = 0.0;
  EvalReport val;
};

struct ChosenCell {
  OperatingPoint op = OperatingPoint::best_all;
  std::size_t cell = 0;  // index into GridResult::cells
  EvalReport test;
};

struct GridResult {
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<GridCell> cells;  // alpha-major
  std::vector<ChosenCell> chosen;

  const GridCell& cell(std::size_t ai, std::size_t bi) const { return cells.at(ai * betas.size() + bi); }
  const ChosenCell& at(OperatingPoint op) const;
};

double objective(OperatingPoint op, const EvalReport& r);

// Index of the winning cell for op. Ties go to the lexicographically smallest
// (alpha, beta).
std::size_t select_cell(std::span<const GridCell> cells, OperatingPoint op);

struct GridSearchInput {
  const Scenario* scenario = nullptr;
  std::size_t step = 1;
  const ModelBundle* model = nullptr;
  const ExemplarMemory* memory = nullptr;
  const LabeledSet* novel = nullptr;
  Pooler pooler = Pooler::max;
  FusionTrainConfig train;
  const FusionHead* warm_start = nullptr;
};

// One fusion head per (alpha, beta) cell with RNG stream
// derive_seed(seed, alpha_index, beta_index). Cells may run on `threads`
// workers; results do not depend on the worker count.
GridResult grid_search(const GridSearchInput& in, std::span<const double> alphas, std::span<const double> betas,
                       std::uint64_t seed, std::size_t threads = 1, std::vector<FusionHead>* heads = nullptr);

// ------------------------------------------------------------- prelim sweep

struct PrelimRow {
  std::size_t n_base = 0;
  std::vector<double> novel_acc;  // index k = number of unfrozen top blocks
};

struct PrelimConfig {
  ScenarioSpec scenario;  // kind forced to disjoint; n_base_classes overridden per row
  Architecture arch;
  SgdConfig pretrain;
  SgdConfig finetune;
};

std::vector<PrelimRow> prelim_sweep(std::span<const std::size_t> base_counts, const PrelimConfig& cfg,
                                    std::uint64_t seed);

// ------------------------------------------------------------------ misc

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// CILFUSE_THREADS if set, otherwise hardware concurrency.
std::size_t default_threads();

// Rounded to 4 decimals; the single formatting path for JSON and CSV numbers.
double round4(double v);

nlohmann::json report_to_json(const EvalReport& r);
nlohmann::json grid_to_json(const GridResult& g);

}  // namespace cilfuse
