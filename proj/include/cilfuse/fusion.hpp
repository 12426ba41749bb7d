#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cilfuse/backbone.hpp"
#include "cilfuse/memory.hpp"

namespace cilfuse {

enum class Pooler { max, avg };

std::string to_string(Pooler p);
Pooler pooler_from_string(const std::string& s);

struct LabelSlot {
  std::size_t branch = 0;
  std::size_t local = 0;
};

/// Maps each global class of 𝓨_a to its entries in z_a = z̃_b ⊕ z̃_n1 ⊕ ...
/// Overlapping classes own one slot per branch that scores them.
struct GlobalLabelMap {
  std::vector<ClassId> classes;                // sorted 𝓨_a
  std::vector<std::vector<LabelSlot>> slots;   // per class, ordered by branch
  std::vector<std::size_t> offsets;            // start of branch d inside z_a
  std::vector<std::size_t> branch_sizes;       // |𝓨_d|

  static GlobalLabelMap build(std::span<const std::vector<ClassId>> branch_labels);

  std::size_t width() const;  // Σ_d |𝓨_d|
  std::size_t class_index(ClassId c) const;  // throws LookupError
  void validate() const;
};

/// Stage-II trainable state. Backbone and expert heads stay in ModelBundle
/// and are only read.
struct FusionHead {
  std::size_t n_branches = 0;
  std::map<std::pair<std::size_t, std::size_t>, Param> cross;  // (d, d') -> W_dd', k × |𝓨_d|
  Param aux;  // W_r,aux, (t+1) × (t+1)
  Pooler pooler = Pooler::max;
  double alpha = 0.0;
  double beta = 1.0;
  GlobalLabelMap label_map;

  Param& cross_weight(std::size_t d, std::size_t dp) { return cross.at({d, dp}); }
  const Param& cross_weight(std::size_t d, std::size_t dp) const { return cross.at({d, dp}); }
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
};

struct FusionOutput {
  std::vector<std::vector<double>> z;        // frozen expert logits z_d
  std::vector<std::vector<double>> delta;    // Δz_d
  std::vector<std::vector<double>> z_tilde;  // z_d + Δz_d
  std::vector<double> z_a;                   // concatenation of z_tilde
  std::vector<double> pooled;                // z̃_a, one entry per global class
};

/// Initial cross-weight half-width; small so training starts next to the
/// zero-transfer point.
inline constexpr double kCrossInitScale = 1e-3;

FusionHead init_fusion(const ModelBundle& m, Pooler pooler, double alpha, double beta, std::uint64_t seed,
                       const FusionHead* warm_start = nullptr);

// scale_base: the row is a base-origin training sample, so inputs to W_bd'
// are multiplied by beta. Never set at inference.
FusionOutput fused_forward(const FusionHead& f, std::span<const std::span<const double>> features,
                           std::span<const std::span<const double>> logits, bool scale_base);
FusionOutput fused_forward(const FusionHead& f, const BranchOutputs& outputs, std::size_t row, bool scale_base);
// train_origin set means "training sample from this step"; origin 0 triggers β scaling.
FusionOutput fused_forward(const ModelBundle& m, const FusionHead& f, std::span<const double> x,
                           std::optional<std::uint32_t> train_origin = std::nullopt);

std::vector<double> pool_overlap(std::span<const double> z_a, const GlobalLabelMap& map, Pooler mode);

struct FusionLoss {
  double total = 0.0;
  double cls = 0.0;
  double rt = 0.0;
};

/// L_total = (1-α)·L_cls + α·L_rt-bal over the given rows of `outputs`.
/// Labels and splits are indexed by row. With accumulate_grads, d(L_total)
/// is added into the grads of f's cross and aux params.
FusionLoss loss_total(FusionHead& f, const BranchOutputs& outputs, std::span<const std::size_t> rows,
                      std::span<const ClassId> labels, std::span<const std::uint32_t> splits, bool accumulate_grads);

struct FusionTrainConfig {
  SgdConfig sgd{.base_lr = 1.0, .decay_every = 5, .decay_factor = 0.1, .epochs = 10, .batch_size = 64};
  std::size_t per_class = 10;
};

FusionHead train_fusion(const ModelBundle& m, const FusionHead& f, const ExemplarMemory& memory,
                        const LabeledSet& novel, const FusionTrainConfig& cfg, std::uint64_t seed,
                        TrainLog* log = nullptr);

// Same, on precomputed outputs for the sampler's candidates.
FusionHead train_fusion(const FusionHead& f, const BalancedSampler& sampler, const BranchOutputs& candidate_outputs,
                        const FusionTrainConfig& cfg, TrainLog* log = nullptr);

std::vector<ClassId> fused_predict(const FusionHead& f, const BranchOutputs& outputs);
ClassId fused_predict(const ModelBundle& m, const FusionHead& f, std::span<const double> x);

// ------------------------------------------------------------ cat baselines

/// FeatCat+RT: linear head over h_b ⊕ h_n1 ⊕ ... → 𝓨_a.
struct FeatCatHead {
  Param weight;  // (branches·k) × |𝓨_a|
  std::vector<ClassId> labels;
};

/// LogitCat: z_a = z_b ⊕ z_n1 ⊕ ... from (possibly retrained) cosine heads.
struct LogitCatHead {
  std::vector<Param> heads;
  GlobalLabelMap label_map;
  Pooler pooler = Pooler::max;
};

FeatCatHead featcat_retrain(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                            const FusionTrainConfig& cfg, std::uint64_t seed);
LogitCatHead logitcat_frozen(const ModelBundle& m, Pooler pooler = Pooler::max);
LogitCatHead logitcat_retrain(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                              const FusionTrainConfig& cfg, std::uint64_t seed);
LogitCatHead logitcat_finetune(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                               const FusionTrainConfig& cfg, std::uint64_t seed);

std::vector<ClassId> featcat_predict(const FeatCatHead& head, const BranchOutputs& outputs);
std::vector<ClassId> logitcat_predict(const Architecture& arch, const LogitCatHead& head, const BranchOutputs& outputs);

}  // namespace cilfuse
