#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cilfuse/linalg.hpp"
#include "cilfuse/rng.hpp"
#include "cilfuse/synth_data.hpp"

namespace cilfuse {

/// Affine map followed by a rectifier. weight is in_dim × out_dim, bias 1 × out_dim.
struct Block {
  Param weight;
  Param bias;

  std::size_t in_dim() const { return weight.value.rows; }
  std::size_t out_dim() const { return weight.value.cols; }
};

/// Expert branch d: blocks Φ_d, head W_d (k × |𝓨_d|) and its label set.
struct Branch {
  std::string id;
  std::vector<Block> blocks;
  Param head;
  std::vector<ClassId> labels;  // sorted; column j of head scores labels[j]

  std::size_t local_index(ClassId c) const;  // throws LookupError
};

struct Architecture {
  std::size_t input_dim = 8;
  std::vector<std::size_t> trunk_widths{64, 64};
  std::vector<std::size_t> branch_widths{32};
  bool normalize = true;
  double cosine_scale = 16.0;

  std::size_t feature_dim() const { return branch_widths.empty() ? 0 : branch_widths.back(); }
  void validate() const;
};

/// Shared trunk Φ_s plus one branch per incremental step, in step order
/// [b, n1, ..., nT].
struct ModelBundle {
  Architecture arch;
  std::vector<Block> trunk;
  std::vector<Branch> branches;

  std::size_t feature_dim() const { return arch.feature_dim(); }
  std::size_t branch_index(std::string_view id) const;  // throws LookupError
  const Branch& branch(std::string_view id) const { return branches[branch_index(id)]; }
  std::vector<const Param*> params() const;
  std::vector<Param*> params();
  std::vector<ClassId> all_labels() const;
};

struct TrainLog {
  std::vector<double> epoch_loss;
};

ModelBundle init_bundle(const Architecture& arch, std::span<const ClassId> base_labels, std::uint64_t seed);

ModelBundle pretrain_base(const LabeledSet& data, const Architecture& arch, const SgdConfig& cfg, std::uint64_t seed,
                          TrainLog* log = nullptr);

Mat trunk_forward(const ModelBundle& m, const Mat& x);
Mat branch_features(const ModelBundle& m, const Mat& trunk_out, std::size_t branch);
Mat extract_features(const ModelBundle& m, const Mat& x, std::string_view branch_id);

// Head logits for already-extracted features of one branch. Cosine head when
// arch.normalize: s·⟨h/‖h‖, w/‖w‖⟩.
Mat head_logits(const Architecture& arch, const Param& head, const Mat& features);

// Backward of head_logits. Either output pointer may be null; dhead is
// accumulated into, dfeatures is overwritten.
void head_backward(const Architecture& arch, const Param& head, const Mat& features, const Mat& dlogits, Mat* dhead,
                   Mat* dfeatures);

// Random head for a cosine classifier: a shared direction plus a small
// per-class perturbation, so initial logits are nearly uniform.
Param init_head(std::size_t feature_dim, std::size_t n_classes, Rng& rng);

/// Frozen per-branch features h_d and logits z_d for a batch of inputs.
struct BranchOutputs {
  std::vector<Mat> features;
  std::vector<Mat> logits;

  std::size_t rows() const { return features.empty() ? 0 : features.front().rows; }
};

BranchOutputs compute_outputs(const ModelBundle& m, const Mat& x);

ModelBundle add_branch_stage1(const ModelBundle& m, const LabeledSet& novel, const SgdConfig& cfg, std::uint64_t seed,
                              TrainLog* log = nullptr);

struct FinetuneResult {
  ModelBundle model;  // single branch "ft" over the novel labels
  double novel_accuracy = 0.0;
};

// Unfreezes the top k_blocks blocks of trunk+branch b (k = 0 keeps the
// representation fixed) and trains a fresh head over the novel labels.
FinetuneResult finetune_k_blocks(const ModelBundle& m, const LabeledSet& novel_train, const LabeledSet& novel_eval,
                                 std::size_t k_blocks, const SgdConfig& cfg, std::uint64_t seed);

// Every parameter trainable, fresh |𝓨_a|-way head, novel data only. Returns a
// single-branch model ("ft").
ModelBundle full_finetune_baseline(const ModelBundle& m, const LabeledSet& novel, std::span<const ClassId> all_labels,
                                   const SgdConfig& cfg, std::uint64_t seed, TrainLog* log = nullptr);

// Predicted global label per row using a single branch's own head.
std::vector<ClassId> branch_predict(const ModelBundle& m, const Mat& x, std::size_t branch);

// FNV-1a over the raw bytes of the given params; used for freeze checks.
std::uint64_t hash_params(std::span<const Param* const> params);

}  // namespace cilfuse
