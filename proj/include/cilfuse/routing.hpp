#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cilfuse/backbone.hpp"
#include "cilfuse/memory.hpp"

namespace cilfuse {

/// Split-balanced routing cross-entropy: the mean over the splits present in
/// `splits` of each split's mean per-sample loss. With two splits this is the
/// 1/(2|𝓔|), 1/(2|𝓓_n|) re-weighting. If dlogits is non-null it receives
/// d(loss)/d(logits), scaled by `grad_scale`.
double routing_balanced_loss(const Mat& logits, std::span<const std::uint32_t> splits, Mat* dlogits = nullptr,
                             double grad_scale = 1.0);

enum class RouterMode { confidence, learned, oracle };

/// Branch selector. Learned modes hold W_r of shape ((t+1)·k) × (t+1) applied
/// to the concatenation h_b ⊕ h_n1 ⊕ ... .
struct Router {
  RouterMode mode = RouterMode::confidence;
  std::size_t n_branches = 0;
  Param weight;
};

// Conf_d = max softmax(z_d); first branch wins ties.
std::size_t confidence_route(const BranchOutputs& outputs, std::size_t row);
std::size_t confidence_route(const ModelBundle& m, std::span<const double> x);

Mat routing_inputs(const BranchOutputs& outputs);  // rows of concatenated h_d

// Split label of each row is its origin step. oracle_data, when given,
// replaces 𝓔 ∪ 𝓓_nt as the training set and the router is tagged oracle.
Router train_learned_router(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                            const SgdConfig& cfg, std::uint64_t seed, const LabeledSet* oracle_data = nullptr,
                            TrainLog* log = nullptr);

std::vector<std::size_t> route(const Router& router, const BranchOutputs& outputs);

std::vector<ClassId> routed_predict(const ModelBundle& m, const Router& router, const BranchOutputs& outputs);
ClassId routed_predict(const ModelBundle& m, const Router& router, std::span<const double> x);

// Mean over origin splits of per-split routing accuracy.
double routing_accuracy(const Router& router, const BranchOutputs& outputs, std::span<const std::uint32_t> splits);

}  // namespace cilfuse
