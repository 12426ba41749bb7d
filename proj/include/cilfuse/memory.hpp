#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "cilfuse/synth_data.hpp"

namespace cilfuse {

/// Fixed-capacity per-class exemplar store 𝓔. Rows keep their raw inputs and
/// origin step so they stay valid as branches are added.
struct ExemplarMemory {
  std::size_t capacity = 10;
  std::map<ClassId, LabeledSet> per_class;

  std::size_t size() const;
  std::vector<ClassId> labels() const;
  LabeledSet to_set() const;  // classes in ascending order
};

ExemplarMemory select_exemplars(const LabeledSet& data, std::size_t m, std::uint64_t seed);

// Adds exemplars for classes of `data` not yet in memory. Classes already
// present keep their existing exemplars.
void extend_memory(ExemplarMemory& memory, const LabeledSet& data, std::uint64_t seed);

/// Class-balanced sampling over 𝓔 ∪ 𝓓_nt. Each epoch pool holds exactly
/// per_class rows of every class; classes with fewer candidates contribute all
/// of them plus draws with replacement.
class BalancedSampler {
 public:
  BalancedSampler(const ExemplarMemory& memory, const LabeledSet& novel, std::size_t per_class, std::uint64_t seed);

  // Candidate rows: memory classes first (ascending label), then novel rows in
  // input order. Pools index into this set.
  const LabeledSet& candidates() const { return candidates_; }
  std::size_t per_class() const { return per_class_; }
  std::vector<ClassId> labels() const;

  // Shuffled pool for one epoch; deterministic in (seed, epoch).
  std::vector<std::size_t> epoch_pool(std::size_t epoch) const;

  // epoch_pool cut into consecutive batches of batch_size (last may be short).
  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t epoch, std::size_t batch_size) const;

 private:
  LabeledSet candidates_;
  std::map<ClassId, std::vector<std::size_t>> by_class_;
  std::size_t per_class_;
  std::uint64_t seed_;
};

}  // namespace cilfuse
