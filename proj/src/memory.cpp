#include "cilfuse/memory.hpp"

#include <algorithm>
#include <numeric>

#include "cilfuse/errors.hpp"
#include "cilfuse/rng.hpp"

namespace cilfuse {

std::size_t ExemplarMemory::size() const {
  std::size_t n = 0;
  for (const auto& [c, s] : per_class) n += s.size();
  return n;
}

std::vector<ClassId> ExemplarMemory::labels() const {
  std::vector<ClassId> out;
  for (const auto& [c, s] : per_class) out.push_back(c);
  return out;
}

LabeledSet ExemplarMemory::to_set() const {
  LabeledSet out;
  for (const auto& [c, s] : per_class) out.append(s);
  return out;
}

namespace {

// Partial Fisher-Yates over the class's row indices; keeps the first m.
LabeledSet pick_class(const LabeledSet& data, std::span<const std::size_t> rows, std::size_t m, Rng& rng) {
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t keep = std::min(m, idx.size());
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + rng.index(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(keep);
  return data.subset(idx);
}

std::map<ClassId, std::vector<std::size_t>> rows_by_class(const LabeledSet& data) {
  std::map<ClassId, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < data.size(); ++i) out[data.y[i]].push_back(i);
  return out;
}

}  // namespace

ExemplarMemory select_exemplars(const LabeledSet& data, std::size_t m, std::uint64_t seed) {
  if (m < 1) throw SpecError("select_exemplars: m must be >= 1");
  ExemplarMemory mem;
  mem.capacity = m;
  extend_memory(mem, data, seed);
  return mem;
}

void extend_memory(ExemplarMemory& memory, const LabeledSet& data, std::uint64_t seed) {
  if (memory.capacity < 1) throw SpecError("extend_memory: capacity must be >= 1");
  Rng rng(derive_seed(seed, 0xe5));
  for (const auto& [c, rows] : rows_by_class(data)) {
    if (memory.per_class.count(c)) continue;
    memory.per_class.emplace(c, pick_class(data, rows, memory.capacity, rng));
  }
}

BalancedSampler::BalancedSampler(const ExemplarMemory& memory, const LabeledSet& novel, std::size_t per_class,
                                 std::uint64_t seed)
    : per_class_(per_class), seed_(seed) {
  if (per_class < 1) throw SpecError("BalancedSampler: per_class must be >= 1");
  candidates_ = memory.to_set();
  if (candidates_.x.cols == 0) candidates_.x.cols = novel.dim();
  candidates_.append(novel);
  by_class_ = rows_by_class(candidates_);
  if (by_class_.empty()) throw SpecError("BalancedSampler: no samples");
}

std::vector<ClassId> BalancedSampler::labels() const {
  std::vector<ClassId> out;
  for (const auto& [c, rows] : by_class_) out.push_back(c);
  return out;
}

std::vector<std::size_t> BalancedSampler::epoch_pool(std::size_t epoch) const {
  Rng rng(derive_seed(seed_, 0xba, epoch));
  std::vector<std::size_t> pool;
  pool.reserve(per_class_ * by_class_.size());
  for (const auto& [c, rows] : by_class_) {
    std::vector<std::size_t> idx = rows;
    if (idx.size() >= per_class_) {
      for (std::size_t i = 0; i < per_class_; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
      pool.insert(pool.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_class_));
    } else {
      pool.insert(pool.end(), idx.begin(), idx.end());
      for (std::size_t i = idx.size(); i < per_class_; ++i) pool.push_back(idx[rng.index(idx.size())]);
    }
  }
  rng.shuffle(pool);
  return pool;
}

std::vector<std::vector<std::size_t>> BalancedSampler::epoch_batches(std::size_t epoch, std::size_t batch_size) const {
  if (batch_size < 1) throw SpecError("epoch_batches: batch_size must be >= 1");
  const auto pool = epoch_pool(epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < pool.size(); s += batch_size) {
    out.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(s),
                     pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), s + batch_size)));
  }
  return out;
}

}  // namespace cilfuse
