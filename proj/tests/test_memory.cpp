#include <doctest.h>

#include <map>
#include <random>

#include "cilfuse/errors.hpp"
#include "cilfuse/memory.hpp"
#include "test_util.hpp"

using namespace cilfuse;

namespace {

LabeledSet counted_set(const std::vector<std::size_t>& per_class, std::uint32_t origin = 0) {
  LabeledSet s(2);
  double v = 0.0;
  for (std::size_t c = 0; c < per_class.size(); ++c)
    for (std::size_t i = 0; i < per_class[c]; ++i, v += 1.0) s.push_back(std::vector<double>{v, -v}, ClassId(c), origin);
  return s;
}

// Reference draw: seeded engine, rejection-sampled bounded integer, then a
// partial Fisher-Yates over each class's rows in label order.
std::map<ClassId, std::vector<double>> oracle_exemplars(const LabeledSet& data, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 eng(derive_seed(seed, 0xe5));
  auto below = [&](std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do r = eng();
    while (r >= limit);
    return r % n;
  };
  std::map<ClassId, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < data.size(); ++i) rows[data.y[i]].push_back(i);
  std::map<ClassId, std::vector<double>> out;
  for (auto& [c, idx] : rows) {
    const std::size_t keep = std::min(m, idx.size());
    for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + below(idx.size() - i)]);
    for (std::size_t i = 0; i < keep; ++i) out[c].push_back(data.x(idx[i], 0));
  }
  return out;
}

}  // namespace

TEST_CASE("select_exemplars counts") {
  const auto data = counted_set({10, 3, 25});
  const auto mem = select_exemplars(data, 10, 1);
  CHECK(mem.per_class.at(0).size() == 10);
  CHECK(mem.per_class.at(1).size() == 3);
  CHECK(mem.per_class.at(2).size() == 10);
  CHECK(mem.size() == 23);

  const auto one = select_exemplars(data, 1, 1);
  for (const auto& [c, s] : one.per_class) CHECK(s.size() == 1);
  CHECK_THROWS_AS(select_exemplars(data, 0, 1), SpecError);
}

TEST_CASE("select_exemplars matches a reference shuffle") {
  const auto data = counted_set({40, 17, 10, 5, 33});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto mem = select_exemplars(data, 10, seed);
    const auto expected = oracle_exemplars(data, 10, seed);
    for (const auto& [c, vals] : expected) {
      const auto& got = mem.per_class.at(c);
      REQUIRE(got.size() == vals.size());
      for (std::size_t i = 0; i < vals.size(); ++i) CHECK(got.x(i, 0) == vals[i]);
    }
  }
}

TEST_CASE("extend_memory keeps existing classes") {
  const auto base = counted_set({20, 20});
  auto mem = select_exemplars(base, 5, 3);
  const auto before = mem.per_class.at(0).x;
  LabeledSet later = counted_set({20, 20, 20}, 1);
  extend_memory(mem, later, 4);
  CHECK(mem.per_class.at(0).x == before);
  CHECK(mem.per_class.size() == 3);
  CHECK(mem.per_class.at(2).size() == 5);
  for (auto o : mem.per_class.at(2).origin) CHECK(o == 1);
}

TEST_CASE("balanced pools have a uniform class histogram") {
  const auto data = counted_set({30, 30, 30});
  const auto mem = select_exemplars(data, 4, 0);
  const LabeledSet novel = [] {
    LabeledSet s(2);
    for (int i = 0; i < 50; ++i) s.push_back(std::vector<double>{100.0 + i, 0}, ClassId(3 + i % 2), 1);
    return s;
  }();
  for (std::size_t per_class : {1, 4, 10}) {
    const BalancedSampler sampler(mem, novel, per_class, 9);
    for (std::size_t epoch = 0; epoch < 5; ++epoch) {
      const auto pool = sampler.epoch_pool(epoch);
      CHECK(pool.size() == 5 * per_class);
      std::map<ClassId, std::size_t> hist;
      for (auto i : pool) ++hist[sampler.candidates().y[i]];
      CHECK(hist.size() == 5);
      for (const auto& [c, n] : hist) CHECK(n == per_class);
    }
  }
}

TEST_CASE("balanced pool with memory-sized classes is a permutation of memory") {
  const auto mem = select_exemplars(counted_set({12, 12}), 6, 2);
  const BalancedSampler sampler(mem, LabeledSet(2), 6, 1);
  auto pool = sampler.epoch_pool(0);
  std::sort(pool.begin(), pool.end());
  std::vector<std::size_t> all(12);
  std::iota(all.begin(), all.end(), 0);
  CHECK(pool == all);
}

TEST_CASE("balanced pool with one class") {
  const auto mem = select_exemplars(counted_set({3}), 3, 2);
  const BalancedSampler sampler(mem, LabeledSet(2), 7, 1);
  const auto pool = sampler.epoch_pool(0);
  CHECK(pool.size() == 7);
  for (auto i : pool) CHECK(sampler.candidates().y[i] == 0);
}

TEST_CASE("balanced batches are reproducible") {
  const auto mem = select_exemplars(counted_set({20, 20, 20}), 5, 2);
  const BalancedSampler a(mem, LabeledSet(2), 5, 11), b(mem, LabeledSet(2), 5, 11);
  CHECK(a.epoch_batches(3, 4) == b.epoch_batches(3, 4));
  CHECK(a.epoch_pool(0) != a.epoch_pool(1));
  const auto batches = a.epoch_batches(0, 4);
  CHECK(batches.size() == 4);
  CHECK(batches.back().size() == 3);
  CHECK_THROWS_AS(BalancedSampler(mem, LabeledSet(2), 0, 1), SpecError);
}
