#include <doctest.h>

#include <cmath>

#include "cilfuse/errors.hpp"
#include "cilfuse/routing.hpp"
#include "test_util.hpp"

using namespace cilfuse;
using cilfuse::testing::random_mat;
using cilfuse::testing::toy_model;

namespace {

BranchOutputs logits_only(std::vector<std::vector<double>> per_branch) {
  BranchOutputs o;
  for (auto& z : per_branch) {
    o.logits.push_back(Mat(1, z.size(), z));
    o.features.push_back(Mat(1, 1, {1.0}));
  }
  return o;
}

double mean_ce(const Mat& z, std::span<const std::uint32_t> s) {
  double sum = 0.0;
  for (std::size_t r = 0; r < z.rows; ++r) sum += cross_entropy(z.row(r), s[r]);
  return sum / static_cast<double>(z.rows);
}

}  // namespace

TEST_CASE("confidence routing") {
  CHECK(confidence_route(logits_only({{std::log(9.0), 0}, {std::log(4.0), 0}}), 0) == 0);
  CHECK(confidence_route(logits_only({{std::log(7.0), std::log(3.0)}, {std::log(7.0), std::log(3.0)}}), 0) == 0);
  CHECK(confidence_route(logits_only({{0, 0, 0, 0, 0}, {0, 0}, {std::log(4.0), std::log(3.0), std::log(3.0)}}), 0) ==
        1);
  CHECK(confidence_route(logits_only({{0, 0}, {5, 0}}), 0) == 1);
}

TEST_CASE("balanced routing loss") {
  Rng rng(1);
  SUBCASE("equal split sizes give the plain mean") {
    const Mat z = random_mat(6, 2, rng, -2, 2);
    const std::vector<std::uint32_t> s{0, 1, 0, 1, 1, 0};
    CHECK(routing_balanced_loss(z, s) == doctest::Approx(mean_ce(z, s)).epsilon(1e-14));
  }
  SUBCASE("duplicating one split leaves the loss unchanged") {
    const Mat z = random_mat(5, 3, rng, -2, 2);
    const std::vector<std::uint32_t> s{0, 1, 2, 1, 0};
    Mat dup(8, 3);
    std::vector<std::uint32_t> ds;
    std::size_t r2 = 0;
    for (std::size_t r = 0; r < 5; ++r) {
      for (int k = 0; k < (s[r] == 1 ? 2 : 1); ++k, ++r2) {
        for (std::size_t c = 0; c < 3; ++c) dup(r2, c) = z(r, c);
        ds.push_back(s[r]);
      }
    }
    REQUIRE(r2 == 7);
    dup.rows = 7;
    dup.data.resize(21);
    CHECK(std::abs(routing_balanced_loss(z, s) - routing_balanced_loss(dup, ds)) < 1e-12);
  }
  SUBCASE("gradient") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng r(seed);
      Param z(random_mat(7, 3, r, -2, 2));
      std::vector<std::uint32_t> s(7);
      for (auto& v : s) v = static_cast<std::uint32_t>(r.index(3));
      Mat g(7, 3);
      routing_balanced_loss(z.value, s, &g);
      const Mat n = finite_diff_grad([&](const Param& p) { return routing_balanced_loss(p.value, s); }, z, 1e-5);
      CHECK(relative_error(g, n) < 1e-4);
    }
  }
  CHECK_THROWS_AS(routing_balanced_loss(Mat(2, 2), std::vector<std::uint32_t>{0}), DimensionError);
  CHECK_THROWS_AS(routing_balanced_loss(Mat(1, 2), std::vector<std::uint32_t>{2}), IndexError);
}

TEST_CASE("learned router on separable splits") {
  const auto m = toy_model(4, {{0, 1}, {2, 3}});
  LabeledSet novel(4);
  LabeledSet base(4);
  Rng rng(3);
  for (int i = 0; i < 60; ++i) {
    const ClassId c = static_cast<ClassId>(i % 4);
    std::vector<double> x(4, 0.0);
    x[c] = 1.0 + 0.1 * rng.uniform();
    for (auto& v : x) v += 0.05 * rng.uniform();
    (c < 2 ? base : novel).push_back(x, c, c < 2 ? 0 : 1);
  }
  const auto memory = select_exemplars(base, 5, 1);
  const auto before = hash_params(m.params());
  const SgdConfig cfg{.base_lr = 5.0, .decay_every = 100, .decay_factor = 0.1, .epochs = 30, .batch_size = 8};
  const Router r = train_learned_router(m, memory, novel, cfg, 2);
  CHECK(hash_params(m.params()) == before);
  CHECK(r.mode == RouterMode::learned);
  CHECK(r.weight.value.rows == 8);
  CHECK(r.weight.value.cols == 2);
  LabeledSet all = base;
  all.append(novel);
  CHECK(routing_accuracy(r, compute_outputs(m, all.x), all.origin) > 0.95);

  const Router o = train_learned_router(m, memory, novel, cfg, 2, &all);
  CHECK(o.mode == RouterMode::oracle);
  CHECK(routing_accuracy(o, compute_outputs(m, all.x), all.origin) > 0.95);
}

TEST_CASE("routed prediction stays inside the chosen branch") {
  const auto m = toy_model(4, {{0, 1}, {2, 3}});
  Router forced;
  forced.mode = RouterMode::learned;
  forced.n_branches = 2;
  Mat w(8, 2);
  for (std::size_t r = 0; r < 8; ++r) w(r, 0) = 100.0;
  forced.weight = Param(w);
  Rng rng(4);
  const Mat x = random_mat(50, 4, rng, 0.0, 1.0);
  for (ClassId y : routed_predict(m, forced, compute_outputs(m, x))) CHECK(y < 2);

  Router conf;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const ClassId y = routed_predict(m, conf, x.row(r));
    const auto d = confidence_route(m, x.row(r));
    const auto& labels = m.branches[d].labels;
    CHECK(std::find(labels.begin(), labels.end(), y) != labels.end());
  }
}

TEST_CASE("single branch routing is the identity") {
  const auto m = toy_model(3, {{0, 1, 2}});
  Rng rng(5);
  const auto out = compute_outputs(m, random_mat(10, 3, rng, 0, 1));
  Router r;
  for (auto d : route(r, out)) CHECK(d == 0);
  CHECK_THROWS_AS(train_learned_router(m, ExemplarMemory{}, LabeledSet(3), SgdConfig{}, 0), SpecError);
}

TEST_CASE("a perfect router reaches the best achievable routed accuracy") {
  const auto m = toy_model(4, {{0, 1}, {2, 3}});
  LabeledSet s(4);
  Rng rng(6);
  for (int i = 0; i < 40; ++i) {
    const ClassId c = static_cast<ClassId>(i % 4);
    std::vector<double> x(4, 0.0);
    // Every fifth sample points at its branch sibling, so its own branch errs.
    const std::size_t hot = i % 5 == 0 ? (c ^ 1u) : c;
    x[hot] = 1.0 + rng.uniform();
    s.push_back(x, c, c < 2 ? 0 : 1);
  }
  Router perfect;
  perfect.mode = RouterMode::oracle;
  perfect.n_branches = 2;
  Mat w(8, 2);
  w(0, 0) = w(1, 0) = 1.0;
  w(6, 1) = w(7, 1) = 1.0;
  perfect.weight = Param(w);
  const auto out = compute_outputs(m, s.x);
  CHECK(routing_accuracy(perfect, out, s.origin) == 1.0);

  // Best over every per-sample branch choice.
  std::size_t best = 0;
  for (std::size_t r = 0; r < s.size(); ++r) {
    bool any = false;
    for (std::size_t d = 0; d < 2; ++d) any = any || m.branches[d].labels[argmax(out.logits[d].row(r))] == s.y[r];
    best += any;
  }
  const auto pred = routed_predict(m, perfect, out);
  std::size_t got = 0;
  for (std::size_t r = 0; r < s.size(); ++r) got += pred[r] == s.y[r];
  CHECK(got == best);
  CHECK(best == 32);
}
