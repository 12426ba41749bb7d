#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cilfuse/errors.hpp"
#include "cilfuse/synth_data.hpp"
#include "test_util.hpp"

using namespace cilfuse;

namespace {

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::set<ClassId> as_set(const std::vector<ClassId>& v) { return {v.begin(), v.end()}; }

ScenarioSpec small(ScenarioKind kind, std::size_t nb, std::vector<std::size_t> steps, std::size_t n_overlap) {
  ScenarioSpec s = cilfuse::testing::tiny_spec(3);
  s.kind = kind;
  s.n_base_classes = nb;
  s.novel_steps = std::move(steps);
  s.n_overlap = n_overlap;
  return s;
}

LabeledSet points_1d(std::initializer_list<double> xs) {
  LabeledSet s(1);
  for (double x : xs) s.push_back(std::vector<double>{x}, 0, 0);
  return s;
}

}  // namespace

TEST_CASE("gen_class_means spacing") {
  const auto two = gen_class_means(2, 1, 9);
  REQUIRE(two.size() == 2);
  CHECK(distance(two[0].components[0].mean, two[1].components[0].mean) >= min_mean_spacing(2, 1));

  const auto gens = gen_class_means(40, 8, 1);
  const double delta = min_mean_spacing(40, 8);
  for (std::size_t i = 0; i < gens.size(); ++i) {
    CHECK(gens[i].components.size() == 1);
    CHECK(gens[i].components[0].stddev == 0.15);
    for (double v : gens[i].components[0].mean) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    for (std::size_t j = i + 1; j < gens.size(); ++j) {
      CHECK(distance(gens[i].components[0].mean, gens[j].components[0].mean) >= delta);
    }
  }
  CHECK_THROWS_AS(gen_class_means(1, 8, 0), SpecError);
}

TEST_CASE("gen_class_means is deterministic") {
  const auto a = gen_class_means(10, 3, 42);
  const auto b = gen_class_means(10, 3, 42);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].components[0].mean == b[i].components[0].mean);
  const auto c = gen_class_means(10, 3, 43);
  CHECK(a[0].components[0].mean != c[0].components[0].mean);
}

TEST_CASE("min_mean_spacing") {
  CHECK(min_mean_spacing(16, 2) == doctest::Approx(0.25));
  CHECK(min_mean_spacing(40, 8) == doctest::Approx(std::pow(40.0, -1.0 / 8.0)));
}

TEST_CASE("sample_set") {
  auto gens = gen_class_means(3, 2, 5);
  CHECK(sample_set(gens, 1, 0).size() == 3);

  for (auto& g : gens) g.components[0].stddev = 0.0;
  const auto exact = sample_set(gens, 4, 0);
  for (std::size_t r = 0; r < exact.size(); ++r) {
    const auto& mean = gens[exact.y[r]].components[0].mean;
    CHECK(std::vector<double>(exact.x.row(r).begin(), exact.x.row(r).end()) == mean);
  }

  const auto spread = gen_class_means(3, 2, 5);
  const auto s = sample_set(spread, 500, 17);
  for (const auto& g : spread) {
    const auto rows = s.of_class(g.label);
    REQUIRE(rows.size() == 500);
    for (std::size_t d = 0; d < 2; ++d) {
      double m = 0.0;
      for (std::size_t r = 0; r < rows.size(); ++r) m += rows.x(r, d);
      m /= 500.0;
      CHECK(std::abs(m - g.components[0].mean[d]) < 3.0 * 0.15 / std::sqrt(500.0));
    }
  }
  CHECK(sample_set(spread, 5, 1).x == sample_set(spread, 5, 1).x);
  CHECK_THROWS_AS(sample_set(spread, 0, 1), SpecError);
}

TEST_CASE("build_scenario label arithmetic") {
  SUBCASE("disjoint") {
    const auto sc = build_scenario(small(ScenarioKind::disjoint, 4, {2}, 0));
    CHECK(sc.labels_up_to(1).size() == 6);
    CHECK(sc.overlap_labels(1).empty());
  }
  SUBCASE("full overlap") {
    const auto sc = build_scenario(small(ScenarioKind::full_overlap, 6, {3}, 0));
    CHECK(sc.labels_up_to(1) == sc.steps[0].labels);
    CHECK(sc.labels_up_to(1).size() == 6);
  }
  SUBCASE("random overlap") {
    const auto sc = build_scenario(small(ScenarioKind::overlap_random, 8, {4}, 2));
    CHECK(sc.labels_up_to(1).size() == 10);
    CHECK(sc.overlap_labels(1).size() == 2);
  }
}

TEST_CASE("every scenario kind covers its label universe with exact counts") {
  for (auto kind : {ScenarioKind::disjoint, ScenarioKind::overlap_random, ScenarioKind::overlap_domain,
                    ScenarioKind::overlap_style, ScenarioKind::full_overlap}) {
    for (auto split : {SampleSplit::random, SampleSplit::cluster}) {
      CAPTURE(to_string(kind));
      CAPTURE(to_string(split));
      auto spec = small(kind, 8, {3, 3}, 1);
      spec.sample_split = split;
      const auto sc = build_scenario(spec);
      const auto all = as_set(sc.labels_up_to(2));
      CHECK(as_set(sc.test_up_to(2).labels()) == all);
      CHECK(as_set(sc.val_up_to(2).labels()) == all);
      std::set<ClassId> train;
      std::size_t n_train = 0;
      for (const auto& st : sc.steps) {
        for (auto c : st.train.labels()) train.insert(c);
        n_train += st.train.size();
      }
      CHECK(train == all);
      CHECK(n_train == all.size() * spec.per_class_train);
      CHECK(sc.test_up_to(2).size() == all.size() * spec.per_class_test);
      CHECK(sc.val_up_to(2).size() == all.size() * spec.per_class_val);
      for (std::size_t t = 0; t < sc.steps.size(); ++t) {
        for (auto o : sc.steps[t].train.origin) CHECK(o == t);
      }
      if (kind == ScenarioKind::disjoint) {
        for (std::size_t t = 1; t < sc.steps.size(); ++t) {
          std::vector<ClassId> both;
          std::set_intersection(sc.steps[0].labels.begin(), sc.steps[0].labels.end(), sc.steps[t].labels.begin(),
                                sc.steps[t].labels.end(), std::back_inserter(both));
          CHECK(both.empty());
        }
      }
    }
  }
}

TEST_CASE("style overlap keeps mixture components apart") {
  const auto sc = build_scenario(small(ScenarioKind::overlap_style, 6, {3}, 2));
  const auto ovl = sc.overlap_labels(1);
  REQUIRE(ovl.size() == 2);
  for (auto c : ovl) {
    CHECK(sc.generators[c].components.size() == 2);
    const auto base = sc.steps[0].train.of_class(c);
    const auto novel = sc.steps[1].train.of_class(c);
    REQUIRE(base.size() > 0);
    REQUIRE(novel.size() > 0);
    for (auto k : base.component) CHECK(k == 0);
    for (auto k : novel.component) CHECK(k == 1);
  }
}

TEST_CASE("domain overlap separates mean half-spaces") {
  const auto sc = build_scenario(small(ScenarioKind::overlap_domain, 6, {3}, 1));
  const auto base = as_set(sc.steps[0].labels);
  for (const auto& g : sc.generators) {
    const double first = g.components[0].mean[0];
    if (base.count(g.label)) CHECK(first > 0.0);
    else CHECK(first < 0.0);
  }
}

TEST_CASE("infeasible scenario counts are rejected") {
  CHECK_THROWS_AS(build_scenario(small(ScenarioKind::overlap_random, 4, {2}, 3)), SpecError);
  CHECK_THROWS_AS(build_scenario(small(ScenarioKind::full_overlap, 3, {4}, 0)), SpecError);
  CHECK_THROWS_AS(build_scenario(small(ScenarioKind::disjoint, 1, {2}, 0)), SpecError);
}

TEST_CASE("identical specs serialize identically") {
  const auto spec = small(ScenarioKind::overlap_random, 6, {2, 2}, 1);
  const auto a = scenario_to_json(build_scenario(spec)).dump();
  const auto b = scenario_to_json(build_scenario(spec)).dump();
  CHECK(a == b);
  const auto back = scenario_to_json(scenario_from_json(nlohmann::json::parse(a))).dump();
  CHECK(back == a);
}

TEST_CASE("random overlap split") {
  LabeledSet ten(1), eleven(1);
  for (int i = 0; i < 10; ++i) ten.push_back(std::vector<double>{double(i)}, 0, 0);
  for (int i = 0; i < 11; ++i) eleven.push_back(std::vector<double>{double(i)}, 0, 0);
  auto [b10, n10] = split_overlap_samples_random(ten, 1);
  CHECK(b10.size() == 5);
  CHECK(n10.size() == 5);
  auto [b11, n11] = split_overlap_samples_random(eleven, 1);
  CHECK(b11.size() == 6);
  CHECK(n11.size() == 5);
  auto [b11b, n11b] = split_overlap_samples_random(eleven, 1);
  CHECK(b11.x == b11b.x);
  CHECK(n11.x == n11b.x);
}

TEST_CASE("kmeans2 small cases") {
  const auto four = points_1d({0, 0.1, 10, 10.1});
  const auto r = kmeans2(four.x, 0);
  CHECK(r.assignment[0] == r.assignment[1]);
  CHECK(r.assignment[2] == r.assignment[3]);
  CHECK(r.assignment[0] != r.assignment[2]);

  const auto two = points_1d({1, 2});
  const auto r2 = kmeans2(two.x, 0);
  CHECK(r2.assignment[0] != r2.assignment[1]);

  CHECK_THROWS_AS(kmeans2(points_1d({3, 3, 3}).x, 0), DegenerateError);
  CHECK_THROWS_AS(kmeans2(points_1d({3}).x, 0), DomainError);
}

TEST_CASE("kmeans2 ends at a Lloyd fixed point with a non-increasing objective") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat x = cilfuse::testing::random_mat(20, 2, rng, -5, 5);
    const auto r = kmeans2(x, trial);
    for (std::size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] <= r.objective[i - 1] + 1e-12);
    // Recompute centroids from the final assignment, then reassign.
    Mat c(2, 2);
    double n[2] = {0, 0};
    for (std::size_t i = 0; i < 20; ++i) {
      n[r.assignment[i]] += 1;
      for (std::size_t d = 0; d < 2; ++d) c(r.assignment[i], d) += x(i, d);
    }
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t d = 0; d < 2; ++d) c(k, d) /= n[k];
    for (std::size_t i = 0; i < 20; ++i) {
      const double d0 = distance(x.row(i), c.row(0));
      const double d1 = distance(x.row(i), c.row(1));
      if (std::abs(d0 - d1) > 1e-9) CHECK(r.assignment[i] == (d1 < d0 ? 1u : 0u));
    }
  }
}

TEST_CASE("cluster split size and tie rules") {
  SUBCASE("separable modes") {
    const auto s = points_1d({0, 0.1, 0.2, 9, 9.1, 9.2});
    auto [base, novel] = split_overlap_samples_cluster(s, s.x, 0);
    CHECK(base.size() == 3);
    CHECK(novel.size() == 3);
    CHECK(base.x(0, 0) == 0.0);
  }
  SUBCASE("larger cluster becomes base") {
    const auto s = points_1d({9, 9.1, 0, 0.1, 0.2, 0.3, 0.4, 0.5, 9.2, 9.3});
    auto [base, novel] = split_overlap_samples_cluster(s, s.x, 0);
    CHECK(base.size() == 6);
    CHECK(novel.size() == 4);
    for (std::size_t r = 0; r < base.size(); ++r) CHECK(base.x(r, 0) < 1.0);
  }
  SUBCASE("tie goes to the cluster of sample 0") {
    const auto s = points_1d({9, 0, 0.1, 0.2, 0.3, 0.4, 9.1, 9.2, 9.3, 9.4});
    auto [base, novel] = split_overlap_samples_cluster(s, s.x, 0);
    CHECK(base.size() == 5);
    CHECK(base.x(0, 0) == 9.0);
  }
  CHECK_THROWS_AS(split_overlap_samples_cluster(points_1d({0, 1}), Mat(3, 1), 0), DimensionError);
}

TEST_CASE("unknown scenario keys are rejected") {
  CHECK_THROWS_WITH_AS(spec_from_json(nlohmann::json{{"colour", 1}}), doctest::Contains("scenario.colour"),
                       ConfigError);
  CHECK(spec_from_json(nlohmann::json{{"dim", 3}}).dim == 3);
}

TEST_CASE("base64 round trip") {
  std::vector<std::uint8_t> bytes;
  for (int n = 0; n < 10; ++n) {
    CHECK(base64_decode(base64_encode(bytes)) == bytes);
    bytes.push_back(static_cast<std::uint8_t>(n * 37));
  }
  CHECK_THROWS_AS(base64_decode("abc"), FormatError);
}
