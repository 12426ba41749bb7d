#include <doctest.h>

#include <cmath>

#include "cilfuse/errors.hpp"
#include "cilfuse/eval.hpp"
#include "oracles.hpp"

using namespace cilfuse;
using namespace cilfuse::testing;

namespace {

EvalReport with(double all, double avg) {
  EvalReport r;
  r.acc_all = all;
  r.acc_avg = avg;
  return r;
}

std::vector<GridCell> table(const std::vector<double>& alphas, const std::vector<double>& betas,
                            const std::vector<std::pair<double, double>>& values) {
  std::vector<GridCell> cells;
  for (std::size_t a = 0; a < alphas.size(); ++a)
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const auto [all, avg] = values[a * betas.size() + b];
      cells.push_back({a, b, alphas[a], betas[b], with(all, avg)});
    }
  return cells;
}

}  // namespace

TEST_CASE("accuracy counting") {
  const std::vector<ClassId> y{0, 1, 2, 3, 4, 5};
  CHECK(*accuracy(y, y) == 1.0);
  CHECK(*accuracy(std::vector<ClassId>(6, 9), y) == 0.0);
  CHECK(*accuracy(std::vector<ClassId>{0, 1, 2, 3, 0, 0}, y) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_FALSE(accuracy(std::vector<ClassId>{}, std::vector<ClassId>{}).has_value());
}

TEST_CASE("average accuracy of four-decimal rows") {
  CHECK(round4(*average_accuracy(0.6377, 0.5267, std::nullopt)) == 0.5822);
  CHECK(round4(*average_accuracy(0.6435, 0.5376, 0.5613)) == 0.5808);
  CHECK(*average_accuracy(0.7, std::nullopt, 0.7) == 0.7);
  CHECK_FALSE(average_accuracy(std::nullopt, std::nullopt, std::nullopt).has_value());
}

TEST_CASE("split reports partition the test set") {
  for (auto kind : {ScenarioKind::disjoint, ScenarioKind::overlap_random, ScenarioKind::full_overlap}) {
    CAPTURE(to_string(kind));
    auto spec = tiny_spec(1);
    spec.kind = kind;
    spec.novel_steps = {3, 2};
    const auto sc = build_scenario(spec);
    const auto test = sc.test_up_to(2);
    Rng rng(2);
    std::vector<ClassId> pred(test.size());
    const auto labels = sc.labels_up_to(2);
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = rng.uniform() < 0.6 ? test.y[i] : labels[rng.index(labels.size())];
    const auto r = metrics_report(sc, 2, test, pred);

    std::size_t n[3] = {0, 0, 0}, ok[3] = {0, 0, 0};
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto k = static_cast<int>(split_of(sc, 2, test.y[i]));
      ++n[k];
      ok[k] += pred[i] == test.y[i];
    }
    CHECK(n[0] + n[1] + n[2] == test.size());
    std::vector<double> present;
    const std::optional<double>* accs[3] = {&r.acc_base, &r.acc_novel, &r.acc_ovlp};
    for (int k = 0; k < 3; ++k) {
      CHECK(accs[k]->has_value() == (n[k] > 0));
      if (n[k]) {
        CHECK(**accs[k] == static_cast<double>(ok[k]) / static_cast<double>(n[k]));
        present.push_back(**accs[k]);
      }
    }
    double mean = 0.0;
    for (double v : present) mean += v;
    mean /= static_cast<double>(present.size());
    CHECK(std::abs(*r.acc_avg - mean) < 1e-12);
    CHECK(r.novel_by_step.size() == 2);
    if (kind == ScenarioKind::full_overlap) {
      CHECK_FALSE(r.acc_novel.has_value());
    }
  }
}

TEST_CASE("incremental accuracy") {
  std::vector<EvalReport> one{with(0.4, 0.3)};
  CHECK(incremental_accuracy(one).inc_acc == 0.4);
  CHECK(incremental_accuracy(one).avg_acc == 0.3);
  std::vector<EvalReport> two{with(0.8, 0.5), with(0.6, 0.5)};
  CHECK(incremental_accuracy(two).inc_acc == doctest::Approx(0.7).epsilon(1e-15));

  std::vector<EvalReport> eleven;
  double sum_all = 0.0, sum_avg = 0.0;
  for (int t = 0; t <= 10; ++t) {
    const double all = 0.9 - 0.031 * t, avg = 0.85 - 0.027 * t;
    eleven.push_back(with(all, avg));
    sum_all += all;
    sum_avg += avg;
  }
  CHECK(incremental_accuracy(eleven).inc_acc == doctest::Approx(sum_all / 11.0).epsilon(1e-15));
  CHECK(incremental_accuracy(eleven).avg_acc == doctest::Approx(sum_avg / 11.0).epsilon(1e-15));
  CHECK_THROWS_AS(incremental_accuracy(std::vector<EvalReport>{}), SpecError);
}

TEST_CASE("operating point selection") {
  SUBCASE("single cell") {
    const auto cells = table({0.5}, {0.5}, {{0.3, 0.2}});
    for (auto op : kOperatingPoints) CHECK(select_cell(cells, op) == 0);
  }
  SUBCASE("2x2 with distinct winners") {
    const auto cells = table({0, 1}, {0, 1}, {{0.50, 0.50}, {0.70, 0.40}, {0.60, 0.62}, {0.40, 0.70}});
    CHECK(select_cell(cells, OperatingPoint::best_all) == 1);
    CHECK(select_cell(cells, OperatingPoint::best_avg) == 3);
    CHECK(select_cell(cells, OperatingPoint::best_balanced) == 2);
  }
  SUBCASE("3x6 tables against an exhaustive scan") {
    Rng rng(5);
    const std::vector<double> alphas{0, 0.4, 1}, betas{0, 0.2, 0.4, 0.6, 0.8, 1};
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<std::pair<double, double>> v;
      // Coarse values force ties.
      for (int i = 0; i < 18; ++i) v.push_back({rng.index(5) / 4.0, rng.index(5) / 4.0});
      const auto cells = table(alphas, betas, v);
      for (auto op : kOperatingPoints) CHECK(select_cell(cells, op) == scan_best_cell(cells, op));
    }
  }
  CHECK_THROWS_AS(select_cell(std::vector<GridCell>{}, OperatingPoint::best_all), SpecError);
}

TEST_CASE("grid search") {
  const auto sc = build_scenario(tiny_spec(2));
  auto model = pretrain_base(sc.steps[0].train, tiny_arch(), quick_sgd(10), 2);
  model = add_branch_stage1(model, sc.steps[1].train, quick_sgd(10), 2);
  const auto memory = select_exemplars(sc.steps[0].train, 5, 2);
  GridSearchInput in;
  in.scenario = &sc;
  in.model = &model;
  in.memory = &memory;
  in.novel = &sc.steps[1].train;
  in.train.sgd.epochs = 2;
  const std::vector<double> alphas{0.0, 1.0}, betas{0.0, 0.5, 1.0};
  std::vector<FusionHead> heads;
  const auto g = grid_search(in, alphas, betas, 7, 1, &heads);
  CHECK(g.cells.size() == 6);
  CHECK(heads.size() == 6);
  CHECK(g.chosen.size() == 3);
  CHECK(g.cell(1, 2).alpha == 1.0);
  CHECK(g.cell(1, 2).beta == 1.0);
  for (auto op : kOperatingPoints) {
    CHECK(g.at(op).cell == scan_best_cell(g.cells, op));
    CHECK(g.at(op).test.acc_all.has_value());
  }
  const double bal = objective(OperatingPoint::best_balanced, g.cells[g.at(OperatingPoint::best_balanced).cell].val);
  CHECK(bal >= objective(OperatingPoint::best_balanced, g.cells[g.at(OperatingPoint::best_all).cell].val));
  CHECK(bal >= objective(OperatingPoint::best_balanced, g.cells[g.at(OperatingPoint::best_avg).cell].val));

  const auto again = grid_search(in, alphas, betas, 7, 2);
  CHECK(grid_to_json(again).dump() == grid_to_json(g).dump());
  CHECK_THROWS_AS(grid_search(in, std::vector<double>{}, betas, 7), SpecError);
}

TEST_CASE("preliminary sweep") {
  PrelimConfig cfg;
  cfg.scenario = tiny_spec(0);
  cfg.arch = tiny_arch();
  cfg.pretrain = quick_sgd(3);
  cfg.finetune = quick_sgd(3);
  const std::vector<std::size_t> counts{4, 6};
  const auto rows = prelim_sweep(counts, cfg, 11);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) CHECK(r.novel_acc.size() == 3);

  ScenarioSpec spec = cfg.scenario;
  spec.n_base_classes = 4;
  spec.novel_steps = {3};
  spec.seed = derive_seed(11, 4);
  const auto sc = build_scenario(spec);
  const auto base = pretrain_base(sc.steps[0].train, cfg.arch, cfg.pretrain, derive_seed(11, 4, 1));
  const auto frozen = finetune_k_blocks(base, sc.steps[1].train, sc.steps[1].test, 0, cfg.finetune, derive_seed(11, 4, 2));
  CHECK(rows[0].novel_acc[0] == frozen.novel_accuracy);
}

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(spearman(x, std::vector<double>{2, 4, 6, 8, 10}) == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Average ranks: y ranks are 1.5, 1.5, 3, 4, 5.
  const double r = spearman(x, std::vector<double>{1, 1, 2, 3, 4});
  CHECK(r == doctest::Approx(0.9746794344808963));
}

TEST_CASE("report serialization") {
  EvalReport r;
  r.method = "fusion";
  r.acc_all = 0.123456;
  const auto j = report_to_json(r);
  CHECK(j.at("Acc_all").get<double>() == 0.1235);
  CHECK(j.at("Acc_ovlp").is_null());
  CHECK(round4(0.58216) == 0.5822);
  CHECK(round4(-0.00004) == 0.0);
  CHECK(round4(1.0) == 1.0);
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                    if (i == 7) throw SpecError("boom");
                  }),
                  SpecError);
}
