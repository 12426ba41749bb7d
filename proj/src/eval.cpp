#include "cilfuse/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "cilfuse/errors.hpp"
#include "cilfuse/rng.hpp"

namespace cilfuse {

std::optional<double> accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: prediction/label count mismatch");
  if (truth.empty()) return std::nullopt;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += predicted[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(truth.size());
}

std::optional<double> accuracy(const Predictor& predict, const LabeledSet& s) {
  if (s.empty()) return std::nullopt;
  const auto pred = predict(s.x);
  return accuracy(pred, s.y);
}

std::optional<double> average_accuracy(std::optional<double> base, std::optional<double> novel,
                                       std::optional<double> ovlp) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : {base, novel, ovlp}) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

SplitKind split_of(const Scenario& s, std::size_t t, ClassId c) {
  const auto& base = s.steps.at(0).labels;
  if (!std::binary_search(base.begin(), base.end(), c)) return SplitKind::novel;
  for (std::size_t k = 1; k <= t && k < s.steps.size(); ++k) {
    const auto& l = s.steps[k].labels;
    if (std::binary_search(l.begin(), l.end(), c)) return SplitKind::overlap;
  }
  return SplitKind::base;
}

namespace {

// Step that introduced novel class c, or 0 if none.
std::size_t first_step(const Scenario& s, std::size_t t, ClassId c) {
  for (std::size_t k = 1; k <= t && k < s.steps.size(); ++k) {
    const auto& l = s.steps[k].labels;
    if (std::binary_search(l.begin(), l.end(), c)) return k;
  }
  return 0;
}

}  // namespace

EvalReport metrics_report(const Scenario& s, std::size_t t, const LabeledSet& data, std::span<const ClassId> predicted) {
  if (predicted.size() != data.size()) throw DimensionError("metrics_report: prediction count mismatch");
  if (t >= s.steps.size()) throw SpecError("metrics_report: step beyond scenario");
  EvalReport r;
  r.step = t;
  std::vector<ClassId> p[3], y[3];
  std::vector<std::vector<ClassId>> ps(t), ys(t);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto k = static_cast<int>(split_of(s, t, data.y[i]));
    p[k].push_back(predicted[i]);
    y[k].push_back(data.y[i]);
    if (k == static_cast<int>(SplitKind::novel)) {
      const std::size_t step = first_step(s, t, data.y[i]);
      if (step > 0) {
        ps[step - 1].push_back(predicted[i]);
        ys[step - 1].push_back(data.y[i]);
      }
    }
  }
  r.acc_all = accuracy(predicted, data.y);
  r.acc_base = accuracy(p[0], y[0]);
  r.acc_novel = accuracy(p[1], y[1]);
  r.acc_ovlp = accuracy(p[2], y[2]);
  r.acc_avg = average_accuracy(r.acc_base, r.acc_novel, r.acc_ovlp);
  for (std::size_t k = 0; k < t; ++k) r.novel_by_step.push_back(accuracy(ps[k], ys[k]));
  return r;
}

EvalReport metrics_report(const Predictor& predict, const Scenario& s, std::size_t t, const LabeledSet& data) {
  const auto pred = predict(data.x);
  return metrics_report(s, t, data, pred);
}

IncrementalAccuracy incremental_accuracy(std::span<const EvalReport> reports) {
  if (reports.empty()) throw SpecError("incremental_accuracy: no reports");
  IncrementalAccuracy out;
  for (const auto& r : reports) {
    if (!r.acc_all || !r.acc_avg) throw SpecError("incremental_accuracy: report without Acc_all/Acc_avg");
    out.inc_acc += *r.acc_all;
    out.avg_acc += *r.acc_avg;
  }
  out.inc_acc /= static_cast<double>(reports.size());
  out.avg_acc /= static_cast<double>(reports.size());
  return out;
}

// ------------------------------------------------------------------ grid

std::string to_string(OperatingPoint op) {
  switch (op) {
    case OperatingPoint::best_all: return "best-acc-all";
    case OperatingPoint::best_avg: return "best-acc-avg";
    case OperatingPoint::best_balanced: return "best-balanced";
  }
  return "?";
}

const ChosenCell& GridResult::at(OperatingPoint op) const {
  for (const auto& c : chosen) {
    if (c.op == op) return c;
  }
  throw LookupError("grid result has no operating point " + to_string(op));
}

double objective(OperatingPoint op, const EvalReport& r) {
  const double all = r.acc_all.value_or(0.0);
  const double avg = r.acc_avg.value_or(0.0);
  switch (op) {
    case OperatingPoint::best_all: return all;
    case OperatingPoint::best_avg: return avg;
    case OperatingPoint::best_balanced: return (all + avg) / 2.0;
  }
  return 0.0;
}

std::size_t select_cell(std::span<const GridCell> cells, OperatingPoint op) {
  if (cells.empty()) throw SpecError("select_cell: empty grid");
  std::size_t best = 0;
  double best_v = objective(op, cells[0].val);
  for (std::size_t i = 1; i < cells.size(); ++i) {
    const double v = objective(op, cells[i].val);
    const bool smaller_key = std::pair(cells[i].alpha, cells[i].beta) < std::pair(cells[best].alpha, cells[best].beta);
    if (v > best_v || (v == best_v && smaller_key)) {
      best = i;
      best_v = v;
    }
  }
  return best;
}

GridResult grid_search(const GridSearchInput& in, std::span<const double> alphas, std::span<const double> betas,
                       std::uint64_t seed, std::size_t threads, std::vector<FusionHead>* heads) {
  if (alphas.empty() || betas.empty()) throw SpecError("grid_search: empty grid");
  if (!in.scenario || !in.model || !in.memory || !in.novel) throw SpecError("grid_search: missing input");
  const Scenario& sc = *in.scenario;
  const ModelBundle& m = *in.model;

  const BranchOutputs val_out = compute_outputs(m, sc.val_up_to(in.step).x);
  const LabeledSet val = sc.val_up_to(in.step);
  const LabeledSet test = sc.test_up_to(in.step);
  const BranchOutputs test_out = compute_outputs(m, test.x);

  // One sampler per cell keeps each cell's stream independent of the others.
  GridResult g;
  g.alphas.assign(alphas.begin(), alphas.end());
  g.betas.assign(betas.begin(), betas.end());
  g.cells.resize(alphas.size() * betas.size());
  std::vector<FusionHead> trained(g.cells.size());

  const BalancedSampler probe(*in.memory, *in.novel, in.train.per_class, 0);
  const BranchOutputs cand_out = compute_outputs(m, probe.candidates().x);

  parallel_for(g.cells.size(), threads, [&](std::size_t i) {
    const std::size_t ai = i / betas.size();
    const std::size_t bi = i % betas.size();
    const std::uint64_t cell_seed = derive_seed(seed, ai, bi);
    FusionHead f = init_fusion(m, in.pooler, alphas[ai], betas[bi], cell_seed, in.warm_start);
    const BalancedSampler sampler(*in.memory, *in.novel, in.train.per_class, derive_seed(cell_seed, 0xf5));
    f = train_fusion(f, sampler, cand_out, in.train);
    GridCell& c = g.cells[i];
    c.alpha_index = ai;
    c.beta_index = bi;
    c.alpha = alphas[ai];
    c.beta = betas[bi];
    c.val = metrics_report(sc, in.step, val, fused_predict(f, val_out));
    c.val.alpha = c.alpha;
    c.val.beta = c.beta;
    c.val.pooler = to_string(in.pooler);
    c.val.method = "fusion";
    trained[i] = std::move(f);
  });

  for (auto op : kOperatingPoints) {
    ChosenCell ch;
    ch.op = op;
    ch.cell = select_cell(g.cells, op);
    const GridCell& c = g.cells[ch.cell];
    ch.test = metrics_report(sc, in.step, test, fused_predict(trained[ch.cell], test_out));
    ch.test.method = "fusion";
    ch.test.operating_point = to_string(op);
    ch.test.alpha = c.alpha;
    ch.test.beta = c.beta;
    ch.test.pooler = to_string(in.pooler);
    g.chosen.push_back(std::move(ch));
  }
  if (heads) *heads = std::move(trained);
  return g;
}

// ------------------------------------------------------------- prelim sweep

std::vector<PrelimRow> prelim_sweep(std::span<const std::size_t> base_counts, const PrelimConfig& cfg,
                                    std::uint64_t seed) {
  std::vector<PrelimRow> rows;
  for (std::size_t n_base : base_counts) {
    ScenarioSpec spec = cfg.scenario;
    spec.kind = ScenarioKind::disjoint;
    spec.n_base_classes = n_base;
    spec.novel_steps = {cfg.scenario.novel_steps.empty() ? 8 : cfg.scenario.novel_steps.front()};
    spec.seed = derive_seed(seed, n_base);
    const Scenario sc = build_scenario(spec);
    Architecture arch = cfg.arch;
    arch.input_dim = spec.dim;
    const ModelBundle base = pretrain_base(sc.steps[0].train, arch, cfg.pretrain, derive_seed(seed, n_base, 1));
    const std::size_t blocks = base.trunk.size() + base.branches[0].blocks.size();
    PrelimRow row;
    row.n_base = n_base;
    for (std::size_t k = 0; k <= blocks; ++k) {
      const auto r = finetune_k_blocks(base, sc.steps[1].train, sc.steps[1].test, k, cfg.finetune,
                                       derive_seed(seed, n_base, 2));
      row.novel_acc.push_back(r.novel_accuracy);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ------------------------------------------------------------------ misc

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DomainError("spearman: need two equal-length series of size >= 2");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::size_t default_threads() {
  if (const char* env = std::getenv("CILFUSE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(round4(*v)) : nlohmann::json(); }

}  // namespace

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["operating_point"] = r.operating_point;
  j["alpha"] = r.alpha ? nlohmann::json(*r.alpha) : nlohmann::json();
  j["beta"] = r.beta ? nlohmann::json(*r.beta) : nlohmann::json();
  j["pooler"] = r.pooler;
  j["seed"] = r.seed;
  j["step"] = r.step;
  j["Acc_all"] = opt(r.acc_all);
  j["Acc_base"] = opt(r.acc_base);
  j["Acc_novel"] = opt(r.acc_novel);
  j["Acc_ovlp"] = opt(r.acc_ovlp);
  j["Acc_avg"] = opt(r.acc_avg);
  auto& steps = j["Acc_novel_by_step"] = nlohmann::json::array();
  for (const auto& v : r.novel_by_step) steps.push_back(opt(v));
  return j;
}

nlohmann::json grid_to_json(const GridResult& g) {
  nlohmann::json j;
  j["alphas"] = g.alphas;
  j["betas"] = g.betas;
  auto& cells = j["cells"] = nlohmann::json::array();
  for (const auto& c : g.cells) {
    cells.push_back({{"alpha", c.alpha}, {"beta", c.beta}, {"val", report_to_json(c.val)}});
  }
  auto& chosen = j["chosen"] = nlohmann::json::array();
  for (const auto& c : g.chosen) {
    chosen.push_back({{"operating_point", to_string(c.op)},
                      {"alpha", g.cells[c.cell].alpha},
                      {"beta", g.cells[c.cell].beta},
                      {"test", report_to_json(c.test)}});
  }
  return j;
}

}  // namespace cilfuse
