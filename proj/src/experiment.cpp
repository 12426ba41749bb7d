#include "cilfuse/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "cilfuse/errors.hpp"
#include "cilfuse/io.hpp"
#include "cilfuse/plot.hpp"
#include "cilfuse/rng.hpp"

namespace cilfuse {

using nlohmann::json;

// ----------------------------------------------------------------- config

namespace {

[[noreturn]] void config_fail(const std::string& path, const std::string& msg) {
  throw ConfigError(path + ": " + msg);
}

template <typename Fn>
void field(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const json::exception& e) {
    config_fail(path, e.what());
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.starts_with("scenario.") || msg.starts_with(path)) throw;
    config_fail(path, msg);
  } catch (const Error& e) {
    config_fail(path, e.what());
  }
}

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) config_fail(path, "expected an object");
}

FusionTrainConfig fusion_cfg_from_json(const json& j, const std::string& path, FusionTrainConfig base) {
  require_object(j, path);
  json sgd = json::object();
  for (const auto& [key, v] : j.items()) {
    if (key == "per_class") {
      field(path + ".per_class", [&] { base.per_class = v.get<std::size_t>(); });
    } else {
      sgd[key] = v;
    }
  }
  base.sgd = sgd_from_json(sgd, path, base.sgd);
  return base;
}

json fusion_cfg_to_json(const FusionTrainConfig& c) {
  json j = sgd_to_json(c.sgd);
  j["per_class"] = c.per_class;
  return j;
}

Architecture arch_from_json(const json& j, Architecture a) {
  require_object(j, "arch");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "arch." + key;
    field(path, [&] {
      if (key == "trunk_widths") a.trunk_widths = v.get<std::vector<std::size_t>>();
      else if (key == "branch_widths") a.branch_widths = v.get<std::vector<std::size_t>>();
      else if (key == "normalize") a.normalize = v.get<bool>();
      else if (key == "cosine_scale") a.cosine_scale = v.get<double>();
      else throw ConfigError(path + ": unknown key");
    });
  }
  return a;
}

FeatureSource features_from_json(const json& j) {
  require_object(j, "features");
  FeatureSource s;
  for (const auto& [key, v] : j.items()) {
    const std::string path = "features." + key;
    field(path, [&] {
      if (key == "manifest") s.manifest = v.get<std::string>();
      else if (key == "file") s.file = v.get<std::string>();
      else if (key == "n_base_classes") s.n_base_classes = v.get<std::size_t>();
      else if (key == "novel_steps") s.novel_steps = v.get<std::vector<std::size_t>>();
      else if (key == "per_class_val") s.per_class_val = v.get<std::size_t>();
      else if (key == "per_class_test") s.per_class_test = v.get<std::size_t>();
      else throw ConfigError(path + ": unknown key");
    });
  }
  if (s.manifest.empty()) config_fail("features.manifest", "required");
  return s;
}

}  // namespace

SgdConfig sgd_from_json(const json& j, const std::string& path, SgdConfig c) {
  require_object(j, path);
  for (const auto& [key, v] : j.items()) {
    const std::string p = path + "." + key;
    field(p, [&] {
      if (key == "base_lr") c.base_lr = v.get<double>();
      else if (key == "decay_every") c.decay_every = v.get<std::size_t>();
      else if (key == "decay_factor") c.decay_factor = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else throw ConfigError(p + ": unknown key");
    });
  }
  field(path, [&] { c.validate(); });
  return c;
}

json sgd_to_json(const SgdConfig& c) {
  return {{"base_lr", c.base_lr},         {"decay_every", c.decay_every}, {"decay_factor", c.decay_factor},
          {"epochs", c.epochs},           {"batch_size", c.batch_size},   {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}};
}

void ExperimentConfig::validate() const {
  if (!features) field("scenario", [&] { scenario.validate(); });
  field("arch", [&] {
    Architecture a = arch;
    a.input_dim = std::max<std::size_t>(1, a.input_dim);
    a.validate();
  });
  if (memory_per_class < 1) config_fail("memory_per_class", "must be >= 1");
  if (methods.empty()) config_fail("methods", "must not be empty");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) config_fail("methods", "unknown method '" + m + "'");
    if (!seen.insert(m).second) config_fail("methods", "duplicate method '" + m + "'");
  }
  if (alphas.empty()) config_fail("grid.alphas", "must not be empty");
  if (betas.empty()) config_fail("grid.betas", "must not be empty");
  for (double a : alphas)
    if (!(a >= 0.0 && a <= 1.0)) config_fail("grid.alphas", "values must lie in [0,1]");
  for (double b : betas)
    if (!(b >= 0.0 && b <= 1.0)) config_fail("grid.betas", "values must lie in [0,1]");
  if (seeds.empty()) config_fail("seeds", "must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) config_fail("seeds", "must be distinct");
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected an object");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "scenario") {
      c.scenario = spec_from_json(v, c.scenario);
    } else if (key == "features") {
      c.features = features_from_json(v);
    } else if (key == "arch") {
      c.arch = arch_from_json(v, c.arch);
    } else if (key == "schedules") {
      require_object(v, "schedules");
      for (const auto& [sk, sv] : v.items()) {
        const std::string path = "schedules." + sk;
        if (sk == "pretrain") c.schedules.pretrain = sgd_from_json(sv, path, c.schedules.pretrain);
        else if (sk == "stage1") c.schedules.stage1 = sgd_from_json(sv, path, c.schedules.stage1);
        else if (sk == "finetune") c.schedules.finetune = sgd_from_json(sv, path, c.schedules.finetune);
        else if (sk == "router") c.schedules.router = sgd_from_json(sv, path, c.schedules.router);
        else if (sk == "fusion") c.schedules.fusion = fusion_cfg_from_json(sv, path, c.schedules.fusion);
        else if (sk == "cat") c.schedules.cat = fusion_cfg_from_json(sv, path, c.schedules.cat);
        else config_fail(path, "unknown key");
      }
    } else if (key == "memory_per_class") {
      field(key, [&] { c.memory_per_class = v.get<std::size_t>(); });
    } else if (key == "methods") {
      field(key, [&] { c.methods = v.get<std::vector<std::string>>(); });
    } else if (key == "grid") {
      require_object(v, "grid");
      for (const auto& [gk, gv] : v.items()) {
        const std::string path = "grid." + gk;
        field(path, [&] {
          if (gk == "alphas") c.alphas = gv.get<std::vector<double>>();
          else if (gk == "betas") c.betas = gv.get<std::vector<double>>();
          else if (gk == "pooler") c.pooler = pooler_from_string(gv.get<std::string>());
          else if (gk == "warm_start") c.warm_start = gv.get<bool>();
          else throw ConfigError(path + ": unknown key");
        });
      }
    } else if (key == "seeds") {
      field(key, [&] { c.seeds = v.get<std::vector<std::uint64_t>>(); });
    } else if (key == "output_dir") {
      field(key, [&] { c.output_dir = v.get<std::string>(); });
    } else if (key == "save_checkpoints") {
      field(key, [&] { c.save_checkpoints = v.get<bool>(); });
    } else {
      config_fail(key, "unknown key");
    }
  }
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["scenario"] = spec_to_json(c.scenario);
  if (c.features) {
    const auto& f = *c.features;
    j["features"] = {{"manifest", f.manifest.string()},         {"file", f.file.string()},
                     {"n_base_classes", f.n_base_classes},      {"novel_steps", f.novel_steps},
                     {"per_class_val", f.per_class_val},        {"per_class_test", f.per_class_test}};
  }
  j["arch"] = {{"trunk_widths", c.arch.trunk_widths},
               {"branch_widths", c.arch.branch_widths},
               {"normalize", c.arch.normalize},
               {"cosine_scale", c.arch.cosine_scale}};
  j["schedules"] = {{"pretrain", sgd_to_json(c.schedules.pretrain)}, {"stage1", sgd_to_json(c.schedules.stage1)},
                    {"finetune", sgd_to_json(c.schedules.finetune)}, {"router", sgd_to_json(c.schedules.router)},
                    {"fusion", fusion_cfg_to_json(c.schedules.fusion)}, {"cat", fusion_cfg_to_json(c.schedules.cat)}};
  j["memory_per_class"] = c.memory_per_class;
  j["methods"] = c.methods;
  j["grid"] = {{"alphas", c.alphas}, {"betas", c.betas}, {"pooler", to_string(c.pooler)}, {"warm_start", c.warm_start}};
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir.string();
  j["save_checkpoints"] = c.save_checkpoints;
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// --------------------------------------------------------------- scenarios

Scenario scenario_from_features(const LabeledSet& data, const FeatureSource& src, std::uint64_t seed) {
  const auto labels = data.labels();
  std::size_t needed = src.n_base_classes;
  for (auto n : src.novel_steps) needed += n;
  if (src.n_base_classes < 2) throw SpecError("features: n_base_classes must be >= 2");
  if (src.novel_steps.empty()) throw SpecError("features: novel_steps must not be empty");
  if (needed > labels.size()) {
    throw SpecError("features: " + std::to_string(needed) + " classes requested, data has " +
                    std::to_string(labels.size()));
  }
  Scenario sc;
  sc.spec.kind = ScenarioKind::disjoint;
  sc.spec.n_base_classes = src.n_base_classes;
  sc.spec.novel_steps = src.novel_steps;
  sc.spec.n_overlap = 0;
  sc.spec.per_class_val = src.per_class_val;
  sc.spec.per_class_test = src.per_class_test;
  sc.spec.per_class_train = 0;
  sc.spec.seed = seed;
  sc.spec.dim = data.dim();

  std::vector<std::size_t> sizes{src.n_base_classes};
  sizes.insert(sizes.end(), src.novel_steps.begin(), src.novel_steps.end());
  std::size_t next = 0;
  for (std::size_t t = 0; t < sizes.size(); ++t) {
    StepData st{{}, LabeledSet(data.dim()), LabeledSet(data.dim()), LabeledSet(data.dim())};
    for (std::size_t i = 0; i < sizes[t]; ++i) {
      const ClassId c = labels[next++];
      st.labels.push_back(c);
      std::vector<std::size_t> rows;
      for (std::size_t r = 0; r < data.size(); ++r)
        if (data.y[r] == c) rows.push_back(r);
      if (rows.size() < src.per_class_val + src.per_class_test + 1) {
        throw SpecError("features: class " + std::to_string(c) + " has too few rows for val/test/train");
      }
      Rng rng(derive_seed(seed, 0xfe, c));
      rng.shuffle(rows);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto row = data.x.row(rows[k]);
        const auto origin = static_cast<std::uint32_t>(t);
        if (k < src.per_class_val) st.val.push_back(row, c, origin);
        else if (k < src.per_class_val + src.per_class_test) st.test.push_back(row, c, origin);
        else st.train.push_back(row, c, origin);
      }
    }
    sc.steps.push_back(std::move(st));
  }
  return sc;
}

namespace {

Architecture effective_arch(const ExperimentConfig& c, const Scenario& sc) {
  Architecture a = c.arch;
  a.input_dim = sc.spec.dim;
  if (c.features) a.trunk_widths.clear();
  return a;
}

}  // namespace

Scenario make_scenario(const ExperimentConfig& c, std::uint64_t seed) {
  if (c.features) {
    const auto& f = *c.features;
    std::filesystem::path file = f.file;
    if (file.empty()) file = read_feature_manifest(f.manifest).feature_file;
    return scenario_from_features(ingest_features(file, f.manifest), f, seed);
  }
  ScenarioSpec spec = c.scenario;
  spec.seed = seed;
  if (spec.sample_split == SampleSplit::random || spec.kind == ScenarioKind::disjoint) return build_scenario(spec);

  // Cluster splitting uses a reference model trained on every class.
  const Scenario provisional = build_scenario(spec);
  LabeledSet all(spec.dim);
  for (const auto& st : provisional.steps) all.append(st.train);
  Architecture a = c.arch;
  a.input_dim = spec.dim;
  const ModelBundle ref = pretrain_base(all, a, c.schedules.pretrain, derive_seed(seed, 0x5e));
  return build_scenario(spec, [&ref](const Mat& x) { return branch_features(ref, trunk_forward(ref, x), 0); });
}

// ------------------------------------------------------------------ runner

namespace {

EvalReport tagged(EvalReport r, const std::string& method, const std::string& op, std::uint64_t seed) {
  r.method = method;
  if (r.operating_point.empty()) r.operating_point = op;
  r.seed = seed;
  return r;
}

}  // namespace

SeedRun run_seed(const ExperimentConfig& c, std::uint64_t seed, const RunOptions& opts) {
  SeedRun run;
  run.seed = seed;
  std::size_t step = 0;
  try {
    const Scenario sc = make_scenario(c, seed);
    const Architecture arch = effective_arch(c, sc);
    const std::size_t T = sc.num_novel_steps();
    ModelBundle model = pretrain_base(sc.steps[0].train, arch, c.schedules.pretrain, derive_seed(seed, 0x01));

    {
      StepRecord rec;
      const LabeledSet test = sc.test_up_to(0);
      const EvalReport base = metrics_report(sc, 0, test, branch_predict(model, test.x, 0));
      for (const auto& m : c.methods) {
        if (m == "fusion") {
          for (auto op : kOperatingPoints) rec.reports.push_back(tagged(base, m, to_string(op), seed));
        } else {
          rec.reports.push_back(tagged(base, m, "-", seed));
        }
      }
      run.steps.push_back(std::move(rec));
      run.model = model;
      if (opts.on_step) opts.on_step(run, 0, model, nullptr);
    }

    ExemplarMemory memory = select_exemplars(sc.steps[0].train, c.memory_per_class, derive_seed(seed, 0x02));
    ModelBundle ft_model = model;
    LabeledSet seen_train = sc.steps[0].train;
    std::optional<FusionHead> prev_head;

    for (step = 1; step <= T; ++step) {
      const LabeledSet& novel = sc.steps[step].train;
      model = add_branch_stage1(model, novel, c.schedules.stage1, derive_seed(seed, 0x03, step));
      seen_train.append(novel);
      const LabeledSet test = sc.test_up_to(step);
      const BranchOutputs out = compute_outputs(model, test.x);

      StepRecord rec;
      rec.step = step;
      auto add = [&](const std::string& method, const std::vector<ClassId>& pred) {
        rec.reports.push_back(tagged(metrics_report(sc, step, test, pred), method, "-", seed));
      };
      std::optional<BranchOutputs> seen_out;
      auto routing_eval = [&](const Router& r) {
        if (!seen_out) seen_out = compute_outputs(model, seen_train.x);
        return routing_accuracy(r, *seen_out, seen_train.origin);
      };
      std::optional<FusionHead> head;

      for (const auto& m : c.methods) {
        const auto mi = static_cast<std::uint64_t>(std::find(kMethods.begin(), kMethods.end(), m) - kMethods.begin());
        const std::uint64_t ms = derive_seed(seed, 0x10, step, mi);
        if (m == "finetune") {
          ft_model = full_finetune_baseline(ft_model, novel, sc.labels_up_to(step), c.schedules.finetune, ms);
          add(m, branch_predict(ft_model, test.x, 0));
        } else if (m == "conf-route") {
          Router r;
          r.mode = RouterMode::confidence;
          r.n_branches = model.branches.size();
          add(m, routed_predict(model, r, out));
        } else if (m == "learned-route") {
          const Router r = train_learned_router(model, memory, novel, c.schedules.router, ms);
          rec.learned_routing_accuracy = routing_eval(r);
          add(m, routed_predict(model, r, out));
        } else if (m == "oracle-route") {
          const Router r = train_learned_router(model, memory, novel, c.schedules.router, ms, &seen_train);
          rec.oracle_routing_accuracy = routing_eval(r);
          add(m, routed_predict(model, r, out));
        } else if (m == "featcat-rt") {
          add(m, featcat_predict(featcat_retrain(model, memory, novel, c.schedules.cat, ms), out));
        } else if (m == "logitcat-rt") {
          add(m, logitcat_predict(model.arch, logitcat_retrain(model, memory, novel, c.schedules.cat, ms), out));
        } else if (m == "logitcat-ft") {
          add(m, logitcat_predict(model.arch, logitcat_finetune(model, memory, novel, c.schedules.cat, ms), out));
        } else if (m == "fusion") {
          GridSearchInput in;
          in.scenario = &sc;
          in.step = step;
          in.model = &model;
          in.memory = &memory;
          in.novel = &novel;
          in.pooler = c.pooler;
          in.train = c.schedules.fusion;
          in.warm_start = c.warm_start && prev_head ? &*prev_head : nullptr;
          std::vector<FusionHead> heads;
          GridResult g = grid_search(in, c.alphas, c.betas, ms, opts.threads, &heads);
          for (const auto& ch : g.chosen) rec.reports.push_back(tagged(ch.test, m, to_string(ch.op), seed));
          head = heads[g.at(OperatingPoint::best_balanced).cell];
          rec.grid = std::move(g);
        }
      }
      extend_memory(memory, novel, derive_seed(seed, 0x04, step));
      prev_head = head;
      run.steps.push_back(std::move(rec));
      run.model = model;
      run.fusion = head;
      if (opts.on_step) opts.on_step(run, step, model, head ? &*head : nullptr);
    }
  } catch (const std::exception& e) {
    run.error = "step " + std::to_string(step) + ": " + e.what();
  }
  return run;
}

std::vector<SeedRun> run_experiment(const ExperimentConfig& c, const RunOptions& opts) {
  c.validate();
  std::vector<SeedRun> runs(c.seeds.size());
  const std::size_t workers = std::max<std::size_t>(1, opts.threads);
  const std::size_t seed_workers = std::min(workers, c.seeds.size());
  RunOptions inner = opts;
  inner.threads = std::max<std::size_t>(1, workers / seed_workers);
  parallel_for(c.seeds.size(), seed_workers, [&](std::size_t i) { runs[i] = run_seed(c, c.seeds[i], inner); });
  return runs;
}

// ------------------------------------------------------------------ report

namespace {

const char* const kAccKeys[] = {"Acc_all", "Acc_base", "Acc_novel", "Acc_ovlp", "Acc_avg"};

json rounded(const std::optional<double>& v) { return v ? json(round4(*v)) : json(); }

}  // namespace

json summary_rows(const std::vector<SeedRun>& runs) {
  json rows = json::array();
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<json>> groups;
  for (const auto& run : runs) {
    if (run.error || run.steps.empty()) continue;
    for (const auto& r : run.steps.back().reports) {
      const auto key = std::make_pair(r.method, r.operating_point);
      if (!groups.count(key)) order.push_back(key);
      json row = report_to_json(r);
      json slim = {{"method", r.method}, {"operating_point", r.operating_point}, {"seed", run.seed}};
      for (const char* k : kAccKeys) slim[k] = row[k];
      groups[key].push_back(std::move(slim));
    }
  }
  for (const auto& key : order) {
    const auto& g = groups[key];
    for (const auto& row : g) rows.push_back(row);
    json mean = {{"method", key.first}, {"operating_point", key.second}, {"seed", "mean"}};
    for (const char* k : kAccKeys) {
      std::vector<double> vals;
      for (const auto& row : g)
        if (!row[k].is_null()) vals.push_back(row[k].get<double>());
      if (vals.empty()) {
        mean[k] = nullptr;
        mean[std::string(k) + "_std"] = nullptr;
        continue;
      }
      double mu = 0.0;
      for (double v : vals) mu += v;
      mu /= static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - mu) * (v - mu);
      const double sd = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
      mean[k] = round4(mu);
      mean[std::string(k) + "_std"] = round4(sd);
    }
    rows.push_back(std::move(mean));
  }
  return rows;
}

json build_report(const ExperimentConfig& c, const std::vector<SeedRun>& runs) {
  json runs_j = json::array();
  for (const auto& run : runs) {
    json steps = json::array();
    for (const auto& st : run.steps) {
      json s = {{"step", st.step}};
      json reports = json::array();
      for (const auto& r : st.reports) reports.push_back(report_to_json(r));
      s["reports"] = std::move(reports);
      s["routing_accuracy"] = {{"learned", rounded(st.learned_routing_accuracy)},
                               {"oracle", rounded(st.oracle_routing_accuracy)}};
      s["grid"] = st.grid ? grid_to_json(*st.grid) : json();
      steps.push_back(std::move(s));
    }
    // Incremental accuracy per method/operating point over completed steps.
    json inc = json::array();
    if (!run.steps.empty()) {
      for (std::size_t i = 0; i < run.steps.back().reports.size(); ++i) {
        std::vector<EvalReport> per_step;
        for (const auto& st : run.steps) {
          if (i < st.reports.size()) per_step.push_back(st.reports[i]);
        }
        const auto ia = incremental_accuracy(per_step);
        const auto& last = run.steps.back().reports[i];
        inc.push_back({{"method", last.method},
                       {"operating_point", last.operating_point},
                       {"inc_acc", round4(ia.inc_acc)},
                       {"avg_acc", round4(ia.avg_acc)}});
      }
    }
    runs_j.push_back({{"seed", run.seed},
                      {"error", run.error ? json(*run.error) : json()},
                      {"steps", std::move(steps)},
                      {"incremental", std::move(inc)}});
  }
  return {{"format", "cilfuse-report"},
          {"version", 1},
          {"config", config_to_json(c)},
          {"runs", std::move(runs_j)},
          {"summary", summary_rows(runs)}};
}

std::string summary_csv(const json& summary) {
  std::ostringstream o;
  o << "method,operating_point,seed";
  for (const char* k : kAccKeys) o << ',' << k;
  for (const char* k : kAccKeys) o << ',' << k << "_std";
  o << '\n';
  auto cell = [](const json& v) { return v.is_null() ? std::string() : v.is_string() ? v.get<std::string>() : v.dump(); };
  for (const auto& row : summary) {
    o << cell(row.at("method")) << ',' << cell(row.at("operating_point")) << ',' << cell(row.at("seed"));
    for (const char* k : kAccKeys) o << ',' << cell(row.at(k));
    for (const char* k : kAccKeys) {
      const std::string sk = std::string(k) + "_std";
      o << ',' << (row.contains(sk) ? cell(row.at(sk)) : std::string());
    }
    o << '\n';
  }
  return o.str();
}

namespace {

// Seed-mean of a validation metric over the final-step grid along one axis.
Series sweep_series(const json& runs, const std::string& metric, bool along_alpha) {
  Series s;
  s.name = metric;
  std::map<double, std::pair<double, int>> acc;
  for (const auto& run : runs) {
    if (run.at("steps").empty()) continue;
    const auto& grid = run.at("steps").back().at("grid");
    if (grid.is_null()) continue;
    const auto alphas = grid.at("alphas").get<std::vector<double>>();
    const auto betas = grid.at("betas").get<std::vector<double>>();
    // Fixed axis: β closest to 1 for the α sweep, α closest to 0 for the β sweep.
    auto closest = [](const std::vector<double>& v, double target) {
      return *std::min_element(v.begin(), v.end(),
                               [&](double a, double b) { return std::abs(a - target) < std::abs(b - target); });
    };
    const double fixed = along_alpha ? closest(betas, 1.0) : closest(alphas, 0.0);
    for (const auto& cell : grid.at("cells")) {
      const double a = cell.at("alpha").get<double>(), b = cell.at("beta").get<double>();
      if ((along_alpha ? b : a) != fixed) continue;
      const auto& v = cell.at("val").at(metric);
      if (v.is_null()) continue;
      auto& slot = acc[along_alpha ? a : b];
      slot.first += v.get<double>();
      slot.second += 1;
    }
  }
  for (const auto& [x, p] : acc) {
    s.x.push_back(x);
    s.y.push_back(p.first / p.second);
  }
  return s;
}

std::vector<Series> step_series(const json& runs) {
  std::vector<std::string> order;
  std::map<std::string, std::map<std::size_t, std::pair<double, int>>> acc;
  for (const auto& run : runs) {
    for (const auto& st : run.at("steps")) {
      const auto step = st.at("step").get<std::size_t>();
      for (const auto& r : st.at("reports")) {
        const std::string op = r.at("operating_point").get<std::string>();
        if (op != "-" && op != "best-balanced") continue;
        const std::string name = r.at("method").get<std::string>();
        if (!acc.count(name)) order.push_back(name);
        if (r.at("Acc_all").is_null()) continue;
        auto& slot = acc[name][step];
        slot.first += r.at("Acc_all").get<double>();
        slot.second += 1;
      }
    }
  }
  std::vector<Series> out;
  for (const auto& name : order) {
    Series s;
    s.name = name;
    for (const auto& [step, p] : acc[name]) {
      s.x.push_back(static_cast<double>(step));
      s.y.push_back(p.first / p.second);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

RunArtifacts render_report(const std::filesystem::path& dir) {
  const auto report_path = dir / "report.json";
  if (!std::filesystem::exists(report_path)) throw ReportError("missing artifacts in " + dir.string() + ": report.json");
  json report;
  try {
    report = json::parse(std::ifstream(report_path));
  } catch (const json::exception& e) {
    throw ReportError("report.json: " + std::string(e.what()));
  }
  std::vector<std::string> missing;
  for (const char* key : {"runs", "summary", "config"})
    if (!report.contains(key)) missing.push_back(std::string("report.json#") + key);
  if (!missing.empty()) {
    std::string msg = "missing artifacts in " + dir.string() + ":";
    for (const auto& m : missing) msg += " " + m;
    throw ReportError(msg);
  }

  RunArtifacts art;
  art.report = report_path;
  art.csv = dir / "metrics.csv";
  write_text_file(art.csv, summary_csv(report.at("summary")));

  const auto& runs = report.at("runs");
  const auto steps = step_series(runs);
  if (!steps.empty()) {
    art.plots.push_back(dir / "steps.svg");
    write_text_file(art.plots.back(), line_plot_svg("Accuracy per incremental step (seed mean)", "step",
                                                    "Acc_all (test)", steps));
  }
  std::vector<Series> alpha, beta;
  for (const char* metric : {"Acc_all", "Acc_base", "Acc_novel"}) {
    auto a = sweep_series(runs, metric, true);
    auto b = sweep_series(runs, metric, false);
    if (!a.x.empty()) alpha.push_back(std::move(a));
    if (!b.x.empty()) beta.push_back(std::move(b));
  }
  if (!alpha.empty()) {
    art.plots.push_back(dir / "alpha_sweep.svg");
    write_text_file(art.plots.back(), line_plot_svg("Fusion sweep over alpha (beta near 1)", "alpha",
                                                    "validation accuracy", alpha));
  }
  if (!beta.empty()) {
    art.plots.push_back(dir / "beta_sweep.svg");
    write_text_file(art.plots.back(), line_plot_svg("Fusion sweep over beta (alpha near 0)", "beta",
                                                    "validation accuracy", beta));
  }
  return art;
}

RunArtifacts run_to_directory(const ExperimentConfig& c, std::size_t threads) {
  c.validate();
  const auto& dir = c.output_dir;
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> checkpoints;
  std::mutex ck_mu;
  RunOptions opts;
  opts.threads = threads;
  if (c.save_checkpoints) {
    opts.on_step = [&](const SeedRun& run, std::size_t step, const ModelBundle& m, const FusionHead* f) {
      const auto path = dir / "checkpoints" / ("seed" + std::to_string(run.seed) + "_step" + std::to_string(step) + ".cilm");
      save_checkpoint(path, m, f);
      std::lock_guard lock(ck_mu);
      checkpoints.push_back(path);
    };
  }
  const auto runs = run_experiment(c, opts);
  write_text_file(dir / "report.json", build_report(c, runs).dump(2) + "\n");
  RunArtifacts art = render_report(dir);
  std::sort(checkpoints.begin(), checkpoints.end());
  art.checkpoints = std::move(checkpoints);

  json errors = json::array();
  for (const auto& run : runs)
    if (run.error) errors.push_back({{"seed", run.seed}, {"error", *run.error}});
  const auto err_path = dir / "errors.json";
  if (!errors.empty()) {
    write_text_file(err_path, json({{"errors", errors}}).dump(2) + "\n");
    art.error_manifest = err_path;
  } else if (std::filesystem::exists(err_path)) {
    std::filesystem::remove(err_path);
  }
  return art;
}

}  // namespace cilfuse
