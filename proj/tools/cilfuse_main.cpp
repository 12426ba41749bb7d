// cilfuse command-line front end.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cilfuse/errors.hpp"
#include "cilfuse/experiment.hpp"
#include "cilfuse/io.hpp"

using namespace cilfuse;

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPartial = 3;

struct CommonFlags {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
  std::vector<std::string> methods;
  std::string kind;
  std::string pooler;
  std::size_t threads = 0;
  bool no_checkpoints = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("-c,--config", f.config, "experiment config (JSON)");
  cmd->add_option("--seeds", f.seeds, "run seeds (override config)");
  cmd->add_option("-o,--output-dir", f.output_dir, "output directory (override config)");
  cmd->add_option("--methods", f.methods, "methods to run (override config)");
  cmd->add_option("--kind", f.kind, "scenario kind (override config)");
  cmd->add_option("--pooler", f.pooler, "knowledge pooler: max or avg (override config)");
  cmd->add_option("-j,--threads", f.threads, "worker threads (default: CILFUSE_THREADS or cores)");
  cmd->add_flag("--no-checkpoints", f.no_checkpoints, "skip writing model checkpoints");
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (!f.seeds.empty()) c.seeds = f.seeds;
  if (!f.output_dir.empty()) c.output_dir = f.output_dir;
  if (!f.methods.empty()) c.methods = f.methods;
  if (!f.kind.empty()) c.scenario.kind = scenario_kind_from_string(f.kind);
  if (!f.pooler.empty()) c.pooler = pooler_from_string(f.pooler);
  if (f.no_checkpoints) c.save_checkpoints = false;
  c.validate();
  return c;
}

std::size_t threads_of(const CommonFlags& f) { return f.threads ? f.threads : default_threads(); }

int report_artifacts(const RunArtifacts& art) {
  std::cout << "report:  " << art.report.string() << "\n"
            << "metrics: " << art.csv.string() << "\n";
  for (const auto& p : art.plots) std::cout << "plot:    " << p.string() << "\n";
  if (!art.checkpoints.empty()) std::cout << "checkpoints: " << art.checkpoints.size() << "\n";
  if (art.error_manifest) {
    std::cerr << "some runs failed; see " << art.error_manifest->string() << "\n";
    return kExitPartial;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cilfuse: class-incremental learning with feature augmentation and score fusion"};
  app.require_subcommand(1);

  CommonFlags gen_f, pre_f, run_f, grid_f;
  std::string gen_out = "scenario.json", pre_out = "model.cilm";
  std::uint64_t gen_seed = 0, pre_seed = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a scenario and write it as JSON");
  add_common(gen, gen_f);
  gen->add_option("--seed", gen_seed, "scenario seed");
  gen->add_option("--out", gen_out, "output scenario path");

  auto* pre = app.add_subcommand("pretrain", "pretrain the base model and write a checkpoint");
  add_common(pre, pre_f);
  pre->add_option("--seed", pre_seed, "run seed");
  pre->add_option("--out", pre_out, "output checkpoint path");

  auto* run = app.add_subcommand("run", "run the full pipeline and write reports");
  add_common(run, run_f);

  auto* grid = app.add_subcommand("grid", "run only the fusion grid search");
  add_common(grid, grid_f);

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "re-render metrics.csv and plots from report.json");
  rep->add_option("dir", report_dir, "run output directory")->required();

  std::string ing_file, ing_manifest, ing_out;
  std::size_t ing_base = 0, ing_val = 5, ing_test = 10;
  std::vector<std::size_t> ing_steps;
  std::uint64_t ing_seed = 0;
  auto* ing = app.add_subcommand("ingest", "validate a feature file and optionally build a scenario from it");
  ing->add_option("--file", ing_file, "feature file")->required();
  ing->add_option("--manifest", ing_manifest, "manifest JSON")->required();
  ing->add_option("--out", ing_out, "write a scenario JSON built from the features");
  ing->add_option("--n-base", ing_base, "number of base classes (with --out)");
  ing->add_option("--novel-steps", ing_steps, "novel classes per step (with --out)");
  ing->add_option("--per-class-val", ing_val, "validation rows per class");
  ing->add_option("--per-class-test", ing_test, "test rows per class");
  ing->add_option("--seed", ing_seed, "split seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const ExperimentConfig c = resolve(gen_f);
      const Scenario sc = make_scenario(c, gen_seed);
      write_text_file(gen_out, scenario_to_json(sc).dump() + "\n");
      std::cout << "wrote " << gen_out << " (" << sc.labels_up_to(sc.num_novel_steps()).size() << " classes, "
                << sc.steps.size() << " steps)\n";
    } else if (*pre) {
      const ExperimentConfig c = resolve(pre_f);
      const Scenario sc = make_scenario(c, pre_seed);
      Architecture a = c.arch;
      a.input_dim = sc.spec.dim;
      if (c.features) a.trunk_widths.clear();
      TrainLog log;
      const ModelBundle m = pretrain_base(sc.steps[0].train, a, c.schedules.pretrain, derive_seed(pre_seed, 0x01), &log);
      save_checkpoint(pre_out, m);
      std::cout << "wrote " << pre_out;
      if (!log.epoch_loss.empty()) std::cout << " (final loss " << log.epoch_loss.back() << ")";
      std::cout << "\n";
    } else if (*run) {
      return report_artifacts(run_to_directory(resolve(run_f), threads_of(run_f)));
    } else if (*grid) {
      ExperimentConfig c = resolve(grid_f);
      c.methods = {"fusion"};
      return report_artifacts(run_to_directory(c, threads_of(grid_f)));
    } else if (*rep) {
      return report_artifacts(render_report(report_dir));
    } else if (*ing) {
      const LabeledSet data = ingest_features(ing_file, ing_manifest);
      std::cout << "ok: " << data.size() << " rows, width " << data.dim() << ", " << data.labels().size()
                << " classes\n";
      if (!ing_out.empty()) {
        FeatureSource src;
        src.manifest = ing_manifest;
        src.file = ing_file;
        src.n_base_classes = ing_base;
        src.novel_steps = ing_steps;
        src.per_class_val = ing_val;
        src.per_class_test = ing_test;
        write_text_file(ing_out, scenario_to_json(scenario_from_features(data, src, ing_seed)).dump() + "\n");
        std::cout << "wrote " << ing_out << "\n";
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return 0;
}
