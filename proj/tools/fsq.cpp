// SPDX-License-Identifier: Apache-2.0
// Command-line front end: data generation, training, protocol runs, reports.
#include <omp.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "fsq/cues.hpp"
#include "fsq/error.hpp"
#include "fsq/harness.hpp"

namespace fs = std::filesystem;
using namespace fsq;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
  auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
  if (needs_config) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--out", c.out, "output path");
  cmd->add_option("--threads", c.threads, "worker threads for task-level parallelism")
      ->check(CLI::NonNegativeNumber);
}

harness::ExperimentConfig config_of(const Common& c) {
  auto cfg = harness::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path out_or(const Common& c, const fs::path& fallback) {
  return c.out.empty() ? fallback : fs::path(c.out);
}

void write_rows(const fs::path& path, const std::vector<harness::ResultRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  harness::write_csv(out, rows);
  if (!out) throw DataError("cannot write " + path.string());
  spdlog::info("wrote {}", path.string());
}

model::Params base_params(const harness::ExperimentConfig& cfg, const std::string& checkpoint,
                          const data::Dataset& ds) {
  const fs::path path = checkpoint.empty() ? cfg.output / "base.ckpt" : fs::path(checkpoint);
  if (fs::exists(path)) return model::load_checkpoint(path);
  if (!checkpoint.empty()) throw DataError("checkpoint " + path.string() + " not found");
  spdlog::info("no base checkpoint at {}; training one", path.string());
  auto p = harness::train_base(cfg, ds);
  fs::create_directories(path.parent_path());
  model::save_checkpoint(p, path);
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  harness::init_logging();
  CLI::App app{"Few-shot egocentric action recognition toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string checkpoint, mode, detections, features, id = "seq";
  int label = 0;
  std::vector<std::string> csvs;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset from a config");
  add_common(gen, common);
  auto* base = app.add_subcommand("train-base", "supervised training on the base classes");
  add_common(base, common);
  auto* knn = app.add_subcommand("eval-knn", "nearest-neighbour transfer on the novel classes");
  add_common(knn, common);
  knn->add_option("--checkpoint", checkpoint, "base model (default <output>/base.ckpt)");
  auto* ft = app.add_subcommand("fine-tune", "fine-tuning transfer on the novel classes");
  add_common(ft, common);
  ft->add_option("--checkpoint", checkpoint, "base model (default <output>/base.ckpt)");
  ft->add_option("--mode", mode, "logits_only or full (default from strategy)")
      ->check(CLI::IsMember({"logits_only", "full"}));
  auto* mt = app.add_subcommand("meta-train", "meta-learning on base-class episodes");
  add_common(mt, common);
  mt->add_option("--checkpoint", checkpoint, "starting model (default: base model or fresh)");
  auto* me = app.add_subcommand("meta-eval", "adapt-and-score on novel-class episodes");
  add_common(me, common);
  me->add_option("--checkpoint", checkpoint, "meta-trained model (default <output>/meta.ckpt)");
  auto* rep = app.add_subcommand("report", "strategy x feature-set table from result CSVs");
  rep->add_option("csv", csvs, "result files")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", common.out, "also write the comma-separated table here");
  auto* run = app.add_subcommand("run", "whole pipeline for the configured strategy");
  add_common(run, common);
  auto* asmb = app.add_subcommand("assemble", "build a feature sequence from detections");
  asmb->add_option("--detections", detections, "detections, one JSON object per line")
      ->required()->check(CLI::ExistingFile);
  asmb->add_option("--features", features, "feature store directory")
      ->required()->check(CLI::ExistingDirectory);
  asmb->add_option("--label", label, "class id of the sequence");
  asmb->add_option("--id", id, "sequence id");
  asmb->add_option("--out", common.out, "dataset directory to write")->required();

  CLI11_PARSE(app, argc, argv);
  if (common.threads > 0) omp_set_num_threads(common.threads);

  try {
    if (*gen) {
      const auto cfg = config_of(common);
      auto spec = cfg.synthetic;
      if (common.seed) spec.seed = *common.seed;
      const auto ds = data::generate_synthetic(spec);
      const fs::path dir = out_or(common, cfg.output / "data");
      data::save_dataset(ds, dir);
      spdlog::info("wrote {} sequences to {}", ds.sequences.size(), dir.string());
    } else if (*base) {
      const auto cfg = config_of(common);
      const auto p = harness::train_base(cfg, harness::load_dataset(cfg));
      const fs::path path = out_or(common, cfg.output / "base.ckpt");
      fs::create_directories(fs::absolute(path).parent_path());
      model::save_checkpoint(p, path);
      spdlog::info("wrote {}", path.string());
    } else if (*knn) {
      auto cfg = config_of(common);
      cfg.strategy = harness::Strategy::knn;
      const auto ds = harness::load_dataset(cfg);
      const auto row = harness::eval_knn(cfg, base_params(cfg, checkpoint, ds), ds);
      write_rows(out_or(common, cfg.output / "knn.csv"), {row});
    } else if (*ft) {
      auto cfg = config_of(common);
      if (mode == "full") cfg.strategy = harness::Strategy::ft_full;
      else if (mode == "logits_only" || cfg.strategy != harness::Strategy::ft_full)
        cfg.strategy = harness::Strategy::ft_logits;
      const auto ds = harness::load_dataset(cfg);
      const auto row = harness::eval_fine_tune(cfg, base_params(cfg, checkpoint, ds), ds);
      write_rows(out_or(common, cfg.output / (std::string(harness::strategy_name(cfg.strategy)) + ".csv")),
                 {row});
    } else if (*mt) {
      const auto cfg = config_of(common);
      const auto ds = harness::load_dataset(cfg);
      std::optional<model::Params> start;
      if (!checkpoint.empty()) start = model::load_checkpoint(checkpoint);
      else if (cfg.meta_from_base) start = base_params(cfg, "", ds);
      const auto p = harness::meta_train(cfg, start, ds);
      const fs::path path = out_or(common, cfg.output / "meta.ckpt");
      fs::create_directories(fs::absolute(path).parent_path());
      model::save_checkpoint(p, path);
      spdlog::info("wrote {}", path.string());
    } else if (*me) {
      const auto cfg = config_of(common);
      const auto ds = harness::load_dataset(cfg);
      const auto p =
          model::load_checkpoint(checkpoint.empty() ? cfg.output / "meta.ckpt" : fs::path(checkpoint));
      const auto row = harness::meta_eval(cfg, p, ds);
      write_rows(out_or(common, cfg.output / (std::string(harness::strategy_name(cfg.strategy)) + ".csv")),
                 {row});
    } else if (*rep) {
      std::vector<harness::ResultRow> rows;
      for (const auto& path : csvs) {
        auto r = harness::load_csv(path);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      const auto report = harness::make_report(rows);
      std::cout << report.text;
      if (!common.out.empty()) {
        std::ofstream(common.out, std::ios::binary) << report.csv;
        spdlog::info("wrote {}", common.out);
      }
    } else if (*run) {
      auto cfg = config_of(common);
      if (!common.out.empty()) cfg.output = common.out;
      harness::run(cfg);
    } else if (*asmb) {
      const auto frames = cues::load_detections(detections);
      const auto store = cues::FeatureStore::load(features);
      cues::CueConfig cc;
      cc.enabled.clear();
      for (CueKind k : kAllCueKinds)
        if (k == CueKind::traj || store.has(k)) cc.enabled.push_back(k);
      auto seq = cues::assemble_sequence(frames, store.providers(), cc);
      seq.id = id;
      seq.label = label;
      data::Dataset ds{{{label, "class" + std::to_string(label), data::Split::novel}}, {seq}};
      data::save_dataset(ds, common.out);
      spdlog::info("assembled {} frames x {} features ({})", seq.frames(), seq.dim(),
                   layout_string(seq.layout));
    }
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    spdlog::error("training diverged: {}", e.what());
    return 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
