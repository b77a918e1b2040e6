// revrec: prepare datasets, train and evaluate rating predictors, run the
// density and masking sweeps, and summarise report CSVs.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error (including
// checkpoint/data hash mismatches), 3 training divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>

#include "revrec/error.hpp"
#include "revrec/eval.hpp"
#include "revrec/experiment.hpp"
#include "revrec/synthetic.hpp"
#include "revrec/version.hpp"

namespace {

using namespace revrec;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kDiverged = 3 };

struct Globals {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

ExperimentConfig resolve(const Globals& g) {
  ExperimentConfig cfg = g.config_path.empty() ? ExperimentConfig{} : load_config(g.config_path);
  for (const auto& [k, v] : g.overrides) cfg.set(k, v);
  if (cfg.dataset_name.empty()) cfg.dataset_name = cfg.dataset.stem().string();
  cfg.validate();
  return cfg;
}

void require_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.empty()) throw ConfigError("no dataset given (set 'dataset' or pass --dataset)");
}

SweepOptions sweep_options(const ExperimentConfig& cfg) {
  SweepOptions o;
  o.dataset_name = cfg.dataset_name;
  o.split_seed = cfg.split_seed;
  o.mask_seed = cfg.mask_seed;
  o.hr_seed = cfg.hr_seed;
  o.text = cfg.text;
  return o;
}

void write_outputs(const ExperimentConfig& cfg, std::span<const MetricReport> reports,
                   const std::string& command) {
  std::filesystem::create_directories(cfg.output);
  std::ofstream rep(cfg.output / "report.csv");
  write_report_csv(rep, reports);
  std::ofstream buckets(cfg.output / "buckets.csv");
  write_bucket_csv(buckets, reports);
  write_manifest(cfg.output / "manifest.json", reports, command);
  if (!rep || !buckets) throw IoError("cannot write reports under " + cfg.output.string());
  write_report_csv(std::cout, reports);
}

int cmd_prep(const ExperimentConfig& cfg) {
  require_dataset(cfg);
  for (std::size_t k : cfg.k_cores) {
    for (double m : cfg.masks) {
      const PreparedData p = prepare(cfg, k, m, cfg.models);
      std::printf("k=%zu mask=%g %s %s interactions=%zu skipped=%zu rejected=%zu malformed=%zu\n", k, m,
                  p.cache_hit ? "hit" : "built", p.cache_path.string().c_str(), p.split->dataset().size(),
                  p.load_report.skipped_missing_field, p.load_report.rejected_out_of_scale,
                  p.load_report.malformed);
    }
  }
  return kOk;
}

CheckpointManifest manifest_for(const Model& m, const PreparedData& p) {
  CheckpointManifest man;
  man.kind = m.kind();
  man.config = m.config();
  man.dataset_hash = p.split->dataset().fingerprint();
  man.split_hash = split_fingerprint(*p.split);
  man.vocab_hash = p.text ? p.text->vocab.fingerprint() : "";
  return man;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& model_name, std::string checkpoint) {
  require_dataset(cfg);
  const ModelKind kind = parse_model_kind(model_name);
  const ModelKind kinds[] = {kind};
  const PreparedData p = prepare(cfg, cfg.k_cores.front(), cfg.masks.front(), kinds);
  TrainConfig base = cfg.train;
  base.seed = cfg.seeds.front();
  GridResult g = grid_search(kind, {p.split, p.text}, cfg.grid, base, cfg.jobs);
  std::printf("trial,latent_dim,l2,dropout,val_mse,epochs,status\n");
  for (const Trial& t : g.trials) {
    std::printf("%s,%zu,%g,%g,%.6f,%zu,%s\n", config_id(t.config).c_str(), t.config.latent_dim, t.config.l2,
                t.config.dropout, t.val_mse, t.epochs, t.ok ? "ok" : t.error.c_str());
  }
  Model& best = *g.best.model;
  const auto test = predict_rows(best, p.split->test);
  std::vector<double> truth;
  for (std::size_t r : p.split->test) truth.push_back(p.split->dataset()[r].rating);
  std::printf("selected %s latent_dim=%zu l2=%g dropout=%g val_mse=%.6f test_mse=%.6f\n",
              config_id(g.best_config).c_str(), g.best_config.latent_dim, g.best_config.l2,
              g.best_config.dropout, g.best.result.best_val_mse, mse(test, truth));
  if (checkpoint.empty()) checkpoint = (cfg.output / "checkpoints" / model_name).string();
  save_checkpoint(checkpoint, best, manifest_for(best, p));
  std::printf("checkpoint %s\n", checkpoint.c_str());
  return kOk;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint) {
  require_dataset(cfg);
  const CheckpointManifest man = load_manifest(checkpoint);
  const ModelKind kinds[] = {man.kind};
  const PreparedData p = prepare(cfg, cfg.k_cores.front(), cfg.masks.front(), kinds);
  auto model = load_checkpoint(checkpoint, {p.split, p.text});
  ReportMeta meta;
  meta.dataset = cfg.dataset_name;
  meta.dataset_hash = p.split->dataset().fingerprint();
  meta.kind = man.kind;
  meta.config = man.config;
  meta.k_core = cfg.k_cores.front();
  meta.mask_percent = cfg.masks.front();
  meta.split_seed = cfg.split_seed;
  const MetricReport rep = evaluate(*model, meta, cfg.hr_seed);
  std::filesystem::create_directories(cfg.output);
  std::ofstream out(cfg.output / "eval.csv");
  write_report_csv(out, std::span(&rep, 1));
  write_report_csv(std::cout, std::span(&rep, 1));
  return kOk;
}

FitFn sweep_fit(const ExperimentConfig& cfg, bool density) {
  if (!density || cfg.retune == Retune::Full) return grid_fit(cfg.grid, cfg.train, cfg.jobs);
  if (cfg.retune == Retune::Reduced) return grid_fit(cfg.grid.reduced(), cfg.train, cfg.jobs);
  // Retune::None: tune on the first point (k = 0), then reuse its winners.
  auto chosen = std::make_shared<std::map<ModelKind, TrainConfig>>();
  const GridAxes axes = cfg.grid;
  const TrainConfig base = cfg.train;
  const std::size_t jobs = cfg.jobs;
  return [chosen, axes, base, jobs](ModelKind kind, const ModelContext& ctx) {
    if (auto it = chosen->find(kind); it != chosen->end()) return train(kind, ctx, it->second);
    GridResult g = grid_search(kind, ctx, axes, base, jobs);
    (*chosen)[kind] = g.best_config;
    return std::move(g.best);
  };
}

int cmd_sweep(ExperimentConfig cfg, const std::string& axis) {
  require_dataset(cfg);
  std::vector<MetricReport> all;
  for (std::uint64_t seed : cfg.seeds) {
    cfg.train.seed = seed;
    const SweepOptions opts = sweep_options(cfg);
    if (axis == "k") {
      LoadResult loaded = load_interactions(cfg.dataset, cfg.fields, cfg.scale);
      auto data = std::make_shared<const Dataset>(std::move(loaded.dataset));
      const auto res = density_sweep(data, cfg.models, sweep_fit(cfg, true), opts);
      for (const auto& pt : res.points) {
        std::fprintf(stderr, "k=%g reviews=%zu users=%zu items=%zu\n", pt.value, pt.stats.reviews,
                     pt.stats.users, pt.stats.items);
      }
      const auto rows = flatten(res);
      all.insert(all.end(), rows.begin(), rows.end());
    } else {
      const std::vector<std::size_t> ks =
          axis == "mask" ? std::vector<std::size_t>{cfg.k_cores.front()} : cfg.k_cores;
      for (std::size_t k : ks) {
        const PreparedData p = prepare(cfg, k, 0.0, {});
        const auto res = mask_sweep(*p.split, cfg.models, cfg.masks, sweep_fit(cfg, false), opts);
        for (MetricReport r : flatten(res)) {
          r.meta.k_core = k;
          all.push_back(std::move(r));
        }
      }
    }
  }
  write_outputs(cfg, all, "sweep --axis " + axis);
  return kOk;
}

int cmd_report(const ExperimentConfig& cfg, std::string input) {
  if (input.empty()) input = (cfg.output / "report.csv").string();
  std::ifstream in(input);
  if (!in) throw IoError("cannot open " + input);
  const auto rows = read_report_csv(in);
  std::filesystem::create_directories(cfg.output);
  std::ofstream mse_out(cfg.output / "table_mse.csv");
  std::ofstream rank_out(cfg.output / "table_ranking.csv");
  write_mse_table(mse_out, rows);
  write_ranking_table(rank_out, rows);
  write_mse_table(std::cout, rows);
  std::cout << '\n';
  write_ranking_table(std::cout, rows);
  return kOk;
}

int cmd_synth(const PlantedOptions& o, const std::string& out) {
  const PlantedData d = make_planted(o);
  write_ndjson(*d.dataset, out);
  std::printf("wrote %zu interactions (%zu users, %zu items) to %s\n", d.dataset->size(),
              d.dataset->num_users(), d.dataset->num_items(), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Review-aware rating prediction benchmarks"};
  app.set_version_flag("--version", std::string(revrec::kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("-c,--config", g.config_path, "Experiment config file (key = value, schema = 1)");
  for (const std::string& key : config_keys()) {
    if (key == "schema") continue;
    app.add_option_function<std::string>(
        "--" + key, [&g, key](const std::string& v) { g.overrides[key] = v; },
        "Overrides config key '" + key + "'");
  }

  auto* prep = app.add_subcommand("prep", "Build and cache datasets, splits, vocabularies and documents");
  auto* train_cmd = app.add_subcommand("train", "Grid-search one model and save the best checkpoint");
  std::string model_name, checkpoint;
  train_cmd->add_option("-m,--model", model_name, "bias, mf, hft, neumf, deepconn, deepconn++ or narre")->required();
  train_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory (default <output>/checkpoints/<model>)");
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on the test partition");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  auto* sweep = app.add_subcommand("sweep", "Run density (k), masking or per-k/mask grid experiments");
  std::string axis = "grid";
  sweep->add_option("--axis", axis, "k, mask or grid")->check(CLI::IsMember({"k", "mask", "grid"}));
  auto* report = app.add_subcommand("report", "Summarise a report CSV into MSE and MSE/HR@1 tables");
  std::string input;
  report->add_option("--input", input, "Report CSV (default <output>/report.csv)");
  auto* synth = app.add_subcommand("synth", "Write a planted-factor synthetic dataset as NDJSON");
  PlantedOptions planted;
  std::string synth_out;
  bool no_reviews = false;
  synth->add_option("--out", synth_out, "Output NDJSON path")->required();
  synth->add_option("--users", planted.users);
  synth->add_option("--items", planted.items);
  synth->add_option("--interactions", planted.interactions);
  synth->add_option("--latent", planted.latent_dim);
  synth->add_option("--noise", planted.noise);
  synth->add_option("--seed", planted.seed);
  synth->add_flag("--no-reviews", no_reviews);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (synth->parsed()) {
      planted.with_reviews = !no_reviews;
      return cmd_synth(planted, synth_out);
    }
    const ExperimentConfig cfg = resolve(g);
    if (prep->parsed()) return cmd_prep(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg, model_name, checkpoint);
    if (eval_cmd->parsed()) return cmd_eval(cfg, checkpoint);
    if (sweep->parsed()) return cmd_sweep(cfg, axis);
    if (report->parsed()) return cmd_report(cfg, input);
  } catch (const DivergenceError& e) {
    std::cerr << "revrec: diverged at epoch " << e.epoch() << ", batch " << e.batch() << ": " << e.what() << '\n';
    return kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "revrec: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "revrec: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
