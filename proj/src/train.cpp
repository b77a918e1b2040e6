#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "revrec/error.hpp"
#include "revrec/hash.hpp"
#include "revrec/models.hpp"

namespace revrec {

namespace {

constexpr std::uint64_t kShuffleStream = 0x53485546;
constexpr std::uint64_t kDropoutStream = 0x44524f50;

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEpsilon = 1e-8;

std::vector<std::vector<double>> snapshot(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& [_, t] : m.parameters()) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

void restore(const Model& m, const std::vector<std::vector<double>>& s) {
  std::size_t k = 0;
  for (auto [_, t] : m.parameters()) {
    std::copy(s[k].begin(), s[k].end(), t.values().begin());
    ++k;
  }
}

double validation_mse(Model& model) {
  const SplitDataset& s = *model.context().split;
  const auto pred = predict_rows(model, s.validation);
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double e = pred[k] - s.dataset()[s.validation[k]].rating;
    acc += e * e;
  }
  return s.validation.empty() ? 0.0 : acc / static_cast<double>(s.validation.size());
}

nlohmann::json config_json(const TrainConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"l2", c.l2},
          {"dropout", c.dropout},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"hft_mu", c.hft_mu},
          {"hft_resample_period", c.hft_resample_period},
          {"cnn_filters", c.cnn_filters},
          {"cnn_width", c.cnn_width},
          {"attention_dim", c.attention_dim},
          {"finetune_embeddings", c.finetune_embeddings}};
}

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.l2 = j.at("l2").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.hft_mu = j.at("hft_mu").get<double>();
  c.hft_resample_period = j.at("hft_resample_period").get<std::size_t>();
  c.cnn_filters = j.at("cnn_filters").get<std::size_t>();
  c.cnn_width = j.at("cnn_width").get<std::size_t>();
  c.attention_dim = j.at("attention_dim").get<std::size_t>();
  c.finetune_embeddings = j.at("finetune_embeddings").get<bool>();
  return c;
}

}  // namespace

std::string to_json(const TrainConfig& config) { return config_json(config).dump(); }

TrainConfig train_config_from_json(std::string_view json) {
  try {
    return config_from_json(nlohmann::json::parse(json));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("training config: ") + e.what());
  }
}

Adam::Adam(const Model& model, double learning_rate, double weight_decay)
    : lr_(learning_rate), weight_decay_(weight_decay) {
  for (const auto& [name, t] : model.parameters()) {
    slots_.push_back({t, std::vector<double>(t.size(), 0.0), std::vector<double>(t.size(), 0.0),
                      model.decays(name)});
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (Slot& s : slots_) {
    const bool has = s.param.has_grad();
    const auto grad = has ? s.param.grad() : std::span<double>{};
    auto w = s.param.values();
    const double wd = s.decay ? weight_decay_ : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = (has ? grad[j] : 0.0) + wd * w[j];
      s.m[j] = kBeta1 * s.m[j] + (1.0 - kBeta1) * g;
      s.v[j] = kBeta2 * s.v[j] + (1.0 - kBeta2) * g * g;
      w[j] -= lr_ * (s.m[j] / c1) / (std::sqrt(s.v[j] / c2) + kEpsilon);
    }
    // Parameters untouched by the next batch must not reuse this gradient.
    if (has) s.param.zero_grad();
  }
}

std::vector<double> predict_rows(Model& model, std::span<const std::size_t> rows) {
  const Dataset& d = model.context().dataset();
  std::vector<UserItem> pairs(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) pairs[k] = {d[rows[k]].user, d[rows[k]].item};
  auto pred = model.predict(pairs);
  for (double& p : pred) p = d.scale().clip(p);
  return pred;
}

TrainResult fit(Model& model) {
  const TrainConfig& cfg = model.config();
  std::vector<std::size_t> rows = model.context().split->train;
  if (rows.empty()) throw DataError("cannot train on an empty training partition");
  Adam opt(model, cfg.learning_rate, cfg.l2);

  TrainResult res;
  res.best_val_mse = std::numeric_limits<double>::infinity();
  auto best = snapshot(model);
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, {kShuffleStream, epoch}));
    shuffle(std::span<std::size_t>(rows), rng);
    std::size_t batch = 0;
    for (std::size_t lo = 0; lo < rows.size(); lo += cfg.batch_size, ++batch) {
      const auto chunk = std::span<const std::size_t>(rows).subspan(lo, std::min(cfg.batch_size, rows.size() - lo));
      ad::Tape tape({.training = true,
                     .record = true,
                     .dropout_seed = derive_seed(cfg.seed, {kDropoutStream, epoch, batch})});
      const ad::Tensor loss = model.loss(tape, chunk);
      const double v = loss.item();
      if (!std::isfinite(v)) {
        throw DivergenceError(epoch, batch, "training loss became " + std::to_string(v));
      }
      tape.backward(loss);
      opt.step();
    }
    model.end_epoch(epoch);
    const double mse = validation_mse(model);
    if (!std::isfinite(mse)) throw DivergenceError(epoch, batch, "validation MSE is not finite");
    res.val_mse.push_back(mse);
    res.epochs_run = epoch + 1;
    if (mse < res.best_val_mse) {
      res.best_val_mse = mse;
      res.best_epoch = epoch;
      best = snapshot(model);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  restore(model, best);
  return res;
}

TrainedModel train(ModelKind kind, ModelContext context, TrainConfig config) {
  TrainedModel t;
  t.model = make_model(kind, std::move(context), config);
  t.result = fit(*t.model);
  return t;
}

std::string split_fingerprint(const SplitDataset& split) {
  Sha256 h;
  h.update("revrec-split-v1");
  h.update(split.dataset().fingerprint());
  h.update_u64(split.seed);
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    h.update_u64(part->size());
    for (std::size_t r : *part) h.update_u64(r);
  }
  return h.hex();
}

void save_checkpoint(const std::filesystem::path& dir, Model& model, const CheckpointManifest& m) {
  std::filesystem::create_directories(dir);
  ad::save_parameters(dir / "params.bin", model.parameters());
  const nlohmann::json j = {{"format", "revrec-checkpoint"},
                            {"version", 1},
                            {"model", std::string(to_string(m.kind))},
                            {"config", config_json(m.config)},
                            {"dataset_hash", m.dataset_hash},
                            {"vocab_hash", m.vocab_hash},
                            {"split_hash", m.split_hash}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << '\n';
}

CheckpointManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "revrec-checkpoint" || j.at("version") != 1) {
      throw DataError(path.string() + ": unsupported checkpoint format");
    }
    CheckpointManifest m;
    m.kind = parse_model_kind(j.at("model").get<std::string>());
    m.config = config_from_json(j.at("config"));
    m.dataset_hash = j.at("dataset_hash").get<std::string>();
    m.vocab_hash = j.at("vocab_hash").get<std::string>();
    m.split_hash = j.at("split_hash").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& dir, ModelContext context) {
  const CheckpointManifest m = load_manifest(dir);
  auto check = [](const char* what, const std::string& expected, const std::string& actual) {
    if (expected != actual) {
      throw DataError(std::string(what) + " hash mismatch: checkpoint expects " + expected +
                      ", data has " + actual);
    }
  };
  check("dataset", m.dataset_hash, context.dataset().fingerprint());
  check("split", m.split_hash, split_fingerprint(*context.split));
  if (uses_text(m.kind)) {
    if (!context.text) throw ConfigError("checkpoint model needs text artifacts");
    check("vocabulary", m.vocab_hash, context.text->vocab.fingerprint());
  }
  auto model = make_model(m.kind, std::move(context), m.config);
  model->load_state(ad::load_parameters(dir / "params.bin"));
  return model;
}

}  // namespace revrec
