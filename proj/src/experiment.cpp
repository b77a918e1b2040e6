#include "revrec/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "revrec/error.hpp"
#include "revrec/hash.hpp"
#include "revrec/version.hpp"

namespace revrec {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view why) {
  throw ConfigError("config key '" + std::string(key) + "': " + std::string(why) + " (got '" +
                    std::string(value) + "')");
}

template <typename T>
T parse_uint(std::string_view key, std::string_view v) {
  v = trim(v);
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a non-negative integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  v = trim(v);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  v = trim(v);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad(key, v, "expected true or false");
}

std::vector<std::string_view> split_list(std::string_view key, std::string_view v) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = v.find(',', start);
    const auto part = trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (part.empty()) bad(key, v, "empty list element");
    out.push_back(part);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T, typename F>
std::vector<T> parse_list(std::string_view key, std::string_view v, F f) {
  std::vector<T> out;
  for (auto part : split_list(key, v)) out.push_back(f(key, part));
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F f) {
  std::string out;
  for (std::size_t j = 0; j < xs.size(); ++j) out += (j ? "," : "") + f(xs[j]);
  return out;
}

template <typename T>
std::vector<T> every_other(const std::vector<T>& v) {
  std::vector<T> out;
  for (std::size_t j = 0; j < v.size(); j += 2) out.push_back(v[j]);
  return out;
}

}  // namespace

GridAxes GridAxes::reduced() const {
  return {every_other(latent_dims), every_other(l2), every_other(dropout)};
}

std::vector<std::string> config_keys() {
  return {"schema",         "dataset",           "dataset_name",       "field.user",
          "field.item",     "field.rating",      "field.review",       "field.timestamp",
          "scale_min",      "scale_max",         "kcore",              "mask",
          "models",         "latent_dims",       "l2",                 "dropout",
          "seeds",          "learning_rate",     "batch_size",         "max_epochs",
          "patience",       "hft_mu",            "hft_resample_period", "cnn_filters",
          "cnn_width",      "attention_dim",     "finetune_embeddings", "max_words",
          "concat_len",     "length_percentile", "embedding_dim",      "skipgram_window",
          "skipgram_negatives", "skipgram_epochs", "split_seed",       "mask_seed",
          "hr_seed",        "retune",            "output",             "cache",
          "jobs"};
}

void ExperimentConfig::set(std::string_view key, std::string_view raw) {
  const std::string_view v = trim(raw);
  const auto u = [&](std::string_view k, std::string_view x) { return parse_uint<std::size_t>(k, x); };
  const auto u64 = [&](std::string_view k, std::string_view x) { return parse_uint<std::uint64_t>(k, x); };
  if (key == "schema") {
    if (u(key, v) != static_cast<std::size_t>(kConfigSchema)) bad(key, v, "unsupported schema version");
  } else if (key == "dataset") {
    dataset = std::string(v);
  } else if (key == "dataset_name") {
    dataset_name = std::string(v);
  } else if (key == "field.user") {
    fields.user = std::string(v);
  } else if (key == "field.item") {
    fields.item = std::string(v);
  } else if (key == "field.rating") {
    fields.rating = std::string(v);
  } else if (key == "field.review") {
    fields.review = std::string(v);
  } else if (key == "field.timestamp") {
    fields.timestamp = std::string(v);
  } else if (key == "scale_min") {
    scale.min = parse_double(key, v);
  } else if (key == "scale_max") {
    scale.max = parse_double(key, v);
  } else if (key == "kcore") {
    k_cores = parse_list<std::size_t>(key, v, u);
  } else if (key == "mask") {
    masks = parse_list<double>(key, v, parse_double);
  } else if (key == "models") {
    models.clear();
    for (auto part : split_list(key, v)) models.push_back(parse_model_kind(part));
  } else if (key == "latent_dims") {
    grid.latent_dims = parse_list<std::size_t>(key, v, u);
  } else if (key == "l2") {
    grid.l2 = parse_list<double>(key, v, parse_double);
  } else if (key == "dropout") {
    grid.dropout = parse_list<double>(key, v, parse_double);
  } else if (key == "seeds") {
    seeds = parse_list<std::uint64_t>(key, v, u64);
  } else if (key == "learning_rate") {
    train.learning_rate = parse_double(key, v);
  } else if (key == "batch_size") {
    train.batch_size = u(key, v);
  } else if (key == "max_epochs") {
    train.max_epochs = u(key, v);
  } else if (key == "patience") {
    train.patience = u(key, v);
  } else if (key == "hft_mu") {
    train.hft_mu = parse_double(key, v);
  } else if (key == "hft_resample_period") {
    train.hft_resample_period = u(key, v);
  } else if (key == "cnn_filters") {
    train.cnn_filters = u(key, v);
  } else if (key == "cnn_width") {
    train.cnn_width = u(key, v);
  } else if (key == "attention_dim") {
    train.attention_dim = u(key, v);
  } else if (key == "finetune_embeddings") {
    train.finetune_embeddings = parse_bool(key, v);
  } else if (key == "max_words") {
    text.max_words = u(key, v);
  } else if (key == "concat_len") {
    text.concat_len = u(key, v);
  } else if (key == "length_percentile") {
    text.percentile = parse_double(key, v);
  } else if (key == "embedding_dim") {
    text.skipgram.dim = u(key, v);
  } else if (key == "skipgram_window") {
    text.skipgram.window = u(key, v);
  } else if (key == "skipgram_negatives") {
    text.skipgram.negatives = u(key, v);
  } else if (key == "skipgram_epochs") {
    text.skipgram.epochs = u(key, v);
  } else if (key == "split_seed") {
    split_seed = u64(key, v);
  } else if (key == "mask_seed") {
    mask_seed = u64(key, v);
  } else if (key == "hr_seed") {
    hr_seed = u64(key, v);
  } else if (key == "retune") {
    if (v == "reduced") retune = Retune::Reduced;
    else if (v == "full") retune = Retune::Full;
    else if (v == "none") retune = Retune::None;
    else bad(key, v, "expected reduced, full or none");
  } else if (key == "output") {
    output = std::string(v);
  } else if (key == "cache") {
    cache = std::string(v);
  } else if (key == "jobs") {
    jobs = u(key, v);
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::items() const {
  const auto s = [](auto x) { return std::to_string(x); };
  const char* retune_name = retune == Retune::Reduced ? "reduced" : retune == Retune::Full ? "full" : "none";
  return {{"schema", s(kConfigSchema)},
          {"dataset", dataset.string()},
          {"dataset_name", dataset_name},
          {"field.user", fields.user},
          {"field.item", fields.item},
          {"field.rating", fields.rating},
          {"field.review", fields.review},
          {"field.timestamp", fields.timestamp},
          {"scale_min", fmt(scale.min)},
          {"scale_max", fmt(scale.max)},
          {"kcore", join(k_cores, s)},
          {"mask", join(masks, fmt)},
          {"models", join(models, [](ModelKind k) { return std::string(to_string(k)); })},
          {"latent_dims", join(grid.latent_dims, s)},
          {"l2", join(grid.l2, fmt)},
          {"dropout", join(grid.dropout, fmt)},
          {"seeds", join(seeds, s)},
          {"learning_rate", fmt(train.learning_rate)},
          {"batch_size", s(train.batch_size)},
          {"max_epochs", s(train.max_epochs)},
          {"patience", s(train.patience)},
          {"hft_mu", fmt(train.hft_mu)},
          {"hft_resample_period", s(train.hft_resample_period)},
          {"cnn_filters", s(train.cnn_filters)},
          {"cnn_width", s(train.cnn_width)},
          {"attention_dim", s(train.attention_dim)},
          {"finetune_embeddings", train.finetune_embeddings ? "true" : "false"},
          {"max_words", s(text.max_words)},
          {"concat_len", s(text.concat_len)},
          {"length_percentile", fmt(text.percentile)},
          {"embedding_dim", s(text.skipgram.dim)},
          {"skipgram_window", s(text.skipgram.window)},
          {"skipgram_negatives", s(text.skipgram.negatives)},
          {"skipgram_epochs", s(text.skipgram.epochs)},
          {"split_seed", s(split_seed)},
          {"mask_seed", s(mask_seed)},
          {"hr_seed", s(hr_seed)},
          {"retune", retune_name},
          {"output", output.string()},
          {"cache", cache.string()},
          {"jobs", s(jobs)}};
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& w) { throw ConfigError("invalid experiment config: " + w); };
  if (k_cores.empty() || masks.empty() || models.empty() || seeds.empty()) fail("lists must be non-empty");
  if (grid.latent_dims.empty() || grid.l2.empty() || grid.dropout.empty()) fail("grid axes must be non-empty");
  for (double m : masks) {
    if (!(m >= 0.0 && m <= 100.0)) fail("mask values must lie in [0, 100]");
  }
  if (!(scale.min < scale.max)) fail("scale_min must be below scale_max");
  if (jobs == 0) fail("jobs must be positive");
  if (text.skipgram.dim == 0) fail("embedding_dim must be positive");
  if (!(text.percentile > 0.0 && text.percentile <= 100.0)) fail("length_percentile must lie in (0, 100]");
  TrainConfig probe = train;
  for (std::size_t k : grid.latent_dims) {
    probe.latent_dim = k;
    for (double l2 : grid.l2) {
      probe.l2 = l2;
      for (double p : grid.dropout) {
        probe.dropout = p;
        probe.validate();
      }
    }
  }
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  bool seen_schema = false;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (!seen_schema && key != "schema") {
      throw ConfigError("config line " + std::to_string(lineno) + ": first key must be 'schema'");
    }
    seen_schema = true;
    cfg.set(key, line.substr(eq + 1));
  }
  if (!seen_schema) throw ConfigError("config: missing 'schema = 1'");
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------- grid search

std::vector<TrainConfig> grid_points(ModelKind kind, const GridAxes& axes, const TrainConfig& base) {
  if (axes.latent_dims.empty() || axes.l2.empty() || axes.dropout.empty()) {
    throw ConfigError("grid_search: every grid axis needs at least one value");
  }
  const std::vector<std::size_t> dims =
      uses_latent_dim(kind) ? axes.latent_dims : std::vector<std::size_t>{axes.latent_dims.front()};
  const std::vector<double> drops = uses_dropout(kind) ? axes.dropout : std::vector<double>{axes.dropout.front()};
  std::vector<TrainConfig> out;
  for (std::size_t k : dims) {
    for (double l2 : axes.l2) {
      for (double p : drops) {
        TrainConfig c = base;
        c.latent_dim = k;
        c.l2 = l2;
        c.dropout = p;
        out.push_back(c);
      }
    }
  }
  return out;
}

GridResult grid_search(ModelKind kind, const ModelContext& context, const GridAxes& axes,
                       const TrainConfig& base, std::size_t jobs) {
  const auto points = grid_points(kind, axes, base);
  std::vector<Trial> trials(points.size());
  std::vector<std::unique_ptr<Model>> models(points.size());
  std::vector<std::exception_ptr> errors(points.size());
  std::vector<std::pair<std::size_t, std::size_t>> where(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < points.size(); j = next++) {
      trials[j].config = points[j];
      try {
        TrainedModel t = train(kind, context, points[j]);
        trials[j].ok = true;
        trials[j].val_mse = t.result.best_val_mse;
        trials[j].epochs = t.result.epochs_run;
        models[j] = std::move(t.model);
      } catch (const DivergenceError& e) {
        trials[j].error = e.what();
        where[j] = {e.epoch(), e.batch()};
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, points.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::optional<std::size_t> best;
  auto key = [&](std::size_t j) {
    const TrainConfig& c = trials[j].config;
    return std::make_tuple(trials[j].val_mse, c.latent_dim, c.l2, c.dropout);
  };
  for (std::size_t j = 0; j < trials.size(); ++j) {
    if (trials[j].ok && (!best || key(j) < key(*best))) best = j;
  }
  if (!best) {
    std::string msg = "grid search for " + std::string(to_string(kind)) + ": every trial diverged";
    for (const Trial& t : trials) msg += "\n  " + to_json(t.config) + ": " + t.error;
    throw DivergenceError(where.front().first, where.front().second, msg);
  }
  GridResult res;
  res.best_config = trials[*best].config;
  res.best.model = std::move(models[*best]);
  res.best.result.best_val_mse = trials[*best].val_mse;
  res.best.result.epochs_run = trials[*best].epochs;
  res.trials = std::move(trials);
  return res;
}

FitFn grid_fit(const GridAxes& axes, const TrainConfig& base, std::size_t jobs) {
  return [axes, base, jobs](ModelKind kind, const ModelContext& ctx) {
    return std::move(grid_search(kind, ctx, axes, base, jobs).best);
  };
}

// ---------------------------------------------------------------- prep cache

namespace {

struct TextNeeds {
  bool any = false;
  bool embeddings = false;
  bool concat = false;
  bool per_review = false;
};

TextNeeds text_needs(std::span<const ModelKind> kinds) {
  TextNeeds n;
  for (ModelKind k : kinds) {
    if (!uses_text(k)) continue;
    n.any = true;
    if (auto layout = document_layout(k)) {
      n.embeddings = true;
      (*layout == DocLayout::Concat ? n.concat : n.per_review) = true;
    }
  }
  return n;
}

nlohmann::json report_json(const LoadReport& r) {
  return {{"loaded", r.loaded},
          {"skipped_missing_field", r.skipped_missing_field},
          {"rejected_out_of_scale", r.rejected_out_of_scale},
          {"malformed", r.malformed}};
}

LoadReport report_from(const nlohmann::json& j) {
  LoadReport r;
  r.loaded = j.at("loaded").get<std::size_t>();
  r.skipped_missing_field = j.at("skipped_missing_field").get<std::size_t>();
  r.rejected_out_of_scale = j.at("rejected_out_of_scale").get<std::size_t>();
  r.malformed = j.at("malformed").get<std::size_t>();
  return r;
}

}  // namespace

PreparedData prepare(const ExperimentConfig& config, std::size_t k, double mask_percent,
                     std::span<const ModelKind> kinds) {
  const TextNeeds needs = text_needs(kinds);
  const auto& t = config.text;
  Sha256 h;
  h.update("revrec-prep-v1").update(kVersion);
  h.update(sha256_file(config.dataset));
  for (const auto* f : {&config.fields.user, &config.fields.item, &config.fields.rating,
                        &config.fields.review, &config.fields.timestamp}) {
    h.update(*f).update_u64(f->size());
  }
  h.update_f64(config.scale.min).update_f64(config.scale.max);
  h.update_u64(k).update_f64(mask_percent).update_u64(config.split_seed).update_u64(config.mask_seed);
  h.update_u64(needs.any).update_u64(needs.embeddings).update_u64(needs.concat).update_u64(needs.per_review);
  h.update_u64(t.max_words).update_u64(t.concat_len).update_f64(t.percentile);
  h.update_u64(t.skipgram.dim).update_u64(t.skipgram.window).update_u64(t.skipgram.negatives);
  h.update_u64(t.skipgram.epochs).update_f64(t.skipgram.learning_rate).update_u64(t.skipgram.seed);

  PreparedData out;
  out.cache_key = h.hex();
  out.cache_path = config.cache_dir() / out.cache_key;
  const auto& dir = out.cache_path;

  if (std::filesystem::exists(dir / "complete")) {
    out.cache_hit = true;
    std::ifstream meta_in(dir / "meta.json");
    out.load_report = report_from(nlohmann::json::parse(meta_in).at("load_report"));
    auto data = std::make_shared<const Dataset>(load_dataset(dir / "dataset.tsv"));
    out.split = std::make_shared<const SplitDataset>(load_split(data, dir / "split.txt"));
    if (needs.any) {
      auto text = std::make_shared<TextArtifacts>();
      text->vocab = Vocab::load(dir / "vocab.txt");
      text->ids = encode_all(tokenize_all(*data), text->vocab);
      text->caps = length_caps(*out.split, text->ids, t.percentile);
      if (needs.embeddings) text->embeddings = EmbeddingTable::load(dir / "embeddings.bin");
      if (needs.concat) text->concat = load_documents(dir / "concat.bin");
      if (needs.per_review) text->per_review = load_documents(dir / "per_review.bin");
      out.text = std::move(text);
    }
    return out;
  }

  LoadResult loaded = load_interactions(config.dataset, config.fields, config.scale);
  out.load_report = loaded.report;
  auto data = std::make_shared<const Dataset>(k == 0 ? std::move(loaded.dataset) : k_core(loaded.dataset, k));
  SplitDataset s = split(data, config.split_seed);
  if (mask_percent > 0.0) s = mask_reviews(s, mask_percent, config.mask_seed);
  out.split = std::make_shared<const SplitDataset>(std::move(s));
  out.text = prepare_text_for(*out.split, kinds, t);

  // Build in a private directory and rename, so readers never see a partial entry.
  const auto tmp = config.cache_dir() /
                   (out.cache_key + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())));
  std::filesystem::remove_all(tmp);
  std::filesystem::create_directories(tmp);
  save_dataset(out.split->dataset(), tmp / "dataset.tsv");
  save_split(*out.split, tmp / "split.txt");
  if (out.text) {
    out.text->vocab.save(tmp / "vocab.txt");
    if (needs.embeddings) out.text->embeddings.save(tmp / "embeddings.bin");
    if (needs.concat) save_documents(out.text->concat, tmp / "concat.bin");
    if (needs.per_review) save_documents(out.text->per_review, tmp / "per_review.bin");
  }
  {
    std::ofstream meta(tmp / "meta.json");
    meta << nlohmann::json{{"key", out.cache_key},
                           {"source", config.dataset.string()},
                           {"k", k},
                           {"mask", mask_percent},
                           {"split_seed", config.split_seed},
                           {"load_report", report_json(out.load_report)}}
                .dump(2)
         << '\n';
    std::ofstream(tmp / "complete") << out.cache_key << '\n';
  }
  std::error_code ec;
  if (!std::filesystem::exists(dir / "complete")) std::filesystem::remove_all(dir, ec);  // stale partial entry
  std::filesystem::rename(tmp, dir, ec);
  if (ec) std::filesystem::remove_all(tmp);  // another process finished first
  return out;
}

}  // namespace revrec
