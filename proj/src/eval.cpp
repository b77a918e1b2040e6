#include "revrec/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "revrec/error.hpp"
#include "revrec/hash.hpp"
#include "revrec/random.hpp"
#include "revrec/version.hpp"

namespace revrec {

namespace {

constexpr std::uint64_t kHitRateStream = 0x48523140;
constexpr std::size_t kNegatives = 5;

// Shortest representation that reads back to the same double.
std::string num(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<double> test_truths(const SplitDataset& s) {
  std::vector<double> t(s.test.size());
  for (std::size_t k = 0; k < s.test.size(); ++k) t[k] = s.dataset()[s.test[k]].rating;
  return t;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

double mse(std::span<const double> preds, std::span<const double> truths) {
  if (preds.size() != truths.size()) {
    throw DataError("mse: " + std::to_string(preds.size()) + " predictions vs " +
                    std::to_string(truths.size()) + " truths");
  }
  if (preds.empty()) throw DataError("mse: empty input");
  double acc = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const double e = preds[k] - truths[k];
    acc += e * e;
  }
  return acc / static_cast<double>(preds.size());
}

HitRate hit_rate_at_1(const Scorer& scorer, const SplitDataset& split, std::uint64_t seed) {
  const Dataset& d = split.dataset();
  const double top = d.scale().max;
  std::map<std::uint32_t, std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>>> by_user;
  for (std::size_t r : split.test) {
    auto& [pos, neg] = by_user[d[r].user];
    (d[r].rating == top ? pos : neg).push_back(d[r].item);
  }
  Rng rng(derive_seed(seed, {kHitRateStream}));
  HitRate hr;
  std::vector<UserItem> candidates;
  for (auto& [user, lists] : by_user) {
    auto& [pos, neg] = lists;
    std::sort(pos.begin(), pos.end());
    pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    std::sort(neg.begin(), neg.end());
    neg.erase(std::unique(neg.begin(), neg.end()), neg.end());
    std::erase_if(neg, [&](std::uint32_t i) { return std::binary_search(pos.begin(), pos.end(), i); });
    if (pos.empty() || neg.size() < kNegatives) {
      ++hr.skipped;
      continue;
    }
    ++hr.eligible;
    candidates.push_back({user, pos[uniform_index(rng, pos.size())]});
    for (std::size_t j = 0; j < kNegatives; ++j) {
      std::swap(neg[j], neg[j + uniform_index(rng, neg.size() - j)]);
      candidates.push_back({user, neg[j]});
    }
  }
  if (hr.eligible == 0) return hr;
  const std::vector<double> scores = scorer(candidates);
  if (scores.size() != candidates.size()) throw Error("hit_rate_at_1: scorer returned wrong count");
  for (std::size_t u = 0; u < hr.eligible; ++u) {
    const double* s = scores.data() + u * (kNegatives + 1);
    bool hit = true;
    for (std::size_t j = 1; j <= kNegatives; ++j) hit = hit && s[0] > s[j];
    hr.hits += hit ? 1 : 0;
  }
  hr.value = static_cast<double>(hr.hits) / static_cast<double>(hr.eligible);
  return hr;
}

HitRate hit_rate_at_1(Model& model, std::uint64_t seed) {
  return hit_rate_at_1([&](std::span<const UserItem> pairs) { return model.predict(pairs); },
                       *model.context().split, seed);
}

std::vector<std::pair<std::size_t, std::size_t>> frequency_bucket_bounds(std::size_t max_freq) {
  std::vector<std::pair<std::size_t, std::size_t>> b = {{0, 0}, {1, 1}, {2, 2}};
  while (b.back().second < max_freq) {
    const std::size_t lo = b.back().second + 1;
    b.emplace_back(lo, 2 * (lo - 1));
  }
  while (b.size() > 1 && b.back().first > max_freq) b.pop_back();
  return b;
}

std::vector<FrequencyBucket> bucket_improvement(std::span<const double> model_preds,
                                                std::span<const double> bias_preds,
                                                const SplitDataset& split) {
  const Dataset& d = split.dataset();
  if (model_preds.size() != split.test.size() || bias_preds.size() != split.test.size()) {
    throw DataError("bucket_improvement: predictions must align with the test partition");
  }
  std::vector<std::size_t> freq(d.num_items(), 0);
  for (std::size_t r : split.train) ++freq[d[r].item];
  std::size_t max_freq = 0;
  for (std::size_t r : split.test) max_freq = std::max(max_freq, freq[d[r].item]);
  const auto bounds = frequency_bucket_bounds(max_freq);
  std::vector<FrequencyBucket> out(bounds.size());
  for (std::size_t b = 0; b < bounds.size(); ++b) std::tie(out[b].lo, out[b].hi) = bounds[b];
  auto bucket_of = [&](std::size_t f) {
    std::size_t b = 0;
    while (bounds[b].second < f) ++b;
    return b;
  };
  std::vector<char> counted(d.num_items(), 0);
  for (std::size_t k = 0; k < split.test.size(); ++k) {
    const Interaction& x = d[split.test[k]];
    FrequencyBucket& bk = out[bucket_of(freq[x.item])];
    if (!counted[x.item]) {
      counted[x.item] = 1;
      ++bk.items;
    }
    ++bk.interactions;
    bk.bias_mse += (bias_preds[k] - x.rating) * (bias_preds[k] - x.rating);
    bk.model_mse += (model_preds[k] - x.rating) * (model_preds[k] - x.rating);
  }
  for (FrequencyBucket& bk : out) {
    if (bk.interactions == 0) continue;
    bk.bias_mse /= static_cast<double>(bk.interactions);
    bk.model_mse /= static_cast<double>(bk.interactions);
    bk.improvement = bk.bias_mse - bk.model_mse;
  }
  return out;
}

MetricReport evaluate(Model& model, const ReportMeta& meta, std::uint64_t hr_seed,
                      std::span<const double> bias_test_preds) {
  const SplitDataset& s = *model.context().split;
  MetricReport rep;
  rep.meta = meta;
  rep.stats = stats(s.dataset());
  const auto val = predict_rows(model, s.validation);
  std::vector<double> val_truth(s.validation.size());
  for (std::size_t k = 0; k < s.validation.size(); ++k) val_truth[k] = s.dataset()[s.validation[k]].rating;
  rep.val_mse = mse(val, val_truth);
  const auto test = predict_rows(model, s.test);
  rep.test_mse = mse(test, test_truths(s));
  rep.hit_rate = hit_rate_at_1(model, hr_seed);
  if (!bias_test_preds.empty()) rep.buckets = bucket_improvement(test, bias_test_preds, s);
  return rep;
}

FitFn fixed_config(const TrainConfig& config) {
  return [config](ModelKind kind, const ModelContext& ctx) { return train(kind, ctx, config); };
}

std::shared_ptr<const TextArtifacts> prepare_text_for(const SplitDataset& split,
                                                      std::span<const ModelKind> kinds,
                                                      const TextOptions& base) {
  TextOptions o = base;
  o.need_embeddings = o.need_concat = o.need_per_review = false;
  bool any = false;
  for (ModelKind k : kinds) {
    if (!uses_text(k)) continue;
    any = true;
    if (const auto layout = document_layout(k)) {
      o.need_embeddings = true;
      (*layout == DocLayout::Concat ? o.need_concat : o.need_per_review) = true;
    }
  }
  if (!any) return nullptr;
  return std::make_shared<const TextArtifacts>(prepare_text(split, o));
}

namespace {

// Trains every kind on one split, bias first so the others get bucket curves.
std::vector<MetricReport> run_point(const std::shared_ptr<const SplitDataset>& split,
                                    std::span<const ModelKind> kinds, const FitFn& fit,
                                    const SweepOptions& options, ReportMeta meta) {
  const auto text = prepare_text_for(*split, kinds, options.text);
  const ModelContext ctx{split, text};
  meta.dataset = options.dataset_name;
  meta.dataset_hash = split->dataset().fingerprint();
  meta.split_seed = split->seed;

  std::vector<MetricReport> reports;
  TrainedModel bias = fit(ModelKind::Bias, ctx);
  const std::vector<double> bias_preds = predict_rows(*bias.model, split->test);
  for (ModelKind kind : kinds) {
    meta.kind = kind;
    if (kind == ModelKind::Bias) {
      meta.config = bias.model->config();
      reports.push_back(evaluate(*bias.model, meta, options.hr_seed, bias_preds));
      continue;
    }
    TrainedModel t = fit(kind, ctx);
    meta.config = t.model->config();
    reports.push_back(evaluate(*t.model, meta, options.hr_seed, bias_preds));
  }
  return reports;
}

}  // namespace

SweepResult density_sweep(std::shared_ptr<const Dataset> dataset, std::span<const ModelKind> kinds,
                          const FitFn& fit, const SweepOptions& options) {
  SweepResult res;
  res.axis = "k";
  for (std::size_t k = 0;; ++k) {
    auto core = k == 0 ? dataset : std::make_shared<const Dataset>(k_core(*dataset, k));
    if (core->empty() || core->size() < std::max<std::size_t>(options.min_interactions, 10)) break;
    auto s = std::make_shared<const SplitDataset>(split(core, options.split_seed));
    SweepPoint p;
    p.value = static_cast<double>(k);
    p.stats = stats(*core);
    ReportMeta meta;
    meta.k_core = k;
    p.reports = run_point(s, kinds, fit, options, meta);
    res.points.push_back(std::move(p));
  }
  return res;
}

SweepResult mask_sweep(const SplitDataset& split, std::span<const ModelKind> kinds,
                       std::span<const double> percents, const FitFn& fit,
                       const SweepOptions& options) {
  for (std::size_t j = 0; j < percents.size(); ++j) {
    if (!(percents[j] >= 0.0 && percents[j] <= 100.0) || (j > 0 && !(percents[j] > percents[j - 1]))) {
      throw ConfigError("mask percentages must be strictly increasing within [0, 100]");
    }
  }
  SweepResult res;
  res.axis = "mask";
  for (double x : percents) {
    auto masked = std::make_shared<const SplitDataset>(mask_reviews(split, x, options.mask_seed));
    SweepPoint p;
    p.value = x;
    p.stats = stats(masked->dataset());
    ReportMeta meta;
    meta.mask_percent = x;
    p.reports = run_point(masked, kinds, fit, options, meta);
    res.points.push_back(std::move(p));
  }
  return res;
}

std::string config_id(const TrainConfig& config) { return sha256_hex(to_json(config)).substr(0, 12); }

std::vector<MetricReport> flatten(const SweepResult& sweep) {
  std::vector<MetricReport> out;
  for (const auto& p : sweep.points) out.insert(out.end(), p.reports.begin(), p.reports.end());
  return out;
}

void write_report_csv(std::ostream& out, std::span<const MetricReport> reports) {
  out << "# " << kReportSchema << " v1\n";
  out << "dataset,k,mask,model,config_id,seed,latent_dim,l2,dropout,learning_rate,"
         "reviews,users,items,val_mse,test_mse,hr1,hr1_eligible,hr1_skipped\n";
  for (const MetricReport& r : reports) {
    const auto& m = r.meta;
    out << m.dataset << ',' << m.k_core << ',' << num(m.mask_percent) << ',' << to_string(m.kind) << ','
        << config_id(m.config) << ',' << m.config.seed << ',' << m.config.latent_dim << ','
        << num(m.config.l2) << ',' << num(m.config.dropout) << ',' << num(m.config.learning_rate) << ','
        << r.stats.reviews << ',' << r.stats.users << ',' << r.stats.items << ',' << num(r.val_mse)
        << ',' << num(r.test_mse) << ',' << (r.hit_rate.value ? num(*r.hit_rate.value) : "NA") << ','
        << r.hit_rate.eligible << ',' << r.hit_rate.skipped << '\n';
  }
}

void write_bucket_csv(std::ostream& out, std::span<const MetricReport> reports) {
  out << "# " << kBucketSchema << " v1\n";
  out << "dataset,k,mask,model,config_id,seed,freq_lo,freq_hi,items,interactions,bias_mse,"
         "model_mse,improvement\n";
  for (const MetricReport& r : reports) {
    const auto& m = r.meta;
    for (const FrequencyBucket& b : r.buckets) {
      out << m.dataset << ',' << m.k_core << ',' << num(m.mask_percent) << ',' << to_string(m.kind)
          << ',' << config_id(m.config) << ',' << m.config.seed << ',' << b.lo << ',' << b.hi << ','
          << b.items << ',' << b.interactions << ',' << num(b.bias_mse) << ',' << num(b.model_mse)
          << ',' << num(b.improvement) << '\n';
    }
  }
}

void write_manifest(const std::filesystem::path& path, std::span<const MetricReport> reports,
                    const std::string& command) {
  nlohmann::json rows = nlohmann::json::array();
  for (const MetricReport& r : reports) {
    rows.push_back({{"dataset", r.meta.dataset},
                    {"dataset_hash", r.meta.dataset_hash},
                    {"model", std::string(to_string(r.meta.kind))},
                    {"config_id", config_id(r.meta.config)},
                    {"config", nlohmann::json::parse(to_json(r.meta.config))},
                    {"k", r.meta.k_core},
                    {"mask", r.meta.mask_percent},
                    {"split_seed", r.meta.split_seed}});
  }
  const nlohmann::json j = {{"tool", "revrec"},
                            {"version", std::string(kVersion)},
                            {"report_schema", 1},
                            {"bucket_schema", 1},
                            {"command", command},
                            {"rows", rows}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<ReportRow> read_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "# " + std::string(kReportSchema) + " v1") {
    throw DataError("report CSV: missing or unsupported schema line");
  }
  if (!std::getline(in, line)) throw DataError("report CSV: missing header");
  const auto header = split_csv(line);
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) col[header[c]] = c;
  for (const char* need : {"dataset", "k", "mask", "model", "config_id", "seed", "test_mse", "hr1"}) {
    if (!col.contains(need)) throw DataError(std::string("report CSV: missing column ") + need);
  }
  std::vector<ReportRow> rows;
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw DataError("report CSV line " + std::to_string(lineno) + ": expected " +
                      std::to_string(header.size()) + " cells");
    }
    try {
      ReportRow r;
      r.dataset = cells[col["dataset"]];
      r.k_core = std::stoul(cells[col["k"]]);
      r.mask_percent = std::stod(cells[col["mask"]]);
      r.model = cells[col["model"]];
      r.config = cells[col["config_id"]];
      r.seed = std::stoull(cells[col["seed"]]);
      r.test_mse = std::stod(cells[col["test_mse"]]);
      if (cells[col["hr1"]] != "NA") r.hit_rate = std::stod(cells[col["hr1"]]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw DataError("report CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

namespace {

struct Cell {
  double mse = 0.0;
  double hr = 0.0;
  std::size_t n = 0;
  std::size_t n_hr = 0;
};

using RowKey = std::tuple<std::string, std::size_t, double>;

void write_table(std::ostream& out, std::span<const ReportRow> rows, bool ranking) {
  std::map<RowKey, std::map<std::string, Cell>> table;
  std::vector<std::string> models;
  for (ModelKind k : all_model_kinds()) {
    const std::string name(to_string(k));
    if (std::any_of(rows.begin(), rows.end(), [&](const ReportRow& r) { return r.model == name; })) {
      models.push_back(name);
    }
  }
  for (const ReportRow& r : rows) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    Cell& c = table[{r.dataset, r.k_core, r.mask_percent}][r.model];
    c.mse += r.test_mse;
    ++c.n;
    if (r.hit_rate) {
      c.hr += *r.hit_rate;
      ++c.n_hr;
    }
  }
  out << "# revrec-table-" << (ranking ? "ranking" : "mse") << " v1\n";
  out << "dataset,k,mask";
  for (const auto& m : models) out << ',' << m;
  out << '\n';
  for (const auto& [key, cells] : table) {
    out << std::get<0>(key) << ',' << std::get<1>(key) << ',' << num(std::get<2>(key));
    for (const auto& m : models) {
      out << ',';
      auto it = cells.find(m);
      if (it == cells.end()) continue;
      const Cell& c = it->second;
      out << fixed(c.mse / static_cast<double>(c.n), 4);
      if (ranking) {
        out << " / " << (c.n_hr ? fixed(c.hr / static_cast<double>(c.n_hr), 4) : std::string("NA"));
      }
    }
    out << '\n';
  }
}

}  // namespace

void write_mse_table(std::ostream& out, std::span<const ReportRow> rows) { write_table(out, rows, false); }

void write_ranking_table(std::ostream& out, std::span<const ReportRow> rows) { write_table(out, rows, true); }

}  // namespace revrec
