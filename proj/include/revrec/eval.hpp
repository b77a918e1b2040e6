#pragma once

// Metrics (MSE, HR@1, frequency-bucketed improvement), the density and
// masking sweeps, and CSV/JSON report emission.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "revrec/corpus.hpp"
#include "revrec/models.hpp"
#include "revrec/text.hpp"

namespace revrec {

/// Mean squared difference, accumulated in double. Throws DataError on a
/// length mismatch or empty input.
double mse(std::span<const double> preds, std::span<const double> truths);

/// Scores a list of (user, item) pairs; higher means more preferred.
using Scorer = std::function<std::vector<double>(std::span<const UserItem>)>;

struct HitRate {
  /// Empty when no user was eligible ("not applicable").
  std::optional<double> value;
  std::size_t eligible = 0;
  std::size_t skipped = 0;
  std::size_t hits = 0;
};

/// Per test user: I+ = test items rated at the scale maximum, I- = the other
/// test items. Users with |I+| >= 1 and |I-| >= 5 draw one positive and five
/// distinct negatives; a hit needs the positive's score to be strictly
/// greater than all five.
HitRate hit_rate_at_1(const Scorer& scorer, const SplitDataset& split, std::uint64_t seed);
HitRate hit_rate_at_1(Model& model, std::uint64_t seed);

struct FrequencyBucket {
  /// Inclusive range of training frequencies.
  std::size_t lo = 0;
  std::size_t hi = 0;
  /// Distinct test items whose training frequency falls in the range.
  std::size_t items = 0;
  std::size_t interactions = 0;
  double bias_mse = 0.0;
  double model_mse = 0.0;
  /// bias_mse - model_mse; 0 for an empty bucket.
  double improvement = 0.0;
};

/// {0}, {1}, {2}, [3,4], [5,8], [9,16], ... up to the bucket holding `max_freq`.
std::vector<std::pair<std::size_t, std::size_t>> frequency_bucket_bounds(std::size_t max_freq);

/// Both prediction lists are aligned with split.test.
std::vector<FrequencyBucket> bucket_improvement(std::span<const double> model_preds,
                                                std::span<const double> bias_preds,
                                                const SplitDataset& split);

struct ReportMeta {
  std::string dataset;
  std::string dataset_hash;
  ModelKind kind = ModelKind::Bias;
  TrainConfig config;
  std::size_t k_core = 0;
  double mask_percent = 0.0;
  std::uint64_t split_seed = 0;
};

struct MetricReport {
  ReportMeta meta;
  double val_mse = 0.0;
  double test_mse = 0.0;
  HitRate hit_rate;
  std::vector<FrequencyBucket> buckets;
  DatasetStats stats;
};

/// Test MSE on clipped predictions, HR@1 and (when `bias_test_preds` is
/// given) bucket improvements.
MetricReport evaluate(Model& model, const ReportMeta& meta, std::uint64_t hr_seed,
                      std::span<const double> bias_test_preds = {});

struct SweepPoint {
  /// k for density sweeps, masked percent for mask sweeps.
  double value = 0.0;
  DatasetStats stats;
  std::vector<MetricReport> reports;
};

struct SweepResult {
  std::string axis;  // "k" or "mask"
  std::vector<SweepPoint> points;
};

/// Trains a model of `kind`; may run a grid search.
using FitFn = std::function<TrainedModel(ModelKind kind, const ModelContext& context)>;

/// Plain training with one configuration.
FitFn fixed_config(const TrainConfig& config);

struct SweepOptions {
  std::string dataset_name = "dataset";
  std::uint64_t split_seed = 1;
  std::uint64_t mask_seed = 1;
  std::uint64_t hr_seed = 1;
  TextOptions text;
  /// Density sweeps stop once the core holds fewer interactions than this
  /// (a split needs at least 10).
  std::size_t min_interactions = 10;
};

/// Text artifacts needed by `kinds`, or null when none reads text.
std::shared_ptr<const TextArtifacts> prepare_text_for(const SplitDataset& split,
                                                      std::span<const ModelKind> kinds,
                                                      const TextOptions& base);

/// For k = 0, 1, 2, ...: k-core, split with the same seed, rebuild text,
/// train every kind and evaluate. Stops at the first empty (or too small)
/// core. A bias baseline is trained for the buckets when `kinds` lacks it.
SweepResult density_sweep(std::shared_ptr<const Dataset> dataset, std::span<const ModelKind> kinds,
                          const FitFn& fit, const SweepOptions& options);

/// For each x: mask x% of training reviews, rebuild text from the masked
/// training set, train and evaluate. Split membership is shared by all x.
/// Throws ConfigError unless `percents` is strictly increasing within [0, 100].
SweepResult mask_sweep(const SplitDataset& split, std::span<const ModelKind> kinds,
                       std::span<const double> percents, const FitFn& fit,
                       const SweepOptions& options);

// Reports. Both CSVs start with a "# <schema> v1" line.

inline constexpr std::string_view kReportSchema = "revrec-report";
inline constexpr std::string_view kBucketSchema = "revrec-buckets";

std::string config_id(const TrainConfig& config);

void write_report_csv(std::ostream& out, std::span<const MetricReport> reports);
void write_bucket_csv(std::ostream& out, std::span<const MetricReport> reports);
std::vector<MetricReport> flatten(const SweepResult& sweep);

/// Companion manifest: tool version, schema versions and per-row hashes.
void write_manifest(const std::filesystem::path& path, std::span<const MetricReport> reports,
                    const std::string& command);

/// One parsed row of a report CSV.
struct ReportRow {
  std::string dataset;
  std::size_t k_core = 0;
  double mask_percent = 0.0;
  std::string model;
  std::string config;
  std::uint64_t seed = 0;
  double test_mse = 0.0;
  std::optional<double> hit_rate;
};

std::vector<ReportRow> read_report_csv(std::istream& in);

/// Datasets as rows, models as columns, test MSE cells (mean over seeds).
void write_mse_table(std::ostream& out, std::span<const ReportRow> rows);
/// Same layout with "MSE / HR@1" cells.
void write_ranking_table(std::ostream& out, std::span<const ReportRow> rows);

}  // namespace revrec
