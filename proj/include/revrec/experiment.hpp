#pragma once

// Experiment configuration, hyperparameter grid search and the
// content-addressed preprocessing cache behind the `revrec` tool.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "revrec/corpus.hpp"
#include "revrec/eval.hpp"
#include "revrec/models.hpp"
#include "revrec/text.hpp"

namespace revrec {

struct GridAxes {
  std::vector<std::size_t> latent_dims = {1, 4, 8, 25, 50};
  std::vector<double> l2 = {1e-4, 1e-5, 1e-6, 1e-7};
  std::vector<double> dropout = {0.2, 0.4, 0.6, 0.8};

  /// Every other value of each axis (first, third, ...).
  GridAxes reduced() const;
};

enum class Retune { Reduced, Full, None };

/// Flat "key = value" file. `#` starts a comment; lists are comma separated.
/// The first key must be `schema = 1`. Every field has a default, so an
/// almost empty file is valid; unknown keys are rejected.
struct ExperimentConfig {
  std::filesystem::path dataset;
  std::string dataset_name;
  FieldMap fields;
  RatingScale scale;

  std::vector<std::size_t> k_cores = {0};
  std::vector<double> masks = {0.0};
  std::vector<ModelKind> models = {ModelKind::Bias, ModelKind::MF};
  GridAxes grid;
  std::vector<std::uint64_t> seeds = {1};
  /// Fields other than latent_dim, l2, dropout and seed.
  TrainConfig train;
  TextOptions text;
  std::uint64_t split_seed = 1;
  std::uint64_t mask_seed = 1;
  std::uint64_t hr_seed = 1;
  Retune retune = Retune::Reduced;

  std::filesystem::path output = "out";
  /// Empty means output/cache.
  std::filesystem::path cache;
  std::size_t jobs = 1;

  /// Applies one key; throws ConfigError naming the key on a bad value.
  void set(std::string_view key, std::string_view value);
  void validate() const;
  std::filesystem::path cache_dir() const { return cache.empty() ? output / "cache" : cache; }
  /// All keys with their current values, in documentation order.
  std::vector<std::pair<std::string, std::string>> items() const;
};

inline constexpr int kConfigSchema = 1;

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Keys accepted by ExperimentConfig::set, in documentation order.
std::vector<std::string> config_keys();

struct Trial {
  TrainConfig config;
  bool ok = false;
  double val_mse = 0.0;
  std::size_t epochs = 0;
  std::string error;
};

struct GridResult {
  TrainedModel best;
  TrainConfig best_config;
  std::vector<Trial> trials;
};

/// Grid points for `kind`: axes the model ignores collapse to their first
/// value (latent dim for the bias model, dropout for models without dropout).
std::vector<TrainConfig> grid_points(ModelKind kind, const GridAxes& axes, const TrainConfig& base);

/// Trains every grid point with up to `jobs` concurrent trainers and keeps
/// the lowest validation MSE; ties go to the smaller latent dim, then L2, then
/// dropout. Diverged points are recorded; throws DivergenceError (positioned
/// at the first point's failure) listing every failure when all diverge.
GridResult grid_search(ModelKind kind, const ModelContext& context, const GridAxes& axes,
                       const TrainConfig& base, std::size_t jobs = 1);

FitFn grid_fit(const GridAxes& axes, const TrainConfig& base, std::size_t jobs);

struct PreparedData {
  std::shared_ptr<const SplitDataset> split;
  std::shared_ptr<const TextArtifacts> text;
  LoadReport load_report;
  std::string cache_key;
  std::filesystem::path cache_path;
  bool cache_hit = false;
};

/// Loads, prunes to the k-core, splits, masks and builds text artifacts for
/// `kinds`, reusing the cache entry whose key hashes the input file contents
/// and every option that shapes the artifacts.
PreparedData prepare(const ExperimentConfig& config, std::size_t k, double mask_percent,
                     std::span<const ModelKind> kinds);

}  // namespace revrec
