#pragma once

// Seeded synthetic rating/review data with planted structure, used by the
// tests, the acceptance gate and `revrec synth`.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "revrec/corpus.hpp"

namespace revrec {

struct PlantedOptions {
  std::size_t users = 2000;
  std::size_t items = 300;
  std::size_t interactions = 40'000;
  std::size_t latent_dim = 4;
  double noise = 0.25;
  double alpha = 3.5;
  double bias_sd = 0.5;
  /// Per-coordinate sd of the true factors.
  double factor_sd = 0.63;
  /// Share of items that receive only 1..3 interactions.
  double cold_item_fraction = 0.3;
  /// Popularity of warm item r (by rank) is proportional to (r + 10)^-skew.
  double popularity_skew = 0.8;

  // Review text. Empty reviews when `with_reviews` is false.
  bool with_reviews = true;
  std::size_t words_per_topic = 20;
  std::size_t topic_tokens = 10;
  /// Tokens naming the rounded rating ("s3w7"), giving text models rating signal.
  std::size_t sentiment_tokens = 2;
  std::size_t sentiment_words = 5;
  /// theta_i = softmax(kappa * gamma_i).
  double kappa = 2.0;

  std::uint64_t seed = 1;
};

struct PlantedData {
  std::shared_ptr<Dataset> dataset;
  /// True parameters, indexed by the dataset's dense ids.
  std::vector<double> user_bias;
  std::vector<double> item_bias;
  std::vector<double> user_factors;  // users x latent_dim
  std::vector<double> item_factors;  // items x latent_dim
};

/// rating = alpha + b_u + b_i + gamma_u . gamma_i + N(0, noise^2), clipped to
/// [1, 5]. Each review draws `topic_tokens` words from topics ~ theta_i and
/// `sentiment_tokens` words from the rating's sentiment vocabulary.
PlantedData make_planted(const PlantedOptions& options);

/// Writes one JSON object per line with the default FieldMap names.
void write_ndjson(const Dataset& d, const std::filesystem::path& path);

}  // namespace revrec
