#pragma once

// Rating/review datasets: ingestion, k-core pruning, seeded splits and
// review masking.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace revrec {

struct RatingScale {
  double min = 1.0;
  double max = 5.0;

  bool contains(double r) const { return r >= min && r <= max; }
  double clip(double r) const { return r < min ? min : (r > max ? max : r); }
  bool operator==(const RatingScale&) const = default;
};

/// One (user, item, rating, review) record. `review` keeps the raw text;
/// tokenisation happens in the text module once a vocabulary exists.
struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double rating = 0.0;
  std::string review;
  /// Unix time when the source provides one, else 0.
  std::int64_t timestamp = 0;
  /// Position of the record in the original input; survives pruning.
  std::uint64_t seq = 0;
};

/// Field names used to pull an Interaction out of one JSON record.
struct FieldMap {
  std::string user = "reviewerID";
  std::string item = "asin";
  std::string rating = "overall";
  std::string review = "reviewText";
  /// Optional; an empty name disables timestamps.
  std::string timestamp = "unixReviewTime";
};

/// Immutable after construction. Dense user/item indices are 0..n-1 in
/// first-seen order and every index is referenced by an interaction.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(RatingScale scale) : scale_(scale) {}

  /// Appends an interaction keyed by external ids, assigning dense indices
  /// on first sight.
  void add(const std::string& user_key, const std::string& item_key, double rating,
           std::string review, std::int64_t timestamp, std::uint64_t seq);

  std::span<const Interaction> interactions() const { return interactions_; }
  const Interaction& operator[](std::size_t row) const { return interactions_[row]; }
  std::size_t size() const { return interactions_.size(); }
  bool empty() const { return interactions_.empty(); }

  std::size_t num_users() const { return user_keys_.size(); }
  std::size_t num_items() const { return item_keys_.size(); }
  const std::string& user_key(std::uint32_t u) const { return user_keys_[u]; }
  const std::string& item_key(std::uint32_t i) const { return item_keys_[i]; }
  /// -1 when the key is unknown.
  std::int64_t find_user(const std::string& key) const;
  std::int64_t find_item(const std::string& key) const;

  const RatingScale& scale() const { return scale_; }

  /// Copy with the review text of the given rows replaced by "".
  Dataset with_reviews_cleared(std::span<const std::size_t> rows) const;

  /// Stable content fingerprint (keys, ratings, reviews, scale).
  std::string fingerprint() const;

 private:
  RatingScale scale_;
  std::vector<Interaction> interactions_;
  std::vector<std::string> user_keys_;
  std::vector<std::string> item_keys_;
  std::unordered_map<std::string, std::uint32_t> user_index_;
  std::unordered_map<std::string, std::uint32_t> item_index_;
};

struct LoadReport {
  std::size_t loaded = 0;
  std::size_t skipped_missing_field = 0;
  std::size_t rejected_out_of_scale = 0;
  std::size_t malformed = 0;
};

struct LoadResult {
  Dataset dataset;
  LoadReport report;
};

/// Reads newline-delimited JSON. Records missing a mapped field are skipped,
/// records whose rating falls outside `scale` are rejected; both are counted.
/// Throws IoError when the file cannot be read.
LoadResult load_interactions(const std::filesystem::path& path, const FieldMap& fields = {},
                             RatingScale scale = {});

/// Maximal sub-dataset in which every user and item has at least k
/// interactions, computed by cascading queue-based deletion. Surviving
/// interactions keep their relative order and are re-indexed densely.
Dataset k_core(const Dataset& d, std::size_t k);

/// Train/validation/test partition of a shared dataset. Index lists refer to
/// rows of `data`.
struct SplitDataset {
  std::shared_ptr<const Dataset> data;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;

  const Dataset& dataset() const { return *data; }
};

/// Seeded uniform shuffle, then contiguous 80/10/10 partition.
/// Throws DataError when the dataset has fewer than 10 interactions.
SplitDataset split(std::shared_ptr<const Dataset> d, std::uint64_t seed);

/// Empties round(percent/100 * |train|) training reviews chosen uniformly
/// with `seed`. Split membership and ratings are untouched.
SplitDataset mask_reviews(const SplitDataset& s, double percent, std::uint64_t seed);

struct DatasetStats {
  std::size_t reviews = 0;
  std::size_t users = 0;
  std::size_t items = 0;
  bool operator==(const DatasetStats&) const = default;
};

DatasetStats stats(const Dataset& d);

// Cache files. Both are versioned text formats:
//   dataset: "#revrec-dataset\t1", "#scale\t<min>\t<max>", then one
//            user/item/rating/timestamp/seq/review row per interaction with
//            tab, newline and backslash escaped in the review.
//   split:   "#revrec-split\t1", "#seed\t<seed>", then "train|validation|test"
//            lines followed by space separated row indices.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
void save_split(const SplitDataset& s, const std::filesystem::path& path);
SplitDataset load_split(std::shared_ptr<const Dataset> d, const std::filesystem::path& path);

}  // namespace revrec
