#pragma once

// Review text: tokenisation, capped vocabulary, length caps, skip-gram
// embeddings and per-entity review documents built from training reviews.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "revrec/corpus.hpp"

namespace revrec {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;
/// Token strings per interaction row of a Dataset.
using TokenizedCorpus = std::vector<std::vector<std::string>>;

/// Lowercases ASCII letters, splits on ASCII and Unicode whitespace and strips
/// leading/trailing ASCII punctuation from every token. Tokens that end up
/// empty are dropped; stopwords are kept.
std::vector<std::string> tokenize(std::string_view text);

TokenizedCorpus tokenize_all(const Dataset& d);

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kOov = 1;
  static constexpr std::size_t kDefaultMaxWords = 50'000;

  Vocab();
  /// `words` are assigned ids 2, 3, ... in order.
  explicit Vocab(std::vector<std::string> words);

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  /// Including the padding and OOV rows.
  std::size_t size() const { return tokens_.size(); }
  std::span<const std::string> tokens() const { return tokens_; }
  std::string fingerprint() const;

  /// One token per line in id order.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Keeps the `max_words` most frequent tokens over `rows`, ties broken by
/// lexicographic order.
Vocab build_vocab(const TokenizedCorpus& corpus, std::span<const std::size_t> rows,
                  std::size_t max_words = Vocab::kDefaultMaxWords);

std::vector<TokenIds> encode_all(const TokenizedCorpus& corpus, const Vocab& vocab);

/// Nearest-rank percentile of an unsorted sample; 0 for an empty sample.
std::size_t nearest_rank_percentile(std::vector<std::size_t> values, double percentile);

struct LengthCaps {
  /// Tokens per review.
  std::size_t review_len = 1;
  /// Reviews per entity.
  std::size_t max_reviews = 1;
  bool operator==(const LengthCaps&) const = default;
};

/// review_len: percentile of training-review token counts. max_reviews:
/// percentile of training-review counts per entity, users and items pooled.
/// Both are clamped to at least 1 so document shapes stay valid.
LengthCaps length_caps(const SplitDataset& split, std::span<const TokenIds> ids,
                       double percentile = 98.0);

/// |vocab| x dim row-major table. Row 0 (padding) is all zeros.
struct EmbeddingTable {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t r) const { return {values.data() + r * dim, dim}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * dim, dim}; }

  /// Flat binary: 8-byte magic "RVEMB001", u64 rows, u64 dim, then
  /// rows*dim little-endian float64 values in row-major order.
  void save(const std::filesystem::path& path) const;
  static EmbeddingTable load(const std::filesystem::path& path);
};

struct SkipGramOptions {
  std::size_t dim = 64;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double learning_rate = 0.025;
  std::uint64_t seed = 1;
};

/// Skip-gram with negative sampling over the reviews in `rows`, one review
/// per sentence. Learning rate decays linearly towards zero. Deterministic
/// for a given seed. Throws DataError when the rows contain no tokens.
EmbeddingTable train_embeddings(std::span<const TokenIds> ids, std::span<const std::size_t> rows,
                                std::size_t vocab_size, const SkipGramOptions& options = {});

enum class DocLayout { Concat, PerReview };

/// Fixed-shape token store for one side (users or items). Every entity owns
/// `slots` sequences of exactly `seq_len` ids, padded with Vocab::kPad. For
/// Concat there is one slot; for PerReview each slot holds one review and
/// remembers the counterpart entity it was written for (-1 when unused).
struct EntityDocs {
  std::size_t entities = 0;
  std::size_t slots = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> tokens;
  /// Non-padding prefix length of each slot.
  std::vector<std::uint32_t> lengths;
  std::vector<std::int64_t> counterpart;
  /// Number of occupied slots per entity (a masked review still occupies one).
  std::vector<std::uint32_t> used;

  std::span<const TokenId> sequence(std::size_t entity, std::size_t slot) const {
    return {tokens.data() + (entity * slots + slot) * seq_len, seq_len};
  }
  std::uint32_t length(std::size_t entity, std::size_t slot) const {
    return lengths[entity * slots + slot];
  }
  std::int64_t counterpart_of(std::size_t entity, std::size_t slot) const {
    return counterpart[entity * slots + slot];
  }
};

struct ReviewDocs {
  DocLayout layout = DocLayout::Concat;
  EntityDocs users;
  EntityDocs items;
};

/// Documents built from training reviews only. Concat joins an entity's
/// reviews oldest first and truncates to `concat_len`; PerReview keeps the
/// `caps.max_reviews` most recent reviews (timestamp, then input order), each
/// cut to `caps.review_len`.
ReviewDocs build_documents(const SplitDataset& split, std::span<const TokenIds> ids,
                           const LengthCaps& caps, DocLayout layout,
                           std::size_t concat_len = 1000);

/// Binary document cache: magic "RVDOCS01", layout, then both sides.
void save_documents(const ReviewDocs& docs, const std::filesystem::path& path);
ReviewDocs load_documents(const std::filesystem::path& path);

struct TextOptions {
  std::size_t max_words = Vocab::kDefaultMaxWords;
  std::size_t concat_len = 1000;
  double percentile = 98.0;
  SkipGramOptions skipgram;
  bool need_embeddings = true;
  bool need_concat = true;
  bool need_per_review = true;
};

/// Everything the text models consume, derived from one split's training
/// partition.
struct TextArtifacts {
  Vocab vocab;
  std::vector<TokenIds> ids;
  LengthCaps caps;
  /// Empty (rows == 0) when not requested; all-zero when the training
  /// reviews contain no tokens.
  EmbeddingTable embeddings;
  ReviewDocs concat;
  ReviewDocs per_review;
};

TextArtifacts prepare_text(const SplitDataset& split, const TextOptions& options);

}  // namespace revrec
