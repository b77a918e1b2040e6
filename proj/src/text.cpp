#include "revrec/text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "revrec/error.hpp"
#include "revrec/hash.hpp"
#include "revrec/random.hpp"

namespace revrec {

namespace {

constexpr std::string_view kPadToken = "<pad>";
constexpr std::string_view kOovToken = "<unk>";

bool is_ascii_space(unsigned char c) {
  return c == ' ' || (c >= '\t' && c <= '\r') || (c >= 0x1c && c <= 0x1f);
}

// Byte length of the Unicode whitespace sequence starting at s[i], or 0.
std::size_t unicode_space_len(std::string_view s, std::size_t i) {
  const auto at = [&](std::size_t k) -> unsigned char {
    return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0;
  };
  const unsigned char c = at(0);
  if (c == 0xC2 && (at(1) == 0x85 || at(1) == 0xA0)) return 2;  // NEL, NBSP
  if (c == 0xE1 && at(1) == 0x9A && at(2) == 0x80) return 3;    // ogham space
  if (c == 0xE2 && at(1) == 0x80) {
    const unsigned char d = at(2);
    if ((d >= 0x80 && d <= 0x8A) || d == 0xA8 || d == 0xA9 || d == 0xAF) return 3;
  }
  if (c == 0xE2 && at(1) == 0x81 && at(2) == 0x9F) return 3;  // medium math space
  if (c == 0xE3 && at(1) == 0x80 && at(2) == 0x80) return 3;  // ideographic space
  return 0;
}

bool is_ascii_punct(unsigned char c) {
  return (c >= 0x21 && c <= 0x2f) || (c >= 0x3a && c <= 0x40) || (c >= 0x5b && c <= 0x60) ||
         (c >= 0x7b && c <= 0x7e);
}

void emit_token(std::string_view raw, std::vector<std::string>& out) {
  std::size_t b = 0, e = raw.size();
  while (b < e && is_ascii_punct(static_cast<unsigned char>(raw[b]))) ++b;
  while (e > b && is_ascii_punct(static_cast<unsigned char>(raw[e - 1]))) --e;
  if (b == e) return;
  std::string tok(raw.substr(b, e - b));
  for (char& c : tok) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  out.push_back(std::move(tok));
}

struct EntityRows {
  std::vector<std::vector<std::size_t>> users;
  std::vector<std::vector<std::size_t>> items;
};

// Training rows per entity, oldest first.
EntityRows rows_by_entity(const SplitDataset& split) {
  const Dataset& d = split.dataset();
  EntityRows er;
  er.users.resize(d.num_users());
  er.items.resize(d.num_items());
  for (std::size_t r : split.train) {
    er.users[d[r].user].push_back(r);
    er.items[d[r].item].push_back(r);
  }
  auto chronological = [&](std::size_t a, std::size_t b) {
    if (d[a].timestamp != d[b].timestamp) return d[a].timestamp < d[b].timestamp;
    return d[a].seq < d[b].seq;
  };
  for (auto& v : er.users) std::stable_sort(v.begin(), v.end(), chronological);
  for (auto& v : er.items) std::stable_sort(v.begin(), v.end(), chronological);
  return er;
}

EntityDocs concat_docs(const std::vector<std::vector<std::size_t>>& rows,
                       std::span<const TokenIds> ids, std::size_t cap) {
  EntityDocs docs;
  docs.entities = rows.size();
  docs.slots = 1;
  docs.seq_len = cap;
  docs.tokens.assign(docs.entities * cap, Vocab::kPad);
  docs.lengths.assign(docs.entities, 0);
  docs.counterpart.assign(docs.entities, -1);
  docs.used.assign(docs.entities, 0);
  for (std::size_t e = 0; e < rows.size(); ++e) {
    std::size_t n = 0;
    TokenId* dst = docs.tokens.data() + e * cap;
    for (std::size_t r : rows[e]) {
      for (TokenId t : ids[r]) {
        if (n == cap) break;
        dst[n++] = t;
      }
    }
    docs.lengths[e] = static_cast<std::uint32_t>(n);
    docs.used[e] = rows[e].empty() ? 0 : 1;
  }
  return docs;
}

EntityDocs per_review_docs(const Dataset& d, const std::vector<std::vector<std::size_t>>& rows,
                           std::span<const TokenIds> ids, const LengthCaps& caps,
                           bool user_side) {
  EntityDocs docs;
  docs.entities = rows.size();
  docs.slots = caps.max_reviews;
  docs.seq_len = caps.review_len;
  docs.tokens.assign(docs.entities * docs.slots * docs.seq_len, Vocab::kPad);
  docs.lengths.assign(docs.entities * docs.slots, 0);
  docs.counterpart.assign(docs.entities * docs.slots, -1);
  docs.used.assign(docs.entities, 0);
  for (std::size_t e = 0; e < rows.size(); ++e) {
    const auto& mine = rows[e];
    const std::size_t keep = std::min(mine.size(), docs.slots);
    const std::size_t first = mine.size() - keep;
    for (std::size_t s = 0; s < keep; ++s) {
      const std::size_t r = mine[first + s];
      const auto& review = ids[r];
      const std::size_t n = std::min(review.size(), docs.seq_len);
      std::copy_n(review.begin(), n,
                  docs.tokens.begin() + static_cast<std::ptrdiff_t>((e * docs.slots + s) * docs.seq_len));
      docs.lengths[e * docs.slots + s] = static_cast<std::uint32_t>(n);
      docs.counterpart[e * docs.slots + s] = user_side ? d[r].item : d[r].user;
    }
    docs.used[e] = static_cast<std::uint32_t>(keep);
  }
  return docs;
}

void write_entity_docs(std::ostream& out, const EntityDocs& docs) {
  binary::write<std::uint64_t>(out, docs.entities);
  binary::write<std::uint64_t>(out, docs.slots);
  binary::write<std::uint64_t>(out, docs.seq_len);
  binary::write_array(out, docs.tokens);
  binary::write_array(out, docs.lengths);
  binary::write_array(out, docs.counterpart);
  binary::write_array(out, docs.used);
}

EntityDocs read_entity_docs(std::istream& in) {
  EntityDocs docs;
  docs.entities = binary::read<std::uint64_t>(in);
  docs.slots = binary::read<std::uint64_t>(in);
  docs.seq_len = binary::read<std::uint64_t>(in);
  docs.tokens = binary::read_array<TokenId>(in);
  docs.lengths = binary::read_array<std::uint32_t>(in);
  docs.counterpart = binary::read_array<std::int64_t>(in);
  docs.used = binary::read_array<std::uint32_t>(in);
  if (docs.tokens.size() != docs.entities * docs.slots * docs.seq_len ||
      docs.lengths.size() != docs.entities * docs.slots ||
      docs.counterpart.size() != docs.lengths.size() || docs.used.size() != docs.entities) {
    throw DataError("document cache: inconsistent shapes");
  }
  return docs;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0, i = 0;
  while (i < text.size()) {
    std::size_t ws = is_ascii_space(static_cast<unsigned char>(text[i])) ? 1 : unicode_space_len(text, i);
    if (ws == 0) {
      ++i;
      continue;
    }
    if (i > start) emit_token(text.substr(start, i - start), out);
    i += ws;
    start = i;
  }
  if (start < text.size()) emit_token(text.substr(start), out);
  return out;
}

TokenizedCorpus tokenize_all(const Dataset& d) {
  TokenizedCorpus out;
  out.reserve(d.size());
  for (const auto& x : d.interactions()) out.push_back(tokenize(x.review));
  return out;
}

Vocab::Vocab() : tokens_{std::string(kPadToken), std::string(kOovToken)} {}

Vocab::Vocab(std::vector<std::string> words) : Vocab() {
  tokens_.reserve(words.size() + 2);
  for (auto& w : words) {
    const auto id = static_cast<TokenId>(tokens_.size());
    if (!index_.try_emplace(w, id).second) throw DataError("duplicate vocabulary entry: " + w);
    tokens_.push_back(std::move(w));
  }
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kOov : it->second;
}

std::string Vocab::fingerprint() const {
  Sha256 h;
  h.update("revrec-vocab-v1");
  for (const auto& t : tokens_) h.update(t).update(std::string_view("\n", 1));
  return h.hex();
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("write failed on " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.size() < 2 || lines[0] != kPadToken || lines[1] != kOovToken) {
    throw DataError(path.string() + ": not a vocabulary file");
  }
  return Vocab(std::vector<std::string>(lines.begin() + 2, lines.end()));
}

Vocab build_vocab(const TokenizedCorpus& corpus, std::span<const std::size_t> rows,
                  std::size_t max_words) {
  std::unordered_map<std::string, std::size_t> freq;
  for (std::size_t r : rows) {
    for (const auto& t : corpus.at(r)) ++freq[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  auto order = [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  if (ranked.size() > max_words) {
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(max_words),
                      ranked.end(), order);
    ranked.resize(max_words);
  } else {
    std::sort(ranked.begin(), ranked.end(), order);
  }
  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, _] : ranked) words.push_back(std::move(w));
  return Vocab(std::move(words));
}

std::vector<TokenIds> encode_all(const TokenizedCorpus& corpus, const Vocab& vocab) {
  std::vector<TokenIds> out(corpus.size());
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    out[r].reserve(corpus[r].size());
    for (const auto& t : corpus[r]) out[r].push_back(vocab.id(t));
  }
  return out;
}

std::size_t nearest_rank_percentile(std::vector<std::size_t> values, double percentile) {
  if (values.empty()) return 0;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

LengthCaps length_caps(const SplitDataset& split, std::span<const TokenIds> ids, double percentile) {
  if (split.train.empty()) throw DataError("length_caps needs a non-empty training partition");
  const Dataset& d = split.dataset();
  std::vector<std::size_t> review_lengths;
  review_lengths.reserve(split.train.size());
  std::vector<std::size_t> user_counts(d.num_users(), 0), item_counts(d.num_items(), 0);
  for (std::size_t r : split.train) {
    review_lengths.push_back(ids[r].size());
    ++user_counts[d[r].user];
    ++item_counts[d[r].item];
  }
  std::vector<std::size_t> entity_counts;
  for (std::size_t c : user_counts) {
    if (c > 0) entity_counts.push_back(c);
  }
  for (std::size_t c : item_counts) {
    if (c > 0) entity_counts.push_back(c);
  }
  LengthCaps caps;
  caps.review_len = std::max<std::size_t>(1, nearest_rank_percentile(std::move(review_lengths), percentile));
  caps.max_reviews = std::max<std::size_t>(1, nearest_rank_percentile(std::move(entity_counts), percentile));
  return caps;
}

void EmbeddingTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("RVEMB001", 8);
  binary::write<std::uint64_t>(out, rows);
  binary::write<std::uint64_t>(out, dim);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw IoError("write failed on " + path.string());
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  binary::expect_magic(in, "RVEMB001", path.string());
  EmbeddingTable t;
  t.rows = binary::read<std::uint64_t>(in);
  t.dim = binary::read<std::uint64_t>(in);
  t.values.resize(t.rows * t.dim);
  if (!in.read(reinterpret_cast<char*>(t.values.data()),
               static_cast<std::streamsize>(t.values.size() * sizeof(double)))) {
    throw DataError(path.string() + ": truncated embedding table");
  }
  return t;
}

EmbeddingTable train_embeddings(std::span<const TokenIds> ids, std::span<const std::size_t> rows,
                                std::size_t vocab_size, const SkipGramOptions& opt) {
  std::vector<std::size_t> counts(vocab_size, 0);
  std::size_t total_tokens = 0;
  for (std::size_t r : rows) {
    for (TokenId t : ids[r]) {
      ++counts.at(static_cast<std::size_t>(t));
      ++total_tokens;
    }
  }
  if (total_tokens == 0) throw DataError("train_embeddings: training reviews contain no tokens");

  const std::size_t dim = opt.dim;
  Rng rng(derive_seed(opt.seed, {0x5347'4e53ULL}));
  EmbeddingTable table{vocab_size, dim, std::vector<double>(vocab_size * dim, 0.0)};
  for (std::size_t w = 1; w < vocab_size; ++w) {
    for (double& v : table.row(w)) v = (uniform01(rng) - 0.5) / static_cast<double>(dim);
  }
  std::vector<double> context_vecs(vocab_size * dim, 0.0);

  // Negative-sampling distribution: unigram^0.75, sampled by inverse CDF.
  std::vector<double> cdf(vocab_size, 0.0);
  double acc = 0.0;
  for (std::size_t w = 0; w < vocab_size; ++w) {
    acc += std::pow(static_cast<double>(counts[w]), 0.75);
    cdf[w] = acc;
  }
  auto draw_negative = [&]() {
    const double x = uniform01(rng) * acc;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), x);
    return static_cast<TokenId>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(vocab_size) - 1));
  };

  const double total_work = static_cast<double>(total_tokens * opt.epochs);
  double processed = 0.0;
  std::vector<double> grad_in(dim);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t r : rows) {
      const auto& sent = ids[r];
      const std::size_t n = sent.size();
      for (std::size_t p = 0; p < n; ++p, processed += 1.0) {
        const double lr = opt.learning_rate * std::max(1e-4, 1.0 - processed / total_work);
        const TokenId target = sent[p];
        const std::size_t lo = p >= opt.window ? p - opt.window : 0;
        const std::size_t hi = std::min(n, p + opt.window + 1);
        for (std::size_t c = lo; c < hi; ++c) {
          if (c == p) continue;
          double* in_vec = table.values.data() + static_cast<std::size_t>(sent[c]) * dim;
          std::fill(grad_in.begin(), grad_in.end(), 0.0);
          for (std::size_t s = 0; s <= opt.negatives; ++s) {
            TokenId out_word = target;
            double label = 1.0;
            if (s > 0) {
              out_word = draw_negative();
              if (out_word == target) continue;
              label = 0.0;
            }
            double* out_vec = context_vecs.data() + static_cast<std::size_t>(out_word) * dim;
            double dot = 0.0;
            for (std::size_t j = 0; j < dim; ++j) dot += in_vec[j] * out_vec[j];
            const double g = (label - 1.0 / (1.0 + std::exp(-dot))) * lr;
            for (std::size_t j = 0; j < dim; ++j) {
              grad_in[j] += g * out_vec[j];
              out_vec[j] += g * in_vec[j];
            }
          }
          for (std::size_t j = 0; j < dim; ++j) in_vec[j] += grad_in[j];
        }
      }
    }
  }
  std::fill(table.values.begin(), table.values.begin() + static_cast<std::ptrdiff_t>(dim), 0.0);
  return table;
}

ReviewDocs build_documents(const SplitDataset& split, std::span<const TokenIds> ids,
                           const LengthCaps& caps, DocLayout layout, std::size_t concat_len) {
  const Dataset& d = split.dataset();
  const EntityRows er = rows_by_entity(split);
  ReviewDocs docs;
  docs.layout = layout;
  if (layout == DocLayout::Concat) {
    docs.users = concat_docs(er.users, ids, concat_len);
    docs.items = concat_docs(er.items, ids, concat_len);
  } else {
    docs.users = per_review_docs(d, er.users, ids, caps, true);
    docs.items = per_review_docs(d, er.items, ids, caps, false);
  }
  return docs;
}

void save_documents(const ReviewDocs& docs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("RVDOCS01", 8);
  binary::write<std::uint32_t>(out, docs.layout == DocLayout::Concat ? 0U : 1U);
  write_entity_docs(out, docs.users);
  write_entity_docs(out, docs.items);
  if (!out) throw IoError("write failed on " + path.string());
}

ReviewDocs load_documents(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  binary::expect_magic(in, "RVDOCS01", path.string());
  ReviewDocs docs;
  docs.layout = binary::read<std::uint32_t>(in) == 0 ? DocLayout::Concat : DocLayout::PerReview;
  docs.users = read_entity_docs(in);
  docs.items = read_entity_docs(in);
  return docs;
}

TextArtifacts prepare_text(const SplitDataset& split, const TextOptions& options) {
  TextArtifacts t;
  const TokenizedCorpus corpus = tokenize_all(split.dataset());
  t.vocab = build_vocab(corpus, split.train, options.max_words);
  t.ids = encode_all(corpus, t.vocab);
  t.caps = length_caps(split, t.ids, options.percentile);
  if (options.need_embeddings) {
    const bool any_tokens = std::any_of(split.train.begin(), split.train.end(),
                                        [&](std::size_t r) { return !t.ids[r].empty(); });
    if (any_tokens) {
      t.embeddings = train_embeddings(t.ids, split.train, t.vocab.size(), options.skipgram);
    } else {
      t.embeddings = EmbeddingTable{t.vocab.size(), options.skipgram.dim,
                                    std::vector<double>(t.vocab.size() * options.skipgram.dim, 0.0)};
    }
  }
  if (options.need_concat) {
    t.concat = build_documents(split, t.ids, t.caps, DocLayout::Concat, options.concat_len);
  }
  if (options.need_per_review) {
    t.per_review = build_documents(split, t.ids, t.caps, DocLayout::PerReview);
  }
  return t;
}

}  // namespace revrec
