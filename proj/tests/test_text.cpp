#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "revrec/error.hpp"
#include "revrec/text.hpp"
#include "support.hpp"

using namespace revrec;
using revrec::testing::TempDir;

namespace {

std::string unhex(std::string_view h) {
  std::string out;
  for (std::size_t i = 0; i + 1 < h.size(); i += 2) {
    out.push_back(static_cast<char>(std::stoi(std::string(h.substr(i, 2)), nullptr, 16)));
  }
  return out;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(part);
  return out;
}

// Counts every token, sorts the whole table and keeps the first n.
std::vector<std::string> full_sort_vocab(const TokenizedCorpus& corpus, std::span<const std::size_t> rows,
                                         std::size_t n) {
  std::map<std::string, std::size_t> freq;
  for (std::size_t r : rows) {
    for (const auto& t : corpus[r]) ++freq[t];
  }
  std::vector<std::pair<std::size_t, std::string>> v;
  for (const auto& [w, c] : freq) v.emplace_back(c, w);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::string> out;
  for (std::size_t k = 0; k < std::min(n, v.size()); ++k) out.push_back(v[k].second);
  return out;
}

// Smallest value whose share of the sample at or below it reaches p%.
std::size_t percentile_by_scan(const std::vector<std::size_t>& values, double p) {
  if (values.empty()) return 0;
  std::vector<std::size_t> s = values;
  std::sort(s.begin(), s.end());
  for (std::size_t v : s) {
    const auto at_or_below = static_cast<double>(std::count_if(s.begin(), s.end(), [&](std::size_t x) { return x <= v; }));
    if (at_or_below * 100.0 >= p * static_cast<double>(s.size()) - 1e-9) return v;
  }
  return s.back();
}

}  // namespace

TEST_CASE("tokenize matches the frozen reference cases") {
  std::ifstream in(std::string(REVREC_TEST_DATA) + "/tokenize_cases.tsv");
  REQUIRE(in);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    REQUIRE(tab != std::string::npos);
    const std::string input = unhex(line.substr(0, tab));
    std::vector<std::string> expected;
    for (const auto& h : split_on(line.substr(tab + 1), ',')) expected.push_back(unhex(h));
    INFO("input hex: " << line.substr(0, tab));
    CHECK(tokenize(input) == expected);
    ++n;
  }
  CHECK(n > 500);
}

TEST_CASE("tokenize examples") {
  CHECK(tokenize("Hello, World!") == std::vector<std::string>{"hello", "world"});
  CHECK(tokenize("  the THE (the) ") == std::vector<std::string>{"the", "the", "the"});
  CHECK(tokenize("...").empty());
  CHECK(tokenize("it's 5-star") == std::vector<std::string>{"it's", "5-star"});
}

TEST_CASE("build_vocab matches a full-sort reference") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    TokenizedCorpus corpus(40);
    for (auto& doc : corpus) {
      const std::size_t len = uniform_index(rng, 12);
      for (std::size_t w = 0; w < len; ++w) doc.push_back("w" + std::to_string(uniform_index(rng, 25)));
    }
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < corpus.size(); ++r) {
      if (uniform01(rng) < 0.7) rows.push_back(r);
    }
    const std::size_t cap = 1 + uniform_index(rng, 30);
    const Vocab v = build_vocab(corpus, rows, cap);
    const auto expected = full_sort_vocab(corpus, rows, cap);
    REQUIRE(v.size() == expected.size() + 2);
    for (std::size_t k = 0; k < expected.size(); ++k) {
      CHECK(v.token(static_cast<TokenId>(k + 2)) == expected[k]);
      CHECK(v.id(expected[k]) == static_cast<TokenId>(k + 2));
    }
    CHECK(v.id("never-seen") == Vocab::kOov);
  }
}

TEST_CASE("vocabulary ignores tokens outside the given rows") {
  TokenizedCorpus corpus{{"a", "b"}, {"secret"}, {"a"}};
  const std::size_t rows[] = {0, 2};
  const Vocab v = build_vocab(corpus, rows);
  CHECK(v.size() == 4);
  CHECK(v.id("secret") == Vocab::kOov);
  CHECK(v.token(2) == "a");
}

TEST_CASE("nearest-rank percentile agrees with a scan") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> v(uniform_index(rng, 30));
    for (auto& x : v) x = uniform_index(rng, 50);
    const double p = trial % 3 == 0 ? 98.0 : uniform(rng, 0.5, 100.0);
    CHECK(nearest_rank_percentile(v, p) == percentile_by_scan(v, p));
  }
  CHECK(nearest_rank_percentile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 98) == 10);
  CHECK(nearest_rank_percentile({5}, 1) == 5);
  CHECK(nearest_rank_percentile({}, 50) == 0);
}

TEST_CASE("prepare_text only sees training reviews") {
  auto d = revrec::testing::tiny_reviews(30, 20, 6, 5);
  // Plant a word that only appears outside training.
  auto base = std::make_shared<const Dataset>(*d);
  const SplitDataset probe = split(base, 4);
  auto edited = std::make_shared<Dataset>(d->scale());
  for (std::size_t r = 0; r < d->size(); ++r) {
    const auto& x = (*d)[r];
    const bool held_out = !std::binary_search(probe.train.begin(), probe.train.end(), r);
    edited->add(d->user_key(x.user), d->item_key(x.item), x.rating, held_out ? x.review + " zebra" : x.review,
                x.timestamp, x.seq);
  }
  const SplitDataset s = split(edited, 4);
  REQUIRE(s.train == probe.train);
  TextOptions opt;
  opt.skipgram.dim = 8;
  opt.skipgram.epochs = 1;
  const TextArtifacts t = prepare_text(s, opt);
  CHECK(t.vocab.id("zebra") == Vocab::kOov);
  std::set<TokenId> train_ids;
  for (std::size_t r : s.train) train_ids.insert(t.ids[r].begin(), t.ids[r].end());
  for (const auto* docs : {&t.concat, &t.per_review}) {
    for (const auto* side : {&docs->users, &docs->items}) {
      for (TokenId id : side->tokens) {
        if (id != Vocab::kPad) CHECK(train_ids.contains(id));
      }
    }
  }
  // Entities whose only reviews are held out get empty documents.
  for (std::size_t u = 0; u < edited->num_users(); ++u) {
    const bool has_train = std::any_of(s.train.begin(), s.train.end(), [&](std::size_t r) { return (*edited)[r].user == u; });
    if (!has_train) {
      CHECK(t.concat.users.length(u, 0) == 0);
      CHECK(t.per_review.users.used[u] == 0);
    }
  }
}

TEST_CASE("length caps pool users and items") {
  auto d = std::make_shared<Dataset>();
  d->add("u0", "i0", 3, "a b c d", 0, 0);
  d->add("u0", "i1", 3, "a", 0, 1);
  d->add("u0", "i2", 3, "a b", 0, 2);
  d->add("u1", "i0", 3, "", 0, 3);
  SplitDataset s{d};
  s.train = {0, 1, 2, 3};
  const TokenizedCorpus corpus = tokenize_all(*d);
  const Vocab v = build_vocab(corpus, s.train);
  const auto ids = encode_all(corpus, v);
  // Review lengths {4,1,2,0}; entity counts users {3,1} items {2,1,1}.
  CHECK(length_caps(s, ids, 98) == LengthCaps{4, 3});
  CHECK(length_caps(s, ids, 50) == LengthCaps{1, 1});
  CHECK(length_caps(s, ids, 1) == LengthCaps{1, 1});
}

TEST_CASE("document layouts") {
  auto d = std::make_shared<Dataset>();
  d->add("u0", "i0", 3, "one two three", 30, 0);
  d->add("u0", "i1", 3, "four", 10, 1);
  d->add("u0", "i2", 3, "five six", 20, 2);
  d->add("u1", "i0", 3, "seven", 5, 3);
  SplitDataset s{d};
  s.train = {0, 1, 2, 3};
  const TokenizedCorpus corpus = tokenize_all(*d);
  const Vocab v = build_vocab(corpus, s.train);
  const auto ids = encode_all(corpus, v);
  auto word = [&](TokenId id) { return v.token(id); };

  SUBCASE("concat is oldest first and truncated") {
    const ReviewDocs docs = build_documents(s, ids, {3, 3}, DocLayout::Concat, 4);
    CHECK(docs.users.slots == 1);
    CHECK(docs.users.seq_len == 4);
    const auto seq = docs.users.sequence(0, 0);
    CHECK(word(seq[0]) == "four");
    CHECK(word(seq[1]) == "five");
    CHECK(word(seq[2]) == "six");
    CHECK(word(seq[3]) == "one");
    CHECK(docs.users.length(0, 0) == 4);
    CHECK(docs.users.length(1, 0) == 1);
    CHECK(docs.users.sequence(1, 0)[1] == Vocab::kPad);
  }
  SUBCASE("per-review keeps the most recent reviews") {
    const ReviewDocs docs = build_documents(s, ids, {2, 2}, DocLayout::PerReview);
    CHECK(docs.users.slots == 2);
    CHECK(docs.users.used[0] == 2);
    CHECK(word(docs.users.sequence(0, 0)[0]) == "five");
    CHECK(docs.users.counterpart_of(0, 0) == 2);
    CHECK(word(docs.users.sequence(0, 1)[0]) == "one");
    CHECK(word(docs.users.sequence(0, 1)[1]) == "two");
    CHECK(docs.users.length(0, 1) == 2);
    CHECK(docs.users.counterpart_of(0, 1) == 0);
    CHECK(docs.users.used[1] == 1);
    CHECK(docs.users.counterpart_of(1, 1) == -1);
    CHECK(docs.items.used[0] == 2);
    CHECK(docs.items.counterpart_of(0, 0) == 1);
    CHECK(docs.items.counterpart_of(0, 1) == 0);
  }
}

TEST_CASE("masked reviews occupy a slot with no tokens") {
  auto d = revrec::testing::tiny_reviews(10, 8, 4, 2);
  const SplitDataset s = mask_reviews(split(d, 1), 100.0, 1);
  TextOptions opt;
  opt.need_embeddings = false;
  const TextArtifacts t = prepare_text(s, opt);
  CHECK(t.vocab.size() == 2);
  CHECK(t.caps == LengthCaps{1, t.caps.max_reviews});
  for (TokenId id : t.per_review.users.tokens) CHECK(id == Vocab::kPad);
  std::size_t used = 0;
  for (auto u : t.per_review.users.used) used += u;
  CHECK(used > 0);
}

TEST_CASE("skip-gram embeddings are deterministic with a zero padding row") {
  auto d = revrec::testing::tiny_reviews(20, 10, 5, 8);
  const SplitDataset s = split(d, 2);
  const TokenizedCorpus corpus = tokenize_all(*d);
  const Vocab v = build_vocab(corpus, s.train);
  const auto ids = encode_all(corpus, v);
  SkipGramOptions o;
  o.dim = 6;
  o.epochs = 2;
  const EmbeddingTable a = train_embeddings(ids, s.train, v.size(), o);
  const EmbeddingTable b = train_embeddings(ids, s.train, v.size(), o);
  CHECK(a.values == b.values);
  CHECK(a.rows == v.size());
  for (double x : a.row(0)) CHECK(x == 0.0);
  bool nonzero = false;
  for (double x : a.row(2)) nonzero = nonzero || x != 0.0;
  CHECK(nonzero);
  o.seed = 2;
  CHECK(train_embeddings(ids, s.train, v.size(), o).values != a.values);

  const std::vector<TokenIds> empty(3);
  const std::size_t rows[] = {0, 1, 2};
  CHECK_THROWS_AS(train_embeddings(empty, rows, 2, o), DataError);
}

TEST_CASE("related words end up closer than unrelated ones") {
  // Two disjoint topics; words co-occur only within a topic.
  Rng rng(1);
  std::vector<TokenIds> ids;
  std::vector<std::size_t> rows;
  for (int s = 0; s < 600; ++s) {
    const TokenId base = s % 2 == 0 ? 2 : 7;
    TokenIds sent;
    for (int w = 0; w < 8; ++w) sent.push_back(base + static_cast<TokenId>(uniform_index(rng, 5)));
    rows.push_back(ids.size());
    ids.push_back(sent);
  }
  SkipGramOptions o;
  o.dim = 10;
  o.epochs = 3;
  const EmbeddingTable t = train_embeddings(ids, rows, 12, o);
  auto cosine = [&](std::size_t a, std::size_t b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < t.dim; ++j) {
      ab += t.row(a)[j] * t.row(b)[j];
      aa += t.row(a)[j] * t.row(a)[j];
      bb += t.row(b)[j] * t.row(b)[j];
    }
    return ab / std::sqrt(aa * bb);
  };
  CHECK(cosine(2, 3) > cosine(2, 8));
  CHECK(cosine(7, 9) > cosine(4, 9));
}

TEST_CASE("text caches round-trip") {
  TempDir dir("text");
  auto d = revrec::testing::tiny_reviews(12, 9, 4, 6);
  const SplitDataset s = split(d, 5);
  TextOptions opt;
  opt.skipgram.dim = 4;
  opt.skipgram.epochs = 1;
  const TextArtifacts t = prepare_text(s, opt);

  t.vocab.save(dir / "vocab.txt");
  const Vocab v = Vocab::load(dir / "vocab.txt");
  CHECK(v.fingerprint() == t.vocab.fingerprint());

  t.embeddings.save(dir / "emb.bin");
  const EmbeddingTable e = EmbeddingTable::load(dir / "emb.bin");
  CHECK(e.rows == t.embeddings.rows);
  CHECK(e.values == t.embeddings.values);

  for (const auto* docs : {&t.concat, &t.per_review}) {
    save_documents(*docs, dir / "docs.bin");
    const ReviewDocs back = load_documents(dir / "docs.bin");
    CHECK(back.layout == docs->layout);
    CHECK(back.users.tokens == docs->users.tokens);
    CHECK(back.items.counterpart == docs->items.counterpart);
    CHECK(back.items.used == docs->items.used);
  }

  revrec::testing::write_file(dir / "junk.bin", "RVEMB00X12345678");
  CHECK_THROWS_AS(EmbeddingTable::load(dir / "junk.bin"), DataError);
  CHECK_THROWS_AS(load_documents(dir / "junk.bin"), DataError);
  revrec::testing::write_file(dir / "bad_vocab.txt", "x\ny\n");
  CHECK_THROWS_AS(Vocab::load(dir / "bad_vocab.txt"), DataError);
}
