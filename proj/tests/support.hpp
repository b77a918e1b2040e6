#pragma once

// Shared fixtures and generators for the unit tests.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "revrec/corpus.hpp"
#include "revrec/random.hpp"

namespace revrec::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("revrec_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  out << content;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Random bipartite interaction graph without duplicate edges.
inline Dataset random_graph(Rng& rng, std::size_t max_users, std::size_t max_items, std::size_t max_edges) {
  const std::size_t nu = 1 + uniform_index(rng, max_users);
  const std::size_t ni = 1 + uniform_index(rng, max_items);
  const std::size_t ne = std::min(nu * ni, 1 + uniform_index(rng, max_edges));
  std::set<std::pair<std::size_t, std::size_t>> edges;
  while (edges.size() < ne) edges.emplace(uniform_index(rng, nu), uniform_index(rng, ni));
  std::vector<std::pair<std::size_t, std::size_t>> order(edges.begin(), edges.end());
  shuffle(std::span(order), rng);
  Dataset d;
  std::uint64_t seq = 0;
  for (auto [u, i] : order) {
    d.add("u" + std::to_string(u), "i" + std::to_string(i), static_cast<double>(1 + uniform_index(rng, 5)),
          "review " + std::to_string(seq), static_cast<std::int64_t>(seq), seq);
    ++seq;
  }
  return d;
}

/// Small dataset with word reviews, every user and item repeated.
inline std::shared_ptr<Dataset> tiny_reviews(std::size_t users, std::size_t items, std::size_t per_user,
                                             std::uint64_t seed) {
  static const char* words[] = {"great", "bad", "sound", "battery", "screen", "cheap", "solid", "broke",
                                "love", "hate", "fast", "slow", "bright", "dim", "fine", "ok"};
  Rng rng(seed);
  auto d = std::make_shared<Dataset>();
  std::uint64_t seq = 0;
  for (std::size_t u = 0; u < users; ++u) {
    std::set<std::size_t> mine;
    while (mine.size() < std::min(per_user, items)) mine.insert(uniform_index(rng, items));
    for (std::size_t i : mine) {
      std::string review;
      const std::size_t n = 2 + uniform_index(rng, 6);
      for (std::size_t w = 0; w < n; ++w) review += std::string(words[uniform_index(rng, 16)]) + ' ';
      d->add("u" + std::to_string(u), "i" + std::to_string(i), static_cast<double>(1 + uniform_index(rng, 5)),
             review, static_cast<std::int64_t>(1000 + uniform_index(rng, 50)), seq++);
    }
  }
  return d;
}

using Edge = std::pair<std::string, std::string>;

inline std::vector<Edge> edges_of(const Dataset& d) {
  std::vector<Edge> out;
  for (const auto& x : d.interactions()) out.emplace_back(d.user_key(x.user), d.item_key(x.item));
  return out;
}

// Repeatedly drops every edge touching a node of degree < k, recounting all
// degrees from scratch each pass, until nothing changes.
inline std::vector<Edge> brute_force_core(std::vector<Edge> edges, std::size_t k) {
  while (true) {
    std::map<std::string, std::size_t> du, di;
    for (const auto& [u, i] : edges) {
      ++du[u];
      ++di[i];
    }
    std::vector<Edge> kept;
    for (const auto& e : edges) {
      if (du[e.first] >= k && di[e.second] >= k) kept.push_back(e);
    }
    if (kept.size() == edges.size()) return kept;
    edges = std::move(kept);
  }
}

}  // namespace revrec::testing
