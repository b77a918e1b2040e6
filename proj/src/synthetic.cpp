#include "revrec/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "revrec/error.hpp"
#include "revrec/random.hpp"

namespace revrec {

namespace {

std::vector<double> normals(Rng& rng, std::size_t n, double sd) {
  std::vector<double> v(n);
  for (double& x : v) x = sd * normal(rng);
  return v;
}

std::size_t draw_cdf(Rng& rng, const std::vector<double>& cdf) {
  const double x = uniform01(rng) * cdf.back();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), x);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace

PlantedData make_planted(const PlantedOptions& o) {
  if (o.users == 0 || o.items == 0 || o.latent_dim == 0) throw ConfigError("make_planted: empty shape");
  if (o.interactions > o.users * o.items) throw ConfigError("make_planted: more interactions than pairs");
  Rng rng(derive_seed(o.seed, {0x504c414e54}));
  const std::size_t k = o.latent_dim;
  const auto ub = normals(rng, o.users, o.bias_sd);
  const auto ib = normals(rng, o.items, o.bias_sd);
  const auto uf = normals(rng, o.users * k, o.factor_sd);
  const auto itf = normals(rng, o.items * k, o.factor_sd);

  // Item of every interaction: cold items get 1..3, the rest by popularity.
  std::vector<std::size_t> item_order(o.items);
  for (std::size_t i = 0; i < o.items; ++i) item_order[i] = i;
  shuffle(std::span<std::size_t>(item_order), rng);
  const auto n_cold = static_cast<std::size_t>(std::llround(o.cold_item_fraction * static_cast<double>(o.items)));
  std::vector<std::size_t> item_of;
  for (std::size_t c = 0; c < n_cold && c < o.items; ++c) {
    const std::size_t times = 1 + uniform_index(rng, 3);
    for (std::size_t t = 0; t < times && item_of.size() < o.interactions; ++t) item_of.push_back(item_order[c]);
  }
  std::vector<double> cdf;
  double acc = 0.0;
  for (std::size_t r = n_cold; r < o.items; ++r) {
    acc += std::pow(static_cast<double>(r - n_cold) + 10.0, -o.popularity_skew);
    cdf.push_back(acc);
  }
  const std::size_t cap_per_item = o.users;
  std::vector<std::size_t> per_item(o.items, 0);
  for (std::size_t i : item_of) ++per_item[i];
  while (item_of.size() < o.interactions && !cdf.empty()) {
    const std::size_t i = item_order[n_cold + draw_cdf(rng, cdf)];
    if (per_item[i] >= cap_per_item) continue;
    ++per_item[i];
    item_of.push_back(i);
  }
  shuffle(std::span<std::size_t>(item_of), rng);

  std::unordered_set<std::uint64_t> taken;
  auto dataset = std::make_shared<Dataset>(RatingScale{1.0, 5.0});
  std::uint64_t seq = 0;
  for (std::size_t i : item_of) {
    std::size_t u = uniform_index(rng, o.users);
    while (!taken.insert(static_cast<std::uint64_t>(u) * o.items + i).second) u = uniform_index(rng, o.users);
    double dot = 0.0;
    for (std::size_t j = 0; j < k; ++j) dot += uf[u * k + j] * itf[i * k + j];
    const double raw = o.alpha + ub[u] + ib[i] + dot + o.noise * normal(rng);
    const double rating = std::clamp(raw, 1.0, 5.0);

    std::string review;
    if (o.with_reviews) {
      std::vector<double> theta(k);
      double mx = -1e300;
      for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, theta[j] = o.kappa * itf[i * k + j]);
      std::vector<double> tcdf(k);
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) tcdf[j] = (z += std::exp(theta[j] - mx));
      for (std::size_t t = 0; t < o.topic_tokens; ++t) {
        const std::size_t topic = draw_cdf(rng, tcdf);
        review += "t" + std::to_string(topic) + "w" + std::to_string(uniform_index(rng, o.words_per_topic)) + ' ';
      }
      const auto level = static_cast<int>(std::lround(rating));
      for (std::size_t t = 0; t < o.sentiment_tokens; ++t) {
        review += "s" + std::to_string(level) + "w" + std::to_string(uniform_index(rng, o.sentiment_words)) + ' ';
      }
      if (!review.empty()) review.pop_back();
    }
    dataset->add("u" + std::to_string(u), "i" + std::to_string(i), rating, std::move(review),
                 1'300'000'000 + static_cast<std::int64_t>(seq) * 60, seq);
    ++seq;
  }

  PlantedData out;
  out.user_bias.assign(dataset->num_users(), 0.0);
  out.item_bias.assign(dataset->num_items(), 0.0);
  out.user_factors.assign(dataset->num_users() * k, 0.0);
  out.item_factors.assign(dataset->num_items() * k, 0.0);
  for (std::size_t u = 0; u < o.users; ++u) {
    const auto d = dataset->find_user("u" + std::to_string(u));
    if (d < 0) continue;
    out.user_bias[static_cast<std::size_t>(d)] = ub[u];
    std::copy_n(uf.begin() + static_cast<std::ptrdiff_t>(u * k), k,
                out.user_factors.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(d) * k));
  }
  for (std::size_t i = 0; i < o.items; ++i) {
    const auto d = dataset->find_item("i" + std::to_string(i));
    if (d < 0) continue;
    out.item_bias[static_cast<std::size_t>(d)] = ib[i];
    std::copy_n(itf.begin() + static_cast<std::ptrdiff_t>(i * k), k,
                out.item_factors.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(d) * k));
  }
  out.dataset = std::move(dataset);
  return out;
}

void write_ndjson(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const Interaction& x : d.interactions()) {
    const nlohmann::json j = {{"reviewerID", d.user_key(x.user)},
                              {"asin", d.item_key(x.item)},
                              {"overall", x.rating},
                              {"reviewText", x.review},
                              {"unixReviewTime", x.timestamp}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed on " + path.string());
}

}  // namespace revrec
