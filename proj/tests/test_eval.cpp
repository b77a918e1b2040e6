#include <doctest.h>

#include <cmath>
#include <sstream>

#include "revrec/error.hpp"
#include "revrec/eval.hpp"
#include "support.hpp"

using namespace revrec;

namespace {

// Every row goes to test. Each user rates one item 5 and `negatives` others below 5.
SplitDataset ranking_fixture(std::size_t users, std::size_t negatives, std::uint64_t seed) {
  auto d = std::make_shared<Dataset>();
  Rng rng(seed);
  std::uint64_t seq = 0;
  for (std::size_t u = 0; u < users; ++u) {
    const std::string uk = "u" + std::to_string(u);
    d->add(uk, "i0", 5, "", 0, seq++);
    for (std::size_t j = 1; j <= negatives; ++j) {
      d->add(uk, "i" + std::to_string(j), static_cast<double>(1 + uniform_index(rng, 4)), "", 0, seq++);
    }
  }
  SplitDataset s{d};
  for (std::size_t r = 0; r < d->size(); ++r) s.test.push_back(r);
  return s;
}

Scorer truth_scorer(const SplitDataset& s) {
  return [&s](std::span<const UserItem> pairs) {
    std::vector<double> out;
    for (const auto& p : pairs) {
      for (std::size_t r : s.test) {
        if (s.dataset()[r].user == p.user && s.dataset()[r].item == p.item) out.push_back(s.dataset()[r].rating);
      }
    }
    return out;
  };
}

}  // namespace

TEST_CASE("mse") {
  const double p[] = {1, 2, 3};
  const double t[] = {1, 4, 0};
  CHECK(mse(p, t) == doctest::Approx(13.0 / 3));
  CHECK_THROWS_AS(mse(std::span<const double>(p, 2), t), DataError);
  CHECK_THROWS_AS(mse({}, {}), DataError);

  // Long-double reference on large, nearly cancelling values.
  Rng rng(1);
  std::vector<double> a(5000), b(5000);
  long double ref = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    a[k] = 1e6 + uniform(rng, 0, 1);
    b[k] = 1e6 + uniform(rng, 0, 1);
    const long double e = static_cast<long double>(a[k]) - static_cast<long double>(b[k]);
    ref += e * e;
  }
  ref /= static_cast<long double>(a.size());
  CHECK(mse(a, b) == doctest::Approx(static_cast<double>(ref)).epsilon(1e-9));
}

TEST_CASE("HR@1 of a random scorer is one in six") {
  const SplitDataset s = ranking_fixture(3000, 6, 2);
  Rng rng(5);
  const Scorer random_scores = [&](std::span<const UserItem> pairs) {
    std::vector<double> out(pairs.size());
    for (auto& x : out) x = uniform01(rng);
    return out;
  };
  const HitRate hr = hit_rate_at_1(random_scores, s, 1);
  CHECK(hr.eligible == 3000);
  CHECK(hr.skipped == 0);
  REQUIRE(hr.value.has_value());
  CHECK(std::abs(*hr.value - 1.0 / 6.0) < 0.025);
}

TEST_CASE("HR@1 of the true ratings is perfect, constants always miss") {
  const SplitDataset s = ranking_fixture(50, 7, 3);
  CHECK(hit_rate_at_1(truth_scorer(s), s, 4).value == 1.0);
  const Scorer constant = [](std::span<const UserItem> pairs) { return std::vector<double>(pairs.size(), 3.0); };
  CHECK(hit_rate_at_1(constant, s, 4).value == 0.0);
}

TEST_CASE("HR@1 is invariant to monotone transforms of the scores") {
  const SplitDataset s = ranking_fixture(200, 6, 4);
  const Scorer hashed = [](std::span<const UserItem> pairs) {
    std::vector<double> out;
    for (const auto& p : pairs) out.push_back(static_cast<double>(mix64(p.user * 131 + p.item) % 1000) / 1000.0);
    return out;
  };
  const Scorer squashed = [&](std::span<const UserItem> pairs) {
    auto v = hashed(pairs);
    for (double& x : v) x = std::exp(3 * x) - 7;
    return v;
  };
  const HitRate a = hit_rate_at_1(hashed, s, 9), b = hit_rate_at_1(squashed, s, 9);
  CHECK(a.hits == b.hits);
  CHECK(a.value == b.value);
}

TEST_CASE("HR@1 eligibility") {
  SplitDataset s = ranking_fixture(10, 4, 5);  // only four negatives: nobody eligible
  const Scorer any = [](std::span<const UserItem> pairs) { return std::vector<double>(pairs.size(), 0.0); };
  const HitRate hr = hit_rate_at_1(any, s, 1);
  CHECK_FALSE(hr.value.has_value());
  CHECK(hr.eligible == 0);
  CHECK(hr.skipped == 10);

  auto d = std::make_shared<Dataset>();
  for (int j = 0; j < 8; ++j) d->add("u", "i" + std::to_string(j), 3, "", 0, static_cast<std::uint64_t>(j));
  SplitDataset no_top{d};
  for (std::size_t r = 0; r < 8; ++r) no_top.test.push_back(r);
  CHECK_FALSE(hit_rate_at_1(any, no_top, 1).value.has_value());
}

TEST_CASE("frequency bucket bounds") {
  using B = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(frequency_bucket_bounds(0) == B{{0, 0}});
  CHECK(frequency_bucket_bounds(2) == B{{0, 0}, {1, 1}, {2, 2}});
  CHECK(frequency_bucket_bounds(5) == B{{0, 0}, {1, 1}, {2, 2}, {3, 4}, {5, 8}});
  CHECK(frequency_bucket_bounds(16).back() == std::pair<std::size_t, std::size_t>{9, 16});
  CHECK(frequency_bucket_bounds(17).back() == std::pair<std::size_t, std::size_t>{17, 32});
}

TEST_CASE("bucket improvements add up") {
  Rng rng(6);
  auto d = std::make_shared<const Dataset>(revrec::testing::random_graph(rng, 60, 40, 900));
  const SplitDataset s = split(d, 2);
  std::vector<double> model(s.test.size()), bias(s.test.size()), truth(s.test.size());
  for (std::size_t k = 0; k < s.test.size(); ++k) {
    truth[k] = (*d)[s.test[k]].rating;
    model[k] = truth[k] + uniform(rng, -1, 1);
    bias[k] = 3.0;
  }
  const auto self = bucket_improvement(model, model, s);
  for (const auto& b : self) CHECK(b.improvement == 0.0);

  const auto buckets = bucket_improvement(model, bias, s);
  std::size_t n = 0, items = 0;
  double wb = 0, wm = 0;
  for (const auto& b : buckets) {
    n += b.interactions;
    items += b.items;
    wb += b.bias_mse * static_cast<double>(b.interactions);
    wm += b.model_mse * static_cast<double>(b.interactions);
    if (b.interactions > 0) CHECK(b.improvement == doctest::Approx(b.bias_mse - b.model_mse));
  }
  CHECK(n == s.test.size());
  std::set<std::uint32_t> distinct;
  for (std::size_t r : s.test) distinct.insert((*d)[r].item);
  CHECK(items == distinct.size());
  CHECK(wb / static_cast<double>(n) == doctest::Approx(mse(bias, truth)));
  CHECK(wm / static_cast<double>(n) == doctest::Approx(mse(model, truth)));
  CHECK_THROWS_AS(bucket_improvement(std::span(model).first(1), bias, s), DataError);
}

TEST_CASE("items unseen in training land in bucket zero") {
  auto d = std::make_shared<Dataset>();
  d->add("a", "x", 4, "", 0, 0);
  d->add("b", "x", 2, "", 0, 1);
  d->add("c", "x", 5, "", 0, 2);
  d->add("a", "y", 1, "", 0, 3);
  d->add("a", "z", 3, "", 0, 4);
  SplitDataset s{d};
  s.train = {0, 1, 3};
  s.test = {2, 4};
  const double model[] = {5, 3};
  const double bias[] = {4, 4};
  const auto b = bucket_improvement(model, bias, s);
  REQUIRE(b.size() == 3);
  CHECK(b[0].items == 1);  // z
  CHECK(b[0].bias_mse == 1.0);
  CHECK(b[0].model_mse == 0.0);
  CHECK(b[1].interactions == 0);
  CHECK(b[1].improvement == 0.0);
  CHECK(b[2].items == 1);  // x, seen twice
  CHECK(b[2].improvement == 1.0);
}

TEST_CASE("density sweep stops at the first empty core") {
  auto d = std::make_shared<Dataset>();
  std::uint64_t seq = 0;
  Rng rng(7);
  auto add = [&](const std::string& u, const std::string& i) {
    d->add(u, i, static_cast<double>(1 + uniform_index(rng, 5)), "", 0, seq++);
  };
  // Three 2x2 bicliques survive the 2-core; the pendant edges do not.
  for (int c = 0; c < 3; ++c) {
    for (int u = 0; u < 2; ++u) {
      for (int i = 0; i < 2; ++i) add("u" + std::to_string(c * 2 + u), "i" + std::to_string(c * 2 + i));
    }
  }
  for (int p = 0; p < 6; ++p) add("pu" + std::to_string(p), "i" + std::to_string(p));
  REQUIRE(k_core(*d, 3).empty());

  TrainConfig cfg;
  cfg.max_epochs = 2;
  const ModelKind kinds[] = {ModelKind::MF};
  const SweepResult r = density_sweep(d, kinds, fixed_config(cfg), SweepOptions{});
  CHECK(r.axis == "k");
  REQUIRE(r.points.size() == 3);
  CHECK(r.points[0].stats.reviews == 18);
  CHECK(r.points[1].stats.reviews == 18);
  CHECK(r.points[2].stats.reviews == 12);
  CHECK(r.points[2].stats.users == 6);
  for (const auto& p : r.points) {
    REQUIRE(p.reports.size() == 1);
    CHECK(p.reports[0].meta.kind == ModelKind::MF);
    CHECK(p.reports[0].meta.k_core == static_cast<std::size_t>(p.value));
    CHECK_FALSE(p.reports[0].buckets.empty());
  }
}

TEST_CASE("mask sweep leaves review-free models untouched") {
  auto d = revrec::testing::tiny_reviews(30, 15, 6, 8);
  const SplitDataset s = split(d, 3);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.latent_dim = 3;
  cfg.cnn_filters = 4;
  SweepOptions opt;
  opt.text.skipgram.dim = 4;
  opt.text.skipgram.epochs = 1;
  opt.text.concat_len = 30;
  const ModelKind kinds[] = {ModelKind::Bias, ModelKind::DeepCoNN};
  const double xs[] = {0, 50, 100};
  const SweepResult r = mask_sweep(s, kinds, xs, fixed_config(cfg), opt);
  REQUIRE(r.points.size() == 3);
  for (const auto& p : r.points) {
    CHECK(p.reports[0].test_mse == r.points[0].reports[0].test_mse);
    CHECK(p.reports[0].meta.mask_percent == p.value);
  }
  const auto zero = mask_reviews(s, 0, opt.mask_seed);
  CHECK(zero.dataset().fingerprint() == d->fingerprint());
  const double bad[] = {10, 5};
  CHECK_THROWS_AS(mask_sweep(s, kinds, bad, fixed_config(cfg), opt), ConfigError);
  const double over[] = {120};
  CHECK_THROWS_AS(mask_sweep(s, kinds, over, fixed_config(cfg), opt), ConfigError);
}

TEST_CASE("report CSV layout") {
  MetricReport r;
  r.meta.dataset = "toys";
  r.meta.kind = ModelKind::DeepCoNNPlus;
  r.meta.k_core = 5;
  r.meta.mask_percent = 12.5;
  r.meta.config.seed = 3;
  r.meta.config.latent_dim = 4;
  r.meta.config.l2 = 1e-6;
  r.meta.config.dropout = 0.4;
  r.val_mse = 0.5;
  r.test_mse = 1.0 / 3.0;
  r.hit_rate.eligible = 2;
  r.hit_rate.skipped = 1;
  r.stats = {10, 4, 3};
  r.buckets = {{0, 0, 1, 2, 1.5, 1.25, 0.25}};
  MetricReport with_hr = r;
  with_hr.hit_rate.value = 0.5;
  const MetricReport both[] = {r, with_hr};

  std::ostringstream out;
  write_report_csv(out, both);
  const std::string id = config_id(r.meta.config);
  CHECK(id.size() == 12);
  CHECK(out.str() ==
        "# revrec-report v1\n"
        "dataset,k,mask,model,config_id,seed,latent_dim,l2,dropout,learning_rate,reviews,users,items,"
        "val_mse,test_mse,hr1,hr1_eligible,hr1_skipped\n"
        "toys,5,12.5,deepconn++," + id + ",3,4,1e-06,0.4,0.001,10,4,3,0.5,0.3333333333333333,NA,2,1\n"
        "toys,5,12.5,deepconn++," + id + ",3,4,1e-06,0.4,0.001,10,4,3,0.5,0.3333333333333333,0.5,2,1\n");

  std::ostringstream bucket_out;
  write_bucket_csv(bucket_out, std::span(both).first(1));
  CHECK(bucket_out.str() ==
        "# revrec-buckets v1\n"
        "dataset,k,mask,model,config_id,seed,freq_lo,freq_hi,items,interactions,bias_mse,model_mse,"
        "improvement\n"
        "toys,5,12.5,deepconn++," + id + ",3,0,0,1,2,1.5,1.25,0.25\n");

  std::istringstream in(out.str());
  const auto rows = read_report_csv(in);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].model == "deepconn++");
  CHECK(rows[0].test_mse == r.test_mse);
  CHECK_FALSE(rows[0].hit_rate.has_value());
  CHECK(rows[1].hit_rate == 0.5);

  std::istringstream bad("dataset,k\n");
  CHECK_THROWS_AS(read_report_csv(bad), DataError);
}

TEST_CASE("summary tables average over seeds") {
  std::vector<ReportRow> rows;
  auto row = [](std::string ds, std::size_t k, std::string model, double m, std::optional<double> hr) {
    ReportRow r;
    r.dataset = std::move(ds);
    r.k_core = k;
    r.model = std::move(model);
    r.test_mse = m;
    r.hit_rate = hr;
    return r;
  };
  rows.push_back(row("b", 0, "mf", 1.0, 0.2));
  rows.push_back(row("b", 0, "mf", 2.0, 0.4));
  rows.push_back(row("b", 0, "bias", 1.25, std::nullopt));
  rows.push_back(row("a", 5, "narre", 0.75, 0.5));
  std::ostringstream m, rk;
  write_mse_table(m, rows);
  write_ranking_table(rk, rows);
  CHECK(m.str() ==
        "# revrec-table-mse v1\n"
        "dataset,k,mask,bias,mf,narre\n"
        "a,5,0,,,0.7500\n"
        "b,0,0,1.2500,1.5000,\n");
  CHECK(rk.str() ==
        "# revrec-table-ranking v1\n"
        "dataset,k,mask,bias,mf,narre\n"
        "a,5,0,,,0.7500 / 0.5000\n"
        "b,0,0,1.2500 / NA,1.5000 / 0.3000,\n");
}
