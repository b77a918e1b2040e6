#include <doctest.h>

#include <cmath>

#include "revrec/autodiff.hpp"
#include "revrec/error.hpp"
#include "support.hpp"

using namespace revrec;
using namespace revrec::ad;
using revrec::testing::TempDir;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool grad = true) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, -1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

void check_close(std::span<const double> a, std::span<const double> b, double tol = 1e-12) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

// Independent central difference on a single coordinate.
double numeric_partial(const Program& p, Tensor x, std::size_t i, double h = 1e-6) {
  const double keep = x[i];
  x[i] = keep + h;
  Tape a(TapeOptions{false, true});
  const double up = p(a).item();
  x[i] = keep - h;
  Tape b(TapeOptions{false, true});
  const double down = p(b).item();
  x[i] = keep;
  return (up - down) / (2 * h);
}

void expect_grad_ok(const Program& p, const NamedTensors& params) {
  const GradCheckReport r = grad_check(p, params);
  INFO("worst " << r.worst_relative_error << " at " << r.worst_location);
  CHECK(r.passed);
  CHECK(r.checked > 0);
}

}  // namespace

TEST_CASE("elementwise operators") {
  Tape t;
  const Tensor a = Tensor::from({3}, {1, -2, 3});
  const Tensor b = Tensor::from({3}, {4, 5, -6});
  check_close(vals(add(t, a, b)), std::vector<double>{5, 3, -3});
  check_close(vals(sub(t, a, b)), std::vector<double>{-3, -7, 9});
  check_close(vals(mul(t, a, b)), std::vector<double>{4, -10, -18});
  check_close(vals(scale(t, a, -2)), std::vector<double>{-2, 4, -6});
  check_close(vals(add_scalar(t, a, Tensor::scalar(0.5))), std::vector<double>{1.5, -1.5, 3.5});
  check_close(vals(mul_scalar(t, Tensor::scalar(3), a)), std::vector<double>{3, -6, 9});
  check_close(vals(relu(t, a)), std::vector<double>{1, 0, 3});
  check_close(vals(tanh(t, a)), std::vector<double>{std::tanh(1.0), std::tanh(-2.0), std::tanh(3.0)});
  CHECK(dot(t, a, b).item() == -24);
  CHECK(sum(t, a).item() == 2);
  CHECK_THROWS_AS(add(t, a, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("matmul, bias, row_dot and concat against loops") {
  Rng rng(1);
  Tape t;
  const Tensor a = random_tensor(rng, {4, 3});
  const Tensor b = random_tensor(rng, {3, 5});
  const Tensor bias = random_tensor(rng, {5});
  const Tensor m = add_bias(t, matmul(t, a, b), bias);
  CHECK(m.shape() == Shape{4, 5});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = bias[j];
      for (std::size_t k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 5 + j];
      CHECK(m[i * 5 + j] == doctest::Approx(s).epsilon(1e-14));
    }
  }
  const Tensor c = random_tensor(rng, {4, 3});
  const Tensor rd = row_dot(t, a, c);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) s += a[i * 3 + k] * c[i * 3 + k];
    CHECK(rd[i] == doctest::Approx(s));
  }
  const Tensor cat = concat(t, a, random_tensor(rng, {4, 2}));
  CHECK(cat.shape() == Shape{4, 5});
  CHECK(cat[5] == a[3]);
  CHECK_THROWS_AS(matmul(t, a, a), ShapeError);
  CHECK_THROWS_AS(concat(t, a, random_tensor(rng, {3, 2})), ShapeError);
}

TEST_CASE("softmax rows are probability vectors and log_softmax agrees") {
  Rng rng(2);
  Tape t;
  Tensor x = random_tensor(rng, {3, 4});
  x[0] = 800;  // overflow guard
  const Tensor s = softmax(t, x);
  const Tensor ls = log_softmax(t, x);
  for (std::size_t r = 0; r < 3; ++r) {
    double hi = x[r * 4];
    for (std::size_t c = 1; c < 4; ++c) hi = std::max(hi, x[r * 4 + c]);
    double z = 0;
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(x[r * 4 + c] - hi);
    double total = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      total += s[r * 4 + c];
      CHECK(ls[r * 4 + c] == doctest::Approx(x[r * 4 + c] - hi - std::log(z)).epsilon(1e-12));
      CHECK(s[r * 4 + c] == doctest::Approx(std::exp(x[r * 4 + c] - hi) / z).epsilon(1e-12));
    }
    CHECK(total == doctest::Approx(1.0));
  }
}

TEST_CASE("conv1d matches a naive same-padded convolution") {
  Rng rng(3);
  for (std::size_t width : {1, 3, 5}) {
    const std::size_t n = 6, d = 2, f = 3;
    const Tensor seq = random_tensor(rng, {n, d});
    const Tensor w = random_tensor(rng, {width * d, f});
    const Tensor b = random_tensor(rng, {f});
    Tape t;
    const Tensor out = conv1d(t, seq, w, b, width);
    REQUIRE(out.shape() == Shape{n, f});
    const auto half = static_cast<long>(width / 2);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t k = 0; k < f; ++k) {
        double s = b[k];
        for (std::size_t o = 0; o < width; ++o) {
          const long src = static_cast<long>(p) + static_cast<long>(o) - half;
          if (src < 0 || src >= static_cast<long>(n)) continue;
          for (std::size_t j = 0; j < d; ++j) s += seq[static_cast<std::size_t>(src) * d + j] * w[(o * d + j) * f + k];
        }
        CHECK(out[p * f + k] == doctest::Approx(s).epsilon(1e-13));
      }
    }
  }
  Tape t;
  CHECK_THROWS_AS(conv1d(t, Tensor::zeros({4, 2}), Tensor::zeros({4, 1}), Tensor::zeros({1}), 2), ShapeError);
}

TEST_CASE("max_over_time picks the earliest maximum") {
  Tape t;
  const Tensor x = Tensor::from({3, 2}, {1, 5, 7, 5, 7, 2}, true);
  const Tensor m = max_over_time(t, x);
  check_close(vals(m), std::vector<double>{7, 5});
  t.backward(sum(t, m));
  check_close(std::vector<double>(x.grad().begin(), x.grad().end()), std::vector<double>{0, 1, 1, 0, 0, 0});
}

TEST_CASE("gather, embed lookup and gather_sum") {
  Tape t;
  const Tensor table = Tensor::from({3, 2}, {0, 0, 1, 2, 3, 4}, true);
  const std::size_t ids[] = {2, 1, 2};
  const Tensor g = gather_rows(t, table, ids);
  check_close(vals(g), std::vector<double>{3, 4, 1, 2, 3, 4});
  const std::int32_t tok[] = {0, 2, 2};
  const Tensor e = embed_lookup(t, table, tok);
  const std::size_t idx[] = {1, 5};
  const double wts[] = {2.0, -1.0};
  const Tensor gs = gather_sum(t, table, idx, wts);
  CHECK(gs.item() == -4.0);
  t.backward(add(t, sum(t, g), add(t, sum(t, e), gs)));
  // Row 0 is padding in the embed lookup and unused elsewhere except via idx 1.
  check_close(std::vector<double>(table.grad().begin(), table.grad().end()),
              std::vector<double>{0, 2, 1, 1, 4, 3});
}

TEST_CASE("padding ids embed to zero whatever the table holds") {
  Tape t;
  const Tensor table = Tensor::from({2, 2}, {9, 9, 1, 2}, true);
  const std::int32_t tok[] = {1, 0};
  const Tensor e = embed_lookup(t, table, tok);
  check_close(vals(e), std::vector<double>{1, 2, 0, 0});
  t.backward(sum(t, e));
  check_close(std::vector<double>(table.grad().begin(), table.grad().end()), std::vector<double>{0, 0, 1, 1});
}

TEST_CASE("dropout is identity at evaluation and unbiased in training") {
  const Tensor x = Tensor::from({2000}, std::vector<double>(2000, 1.0));
  Tape eval(TapeOptions{false, false});
  check_close(vals(dropout(eval, x, 0.5)), vals(x));
  Tape train(TapeOptions{true, true, false, 9});
  const Tensor y = dropout(train, x, 0.5);
  std::size_t zeros = 0;
  double total = 0;
  for (double v : y.values()) {
    zeros += v == 0.0;
    CHECK((v == 0.0 || v == 2.0));
    total += v;
  }
  CHECK(zeros > 850);
  CHECK(zeros < 1150);
  CHECK(total / 2000 == doctest::Approx(1.0).epsilon(0.1));
  Tape again(TapeOptions{true, true, false, 9});
  check_close(vals(dropout(again, x, 0.5)), vals(y));
}

TEST_CASE("mse_loss") {
  Tape t;
  const Tensor p = Tensor::from({4}, {1, 2, 3, 4}, true);
  const double target[] = {1, 1, 1, 1};
  const Tensor l = mse_loss(t, p, target);
  CHECK(l.item() == doctest::Approx(14.0 / 4));
  t.backward(l);
  check_close(std::vector<double>(p.grad().begin(), p.grad().end()), std::vector<double>{0, 0.5, 1, 1.5});
}

TEST_CASE("backward agrees with an independent finite difference") {
  Rng rng(4);
  const Tensor w = random_tensor(rng, {3, 2});
  const Tensor x = random_tensor(rng, {4, 3}, false);
  const double target[] = {0.1, -0.3, 0.7, 0.2};
  const Program p = [&](Tape& t) {
    const Tensor h = tanh(t, matmul(t, x, w));
    const Tensor ones = Tensor::from({2, 1}, {1.0, -0.5});
    return mse_loss(t, reshape(t, matmul(t, h, ones), {4}), target);
  };
  Tape t;
  t.backward(p(t));
  const std::vector<double> analytic(w.grad().begin(), w.grad().end());
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(analytic[i] == doctest::Approx(numeric_partial(p, w, i)).epsilon(1e-6));
  }
}

TEST_CASE("grad_check passes for every operator") {
  Rng rng(5);
  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {3, 4});
  const Tensor m = random_tensor(rng, {4, 2});
  const Tensor bias = random_tensor(rng, {2});
  const Tensor s = random_tensor(rng, {1});
  const Tensor v = random_tensor(rng, {4});
  const Tensor seq = random_tensor(rng, {5, 3});
  const Tensor filt = random_tensor(rng, {9, 2});
  const Tensor table = random_tensor(rng, {4, 3});
  const Tensor head = random_tensor(rng, {2});

  auto to_scalar = [](Tape& t, const Tensor& x) {
    // Weighted sum so gradients differ per coordinate.
    std::vector<double> w(x.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i);
    std::vector<std::size_t> idx(x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather_sum(t, x, idx, w);
  };

  expect_grad_ok([&](Tape& t) { return to_scalar(t, add(t, a, b)); }, {{"a", a}, {"b", b}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, sub(t, a, b)); }, {{"a", a}, {"b", b}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, mul(t, a, b)); }, {{"a", a}, {"b", b}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, scale(t, a, 1.7)); }, {{"a", a}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, add_scalar(t, a, s)); }, {{"a", a}, {"s", s}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, mul_scalar(t, s, a)); }, {{"a", a}, {"s", s}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, add_bias(t, matmul(t, a, m), bias)); },
                 {{"a", a}, {"m", m}, {"bias", bias}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, relu(t, a)); }, {{"a", a}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, tanh(t, a)); }, {{"a", a}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, softmax(t, a)); }, {{"a", a}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, log_softmax(t, a)); }, {{"a", a}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, concat(t, a, b)); }, {{"a", a}, {"b", b}});
  expect_grad_ok([&](Tape& t) { return dot(t, v, mul(t, v, v)); }, {{"v", v}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, row_dot(t, a, b)); }, {{"a", a}, {"b", b}});
  expect_grad_ok([&](Tape& t) { return sum(t, mul(t, a, a)); }, {{"a", a}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, reshape(t, a, {4, 3})); }, {{"a", a}});
  expect_grad_ok(
      [&](Tape& t) {
        const Tensor rows[] = {v, mul(t, v, v)};
        return to_scalar(t, stack_rows(t, rows));
      },
      {{"v", v}});
  const std::size_t ids[] = {3, 0, 3, 1};
  expect_grad_ok([&](Tape& t) { return to_scalar(t, gather_rows(t, table, ids)); }, {{"table", table}});
  const std::int32_t tok[] = {2, 0, 3, 2, 1};
  expect_grad_ok(
      [&](Tape& t) {
        const Tensor e = embed_lookup(t, table, tok);
        const Tensor c = conv1d(t, e, filt, bias, 3);
        return dot(t, max_over_time(t, relu(t, c)), head);
      },
      {{"table", table}, {"filt", filt}, {"bias", bias}, {"head", head}});
  expect_grad_ok([&](Tape& t) { return to_scalar(t, conv1d(t, seq, filt, bias, 3)); },
                 {{"seq", seq}, {"filt", filt}, {"bias", bias}});
  const double target[] = {0.5, -1, 2, 0};
  expect_grad_ok([&](Tape& t) { return mse_loss(t, v, target); }, {{"v", v}});
}

TEST_CASE("grad_check catches a wrong backward") {
  Rng rng(6);
  const Tensor x = random_tensor(rng, {3});
  const Program broken = [&](Tape& t) {
    Tensor out = Tensor::zeros({1}, true);
    for (double v : x.values()) out[0] += v * v;
    t.record(out, {x}, [x, out]() {
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += out.grad()[0] * x[i];  // missing factor 2
    });
    return out;
  };
  CHECK_FALSE(grad_check(broken, NamedTensors{{"x", x}}).passed);
}

TEST_CASE("backward requires a scalar and a recording tape") {
  Tape t;
  const Tensor a = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(t.backward(scale(t, a, 2)), ShapeError);
  Tape off(TapeOptions{false, false});
  CHECK_THROWS_AS(off.backward(sum(off, a)), Error);
}

TEST_CASE("parameters round-trip through the checkpoint format") {
  TempDir dir("ad");
  Rng rng(8);
  NamedTensors ps{{"w", random_tensor(rng, {3, 2})}, {"b", random_tensor(rng, {2})}, {"s", Tensor::scalar(-1.5)}};
  save_parameters(dir / "p.bin", ps);
  const auto back = load_parameters(dir / "p.bin");
  REQUIRE(back.size() == 3);
  for (const auto& [name, t] : ps) {
    REQUIRE(back.contains(name));
    CHECK(back.at(name).shape() == t.shape());
    CHECK(vals(back.at(name)) == vals(t));
  }
  revrec::testing::write_file(dir / "bad.bin", "RVCKPT0");
  CHECK_THROWS_AS(load_parameters(dir / "bad.bin"), DataError);
}
