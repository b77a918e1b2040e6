#include "revrec/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "revrec/error.hpp"

namespace revrec::ad {

namespace {

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": shape " + to_string(a) + " " + why);
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) shape_error(op, x.shape(), "must have rank " + std::to_string(rank));
}

// Output tensor that tracks gradients iff the tape records and some input does.
Tensor make_output(const Tape& tape, Shape shape, std::initializer_list<const Tensor*> inputs) {
  bool needs = false;
  if (tape.recording()) {
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  }
  return Tensor::zeros(std::move(shape), needs);
}

void record_if(Tape& tape, const Tensor& out, std::vector<Tensor> inputs,
               std::function<void()> backward) {
  if (out.requires_grad()) tape.record(out, std::move(inputs), std::move(backward));
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto s = std::make_shared<Storage>();
  s->values.assign(shape_size(shape), 0.0);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + to_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->values = std::move(values);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return s_->values[0];
}

std::span<double> Tensor::grad() const {
  if (s_->grad.size() != s_->values.size()) s_->grad.assign(s_->values.size(), 0.0);
  return s_->grad;
}

void Tensor::zero_grad() const { s_->grad.assign(s_->values.size(), 0.0); }

Tensor Tensor::clone() const {
  Tensor c = from(s_->shape, s_->values, s_->requires_grad);
  return c;
}

Tape::Tape(TapeOptions options) : options_(options), rng_(derive_seed(options.dropout_seed, {0xd0})) {}

void Tape::record(const Tensor& out, std::vector<Tensor> inputs, std::function<void()> backward) {
  entries_.push_back({out, std::move(inputs), std::move(backward)});
}

void Tape::backward(Tensor loss) {
  if (!options_.record) throw Error("backward() on a tape that does not record");
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got " + to_string(loss.shape()));
  for (auto& e : entries_) {
    e.out.zero_grad();
    for (auto& in : e.inputs) {
      if (in.requires_grad()) in.zero_grad();
    }
  }
  loss.zero_grad();
  loss.grad()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  Tensor out = make_output(t, a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  record_if(t, out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  Tensor out = make_output(t, a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  record_if(t, out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor out = make_output(t, a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  record_if(t, out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
  return out;
}

Tensor scale(Tape& t, const Tensor& a, double c) {
  Tensor out = make_output(t, a.shape(), {&a});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a[i];
  record_if(t, out, {a}, [a, out, c]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
  return out;
}

Tensor add_scalar(Tape& t, const Tensor& a, const Tensor& s) {
  if (s.size() != 1) shape_error("add_scalar", s.shape(), "is not a single element");
  Tensor out = make_output(t, a.shape(), {&a, &s});
  const double sv = s[0];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + sv;
  record_if(t, out, {a, s}, [a, s, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (double v : g) acc += v;
      s.grad()[0] += acc;
    }
  });
  return out;
}

Tensor mul_scalar(Tape& t, const Tensor& s, const Tensor& a) {
  if (s.size() != 1) shape_error("mul_scalar", s.shape(), "is not a single element");
  Tensor out = make_output(t, a.shape(), {&a, &s});
  const double sv = s[0];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * a[i];
  record_if(t, out, {s, a}, [a, s, out]() mutable {
    auto g = out.grad();
    const double sv = s[0];
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sv * g[i];
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a[i];
      s.grad()[0] += acc;
    }
  });
  return out;
}

Tensor add_bias(Tape& t, const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (bias.size() != m) shape_error("add_bias", x.shape(), bias.shape());
  Tensor out = make_output(t, x.shape(), {&x, &bias});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = x[r * m + c] + bias[c];
  }
  record_if(t, out, {x, bias}, [x, bias, out, n, m]() mutable {
    auto g = out.grad();
    if (x.requires_grad()) {
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.grad();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
      }
    }
  });
  return out;
}

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out = make_output(t, {n, m}, {&a, &b});
  {
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) {
      double* orow = po + i * m;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        if (av == 0.0) continue;
        const double* brow = pb + p * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
      }
    }
  }
  record_if(t, out, {a, b}, [a, b, out, n, k, m]() mutable {
    const double* g = out.grad().data();
    if (a.requires_grad()) {
      double* ga = a.grad().data();
      const double* pb = b.values().data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * pb[p * m + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      double* gb = b.grad().data();
      const double* pa = a.values().data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * g[i * m + j];
        }
      }
    }
  });
  return out;
}

Tensor gather_rows(Tape& t, const Tensor& table, std::span<const std::size_t> ids) {
  require_rank("gather_rows", table, 2);
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  Tensor out = make_output(t, {ids.size(), cols}, {&table});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) shape_error("gather_rows", table.shape(), "indexed at row " + std::to_string(ids[r]));
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[r] * cols), cols,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  record_if(t, out, {table}, [table, out, idx = std::move(idx), cols]() mutable {
    auto g = out.grad();
    auto gt = table.grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) gt[idx[r] * cols + c] += g[r * cols + c];
    }
  });
  return out;
}

Tensor embed_lookup(Tape& t, const Tensor& table, std::span<const std::int32_t> ids,
                    std::int32_t padding_id) {
  require_rank("embed_lookup", table, 2);
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  Tensor out = make_output(t, {ids.size(), cols}, {&table});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= rows) {
      shape_error("embed_lookup", table.shape(), "indexed with token " + std::to_string(ids[r]));
    }
    if (ids[r] == padding_id) continue;  // constant zero row
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[r] * cols), cols,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  record_if(t, out, {table}, [table, out, idx = std::move(idx), cols, padding_id]() mutable {
    auto g = out.grad();
    auto gt = table.grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] == padding_id) continue;
      const auto row = static_cast<std::size_t>(idx[r]);
      for (std::size_t c = 0; c < cols; ++c) gt[row * cols + c] += g[r * cols + c];
    }
  });
  return out;
}

Tensor conv1d(Tape& t, const Tensor& seq, const Tensor& filters, const Tensor& bias,
              std::size_t width) {
  require_rank("conv1d", seq, 2);
  require_rank("conv1d", filters, 2);
  if (width % 2 == 0) shape_error("conv1d", filters.shape(), "needs an odd window width");
  const std::size_t n = seq.dim(0), d = seq.dim(1), f = filters.dim(1);
  if (filters.dim(0) != width * d) shape_error("conv1d", seq.shape(), filters.shape());
  if (bias.size() != f) shape_error("conv1d", filters.shape(), bias.shape());
  const auto pad = static_cast<std::ptrdiff_t>(width / 2);

  Tensor out = make_output(t, {n, f}, {&seq, &filters, &bias});
  const double* x = seq.values().data();
  const double* w = filters.values().data();
  double* o = out.values().data();
  for (std::size_t p = 0; p < n; ++p) {
    double* orow = o + p * f;
    std::copy_n(bias.values().data(), f, orow);
    for (std::size_t k = 0; k < width; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(p) + static_cast<std::ptrdiff_t>(k) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      const double* xrow = x + static_cast<std::size_t>(src) * d;
      const double* wblock = w + k * d * f;
      for (std::size_t j = 0; j < d; ++j) {
        const double xv = xrow[j];
        if (xv == 0.0) continue;
        const double* wrow = wblock + j * f;
        for (std::size_t c = 0; c < f; ++c) orow[c] += xv * wrow[c];
      }
    }
  }
  record_if(t, out, {seq, filters, bias}, [seq, filters, bias, out, n, d, f, width, pad]() mutable {
    const double* g = out.grad().data();
    const double* x = seq.values().data();
    const double* w = filters.values().data();
    double* gx = seq.requires_grad() ? seq.grad().data() : nullptr;
    double* gw = filters.requires_grad() ? filters.grad().data() : nullptr;
    double* gbias = bias.requires_grad() ? bias.grad().data() : nullptr;
    for (std::size_t p = 0; p < n; ++p) {
      const double* grow = g + p * f;
      // After max-over-time most rows carry no gradient.
      if (std::all_of(grow, grow + f, [](double v) { return v == 0.0; })) continue;
      if (gbias) {
        for (std::size_t c = 0; c < f; ++c) gbias[c] += grow[c];
      }
      for (std::size_t k = 0; k < width; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(p) + static_cast<std::ptrdiff_t>(k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
        const double* xrow = x + static_cast<std::size_t>(src) * d;
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t wr = (k * d + j) * f;
          if (gw && xrow[j] != 0.0) {
            const double xv = xrow[j];
            for (std::size_t c = 0; c < f; ++c) gw[wr + c] += xv * grow[c];
          }
          if (gx) {
            double acc = 0.0;
            for (std::size_t c = 0; c < f; ++c) acc += w[wr + c] * grow[c];
            gx[static_cast<std::size_t>(src) * d + j] += acc;
          }
        }
      }
    }
  });
  return out;
}

Tensor max_over_time(Tape& t, const Tensor& x) {
  require_rank("max_over_time", x, 2);
  const std::size_t n = x.dim(0), f = x.dim(1);
  if (n == 0) shape_error("max_over_time", x.shape(), "has no time steps");
  Tensor out = make_output(t, {f}, {&x});
  std::vector<std::size_t> arg(f, 0);
  for (std::size_t c = 0; c < f; ++c) out[c] = x[c];
  for (std::size_t p = 1; p < n; ++p) {
    for (std::size_t c = 0; c < f; ++c) {
      if (x[p * f + c] > out[c]) {
        out[c] = x[p * f + c];
        arg[c] = p;
      }
    }
  }
  if (t.tracking_kinks()) {
    std::uint64_t h = 0x6d61;
    for (std::size_t a : arg) h = mix64(h ^ a);
    t.note_kink(h);
  }
  record_if(t, out, {x}, [x, out, arg = std::move(arg), f]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t c = 0; c < f; ++c) gx[arg[c] * f + c] += g[c];
  });
  return out;
}

Tensor relu(Tape& t, const Tensor& x) {
  Tensor out = make_output(t, x.shape(), {&x});
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (t.tracking_kinks()) {
    std::uint64_t h = 0x72656c75;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) h = mix64(h ^ i);
    }
    t.note_kink(h);
  }
  record_if(t, out, {x}, [x, out]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) gx[i] += g[i];
    }
  });
  return out;
}

Tensor tanh(Tape& t, const Tensor& x) {
  Tensor out = make_output(t, x.shape(), {&x});
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  record_if(t, out, {x}, [x, out]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - out[i] * out[i]);
  });
  return out;
}

Tensor softmax(Tape& t, const Tensor& x) {
  if (x.rank() == 0 || x.size() == 0) shape_error("softmax", x.shape(), "is empty");
  const std::size_t m = x.shape().back(), rows = x.size() / m;
  Tensor out = make_output(t, x.shape(), {&x});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * m;
    double* o = out.values().data() + r * m;
    const double mx = *std::max_element(in, in + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < m; ++j) o[j] /= total;
  }
  record_if(t, out, {x}, [x, out, rows, m]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double inner = 0.0;
      for (std::size_t j = 0; j < m; ++j) inner += g[r * m + j] * out[r * m + j];
      for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += out[r * m + j] * (g[r * m + j] - inner);
    }
  });
  return out;
}

Tensor log_softmax(Tape& t, const Tensor& x) {
  if (x.rank() == 0 || x.size() == 0) shape_error("log_softmax", x.shape(), "is empty");
  const std::size_t m = x.shape().back(), rows = x.size() / m;
  Tensor out = make_output(t, x.shape(), {&x});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * m;
    double* o = out.values().data() + r * m;
    const double mx = *std::max_element(in, in + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(in[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < m; ++j) o[j] = in[j] - lse;
  }
  record_if(t, out, {x}, [x, out, rows, m]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < m; ++j) gsum += g[r * m + j];
      for (std::size_t j = 0; j < m; ++j) {
        gx[r * m + j] += g[r * m + j] - std::exp(out[r * m + j]) * gsum;
      }
    }
  });
  return out;
}

Tensor dropout(Tape& t, const Tensor& x, double p) {
  if (p < 0.0 || p >= 1.0) throw ShapeError("dropout: rate must lie in [0, 1)");
  if (!t.training() || p == 0.0) return x;
  Tensor out = make_output(t, x.shape(), {&x});
  std::vector<double> mask(x.size());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = uniform01(t.dropout_rng()) < p ? 0.0 : keep_scale;
    out[i] = x[i] * mask[i];
  }
  record_if(t, out, {x}, [x, out, mask = std::move(mask)]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
  return out;
}

Tensor concat(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0 || a.rank() > 2 ||
      (a.rank() == 2 && a.dim(0) != b.dim(0))) {
    shape_error("concat", a.shape(), b.shape());
  }
  const std::size_t rows = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t p = a.shape().back(), q = b.shape().back();
  Shape shape = a.shape();
  shape.back() = p + q;
  Tensor out = make_output(t, shape, {&a, &b});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(r * p), p,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * (p + q)));
    std::copy_n(b.values().begin() + static_cast<std::ptrdiff_t>(r * q), q,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * (p + q) + p));
  }
  record_if(t, out, {a, b}, [a, b, out, rows, p, q]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += g[r * (p + q) + j];
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += g[r * (p + q) + p + j];
      }
    }
  });
  return out;
}

Tensor dot(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || a.shape() != b.shape()) shape_error("dot", a.shape(), b.shape());
  Tensor out = make_output(t, {1}, {&a, &b});
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  out[0] = acc;
  record_if(t, out, {a, b}, [a, b, out]() mutable {
    const double g = out.grad()[0];
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * b[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * a[i];
    }
  });
  return out;
}

Tensor row_dot(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape() != b.shape()) shape_error("row_dot", a.shape(), b.shape());
  const std::size_t n = a.dim(0), k = a.dim(1);
  Tensor out = make_output(t, {n}, {&a, &b});
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += a[r * k + j] * b[r * k + j];
    out[r] = acc;
  }
  record_if(t, out, {a, b}, [a, b, out, n, k]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < k; ++j) ga[r * k + j] += g[r] * b[r * k + j];
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < k; ++j) gb[r * k + j] += g[r] * a[r * k + j];
      }
    }
  });
  return out;
}

Tensor sum(Tape& t, const Tensor& x) {
  Tensor out = make_output(t, {1}, {&x});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out[0] = acc;
  record_if(t, out, {x}, [x, out]() mutable {
    const double g = out.grad()[0];
    for (double& v : x.grad()) v += g;
  });
  return out;
}

Tensor reshape(Tape& t, const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) shape_error("reshape", x.shape(), "cannot become " + to_string(shape));
  Tensor out = make_output(t, std::move(shape), {&x});
  std::copy(x.values().begin(), x.values().end(), out.values().begin());
  record_if(t, out, {x}, [x, out]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

Tensor stack_rows(Tape& t, std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t m = rows[0].size();
  bool needs = false;
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.size() != m) shape_error("stack_rows", rows[0].shape(), r.shape());
    needs = needs || r.requires_grad();
  }
  Tensor out = Tensor::zeros({rows.size(), m}, needs && t.recording());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].values().begin(), rows[i].values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  std::vector<Tensor> inputs(rows.begin(), rows.end());
  record_if(t, out, inputs, [inputs, out, m]() mutable {
    auto g = out.grad();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i].requires_grad()) continue;
      auto gi = inputs[i].grad();
      for (std::size_t j = 0; j < m; ++j) gi[j] += g[i * m + j];
    }
  });
  return out;
}

Tensor gather_sum(Tape& t, const Tensor& x, std::span<const std::size_t> index,
                  std::span<const double> weights) {
  if (index.size() != weights.size()) {
    throw ShapeError("gather_sum: " + std::to_string(index.size()) + " indices but " +
                     std::to_string(weights.size()) + " weights");
  }
  Tensor out = make_output(t, {1}, {&x});
  double acc = 0.0;
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= x.size()) shape_error("gather_sum", x.shape(), "indexed at " + std::to_string(index[j]));
    acc += weights[j] * x[index[j]];
  }
  out[0] = acc;
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> w(weights.begin(), weights.end());
  record_if(t, out, {x}, [x, out, idx = std::move(idx), w = std::move(w)]() mutable {
    const double g = out.grad()[0];
    auto gx = x.grad();
    for (std::size_t j = 0; j < idx.size(); ++j) gx[idx[j]] += g * w[j];
  });
  return out;
}

Tensor mse_loss(Tape& t, const Tensor& pred, std::span<const double> target) {
  if (pred.rank() != 1 || pred.size() != target.size() || target.empty()) {
    shape_error("mse_loss", pred.shape(), Shape{target.size()});
  }
  const std::size_t n = target.size();
  Tensor out = make_output(t, {1}, {&pred});
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = pred[i] - target[i];
    acc += e * e;
  }
  out[0] = acc / static_cast<double>(n);
  std::vector<double> y(target.begin(), target.end());
  record_if(t, out, {pred}, [pred, out, y = std::move(y), n]() mutable {
    const double g = out.grad()[0] * 2.0 / static_cast<double>(n);
    auto gp = pred.grad();
    for (std::size_t i = 0; i < n; ++i) gp[i] += g * (pred[i] - y[i]);
  });
  return out;
}

GradCheckReport grad_check(const Program& program,
                           std::span<const std::pair<std::string, Tensor>> params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  std::vector<std::vector<double>> analytic;
  std::uint64_t base_signature = 0;
  {
    for (auto [name, p] : params) p.zero_grad();
    Tape tape({.training = false, .record = true, .track_kinks = true});
    Tensor loss = program(tape);
    tape.backward(loss);
    base_signature = tape.kink_signature();
    for (const auto& [name, p] : params) {
      auto g = p.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  auto evaluate = [&](std::uint64_t& signature) {
    Tape tape({.training = false, .record = false, .track_kinks = true});
    const double v = program(tape).item();
    signature = tape.kink_signature();
    return v;
  };

  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords) {
      shuffle(std::span<std::size_t>(coords), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double saved = p[c];
      std::uint64_t sig_plus = 0, sig_minus = 0;
      p[c] = saved + options.step;
      const double f_plus = evaluate(sig_plus);
      p[c] = saved - options.step;
      const double f_minus = evaluate(sig_minus);
      p[c] = saved;
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * options.step);
      const double a = analytic[pi][c];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (report.worst_location.empty() || rel > report.worst_relative_error) {
        report.worst_relative_error = rel;
        report.worst_location = params[pi].first + "[" + std::to_string(c) + "]";
      }
    }
  }
  report.passed = report.worst_relative_error < options.tolerance;
  return report;
}

void save_parameters(const std::filesystem::path& path, const NamedTensors& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("RVCKPT01", 8);
  binary::write<std::uint64_t>(out, params.size());
  for (const auto& [name, t] : params) {
    binary::write_string(out, name);
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) binary::write<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed on " + path.string());
}

std::map<std::string, Tensor> load_parameters(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  binary::expect_magic(in, "RVCKPT01", path.string());
  const auto count = binary::read<std::uint64_t>(in);
  std::map<std::string, Tensor> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name = binary::read_string(in);
    const auto rank = binary::read<std::uint32_t>(in);
    if (rank > 8) throw DataError(path.string() + ": implausible tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = binary::read<std::uint64_t>(in);
    std::vector<double> values(shape_size(shape));
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw DataError(path.string() + ": truncated checkpoint");
    }
    out.emplace(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

}  // namespace revrec::ad
