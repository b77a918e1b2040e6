#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// double tensors, with exactly the operators the rating models use.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "revrec/random.hpp"

namespace revrec::ad {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

/// Shared handle to a row-major tensor. Copies alias the same storage; use
/// clone() for a deep copy. The gradient buffer is allocated on first use.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t size() const { return s_->values.size(); }

  std::span<double> values() { return s_->values; }
  std::span<const double> values() const { return s_->values; }
  double& operator[](std::size_t i) { return s_->values[i]; }
  double operator[](std::size_t i) const { return s_->values[i]; }
  /// Value of a single-element tensor.
  double item() const;

  /// Gradient buffers are shared handle state, writable through const
  /// handles (backward closures hold const copies).
  std::span<double> grad() const;
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  Tensor clone() const;
  bool same_as(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}

  std::shared_ptr<Storage> s_;
};

struct TapeOptions {
  /// Enables dropout. Everything else behaves the same in both modes.
  bool training = true;
  /// When false nothing is recorded and backward() is unavailable.
  bool record = true;
  /// Fold relu masks and max-pool argmaxes into kink_signature().
  bool track_kinks = false;
  std::uint64_t dropout_seed = 0;
};

/// Ordered record of operations. backward() replays them in exact reverse
/// recording order. A tape is single-threaded; distinct tapes over disjoint
/// parameters may run concurrently.
class Tape {
 public:
  explicit Tape(TapeOptions options = {});

  bool training() const { return options_.training; }
  bool recording() const { return options_.record; }
  bool tracking_kinks() const { return options_.track_kinks; }
  Rng& dropout_rng() { return rng_; }

  /// Registers `out` as produced from `inputs`; `backward` reads out.grad()
  /// and accumulates into the inputs' gradients.
  void record(const Tensor& out, std::vector<Tensor> inputs, std::function<void()> backward);

  /// Zeroes the gradients of every tensor the tape references, seeds
  /// d(loss)/d(loss) = 1 and propagates. Throws ShapeError for a non-scalar
  /// loss and Error when recording was disabled.
  void backward(Tensor loss);

  std::size_t size() const { return entries_.size(); }

  void note_kink(std::uint64_t h) { kinks_ = mix64(kinks_ ^ h); }
  std::uint64_t kink_signature() const { return kinks_; }

 private:
  struct Entry {
    Tensor out;
    std::vector<Tensor> inputs;
    std::function<void()> backward;
  };
  TapeOptions options_;
  Rng rng_;
  std::vector<Entry> entries_;
  std::uint64_t kinks_ = 0;
};

// Operators. Shape requirements are listed per operator; violations throw
// ShapeError naming the offending shapes.

/// Same shapes.
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
/// Elementwise product, same shapes.
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& a, double c);
/// a + s with s a one-element tensor.
Tensor add_scalar(Tape& t, const Tensor& a, const Tensor& s);
/// s * a with s a one-element tensor.
Tensor mul_scalar(Tape& t, const Tensor& s, const Tensor& a);
/// x (n, m) plus bias (m) on every row.
Tensor add_bias(Tape& t, const Tensor& x, const Tensor& bias);
/// (n, k) x (k, m) -> (n, m).
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
/// Rows of a rank-2 table -> (ids.size(), cols).
Tensor gather_rows(Tape& t, const Tensor& table, std::span<const std::size_t> ids);
/// Word embedding lookup. `padding_id` maps to a constant zero vector
/// whatever the table holds, and its row never receives gradient.
Tensor embed_lookup(Tape& t, const Tensor& table, std::span<const std::int32_t> ids,
                    std::int32_t padding_id = 0);
/// seq (n, d) with filters (width*d, F) and bias (F) -> (n, F). "Same" zero
/// padding; width must be odd. Filter row (o*d + j) weighs input column j at
/// offset o - width/2.
Tensor conv1d(Tape& t, const Tensor& seq, const Tensor& filters, const Tensor& bias,
              std::size_t width);
/// (n, F) -> (F), n >= 1. Ties resolve to the earliest position.
Tensor max_over_time(Tape& t, const Tensor& x);
Tensor relu(Tape& t, const Tensor& x);
Tensor tanh(Tape& t, const Tensor& x);
/// Over the last axis (each row of a rank-2 tensor).
Tensor softmax(Tape& t, const Tensor& x);
Tensor log_softmax(Tape& t, const Tensor& x);
/// Inverted dropout; identity when the tape is not training.
Tensor dropout(Tape& t, const Tensor& x, double p);
/// Along the last axis; leading extents must agree.
Tensor concat(Tape& t, const Tensor& a, const Tensor& b);
/// Rank-1 dot product -> one-element tensor.
Tensor dot(Tape& t, const Tensor& a, const Tensor& b);
/// Row-wise dot product of two (n, k) tensors -> (n).
Tensor row_dot(Tape& t, const Tensor& a, const Tensor& b);
Tensor sum(Tape& t, const Tensor& x);
/// Same element count; values copied.
Tensor reshape(Tape& t, const Tensor& x, Shape shape);
/// k tensors of identical shape (m) -> (k, m).
Tensor stack_rows(Tape& t, std::span<const Tensor> rows);
/// sum_j weights[j] * x.flat[index[j]] -> one-element tensor.
Tensor gather_sum(Tape& t, const Tensor& x, std::span<const std::size_t> index,
                  std::span<const double> weights);
/// Mean squared error of pred (n) against targets; accumulated in double.
Tensor mse_loss(Tape& t, const Tensor& pred, std::span<const double> target);

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-3;
  /// Per parameter tensor; larger tensors are sampled without replacement.
  std::size_t max_coords = 200;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  std::uint64_t seed = 7;
};

struct GradCheckReport {
  double worst_relative_error = 0.0;
  std::string worst_location;
  std::size_t checked = 0;
  /// Coordinates whose perturbation crossed a relu or max-pool kink.
  std::size_t skipped_kinks = 0;
  bool passed = true;
};

/// Builds the scalar loss on the tape it is given. Must be deterministic.
using Program = std::function<Tensor(Tape&)>;

/// Central finite differences against backward(). Dropout is disabled.
GradCheckReport grad_check(const Program& program,
                           std::span<const std::pair<std::string, Tensor>> params,
                           const GradCheckOptions& options = {});

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Flat binary: magic "RVCKPT01", u64 count, then per tensor: u32 name length,
/// name bytes, u32 rank, rank x u64 extents, float64 values.
void save_parameters(const std::filesystem::path& path, const NamedTensors& params);
std::map<std::string, Tensor> load_parameters(const std::filesystem::path& path);

}  // namespace revrec::ad
