#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msagcn/errors.hpp"
#include "msagcn/random.hpp"

namespace msagcn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array of doubles, rank 0..4. Feature maps use the axis order
// [batch, channel, time, vertex].
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = stddev * rng.normal();
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double& operator()(std::size_t b, std::size_t c, std::size_t t, std::size_t v) {
    return data_[((b * shape_[1] + c) * shape_[2] + t) * shape_[3] + v];
  }
  double operator()(std::size_t b, std::size_t c, std::size_t t, std::size_t v) const {
    return data_[((b * shape_[1] + c) * shape_[2] + t) * shape_[3] + v];
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_) {
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(shape_) + " vs " +
                       shape_str(o.shape_));
    }
  }

  void require_rank(std::size_t r, const char* what) const {
    if (rank() != r) {
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                       shape_str(shape_));
    }
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate_shape() const {
    if (shape_.size() > 4) throw ShapeError("tensor rank above 4: " + shape_str(shape_));
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Trainable tensor with its gradient buffer. Names are dotted paths such as
// "stage0.scale1.block0.gcn.weight".
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor v, bool trainable = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), requires_grad(trainable) {}

  std::string name;
  Tensor value;
  Tensor grad;
  bool requires_grad = true;

  void zero_grad() { grad.fill(0.0); }

  void accumulate(const Tensor& g) {
    if (requires_grad) grad += g;
  }
};

// Named non-trainable state saved alongside parameters (running statistics,
// input normalization).
struct Buffer {
  std::string name;
  Tensor value;
};

// Everything a layer exposes for optimization and serialization.
struct StateRefs {
  std::vector<Parameter*> params;
  std::vector<Buffer*> buffers;
};

enum class Mode { train, eval };

// Log of every non-differentiable branch taken (ReLU signs, max selections,
// probability clamps) while an instance is alive on this thread. In replay
// mode each op takes the logged decision instead of its own, so a perturbed
// forward pass stays on the same smooth piece as the recorded one.
class BranchLog {
 public:
  BranchLog() : prev_(active_) { active_ = this; }
  ~BranchLog() { active_ = prev_; }
  BranchLog(const BranchLog&) = delete;
  BranchLog& operator=(const BranchLog&) = delete;

  static bool enabled() { return active_ != nullptr; }

  // Returns the decision the caller must use.
  static std::uint64_t branch(std::uint64_t natural) {
    BranchLog* log = active_;
    if (!log) return natural;
    if (!log->replaying_) {
      log->decisions_.push_back(natural);
      return natural;
    }
    if (log->cursor_ >= log->decisions_.size()) throw Error("branch replay ran past the recorded log");
    return log->decisions_[log->cursor_++];
  }

  void record() {
    decisions_.clear();
    replaying_ = false;
  }
  void replay() {
    cursor_ = 0;
    replaying_ = true;
  }
  bool replay_complete() const { return cursor_ == decisions_.size(); }
  std::size_t size() const { return decisions_.size(); }

 private:
  std::vector<std::uint64_t> decisions_;
  std::size_t cursor_ = 0;
  bool replaying_ = false;
  BranchLog* prev_;
  static inline thread_local BranchLog* active_ = nullptr;
};

// Fan-in scaled uniform init, b = sqrt(6 / fan_in).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double b = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -b, b, rng);
}

}  // namespace msagcn
