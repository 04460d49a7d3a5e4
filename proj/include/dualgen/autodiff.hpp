// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal reverse-mode automatic differentiation over 64-bit dense tensors.
//
// Every op treats its inputs as a row-major matrix whose column count is the
// last extent and whose row count is the product of the leading extents. A
// result records a backward closure only when gradient recording is enabled
// on the calling thread and at least one parent requires a gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dualgen::ad {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DegenerateBatchError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    return make(std::move(shape), std::move(values), false);
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return make(std::move(shape), std::move(values), true);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double v) { return constant({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zeros when no gradient has been accumulated.
  std::vector<double> grad() const {
    return has_grad() ? node_->grad : std::vector<double>(size(), 0.0);
  }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Replaces storage in place, keeping identity (used by checkpoint loading).
  void assign(std::span<const double> v) {
    if (v.size() != size()) throw ShapeError("assign: size mismatch");
    std::copy(v.begin(), v.end(), node_->value.begin());
  }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
    if (values.size() != numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) + " != numel of " +
                       shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(Node&)>);

  std::shared_ptr<Node> node_;
};

// Builds an op output, wiring the backward closure only when it can matter.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward) {
  Tensor out = Tensor::make(std::move(shape), std::move(values), false);
  if (!detail::grad_mode()) return out;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node());
  out.node_->backward = std::move(backward);
  return out;
}

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap mmap(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Gradient sink for parent i, or nullptr when that parent is not tracked.
inline std::vector<double>* sink(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return &p.grad;
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n);
  detail::mmap(out, m, n).noalias() =
      detail::cmap(a.node()->value, m, k) * detail::cmap(b.node()->value, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    auto g = detail::cmap(self.grad, m, n);
    if (auto* ga = detail::sink(self, 0))
      detail::mmap(*ga, m, k).noalias() += g * detail::cmap(self.parents[1]->value, k, n).transpose();
    if (auto* gb = detail::sink(self, 1))
      detail::mmap(*gb, k, n).noalias() += detail::cmap(self.parents[0]->value, m, k).transpose() * g;
  });
}

// a · bᵀ with b stored as [n x k].
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul_bt");
  detail::require_2d(b, "matmul_bt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k)
    throw ShapeError("matmul_bt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n);
  detail::mmap(out, m, n).noalias() =
      detail::cmap(a.node()->value, m, k) * detail::cmap(b.node()->value, n, k).transpose();
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    auto g = detail::cmap(self.grad, m, n);
    if (auto* ga = detail::sink(self, 0))
      detail::mmap(*ga, m, k).noalias() += g * detail::cmap(self.parents[1]->value, n, k);
    if (auto* gb = detail::sink(self, 1))
      detail::mmap(*gb, n, k).noalias() += g.transpose() * detail::cmap(self.parents[0]->value, m, k);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = detail::sink(self, p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = detail::sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.values()[i];
  return make_result(x.shape(), std::move(out), {x}, [c](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c * self.grad[i];
  });
}

// x + c where c is a fixed same-shaped buffer (attention masks, offsets).
inline Tensor add_constant(const Tensor& x, std::span<const double> c) {
  if (c.size() != x.size()) throw ShapeError("add_constant: size mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] + c[i];
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

// x[r, :] + bias for every row r.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols(), m = x.rows();
  if (bias.size() != n)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " vs rows of width " +
                     std::to_string(n));
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x.values()[r * n + c] + bias.values()[c];
  return make_result(x.shape(), std::move(out), {x, bias}, [m, n](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::sink(self, 1))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) (*g)[c] += self.grad[r * n + c];
  });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.values()[i]);
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        (*g)[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    if (auto* g = detail::sink(self, 0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        (*g)[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

// Records stop_gradient outputs, then replays them in call order, so a
// finite-difference probe sees sg(x) as the constant it was at the base point.
class StopGradientTape {
 public:
  enum class Mode { kRecord, kReplay };
  explicit StopGradientTape(Mode mode) : prev_(current()) { current() = this, mode_ = mode; }
  ~StopGradientTape() { current() = prev_; }
  StopGradientTape(const StopGradientTape&) = delete;
  StopGradientTape& operator=(const StopGradientTape&) = delete;

  void replay() { mode_ = Mode::kReplay, cursor_ = 0; }

  static StopGradientTape*& current() {
    thread_local StopGradientTape* tape = nullptr;
    return tape;
  }

  std::vector<double> pass(const Tensor& x) {
    std::vector<double> v(x.values().begin(), x.values().end());
    if (mode_ == Mode::kRecord) {
      values_.push_back(v);
      return v;
    }
    if (cursor_ >= values_.size() || values_[cursor_].size() != v.size())
      throw std::logic_error("StopGradientTape: replay does not follow the recorded graph");
    return values_[cursor_++];
  }

 private:
  StopGradientTape* prev_;
  Mode mode_ = Mode::kRecord;
  std::vector<std::vector<double>> values_;
  std::size_t cursor_ = 0;
};

// Identity forward; the result has no parents, so nothing flows back to x.
inline Tensor stop_gradient(const Tensor& x) {
  if (auto* tape = StopGradientTape::current()) return Tensor::constant(x.shape(), tape->pass(x));
  return Tensor::constant(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
}

// ---------------------------------------------------------------------------
// Row-wise

inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols(), m = x.rows();
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) sum += (o[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < n; ++c) o[c] /= sum;
  }
  return make_result(x.shape(), std::move(out), {x}, [m, n](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t r = 0; r < m; ++r) {
        const double* y = self.value.data() + r * n;
        const double* dy = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += dy[c] * y[c];
        for (std::size_t c = 0; c < n; ++c) (*g)[r * n + c] += y[c] * (dy[c] - dot);
      }
  });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t d = x.cols(), m = x.rows();
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: affine width mismatch");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(m);
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mean) * rs;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [m, d, xhat, rstd](Node& self) {
                       const auto& gv = self.parents[1]->value;
                       const auto& dy = self.grad;
                       if (auto* gx = detail::sink(self, 0)) {
                         std::vector<double> dxhat(d);
                         for (std::size_t r = 0; r < m; ++r) {
                           double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                           for (std::size_t c = 0; c < d; ++c) {
                             dxhat[c] = dy[r * d + c] * gv[c];
                             mean_dxhat += dxhat[c];
                             mean_dxhat_xhat += dxhat[c] * (*xhat)[r * d + c];
                           }
                           mean_dxhat /= static_cast<double>(d);
                           mean_dxhat_xhat /= static_cast<double>(d);
                           for (std::size_t c = 0; c < d; ++c)
                             (*gx)[r * d + c] += (*rstd)[r] * (dxhat[c] - mean_dxhat -
                                                               (*xhat)[r * d + c] * mean_dxhat_xhat);
                         }
                       }
                       if (auto* gg = detail::sink(self, 1))
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < d; ++c)
                             (*gg)[c] += dy[r * d + c] * (*xhat)[r * d + c];
                       if (auto* gb = detail::sink(self, 2))
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < d; ++c) (*gb)[c] += dy[r * d + c];
                     });
}

// ---------------------------------------------------------------------------
// Indexing and layout

// Gathers table rows; backward scatter-adds into the table.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_2d(table, "gather_rows");
  const std::size_t n = table.cols(), vocab = table.rows();
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab)
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " >= " +
                              std::to_string(vocab));
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return make_result({ids.size(), n}, std::move(out), {table},
                     [idx = std::move(idx), n](Node& self) {
                       if (auto* g = detail::sink(self, 0))
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t c = 0; c < n; ++c)
                             (*g)[idx[i] * n + c] += self.grad[i * n + c];
                     });
}

// Treats a 1-D tensor of width n as a single row.
inline Tensor as_row(const Tensor& v) {
  const std::size_t n = v.size();
  std::vector<double> out(v.values().begin(), v.values().end());
  return make_result({1, n}, std::move(out), {v}, [](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return make_result({m, n}, std::move(out), parts, [offsets](Node& self) {
    for (std::size_t p = 0; p < offsets.size(); ++p)
      if (auto* g = detail::sink(self, p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[p] + i];
  });
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  const std::size_t n = x.cols(), m = x.rows();
  if (len == 0 || start + len > n) throw ShapeError("slice_cols: range out of bounds");
  std::vector<double> out(m * len);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < len; ++c) out[r * len + c] = x.values()[r * n + start + c];
  return make_result({m, len}, std::move(out), {x}, [m, n, start, len](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < len; ++c) (*g)[r * n + start + c] += self.grad[r * len + c];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * n + off + c] = p.values()[r * w + c];
    off += w;
  }
  return make_result({m, n}, std::move(out), parts, [m, n, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      const std::size_t w = widths[p];
      if (auto* g = detail::sink(self, p))
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < w; ++c) (*g)[r * w + c] += self.grad[r * n + off + c];
      off += w;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s}, {x}, [](Node& self) {
    if (auto* g = detail::sink(self, 0))
      for (double& v : *g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Mean over non-ignored rows of -log softmax(logits)[row, target].
inline Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::size_t> targets,
                                   const std::vector<bool>& ignore = {}) {
  const std::size_t v = logits.cols(), t = logits.rows();
  if (targets.size() != t) throw ShapeError("cross_entropy_logits: target count != rows");
  if (!ignore.empty() && ignore.size() != t)
    throw ShapeError("cross_entropy_logits: ignore mask length != rows");
  std::size_t count = 0;
  for (std::size_t r = 0; r < t; ++r) {
    if (!ignore.empty() && ignore[r]) continue;
    if (targets[r] >= v)
      throw std::out_of_range("cross_entropy_logits: target " + std::to_string(targets[r]) +
                              " >= vocabulary " + std::to_string(v));
    ++count;
  }
  if (count == 0) throw DegenerateBatchError("cross_entropy_logits: every position is ignored");

  auto probs = std::make_shared<std::vector<double>>(logits.size());
  const auto lv = logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    const double* row = lv.data() + r * v;
    double* p = probs->data() + r * v;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + v) - row);
    const double mx = row[arg];
    // rest excludes the max term so log1p keeps precision for confident rows.
    double rest = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      p[c] = std::exp(row[c] - mx);
      if (c != arg) rest += p[c];
    }
    const double s = 1.0 + rest;
    for (std::size_t c = 0; c < v; ++c) p[c] /= s;
    if (!ignore.empty() && ignore[r]) continue;
    total += std::log1p(rest) + (mx - row[targets[r]]);
  }
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result({1}, {total * inv}, {logits},
                     [probs, tgt = std::move(tgt), ignore, v, t, inv](Node& self) {
                       if (auto* g = detail::sink(self, 0)) {
                         const double up = self.grad[0] * inv;
                         for (std::size_t r = 0; r < t; ++r) {
                           if (!ignore.empty() && ignore[r]) continue;
                           for (std::size_t c = 0; c < v; ++c)
                             (*g)[r * v + c] += up * (*probs)[r * v + c];
                           (*g)[r * v + tgt[r]] -= up;
                         }
                       }
                     });
}

// Mean over positions (rows) of the squared Euclidean distance between rows.
inline Tensor squared_error(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "squared_error");
  const std::size_t rows = a.rows();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return make_result({1}, {s * inv}, {a, b}, [inv](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const double up = 2.0 * inv * self.grad[0];
    if (auto* g = detail::sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += up * (av[i] - bv[i]);
    if (auto* g = detail::sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= up * (av[i] - bv[i]);
  });
}

// ---------------------------------------------------------------------------
// Backward

// Populates the gradient of every tracked ancestor of a scalar loss. Nodes are
// visited once each, in reverse of a depth-first post-order built from parent
// order, so accumulation order is a pure function of graph construction.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got " +
                                         shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node& root = *loss.node();
  root.ensure_grad();
  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
  // Interior buffers are only needed during the sweep.
  for (Node* n : order)
    if (n->backward) n->grad.clear();
}

// ---------------------------------------------------------------------------
// Finite differences

// Central differences of f around x, perturbing x's storage in place; f
// receives the perturbed tensor and must return a scalar.
template <class F>
std::vector<double> finite_difference_grad(F&& f, Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: h must be positive");
  NoGradGuard guard;
  auto vals = x.mutable_values();
  std::vector<double> out(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double fp = f(x);
    vals[i] = orig - h;
    const double fm = f(x);
    vals[i] = orig;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // flat index across all checked tensors, in order
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Relative error with a magnitude floor so vanishing gradients compare by
// absolute error instead of amplifying rounding noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Compares backward() of loss_fn against central differences for every
// element of every tensor in params. loss_fn rebuilds the graph each call;
// stop_gradient outputs are held at their base-point values while probing.
template <class LossFn>
GradCheckReport check_gradients(LossFn&& loss_fn, std::vector<Tensor> params, double h = 1e-5,
                                double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  StopGradientTape tape(StopGradientTape::Mode::kRecord);
  {
    Tensor loss = loss_fn();
    backward(loss);
  }
  GradCheckReport report;
  std::size_t flat = 0;
  for (auto& p : params) {
    const std::vector<double> analytic = p.grad();
    const auto numeric = finite_difference_grad(
        [&](Tensor&) {
          tape.replay();
          return loss_fn().item();
        },
        p, h);
    for (std::size_t i = 0; i < analytic.size(); ++i, ++flat) {
      const double e = relative_error(analytic[i], numeric[i], floor);
      if (e > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = e;
        report.worst_index = flat;
        report.analytic = analytic[i];
        report.numeric = numeric[i];
      }
      ++report.checked;
    }
  }
  return report;
}

}  // namespace dualgen::ad
