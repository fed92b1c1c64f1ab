#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "grn/binary_io.hpp"
#include "grn/error.hpp"

// Minimal reverse-mode automatic differentiation over dense row-major float64
// tensors. Every op checks its output for NaN/Inf and records a backward rule
// only when some input requires a gradient.

namespace grn::ag {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                       " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor filled(Shape shape, double v) {
    const auto n = numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from_data({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf holding a copy of the values; cuts the graph.
  Tensor detach() const { return from_data(shape(), data(), false); }
  Tensor clone_param() const { return from_data(shape(), data(), requires_grad()); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on this thread for the guard's lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }

 private:
  bool prev_;
};

namespace detail {

inline void check_finite(const Node& n) {
  for (double v : n.data)
    if (!std::isfinite(v)) throw NumericalError("non-finite value produced by op " + n.op);
}

// Builds the output node; the backward rule is attached only if any input needs grad.
inline Tensor make_result(std::string op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs) {
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->data = std::move(data);
  check_finite(*n);
  if (NoGradGuard::enabled())
    for (const auto& t : inputs)
      if (t.requires_grad()) n->requires_grad = true;
  if (n->requires_grad)
    for (const auto& t : inputs) n->parents.push_back(t.node_ptr());
  return Tensor(std::move(n));
}

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline void require_same(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

inline void require_rank(const std::string& op, const Tensor& a, std::size_t r) {
  if (a.rank() != r) throw ShapeError(op + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto r = detail::make_result("add", a.shape(), std::move(out), {a, b});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    Node* nb = b.node();
    self->backward = [self, na, nb] {
      if (na->requires_grad) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
      if (nb->requires_grad) {
        auto& g = nb->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
    };
  }
  return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto r = detail::make_result("sub", a.shape(), std::move(out), {a, b});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    Node* nb = b.node();
    self->backward = [self, na, nb] {
      if (na->requires_grad) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
      if (nb->requires_grad) {
        auto& g = nb->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self->grad[i];
      }
    };
  }
  return r;
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto r = detail::make_result("mul", a.shape(), std::move(out), {a, b});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    Node* nb = b.node();
    self->backward = [self, na, nb] {
      if (na->requires_grad) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * nb->data[i];
      }
      if (nb->requires_grad) {
        auto& g = nb->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * na->data[i];
      }
    };
  }
  return r;
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  auto r = detail::make_result("scale", a.shape(), std::move(out), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na, s] {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * s;
    };
  }
  return r;
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
  auto r = detail::make_result("square", a.shape(), std::move(out), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na] {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * na->data[i] * self->grad[i];
    };
  }
  return r;
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  auto r = detail::make_result("relu", a.shape(), std::move(out), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na] {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (na->data[i] > 0.0) g[i] += self->grad[i];
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) detail::shape_fail("reshape", a.shape(), shape);
  auto r = detail::make_result("reshape", std::move(shape), a.data(), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na] {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
    };
  }
  return r;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a.data()[i * m + j];
  auto r = detail::make_result("transpose", {m, n}, std::move(out), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na, n, m] {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self->grad[j * n + i];
    };
  }
  return r;
}

// Row i of a matrix, as a vector.
inline Tensor row(const Tensor& a, std::size_t i) {
  detail::require_rank("row", a, 2);
  if (i >= a.dim(0)) throw ShapeError("row: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  const std::size_t m = a.dim(1);
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(i * m),
                          a.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
  auto r = detail::make_result("row", {m}, std::move(out), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na, i, m] {
      auto& g = na->ensure_grad();
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self->grad[j];
    };
  }
  return r;
}

// Concatenates along the last axis; leading dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.empty()) throw ShapeError("concat: scalar input");
  const Shape lead(s0.begin(), s0.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size() || !std::equal(lead.begin(), lead.end(), s.begin())) detail::shape_fail("concat", s0, s);
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[p].data().begin() + static_cast<std::ptrdiff_t>(r * widths[p]), widths[p],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += widths[p];
  }
  Shape shape = lead;
  shape.push_back(total);
  auto r = detail::make_result("concat", std::move(shape), std::move(out), parts);
  if (r.requires_grad()) {
    Node* self = r.node();
    std::vector<Node*> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    self->backward = [self, ins, widths, rows, total] {
      std::size_t off = 0;
      for (std::size_t p = 0; p < ins.size(); ++p) {
        if (ins[p]->requires_grad) {
          auto& g = ins[p]->ensure_grad();
          for (std::size_t row = 0; row < rows; ++row)
            for (std::size_t c = 0; c < widths[p]; ++c) g[row * widths[p] + c] += self->grad[row * total + off + c];
        }
        off += widths[p];
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) detail::shape_fail("matmul", a.shape(), b.shape());
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  const auto& A = a.data();
  const auto& B = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += av * B[p * m + j];
    }
  auto r = detail::make_result("matmul", {n, m}, std::move(out), {a, b});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    Node* nb = b.node();
    self->backward = [self, na, nb, n, k, m] {
      const auto& G = self->grad;
      if (na->requires_grad) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += G[i * m + j] * nb->data[p * m + j];
            ga[i * k + p] += acc;
          }
      }
      if (nb->requires_grad) {
        auto& gb = nb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = na->data[i * k + p];
            for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * G[i * m + j];
          }
      }
    };
  }
  return r;
}

// x [n x m] + bias [m], broadcast over rows. The only broadcasting op.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) detail::shape_fail("add_bias", x.shape(), bias.shape());
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> out(x.data());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias.data()[j];
  auto r = detail::make_result("add_bias", x.shape(), std::move(out), {x, bias});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* nx = x.node();
    Node* nb = bias.node();
    self->backward = [self, nx, nb, n, m] {
      if (nx->requires_grad) {
        auto& g = nx->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
      if (nb->requires_grad) {
        auto& g = nb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) g[j] += self->grad[i * m + j];
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto r = detail::make_result("sum", {}, {s}, {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na] {
      auto& g = na->ensure_grad();
      for (auto& v : g) v += self->grad[0];
    };
  }
  return r;
}

// Mean over one axis; the axis is removed from the shape.
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  const Shape& s = a.shape();
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t len = s[axis];
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += a.data()[(o * len + l) * inner + i];
  const double inv = 1.0 / static_cast<double>(len);
  for (auto& v : out) v *= inv;
  Shape shape = s;
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto r = detail::make_result("mean_axis", std::move(shape), std::move(out), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na, outer, len, inner, inv] {
      auto& g = na->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i) g[(o * len + l) * inner + i] += self->grad[o * inner + i] * inv;
    };
  }
  return r;
}

// Global average over the two trailing spatial axes: [..., H, W] -> [...].
inline Tensor mean_pool_spatial(const Tensor& a) {
  if (a.rank() < 3) throw ShapeError("mean_pool_spatial: expected rank >= 3, got " + shape_str(a.shape()));
  const Shape& s = a.shape();
  const std::size_t hw = s[s.size() - 2] * s[s.size() - 1];
  const std::size_t outer = a.size() / hw;
  std::vector<double> out(outer, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    double acc = 0.0;
    for (std::size_t q = 0; q < hw; ++q) acc += a.data()[o * hw + q];
    out[o] = acc / static_cast<double>(hw);
  }
  auto r = detail::make_result("mean_pool_spatial", Shape(s.begin(), s.end() - 2), std::move(out), {a});
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* na = a.node();
    self->backward = [self, na, outer, hw] {
      auto& g = na->ensure_grad();
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t q = 0; q < hw; ++q) g[o * hw + q] += self->grad[o] * inv;
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Softmax family (last axis)

inline Tensor softmax(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t m = a.shape().back();
  const std::size_t rows = a.size() / m;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * m;
    const double mx = *std::max_element(x, x + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out[r * m + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] /= z;
  }
  auto res = detail::make_result("softmax", a.shape(), std::move(out), {a});
  if (res.requires_grad()) {
    Node* self = res.node();
    Node* na = a.node();
    self->backward = [self, na, rows, m] {
      auto& g = na->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += self->grad[r * m + j] * self->data[r * m + j];
        for (std::size_t j = 0; j < m; ++j) g[r * m + j] += self->data[r * m + j] * (self->grad[r * m + j] - dot);
      }
    };
  }
  return res;
}

inline Tensor log_softmax(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("log_softmax: scalar input");
  const std::size_t m = a.shape().back();
  const std::size_t rows = a.size() / m;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * m;
    const double mx = *std::max_element(x, x + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = x[j] - lse;
  }
  auto res = detail::make_result("log_softmax", a.shape(), std::move(out), {a});
  if (res.requires_grad()) {
    Node* self = res.node();
    Node* na = a.node();
    self->backward = [self, na, rows, m] {
      auto& g = na->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < m; ++j) gs += self->grad[r * m + j];
        for (std::size_t j = 0; j < m; ++j)
          g[r * m + j] += self->grad[r * m + j] - std::exp(self->data[r * m + j]) * gs;
      }
    };
  }
  return res;
}

// Mean negative log-likelihood of integer labels under softmax(logits [n x L]).
inline Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const std::uint32_t> labels) {
  detail::require_rank("cross_entropy_with_logits", logits, 2);
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(labels.size()) + " labels for " +
                     shape_str(logits.shape()));
  std::vector<double> prob(n * m);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= m) throw ShapeError("cross_entropy_with_logits: label out of range");
    const double* x = logits.data().data() + r * m;
    const double mx = *std::max_element(x, x + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (prob[r * m + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < m; ++j) prob[r * m + j] /= z;
    loss -= x[labels[r]] - mx - std::log(z);
  }
  loss /= static_cast<double>(n);
  auto res = detail::make_result("cross_entropy_with_logits", {}, {loss}, {logits});
  if (res.requires_grad()) {
    Node* self = res.node();
    Node* nl = logits.node();
    std::vector<std::uint32_t> lab(labels.begin(), labels.end());
    self->backward = [self, nl, prob = std::move(prob), lab = std::move(lab), n, m] {
      auto& g = nl->ensure_grad();
      const double s = self->grad[0] / static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < m; ++j)
          g[r * m + j] += s * (prob[r * m + j] - (j == lab[r] ? 1.0 : 0.0));
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Convolution

// x [N, Cin, H, W] * w [Cout, Cin, kh, kw] (+ bias [Cout]) -> [N, Cout, H-kh+1, W-kw+1].
// Stride 1, no padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || x.dim(2) < w.dim(2) || x.dim(3) < w.dim(3))
    detail::shape_fail("conv2d", x.shape(), w.shape());
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) detail::shape_fail("conv2d(bias)", w.shape(), bias.shape());
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = H - KH + 1, OW = W - KW + 1;
  const auto& X = x.data();
  const auto& K = w.data();
  std::vector<double> out(N * Co * OH * OW, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = out.data() + (n * Co + co) * OH * OW;
      if (has_bias)
        for (std::size_t q = 0; q < OH * OW; ++q) o[q] = bias.data()[co];
      for (std::size_t ci = 0; ci < Ci; ++ci)
        for (std::size_t kh = 0; kh < KH; ++kh)
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const double kv = K[((co * Ci + ci) * KH + kh) * KW + kw];
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const double* xr = X.data() + ((n * Ci + ci) * H + oh + kh) * W + kw;
              double* orow = o + oh * OW;
              for (std::size_t ow = 0; ow < OW; ++ow) orow[ow] += kv * xr[ow];
            }
          }
    }
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  auto r = detail::make_result("conv2d", {N, Co, OH, OW}, std::move(out), inputs);
  if (r.requires_grad()) {
    Node* self = r.node();
    Node* nx = x.node();
    Node* nw = w.node();
    Node* nb = has_bias ? bias.node() : nullptr;
    self->backward = [=] {
      const auto& G = self->grad;
      std::vector<double>* gx = nx->requires_grad ? &nx->ensure_grad() : nullptr;
      std::vector<double>* gw = nw->requires_grad ? &nw->ensure_grad() : nullptr;
      std::vector<double>* gb = (nb && nb->requires_grad) ? &nb->ensure_grad() : nullptr;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* g = G.data() + (n * Co + co) * OH * OW;
          if (gb)
            for (std::size_t q = 0; q < OH * OW; ++q) (*gb)[co] += g[q];
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t kh = 0; kh < KH; ++kh)
              for (std::size_t kw = 0; kw < KW; ++kw) {
                const std::size_t kidx = ((co * Ci + ci) * KH + kh) * KW + kw;
                const double kv = nw->data[kidx];
                double acc = 0.0;
                for (std::size_t oh = 0; oh < OH; ++oh) {
                  const std::size_t xbase = ((n * Ci + ci) * H + oh + kh) * W + kw;
                  for (std::size_t ow = 0; ow < OW; ++ow) {
                    const double gv = g[oh * OW + ow];
                    acc += gv * nx->data[xbase + ow];
                    if (gx) (*gx)[xbase + ow] += gv * kv;
                  }
                }
                if (gw) (*gw)[kidx] += acc;
              }
        }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Graph and backward pass

// Nodes reachable from a root, in topological order (inputs before consumers).
struct Graph {
  std::vector<Node*> nodes;

  static Graph build(const Tensor& root) {
    Graph g;
    std::unordered_set<Node*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        g.nodes.push_back(n);
        stack.pop_back();
      }
    }
    return g;
  }
};

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  const auto graph = Graph::build(loss);
  // intermediate grads start from zero on every pass; leaves keep accumulating
  for (Node* n : graph.nodes)
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = graph.nodes.rbegin(); it != graph.nodes.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward();
  }
  for (Node* n : graph.nodes)
    if (!n->backward && n->requires_grad)
      for (double v : n->grad)
        if (!std::isfinite(v)) throw NumericalError("non-finite gradient reached a parameter");
}

// ---------------------------------------------------------------------------
// Initialization

namespace init {

// Uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

inline Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

}  // namespace init

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
};

// p <- p - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * p. Parameters
// without a gradient buffer are treated as having zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState& state, const AdamOptions& opt) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter list changed between steps");
  ++state.t;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i].mutable_data();
    const auto& grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g;
      v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= opt.lr * (mhat / (std::sqrt(vhat) + opt.eps)) + opt.lr * opt.weight_decay * data[j];
      if (!std::isfinite(data[j])) throw NumericalError("adam_step produced a non-finite parameter");
    }
  }
}

// ---------------------------------------------------------------------------
// "GRNW" checkpoints

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_checkpoint(std::ostream& os, const NamedTensors& tensors) {
  io::write_magic(os, "GRNW");
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) io::write_le<std::uint64_t>(os, d);
    for (double v : t.data()) io::write_le<double>(os, v);
  }
}

inline NamedTensors load_checkpoint(std::istream& is) {
  io::Reader r(is);
  r.expect_magic("GRNW");
  if (const auto v = r.read_le<std::uint32_t>("version"); v != 1) r.fail("unsupported GRNW version");
  const auto n = r.read_le<std::uint32_t>("n_tensors");
  NamedTensors out;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = r.read_le<std::uint32_t>("name length");
    auto name = r.read_bytes(len, "name");
    const auto rank = r.read_le<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.read_le<std::uint64_t>("dim");
    std::vector<double> data(numel(shape));
    for (auto& x : data) x = r.read_le<double>("payload");
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data), true));
  }
  return out;
}

}  // namespace grn::ag
