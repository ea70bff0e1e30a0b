// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is 2-D (rows x cols); vectors are 1 x n. Feature maps
// are channels x positions, token memories are tokens x width.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tsdiffuse/error.hpp"

namespace tsdiffuse {

/// A named learned tensor.
struct Parameter {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;

  std::size_t size() const { return rows * cols; }
};

/// Ordered collection of parameters. Modules refer to entries by index so
/// that copying a store keeps every handle valid.
class ParamStore {
 public:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols, double fill = 0.0) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), rows, cols, std::vector<double>(rows * cols, fill)});
    return params_.size() - 1;
  }

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool all_finite() const {
    for (const auto& p : params_)
      for (double v : p.value)
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient buffers parallel to a ParamStore.
class GradStore {
 public:
  explicit GradStore(const ParamStore& store) {
    grads_.reserve(store.size());
    for (const auto& p : store) grads_.emplace_back(p.size(), 0.0);
  }
  std::vector<double>& operator[](std::size_t i) { return grads_[i]; }
  const std::vector<double>& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }
  void zero() {
    for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0);
  }
  void scale(double s) {
    for (auto& g : grads_)
      for (auto& v : g) v *= s;
  }

 private:
  std::vector<std::vector<double>> grads_;
};

namespace ag {

class Tape;

struct Node {
  Tape* tape = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  const double* borrowed = nullptr;  // parameter storage, not owned
  std::vector<double> grad_buf;
  double* grad_sink = nullptr;  // parameter gradient slot, not owned
  bool requires_grad = false;
  std::function<void()> backward;

  std::size_t size() const { return rows * cols; }
  const double* value() const { return borrowed ? borrowed : data.data(); }
  double* grad() {
    if (grad_sink) return grad_sink;
    if (grad_buf.empty()) grad_buf.assign(size(), 0.0);
    return grad_buf.data();
  }
};

/// Lightweight handle to a tape node.
class Var {
 public:
  Var() = default;
  explicit Var(Node* n) : node_(n) {}

  Node* node() const { return node_; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }
  std::span<const double> value() const { return {node_->value(), node_->size()}; }
  double at(std::size_t r, std::size_t c) const { return node_->value()[r * node_->cols + c]; }
  double item() const { return node_->value()[0]; }
  std::vector<double> to_vector() const { return {value().begin(), value().end()}; }
  bool requires_grad() const { return node_->requires_grad; }
  std::span<const double> grad() const {
    if (!node_->grad_sink && node_->grad_buf.empty()) return {};
    return {node_->grad_sink ? node_->grad_sink : node_->grad_buf.data(), node_->size()};
  }
  explicit operator bool() const { return node_ != nullptr; }

 private:
  Node* node_ = nullptr;
};

/// Records operations for one forward/backward pass.
///
/// A tape constructed without a GradStore never records backward closures;
/// that is the inference path. With a GradStore, parameter leaves write
/// their gradients straight into the store (accumulating).
class Tape {
 public:
  Tape() = default;
  explicit Tape(GradStore* grads) : grads_(grads) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return grads_ != nullptr || force_record_; }

  /// Record closures even without parameter gradients (used to take
  /// gradients with respect to constant inputs in tests).
  void force_record(bool on) { force_record_ = on; }

  Var constant(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != rows * cols) throw ShapeError("constant: value count does not match shape");
    Node* n = make_node(rows, cols);
    n->data = std::move(values);
    n->requires_grad = requires_grad && recording();
    return Var(n);
  }

  Var zeros(std::size_t rows, std::size_t cols) { return constant(rows, cols, std::vector<double>(rows * cols, 0.0)); }

  Var param(const ParamStore& store, std::size_t index) {
    const Parameter& p = store[index];
    Node* n = make_node(p.rows, p.cols);
    n->borrowed = p.value.data();
    if (grads_) {
      n->grad_sink = (*grads_)[index].data();
      n->requires_grad = true;
    }
    return Var(n);
  }

  /// Allocate an output node; requires_grad if any input does.
  Var output(std::size_t rows, std::size_t cols, std::initializer_list<Var> inputs) {
    Node* n = make_node(rows, cols);
    n->data.assign(rows * cols, 0.0);
    if (recording())
      for (const Var& v : inputs)
        if (v && v.requires_grad()) n->requires_grad = true;
    return Var(n);
  }

  /// Seed d(loss)/d(loss) = 1 and run closures in reverse creation order.
  void backward(Var loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;
    loss.node()->grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = it->get();
      if (n->backward && n->requires_grad && (n->grad_sink || !n->grad_buf.empty())) n->backward();
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  Node* make_node(std::size_t rows, std::size_t cols) {
    auto n = std::make_unique<Node>();
    n->tape = this;
    n->rows = rows;
    n->cols = cols;
    nodes_.push_back(std::move(n));
    return nodes_.back().get();
  }

  std::vector<std::unique_ptr<Node>> nodes_;
  GradStore* grads_ = nullptr;
  bool force_record_ = false;
};

namespace detail {

inline Tape& tape_of(Var v) { return *v.node()->tape; }

// C[m x n] += op(A) op(B), op(A) is m x k, op(B) is k x n.
inline void gemm_acc(double* c, const double* a, bool ta, const double* b, bool tb, std::size_t m, std::size_t n,
                     std::size_t k) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        if (av == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = a[p * m + i];
        if (av == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        c[i * n + j] += s;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += s;
      }
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

/// op(A) * op(B) where op transposes when the flag is set.
inline Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t kb = tb ? b.cols() : b.rows();
  const std::size_t n = tb ? b.rows() : b.cols();
  if (k != kb) throw ShapeError("matmul: inner dimensions differ");
  Tape& tape = detail::tape_of(a);
  Var out = tape.output(m, n, {a, b});
  detail::gemm_acc(out.node()->data.data(), a.node()->value(), ta, b.node()->value(), tb, m, n, k);
  if (out.requires_grad()) {
    Node *an = a.node(), *bn = b.node(), *on = out.node();
    on->backward = [=] {
      const double* dc = on->grad();
      if (an->requires_grad) {
        if (!ta)
          detail::gemm_acc(an->grad(), dc, false, bn->value(), !tb, m, k, n);
        else
          detail::gemm_acc(an->grad(), bn->value(), tb, dc, true, k, m, n);
      }
      if (bn->requires_grad) {
        if (!tb)
          detail::gemm_acc(bn->grad(), an->value(), !ta, dc, false, k, n, m);
        else
          detail::gemm_acc(bn->grad(), dc, true, an->value(), ta, n, k, m);
      }
    };
  }
  return out;
}

inline Var add(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shapes differ");
  Var out = detail::tape_of(a).output(a.rows(), a.cols(), {a, b});
  double* o = out.node()->data.data();
  const double *av = a.node()->value(), *bv = b.node()->value();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    Node *an = a.node(), *bn = b.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      const std::size_t n = on->size();
      if (an->requires_grad) {
        double* ga = an->grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        double* gb = bn->grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    };
  }
  return out;
}

inline Var scale(Var a, double s) {
  Var out = detail::tape_of(a).output(a.rows(), a.cols(), {a});
  double* o = out.node()->data.data();
  const double* av = a.node()->value();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = av[i] * s;
  if (out.requires_grad()) {
    Node *an = a.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      double* ga = an->grad();
      for (std::size_t i = 0; i < on->size(); ++i) ga[i] += s * g[i];
    };
  }
  return out;
}

/// X[r, c] + v[r]; v holds one value per row (e.g. per channel).
inline Var add_row_bias(Var x, Var v) {
  if (v.size() != x.rows()) throw ShapeError("add_row_bias: bias length must equal row count");
  Var out = detail::tape_of(x).output(x.rows(), x.cols(), {x, v});
  double* o = out.node()->data.data();
  const double *xv = x.node()->value(), *bv = v.node()->value();
  const std::size_t R = x.rows(), C = x.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) o[r * C + c] = xv[r * C + c] + bv[r];
  if (out.requires_grad()) {
    Node *xn = x.node(), *vn = v.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      if (xn->requires_grad) {
        double* gx = xn->grad();
        for (std::size_t i = 0; i < R * C; ++i) gx[i] += g[i];
      }
      if (vn->requires_grad) {
        double* gv = vn->grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) gv[r] += g[r * C + c];
      }
    };
  }
  return out;
}

/// X[r, c] + v[c]; v holds one value per column (linear-layer bias).
inline Var add_col_bias(Var x, Var v) {
  if (v.size() != x.cols()) throw ShapeError("add_col_bias: bias length must equal column count");
  Var out = detail::tape_of(x).output(x.rows(), x.cols(), {x, v});
  double* o = out.node()->data.data();
  const double *xv = x.node()->value(), *bv = v.node()->value();
  const std::size_t R = x.rows(), C = x.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) o[r * C + c] = xv[r * C + c] + bv[c];
  if (out.requires_grad()) {
    Node *xn = x.node(), *vn = v.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      if (xn->requires_grad) {
        double* gx = xn->grad();
        for (std::size_t i = 0; i < R * C; ++i) gx[i] += g[i];
      }
      if (vn->requires_grad) {
        double* gv = vn->grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) gv[c] += g[r * C + c];
      }
    };
  }
  return out;
}

inline Var silu(Var x) {
  Var out = detail::tape_of(x).output(x.rows(), x.cols(), {x});
  double* o = out.node()->data.data();
  const double* xv = x.node()->value();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = xv[i] * detail::sigmoid(xv[i]);
  if (out.requires_grad()) {
    Node *xn = x.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      const double* v = xn->value();
      double* gx = xn->grad();
      for (std::size_t i = 0; i < on->size(); ++i) {
        const double s = detail::sigmoid(v[i]);
        gx[i] += g[i] * s * (1.0 + v[i] * (1.0 - s));
      }
    };
  }
  return out;
}

/// GELU, tanh approximation.
inline Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  Var out = detail::tape_of(x).output(x.rows(), x.cols(), {x});
  double* o = out.node()->data.data();
  const double* xv = x.node()->value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    o[i] = 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
  }
  if (out.requires_grad()) {
    Node *xn = x.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      const double* xs = xn->value();
      double* gx = xn->grad();
      for (std::size_t i = 0; i < on->size(); ++i) {
        const double v = xs[i];
        const double th = std::tanh(k * (v + c * v * v * v));
        const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * c * v * v);
        gx[i] += g[i] * d;
      }
    };
  }
  return out;
}

/// 1-D convolution. x: Cin x N, w: Cout x (Cin*K), b: Cout values (optional).
/// Output length (N + 2*pad - K) / stride + 1.
inline Var conv1d(Var x, Var w, Var b, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const std::size_t cin = x.rows(), n_in = x.cols(), cout = w.rows();
  if (w.cols() != cin * kernel) throw ShapeError("conv1d: weight shape does not match input channels");
  if (n_in + 2 * pad < kernel) throw ShapeError("conv1d: input shorter than kernel");
  const std::size_t n_out = (n_in + 2 * pad - kernel) / stride + 1;
  const std::size_t ck = cin * kernel;
  // im2col: (Cin*K) x Nout
  auto col = std::make_shared<std::vector<double>>(ck * n_out, 0.0);
  const double* xv = x.node()->value();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t k = 0; k < kernel; ++k)
      for (std::size_t o = 0; o < n_out; ++o) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(n_in)) (*col)[(c * kernel + k) * n_out + o] = xv[c * n_in + src];
      }
  Tape& tape = detail::tape_of(x);
  Var out = tape.output(cout, n_out, {x, w, b});
  detail::gemm_acc(out.node()->data.data(), w.node()->value(), false, col->data(), false, cout, n_out, ck);
  if (b) {
    if (b.size() != cout) throw ShapeError("conv1d: bias length must equal output channels");
    const double* bv = b.node()->value();
    double* o = out.node()->data.data();
    for (std::size_t r = 0; r < cout; ++r)
      for (std::size_t j = 0; j < n_out; ++j) o[r * n_out + j] += bv[r];
  }
  if (out.requires_grad()) {
    Node *xn = x.node(), *wn = w.node(), *bn = b ? b.node() : nullptr, *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      if (wn->requires_grad) detail::gemm_acc(wn->grad(), g, false, col->data(), true, cout, ck, n_out);
      if (bn && bn->requires_grad) {
        double* gb = bn->grad();
        for (std::size_t r = 0; r < cout; ++r)
          for (std::size_t j = 0; j < n_out; ++j) gb[r] += g[r * n_out + j];
      }
      if (xn->requires_grad) {
        std::vector<double> dcol(ck * n_out, 0.0);
        detail::gemm_acc(dcol.data(), wn->value(), true, g, false, ck, n_out, cout);
        double* gx = xn->grad();
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t k = 0; k < kernel; ++k)
            for (std::size_t o = 0; o < n_out; ++o) {
              const std::ptrdiff_t src =
                  static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
              if (src >= 0 && src < static_cast<std::ptrdiff_t>(n_in))
                gx[c * n_in + src] += dcol[(c * kernel + k) * n_out + o];
            }
      }
    };
  }
  return out;
}

/// Transposed 1-D convolution, the adjoint of conv1d's scatter pattern.
/// x: Cin x N, w: (Cout*K) x Cin. Input position i and tap k land on output
/// position i*stride + k - crop; positions outside [0, out_len) are dropped
/// and missing ones stay zero.
inline Var conv_transpose1d(Var x, Var w, Var b, std::size_t kernel, std::size_t stride, std::size_t crop,
                            std::size_t out_len) {
  const std::size_t cin = x.rows(), n_in = x.cols();
  if (w.cols() != cin || w.rows() % kernel != 0) throw ShapeError("conv_transpose1d: weight shape mismatch");
  const std::size_t cout = w.rows() / kernel;
  auto z = std::make_shared<std::vector<double>>(cout * kernel * n_in, 0.0);
  detail::gemm_acc(z->data(), w.node()->value(), false, x.node()->value(), false, cout * kernel, n_in, cin);
  Tape& tape = detail::tape_of(x);
  Var out = tape.output(cout, out_len, {x, w, b});
  double* o = out.node()->data.data();
  auto target = [=](std::size_t i, std::size_t k) -> std::ptrdiff_t {
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(i * stride + k) - static_cast<std::ptrdiff_t>(crop);
    return (p >= 0 && p < static_cast<std::ptrdiff_t>(out_len)) ? p : -1;
  };
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t k = 0; k < kernel; ++k)
      for (std::size_t i = 0; i < n_in; ++i) {
        const std::ptrdiff_t p = target(i, k);
        if (p >= 0) o[oc * out_len + p] += (*z)[(oc * kernel + k) * n_in + i];
      }
  if (b) {
    if (b.size() != cout) throw ShapeError("conv_transpose1d: bias length must equal output channels");
    const double* bv = b.node()->value();
    for (std::size_t r = 0; r < cout; ++r)
      for (std::size_t j = 0; j < out_len; ++j) o[r * out_len + j] += bv[r];
  }
  if (out.requires_grad()) {
    Node *xn = x.node(), *wn = w.node(), *bn = b ? b.node() : nullptr, *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      std::vector<double> dz(cout * kernel * n_in, 0.0);
      for (std::size_t oc = 0; oc < cout; ++oc)
        for (std::size_t k = 0; k < kernel; ++k)
          for (std::size_t i = 0; i < n_in; ++i) {
            const std::ptrdiff_t p = target(i, k);
            if (p >= 0) dz[(oc * kernel + k) * n_in + i] = g[oc * out_len + p];
          }
      if (wn->requires_grad) detail::gemm_acc(wn->grad(), dz.data(), false, xn->value(), true, cout * kernel, cin, n_in);
      if (xn->requires_grad) detail::gemm_acc(xn->grad(), wn->value(), true, dz.data(), false, cin, n_in, cout * kernel);
      if (bn && bn->requires_grad) {
        double* gb = bn->grad();
        for (std::size_t r = 0; r < cout; ++r)
          for (std::size_t j = 0; j < out_len; ++j) gb[r] += g[r * out_len + j];
      }
    };
  }
  return out;
}

namespace detail {

// Normalizes each segment (list of element indices is implicit: the caller
// supplies a segment id and per-element affine index). Shared by group and
// layer norm.
struct NormLayout {
  std::size_t segments;
  std::size_t seg_size;
  std::function<std::size_t(std::size_t seg, std::size_t j)> element;  // flat index
  std::function<std::size_t(std::size_t flat)> affine;                 // gamma/beta index
};

inline Var normalize_segments(Var x, Var gamma, Var beta, const NormLayout& layout, double eps) {
  Tape& tape = tape_of(x);
  Var out = tape.output(x.rows(), x.cols(), {x, gamma, beta});
  const double* xv = x.node()->value();
  const double *gv = gamma.node()->value(), *bv = beta.node()->value();
  double* o = out.node()->data.data();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(layout.segments);
  const double m = static_cast<double>(layout.seg_size);
  for (std::size_t s = 0; s < layout.segments; ++s) {
    double mean = 0.0;
    for (std::size_t j = 0; j < layout.seg_size; ++j) mean += xv[layout.element(s, j)];
    mean /= m;
    double var = 0.0;
    for (std::size_t j = 0; j < layout.seg_size; ++j) {
      const double d = xv[layout.element(s, j)] - mean;
      var += d * d;
    }
    var /= m;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[s] = is;
    for (std::size_t j = 0; j < layout.seg_size; ++j) {
      const std::size_t e = layout.element(s, j);
      const double h = (xv[e] - mean) * is;
      (*xhat)[e] = h;
      const std::size_t a = layout.affine(e);
      o[e] = gv[a] * h + bv[a];
    }
  }
  if (out.requires_grad()) {
    Node *xn = x.node(), *gn = gamma.node(), *bn = beta.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      const double* gam = gn->value();
      if (gn->requires_grad || bn->requires_grad) {
        double* gg = gn->requires_grad ? gn->grad() : nullptr;
        double* gb = bn->requires_grad ? bn->grad() : nullptr;
        for (std::size_t e = 0; e < on->size(); ++e) {
          const std::size_t a = layout.affine(e);
          if (gg) gg[a] += g[e] * (*xhat)[e];
          if (gb) gb[a] += g[e];
        }
      }
      if (xn->requires_grad) {
        double* gx = xn->grad();
        for (std::size_t s = 0; s < layout.segments; ++s) {
          double sum_d = 0.0, sum_dh = 0.0;
          for (std::size_t j = 0; j < layout.seg_size; ++j) {
            const std::size_t e = layout.element(s, j);
            const double d = g[e] * gam[layout.affine(e)];
            sum_d += d;
            sum_dh += d * (*xhat)[e];
          }
          const double is = (*inv_std)[s];
          for (std::size_t j = 0; j < layout.seg_size; ++j) {
            const std::size_t e = layout.element(s, j);
            const double d = g[e] * gam[layout.affine(e)];
            gx[e] += is * (d - sum_d / m - (*xhat)[e] * sum_dh / m);
          }
        }
      }
    };
  }
  return out;
}

}  // namespace detail

/// GroupNorm over a C x N feature map with per-channel affine.
inline Var group_norm(Var x, Var gamma, Var beta, std::size_t groups, double eps = 1e-5) {
  const std::size_t C = x.rows(), N = x.cols();
  if (groups == 0 || C % groups != 0) throw ShapeError("group_norm: groups must divide channel count");
  if (gamma.size() != C || beta.size() != C) throw ShapeError("group_norm: affine size must equal channel count");
  const std::size_t cg = C / groups;
  detail::NormLayout layout{groups, cg * N, [=](std::size_t s, std::size_t j) { return s * cg * N + j; },
                            [=](std::size_t e) { return e / N; }};
  return detail::normalize_segments(x, gamma, beta, layout, eps);
}

/// LayerNorm over each row of a T x W matrix.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const std::size_t R = x.rows(), W = x.cols();
  if (gamma.size() != W || beta.size() != W) throw ShapeError("layer_norm: affine size must equal width");
  detail::NormLayout layout{R, W, [=](std::size_t s, std::size_t j) { return s * W + j; },
                            [=](std::size_t e) { return e % W; }};
  return detail::normalize_segments(x, gamma, beta, layout, eps);
}

/// Row-wise softmax restricted to columns whose mask entry is nonzero.
/// Masked columns get weight 0; a row with no valid column is all zeros.
inline Var softmax_rows(Var s, std::span<const std::uint8_t> col_mask) {
  const std::size_t R = s.rows(), C = s.cols();
  if (!col_mask.empty() && col_mask.size() != C) throw ShapeError("softmax_rows: mask length must equal columns");
  std::vector<std::uint8_t> mask(col_mask.begin(), col_mask.end());
  if (mask.empty()) mask.assign(C, 1);
  Var out = detail::tape_of(s).output(R, C, {s});
  const double* sv = s.node()->value();
  double* o = out.node()->data.data();
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c)
      if (mask[c]) mx = std::max(mx, sv[r * C + c]);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (mask[c]) {
        const double e = std::exp(sv[r * C + c] - mx);
        o[r * C + c] = e;
        z += e;
      }
    for (std::size_t c = 0; c < C; ++c)
      if (mask[c]) o[r * C + c] /= z;
  }
  if (out.requires_grad()) {
    Node *sn = s.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      const double* p = on->data.data();
      double* gs = sn->grad();
      for (std::size_t r = 0; r < R; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += p[r * C + c] * g[r * C + c];
        for (std::size_t c = 0; c < C; ++c) gs[r * C + c] += p[r * C + c] * (g[r * C + c] - dot);
      }
    };
  }
  return out;
}

/// Rows of `table` selected by ids (embedding lookup).
inline Var embedding(Var table, std::span<const int> ids) {
  const std::size_t W = table.cols(), V = table.rows();
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V) throw ShapeError("embedding: id out of range");
  Var out = detail::tape_of(table).output(ids.size(), W, {table});
  const double* tv = table.node()->value();
  double* o = out.node()->data.data();
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(tv + static_cast<std::size_t>(ids[r]) * W, W, o + r * W);
  if (out.requires_grad()) {
    Node *tn = table.node(), *on = out.node();
    std::vector<int> idv(ids.begin(), ids.end());
    on->backward = [=] {
      const double* g = on->grad();
      double* gt = tn->grad();
      for (std::size_t r = 0; r < idv.size(); ++r)
        for (std::size_t c = 0; c < W; ++c) gt[static_cast<std::size_t>(idv[r]) * W + c] += g[r * W + c];
    };
  }
  return out;
}

/// First `count` rows of x.
inline Var slice_rows(Var x, std::size_t start, std::size_t count) {
  if (start + count > x.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t W = x.cols();
  Var out = detail::tape_of(x).output(count, W, {x});
  std::copy_n(x.node()->value() + start * W, count * W, out.node()->data.data());
  if (out.requires_grad()) {
    Node *xn = x.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      double* gx = xn->grad() + start * W;
      for (std::size_t i = 0; i < count * W; ++i) gx[i] += g[i];
    };
  }
  return out;
}

inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
  if (start + count > x.cols()) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t R = x.rows(), C = x.cols();
  Var out = detail::tape_of(x).output(R, count, {x});
  const double* xv = x.node()->value();
  double* o = out.node()->data.data();
  for (std::size_t r = 0; r < R; ++r) std::copy_n(xv + r * C + start, count, o + r * count);
  if (out.requires_grad()) {
    Node *xn = x.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      double* gx = xn->grad();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < count; ++c) gx[r * C + start + c] += g[r * count + c];
    };
  }
  return out;
}

/// Stack along rows (channel concatenation for feature maps).
inline Var concat_rows(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column counts differ");
  Var out = detail::tape_of(a).output(a.rows() + b.rows(), a.cols(), {a, b});
  double* o = out.node()->data.data();
  std::copy_n(a.node()->value(), a.size(), o);
  std::copy_n(b.node()->value(), b.size(), o + a.size());
  if (out.requires_grad()) {
    Node *an = a.node(), *bn = b.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      if (an->requires_grad) {
        double* ga = an->grad();
        for (std::size_t i = 0; i < an->size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        double* gb = bn->grad();
        for (std::size_t i = 0; i < bn->size(); ++i) gb[i] += g[an->size() + i];
      }
    };
  }
  return out;
}

/// Place column blocks side by side.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t R = parts.front().rows();
  std::size_t C = 0;
  for (const Var& p : parts) {
    if (p.rows() != R) throw ShapeError("concat_cols: row counts differ");
    C += p.cols();
  }
  Tape& tape = detail::tape_of(parts.front());
  Var out = tape.output(R, C, {});
  if (tape.recording())
    for (const Var& p : parts)
      if (p.requires_grad()) out.node()->requires_grad = true;
  double* o = out.node()->data.data();
  std::size_t off = 0;
  for (const Var& p : parts) {
    const double* pv = p.node()->value();
    for (std::size_t r = 0; r < R; ++r) std::copy_n(pv + r * p.cols(), p.cols(), o + r * C + off);
    off += p.cols();
  }
  if (out.requires_grad()) {
    std::vector<Node*> ns;
    for (const Var& p : parts) ns.push_back(p.node());
    Node* on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      std::size_t off2 = 0;
      for (Node* pn : ns) {
        if (pn->requires_grad) {
          double* gp = pn->grad();
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < pn->cols; ++c) gp[r * pn->cols + c] += g[r * C + off2 + c];
        }
        off2 += pn->cols;
      }
    };
  }
  return out;
}

/// Zero the rows whose mask entry is 0.
inline Var mask_rows(Var x, std::span<const std::uint8_t> row_mask) {
  if (row_mask.size() != x.rows()) throw ShapeError("mask_rows: mask length must equal rows");
  const std::size_t R = x.rows(), C = x.cols();
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  Var out = detail::tape_of(x).output(R, C, {x});
  const double* xv = x.node()->value();
  double* o = out.node()->data.data();
  for (std::size_t r = 0; r < R; ++r)
    if (mask[r]) std::copy_n(xv + r * C, C, o + r * C);
  if (out.requires_grad()) {
    Node *xn = x.node(), *on = out.node();
    on->backward = [=] {
      const double* g = on->grad();
      double* gx = xn->grad();
      for (std::size_t r = 0; r < R; ++r)
        if (mask[r])
          for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c];
    };
  }
  return out;
}

/// Mean squared difference between x and a constant target.
inline Var mse(Var x, std::span<const double> target) {
  if (target.size() != x.size()) throw ShapeError("mse: target length must match prediction");
  Var out = detail::tape_of(x).output(1, 1, {x});
  const double* xv = x.node()->value();
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = xv[i] - target[i];
    s += d * d;
  }
  out.node()->data[0] = s / n;
  if (out.requires_grad()) {
    Node *xn = x.node(), *on = out.node();
    std::vector<double> tgt(target.begin(), target.end());
    on->backward = [=] {
      const double g = on->grad()[0];
      const double* v = xn->value();
      double* gx = xn->grad();
      for (std::size_t i = 0; i < tgt.size(); ++i) gx[i] += g * 2.0 * (v[i] - tgt[i]) / n;
    };
  }
  return out;
}

inline Var sum(Var x) {
  Var out = detail::tape_of(x).output(1, 1, {x});
  double s = 0.0;
  for (double v : x.value()) s += v;
  out.node()->data[0] = s;
  if (out.requires_grad()) {
    Node *xn = x.node(), *on = out.node();
    on->backward = [=] {
      const double g = on->grad()[0];
      double* gx = xn->grad();
      for (std::size_t i = 0; i < xn->size(); ++i) gx[i] += g;
    };
  }
  return out;
}

}  // namespace ag
}  // namespace tsdiffuse
