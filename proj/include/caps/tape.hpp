#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "caps/tensor.hpp"

namespace caps {

// Reverse-mode autodiff over dense matrices. One Tape per forward build;
// nodes are coarse (whole matmuls, whole reductions) so the closure overhead
// is negligible next to the arithmetic.
//
// Handles are plain (id, shape) pairs valid only for the tape that made them.
template <typename T>
class Tape {
 public:
  struct Ref {
    int id = -1;
    int rows = 0;
    int cols = 0;
  };

  // ---- leaves ----

  Ref leaf(const Tensor<T>& t) { return push(t.rows, t.cols, t.data); }

  Ref leaf_row(const std::vector<T>& v) {
    return push(1, static_cast<int>(v.size()), v);
  }

  Ref scalar(T v) { return push(1, 1, std::vector<T>{v}); }

  // Leaf bound to an external gradient sink; after backward(), call
  // flush_param_grads() to add accumulated gradients into *grad_out.
  Ref param(const Tensor<T>& t, Tensor<T>* grad_out) {
    Ref r = push(t.rows, t.cols, t.data);
    bindings_.push_back({r.id, grad_out});
    return r;
  }

  // ---- elementwise / arithmetic ----

  Ref add(Ref a, Ref b) {
    check_same(a, b, "add");
    Ref r = push(a.rows, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    const auto& bv = val(b);
    out.resize(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    set_back(r, [this, a, b, r]() {
      axpy(grad(a), grad(r), T(1));
      axpy(grad(b), grad(r), T(1));
    });
    return r;
  }

  Ref sub(Ref a, Ref b) {
    check_same(a, b, "sub");
    Ref r = push(a.rows, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    const auto& bv = val(b);
    out.resize(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    set_back(r, [this, a, b, r]() {
      axpy(grad(a), grad(r), T(1));
      axpy(grad(b), grad(r), T(-1));
    });
    return r;
  }

  Ref mul(Ref a, Ref b) {
    check_same(a, b, "mul");
    Ref r = push(a.rows, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    const auto& bv = val(b);
    out.resize(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    set_back(r, [this, a, b, r]() {
      const auto& av2 = val(a);
      const auto& bv2 = val(b);
      auto& ga = grad(a);
      auto& gb = grad(b);
      const auto& gr = grad(r);
      for (size_t i = 0; i < gr.size(); ++i) {
        ga[i] += gr[i] * bv2[i];
        gb[i] += gr[i] * av2[i];
      }
    });
    return r;
  }

  Ref scale(Ref a, T c) {
    Ref r = push(a.rows, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    out.resize(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    set_back(r, [this, a, r, c]() { axpy(grad(a), grad(r), c); });
    return r;
  }

  Ref relu(Ref a) {
    Ref r = push(a.rows, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    out.resize(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    set_back(r, [this, a, r]() {
      const auto& av2 = val(a);
      auto& ga = grad(a);
      const auto& gr = grad(r);
      for (size_t i = 0; i < gr.size(); ++i)
        if (av2[i] > T(0)) ga[i] += gr[i];
    });
    return r;
  }

  Ref stopgrad(Ref a) {
    Ref r = push(a.rows, a.cols, val(a));
    // no backward
    return r;
  }

  // ---- linear algebra ----

  // C = A * B, A: m x k, B: k x n
  Ref matmul(Ref a, Ref b) {
    if (a.cols != b.rows) throw ValidationError("matmul: inner dims differ");
    int m = a.rows, k = a.cols, n = b.cols;
    Ref r = push(m, n, std::vector<T>(static_cast<size_t>(m) * n, T(0)));
    gemm_nn(val(a).data(), val(b).data(), val(r).data(), m, k, n);
    set_back(r, [this, a, b, r, m, k, n]() {
      // dA += dC * B^T ; dB += A^T * dC
      gemm_nt(grad(r).data(), val(b).data(), grad(a).data(), m, n, k);
      gemm_tn(val(a).data(), grad(r).data(), grad(b).data(), m, k, n);
    });
    return r;
  }

  // C = A * B^T, A: m x k, B: n x k
  Ref matmul_nt(Ref a, Ref b) {
    if (a.cols != b.cols) throw ValidationError("matmul_nt: inner dims differ");
    int m = a.rows, k = a.cols, n = b.rows;
    Ref r = push(m, n, std::vector<T>(static_cast<size_t>(m) * n, T(0)));
    gemm_nt(val(a).data(), val(b).data(), val(r).data(), m, k, n);
    set_back(r, [this, a, b, r, m, k, n]() {
      // dA += dC * B ; dB += dC^T * A
      gemm_nn(grad(r).data(), val(b).data(), grad(a).data(), m, n, k);
      gemm_tn(grad(r).data(), val(a).data(), grad(b).data(), m, n, k);
    });
    return r;
  }

  // Broadcast a 1 x n row vector over the rows of a.
  Ref add_rowvec(Ref a, Ref v) {
    if (v.rows != 1 || v.cols != a.cols)
      throw ValidationError("add_rowvec: shape mismatch");
    Ref r = push(a.rows, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    const auto& vv = val(v);
    out.resize(av.size());
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j)
        out[static_cast<size_t>(i) * a.cols + j] =
            av[static_cast<size_t>(i) * a.cols + j] + vv[j];
    set_back(r, [this, a, v, r]() {
      axpy(grad(a), grad(r), T(1));
      auto& gv = grad(v);
      const auto& gr = grad(r);
      for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j)
          gv[j] += gr[static_cast<size_t>(i) * a.cols + j];
    });
    return r;
  }

  // ---- shape ops ----

  Ref slice_row(Ref a, int row) {
    if (row < 0 || row >= a.rows) throw ValidationError("slice_row: out of range");
    Ref r = push(1, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    out.assign(av.begin() + static_cast<size_t>(row) * a.cols,
               av.begin() + static_cast<size_t>(row + 1) * a.cols);
    set_back(r, [this, a, r, row]() {
      auto& ga = grad(a);
      const auto& gr = grad(r);
      for (int j = 0; j < a.cols; ++j)
        ga[static_cast<size_t>(row) * a.cols + j] += gr[j];
    });
    return r;
  }

  Ref slice_cols(Ref a, int c0, int len) {
    if (c0 < 0 || c0 + len > a.cols) throw ValidationError("slice_cols: out of range");
    Ref r = push(a.rows, len, {});
    auto& out = val(r);
    const auto& av = val(a);
    out.resize(static_cast<size_t>(a.rows) * len);
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < len; ++j)
        out[static_cast<size_t>(i) * len + j] =
            av[static_cast<size_t>(i) * a.cols + c0 + j];
    set_back(r, [this, a, r, c0, len]() {
      auto& ga = grad(a);
      const auto& gr = grad(r);
      for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < len; ++j)
          ga[static_cast<size_t>(i) * a.cols + c0 + j] +=
              gr[static_cast<size_t>(i) * len + j];
    });
    return r;
  }

  Ref concat_rows(const std::vector<Ref>& parts) {
    if (parts.empty()) throw ValidationError("concat_rows: empty");
    int cols = parts[0].cols;
    int rows = 0;
    for (const Ref& p : parts) {
      if (p.cols != cols) throw ValidationError("concat_rows: col mismatch");
      rows += p.rows;
    }
    Ref r = push(rows, cols, {});
    auto& out = val(r);
    out.reserve(static_cast<size_t>(rows) * cols);
    for (const Ref& p : parts) {
      const auto& pv = val(p);
      out.insert(out.end(), pv.begin(), pv.end());
    }
    std::vector<Ref> ps = parts;
    set_back(r, [this, ps, r]() {
      const auto& gr = grad(r);
      size_t off = 0;
      for (const Ref& p : ps) {
        auto& gp = grad(p);
        for (size_t i = 0; i < gp.size(); ++i) gp[i] += gr[off + i];
        off += gp.size();
      }
    });
    return r;
  }

  Ref concat_cols(Ref a, Ref b) {
    if (a.rows != b.rows) throw ValidationError("concat_cols: row mismatch");
    int cols = a.cols + b.cols;
    Ref r = push(a.rows, cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    const auto& bv = val(b);
    out.resize(static_cast<size_t>(a.rows) * cols);
    for (int i = 0; i < a.rows; ++i) {
      for (int j = 0; j < a.cols; ++j)
        out[static_cast<size_t>(i) * cols + j] = av[static_cast<size_t>(i) * a.cols + j];
      for (int j = 0; j < b.cols; ++j)
        out[static_cast<size_t>(i) * cols + a.cols + j] =
            bv[static_cast<size_t>(i) * b.cols + j];
    }
    set_back(r, [this, a, b, r, cols]() {
      auto& ga = grad(a);
      auto& gb = grad(b);
      const auto& gr = grad(r);
      for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j)
          ga[static_cast<size_t>(i) * a.cols + j] += gr[static_cast<size_t>(i) * cols + j];
        for (int j = 0; j < b.cols; ++j)
          gb[static_cast<size_t>(i) * b.cols + j] +=
              gr[static_cast<size_t>(i) * cols + a.cols + j];
      }
    });
    return r;
  }

  // Column-wise max over rows -> 1 x cols. Ties go to the lowest row.
  Ref maxpool_rows(Ref a) {
    Ref r = push(1, a.cols, {});
    auto& out = val(r);
    const auto& av = val(a);
    out.resize(a.cols);
    std::vector<int> arg(a.cols, 0);
    for (int j = 0; j < a.cols; ++j) {
      T best = av[j];
      int bi = 0;
      for (int i = 1; i < a.rows; ++i) {
        T v = av[static_cast<size_t>(i) * a.cols + j];
        if (v > best) {
          best = v;
          bi = i;
        }
      }
      out[j] = best;
      arg[j] = bi;
    }
    set_back(r, [this, a, r, arg]() {
      auto& ga = grad(a);
      const auto& gr = grad(r);
      for (int j = 0; j < a.cols; ++j)
        ga[static_cast<size_t>(arg[j]) * a.cols + j] += gr[j];
    });
    return r;
  }

  Ref transpose(Ref a) {
    Ref r = push(a.cols, a.rows, {});
    auto& out = val(r);
    const auto& av = val(a);
    out.resize(av.size());
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j)
        out[static_cast<size_t>(j) * a.rows + i] = av[static_cast<size_t>(i) * a.cols + j];
    set_back(r, [this, a, r]() {
      auto& ga = grad(a);
      const auto& gr = grad(r);
      for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j)
          ga[static_cast<size_t>(i) * a.cols + j] += gr[static_cast<size_t>(j) * a.rows + i];
    });
    return r;
  }

  // Same data, new shape (row-major).
  Ref reshape(Ref a, int rows, int cols) {
    if (static_cast<size_t>(rows) * cols != val(a).size())
      throw ValidationError("reshape: size mismatch");
    Ref r = push(rows, cols, val(a));
    set_back(r, [this, a, r]() { axpy(grad(a), grad(r), T(1)); });
    return r;
  }

  // ---- normalization / attention pieces ----

  // Per-row layer normalization with learned gain/bias (1 x cols each).
  Ref layernorm(Ref x, Ref gain, Ref bias, T eps = T(1e-5)) {
    if (gain.cols != x.cols || bias.cols != x.cols)
      throw ValidationError("layernorm: gain/bias shape");
    int n = x.cols;
    Ref r = push(x.rows, n, {});
    auto& out = val(r);
    const auto& xv = val(x);
    const auto& gv = val(gain);
    const auto& bv = val(bias);
    out.resize(xv.size());
    std::vector<T> mu(x.rows), istd(x.rows);
    for (int i = 0; i < x.rows; ++i) {
      const T* row = &xv[static_cast<size_t>(i) * n];
      T m = 0;
      for (int j = 0; j < n; ++j) m += row[j];
      m /= n;
      T v = 0;
      for (int j = 0; j < n; ++j) v += (row[j] - m) * (row[j] - m);
      v /= n;
      T is = T(1) / std::sqrt(v + eps);
      mu[i] = m;
      istd[i] = is;
      for (int j = 0; j < n; ++j)
        out[static_cast<size_t>(i) * n + j] = gv[j] * (row[j] - m) * is + bv[j];
    }
    set_back(r, [this, x, gain, bias, r, mu, istd, n]() {
      const auto& xv2 = val(x);
      const auto& gv2 = val(gain);
      const auto& gr = grad(r);
      auto& gx = grad(x);
      auto& gg = grad(gain);
      auto& gb = grad(bias);
      for (int i = 0; i < x.rows; ++i) {
        const T* row = &xv2[static_cast<size_t>(i) * n];
        const T* go = &gr[static_cast<size_t>(i) * n];
        T is = istd[i], m = mu[i];
        // xhat_j = (x_j - m) * is
        T sum_g = 0, sum_gx = 0;
        for (int j = 0; j < n; ++j) {
          T xh = (row[j] - m) * is;
          T gy = go[j] * gv2[j];
          sum_g += gy;
          sum_gx += gy * xh;
          gg[j] += go[j] * xh;
          gb[j] += go[j];
        }
        for (int j = 0; j < n; ++j) {
          T xh = (row[j] - m) * is;
          T gy = go[j] * gv2[j];
          gx[static_cast<size_t>(i) * n + j] +=
              is * (gy - sum_g / n - xh * sum_gx / n);
        }
      }
    });
    return r;
  }

  // Row-wise softmax; columns with mask[j] == 0 get output 0 and take no
  // gradient. mask may be empty (all valid).
  Ref softmax_rows(Ref x, const std::vector<uint8_t>& mask = {}) {
    if (!mask.empty() && static_cast<int>(mask.size()) != x.cols)
      throw ValidationError("softmax_rows: mask size");
    int n = x.cols;
    Ref r = push(x.rows, n, {});
    auto& out = val(r);
    const auto& xv = val(x);
    out.assign(xv.size(), T(0));
    for (int i = 0; i < x.rows; ++i) {
      const T* row = &xv[static_cast<size_t>(i) * n];
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < n; ++j)
        if (mask.empty() || mask[j]) mx = std::max(mx, row[j]);
      T z = 0;
      for (int j = 0; j < n; ++j)
        if (mask.empty() || mask[j]) z += std::exp(row[j] - mx);
      for (int j = 0; j < n; ++j)
        if (mask.empty() || mask[j])
          out[static_cast<size_t>(i) * n + j] = std::exp(row[j] - mx) / z;
    }
    set_back(r, [this, x, r, mask, n]() {
      const auto& yv = val(r);
      const auto& gr = grad(r);
      auto& gx = grad(x);
      for (int i = 0; i < x.rows; ++i) {
        const T* y = &yv[static_cast<size_t>(i) * n];
        const T* gy = &gr[static_cast<size_t>(i) * n];
        T dot = 0;
        for (int j = 0; j < n; ++j)
          if (mask.empty() || mask[j]) dot += gy[j] * y[j];
        for (int j = 0; j < n; ++j)
          if (mask.empty() || mask[j])
            gx[static_cast<size_t>(i) * n + j] += y[j] * (gy[j] - dot);
      }
    });
    return r;
  }

  // ---- reductions / losses ----

  Ref sum_all(Ref a) {
    Ref r = push(1, 1, {});
    const auto& av = val(a);
    T s = 0;
    for (T v : av) s += v;
    val(r) = {s};
    set_back(r, [this, a, r]() {
      auto& ga = grad(a);
      T g = grad(r)[0];
      for (auto& v : ga) v += g;
    });
    return r;
  }

  // sum of squares -> scalar
  Ref sum_sq(Ref a) {
    Ref r = push(1, 1, {});
    const auto& av = val(a);
    T s = 0;
    for (T v : av) s += v * v;
    val(r) = {s};
    set_back(r, [this, a, r]() {
      const auto& av2 = val(a);
      auto& ga = grad(a);
      T g = grad(r)[0];
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * av2[i] * g;
    });
    return r;
  }

  // Mean elementwise smooth-L1 (Huber, delta = 1) of a's entries.
  Ref smooth_l1_mean(Ref a) {
    Ref r = push(1, 1, {});
    const auto& av = val(a);
    T s = 0;
    for (T v : av) {
      T x = std::abs(v);
      s += x < T(1) ? T(0.5) * x * x : x - T(0.5);
    }
    T inv = T(1) / static_cast<T>(av.size());
    val(r) = {s * inv};
    set_back(r, [this, a, r, inv]() {
      const auto& av2 = val(a);
      auto& ga = grad(a);
      T g = grad(r)[0] * inv;
      for (size_t i = 0; i < ga.size(); ++i) {
        T v = av2[i];
        ga[i] += g * (v > T(1) ? T(1) : (v < T(-1) ? T(-1) : v));
      }
    });
    return r;
  }

  // Cross-entropy between softmax(logits) and a fixed target distribution q:
  //   -sum_j q_j * log softmax(logits)_j.  logits is 1 x n.
  Ref cross_entropy_with_dist(Ref logits, const std::vector<T>& q) {
    if (logits.rows != 1 || static_cast<int>(q.size()) != logits.cols)
      throw ValidationError("cross_entropy_with_dist: shape");
    int n = logits.cols;
    const auto& lv = val(logits);
    T mx = lv[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, lv[j]);
    T z = 0;
    for (int j = 0; j < n; ++j) z += std::exp(lv[j] - mx);
    T logz = std::log(z) + mx;
    T ce = 0;
    std::vector<T> p(n);
    for (int j = 0; j < n; ++j) {
      p[j] = std::exp(lv[j] - logz);
      ce -= q[j] * (lv[j] - logz);
    }
    Ref r = push(1, 1, std::vector<T>{ce});
    set_back(r, [this, logits, r, p, q, n]() {
      auto& gl = grad(logits);
      T g = grad(r)[0];
      for (int j = 0; j < n; ++j) gl[j] += g * (p[j] - q[j]);
    });
    return r;
  }

  Ref cross_entropy_with_index(Ref logits, int label) {
    std::vector<T> q(logits.cols, T(0));
    q[label] = T(1);
    return cross_entropy_with_dist(logits, q);
  }

  // ---- access ----

  const std::vector<T>& value(Ref r) const { return nodes_[r.id].val; }
  const std::vector<T>& gradient(Ref r) const { return nodes_[r.id].grad; }

  Tensor<T> value_tensor(Ref r) const {
    return Tensor<T>(r.rows, r.cols, nodes_[r.id].val);
  }

  T scalar_value(Ref r) const {
    if (nodes_[r.id].val.size() != 1) throw ValidationError("scalar_value: not scalar");
    return nodes_[r.id].val[0];
  }

  // ---- backward ----

  void backward(Ref loss) {
    if (nodes_[loss.id].val.size() != 1)
      throw ValidationError("backward: loss must be scalar");
    for (auto& n : nodes_) n.grad.assign(n.val.size(), T(0));
    nodes_[loss.id].grad[0] = T(1);
    for (int i = loss.id; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back();
  }

  // Add accumulated leaf gradients into their bound external buffers,
  // scaled by `scale` (used for batch averaging).
  void flush_param_grads(T scale = T(1)) {
    for (const auto& b : bindings_) {
      const auto& g = nodes_[b.id].grad;
      for (size_t i = 0; i < g.size(); ++i) b.sink->data[i] += g[i] * scale;
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<T> val;
    std::vector<T> grad;
    std::function<void()> back;
  };
  struct Binding {
    int id;
    Tensor<T>* sink;
  };

  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;

  Ref push(int rows, int cols, std::vector<T> v) {
    Node n;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return Ref{static_cast<int>(nodes_.size()) - 1, rows, cols};
  }

  std::vector<T>& val(Ref r) { return nodes_[r.id].val; }
  std::vector<T>& grad(Ref r) { return nodes_[r.id].grad; }
  void set_back(Ref r, std::function<void()> f) { nodes_[r.id].back = std::move(f); }

  static void check_same(Ref a, Ref b, const char* op) {
    if (a.rows != b.rows || a.cols != b.cols)
      throw ValidationError(std::string(op) + ": shape mismatch");
  }

  static void axpy(std::vector<T>& y, const std::vector<T>& x, T c) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += c * x[i];
  }

  // C += A(m x k) * B(k x n)
  static void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
      T* crow = c + static_cast<size_t>(i) * n;
      for (int l = 0; l < k; ++l) {
        T av = a[static_cast<size_t>(i) * k + l];
        const T* brow = b + static_cast<size_t>(l) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  // C += A(m x k) * B(n x k)^T  -> m x n
  static void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * k;
      T* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* brow = b + static_cast<size_t>(j) * k;
        T s = 0;
        for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
        crow[j] += s;
      }
    }
  }

  // C += A(m x k)^T * B(m x n)  -> k x n
  static void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * k;
      const T* brow = b + static_cast<size_t>(i) * n;
      for (int l = 0; l < k; ++l) {
        T av = arow[l];
        T* crow = c + static_cast<size_t>(l) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
};

template <typename T>
using TapeRef = typename Tape<T>::Ref;

}  // namespace caps
