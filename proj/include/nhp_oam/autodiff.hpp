#pragma once

// Reverse-mode automatic differentiation over small dense matrices.
//
// A Tape records every operation of one forward pass. Leaves are either
// constants or references to entries of a ParamStore; backward() pushes the
// gradient of a scalar output into a GradStore. Tapes are single-use and not
// shared across threads.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "matrix.hpp"
#include "params.hpp"

namespace nhp::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape;

namespace detail {
using Backward = std::function<void(Tape&, int)>;
}

class Tape {
 public:
  /// With record=false no backward closures are stored; use for scoring.
  explicit Tape(const ParamStore* params = nullptr, bool record = true) : params_(params), record_(record) {
    nodes_.reserve(256);
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  const ParamStore& params() const {
    if (!params_) throw std::logic_error("tape has no parameter store");
    return *params_;
  }

  Var constant(Matrix value) { return push(std::move(value), {}); }
  Var scalar(double v) { return constant(Matrix::scalar(v)); }

  /// Leaf bound to a parameter. Repeated calls return the same node.
  Var param(int pid) {
    auto it = param_nodes_.find(pid);
    if (it != param_nodes_.end()) return {it->second};
    Var v = push(params().value(pid), {});
    nodes_[static_cast<std::size_t>(v.id)].param_id = pid;
    param_nodes_[pid] = v.id;
    return v;
  }
  Var param(const std::string& name) { return param(params().id(name)); }

  const Matrix& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  double item(Var v) const {
    const Matrix& m = value(v);
    if (m.size() != 1) throw std::logic_error("item() on non-scalar " + shape_str(m));
    return m[0];
  }
  Matrix& grad(Var v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  Matrix& grad_of(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Matrix& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::size_t size() const { return nodes_.size(); }

  Var push(Matrix value, detail::Backward back) {
    Node n;
    n.value = std::move(value);
    if (record_) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size() - 1)};
  }

  /// Accumulates d(output)/d(params) into grads. output must be 1x1.
  void backward(Var output, GradStore& grads, double seed = 1.0) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (value(output).size() != 1) throw std::logic_error("backward requires a scalar output");
    for (std::size_t i = 0; i <= static_cast<std::size_t>(output.id); ++i) {
      Node& n = nodes_[i];
      if (!n.grad.same_shape(n.value))
        n.grad = Matrix(n.value.rows(), n.value.cols());
      else
        n.grad.zero();
    }
    grads_ = &grads;
    nodes_[static_cast<std::size_t>(output.id)].grad[0] = seed;
    for (int i = output.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back) n.back(*this, i);
      if (n.param_id >= 0) grads[n.param_id] += n.grad;
    }
    grads_ = nullptr;
  }

  /// Only valid inside backward().
  GradStore& sink() { return *grads_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    detail::Backward back;
    int param_id = -1;
  };

  const ParamStore* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
  GradStore* grads_ = nullptr;
};

// ---------------------------------------------------------------------------
// Scalar helpers

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * (std::numbers::sqrt2 / 2.0))); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * (std::numbers::sqrt2 / 2.0)));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + x * pdf;
}

enum class Activation { gelu, tanh };

inline double activate(Activation a, double x) { return a == Activation::gelu ? gelu(x) : std::tanh(x); }
inline double activate_grad(Activation a, double x) {
  if (a == Activation::gelu) return gelu_grad(x);
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

// ---------------------------------------------------------------------------
// Operations

namespace detail {

template <class F, class G>
Var unary(Tape& t, Var a, F f, G dfdx) {
  const Matrix& x = t.value(a);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return t.push(std::move(out), [a, dfdx](Tape& tp, int self) {
    const Matrix& x = tp.value_of(a.id);
    const Matrix& y = tp.value_of(self);
    const Matrix& gy = tp.grad_of(self);
    Matrix& gx = tp.grad_of(a.id);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * dfdx(x[i], y[i]);
  });
}

// Broadcast kinds for binary ops: b may match a, be 1 x cols, or 1 x 1.
enum class Bcast { none, row, scalar };

inline Bcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
  if (a.same_shape(b)) return Bcast::none;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::row;
  if (b.size() == 1) return Bcast::scalar;
  throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

inline std::size_t bidx(Bcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Bcast::none: return i;
    case Bcast::row: return i % cols;
    case Bcast::scalar: return 0;
  }
  return 0;
}

}  // namespace detail

/// a + b, with b broadcast over rows (1 x c) or everywhere (1 x 1).
inline Var add(Tape& t, Var a, Var b) {
  const Matrix& x = t.value(a);
  const Matrix& y = t.value(b);
  const auto k = detail::broadcast_kind(x, y, "add");
  Matrix out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[detail::bidx(k, i, x.cols())];
  return t.push(std::move(out), [a, b, k](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    tp.grad_of(a.id) += g;
    Matrix& gb = tp.grad_of(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) gb[detail::bidx(k, i, g.cols())] += g[i];
  });
}

/// Element-wise a * b with the same broadcasting rules as add.
inline Var mul(Tape& t, Var a, Var b) {
  const Matrix& x = t.value(a);
  const Matrix& y = t.value(b);
  const auto k = detail::broadcast_kind(x, y, "mul");
  Matrix out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[detail::bidx(k, i, x.cols())];
  return t.push(std::move(out), [a, b, k](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& x = tp.value_of(a.id);
    const Matrix& y = tp.value_of(b.id);
    Matrix& ga = tp.grad_of(a.id);
    Matrix& gb = tp.grad_of(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t j = detail::bidx(k, i, g.cols());
      ga[i] += g[i] * y[j];
      gb[j] += g[i] * x[i];
    }
  });
}

/// scale * a + shift, element-wise with constants.
inline Var affine(Tape& t, Var a, double scale, double shift = 0.0) {
  return detail::unary(
      t, a, [scale, shift](double x) { return scale * x + shift; }, [scale](double, double) { return scale; });
}

inline Var sigmoid(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return softplus(x); }, [](double x, double) { return sigmoid(x); });
}

inline Var log(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var activation(Tape& t, Var a, Activation kind) {
  return detail::unary(
      t, a, [kind](double x) { return activate(kind, x); },
      [kind](double x, double) { return activate_grad(kind, x); });
}

/// a (n x k) * b (k x m)
inline Var matmul(Tape& t, Var a, Var b) {
  Matrix out = nhp::matmul(t.value(a), t.value(b));
  return t.push(std::move(out), [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    gemm_nt_acc(g, tp.value_of(b.id), tp.grad_of(a.id));
    gemm_tn_acc(tp.value_of(a.id), g, tp.grad_of(b.id));
  });
}

/// x W + b with b a 1 x m row.
inline Var linear(Tape& t, Var x, Var w, Var b) {
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(w);
  const Matrix& bv = t.value(b);
  if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols())
    throw std::invalid_argument("linear: shape mismatch " + shape_str(xv) + " * " + shape_str(wv) + " + " + shape_str(bv));
  Matrix out(xv.rows(), wv.cols());
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = bv[j];
  gemm_acc(xv, wv, out);
  return t.push(std::move(out), [x, w, b](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    gemm_nt_acc(g, tp.value_of(w.id), tp.grad_of(x.id));
    gemm_tn_acc(tp.value_of(x.id), g, tp.grad_of(w.id));
    Matrix& gb = tp.grad_of(b.id);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
  });
}

/// Row-wise layer normalization with learned gain and bias (1 x c each).
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gain);
  const Matrix& bv = t.value(bias);
  const std::size_t n = xv.rows(), c = xv.cols();
  Matrix out(n, c);
  Matrix xhat(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xv(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  return t.push(std::move(out), [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& gv = tp.value_of(gain.id);
    Matrix& gx = tp.grad_of(x.id);
    Matrix& gg = tp.grad_of(gain.id);
    Matrix& gbias = tp.grad_of(bias.id);
    const std::size_t n = g.rows(), c = g.cols();
    for (std::size_t i = 0; i < n; ++i) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = g(i, j) * gv[j];
        sum_d += d;
        sum_dx += d * xhat(i, j);
        gg[j] += g(i, j) * xhat(i, j);
        gbias[j] += g(i, j);
      }
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) {
        const double d = g(i, j) * gv[j];
        gx(i, j) += inv_std[i] * (d - inv_c * sum_d - xhat(i, j) * inv_c * sum_dx);
      }
    }
  });
}

/// Multi-head scaled dot-product self-attention on a fused projection.
/// qkv is n x 3d laid out [Q | K | V]. With causal=true row i attends to
/// rows j <= i only; masked entries are never evaluated, so row i is an exact
/// function of rows 0..i.
inline Var self_attention(Tape& t, Var qkv, std::size_t heads, bool causal) {
  const Matrix& in = t.value(qkv);
  const std::size_t n = in.rows();
  if (in.cols() % 3 != 0) throw std::invalid_argument("self_attention: width must be 3d");
  const std::size_t d = in.cols() / 3;
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("self_attention: d must divide into heads");
  const std::size_t dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix out(n, d);
  // probs[h] is n x n; entries above the diagonal stay zero when causal.
  std::vector<Matrix> probs(heads, Matrix(n, n));
  std::vector<double> logits(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * dk, ko = d + h * dk, vo = 2 * d + h * dk;
    Matrix& p = probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t last = causal ? i + 1 : n;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < last; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < dk; ++k) s += in(i, qo + k) * in(j, ko + k);
        s *= scale;
        logits[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < last; ++j) {
        const double e = std::exp(logits[j] - mx);
        p(i, j) = e;
        z += e;
      }
      for (std::size_t j = 0; j < last; ++j) {
        p(i, j) /= z;
        for (std::size_t k = 0; k < dk; ++k) out(i, qo + k) += p(i, j) * in(j, vo + k);
      }
    }
  }
  return t.push(std::move(out), [qkv, heads, causal, dk, d, scale, probs = std::move(probs)](Tape& tp, int self) {
    const Matrix& in = tp.value_of(qkv.id);
    const Matrix& g = tp.grad_of(self);
    Matrix& gin = tp.grad_of(qkv.id);
    const std::size_t n = in.rows();
    std::vector<double> dp(n);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t qo = h * dk, ko = d + h * dk, vo = 2 * d + h * dk;
      const Matrix& p = probs[h];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t last = causal ? i + 1 : n;
        double dot = 0.0;
        for (std::size_t j = 0; j < last; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < dk; ++k) {
            s += g(i, qo + k) * in(j, vo + k);
            gin(j, vo + k) += p(i, j) * g(i, qo + k);
          }
          dp[j] = s;
          dot += p(i, j) * s;
        }
        for (std::size_t j = 0; j < last; ++j) {
          const double ds = p(i, j) * (dp[j] - dot) * scale;
          if (ds == 0.0) continue;
          for (std::size_t k = 0; k < dk; ++k) {
            gin(i, qo + k) += ds * in(j, ko + k);
            gin(j, ko + k) += ds * in(i, qo + k);
          }
        }
      }
    }
  });
}

/// Mean over the rows of x; result is 1 x c.
inline Var mean_rows(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  if (xv.rows() == 0) throw std::invalid_argument("mean_rows: no rows");
  Matrix out(1, xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out[j] += xv(i, j);
  const double inv = 1.0 / static_cast<double>(xv.rows());
  for (double& v : out.flat()) v *= inv;
  return t.push(std::move(out), [x, inv](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    Matrix& gx = tp.grad_of(x.id);
    for (std::size_t i = 0; i < gx.rows(); ++i)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g[j] * inv;
  });
}

/// Row r of x as a 1 x c matrix.
inline Var row(Tape& t, Var x, std::size_t r) {
  const Matrix& xv = t.value(x);
  if (r >= xv.rows()) throw std::out_of_range("row: index out of range");
  Matrix out(1, xv.cols(), std::vector<double>(xv.row(r).begin(), xv.row(r).end()));
  return t.push(std::move(out), [x, r](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    auto gx = tp.grad_of(x.id).row(r);
    for (std::size_t j = 0; j < g.cols(); ++j) gx[j] += g[j];
  });
}

/// Vertical concatenation of same-width matrices.
inline Var stack_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: empty");
  const std::size_t c = t.value(parts[0]).cols();
  std::size_t n = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != c) throw std::invalid_argument("stack_rows: width mismatch");
    n += t.value(p).rows();
  }
  Matrix out(n, c);
  std::size_t r = 0;
  for (Var p : parts) {
    const Matrix& v = t.value(p);
    std::copy(v.data(), v.data() + v.size(), out.data() + r * c);
    r += v.rows();
  }
  return t.push(std::move(out), [parts](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    std::size_t offset = 0;
    for (Var p : parts) {
      Matrix& gp = tp.grad_of(p.id);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
      offset += gp.size();
    }
  });
}

/// Horizontal concatenation [a | b] of matrices with equal row counts.
inline Var concat_cols(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  const std::size_t ca = av.cols(), cb = bv.cols();
  Matrix out(av.rows(), ca + cb);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    for (std::size_t j = 0; j < ca; ++j) out(i, j) = av(i, j);
    for (std::size_t j = 0; j < cb; ++j) out(i, ca + j) = bv(i, j);
  }
  return t.push(std::move(out), [a, b, ca, cb](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    Matrix& ga = tp.grad_of(a.id);
    Matrix& gb = tp.grad_of(b.id);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < ca; ++j) ga(i, j) += g(i, j);
      for (std::size_t j = 0; j < cb; ++j) gb(i, j) += g(i, ca + j);
    }
  });
}

/// Sum of all entries, 1 x 1.
inline Var sum(Tape& t, Var x) {
  double s = 0.0;
  for (double v : t.value(x).flat()) s += v;
  return t.push(Matrix::scalar(s), [x](Tape& tp, int self) {
    const double g = tp.grad_of(self)[0];
    for (double& v : tp.grad_of(x.id).flat()) v += g;
  });
}

/// Weighted sum of 1x1 terms: sum_i w_i * x_i.
inline Var weighted_sum(Tape& t, const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * t.item(terms[i]);
  return t.push(Matrix::scalar(s), [terms, weights](Tape& tp, int self) {
    const double g = tp.grad_of(self)[0];
    for (std::size_t i = 0; i < terms.size(); ++i) tp.grad_of(terms[i].id)[0] += weights[i] * g;
  });
}

/// Dot product of two 1 x c rows, 1 x 1.
inline Var dot(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("dot: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return t.push(Matrix::scalar(s), [a, b](Tape& tp, int self) {
    const double g = tp.grad_of(self)[0];
    const Matrix& av = tp.value_of(a.id);
    const Matrix& bv = tp.value_of(b.id);
    Matrix& ga = tp.grad_of(a.id);
    Matrix& gb = tp.grad_of(b.id);
    for (std::size_t i = 0; i < av.size(); ++i) {
      ga[i] += g * bv[i];
      gb[i] += g * av[i];
    }
  });
}

/// Rows of parameter pid selected by index; gradients are scattered straight
/// into the gradient store so large tables are never copied.
inline Var gather(Tape& t, int pid, std::vector<std::size_t> rows) {
  const Matrix& table = t.params().value(pid);
  Matrix out(rows.size(), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= table.rows()) throw std::out_of_range("gather: row index out of range");
    auto src = table.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return t.push(std::move(out), [pid, rows = std::move(rows)](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    Matrix& dst = tp.sink()[pid];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto d = dst.row(rows[i]);
      auto s = g.row(i);
      for (std::size_t j = 0; j < s.size(); ++j) d[j] += s[j];
    }
  });
}

/// Mean binary cross entropy of scores (any shape) against labels, with
/// scores clamped into [clamp, 1 - clamp]; clamped entries get no gradient.
inline Var bce(Tape& t, Var scores, const std::vector<double>& labels, double clamp = 1e-7) {
  const Matrix& s = t.value(scores);
  if (s.size() != labels.size()) throw std::invalid_argument("bce: label count mismatch");
  if (labels.empty()) throw std::invalid_argument("bce: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = std::clamp(s[i], clamp, 1.0 - clamp);
    total += labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  const double n = static_cast<double>(labels.size());
  return t.push(Matrix::scalar(-total / n), [scores, labels, clamp, n](Tape& tp, int self) {
    const double g = tp.grad_of(self)[0];
    const Matrix& s = tp.value_of(scores.id);
    Matrix& gs = tp.grad_of(scores.id);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double p = s[i];
      if (p < clamp || p > 1.0 - clamp) continue;
      gs[i] += -g / n * (labels[i] / p - (1.0 - labels[i]) / (1.0 - p));
    }
  });
}

}  // namespace nhp::ad
