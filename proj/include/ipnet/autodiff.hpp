#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ipnet/errors.hpp"
#include "ipnet/optim.hpp"

namespace ipnet::ad {

/// Dense row-major f64 tensor. Scalars use shape {1}.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d, bool rg = false)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (data.size() != static_cast<std::size_t>(numel())) {
      throw ConfigError("Tensor: data length does not match shape product");
    }
  }

  static Tensor zeros(std::vector<int> s) {
    int n = 1;
    for (int e : s) n *= e;
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<int> s, double v) {
    int n = 1;
    for (int e : s) n *= e;
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  int numel() const {
    int n = 1;
    for (int e : shape) n *= e;
    return n;
  }

  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

/// Record of primitive operations in creation order, which is a topological
/// order by construction. backward() walks it in exact reverse; adjoints
/// accumulate additively across fan-out.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(const Tensor& t) { return make_node(t.shape, t.data, t.requires_grad, nullptr); }

  Var constant(std::vector<int> shape, std::vector<double> data) {
    return make_node(std::move(shape), std::move(data), false, nullptr);
  }

  Var scalar(double v) { return constant({1}, {v}); }

  /// Id the next created node will receive; primitives capture it in their
  /// adjoint closures before calling make_node.
  int next_id() const { return static_cast<int>(nodes_.size()); }

  Var make_node(std::vector<int> shape, std::vector<double> value, bool needs_grad,
                std::function<void(Tape&)> pull) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const std::vector<int>& shape(int id) const { return nodes_.at(id).shape; }
  const std::vector<double>& value(int id) const { return nodes_.at(id).value; }
  std::vector<double>& grad(int id) { return nodes_.at(id).grad; }
  bool needs_grad(int id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  const std::vector<int>& shape(Var v) const { return shape(v.id); }
  const std::vector<double>& value(Var v) const { return value(v.id); }
  const std::vector<double>& grad(Var v) { return grad(v.id); }

  /// Reverse pass from a scalar loss. Nodes the loss does not reach keep
  /// zero gradients.
  void backward(Var loss) {
    if (loss.tape != this) {
      throw ConfigError("backward: loss lives on a different tape");
    }
    if (nodes_[loss.id].value.size() != 1) {
      throw ConfigError("backward: loss must be scalar, got shape " +
                        shape_str(nodes_[loss.id].shape));
    }
    for (Node& n : nodes_) {
      n.grad.assign(n.value.size(), 0.0);
    }
    nodes_[loss.id].grad[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.needs_grad && n.pull) {
        n.pull(*this);
      }
    }
  }

 private:
  struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool needs_grad = false;
    std::function<void(Tape&)> pull;
  };

  std::vector<Node> nodes_;
};

namespace detail {

inline Tape& tape_of(Var a, const char* op) {
  if (a.tape == nullptr || a.id < 0) {
    throw ConfigError(std::string(op) + ": unbound variable");
  }
  return *a.tape;
}

inline void same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) {
    throw ConfigError(std::string(op) + ": operands live on different tapes");
  }
}

inline void shape_check(bool ok, const char* op, const std::vector<int>& a,
                        const std::vector<int>& b) {
  if (!ok) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                      shape_str(b));
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise / affine
// --------------------------------------------------------------------------

/// a + b for identical shapes, or b a length-cols(a) bias broadcast across
/// rows of a 2-D a (the only broadcast the engine supports).
inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, "add");
  detail::same_tape(a, b, "add");
  const auto& sa = t.shape(a.id);
  const auto& sb = t.shape(b.id);
  const auto& va = t.value(a.id);
  const auto& vb = t.value(b.id);
  const bool same = sa == sb;
  const bool bias = sb.size() == 1 && sa.size() == 2 && sb[0] == sa[1];
  detail::shape_check(same || bias, "add", sa, sb);

  std::vector<double> out(va.size());
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  } else {
    const int rows = sa[0], cols = sa[1];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out[r * cols + c] = va[r * cols + c] + vb[c];
  }

  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ia = a.id, ib = b.id, iy = t.next_id();
    pull = [ia, ib, iy, same](Tape& tp) {
      const auto& gy = tp.grad(iy);
      if (tp.needs_grad(ia)) {
        auto& ga = tp.grad(ia);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (tp.needs_grad(ib)) {
        auto& gb = tp.grad(ib);
        if (same) {
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
        } else {
          const int cols = static_cast<int>(gb.size());
          const int rows = static_cast<int>(gy.size()) / cols;
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) gb[c] += gy[r * cols + c];
        }
      }
    };
  }
  return t.make_node(sa, std::move(out), ng, std::move(pull));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a, "sub");
  detail::same_tape(a, b, "sub");
  const auto& sa = t.shape(a.id);
  const auto& sb = t.shape(b.id);
  detail::shape_check(sa == sb, "sub", sa, sb);
  const auto& va = t.value(a.id);
  const auto& vb = t.value(b.id);
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];

  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ia = a.id, ib = b.id, iy = t.next_id();
    pull = [ia, ib, iy](Tape& tp) {
      const auto& gy = tp.grad(iy);
      if (tp.needs_grad(ia)) {
        auto& ga = tp.grad(ia);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (tp.needs_grad(ib)) {
        auto& gb = tp.grad(ib);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
      }
    };
  }
  return t.make_node(sa, std::move(out), ng, std::move(pull));
}

/// Elementwise product, identical shapes.
inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a, "mul");
  detail::same_tape(a, b, "mul");
  const auto& sa = t.shape(a.id);
  const auto& sb = t.shape(b.id);
  detail::shape_check(sa == sb, "mul", sa, sb);
  const auto& va = t.value(a.id);
  const auto& vb = t.value(b.id);
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];

  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ia = a.id, ib = b.id, iy = t.next_id();
    pull = [ia, ib, iy](Tape& tp) {
      const auto& gy = tp.grad(iy);
      const auto& va2 = tp.value(ia);
      const auto& vb2 = tp.value(ib);
      if (tp.needs_grad(ia)) {
        auto& ga = tp.grad(ia);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * vb2[i];
      }
      if (tp.needs_grad(ib)) {
        auto& gb = tp.grad(ib);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * va2[i];
      }
    };
  }
  return t.make_node(sa, std::move(out), ng, std::move(pull));
}

/// k·x + c elementwise with scalar constants.
inline Var affine(Var x, double k, double c) {
  Tape& t = detail::tape_of(x, "affine");
  const auto& vx = t.value(x.id);
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * vx[i] + c;
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, k](Tape& tp) {
      const auto& gy = tp.grad(iy);
      auto& gx = tp.grad(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += k * gy[i];
    };
  }
  return t.make_node(t.shape(x.id), std::move(out), ng, std::move(pull));
}

// --------------------------------------------------------------------------
// Matrix products
// --------------------------------------------------------------------------

/// (m,k)·(k,n) → (m,n).
inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, "matmul");
  detail::same_tape(a, b, "matmul");
  const auto& sa = t.shape(a.id);
  const auto& sb = t.shape(b.id);
  detail::shape_check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], "matmul", sa, sb);
  const int m = sa[0], k = sa[1], n = sb[1];

  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    detail::CMatMap ma(t.value(a.id).data(), m, k);
    detail::CMatMap mb(t.value(b.id).data(), k, n);
    detail::MatMap mo(out.data(), m, n);
    mo = ma * mb;
  }
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ia = a.id, ib = b.id, iy = t.next_id();
    pull = [ia, ib, iy, m, k, n](Tape& tp) {
      detail::CMatMap gy(tp.grad(iy).data(), m, n);
      if (tp.needs_grad(ia)) {
        detail::CMatMap vb(tp.value(ib).data(), k, n);
        detail::MatMap ga(tp.grad(ia).data(), m, k);
        ga += gy * vb.transpose();
      }
      if (tp.needs_grad(ib)) {
        detail::CMatMap va(tp.value(ia).data(), m, k);
        detail::MatMap gb(tp.grad(ib).data(), k, n);
        gb += va.transpose() * gy;
      }
    };
  }
  return t.make_node({m, n}, std::move(out), ng, std::move(pull));
}

/// a·bᵀ for a (m,k), b (n,k) → (m,n).
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::tape_of(a, "matmul_nt");
  detail::same_tape(a, b, "matmul_nt");
  const auto& sa = t.shape(a.id);
  const auto& sb = t.shape(b.id);
  detail::shape_check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[1], "matmul_nt", sa, sb);
  const int m = sa[0], k = sa[1], n = sb[0];

  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    detail::CMatMap ma(t.value(a.id).data(), m, k);
    detail::CMatMap mb(t.value(b.id).data(), n, k);
    detail::MatMap mo(out.data(), m, n);
    mo = ma * mb.transpose();
  }
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ia = a.id, ib = b.id, iy = t.next_id();
    pull = [ia, ib, iy, m, k, n](Tape& tp) {
      detail::CMatMap gy(tp.grad(iy).data(), m, n);
      if (tp.needs_grad(ia)) {
        detail::CMatMap vb(tp.value(ib).data(), n, k);
        detail::MatMap ga(tp.grad(ia).data(), m, k);
        ga += gy * vb;
      }
      if (tp.needs_grad(ib)) {
        detail::CMatMap va(tp.value(ia).data(), m, k);
        detail::MatMap gb(tp.grad(ib).data(), n, k);
        gb += gy.transpose() * va;
      }
    };
  }
  return t.make_node({m, n}, std::move(out), ng, std::move(pull));
}

/// W (out,in) · v (in) → (out).
inline Var matvec(Var w, Var v) {
  Tape& t = detail::tape_of(w, "matvec");
  detail::same_tape(w, v, "matvec");
  const auto& sw = t.shape(w.id);
  const auto& sv = t.shape(v.id);
  detail::shape_check(sw.size() == 2 && sv.size() == 1 && sw[1] == sv[0], "matvec", sw, sv);
  const int out_dim = sw[0], in_dim = sw[1];

  std::vector<double> out(out_dim);
  {
    detail::CMatMap mw(t.value(w.id).data(), out_dim, in_dim);
    Eigen::Map<const Eigen::VectorXd> mv(t.value(v.id).data(), in_dim);
    Eigen::Map<Eigen::VectorXd> mo(out.data(), out_dim);
    mo = mw * mv;
  }
  const bool ng = t.needs_grad(w.id) || t.needs_grad(v.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int iw = w.id, iv = v.id, iy = t.next_id();
    pull = [iw, iv, iy, out_dim, in_dim](Tape& tp) {
      Eigen::Map<const Eigen::VectorXd> gy(tp.grad(iy).data(), out_dim);
      if (tp.needs_grad(iw)) {
        Eigen::Map<const Eigen::VectorXd> vv(tp.value(iv).data(), in_dim);
        detail::MatMap gw(tp.grad(iw).data(), out_dim, in_dim);
        gw += gy * vv.transpose();
      }
      if (tp.needs_grad(iv)) {
        detail::CMatMap vw(tp.value(iw).data(), out_dim, in_dim);
        Eigen::Map<Eigen::VectorXd> gv(tp.grad(iv).data(), in_dim);
        gv += vw.transpose() * gy;
      }
    };
  }
  return t.make_node({out_dim}, std::move(out), ng, std::move(pull));
}

/// x (T,in) · Wᵀ + b for W (out,in), b (out) → (T,out).
inline Var linear(Var x, Var w, Var b) { return add(matmul_nt(x, w), b); }

// --------------------------------------------------------------------------
// Convolution / pooling
// --------------------------------------------------------------------------

/// 1-D convolution over x (T, C_in) with kernel w (C_out, C_in, K) and bias
/// b (C_out), stride 1, symmetric zero padding of floor(K/2) per side.
/// Output length is T + 2·floor(K/2) − K + 1 (= T for odd K).
inline Var conv1d(Var x, Var w, Var b) {
  Tape& t = detail::tape_of(x, "conv1d");
  detail::same_tape(x, w, "conv1d");
  detail::same_tape(x, b, "conv1d");
  const auto& sx = t.shape(x.id);
  const auto& sw = t.shape(w.id);
  const auto& sb = t.shape(b.id);
  detail::shape_check(sx.size() == 2 && sw.size() == 3 && sx[1] == sw[1], "conv1d", sx, sw);
  detail::shape_check(sb.size() == 1 && sb[0] == sw[0], "conv1d", sb, sw);
  const int T = sx[0], cin = sx[1], cout = sw[0], K = sw[2];
  const int pad = K / 2;
  const int T_out = T + 2 * pad - K + 1;
  if (T_out <= 0) {
    throw ConfigError("conv1d: kernel longer than padded input");
  }

  const auto& vx = t.value(x.id);
  const auto& vw = t.value(w.id);
  const auto& vb = t.value(b.id);
  std::vector<double> out(static_cast<std::size_t>(T_out) * cout);
  for (int s = 0; s < T_out; ++s) {
    for (int o = 0; o < cout; ++o) {
      double acc = vb[o];
      for (int k = 0; k < K; ++k) {
        const int ti = s + k - pad;
        if (ti < 0 || ti >= T) continue;
        const double* xr = &vx[static_cast<std::size_t>(ti) * cin];
        const double* wr = &vw[(static_cast<std::size_t>(o) * cin) * K + k];
        for (int c = 0; c < cin; ++c) {
          acc += xr[c] * wr[static_cast<std::size_t>(c) * K];
        }
      }
      out[static_cast<std::size_t>(s) * cout + o] = acc;
    }
  }

  const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iw = w.id, ib = b.id, iy = t.next_id();
    pull = [ix, iw, ib, iy, T, cin, cout, K, pad, T_out](Tape& tp) {
      const auto& gy = tp.grad(iy);
      const auto& vx2 = tp.value(ix);
      const auto& vw2 = tp.value(iw);
      const bool nx = tp.needs_grad(ix), nw = tp.needs_grad(iw), nb = tp.needs_grad(ib);
      for (int s = 0; s < T_out; ++s) {
        for (int o = 0; o < cout; ++o) {
          const double g = gy[static_cast<std::size_t>(s) * cout + o];
          if (g == 0.0) continue;
          if (nb) tp.grad(ib)[o] += g;
          for (int k = 0; k < K; ++k) {
            const int ti = s + k - pad;
            if (ti < 0 || ti >= T) continue;
            for (int c = 0; c < cin; ++c) {
              const std::size_t wi = (static_cast<std::size_t>(o) * cin + c) * K + k;
              const std::size_t xi = static_cast<std::size_t>(ti) * cin + c;
              if (nx) tp.grad(ix)[xi] += g * vw2[wi];
              if (nw) tp.grad(iw)[wi] += g * vx2[xi];
            }
          }
        }
      }
    };
  }
  return t.make_node({T_out, cout}, std::move(out), ng, std::move(pull));
}

/// Non-overlapping max pooling over time: (T,C) → (floor(T/w), C).
/// Gradient routes to the first maximal element of each window.
inline Var maxpool1d(Var x, int window) {
  Tape& t = detail::tape_of(x, "maxpool1d");
  const auto& sx = t.shape(x.id);
  detail::shape_check(sx.size() == 2 && window >= 1, "maxpool1d", sx, {window});
  const int T = sx[0], C = sx[1];
  const int T_out = T / window;
  if (T_out == 0) {
    throw ConfigError("maxpool1d: window " + std::to_string(window) +
                      " longer than input length " + std::to_string(T));
  }
  const auto& vx = t.value(x.id);
  std::vector<double> out(static_cast<std::size_t>(T_out) * C);
  std::vector<int> arg(out.size());
  for (int s = 0; s < T_out; ++s) {
    for (int c = 0; c < C; ++c) {
      int best = s * window;
      double bv = vx[static_cast<std::size_t>(best) * C + c];
      for (int k = 1; k < window; ++k) {
        const int ti = s * window + k;
        const double v = vx[static_cast<std::size_t>(ti) * C + c];
        if (v > bv) {
          bv = v;
          best = ti;
        }
      }
      out[static_cast<std::size_t>(s) * C + c] = bv;
      arg[static_cast<std::size_t>(s) * C + c] = best;
    }
  }
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, C, arg = std::move(arg)](Tape& tp) {
      const auto& gy = tp.grad(iy);
      auto& gx = tp.grad(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const int c = static_cast<int>(i % C);
        gx[static_cast<std::size_t>(arg[i]) * C + c] += gy[i];
      }
    };
  }
  return t.make_node({T_out, C}, std::move(out), ng, std::move(pull));
}

// --------------------------------------------------------------------------
// Activations / normalization
// --------------------------------------------------------------------------

/// PReLU with per-channel slope s (C) over x (T,C) or (C).
inline Var prelu(Var x, Var slope) {
  Tape& t = detail::tape_of(x, "prelu");
  detail::same_tape(x, slope, "prelu");
  const auto& sx = t.shape(x.id);
  const auto& ss = t.shape(slope.id);
  const int C = sx.size() == 2 ? sx[1] : sx[0];
  detail::shape_check(ss.size() == 1 && ss[0] == C, "prelu", sx, ss);
  const auto& vx = t.value(x.id);
  const auto& vs = t.value(slope.id);
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int c = static_cast<int>(i % C);
    out[i] = vx[i] >= 0 ? vx[i] : vs[c] * vx[i];
  }
  const bool ng = t.needs_grad(x.id) || t.needs_grad(slope.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, is = slope.id, iy = t.next_id();
    pull = [ix, is, iy, C](Tape& tp) {
      const auto& gy = tp.grad(iy);
      const auto& vx2 = tp.value(ix);
      const auto& vs2 = tp.value(is);
      const bool nx = tp.needs_grad(ix), ns = tp.needs_grad(is);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const int c = static_cast<int>(i % C);
        if (vx2[i] >= 0) {
          if (nx) tp.grad(ix)[i] += gy[i];
        } else {
          if (nx) tp.grad(ix)[i] += gy[i] * vs2[c];
          if (ns) tp.grad(is)[c] += gy[i] * vx2[i];
        }
      }
    };
  }
  return t.make_node(sx, std::move(out), ng, std::move(pull));
}

/// Batch normalization over the time axis of x (T,C), per channel.
/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running stats in place with momentum 0.1 (unbiased variance, matching
/// the usual framework convention). Eval mode is a pure affine map of the
/// running stats.
inline Var batchnorm1d(Var x, Var gamma, Var beta, Tensor& running_mean,
                       Tensor& running_var, bool train, double momentum = 0.1,
                       double eps = 1e-5) {
  Tape& t = detail::tape_of(x, "batchnorm1d");
  detail::same_tape(x, gamma, "batchnorm1d");
  detail::same_tape(x, beta, "batchnorm1d");
  const auto& sx = t.shape(x.id);
  detail::shape_check(sx.size() == 2, "batchnorm1d", sx, {});
  const int T = sx[0], C = sx[1];
  detail::shape_check(t.shape(gamma.id) == std::vector<int>{C}, "batchnorm1d",
                      t.shape(gamma.id), {C});
  detail::shape_check(running_mean.shape == std::vector<int>{C} &&
                          running_var.shape == std::vector<int>{C},
                      "batchnorm1d", running_mean.shape, {C});

  const auto& vx = t.value(x.id);
  const auto& vg = t.value(gamma.id);
  const auto& vb = t.value(beta.id);

  std::vector<double> mean(C, 0.0), var(C, 0.0), inv_std(C);
  if (train) {
    if (T < 2) throw ConfigError("batchnorm1d: train mode needs T >= 2");
    for (int s = 0; s < T; ++s)
      for (int c = 0; c < C; ++c) mean[c] += vx[static_cast<std::size_t>(s) * C + c];
    for (int c = 0; c < C; ++c) mean[c] /= T;
    for (int s = 0; s < T; ++s)
      for (int c = 0; c < C; ++c) {
        const double d = vx[static_cast<std::size_t>(s) * C + c] - mean[c];
        var[c] += d * d;
      }
    for (int c = 0; c < C; ++c) var[c] /= T;
    for (int c = 0; c < C; ++c) {
      running_mean.data[c] = (1.0 - momentum) * running_mean.data[c] + momentum * mean[c];
      const double unbiased = var[c] * T / (T - 1.0);
      running_var.data[c] = (1.0 - momentum) * running_var.data[c] + momentum * unbiased;
    }
  } else {
    mean = running_mean.data;
    var = running_var.data;
  }
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

  std::vector<double> xhat(vx.size()), out(vx.size());
  for (std::size_t i = 0; i < vx.size(); ++i) {
    const int c = static_cast<int>(i % C);
    xhat[i] = (vx[i] - mean[c]) * inv_std[c];
    out[i] = vg[c] * xhat[i] + vb[c];
  }

  const bool ng = t.needs_grad(x.id) || t.needs_grad(gamma.id) || t.needs_grad(beta.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, ig = gamma.id, ib = beta.id, iy = t.next_id();
    pull = [ix, ig, ib, iy, T, C, train, xhat = std::move(xhat),
            inv_std = std::move(inv_std)](Tape& tp) {
      const auto& gy = tp.grad(iy);
      const auto& vg2 = tp.value(ig);
      const bool nx = tp.needs_grad(ix);
      if (tp.needs_grad(ig) || tp.needs_grad(ib)) {
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const int c = static_cast<int>(i % C);
          if (tp.needs_grad(ig)) tp.grad(ig)[c] += gy[i] * xhat[i];
          if (tp.needs_grad(ib)) tp.grad(ib)[c] += gy[i];
        }
      }
      if (!nx) return;
      auto& gx = tp.grad(ix);
      if (!train) {
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const int c = static_cast<int>(i % C);
          gx[i] += gy[i] * vg2[c] * inv_std[c];
        }
        return;
      }
      // d/dx through batch statistics:
      // gx = γ·inv_std·(gy − mean(gy) − x̂·mean(gy·x̂)) per channel.
      std::vector<double> mean_gy(C, 0.0), mean_gyx(C, 0.0);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const int c = static_cast<int>(i % C);
        mean_gy[c] += gy[i];
        mean_gyx[c] += gy[i] * xhat[i];
      }
      for (int c = 0; c < C; ++c) {
        mean_gy[c] /= T;
        mean_gyx[c] /= T;
      }
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const int c = static_cast<int>(i % C);
        gx[i] += vg2[c] * inv_std[c] * (gy[i] - mean_gy[c] - xhat[i] * mean_gyx[c]);
      }
    };
  }
  return t.make_node(sx, std::move(out), ng, std::move(pull));
}

inline Var sigmoid(Var x) {
  Tape& t = detail::tape_of(x, "sigmoid");
  const auto& vx = t.value(x.id);
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-vx[i]));
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy](Tape& tp) {
      const auto& gy = tp.grad(iy);
      const auto& vy = tp.value(iy);
      auto& gx = tp.grad(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * vy[i] * (1.0 - vy[i]);
    };
  }
  return t.make_node(t.shape(x.id), std::move(out), ng, std::move(pull));
}

inline Var tanh_op(Var x) {
  Tape& t = detail::tape_of(x, "tanh");
  const auto& vx = t.value(x.id);
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(vx[i]);
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy](Tape& tp) {
      const auto& gy = tp.grad(iy);
      const auto& vy = tp.value(iy);
      auto& gx = tp.grad(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (1.0 - vy[i] * vy[i]);
    };
  }
  return t.make_node(t.shape(x.id), std::move(out), ng, std::move(pull));
}

/// Row-wise softmax over the last axis of a 2-D input.
inline Var softmax(Var x) {
  Tape& t = detail::tape_of(x, "softmax");
  const auto& sx = t.shape(x.id);
  detail::shape_check(sx.size() == 2, "softmax", sx, {});
  const int R = sx[0], C = sx[1];
  const auto& vx = t.value(x.id);
  std::vector<double> out(vx.size());
  for (int r = 0; r < R; ++r) {
    const double* xr = &vx[static_cast<std::size_t>(r) * C];
    double* yr = &out[static_cast<std::size_t>(r) * C];
    double mx = xr[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    for (int c = 0; c < C; ++c) yr[c] /= sum;
  }
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, R, C](Tape& tp) {
      const auto& gy = tp.grad(iy);
      const auto& vy = tp.value(iy);
      auto& gx = tp.grad(ix);
      for (int r = 0; r < R; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * C;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += gy[off + c] * vy[off + c];
        for (int c = 0; c < C; ++c) gx[off + c] += vy[off + c] * (gy[off + c] - dot);
      }
    };
  }
  return t.make_node(sx, std::move(out), ng, std::move(pull));
}

// --------------------------------------------------------------------------
// Reductions / losses
// --------------------------------------------------------------------------

/// Mean over all entries → scalar {1}.
inline Var mean_all(Var x) {
  Tape& t = detail::tape_of(x, "mean_all");
  const auto& vx = t.value(x.id);
  double s = 0.0;
  for (double v : vx) s += v;
  const double n = static_cast<double>(vx.size());
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, n](Tape& tp) {
      const double g = tp.grad(iy)[0] / n;
      auto& gx = tp.grad(ix);
      for (double& v : gx) v += g;
    };
  }
  return t.make_node({1}, {s / n}, ng, std::move(pull));
}

/// Mean over axis 0 of a 2-D input: (T,C) → (C).
inline Var mean_rows(Var x) {
  Tape& t = detail::tape_of(x, "mean_rows");
  const auto& sx = t.shape(x.id);
  detail::shape_check(sx.size() == 2, "mean_rows", sx, {});
  const int T = sx[0], C = sx[1];
  const auto& vx = t.value(x.id);
  std::vector<double> out(C, 0.0);
  for (int s = 0; s < T; ++s)
    for (int c = 0; c < C; ++c) out[c] += vx[static_cast<std::size_t>(s) * C + c];
  for (int c = 0; c < C; ++c) out[c] /= T;
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, T, C](Tape& tp) {
      const auto& gy = tp.grad(iy);
      auto& gx = tp.grad(ix);
      for (int s = 0; s < T; ++s)
        for (int c = 0; c < C; ++c) gx[static_cast<std::size_t>(s) * C + c] += gy[c] / T;
    };
  }
  return t.make_node({C}, std::move(out), ng, std::move(pull));
}

/// Mean absolute error over all entries; the subgradient at ties is 0.
inline Var l1_loss(Var pred, Var target) {
  Tape& t = detail::tape_of(pred, "l1_loss");
  detail::same_tape(pred, target, "l1_loss");
  const auto& sp = t.shape(pred.id);
  const auto& st = t.shape(target.id);
  detail::shape_check(sp == st, "l1_loss", sp, st);
  const auto& vp = t.value(pred.id);
  const auto& vt = t.value(target.id);
  double s = 0.0;
  for (std::size_t i = 0; i < vp.size(); ++i) s += std::abs(vp[i] - vt[i]);
  const double n = static_cast<double>(vp.size());
  const bool ng = t.needs_grad(pred.id) || t.needs_grad(target.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ip = pred.id, it = target.id, iy = t.next_id();
    pull = [ip, it, iy, n](Tape& tp) {
      const double g = tp.grad(iy)[0] / n;
      const auto& vp2 = tp.value(ip);
      const auto& vt2 = tp.value(it);
      for (std::size_t i = 0; i < vp2.size(); ++i) {
        const double d = vp2[i] - vt2[i];
        const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        if (tp.needs_grad(ip)) tp.grad(ip)[i] += g * sgn;
        if (tp.needs_grad(it)) tp.grad(it)[i] -= g * sgn;
      }
    };
  }
  return t.make_node({1}, {s / n}, ng, std::move(pull));
}

// --------------------------------------------------------------------------
// Slicing / assembly
// --------------------------------------------------------------------------

/// Row i of a 2-D input: (T,C) → (C).
inline Var row(Var x, int i) {
  Tape& t = detail::tape_of(x, "row");
  const auto& sx = t.shape(x.id);
  detail::shape_check(sx.size() == 2 && i >= 0 && i < sx[0], "row", sx, {i});
  const int C = sx[1];
  const auto& vx = t.value(x.id);
  std::vector<double> out(vx.begin() + static_cast<std::size_t>(i) * C,
                          vx.begin() + static_cast<std::size_t>(i + 1) * C);
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, i, C](Tape& tp) {
      const auto& gy = tp.grad(iy);
      auto& gx = tp.grad(ix);
      for (int c = 0; c < C; ++c) gx[static_cast<std::size_t>(i) * C + c] += gy[c];
    };
  }
  return t.make_node({C}, std::move(out), ng, std::move(pull));
}

/// Rows [start, start+len) of a 2-D input.
inline Var slice_rows(Var x, int start, int len) {
  Tape& t = detail::tape_of(x, "slice_rows");
  const auto& sx = t.shape(x.id);
  detail::shape_check(sx.size() == 2 && start >= 0 && len >= 1 && start + len <= sx[0],
                      "slice_rows", sx, {start, len});
  const int C = sx[1];
  const auto& vx = t.value(x.id);
  std::vector<double> out(vx.begin() + static_cast<std::size_t>(start) * C,
                          vx.begin() + static_cast<std::size_t>(start + len) * C);
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, start, len, C](Tape& tp) {
      const auto& gy = tp.grad(iy);
      auto& gx = tp.grad(ix);
      for (std::size_t i = 0; i < static_cast<std::size_t>(len) * C; ++i) {
        gx[static_cast<std::size_t>(start) * C + i] += gy[i];
      }
    };
  }
  return t.make_node({len, C}, std::move(out), ng, std::move(pull));
}

/// Columns [start, start+len) of a 2-D input.
inline Var slice_cols(Var x, int start, int len) {
  Tape& t = detail::tape_of(x, "slice_cols");
  const auto& sx = t.shape(x.id);
  detail::shape_check(sx.size() == 2 && start >= 0 && len >= 1 && start + len <= sx[1],
                      "slice_cols", sx, {start, len});
  const int T = sx[0], C = sx[1];
  const auto& vx = t.value(x.id);
  std::vector<double> out(static_cast<std::size_t>(T) * len);
  for (int r = 0; r < T; ++r)
    for (int c = 0; c < len; ++c)
      out[static_cast<std::size_t>(r) * len + c] = vx[static_cast<std::size_t>(r) * C + start + c];
  const bool ng = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (ng) {
    const int ix = x.id, iy = t.next_id();
    pull = [ix, iy, start, len, T, C](Tape& tp) {
      const auto& gy = tp.grad(iy);
      auto& gx = tp.grad(ix);
      for (int r = 0; r < T; ++r)
        for (int c = 0; c < len; ++c)
          gx[static_cast<std::size_t>(r) * C + start + c] +=
              gy[static_cast<std::size_t>(r) * len + c];
    };
  }
  return t.make_node({T, len}, std::move(out), ng, std::move(pull));
}

/// Concatenate 2-D inputs with equal row counts along the column axis.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  Tape& t = detail::tape_of(parts[0], "concat_cols");
  const int T = t.shape(parts[0].id)[0];
  int total = 0;
  bool ng = false;
  std::vector<int> ids, widths;
  for (Var p : parts) {
    detail::same_tape(parts[0], p, "concat_cols");
    const auto& s = t.shape(p.id);
    detail::shape_check(s.size() == 2 && s[0] == T, "concat_cols", s, {T});
    ids.push_back(p.id);
    widths.push_back(s[1]);
    total += s[1];
    ng = ng || t.needs_grad(p.id);
  }
  std::vector<double> out(static_cast<std::size_t>(T) * total);
  int off = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& v = t.value(ids[k]);
    for (int r = 0; r < T; ++r)
      for (int c = 0; c < widths[k]; ++c)
        out[static_cast<std::size_t>(r) * total + off + c] =
            v[static_cast<std::size_t>(r) * widths[k] + c];
    off += widths[k];
  }
  std::function<void(Tape&)> pull;
  if (ng) {
    const int iy = t.next_id();
    pull = [iy, T, total, ids, widths](Tape& tp) {
      const auto& gy = tp.grad(iy);
      int off2 = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (tp.needs_grad(ids[k])) {
          auto& g = tp.grad(ids[k]);
          for (int r = 0; r < T; ++r)
            for (int c = 0; c < widths[k]; ++c)
              g[static_cast<std::size_t>(r) * widths[k] + c] +=
                  gy[static_cast<std::size_t>(r) * total + off2 + c];
        }
        off2 += widths[k];
      }
    };
  }
  return t.make_node({T, total}, std::move(out), ng, std::move(pull));
}

/// Stack 1-D inputs of equal length into a (N, C) matrix.
inline Var stack_rows(const std::vector<Var>& rows_in) {
  if (rows_in.empty()) throw ConfigError("stack_rows: no inputs");
  Tape& t = detail::tape_of(rows_in[0], "stack_rows");
  const int C = t.shape(rows_in[0].id)[0];
  bool ng = false;
  std::vector<int> ids;
  for (Var r : rows_in) {
    detail::same_tape(rows_in[0], r, "stack_rows");
    const auto& s = t.shape(r.id);
    detail::shape_check(s.size() == 1 && s[0] == C, "stack_rows", s, {C});
    ids.push_back(r.id);
    ng = ng || t.needs_grad(r.id);
  }
  const int N = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<std::size_t>(N) * C);
  for (int r = 0; r < N; ++r) {
    const auto& v = t.value(ids[r]);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::size_t>(r) * C);
  }
  std::function<void(Tape&)> pull;
  if (ng) {
    const int iy = t.next_id();
    pull = [iy, C, ids](Tape& tp) {
      const auto& gy = tp.grad(iy);
      for (std::size_t r = 0; r < ids.size(); ++r) {
        if (!tp.needs_grad(ids[r])) continue;
        auto& g = tp.grad(ids[r]);
        for (int c = 0; c < C; ++c) g[c] += gy[r * C + c];
      }
    };
  }
  return t.make_node({N, C}, std::move(out), ng, std::move(pull));
}

// --------------------------------------------------------------------------
// Optimizer step over named parameter maps
// --------------------------------------------------------------------------

/// One optimizer step over a named parameter set. Standard update rules;
/// rmsprop decay 0.99, adam β = (0.9, 0.999), both with eps 1e-8.
inline void optimizer_step(OptKind kind, std::map<std::string, Tensor>& params,
                           const std::map<std::string, std::vector<double>>& grads,
                           std::map<std::string, MomentState>& state, double lr) {
  for (auto& [name, p] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) continue;
    if (it->second.size() != p.data.size()) {
      throw ConfigError("optimizer_step: grad size mismatch for '" + name + "'");
    }
    MomentState& ms = state[name];
    if (kind == OptKind::adam) {
      adam_update(p.data, it->second, ms, lr);
    } else {
      rmsprop_update(p.data, it->second, ms, lr);
    }
  }
}

}  // namespace ipnet::ad
