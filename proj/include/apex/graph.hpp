#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "apex/tensor.hpp"

namespace apex {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff tape over dense tensors. Ops append nodes; backward()
// walks the tape in reverse. One Graph instance per forward pass, single-owner.
template <typename T>
class Graph {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::function<void(Graph&)> back;
  };

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

  Var constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }
  Var leaf(Tensor<T> v, bool requires_grad) {
    return push(std::move(v), grad_enabled_ && requires_grad, nullptr);
  }

  const Tensor<T>& val(Var v) const { return nodes_[v.id].val; }
  const Shape& shape(Var v) const { return nodes_[v.id].val.shape; }
  bool rg(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient of a node after backward(); zeros if it never received one.
  Tensor<T> grad_of(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.numel() == 0) return Tensor<T>::zeros(n.val.shape);
    return n.grad;
  }

  // Direct access for externally defined ops (see stn.hpp).
  const Tensor<T>& grad_ref(Var v) const { return nodes_[v.id].grad; }
  std::function<void(Graph&)>& back_of(Var v) { return nodes_[v.id].back; }

  void backward(Var loss) {
    if (shape(loss).numel() != 1) throw std::logic_error("backward: loss must be scalar");
    if (!nodes_[loss.id].requires_grad) return;
    ensure_grad(loss.id);
    nodes_[loss.id].grad[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.requires_grad && n.grad.numel() > 0) n.back(*this);
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return unary_or_binary(std::move(out), a, b, [](Graph& g, int id, Var a, Var b) {
      const Tensor<T>& go = g.nodes_[id].grad;
      g.accum(a, go);
      g.accum(b, go);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return unary_or_binary(std::move(out), a, b, [](Graph& g, int id, Var a, Var b) {
      const Tensor<T>& go = g.nodes_[id].grad;
      g.accum(a, go);
      g.accum_scaled(b, go, T(-1));
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return unary_or_binary(std::move(out), a, b, [](Graph& g, int id, Var a, Var b) {
      const Tensor<T>& go = g.nodes_[id].grad;
      if (g.rg(a)) {
        Tensor<T>& ga = g.grad_buf(a);
        const Tensor<T>& vb = g.val(b);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vb[i];
      }
      if (g.rg(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        const Tensor<T>& va = g.val(a);
        for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * va[i];
      }
    });
  }

  Var div(Var a, Var b) {
    check_same_shape(a, b, "div");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= vb[i];
    return unary_or_binary(std::move(out), a, b, [](Graph& g, int id, Var a, Var b) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& va = g.val(a);
      const Tensor<T>& vb = g.val(b);
      if (g.rg(a)) {
        Tensor<T>& ga = g.grad_buf(a);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / vb[i];
      }
      if (g.rg(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i] * va[i] / (vb[i] * vb[i]);
      }
    });
  }

  Var add_scalar(Var a, T s) {
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return unary(std::move(out), a, [](Graph& g, int id, Var a) { g.accum(a, g.nodes_[id].grad); });
  }

  Var mul_scalar(Var a, T s) {
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return unary(std::move(out), a,
                 [s](Graph& g, int id, Var a) { g.accum_scaled(a, g.nodes_[id].grad, s); });
  }

  Var neg(Var a) { return mul_scalar(a, T(-1)); }

  // 1 - x, used for mask complements
  Var one_minus(Var a) { return add_scalar(mul_scalar(a, T(-1)), T(1)); }

  // ---- unary nonlinearities (vectorised over the flat buffer) ----

  using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
  using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

  Var tanh_(Var a) {
    Tensor<T> out = val(a);
    ArrMap(out.ptr(), out.numel()) = CArrMap(out.ptr(), out.numel()).tanh();
    return unary(std::move(out), a, [](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& y = g.nodes_[id].val;
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * (T(1) - y[i] * y[i]);
    });
  }

  Var sigmoid_(Var a) {
    Tensor<T> out = val(a);
    ArrMap(out.ptr(), out.numel()) = CArrMap(out.ptr(), out.numel()).logistic();
    return unary(std::move(out), a, [](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& y = g.nodes_[id].val;
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i] * (T(1) - y[i]);
    });
  }

  // softplus(x) = log1p(exp(min(x,30))) + max(x-30, 0), exact within fp
  static void softplus_vec(const T* x, T* y, int64_t n) {
    CArrMap xm(x, n);
    ArrMap ym(y, n);
    ym = (xm.min(T(30))).exp().log1p() + (xm - T(30)).max(T(0));
  }

  Var softplus_(Var a) {
    Tensor<T> out(val(a).shape);
    softplus_vec(val(a).ptr(), out.ptr(), out.numel());
    return unary(std::move(out), a, [](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& x = g.val(a);
      Tensor<T>& ga = g.grad_buf(a);
      const int64_t n = go.numel();
      Eigen::Array<T, Eigen::Dynamic, 1> s =
          CArrMap(x.ptr(), n).logistic() * CArrMap(go.ptr(), n);
      ArrMap(ga.ptr(), n) += s;
    });
  }

  Var elu(Var a) {
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i)
      out[i] = out[i] > T(0) ? out[i] : std::expm1(out[i]);
    return unary(std::move(out), a, [](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& x = g.val(a);
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga[i] += go[i] * (x[i] > T(0) ? T(1) : std::exp(x[i]));
    });
  }

  Var relu(Var a) {
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(T(0), out[i]);
    return unary(std::move(out), a, [](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& x = g.val(a);
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i)
        if (x[i] > T(0)) ga[i] += go[i];
    });
  }

  // elementwise max; gradient follows the winner (ties go to a)
  Var max_(Var a, Var b) {
    check_same_shape(a, b, "max");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], vb[i]);
    return unary_or_binary(std::move(out), a, b, [](Graph& g, int id, Var a, Var b) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& va = g.val(a);
      const Tensor<T>& vb = g.val(b);
      if (g.rg(a)) {
        Tensor<T>& ga = g.grad_buf(a);
        for (int64_t i = 0; i < go.numel(); ++i)
          if (va[i] >= vb[i]) ga[i] += go[i];
      }
      if (g.rg(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        for (int64_t i = 0; i < go.numel(); ++i)
          if (vb[i] > va[i]) gb[i] += go[i];
      }
    });
  }

  Var exp_(Var a) {
    Tensor<T> out = val(a);
    ArrMap(out.ptr(), out.numel()) = CArrMap(out.ptr(), out.numel()).exp();
    return unary(std::move(out), a, [](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& y = g.nodes_[id].val;
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i];
    });
  }

  Var log_eps(Var a, T eps) {
    Tensor<T> out = val(a);
    ArrMap(out.ptr(), out.numel()) = (CArrMap(out.ptr(), out.numel()) + eps).log();
    return unary(std::move(out), a, [eps](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& x = g.val(a);
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / (x[i] + eps);
    });
  }

  Var clamp(Var a, T lo, T hi) {
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
    return unary(std::move(out), a, [lo, hi](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& x = g.val(a);
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i)
        if (x[i] > lo && x[i] < hi) ga[i] += go[i];
    });
  }

  // ---- broadcasting ----

  // x:[K,M...] * b:[M...] with b broadcast across axis 0
  Var mul_bcast0(Var x, Var b) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vb = val(b);
    const int K = vx.shape[0];
    const int64_t M = vx.numel() / K;
    if (vb.numel() != M) throw std::invalid_argument("mul_bcast0 size mismatch");
    Tensor<T> out = vx;
    for (int k = 0; k < K; ++k)
      for (int64_t m = 0; m < M; ++m) out[k * M + m] *= vb[m];
    return unary_or_binary(std::move(out), x, b, [K, M](Graph& g, int id, Var x, Var b) {
      const Tensor<T>& go = g.nodes_[id].grad;
      if (g.rg(x)) {
        Tensor<T>& gx = g.grad_buf(x);
        const Tensor<T>& vb = g.val(b);
        for (int k = 0; k < K; ++k)
          for (int64_t m = 0; m < M; ++m) gx[k * M + m] += go[k * M + m] * vb[m];
      }
      if (g.rg(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        const Tensor<T>& vx = g.val(x);
        for (int k = 0; k < K; ++k)
          for (int64_t m = 0; m < M; ++m) gb[m] += go[k * M + m] * vx[k * M + m];
      }
    });
  }

  // x:[N,...] scaled per row by s:[N]
  Var mul_rowscale(Var x, Var s) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vs = val(s);
    const int N = vx.shape[0];
    if (vs.numel() != N) throw std::invalid_argument("mul_rowscale size mismatch");
    const int64_t M = vx.numel() / N;
    Tensor<T> out = vx;
    for (int n = 0; n < N; ++n)
      for (int64_t m = 0; m < M; ++m) out[n * M + m] *= vs[n];
    return unary_or_binary(std::move(out), x, s, [N, M](Graph& g, int id, Var x, Var s) {
      const Tensor<T>& go = g.nodes_[id].grad;
      if (g.rg(x)) {
        Tensor<T>& gx = g.grad_buf(x);
        const Tensor<T>& vs = g.val(s);
        for (int n = 0; n < N; ++n)
          for (int64_t m = 0; m < M; ++m) gx[n * M + m] += go[n * M + m] * vs[n];
      }
      if (g.rg(s)) {
        Tensor<T>& gs = g.grad_buf(s);
        const Tensor<T>& vx = g.val(x);
        for (int n = 0; n < N; ++n) {
          T acc = 0;
          for (int64_t m = 0; m < M; ++m) acc += go[n * M + m] * vx[n * M + m];
          gs[n] += acc;
        }
      }
    });
  }

  // x:[N,...] + s:[N] broadcast across each row
  Var add_rowbias(Var x, Var s) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vs = val(s);
    const int N = vx.shape[0];
    if (vs.numel() != N) throw std::invalid_argument("add_rowbias size mismatch");
    const int64_t M = vx.numel() / N;
    Tensor<T> out = vx;
    for (int n = 0; n < N; ++n)
      for (int64_t m = 0; m < M; ++m) out[n * M + m] += vs[n];
    return unary_or_binary(std::move(out), x, s, [N, M](Graph& g, int id, Var x, Var s) {
      const Tensor<T>& go = g.nodes_[id].grad;
      if (g.rg(x)) g.accum(x, go);
      if (g.rg(s)) {
        Tensor<T>& gs = g.grad_buf(s);
        for (int n = 0; n < N; ++n) {
          T acc = 0;
          for (int64_t m = 0; m < M; ++m) acc += go[n * M + m];
          gs[n] += acc;
        }
      }
    });
  }

  // x:[K,C,M...] * m:[K,M...] broadcast across the middle axis
  Var mul_bcast_mid(Var x, Var m) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vm = val(m);
    const int K = vx.shape[0], C = vx.shape[1];
    const int64_t M = vx.numel() / (static_cast<int64_t>(K) * C);
    if (vm.numel() != K * M) throw std::invalid_argument("mul_bcast_mid size mismatch");
    Tensor<T> out = vx;
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < C; ++c)
        for (int64_t i = 0; i < M; ++i) out[(k * C + c) * M + i] *= vm[k * M + i];
    return unary_or_binary(std::move(out), x, m, [K, C, M](Graph& g, int id, Var x, Var m) {
      const Tensor<T>& go = g.nodes_[id].grad;
      if (g.rg(x)) {
        Tensor<T>& gx = g.grad_buf(x);
        const Tensor<T>& vm = g.val(m);
        for (int k = 0; k < K; ++k)
          for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < M; ++i)
              gx[(k * C + c) * M + i] += go[(k * C + c) * M + i] * vm[k * M + i];
      }
      if (g.rg(m)) {
        Tensor<T>& gm = g.grad_buf(m);
        const Tensor<T>& vx = g.val(x);
        for (int k = 0; k < K; ++k)
          for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < M; ++i)
              gm[k * M + i] += go[(k * C + c) * M + i] * vx[(k * C + c) * M + i];
      }
    });
  }

  // [N,C1,rest...] ++ [N,C2,rest...] -> [N,C1+C2,rest...]
  Var concat_channels(const std::vector<Var>& parts) {
    const Shape s0 = shape(parts[0]);
    const int N = s0[0];
    const int64_t M = val(parts[0]).numel() / (static_cast<int64_t>(N) * s0[1]);
    int C = 0;
    for (Var p : parts) C += shape(p)[1];
    Shape os = s0;
    os.dim[1] = C;
    Tensor<T> out(os);
    int off = 0;
    for (Var p : parts) {
      const Tensor<T>& vp = val(p);
      const int c = vp.shape[1];
      for (int n = 0; n < N; ++n)
        std::copy(vp.ptr() + static_cast<int64_t>(n) * c * M,
                  vp.ptr() + static_cast<int64_t>(n + 1) * c * M,
                  out.ptr() + (static_cast<int64_t>(n) * C + off) * M);
      off += c;
    }
    bool needs = grad_enabled_ && any_rg(parts);
    std::vector<Var> ps = parts;
    return push_op(std::move(out), needs, [ps, N, C, M](Graph& g, int id) {
      const Tensor<T>& go = g.nodes_[id].grad;
      int off = 0;
      for (Var p : ps) {
        const int c = g.shape(p)[1];
        if (g.rg(p)) {
          Tensor<T>& gp = g.grad_buf(p);
          for (int n = 0; n < N; ++n) {
            const T* src = go.ptr() + (static_cast<int64_t>(n) * C + off) * M;
            T* dst = gp.ptr() + static_cast<int64_t>(n) * c * M;
            for (int64_t i = 0; i < c * M; ++i) dst[i] += src[i];
          }
        }
        off += c;
      }
    });
  }

  // x:[K,C,rest...] -> [K,len,rest...] picking channels [start, start+len)
  Var slice_channels(Var a, int start, int len) {
    const Tensor<T>& va = val(a);
    const int K = va.shape[0], C = va.shape[1];
    const int64_t M = va.numel() / (static_cast<int64_t>(K) * C);
    Shape os = va.shape;
    os.dim[1] = len;
    Tensor<T> out(os);
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < len; ++c)
        std::copy(va.ptr() + ((static_cast<int64_t>(k) * C + start + c) * M),
                  va.ptr() + ((static_cast<int64_t>(k) * C + start + c + 1) * M),
                  out.ptr() + ((static_cast<int64_t>(k) * len + c) * M));
    return unary(std::move(out), a, [K, C, M, start, len](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& ga = g.grad_buf(a);
      for (int k = 0; k < K; ++k)
        for (int c = 0; c < len; ++c) {
          const T* src = go.ptr() + ((static_cast<int64_t>(k) * len + c) * M);
          T* dst = ga.ptr() + ((static_cast<int64_t>(k) * C + start + c) * M);
          for (int64_t i = 0; i < M; ++i) dst[i] += src[i];
        }
    });
  }

  // [R,C] -> [C,R]
  Var transpose2d(Var a) {
    const Tensor<T>& va = val(a);
    const int R = va.shape[0], C = va.shape[1];
    Tensor<T> out(Shape{C, R});
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) out.at(c, r) = va.at(r, c);
    return unary(std::move(out), a, [R, C](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& ga = g.grad_buf(a);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ga[r * C + c] += go[c * R + r];
    });
  }

  // ---- shape ----

  Var reshape(Var a, Shape s) {
    Tensor<T> out = val(a).reshaped(s);
    return unary(std::move(out), a, [](Graph& g, int id, Var a) {
      Tensor<T>& ga = g.grad_buf(a);
      const Tensor<T>& go = g.nodes_[id].grad;
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    });
  }

  Var concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat0: empty");
    Shape s0 = shape(parts[0]);
    int total = 0;
    for (Var p : parts) total += shape(p)[0];
    Shape os = s0;
    os.dim[0] = total;
    Tensor<T> out(os);
    int64_t off = 0;
    for (Var p : parts) {
      const Tensor<T>& vp = val(p);
      std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + off);
      off += vp.numel();
    }
    bool needs = grad_enabled_ && any_rg(parts);
    std::vector<Var> ps = parts;
    return push_op(std::move(out), needs, [ps](Graph& g, int id) {
      const Tensor<T>& go = g.nodes_[id].grad;
      int64_t off = 0;
      for (Var p : ps) {
        const int64_t n = g.val(p).numel();
        if (g.rg(p)) {
          Tensor<T>& gp = g.grad_buf(p);
          for (int64_t i = 0; i < n; ++i) gp[i] += go[off + i];
        }
        off += n;
      }
    });
  }

  Var slice0(Var a, int start, int len) {
    const Tensor<T>& va = val(a);
    Shape os = va.shape;
    os.dim[0] = len;
    const int64_t M = va.numel() / va.shape[0];
    Tensor<T> out(os);
    std::copy(va.data.begin() + start * M, va.data.begin() + (start + len) * M, out.data.begin());
    return unary(std::move(out), a, [start, M](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& ga = g.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[start * M + i] += go[i];
    });
  }

  // x:[N,C] -> [N,len] picking columns [start, start+len)
  Var slice_cols(Var a, int start, int len) {
    const Tensor<T>& va = val(a);
    const int N = va.shape[0], C = va.shape[1];
    Tensor<T> out(Shape{N, len});
    for (int n = 0; n < N; ++n)
      for (int j = 0; j < len; ++j) out.at(n, j) = va.at(n, start + j);
    return unary(std::move(out), a, [start, len, N, C](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& ga = g.grad_buf(a);
      for (int n = 0; n < N; ++n)
        for (int j = 0; j < len; ++j) ga[n * C + start + j] += go[n * len + j];
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    const int N = shape(parts[0])[0];
    int C = 0;
    for (Var p : parts) {
      if (shape(p)[0] != N || shape(p).rank != 2)
        throw std::invalid_argument("concat_cols: need [N,c] parts");
      C += shape(p)[1];
    }
    Tensor<T> out(Shape{N, C});
    int off = 0;
    for (Var p : parts) {
      const Tensor<T>& vp = val(p);
      const int c = vp.shape[1];
      for (int n = 0; n < N; ++n)
        for (int j = 0; j < c; ++j) out.at(n, off + j) = vp.at(n, j);
      off += c;
    }
    bool needs = grad_enabled_ && any_rg(parts);
    std::vector<Var> ps = parts;
    return push_op(std::move(out), needs, [ps, N, C](Graph& g, int id) {
      const Tensor<T>& go = g.nodes_[id].grad;
      int off = 0;
      for (Var p : ps) {
        const int c = g.shape(p)[1];
        if (g.rg(p)) {
          Tensor<T>& gp = g.grad_buf(p);
          for (int n = 0; n < N; ++n)
            for (int j = 0; j < c; ++j) gp[n * c + j] += go[n * C + off + j];
        }
        off += c;
      }
    });
  }

  Var gather_rows(Var a, std::vector<int> idx) {
    const Tensor<T>& va = val(a);
    const int64_t M = va.numel() / va.shape[0];
    Shape os = va.shape;
    os.dim[0] = static_cast<int>(idx.size());
    Tensor<T> out(os);
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy(va.data.begin() + idx[r] * M, va.data.begin() + (idx[r] + 1) * M,
                out.data.begin() + r * M);
    return unary(std::move(out), a, [idx, M](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& ga = g.grad_buf(a);
      for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t i = 0; i < M; ++i) ga[idx[r] * M + i] += go[r * M + i];
    });
  }

  // ---- reductions ----

  Var sum_all(Var a) {
    Tensor<T> out = Tensor<T>::scalar(val(a).sum());
    return unary(std::move(out), a,
                 [](Graph& g, int id, Var a) { g.accum_broadcast(a, g.nodes_[id].grad[0]); });
  }

  Var mean_all(Var a) {
    const T inv = T(1) / static_cast<T>(val(a).numel());
    Tensor<T> out = Tensor<T>::scalar(val(a).sum() * inv);
    return unary(std::move(out), a, [inv](Graph& g, int id, Var a) {
      g.accum_broadcast(a, g.nodes_[id].grad[0] * inv);
    });
  }

  // [K,M...] -> [M...]
  Var sum_axis0(Var a) {
    const Tensor<T>& va = val(a);
    const int K = va.shape[0];
    const int64_t M = va.numel() / K;
    Shape os;
    os.rank = va.shape.rank - 1;
    if (os.rank == 0) os = Shape{1};
    else
      for (int i = 0; i < os.rank; ++i) os.dim[i] = va.shape[i + 1];
    Tensor<T> out(os);
    for (int k = 0; k < K; ++k)
      for (int64_t m = 0; m < M; ++m) out[m] += va[k * M + m];
    return unary(std::move(out), a, [K, M](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& ga = g.grad_buf(a);
      for (int k = 0; k < K; ++k)
        for (int64_t m = 0; m < M; ++m) ga[k * M + m] += go[m];
    });
  }

  // [N,M...] -> [N], summing everything per row
  Var row_sum(Var a) {
    const Tensor<T>& va = val(a);
    const int N = va.shape[0];
    const int64_t M = va.numel() / N;
    Tensor<T> out(Shape{N});
    for (int n = 0; n < N; ++n) {
      T acc = 0;
      for (int64_t m = 0; m < M; ++m) acc += va[n * M + m];
      out[n] = acc;
    }
    return unary(std::move(out), a, [N, M](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& ga = g.grad_buf(a);
      for (int n = 0; n < N; ++n)
        for (int64_t m = 0; m < M; ++m) ga[n * M + m] += go[n];
    });
  }

  // ---- dense linear algebra ----

  // x:[N,in] @ w:[in,out] + b:[out] -> [N,out]; b optional (invalid Var skips bias)
  Var linear(Var x, Var w, Var b) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    const int N = vx.shape[0], In = vx.shape[1], Out = vw.shape[1];
    if (vw.shape[0] != In) throw std::invalid_argument("linear: weight shape mismatch");
    Tensor<T> out(Shape{N, Out});
    MapM(out.ptr(), N, Out).noalias() = CMapM(vx.ptr(), N, In) * CMapM(vw.ptr(), In, Out);
    if (b.valid()) {
      const Tensor<T>& vb = val(b);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < Out; ++o) out.at(n, o) += vb[o];
    }
    bool needs = grad_enabled_ && (rg(x) || rg(w) || (b.valid() && rg(b)));
    return push_op(std::move(out), needs, [x, w, b, N, In, Out](Graph& g, int id) {
      const Tensor<T>& go = g.nodes_[id].grad;
      CMapM gom(go.ptr(), N, Out);
      if (g.rg(x)) {
        MapM gx(g.grad_buf(x).ptr(), N, In);
        gx.noalias() += gom * CMapM(g.val(w).ptr(), In, Out).transpose();
      }
      if (g.rg(w)) {
        MapM gw(g.grad_buf(w).ptr(), In, Out);
        gw.noalias() += CMapM(g.val(x).ptr(), N, In).transpose() * gom;
      }
      if (b.valid() && g.rg(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        for (int n = 0; n < N; ++n)
          for (int o = 0; o < Out; ++o) gb[o] += go[n * Out + o];
      }
    });
  }

  // ---- softmax over axis 0 ----

  // [K,M...]: softmax across K separately at each position m; all passes run
  // vectorised along the contiguous M axis
  Var softmax_axis0(Var a) {
    const Tensor<T>& va = val(a);
    const int K = va.shape[0];
    const int64_t M = va.numel() / K;
    Tensor<T> out(va.shape);
    AlignedVec<T> colbuf(M);
    ArrMap acc(colbuf.data(), M);
    acc = CArrMap(va.ptr(), M);
    for (int k = 1; k < K; ++k) acc = acc.max(CArrMap(va.ptr() + k * M, M));
    for (int k = 0; k < K; ++k)
      ArrMap(out.ptr() + k * M, M) = (CArrMap(va.ptr() + k * M, M) - acc).exp();
    acc = CArrMap(out.ptr(), M);
    for (int k = 1; k < K; ++k) acc += CArrMap(out.ptr() + k * M, M);
    acc = acc.inverse();
    for (int k = 0; k < K; ++k) ArrMap(out.ptr() + k * M, M) *= acc;
    return unary(std::move(out), a, [K, M](Graph& g, int id, Var a) {
      const Tensor<T>& go = g.nodes_[id].grad;
      const Tensor<T>& y = g.nodes_[id].val;
      Tensor<T>& ga = g.grad_buf(a);
      AlignedVec<T> dot(M, T(0));
      ArrMap dm(dot.data(), M);
      for (int k = 0; k < K; ++k)
        dm += CArrMap(go.ptr() + k * M, M) * CArrMap(y.ptr() + k * M, M);
      for (int k = 0; k < K; ++k)
        ArrMap(ga.ptr() + k * M, M) += CArrMap(y.ptr() + k * M, M) *
                                       (CArrMap(go.ptr() + k * M, M) - dm);
    });
  }

  // ---- convolution ----

  // x:[N,Cin,H,W], w:[Cout,Cin,kh,kw], b:[Cout] (optional), zero padding
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    const int N = vx.shape[0], Cin = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    const int Cout = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
    if (vw.shape[1] != Cin) throw std::invalid_argument("conv2d: channel mismatch");
    const int oh = (H + 2 * pad - kh) / stride + 1;
    const int ow = (W + 2 * pad - kw) / stride + 1;
    const int ck = Cin * kh * kw;
    Tensor<T> out(Shape{N, Cout, oh, ow});
    AlignedVec<T> col(static_cast<size_t>(ck) * oh * ow);
    for (int n = 0; n < N; ++n) {
      im2col(vx.ptr() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, kh, kw, stride, pad, oh,
             ow, col.data());
      MapM om(out.ptr() + static_cast<int64_t>(n) * Cout * oh * ow, Cout, oh * ow);
      om.noalias() = CMapM(vw.ptr(), Cout, ck) * CMapM(col.data(), ck, oh * ow);
    }
    if (b.valid()) {
      const Tensor<T>& vb = val(b);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Cout; ++c) {
          T* p = out.ptr() + ((static_cast<int64_t>(n) * Cout + c) * oh * ow);
          for (int i = 0; i < oh * ow; ++i) p[i] += vb[c];
        }
    }
    bool needs = grad_enabled_ && (rg(x) || rg(w) || (b.valid() && rg(b)));
    return push_op(
        std::move(out), needs,
        [x, w, b, N, Cin, H, W, Cout, kh, kw, stride, pad, oh, ow, ck](Graph& g, int id) {
          const Tensor<T>& go = g.nodes_[id].grad;
          const Tensor<T>& vx = g.val(x);
          const Tensor<T>& vw = g.val(w);
          AlignedVec<T> col(static_cast<size_t>(ck) * oh * ow);
          AlignedVec<T> dcol(static_cast<size_t>(ck) * oh * ow);
          for (int n = 0; n < N; ++n) {
            CMapM gom(go.ptr() + static_cast<int64_t>(n) * Cout * oh * ow, Cout, oh * ow);
            if (g.rg(w)) {
              im2col(vx.ptr() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, kh, kw, stride,
                     pad, oh, ow, col.data());
              MapM gw(g.grad_buf(w).ptr(), Cout, ck);
              gw.noalias() += gom * CMapM(col.data(), ck, oh * ow).transpose();
            }
            if (g.rg(x)) {
              MapM dc(dcol.data(), ck, oh * ow);
              dc.noalias() = CMapM(vw.ptr(), Cout, ck).transpose() * gom;
              col2im(dcol.data(), Cin, H, W, kh, kw, stride, pad, oh, ow,
                     g.grad_buf(x).ptr() + static_cast<int64_t>(n) * Cin * H * W);
            }
          }
          if (b.valid() && g.rg(b)) {
            Tensor<T>& gb = g.grad_buf(b);
            for (int n = 0; n < N; ++n)
              for (int c = 0; c < Cout; ++c) {
                const T* p = go.ptr() + ((static_cast<int64_t>(n) * Cout + c) * oh * ow);
                T acc = 0;
                for (int i = 0; i < oh * ow; ++i) acc += p[i];
                gb[c] += acc;
              }
          }
        });
  }

  // bilinear resize with clamp-to-edge sampling; x:[N,C,h,w] -> [N,C,oh,ow]
  Var resize_bilinear(Var x, int oh, int ow) {
    const Tensor<T>& vx = val(x);
    const int N = vx.shape[0], C = vx.shape[1], h = vx.shape[2], w = vx.shape[3];
    Tensor<T> out(Shape{N, C, oh, ow});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* src = vx.ptr() + ((static_cast<int64_t>(n) * C + c) * h * w);
        T* dst = out.ptr() + ((static_cast<int64_t>(n) * C + c) * oh * ow);
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            T fy, fx;
            int y0, x0;
            T ay, ax;
            resize_coords(oy, oh, h, fy, y0, ay);
            resize_coords(ox, ow, w, fx, x0, ax);
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            dst[oy * ow + ox] = (T(1) - ay) * ((T(1) - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1]) +
                                ay * ((T(1) - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1]);
          }
      }
    return unary(std::move(out), x, [N, C, h, w, oh, ow](Graph& g, int id, Var x) {
      const Tensor<T>& go = g.nodes_[id].grad;
      Tensor<T>& gx = g.grad_buf(x);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          T* dsrc = gx.ptr() + ((static_cast<int64_t>(n) * C + c) * h * w);
          const T* dout = go.ptr() + ((static_cast<int64_t>(n) * C + c) * oh * ow);
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              T fy, fx;
              int y0, x0;
              T ay, ax;
              resize_coords(oy, oh, h, fy, y0, ay);
              resize_coords(ox, ow, w, fx, x0, ax);
              const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
              const T gv = dout[oy * ow + ox];
              dsrc[y0 * w + x0] += (T(1) - ay) * (T(1) - ax) * gv;
              dsrc[y0 * w + x1] += (T(1) - ay) * ax * gv;
              dsrc[y1 * w + x0] += ay * (T(1) - ax) * gv;
              dsrc[y1 * w + x1] += ay * ax * gv;
            }
        }
    });
  }

  // ---- gradient plumbing ----

  Tensor<T>& grad_buf(Var v) {
    ensure_grad(v.id);
    return nodes_[v.id].grad;
  }

  void accum(Var v, const Tensor<T>& g) {
    if (!rg(v)) return;
    Tensor<T>& gv = grad_buf(v);
    for (int64_t i = 0; i < g.numel(); ++i) gv[i] += g[i];
  }

  void accum_scaled(Var v, const Tensor<T>& g, T s) {
    if (!rg(v)) return;
    Tensor<T>& gv = grad_buf(v);
    for (int64_t i = 0; i < g.numel(); ++i) gv[i] += s * g[i];
  }

  void accum_broadcast(Var v, T g) {
    if (!rg(v)) return;
    Tensor<T>& gv = grad_buf(v);
    for (int64_t i = 0; i < gv.numel(); ++i) gv[i] += g;
  }

  Var push(Tensor<T> v, bool requires_grad, std::function<void(Graph&)> back) {
    Node n;
    n.val = std::move(v);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  static T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  }

  static T softplus_scalar(T x) {
    if (x > T(30)) return x;
    if (x < T(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
  }

  // Pushes a node whose backward callback receives (graph, node id).
  template <typename F>
  Var push_op(Tensor<T> out, bool needs, F f) {
    if (!needs) return push(std::move(out), false, nullptr);
    Var r = push(std::move(out), true, nullptr);
    nodes_[r.id].back = [f, idx = r.id](Graph& g) { f(g, idx); };
    return r;
  }

 private:
  void check_same_shape(Var a, Var b, const char* op) const {
    if (shape(a) != shape(b))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape(a).str() + " vs " +
                                  shape(b).str());
  }

  bool any_rg(const std::vector<Var>& vs) const {
    for (Var v : vs)
      if (rg(v)) return true;
    return false;
  }

  template <typename F>
  Var unary(Tensor<T> out, Var a, F f) {
    bool needs = grad_enabled_ && rg(a);
    if (!needs) return push(std::move(out), false, nullptr);
    Var r = push(std::move(out), true, nullptr);
    nodes_[r.id].back = [f, a, idx = r.id](Graph& g) { f(g, idx, a); };
    return r;
  }

  template <typename F>
  Var unary_or_binary(Tensor<T> out, Var a, Var b, F f) {
    bool needs = grad_enabled_ && (rg(a) || rg(b));
    if (!needs) return push(std::move(out), false, nullptr);
    Var r = push(std::move(out), true, nullptr);
    nodes_[r.id].back = [f, a, b, idx = r.id](Graph& g) { f(g, idx, a, b); };
    return r;
  }

  void ensure_grad(int id) {
    if (nodes_[id].grad.numel() == 0) nodes_[id].grad = Tensor<T>::zeros(nodes_[id].val.shape);
  }

  static void resize_coords(int o, int on, int in, T& f, int& i0, T& a) {
    f = (static_cast<T>(o) + T(0.5)) * static_cast<T>(in) / static_cast<T>(on) - T(0.5);
    if (f < T(0)) f = T(0);
    if (f > static_cast<T>(in - 1)) f = static_cast<T>(in - 1);
    i0 = static_cast<int>(std::floor(f));
    if (i0 > in - 2) i0 = std::max(0, in - 2);
    a = f - static_cast<T>(i0);
  }

  static void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int oh,
                     int ow, T* col) {
    // col layout: [C*kh*kw, oh*ow]
    int64_t r = 0;
    for (int c = 0; c < C; ++c)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj, ++r) {
          T* dst = col + r * oh * ow;
          for (int oy = 0; oy < oh; ++oy) {
            const int y = oy * stride - pad + ki;
            if (y < 0 || y >= H) {
              std::fill(dst + oy * ow, dst + (oy + 1) * ow, T(0));
              continue;
            }
            const T* src = x + (static_cast<int64_t>(c) * H + y) * W;
            for (int ox = 0; ox < ow; ++ox) {
              const int xx = ox * stride - pad + kj;
              dst[oy * ow + ox] = (xx >= 0 && xx < W) ? src[xx] : T(0);
            }
          }
        }
  }

  static void col2im(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                     int oh, int ow, T* dx) {
    int64_t r = 0;
    for (int c = 0; c < C; ++c)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj, ++r) {
          const T* src = col + r * oh * ow;
          for (int oy = 0; oy < oh; ++oy) {
            const int y = oy * stride - pad + ki;
            if (y < 0 || y >= H) continue;
            T* dst = dx + (static_cast<int64_t>(c) * H + y) * W;
            for (int ox = 0; ox < ow; ++ox) {
              const int xx = ox * stride - pad + kj;
              if (xx >= 0 && xx < W) dst[xx] += src[oy * ow + ox];
            }
          }
        }
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace apex
