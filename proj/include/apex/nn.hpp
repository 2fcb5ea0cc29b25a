#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "apex/graph.hpp"
#include "apex/latents.hpp"
#include "apex/rng.hpp"
#include "apex/tensor.hpp"

namespace apex {

// Named parameters with their Adam state.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value, grad, m, v;
  };

  int add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    Entry e;
    e.name = name;
    e.grad = Tensor<T>::zeros(init.shape);
    e.m = Tensor<T>::zeros(init.shape);
    e.v = Tensor<T>::zeros(init.shape);
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    index_[name] = static_cast<int>(entries_.size()) - 1;
    return static_cast<int>(entries_.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Entry& operator[](int i) { return entries_[i]; }
  const Entry& operator[](int i) const { return entries_[i]; }
  int size() const { return static_cast<int>(entries_.size()); }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(T(0));
  }

  int64_t num_scalars() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  double grad_norm() const {
    double acc = 0;
    for (const auto& e : entries_)
      for (int64_t i = 0; i < e.grad.numel(); ++i)
        acc += static_cast<double>(e.grad[i]) * e.grad[i];
    return std::sqrt(acc);
  }

  // Adam with global-norm clipping; t is the 1-based step index.
  void adam_step(double lr, int64_t t, double clip_norm = 5.0, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8) {
    double scale = 1.0;
    if (clip_norm > 0) {
      const double n = grad_norm();
      if (n > clip_norm) scale = clip_norm / n;
    }
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& e : entries_) {
      for (int64_t i = 0; i < e.value.numel(); ++i) {
        const double gi = static_cast<double>(e.grad[i]) * scale;
        e.m[i] = static_cast<T>(beta1 * e.m[i] + (1 - beta1) * gi);
        e.v[i] = static_cast<T>(beta2 * e.v[i] + (1 - beta2) * gi * gi);
        const double mhat = e.m[i] / bc1;
        const double vhat = e.v[i] / bc2;
        e.value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

// Leases parameters into one graph as leaf nodes and harvests their gradients
// back after backward(). One ParamCtx per forward pass.
template <typename T>
class ParamCtx {
 public:
  ParamCtx(Graph<T>& g, ParamStore<T>& ps, bool train)
      : g_(g), ps_(ps), train_(train), cache_(ps.size(), Var{}) {}

  Var operator[](int idx) {
    if (!cache_[idx].valid()) cache_[idx] = g_.leaf(ps_[idx].value, train_);
    return cache_[idx];
  }

  // accumulate leaf grads into the store (call after backward)
  void harvest() {
    for (int i = 0; i < static_cast<int>(cache_.size()); ++i) {
      if (!cache_[i].valid()) continue;
      const Tensor<T>& gr = g_.grad_ref(cache_[i]);
      if (gr.numel() == 0) continue;
      Tensor<T>& dst = ps_[i].grad;
      for (int64_t k = 0; k < gr.numel(); ++k) dst[k] += gr[k];
    }
  }

  // accumulate leaf grads into an external buffer (one tensor per parameter);
  // lets parallel workers keep private gradients for a deterministic merge
  void harvest_to(std::vector<Tensor<T>>& grads) {
    grads.resize(cache_.size());
    for (int i = 0; i < static_cast<int>(cache_.size()); ++i) {
      if (!cache_[i].valid()) continue;
      const Tensor<T>& gr = g_.grad_ref(cache_[i]);
      if (gr.numel() == 0) continue;
      if (grads[i].numel() == 0) grads[i] = Tensor<T>::zeros(gr.shape);
      for (int64_t k = 0; k < gr.numel(); ++k) grads[i][k] += gr[k];
    }
  }

  Graph<T>& graph() { return g_; }

 private:
  Graph<T>& g_;
  ParamStore<T>& ps_;
  bool train_;
  std::vector<Var> cache_;
};

// ---- initialisers ----

template <typename T>
Tensor<T> init_normal(Shape s, double std, RngStream& rng) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(std * rng.next_normal());
  return t;
}

// ---- layers ----

template <typename T>
struct Linear {
  int w = -1, b = -1;
  static Linear create(ParamStore<T>& ps, const std::string& name, int in, int out,
                       RngStream& rng, bool bias = true) {
    Linear l;
    l.w = ps.add(name + ".w", init_normal<T>(Shape{in, out}, std::sqrt(1.0 / in), rng));
    if (bias) l.b = ps.add(name + ".b", Tensor<T>::zeros(Shape{out}));
    return l;
  }
  Var operator()(ParamCtx<T>& ctx, Var x) const {
    return ctx.graph().linear(x, ctx[w], b >= 0 ? ctx[b] : Var{});
  }
};

template <typename T>
struct Conv2d {
  int w = -1, b = -1;
  int stride = 1, pad = 0;
  static Conv2d create(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k,
                       int stride, int pad, RngStream& rng) {
    Conv2d c;
    c.stride = stride;
    c.pad = pad;
    const double std = std::sqrt(2.0 / (cin * k * k));
    c.w = ps.add(name + ".w", init_normal<T>(Shape{cout, cin, k, k}, std, rng));
    c.b = ps.add(name + ".b", Tensor<T>::zeros(Shape{cout}));
    return c;
  }
  Var operator()(ParamCtx<T>& ctx, Var x) const {
    return ctx.graph().conv2d(x, ctx[w], ctx[b], stride, pad);
  }
};

// gated recurrent cell on row-batched states: x:[N,in], h:[N,hidden]
template <typename T>
struct GruCell {
  Linear<T> wx, wh;
  int hidden = 0;
  static GruCell create(ParamStore<T>& ps, const std::string& name, int in, int hidden,
                        RngStream& rng) {
    GruCell c;
    c.hidden = hidden;
    c.wx = Linear<T>::create(ps, name + ".wx", in, 3 * hidden, rng);
    c.wh = Linear<T>::create(ps, name + ".wh", hidden, 3 * hidden, rng, /*bias=*/false);
    return c;
  }
  Var operator()(ParamCtx<T>& ctx, Var x, Var h) const {
    Graph<T>& g = ctx.graph();
    Var gx = wx(ctx, x);
    Var gh = wh(ctx, h);
    Var r = g.sigmoid_(g.add(g.slice_cols(gx, 0, hidden), g.slice_cols(gh, 0, hidden)));
    Var z = g.sigmoid_(g.add(g.slice_cols(gx, hidden, hidden), g.slice_cols(gh, hidden, hidden)));
    Var n = g.tanh_(g.add(g.slice_cols(gx, 2 * hidden, hidden),
                          g.mul(r, g.slice_cols(gh, 2 * hidden, hidden))));
    return g.add(g.mul(g.one_minus(z), h), g.mul(z, n));
  }
};

}  // namespace apex
