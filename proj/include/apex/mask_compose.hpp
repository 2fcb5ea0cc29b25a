#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "apex/graph.hpp"
#include "apex/stn.hpp"
#include "apex/tensor.hpp"

// Mask composition and image likelihood. Pure functions: object mask logits are
// clamped, placed into image space, normalised across components with a
// presence shift, multiplied by the total foreground occupancy, and combined
// with the background complement; the image is scored under a spatial Gaussian
// mixture whose mixing weights are the masks.

namespace apex {

inline constexpr double kDefaultLogitBound = 8.0;
inline constexpr double kDefaultSigmaFg = 0.1;
inline constexpr double kDefaultSigmaBg = 0.04;
inline constexpr double kEntropyEps = 1e-6;
inline constexpr double kMaskLogFloor = 1e-12;

// K-1 foreground masks plus the background complement; all K sum to one at
// every pixel.
struct MaskStackVars {
  Var fg_masks;  // [K-1, H, W]
  Var bg_mask;   // [H, W]
  Var fg_total;  // [H, W]
};

template <typename T>
struct MaskStack {
  Tensor<T> fg_masks;
  Tensor<T> bg_mask;
  Tensor<T> fg_total;
};

template <typename T>
struct ComponentMeans {
  Tensor<T> fg_means;  // [K-1, 3, H, W]
  Tensor<T> bg_mean;   // [3, H, W]
  T sigma_fg = T(kDefaultSigmaFg);
  T sigma_bg = T(kDefaultSigmaBg);
};

// alpha = c * tanh(raw); entries land in (-c, c)
template <typename T>
Var clamp_logits(Graph<T>& g, Var raw_logits, T c) {
  if (!(c > T(0))) throw std::invalid_argument("clamp_logits: c must be positive");
  return g.mul_scalar(g.tanh_(raw_logits), c);
}

// m_fg = tanh( sum_k STN(softplus(alpha_k) * z_pres_k, pose_k) ), shape [H,W]
template <typename T>
Var foreground_mask(Graph<T>& g, Var alphas, Var z_pres, Var poses, int H, int W) {
  const Shape as = g.shape(alphas);  // [K-1, gh, gw]
  const int K = as[0], gh = as[1], gw = as[2];
  Var occ = g.mul_rowscale(g.softplus_(alphas), z_pres);
  Var placed = stn_place_batch(g, g.reshape(occ, Shape{K, 1, gh, gw}), poses, H, W);
  return g.tanh_(g.reshape(g.sum_axis0(placed), Shape{H, W}));
}

// alpha_hat_k = STN(alpha_k, pose_k) + 2c z_pres_k; m_hat = softmax_k(alpha_hat)
template <typename T>
Var normalize_object_masks(Graph<T>& g, Var alphas, Var z_pres, Var poses, int H, int W, T c) {
  const Shape as = g.shape(alphas);
  const int K = as[0], gh = as[1], gw = as[2];
  Var placed = stn_place_batch(g, g.reshape(alphas, Shape{K, 1, gh, gw}), poses, H, W);
  Var flat = g.reshape(placed, Shape{K, H * W});
  Var shifted = g.add_rowbias(flat, g.mul_scalar(z_pres, T(2) * c));
  return g.reshape(g.softmax_axis0(shifted), Shape{K, H, W});
}

template <typename T>
MaskStackVars compose_masks(Graph<T>& g, Var alphas, Var z_pres, Var poses, int H, int W, T c) {
  Var m_fg = foreground_mask(g, alphas, z_pres, poses, H, W);
  Var m_hat = normalize_object_masks(g, alphas, z_pres, poses, H, W, c);
  MaskStackVars out;
  out.fg_total = m_fg;
  out.fg_masks = g.mul_bcast0(m_hat, m_fg);
  out.bg_mask = g.one_minus(m_fg);
  return out;
}

// log p(x) summed over pixels; per pixel: log sum_k m_k prod_c N(x_c | mu_kc, sigma_k^2).
// masks:[K,H,W] (foreground rows then background), means:[K,3,H,W], x:[3,H,W].
template <typename T>
Var sgmm_log_likelihood(Graph<T>& g, Var masks, Var means, const Tensor<T>& x,
                        const Tensor<T>& sigma_per_comp) {
  if (!x.all_finite()) throw std::invalid_argument("sgmm_log_likelihood: non-finite input image");
  const Shape ms = g.shape(masks);
  const int K = ms[0], H = ms[1], W = ms[2];
  const int64_t M = static_cast<int64_t>(H) * W;
  if (g.shape(means)[0] != K || sigma_per_comp.numel() != K)
    throw std::invalid_argument("sgmm_log_likelihood: component count mismatch");

  std::vector<T> log_norm(K), inv_var(K);
  constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5*log(2*pi)
  for (int k = 0; k < K; ++k) {
    const T s = sigma_per_comp[k];
    log_norm[k] = static_cast<T>(-kHalfLog2Pi) - std::log(s);
    inv_var[k] = T(1) / (s * s);
  }

  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using AM = Eigen::Map<Arr>;
  using CAM = Eigen::Map<const Arr>;

  // t[k,m] = log(mask+floor) + sum_c logN; all passes vectorised along M
  auto fill_terms = [K, M, log_norm, inv_var](const Tensor<T>& mvv, const Tensor<T>& uvv,
                                              const Tensor<T>& xv, Tensor<T>& t) {
    for (int k = 0; k < K; ++k) {
      AM tk(t.ptr() + k * M, M);
      tk = (CAM(mvv.ptr() + k * M, M) + T(kMaskLogFloor)).log() + T(3) * log_norm[k];
      for (int c = 0; c < 3; ++c) {
        CAM xc(xv.ptr() + c * M, M);
        CAM uc(uvv.ptr() + (static_cast<int64_t>(k) * 3 + c) * M, M);
        tk -= T(0.5) * inv_var[k] * (xc - uc).square();
      }
    }
  };

  const Tensor<T>& mv = g.val(masks);
  const Tensor<T>& uv = g.val(means);
  Tensor<T> out = Tensor<T>::scalar(T(0));
  {
    Tensor<T> t(Shape{K, static_cast<int>(M)});
    fill_terms(mv, uv, x, t);
    Arr mx = CAM(t.ptr(), M);
    for (int k = 1; k < K; ++k) mx = mx.max(CAM(t.ptr() + k * M, M));
    Arr z = Arr::Zero(M);
    for (int k = 0; k < K; ++k) z += (CAM(t.ptr() + k * M, M) - mx).exp();
    Arr ll = mx + z.log();
    // fixed-order accumulation keeps results identical run to run
    T total = 0;
    for (int64_t i = 0; i < M; ++i) total += ll[i];
    out[0] = total;
  }

  bool needs = g.grad_enabled() && (g.rg(masks) || g.rg(means));
  Tensor<T> x_copy = x;
  return g.push_op(
      std::move(out), needs, [masks, means, x_copy, K, M, fill_terms, inv_var](Graph<T>& gg, int id) {
        const T gscale = gg.grad_ref(Var{id})[0];
        const Tensor<T>& mvv = gg.val(masks);
        const Tensor<T>& uvv = gg.val(means);
        const bool nm = gg.rg(masks), nu = gg.rg(means);
        Tensor<T>* gm = nm ? &gg.grad_buf(masks) : nullptr;
        Tensor<T>* gu = nu ? &gg.grad_buf(means) : nullptr;
        Tensor<T> t(Shape{K, static_cast<int>(M)});
        fill_terms(mvv, uvv, x_copy, t);
        Arr mx = CAM(t.ptr(), M);
        for (int k = 1; k < K; ++k) mx = mx.max(CAM(t.ptr() + k * M, M));
        Arr z = Arr::Zero(M);
        for (int k = 0; k < K; ++k) {
          AM tk(t.ptr() + k * M, M);
          tk = (tk - mx).exp();
          z += tk;
        }
        z = z.inverse();  // t[k] * z = responsibility
        for (int k = 0; k < K; ++k) {
          AM tk(t.ptr() + k * M, M);
          tk *= z;  // p_k
          if (nm)
            AM(gm->ptr() + k * M, M) +=
                gscale * tk / (CAM(mvv.ptr() + k * M, M) + T(kMaskLogFloor));
          if (nu)
            for (int c = 0; c < 3; ++c) {
              const int64_t off = (static_cast<int64_t>(k) * 3 + c) * M;
              AM(gu->ptr() + off, M) +=
                  gscale * inv_var[k] * tk * (CAM(x_copy.ptr() + c * M, M) - CAM(uvv.ptr() + off, M));
            }
        }
      });
}

// convenience: assemble per-component sigmas (K-1 foreground + background)
template <typename T>
Tensor<T> component_sigmas(int K_minus_1, T sigma_fg, T sigma_bg) {
  Tensor<T> s(Shape{K_minus_1 + 1});
  for (int k = 0; k < K_minus_1; ++k) s[k] = sigma_fg;
  s[K_minus_1] = sigma_bg;
  return s;
}

template <typename T>
Var mixture_log_likelihood(Graph<T>& g, const MaskStackVars& masks, Var fg_means, Var bg_mean,
                           const Tensor<T>& x, T sigma_fg, T sigma_bg) {
  const Shape fs = g.shape(masks.fg_masks);
  const int K1 = fs[0], H = fs[1], W = fs[2];
  Var all_masks = g.concat0({masks.fg_masks, g.reshape(masks.bg_mask, Shape{1, H, W})});
  Var all_means = g.concat0({fg_means, g.reshape(bg_mean, Shape{1, 3, H, W})});
  return sgmm_log_likelihood(g, all_masks, all_means, x, component_sigmas(K1, sigma_fg, sigma_bg));
}

// Eq-style mask entropy: sum_k sum_px -m_fg * m_k * log(m_k); 0*log0 := 0 via
// eps. Fused single-pass op, vectorised along the pixel axis.
template <typename T>
Var mask_entropy_loss(Graph<T>& g, const MaskStackVars& masks) {
  Var m = masks.fg_masks;
  Var w = masks.fg_total;
  const Shape s = g.shape(m);
  const int K = s[0];
  const int64_t M = g.val(m).numel() / K;
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using AM = Eigen::Map<Arr>;
  using CAM = Eigen::Map<const Arr>;
  const Tensor<T>& mv = g.val(m);
  const Tensor<T>& wv = g.val(w);
  Tensor<T> out = Tensor<T>::scalar(T(0));
  {
    CAM wm(wv.ptr(), M);
    T total = 0;
    Arr term(M);
    for (int k = 0; k < K; ++k) {
      CAM mk(mv.ptr() + k * M, M);
      term = wm * mk * (mk + T(kEntropyEps)).log();
      for (int64_t i = 0; i < M; ++i) total -= term[i];
    }
    out[0] = total;
  }
  bool needs = g.grad_enabled() && (g.rg(m) || g.rg(w));
  return g.push_op(std::move(out), needs, [m, w, K, M](Graph<T>& gg, int id) {
    const T gscale = gg.grad_ref(Var{id})[0];
    const Tensor<T>& mv = gg.val(m);
    const Tensor<T>& wv = gg.val(w);
    CAM wm(wv.ptr(), M);
    const bool nmm = gg.rg(m), nw = gg.rg(w);
    Tensor<T>* gm = nmm ? &gg.grad_buf(m) : nullptr;
    Tensor<T>* gw = nw ? &gg.grad_buf(w) : nullptr;
    for (int k = 0; k < K; ++k) {
      CAM mk(mv.ptr() + k * M, M);
      Arr lg = (mk + T(kEntropyEps)).log();
      if (nmm) AM(gm->ptr() + k * M, M) -= gscale * wm * (lg + mk / (mk + T(kEntropyEps)));
      if (nw) AM(gw->ptr(), M) -= gscale * mk * lg;
    }
  });
}

// SCALOR-style ablation normaliser: m_k = (a_k)^2 / (sum_k a_k + eps)
template <typename T>
Var scalor_style_normalize(Graph<T>& g, Var alphas_s) {
  const Shape s = g.shape(alphas_s);
  const int K = s[0];
  const int64_t M = g.val(alphas_s).numel() / K;
  Var flat = g.reshape(alphas_s, Shape{K, static_cast<int>(M)});
  Var num = g.mul(flat, flat);
  Var den = g.add_scalar(g.sum_axis0(flat), T(1e-6));
  Var inv = g.div(g.constant(Tensor<T>::full(Shape{static_cast<int>(M)}, T(1))), den);
  return g.reshape(g.mul_bcast0(num, inv), s);
}

// ---- plain-tensor wrappers ----

template <typename T>
Tensor<T> clamp_logits(const Tensor<T>& raw, T c) {
  Graph<T> g(false);
  return g.val(clamp_logits(g, g.constant(raw), c));
}

template <typename T>
Tensor<T> foreground_mask(const Tensor<T>& alphas, const std::vector<T>& z_pres,
                          const std::vector<PoseParams>& poses, int H, int W) {
  Graph<T> g(false);
  Var a = g.constant(alphas);
  Var zp = g.constant(Tensor<T>::from(Shape{static_cast<int>(z_pres.size())}, z_pres));
  Var ps = g.constant(poses_to_tensor<T>(poses));
  return g.val(foreground_mask(g, a, zp, ps, H, W));
}

template <typename T>
Tensor<T> normalize_object_masks(const Tensor<T>& alphas, const std::vector<T>& z_pres,
                                 const std::vector<PoseParams>& poses, int H, int W,
                                 T c = T(kDefaultLogitBound)) {
  Graph<T> g(false);
  Var a = g.constant(alphas);
  Var zp = g.constant(Tensor<T>::from(Shape{static_cast<int>(z_pres.size())}, z_pres));
  Var ps = g.constant(poses_to_tensor<T>(poses));
  return g.val(normalize_object_masks(g, a, zp, ps, H, W, c));
}

template <typename T>
MaskStack<T> compose_masks(const Tensor<T>& alphas, const std::vector<T>& z_pres,
                           const std::vector<PoseParams>& poses, int H, int W,
                           T c = T(kDefaultLogitBound)) {
  Graph<T> g(false);
  Var a = g.constant(alphas);
  Var zp = g.constant(Tensor<T>::from(Shape{static_cast<int>(z_pres.size())}, z_pres));
  Var ps = g.constant(poses_to_tensor<T>(poses));
  MaskStackVars mv = compose_masks(g, a, zp, ps, H, W, c);
  return MaskStack<T>{g.val(mv.fg_masks), g.val(mv.bg_mask), g.val(mv.fg_total)};
}

template <typename T>
T mixture_log_likelihood(const Tensor<T>& x, const MaskStack<T>& masks,
                         const ComponentMeans<T>& means) {
  Graph<T> g(false);
  MaskStackVars mv{g.constant(masks.fg_masks), g.constant(masks.bg_mask),
                   g.constant(masks.fg_total)};
  return g.val(mixture_log_likelihood(g, mv, g.constant(means.fg_means), g.constant(means.bg_mean),
                                      x, means.sigma_fg, means.sigma_bg))[0];
}

template <typename T>
T mask_entropy_loss(const MaskStack<T>& masks) {
  Graph<T> g(false);
  MaskStackVars mv{g.constant(masks.fg_masks), g.constant(masks.bg_mask),
                   g.constant(masks.fg_total)};
  return g.val(mask_entropy_loss(g, mv))[0];
}

template <typename T>
Tensor<T> scalor_style_normalize(const Tensor<T>& alphas_s) {
  Graph<T> g(false);
  return g.val(scalor_style_normalize(g, g.constant(alphas_s)));
}

}  // namespace apex
