#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "apex/graph.hpp"
#include "apex/tensor.hpp"

namespace apex {

// Scale-and-translation box pose. Centers live in normalised image coordinates
// [-1,1] (0 = image centre), scales are box side as a fraction of the image.
struct PoseParams {
  double scale_x = 1.0;
  double scale_y = 1.0;
  double center_x = 0.0;
  double center_y = 0.0;
};

template <typename T>
Tensor<T> poses_to_tensor(const std::vector<PoseParams>& poses) {
  Tensor<T> t(Shape{static_cast<int>(poses.size()), 4});
  for (size_t p = 0; p < poses.size(); ++p) {
    t.at(static_cast<int>(p), 0) = static_cast<T>(poses[p].scale_x);
    t.at(static_cast<int>(p), 1) = static_cast<T>(poses[p].scale_y);
    t.at(static_cast<int>(p), 2) = static_cast<T>(poses[p].center_x);
    t.at(static_cast<int>(p), 3) = static_cast<T>(poses[p].center_y);
  }
  return t;
}

namespace detail {

// scale_floor < 0 means the default one-pixel rule (1/dim per axis)
template <typename T>
void check_scales(const Tensor<T>& poses, int H, int W, bool check_inside,
                  double scale_floor = -1.0) {
  const double fx = scale_floor < 0 ? 1.0 / W : scale_floor;
  const double fy = scale_floor < 0 ? 1.0 / H : scale_floor;
  for (int p = 0; p < poses.shape[0]; ++p) {
    const double sx = poses.at(p, 0), sy = poses.at(p, 1);
    const double cx = poses.at(p, 2), cy = poses.at(p, 3);
    if (sx < fx || sy < fy)
      throw std::invalid_argument("stn: degenerate scale below one pixel");
    if (check_inside && (cx - sx > 1.0 || cx + sx < -1.0 || cy - sy > 1.0 || cy + sy < -1.0))
      throw std::invalid_argument("stn: box entirely outside the image");
  }
}

// pixel index range a box [c-r, c+r] can touch along one axis
template <typename T>
inline void box_pixel_range(T c, T s, int dim, T cells, int& lo, int& hi) {
  const T r = s * (T(1) + T(1) / cells);
  const T u0 = c - r, u1 = c + r;
  lo = std::max(0, static_cast<int>(std::floor((u0 + T(1)) * T(0.5) * dim - T(0.5))) - 1);
  hi = std::min(dim - 1, static_cast<int>(std::ceil((u1 + T(1)) * T(0.5) * dim - T(0.5))) + 1);
}

// bilinear tap with zero padding; returns value and the two finite differences
template <typename T>
inline T tap2d(const T* img, int H, int W, int y0, int x0, T ay, T ax, T& dfy, T& dfx) {
  auto v = [&](int y, int x) -> T {
    return (y >= 0 && y < H && x >= 0 && x < W) ? img[y * W + x] : T(0);
  };
  const T v00 = v(y0, x0), v01 = v(y0, x0 + 1), v10 = v(y0 + 1, x0), v11 = v(y0 + 1, x0 + 1);
  dfx = (T(1) - ay) * (v01 - v00) + ay * (v11 - v10);
  dfy = (T(1) - ax) * (v10 - v00) + ax * (v11 - v01);
  return (T(1) - ay) * ((T(1) - ax) * v00 + ax * v01) + ay * ((T(1) - ax) * v10 + ax * v11);
}

// clamp a fractional coordinate to [0, n-1]; grad_gate reports whether the
// coordinate derivative survives (zero once clamped)
template <typename T>
inline void clamp_coord(T f, int n, int& i0, T& a, T& grad_gate) {
  grad_gate = (f > T(0) && f < T(n - 1)) ? T(1) : T(0);
  if (f < T(0)) f = T(0);
  if (f > T(n - 1)) f = T(n - 1);
  i0 = static_cast<int>(std::floor(f));
  if (i0 > n - 2) i0 = std::max(0, n - 2);
  a = f - i0;
}

}  // namespace detail

// Crops P glimpses of size [gh,gw] out of img:[C,H,W] -> [P,C,gh,gw].
// Bilinear, zero padding outside the image; differentiable in img and poses.
template <typename T>
Var stn_crop_batch(Graph<T>& g, Var img, Var poses, int gh, int gw, bool check_inside = false,
                   double scale_floor = -1.0) {
  const Tensor<T>& vi = g.val(img);
  const Tensor<T>& vp = g.val(poses);
  const int C = vi.shape[0], H = vi.shape[1], W = vi.shape[2];
  const int P = vp.shape[0];
  detail::check_scales(vp, H, W, check_inside, scale_floor);
  Tensor<T> out(Shape{P, C, gh, gw});
  for (int p = 0; p < P; ++p) {
    const T sx = vp.at(p, 0), sy = vp.at(p, 1);
    const T cx = vp.at(p, 2), cy = vp.at(p, 3);
    T* dsts = out.ptr() + static_cast<int64_t>(p) * C * gh * gw;
    for (int gi = 0; gi < gh; ++gi) {
      const T vnorm = cy + sy * (T(2) * (gi + T(0.5)) / gh - T(1));
      const T fy = (vnorm + T(1)) * T(0.5) * H - T(0.5);
      const int y0 = static_cast<int>(std::floor(fy));
      const T ay = fy - y0;
      for (int gj = 0; gj < gw; ++gj) {
        const T unorm = cx + sx * (T(2) * (gj + T(0.5)) / gw - T(1));
        const T fx = (unorm + T(1)) * T(0.5) * W - T(0.5);
        const int x0 = static_cast<int>(std::floor(fx));
        const T ax = fx - x0;
        for (int c = 0; c < C; ++c) {
          const T* src = vi.ptr() + static_cast<int64_t>(c) * H * W;
          T dfy, dfx;
          dsts[static_cast<int64_t>(c) * gh * gw + gi * gw + gj] =
              detail::tap2d(src, H, W, y0, x0, ay, ax, dfy, dfx);
        }
      }
    }
  }
  bool needs = g.grad_enabled() && (g.rg(img) || g.rg(poses));
  if (!needs) return g.push(std::move(out), false, nullptr);
  Var r = g.push(std::move(out), true, nullptr);
  struct Cap {
    Var img, poses, self;
    int C, H, W, gh, gw, P;
  } cap{img, poses, r, C, H, W, gh, gw, P};
  // re-derive sampling coords in backward; cheaper than caching taps
  g.back_of(r) = [cap](Graph<T>& gg) {
    const Tensor<T>& go = gg.grad_ref(cap.self);
    const Tensor<T>& img_v = gg.val(cap.img);
    const Tensor<T>& pose_v = gg.val(cap.poses);
    const bool need_img = gg.rg(cap.img);
    const bool need_pose = gg.rg(cap.poses);
    Tensor<T>* gi_buf = need_img ? &gg.grad_buf(cap.img) : nullptr;
    Tensor<T>* gp_buf = need_pose ? &gg.grad_buf(cap.poses) : nullptr;
    for (int p = 0; p < cap.P; ++p) {
      const T sx = pose_v.at(p, 0), sy = pose_v.at(p, 1);
      const T cx = pose_v.at(p, 2), cy = pose_v.at(p, 3);
      T gsx = 0, gsy = 0, gcx = 0, gcy = 0;
      const T* gos = go.ptr() + static_cast<int64_t>(p) * cap.C * cap.gh * cap.gw;
      for (int gy = 0; gy < cap.gh; ++gy) {
        const T by = T(2) * (gy + T(0.5)) / cap.gh - T(1);
        const T fy = (cy + sy * by + T(1)) * T(0.5) * cap.H - T(0.5);
        const int y0 = static_cast<int>(std::floor(fy));
        const T ay = fy - y0;
        for (int gx = 0; gx < cap.gw; ++gx) {
          const T bx = T(2) * (gx + T(0.5)) / cap.gw - T(1);
          const T fx = (cx + sx * bx + T(1)) * T(0.5) * cap.W - T(0.5);
          const int x0 = static_cast<int>(std::floor(fx));
          const T ax = fx - x0;
          for (int c = 0; c < cap.C; ++c) {
            const T gov = gos[static_cast<int64_t>(c) * cap.gh * cap.gw + gy * cap.gw + gx];
            if (gov == T(0)) continue;
            const T* src = img_v.ptr() + static_cast<int64_t>(c) * cap.H * cap.W;
            T dfy, dfx;
            detail::tap2d(src, cap.H, cap.W, y0, x0, ay, ax, dfy, dfx);
            if (need_pose) {
              gcx += gov * dfx * T(0.5) * cap.W;
              gsx += gov * dfx * bx * T(0.5) * cap.W;
              gcy += gov * dfy * T(0.5) * cap.H;
              gsy += gov * dfy * by * T(0.5) * cap.H;
            }
            if (need_img) {
              T* dimg = gi_buf->ptr() + static_cast<int64_t>(c) * cap.H * cap.W;
              auto put = [&](int y, int x, T wgt) {
                if (y >= 0 && y < cap.H && x >= 0 && x < cap.W) dimg[y * cap.W + x] += gov * wgt;
              };
              put(y0, x0, (T(1) - ay) * (T(1) - ax));
              put(y0, x0 + 1, (T(1) - ay) * ax);
              put(y0 + 1, x0, ay * (T(1) - ax));
              put(y0 + 1, x0 + 1, ay * ax);
            }
          }
        }
      }
      if (need_pose) {
        gp_buf->at(p, 0) += gsx;
        gp_buf->at(p, 1) += gsy;
        gp_buf->at(p, 2) += gcx;
        gp_buf->at(p, 3) += gcy;
      }
    }
  };
  return r;
}

// Places P glimpses [P,C,gh,gw] onto blank HxW canvases -> [P,C,H,W].
// Inverse warp of stn_crop: zero outside the box; differentiable in both inputs.
template <typename T>
Var stn_place_batch(Graph<T>& g, Var glimpses, Var poses, int H, int W) {
  const Tensor<T>& vg = g.val(glimpses);
  const Tensor<T>& vp = g.val(poses);
  const int P = vg.shape[0], C = vg.shape[1], gh = vg.shape[2], gw = vg.shape[3];
  if (vp.shape[0] != P) throw std::invalid_argument("stn_place: pose count mismatch");
  detail::check_scales(vp, H, W, false);

  Tensor<T> out(Shape{P, C, H, W});
  for (int p = 0; p < P; ++p) {
    const T sx = vp.at(p, 0), sy = vp.at(p, 1), cx = vp.at(p, 2), cy = vp.at(p, 3);
    int ylo, yhi, xlo, xhi;
    detail::box_pixel_range(cy, sy, H, T(gh), ylo, yhi);
    detail::box_pixel_range(cx, sx, W, T(gw), xlo, xhi);
    const T* srcs = vg.ptr() + static_cast<int64_t>(p) * C * gh * gw;
    T* dsts = out.ptr() + static_cast<int64_t>(p) * C * H * W;
    for (int y = ylo; y <= yhi; ++y) {
      const T v = T(2) * (y + T(0.5)) / H - T(1);
      const T fgy = ((v - cy) / sy + T(1)) * T(0.5) * gh - T(0.5);
      if (fgy <= T(-1) || fgy >= T(gh)) continue;
      int y0;
      T ay, gy_gate;
      detail::clamp_coord(fgy, gh, y0, ay, gy_gate);
      for (int x = xlo; x <= xhi; ++x) {
        const T u = T(2) * (x + T(0.5)) / W - T(1);
        const T fgx = ((u - cx) / sx + T(1)) * T(0.5) * gw - T(0.5);
        if (fgx <= T(-1) || fgx >= T(gw)) continue;
        int x0;
        T ax, gx_gate;
        detail::clamp_coord(fgx, gw, x0, ax, gx_gate);
        const T w00 = (T(1) - ay) * (T(1) - ax), w01 = (T(1) - ay) * ax;
        const T w10 = ay * (T(1) - ax), w11 = ay * ax;
        const int64_t base = static_cast<int64_t>(y0) * gw + x0;
        for (int c = 0; c < C; ++c) {
          const T* src = srcs + static_cast<int64_t>(c) * gh * gw;
          dsts[static_cast<int64_t>(c) * H * W + y * W + x] =
              w00 * src[base] + w01 * src[base + 1] + w10 * src[base + gw] +
              w11 * src[base + gw + 1];
        }
      }
    }
  }
  bool needs = g.grad_enabled() && (g.rg(glimpses) || g.rg(poses));
  if (!needs) return g.push(std::move(out), false, nullptr);
  Var r = g.push(std::move(out), true, nullptr);
  struct Cap {
    Var gl, poses, self;
    int P, C, gh, gw, H, W;
  } cap{glimpses, poses, r, P, C, gh, gw, H, W};
  g.back_of(r) = [cap](Graph<T>& gg) {
    const Tensor<T>& go = gg.grad_ref(cap.self);
    const Tensor<T>& vg = gg.val(cap.gl);
    const Tensor<T>& vp = gg.val(cap.poses);
    const bool need_gl = gg.rg(cap.gl);
    const bool need_pose = gg.rg(cap.poses);
    Tensor<T>* ggl = need_gl ? &gg.grad_buf(cap.gl) : nullptr;
    Tensor<T>* gp = need_pose ? &gg.grad_buf(cap.poses) : nullptr;
    for (int p = 0; p < cap.P; ++p) {
      const T sx = vp.at(p, 0), sy = vp.at(p, 1), cx = vp.at(p, 2), cy = vp.at(p, 3);
      int ylo, yhi, xlo, xhi;
      detail::box_pixel_range(cy, sy, cap.H, T(cap.gh), ylo, yhi);
      detail::box_pixel_range(cx, sx, cap.W, T(cap.gw), xlo, xhi);
      T gsx = 0, gsy = 0, gcx = 0, gcy = 0;
      const T* srcs = vg.ptr() + static_cast<int64_t>(p) * cap.C * cap.gh * cap.gw;
      T* dgls = need_gl ? ggl->ptr() + static_cast<int64_t>(p) * cap.C * cap.gh * cap.gw : nullptr;
      const T* gos = go.ptr() + static_cast<int64_t>(p) * cap.C * cap.H * cap.W;
      for (int y = ylo; y <= yhi; ++y) {
        const T v = T(2) * (y + T(0.5)) / cap.H - T(1);
        const T fgy = ((v - cy) / sy + T(1)) * T(0.5) * cap.gh - T(0.5);
        if (fgy <= T(-1) || fgy >= T(cap.gh)) continue;
        int y0;
        T ay, gy_gate;
        detail::clamp_coord(fgy, cap.gh, y0, ay, gy_gate);
        for (int x = xlo; x <= xhi; ++x) {
          const T u = T(2) * (x + T(0.5)) / cap.W - T(1);
          const T fgx = ((u - cx) / sx + T(1)) * T(0.5) * cap.gw - T(0.5);
          if (fgx <= T(-1) || fgx >= T(cap.gw)) continue;
          int x0;
          T ax, gx_gate;
          detail::clamp_coord(fgx, cap.gw, x0, ax, gx_gate);
          const T w00 = (T(1) - ay) * (T(1) - ax), w01 = (T(1) - ay) * ax;
          const T w10 = ay * (T(1) - ax), w11 = ay * ax;
          const int64_t base = static_cast<int64_t>(y0) * cap.gw + x0;
          for (int c = 0; c < cap.C; ++c) {
            const T gov = gos[static_cast<int64_t>(c) * cap.H * cap.W + y * cap.W + x];
            if (gov == T(0)) continue;
            const T* src = srcs + static_cast<int64_t>(c) * cap.gh * cap.gw;
            if (need_pose) {
              T dfx = (T(1) - ay) * (src[base + 1] - src[base]) +
                      ay * (src[base + cap.gw + 1] - src[base + cap.gw]);
              T dfy = (T(1) - ax) * (src[base + cap.gw] - src[base]) +
                      ax * (src[base + cap.gw + 1] - src[base + 1]);
              dfy *= gy_gate;
              dfx *= gx_gate;
              const T half_gw = T(0.5) * cap.gw, half_gh = T(0.5) * cap.gh;
              gcx += gov * dfx * (-half_gw / sx);
              gsx += gov * dfx * (-(u - cx) / (sx * sx) * half_gw);
              gcy += gov * dfy * (-half_gh / sy);
              gsy += gov * dfy * (-(v - cy) / (sy * sy) * half_gh);
            }
            if (need_gl) {
              T* dgl = dgls + static_cast<int64_t>(c) * cap.gh * cap.gw;
              dgl[base] += gov * w00;
              dgl[base + 1] += gov * w01;
              dgl[base + cap.gw] += gov * w10;
              dgl[base + cap.gw + 1] += gov * w11;
            }
          }
        }
      }
      if (need_pose) {
        gp->at(p, 0) += gsx;
        gp->at(p, 1) += gsy;
        gp->at(p, 2) += gcx;
        gp->at(p, 3) += gcy;
      }
    }
  };
  return r;
}

// ---- plain-tensor convenience wrappers (no gradients) ----

// glimpse:[C,gh,gw] -> [C,H,W]
template <typename T>
Tensor<T> stn_place(const Tensor<T>& glimpse, const PoseParams& pose, int H, int W) {
  Graph<T> g(false);
  Var gl = g.constant(glimpse.reshaped(
      Shape{1, glimpse.shape[0], glimpse.shape[1], glimpse.shape[2]}));
  Var p = g.constant(poses_to_tensor<T>({pose}));
  Var out = stn_place_batch(g, gl, p, H, W);
  return g.val(out).reshaped(Shape{glimpse.shape[0], H, W});
}

// image:[C,H,W] -> [C,gh,gw]
template <typename T>
Tensor<T> stn_crop(const Tensor<T>& image, const PoseParams& pose, int gh, int gw) {
  Graph<T> g(false);
  Var im = g.constant(image);
  Var p = g.constant(poses_to_tensor<T>({pose}));
  Var out = stn_crop_batch(g, im, p, gh, gw, true);
  return g.val(out).reshaped(Shape{image.shape[0], gh, gw});
}

}  // namespace apex
