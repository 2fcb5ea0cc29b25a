#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "apex/config.hpp"
#include "apex/graph.hpp"
#include "apex/latents.hpp"
#include "apex/mask_compose.hpp"
#include "apex/nn.hpp"
#include "apex/rng.hpp"
#include "apex/stn.hpp"
#include "apex/tensor.hpp"

// The learned model: shared convolutional-recurrent encoder, propagation and
// discovery branches over object slots, background branch, decoders, and the
// per-step scene update. Slots are processed row-batched.

namespace apex {

struct ModelConfig {
  int image_height = 64;
  int image_width = 64;
  int feat_channels = 64;     // F
  int reduced_channels = 16;  // projection used for feature-space crops
  int glimpse = 16;           // decoded glimpse side h_g = w_g
  int feat_glimpse = 4;       // feature-space crop side
  int what_dim = 32;          // A
  int bg_dim = 64;            // B
  int grid = 8;               // discovery grid G
  int slot_cap = 16;
  double logit_bound = 8.0;  // c
  double sigma_fg = 0.1;
  double sigma_bg = 0.04;
  double filter_threshold = 0.1;
  double temperature = 0.5;
  bool image_space_stn = false;
  bool scalor_norm = false;
  bool inclusive_kl = true;

  double prior_where_scale = 0.25;
  double prior_where_std = 0.5;

  static ModelConfig from(const ApexConfig& c) {
    ModelConfig m;
    m.image_height = c.data_image_size;
    m.image_width = c.data_image_size;
    m.feat_channels = c.model_feat_channels;
    m.reduced_channels = c.model_reduced_channels;
    m.glimpse = c.model_glimpse;
    m.feat_glimpse = c.model_feat_glimpse;
    m.what_dim = c.model_what_dim;
    m.bg_dim = c.model_bg_dim;
    m.grid = c.model_grid;
    m.slot_cap = c.model_slot_cap;
    m.logit_bound = c.model_logit_bound;
    m.sigma_fg = c.model_sigma_fg;
    m.sigma_bg = c.model_sigma_bg;
    m.filter_threshold = c.model_filter_threshold;
    m.temperature = c.model_temperature;
    m.image_space_stn = c.ablation_image_space_stn;
    m.scalor_norm = c.ablation_scalor_norm;
    m.inclusive_kl = c.train_inclusive_kl;
    m.prior_where_scale = c.prior_where_scale;
    m.prior_where_std = c.prior_where_std;
    return m;
  }

  double min_scale() const { return 2.0 / std::min(image_height, image_width); }

  // raw-space value whose squash yields the prior box scale
  double where_prior_raw_scale() const {
    const double ms = min_scale();
    const double f = (prior_where_scale - ms) / (1.0 - ms);
    return std::log(f / (1.0 - f));
  }
};

// Per-step losses plus exported values for tracking, rendering, and metrics.
template <typename T>
struct StepOutputs {
  Var loglik, kl_what, kl_where, kl_pres, kl_bg, entropy;  // scalar graph nodes
  std::vector<int64_t> slot_ids;                           // before filtering
  std::vector<PoseParams> slot_poses;
  std::vector<double> slot_pres;
  std::vector<double> slot_pres_prob;
  Tensor<T> fg_masks;  // [K,H,W]
  Tensor<T> bg_mask;   // [H,W]
  Tensor<T> recon;     // [3,H,W]
  Tensor<T> z_what_means;  // [K, A]
  int propagated_count = 0;
  int discovered_count = 0;
};

// Slot state carried between frames. All Vars live in one graph during
// training (backprop through time); reanchor() moves values into a fresh
// graph when evaluating long sequences.
template <typename T>
struct SceneState {
  std::vector<int64_t> ids;
  Var z_pres;       // [P]
  Var z_where_raw;  // [P,4]
  Var poses;        // [P,4]
  Var z_what;       // [P,A]
  Var h_where;      // [P,32]
  Var h_what;       // [P,64]
  Var h_pres;       // [P,16]
  Var enc_mem;      // [R, H/4, W/4]
  Var z_bg;         // [1, B]
  int time_index = 0;
  int64_t next_id = 1;

  int slot_count() const { return static_cast<int>(ids.size()); }

  void reanchor(Graph<T>& from, Graph<T>& to) {
    auto move = [&](Var& v) {
      if (v.valid()) v = to.constant(from.val(v));
    };
    move(z_pres);
    move(z_where_raw);
    move(poses);
    move(z_what);
    move(h_where);
    move(h_what);
    move(h_pres);
    move(enc_mem);
    move(z_bg);
  }
};

struct StepFlags {
  bool train = true;           // noise-driven sampling; otherwise posterior means
  bool hard_presence = false;  // straight-through hard presence samples
  double discovery_prior = 0.05;
  bool image_space_stn = false;       // runtime switch (set from config by the caller)
  bool gaussian_likelihood = false;   // ablation: single Gaussian on the blended mean
};

template <typename T>
class ApexNet {
 public:
  ModelConfig cfg;

  ApexNet(const ModelConfig& mc, uint64_t seed) : cfg(mc) {
    RngStream rng(mix_seed(seed, 0xA9E27ull));
    const int F = cfg.feat_channels, R = cfg.reduced_channels;
    const int A = cfg.what_dim, B = cfg.bg_dim;
    const int fg2 = R * cfg.feat_glimpse * cfg.feat_glimpse;
    const int ig2 = 3 * cfg.glimpse * cfg.glimpse;

    enc_conv1_ = Conv2d<T>::create(params_, "enc.conv1", 3, 16, 3, 2, 1, rng);
    enc_conv2_ = Conv2d<T>::create(params_, "enc.conv2", 16, 32, 3, 2, 1, rng);
    enc_conv3_ = Conv2d<T>::create(params_, "enc.conv3", 32, 48, 3, 2, 1, rng);
    enc_fuse_ = Conv2d<T>::create(params_, "enc.fuse", 80, 48, 1, 1, 0, rng);
    enc_mem_gate_ = Conv2d<T>::create(params_, "enc.mem_gate", 48 + 16, 16, 1, 1, 0, rng);
    enc_mem_cand_ = Conv2d<T>::create(params_, "enc.mem_cand", 48 + 16, 16, 3, 1, 1, rng);
    enc_head_ = Conv2d<T>::create(params_, "enc.head", 48 + 16, F, 1, 1, 0, rng);
    enc_reduce_ = Conv2d<T>::create(params_, "enc.reduce", F, R, 1, 1, 0, rng);

    disc_pool_ = Conv2d<T>::create(params_, "disc.pool", F, F, 2, 2, 0, rng);
    disc_where_ = Conv2d<T>::create(params_, "disc.where", F, 8, 1, 1, 0, rng);
    disc_proposal_ = Linear<T>::create(params_, "disc.proposal", F + A + 4, 1, rng);

    glimpse_fc_ = Linear<T>::create(params_, "glimpse.fc", fg2, 96, rng);
    img_glimpse_fc_ = Linear<T>::create(params_, "img_glimpse.fc", ig2, 96, rng);
    what_gru_ = GruCell<T>::create(params_, "what.gru", 96 + A, 64, rng);
    what_head_ = Linear<T>::create(params_, "what.head", 64, 2 * A, rng);

    prop_fc_ = Linear<T>::create(params_, "prop.fc", fg2, 96, rng);
    img_prop_fc_ = Linear<T>::create(params_, "img_prop.fc", ig2, 96, rng);
    prop_where_gru_ = GruCell<T>::create(params_, "prop.where_gru", 96 + A + 4, 32, rng);
    prop_where_head_ = Linear<T>::create(params_, "prop.where_head", 32, 8, rng);
    prop_pres_gru_ = GruCell<T>::create(params_, "prop.pres_gru", 96 + A + 1, 16, rng);
    prop_pres_head_ = Linear<T>::create(params_, "prop.pres_head", 16, 1, rng);

    dec_fc_ = Linear<T>::create(params_, "dec.fc", A, 16 * 4 * 4, rng);
    dec_conv1_ = Conv2d<T>::create(params_, "dec.conv1", 16, 12, 3, 1, 1, rng);
    dec_conv2_ = Conv2d<T>::create(params_, "dec.conv2", 12, 8, 3, 1, 1, rng);
    dec_app_ = Conv2d<T>::create(params_, "dec.app", 8, 3, 1, 1, 0, rng);
    dec_mask_ = Conv2d<T>::create(params_, "dec.mask", 8, 1, 1, 1, 0, rng);

    bg_conv1_ = Conv2d<T>::create(params_, "bg.conv1", 4, 8, 3, 2, 1, rng);
    bg_conv2_ = Conv2d<T>::create(params_, "bg.conv2", 8, 16, 3, 2, 1, rng);
    bg_conv3_ = Conv2d<T>::create(params_, "bg.conv3", 16, 32, 3, 2, 1, rng);
    bg_conv4_ = Conv2d<T>::create(params_, "bg.conv4", 32, 32, 3, 2, 1, rng);
    bg_fc_ = Linear<T>::create(params_, "bg.fc",
                               32 * (cfg.image_height / 16) * (cfg.image_width / 16), 2 * B, rng);
    bgdec_fc_ = Linear<T>::create(params_, "bgdec.fc", B, 24 * 4 * 4, rng);
    bgdec_conv1_ = Conv2d<T>::create(params_, "bgdec.conv1", 24, 16, 3, 1, 1, rng);
    bgdec_conv2_ = Conv2d<T>::create(params_, "bgdec.conv2", 16, 12, 3, 1, 1, rng);
    bgdec_head_ = Conv2d<T>::create(params_, "bgdec.head", 12, 3, 1, 1, 0, rng);
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  PriorSet priors(const ApexConfig& c) const {
    PriorSet p;
    p.what_prior = DiagonalGaussian::standard(cfg.what_dim);
    p.bg_prior = DiagonalGaussian::standard(cfg.bg_dim);
    const double rs = cfg.where_prior_raw_scale();
    const double ls = std::log(cfg.prior_where_std);
    p.where_prior = DiagonalGaussian({rs, rs, 0.0, 0.0}, {ls, ls, ls, ls});
    p.pres_discovery_start = c.prior_pres_start;
    p.pres_discovery_end = c.prior_pres_end;
    p.pres_propagation_smooth = c.prior_pres_smooth;
    p.pres_propagation_target = c.prior_pres_target;
    return p;
  }

  SceneState<T> initial_state(Graph<T>& g) const {
    SceneState<T> s;
    s.enc_mem = g.constant(Tensor<T>::zeros(
        Shape{cfg.reduced_channels, cfg.image_height / 4, cfg.image_width / 4}));
    return s;
  }

  // ---- encoder ----

  struct Encoded {
    Var e;    // [F, H/4, W/4]
    Var r;    // [R, H/4, W/4]
    Var mem;  // updated recurrent state
  };

  Encoded encode_sequence_step(ParamCtx<T>& ctx, Var frame, Var mem) const {
    Graph<T>& g = ctx.graph();
    const int H = cfg.image_height, W = cfg.image_width;
    Var x = g.reshape(frame, Shape{1, 3, H, W});
    Var s1 = g.elu(enc_conv1_(ctx, x));                       // [1,16,H/2,W/2]
    Var s2 = g.elu(enc_conv2_(ctx, s1));                      // [1,32,H/4,W/4]
    Var s3 = g.elu(enc_conv3_(ctx, s2));                      // [1,48,H/8,W/8]
    Var up = g.resize_bilinear(s3, H / 4, W / 4);             // [1,48,H/4,W/4]
    Var fused = g.elu(enc_fuse_(ctx, concat_ch(g, {s2, up})));  // [1,48,...]
    Var memb = g.reshape(mem, Shape{1, cfg.reduced_channels, H / 4, W / 4});
    Var joint = concat_ch(g, {fused, memb});
    Var gate = g.sigmoid_(enc_mem_gate_(ctx, joint));
    Var cand = g.tanh_(enc_mem_cand_(ctx, joint));
    Var mem2 = g.add(g.mul(g.one_minus(gate), memb), g.mul(gate, cand));
    Var joint2 = concat_ch(g, {fused, mem2});
    Var e = g.elu(enc_head_(ctx, joint2));
    Var r = g.elu(enc_reduce_(ctx, e));
    Encoded out;
    out.e = g.reshape(e, Shape{cfg.feat_channels, H / 4, W / 4});
    out.r = g.reshape(r, Shape{cfg.reduced_channels, H / 4, W / 4});
    out.mem = g.reshape(mem2, Shape{cfg.reduced_channels, H / 4, W / 4});
    return out;
  }

  // ---- decoders ----

  struct Decoded {
    Var appearance;  // [N,3,gs,gs] in [0,1]
    Var alpha;       // [N,gs,gs] clamped logits
    Var alpha_unit;  // [N,gs,gs] in [0,1] (only used by the scalor-norm ablation)
  };

  Decoded decode_object(ParamCtx<T>& ctx, Var z_what) const {
    Graph<T>& g = ctx.graph();
    const int N = g.shape(z_what)[0];
    const int gs = cfg.glimpse;
    Var h = g.elu(dec_fc_(ctx, z_what));
    h = g.reshape(h, Shape{N, 16, 4, 4});
    h = g.elu(dec_conv1_(ctx, g.resize_bilinear(h, 8, 8)));
    h = g.elu(dec_conv2_(ctx, g.resize_bilinear(h, gs, gs)));
    Decoded d;
    d.appearance = g.sigmoid_(dec_app_(ctx, h));
    Var raw = g.reshape(dec_mask_(ctx, h), Shape{N, gs, gs});
    d.alpha = clamp_logits(g, raw, T(cfg.logit_bound));
    d.alpha_unit = g.sigmoid_(raw);
    return d;
  }

  Var decode_background(ParamCtx<T>& ctx, Var z_bg) const {
    Graph<T>& g = ctx.graph();
    Var h = g.elu(bgdec_fc_(ctx, z_bg));
    h = g.reshape(h, Shape{1, 24, 4, 4});
    h = g.elu(bgdec_conv1_(ctx, g.resize_bilinear(h, 8, 8)));
    h = g.elu(bgdec_conv2_(ctx, g.resize_bilinear(h, 16, 16)));
    Var img = g.sigmoid_(bgdec_head_(ctx, h));
    img = g.resize_bilinear(img, cfg.image_height, cfg.image_width);
    return g.reshape(img, Shape{3, cfg.image_height, cfg.image_width});
  }

  struct GaussPosterior {
    Var mean, log_std;  // [N,D]
  };

  GaussPosterior encode_background(ParamCtx<T>& ctx, Var frame, Var bg_mask) const {
    Graph<T>& g = ctx.graph();
    const int H = cfg.image_height, W = cfg.image_width;
    Var x = g.concat0({frame, g.reshape(bg_mask, Shape{1, H, W})});
    x = g.reshape(x, Shape{1, 4, H, W});
    x = g.elu(bg_conv1_(ctx, x));
    x = g.elu(bg_conv2_(ctx, x));
    x = g.elu(bg_conv3_(ctx, x));
    x = g.elu(bg_conv4_(ctx, x));
    x = g.reshape(x, Shape{1, 32 * (H / 16) * (W / 16)});
    Var out = bg_fc_(ctx, x);
    GaussPosterior p;
    p.mean = g.slice_cols(out, 0, cfg.bg_dim);
    p.log_std = g.slice_cols(out, cfg.bg_dim, cfg.bg_dim);
    return p;
  }

  // ---- pose squashes ----

  // raw [N,4] -> (scale in (min_s,1], centre) for propagated slots
  Var poses_from_raw_absolute(Graph<T>& g, Var raw) const {
    const T min_s = T(cfg.min_scale());
    Var sx = squash_scale(g, g.slice_cols(raw, 0, 1), min_s);
    Var sy = squash_scale(g, g.slice_cols(raw, 1, 1), min_s);
    Var cx = g.tanh_(g.slice_cols(raw, 2, 1));
    Var cy = g.tanh_(g.slice_cols(raw, 3, 1));
    return g.concat_cols({sx, sy, cx, cy});
  }

  // discovery: centres are bounded offsets from the grid anchors
  Var poses_from_raw_anchored(Graph<T>& g, Var raw, const Tensor<T>& ax,
                              const Tensor<T>& ay) const {
    const T min_s = T(cfg.min_scale());
    const T off = T(1.5 / cfg.grid);
    Var sx = squash_scale(g, g.slice_cols(raw, 0, 1), min_s);
    Var sy = squash_scale(g, g.slice_cols(raw, 1, 1), min_s);
    const int N = g.shape(raw)[0];
    Var cx = g.add(g.constant(ax.reshaped(Shape{N, 1})),
                   g.mul_scalar(g.tanh_(g.slice_cols(raw, 2, 1)), off));
    Var cy = g.add(g.constant(ay.reshaped(Shape{N, 1})),
                   g.mul_scalar(g.tanh_(g.slice_cols(raw, 3, 1)), off));
    return g.concat_cols({sx, sy, cx, cy});
  }

  // ---- step ----

  StepOutputs<T> step(ParamCtx<T>& ctx, SceneState<T>& state, const Tensor<T>& frame_chw,
                      const StepFlags& flags, RngStream& rng,
                      std::vector<std::string>* diag = nullptr) const {
    Graph<T>& g = ctx.graph();
    const int H = cfg.image_height, W = cfg.image_width;
    const int A = cfg.what_dim;
    const int64_t M = static_cast<int64_t>(H) * W;
    const T c = T(cfg.logit_bound);
    if (!frame_chw.all_finite()) throw std::invalid_argument("step: non-finite frame");

    Var frame = g.constant(frame_chw);
    Encoded enc = encode_sequence_step(ctx, frame, state.enc_mem);
    // crop source: backbone features, or raw pixels under the image-space ablation
    const bool img_stn = flags.image_space_stn;
    Var crop_src = img_stn ? frame : enc.r;
    const int crop_side = img_stn ? cfg.glimpse : cfg.feat_glimpse;
    const int crop_ch = img_stn ? 3 : cfg.reduced_channels;
    const Linear<T>& glimpse_fc = img_stn ? img_glimpse_fc_ : glimpse_fc_;
    const Linear<T>& prop_fc = img_stn ? img_prop_fc_ : prop_fc_;

    const int P = state.slot_count();
    StepOutputs<T> out;
    out.propagated_count = P;

    // --- propagation ---
    Var prop_poses, prop_raw, prop_what, prop_pres, prop_q;
    Var h_where2, h_what2, h_pres2;
    Var prop_what_mean, prop_what_ls, prop_where_mean, prop_where_ls;
    Decoded prop_dec;
    if (P > 0) {
      Var sq = g.max_(g.slice_cols(state.poses, 0, 1), g.slice_cols(state.poses, 1, 1));
      Var sq_poses = g.concat_cols({sq, sq, g.slice_cols(state.poses, 2, 1),
                                    g.slice_cols(state.poses, 3, 1)});
      Var fp = stn_crop_batch(g, crop_src, sq_poses, crop_side, crop_side, false,
                              0.5 * cfg.min_scale());
      fp = g.reshape(fp, Shape{P, crop_ch * crop_side * crop_side});
      Var c_p = g.elu(prop_fc(ctx, fp));

      Var where_in = g.concat_cols({c_p, state.z_what, state.z_where_raw});
      h_where2 = prop_where_gru_(ctx, where_in, state.h_where);
      Var wh = prop_where_head_(ctx, h_where2);
      prop_where_mean = g.slice_cols(wh, 0, 4);
      prop_where_ls = g.slice_cols(wh, 4, 4);
      Var wn = g.constant(flags.train ? normal_noise<T>(Shape{P, 4}, rng)
                                      : Tensor<T>::zeros(Shape{P, 4}));
      prop_raw = gauss_sample(g, prop_where_mean, prop_where_ls, wn);
      prop_poses = poses_from_raw_absolute(g, prop_raw);

      Var gl = stn_crop_batch(g, crop_src, prop_poses, crop_side, crop_side, false,
                              0.5 * cfg.min_scale());
      gl = g.reshape(gl, Shape{P, crop_ch * crop_side * crop_side});
      Var c_g = g.elu(glimpse_fc(ctx, gl));
      h_what2 = what_gru_(ctx, g.concat_cols({c_g, state.z_what}), state.h_what);
      Var what_out = what_head_(ctx, h_what2);
      prop_what_mean = g.slice_cols(what_out, 0, A);
      prop_what_ls = g.slice_cols(what_out, A, A);
      Var qn = g.constant(flags.train ? normal_noise<T>(Shape{P, A}, rng)
                                      : Tensor<T>::zeros(Shape{P, A}));
      prop_what = gauss_sample(g, prop_what_mean, prop_what_ls, qn);

      Var pres_in = g.concat_cols({c_p, prop_what, g.reshape(state.z_pres, Shape{P, 1})});
      h_pres2 = prop_pres_gru_(ctx, pres_in, state.h_pres);
      Var pres_logit = g.reshape(prop_pres_head_(ctx, h_pres2), Shape{P});
      prop_q = g.sigmoid_(pres_logit);
      Tensor<T> u = flags.train ? uniform_noise<T>(Shape{P}, rng)
                                : Tensor<T>::full(Shape{P}, T(0.5));
      prop_pres =
          relaxed_bernoulli_from_prob(g, prop_q, u, T(cfg.temperature), flags.hard_presence);

      prop_dec = decode_object(ctx, prop_what);
    }

    // One placement per branch carries appearance, softplus(alpha) occupancy,
    // and raw alpha; per-slot presence scaling commutes with the (linear)
    // placement, so Eq-8 style terms can be scaled after placing.
    const int gs = cfg.glimpse;
    Var occ_p_rows, alpha_img_p, means_p;
    Var scope;
    if (P > 0) {
      Var stack_p = g.concat_channels(
          {prop_dec.appearance, g.reshape(g.softplus_(prop_dec.alpha), Shape{P, 1, gs, gs}),
           g.reshape(prop_dec.alpha, Shape{P, 1, gs, gs})});
      Var placed_p = stn_place_batch(g, stack_p, prop_poses, H, W);  // [P,5,H,W]
      means_p = g.slice_channels(placed_p, 0, 3);
      occ_p_rows = g.reshape(g.slice_channels(placed_p, 3, 1), Shape{P, static_cast<int>(M)});
      alpha_img_p = g.reshape(g.slice_channels(placed_p, 4, 1), Shape{P, static_cast<int>(M)});
      Var m_p = g.tanh_(
          g.reshape(g.sum_axis0(g.mul_rowscale(occ_p_rows, prop_pres)), Shape{H, W}));
      scope = g.one_minus(m_p);
    } else {
      scope = g.constant(Tensor<T>::full(Shape{H, W}, T(1)));
    }

    // --- discovery ---
    const int G = cfg.grid;
    const int D = G * G;
    Var pooled = disc_pool_(ctx, g.reshape(enc.e, Shape{1, cfg.feat_channels, H / 4, W / 4}));
    pooled = g.elu(pooled);
    if (g.shape(pooled)[2] != G || g.shape(pooled)[3] != G)
      pooled = g.resize_bilinear(pooled, G, G);  // [1,F,G,G]
    Var c_d = g.transpose2d(g.reshape(pooled, Shape{cfg.feat_channels, D}));  // [D,F]
    Var wh_map = disc_where_(ctx, g.reshape(pooled, Shape{1, cfg.feat_channels, G, G}));
    Var wh_rows = g.transpose2d(g.reshape(wh_map, Shape{8, D}));  // [D,8]
    Var disc_where_mean = g.slice_cols(wh_rows, 0, 4);
    Var disc_where_ls = g.slice_cols(wh_rows, 4, 4);
    Var dwn = g.constant(flags.train ? normal_noise<T>(Shape{D, 4}, rng)
                                     : Tensor<T>::zeros(Shape{D, 4}));
    Var disc_raw = gauss_sample(g, disc_where_mean, disc_where_ls, dwn);
    Tensor<T> ax(Shape{D}), ay(Shape{D});
    for (int i = 0; i < G; ++i)
      for (int j = 0; j < G; ++j) {
        ax[i * G + j] = T(2.0 * (j + 0.5) / G - 1.0);
        ay[i * G + j] = T(2.0 * (i + 0.5) / G - 1.0);
      }
    Var disc_poses = poses_from_raw_anchored(g, disc_raw, ax, ay);

    Var dgl = stn_crop_batch(g, crop_src, disc_poses, crop_side, crop_side, false,
                             0.5 * cfg.min_scale());
    dgl = g.reshape(dgl, Shape{D, crop_ch * crop_side * crop_side});
    Var d_cg = g.elu(glimpse_fc(ctx, dgl));
    Var zeros_what = g.constant(Tensor<T>::zeros(Shape{D, A}));
    Var h0 = g.constant(Tensor<T>::zeros(Shape{D, 64}));
    Var d_h = what_gru_(ctx, g.concat_cols({d_cg, zeros_what}), h0);
    Var d_out = what_head_(ctx, d_h);
    Var disc_what_mean = g.slice_cols(d_out, 0, A);
    Var disc_what_ls = g.slice_cols(d_out, A, A);
    Var dqn = g.constant(flags.train ? normal_noise<T>(Shape{D, A}, rng)
                                     : Tensor<T>::zeros(Shape{D, A}));
    Var disc_what = gauss_sample(g, disc_what_mean, disc_what_ls, dqn);

    Decoded disc_dec = decode_object(ctx, disc_what);

    Var stack_d = g.concat_channels(
        {disc_dec.appearance, g.reshape(g.softplus_(disc_dec.alpha), Shape{D, 1, gs, gs}),
         g.reshape(disc_dec.alpha, Shape{D, 1, gs, gs}),
         g.reshape(g.tanh_(g.softplus_(disc_dec.alpha)), Shape{D, 1, gs, gs})});
    Var placed_d = stn_place_batch(g, stack_d, disc_poses, H, W);  // [D,6,H,W]
    Var means_d = g.slice_channels(placed_d, 0, 3);
    Var occ_d_rows = g.reshape(g.slice_channels(placed_d, 3, 1), Shape{D, static_cast<int>(M)});
    Var alpha_img_d = g.reshape(g.slice_channels(placed_d, 4, 1), Shape{D, static_cast<int>(M)});
    Var w_ctx_rows = g.reshape(g.slice_channels(placed_d, 5, 1), Shape{D, static_cast<int>(M)});

    // q(z_pres) = p_proposal * p_context
    Var prop_in = g.concat_cols({c_d, disc_what, disc_raw});
    Var p_proposal = g.sigmoid_(g.reshape(disc_proposal_(ctx, prop_in), Shape{D}));
    Var p_ctx_num =
        g.row_sum(g.mul_bcast0(w_ctx_rows, g.reshape(scope, Shape{static_cast<int>(M)})));
    // a box drifting fully outside the image has an empty footprint; guard the
    // denominator so such proposals get zero context instead of NaN
    Var p_ctx = g.div(p_ctx_num, g.add_scalar(g.row_sum(w_ctx_rows), T(1e-8)));
    Var disc_q = g.mul(p_proposal, p_ctx);
    Tensor<T> du = flags.train ? uniform_noise<T>(Shape{D}, rng)
                               : Tensor<T>::full(Shape{D}, T(0.5));
    Var disc_pres =
        relaxed_bernoulli_from_prob(g, disc_q, du, T(cfg.temperature), flags.hard_presence);

    // --- assemble all slots (propagated first) ---
    Var all_alpha_unit =
        P > 0 ? g.concat0({prop_dec.alpha_unit, disc_dec.alpha_unit}) : disc_dec.alpha_unit;
    Var all_poses = P > 0 ? g.concat0({prop_poses, disc_poses}) : disc_poses;
    Var all_pres = P > 0 ? g.concat0({prop_pres, disc_pres}) : disc_pres;
    Var all_what = P > 0 ? g.concat0({prop_what, disc_what}) : disc_what;
    Var all_raw = P > 0 ? g.concat0({prop_raw, disc_raw}) : disc_raw;
    Var all_hwhat = P > 0 ? g.concat0({h_what2, d_h}) : d_h;
    Var occ_all = P > 0 ? g.concat0({occ_p_rows, occ_d_rows}) : occ_d_rows;
    Var alpha_img_all = P > 0 ? g.concat0({alpha_img_p, alpha_img_d}) : alpha_img_d;
    Var fg_means = P > 0 ? g.concat0({means_p, means_d}) : means_d;  // [K,3,H,W]
    const int K = P + D;

    // --- mask composition (Eqs. 8-12 on the placed channels) ---
    MaskStackVars ms;
    if (cfg.scalor_norm) {
      Var unit = g.mul_rowscale(all_alpha_unit, all_pres);
      Var placed = stn_place_batch(
          g, g.reshape(unit, Shape{K, 1, cfg.glimpse, cfg.glimpse}), all_poses, H, W);
      Var flat = g.reshape(placed, Shape{K, static_cast<int>(M)});
      ms.fg_masks = g.reshape(scalor_style_normalize(g, flat), Shape{K, H, W});
      ms.fg_total = g.reshape(g.sum_axis0(g.reshape(ms.fg_masks, Shape{K, static_cast<int>(M)})),
                              Shape{H, W});
      ms.bg_mask = g.one_minus(ms.fg_total);
    } else {
      Var m_fg_flat = g.tanh_(g.sum_axis0(g.mul_rowscale(occ_all, all_pres)));  // [M]
      Var alpha_hat = g.add_rowbias(alpha_img_all, g.mul_scalar(all_pres, T(2) * c));
      Var m_hat = g.softmax_axis0(alpha_hat);
      ms.fg_total = g.reshape(m_fg_flat, Shape{H, W});
      ms.fg_masks = g.reshape(g.mul_bcast0(m_hat, m_fg_flat), Shape{K, H, W});
      ms.bg_mask = g.one_minus(ms.fg_total);
    }

    // --- background (inferred after the foreground) ---
    GaussPosterior bgq = encode_background(ctx, frame, ms.bg_mask);
    Var bn = g.constant(flags.train ? normal_noise<T>(Shape{1, cfg.bg_dim}, rng)
                                    : Tensor<T>::zeros(Shape{1, cfg.bg_dim}));
    Var z_bg = gauss_sample(g, bgq.mean, bgq.log_std, bn);
    Var bg_mean = decode_background(ctx, z_bg);

    // --- likelihood ---
    if (flags.gaussian_likelihood) {
      // ablation: single Gaussian around the mask-blended mean image
      Var masks_all = g.concat0({g.reshape(ms.fg_masks, Shape{K, static_cast<int>(M)}),
                                 g.reshape(ms.bg_mask, Shape{1, static_cast<int>(M)})});
      Var means_all = g.concat0({g.reshape(fg_means, Shape{K, 3, static_cast<int>(M)}),
                                 g.reshape(bg_mean, Shape{1, 3, static_cast<int>(M)})});
      Var recon = g.sum_axis0(g.mul_bcast_mid(means_all, masks_all));  // [3,M]
      Var diff = g.sub(g.constant(frame_chw.reshaped(Shape{3, static_cast<int>(M)})), recon);
      const double s2 = cfg.sigma_fg * cfg.sigma_fg;
      const double norm = -3.0 * M * (0.5 * std::log(2.0 * M_PI) + std::log(cfg.sigma_fg));
      out.loglik = g.add_scalar(g.mul_scalar(g.sum_all(g.mul(diff, diff)), T(-0.5 / s2)), T(norm));
    } else {
      out.loglik = mixture_log_likelihood(g, ms, fg_means, bg_mean, frame_chw, T(cfg.sigma_fg),
                                          T(cfg.sigma_bg));
    }
    out.entropy = mask_entropy_loss(g, ms);

    // --- KL terms ---
    const double prior_raw = cfg.where_prior_raw_scale();
    const double prior_ls = std::log(cfg.prior_where_std);
    auto tile_where_prior = [&](int n) {
      Tensor<T> pm(Shape{n, 4}), pl(Shape{n, 4});
      for (int i = 0; i < n; ++i)
        for (int d = 0; d < 4; ++d) {
          pm.at(i, d) = d < 2 ? T(prior_raw) : T(0);
          pl.at(i, d) = T(prior_ls);
        }
      return std::make_pair(pm, pl);
    };
    auto kl_gauss = [&](Var qm, Var ql, const Tensor<T>& pm, const Tensor<T>& pl) {
      return cfg.inclusive_kl ? gauss_kl_inclusive_rows(g, qm, ql, pm, pl)
                              : gauss_kl_exclusive_rows(g, qm, ql, pm, pl);
    };

    Var kl_what_rows, kl_where_rows, kl_pres_total;
    {
      auto [dpm, dpl] = tile_where_prior(D);
      Var kw_d = kl_gauss(disc_where_mean, disc_where_ls, dpm, dpl);
      Var ka_d = kl_gauss(disc_what_mean, disc_what_ls, Tensor<T>::zeros(Shape{D, A}),
                          Tensor<T>::zeros(Shape{D, A}));
      Var kp_d = bernoulli_kl_rows(
          g, disc_q, g.constant(Tensor<T>::full(Shape{D}, T(flags.discovery_prior))));
      if (P > 0) {
        auto [ppm, ppl] = tile_where_prior(P);
        Var kw_p = kl_gauss(prop_where_mean, prop_where_ls, ppm, ppl);
        Var ka_p = kl_gauss(prop_what_mean, prop_what_ls, Tensor<T>::zeros(Shape{P, A}),
                            Tensor<T>::zeros(Shape{P, A}));
        // propagated presence prior smooths the previous value towards persistence
        Var prior_p = g.clamp(g.add_scalar(g.mul_scalar(state.z_pres, T(priors_smooth_)),
                                           T((1.0 - priors_smooth_) * priors_target_)),
                              T(kProbClamp), T(1.0 - kProbClamp));
        Var kp_p = bernoulli_kl_rows(g, prop_q, prior_p);
        kl_where_rows = g.concat0({kw_p, kw_d});
        kl_what_rows = g.concat0({ka_p, ka_d});
        kl_pres_total = g.add(g.sum_all(kp_p), g.sum_all(kp_d));
      } else {
        kl_where_rows = kw_d;
        kl_what_rows = ka_d;
        kl_pres_total = g.sum_all(kp_d);
      }
    }
    // what/where terms enter with the z_pres exponent (relaxed mask)
    out.kl_where = g.sum_all(g.mul(kl_where_rows, all_pres));
    out.kl_what = g.sum_all(g.mul(kl_what_rows, all_pres));
    out.kl_pres = kl_pres_total;
    out.kl_bg = g.sum_all(gauss_kl_exclusive_rows(g, bgq.mean, bgq.log_std,
                                                  Tensor<T>::zeros(Shape{1, cfg.bg_dim}),
                                                  Tensor<T>::zeros(Shape{1, cfg.bg_dim})));

    // --- exports ---
    out.discovered_count = D;
    out.fg_masks = g.val(ms.fg_masks);
    out.bg_mask = g.val(ms.bg_mask);
    out.z_what_means = P > 0 ? concat_values(g.val(prop_what_mean), g.val(disc_what_mean))
                             : g.val(disc_what_mean);
    const Tensor<T>& pose_v = g.val(all_poses);
    const Tensor<T>& pres_v = g.val(all_pres);
    Tensor<T> q_v = P > 0 ? concat_values(g.val(prop_q), g.val(disc_q)) : g.val(disc_q);
    std::vector<int64_t> ids;
    ids.reserve(K);
    for (int i = 0; i < P; ++i) ids.push_back(state.ids[i]);
    int64_t next_id = state.next_id;
    for (int d = 0; d < D; ++d) ids.push_back(next_id++);
    out.slot_ids = ids;
    for (int k = 0; k < K; ++k) {
      out.slot_poses.push_back(PoseParams{pose_v.at(k, 0), pose_v.at(k, 1), pose_v.at(k, 2),
                                          pose_v.at(k, 3)});
      out.slot_pres.push_back(static_cast<double>(pres_v[k]));
      out.slot_pres_prob.push_back(static_cast<double>(q_v[k]));
    }
    out.recon = reconstruction(g.val(ms.fg_masks), g.val(ms.bg_mask), g.val(fg_means),
                               g.val(bg_mean));

    // --- filter + cap, then persist the new state ---
    std::vector<int> keep;
    for (int k = 0; k < K; ++k)
      if (pres_v[k] >= T(cfg.filter_threshold)) keep.push_back(k);
    if (static_cast<int>(keep.size()) > cfg.slot_cap) {
      // drop lowest-presence discoveries first
      std::vector<int> disc_kept;
      for (int k : keep)
        if (k >= P) disc_kept.push_back(k);
      std::sort(disc_kept.begin(), disc_kept.end(),
                [&](int a, int b) { return pres_v[a] < pres_v[b]; });
      size_t drop = keep.size() - cfg.slot_cap;
      std::vector<char> dropped(K, 0);
      for (size_t i = 0; i < drop && i < disc_kept.size(); ++i) {
        dropped[disc_kept[i]] = 1;
        if (diag)
          diag->push_back("slot cap: dropped discovery id " + std::to_string(ids[disc_kept[i]]) +
                          " pres " + std::to_string(static_cast<double>(pres_v[disc_kept[i]])));
      }
      std::vector<int> kept2;
      for (int k : keep)
        if (!dropped[k]) kept2.push_back(k);
      keep = kept2;
    }

    SceneState<T> ns;
    ns.enc_mem = enc.mem;
    ns.z_bg = z_bg;
    ns.time_index = state.time_index + 1;
    ns.next_id = next_id;
    if (!keep.empty()) {
      Var all_hwhere =
          P > 0 ? g.concat0({h_where2, g.constant(Tensor<T>::zeros(Shape{D, 32}))})
                : g.constant(Tensor<T>::zeros(Shape{D, 32}));
      Var all_hpres = P > 0 ? g.concat0({h_pres2, g.constant(Tensor<T>::zeros(Shape{D, 16}))})
                            : g.constant(Tensor<T>::zeros(Shape{D, 16}));
      ns.z_pres = g.gather_rows(all_pres, keep);
      ns.z_where_raw = g.gather_rows(all_raw, keep);
      ns.poses = g.gather_rows(all_poses, keep);
      ns.z_what = g.gather_rows(all_what, keep);
      ns.h_where = g.gather_rows(all_hwhere, keep);
      ns.h_what = g.gather_rows(all_hwhat, keep);
      ns.h_pres = g.gather_rows(all_hpres, keep);
      for (int k : keep) ns.ids.push_back(ids[k]);
    }
    state = std::move(ns);
    return out;
  }

  // Eq-17 context gate: fraction of each proposal's mask weight that lies in
  // the unexplained region. The weight tanh(softplus(alpha)) is formed in
  // glimpse space and placed with zero padding, so pixels outside a
  // proposal's box carry no weight.
  static Var p_context(Graph<T>& g, Var alphas, Var poses, Var scope) {
    const Shape as = g.shape(alphas);
    const int Dn = as[0], gs = as[1];
    const Shape ss = g.shape(scope);
    const int H = ss[0], W = ss[1];
    Var w_gl = g.tanh_(g.softplus_(alphas));
    Var placed = stn_place_batch(g, g.reshape(w_gl, Shape{Dn, 1, gs, gs}), poses, H, W);
    Var w = g.reshape(placed, Shape{Dn, H * W});
    Var num = g.row_sum(g.mul_bcast0(w, g.reshape(scope, Shape{H * W})));
    Var den = g.add_scalar(g.row_sum(w), T(1e-8));
    return g.div(num, den);
  }

  // retained slots after presence thresholding (exposed for tests)
  static std::vector<int> filter_slots(const std::vector<double>& z_pres, double threshold) {
    std::vector<int> keep;
    for (size_t i = 0; i < z_pres.size(); ++i)
      if (z_pres[i] >= threshold) keep.push_back(static_cast<int>(i));
    return keep;
  }

  void set_presence_prior_schedule(double smooth, double target) {
    priors_smooth_ = smooth;
    priors_target_ = target;
  }

 private:
  static Var squash_scale(Graph<T>& g, Var raw, T min_s) {
    return g.add_scalar(g.mul_scalar(g.sigmoid_(raw), T(1) - min_s), min_s);
  }

  // concat along channels for [1,C,H,W] tensors
  static Var concat_ch(Graph<T>& g, const std::vector<Var>& xs) {
    std::vector<Var> squeezed;
    int ch = 0;
    const Shape s0 = g.shape(xs[0]);
    for (Var x : xs) {
      const Shape s = g.shape(x);
      squeezed.push_back(g.reshape(x, Shape{s[1], s[2], s[3]}));
      ch += s[1];
    }
    return g.reshape(g.concat0(squeezed), Shape{1, ch, s0[2], s0[3]});
  }

  static Tensor<T> concat_values(const Tensor<T>& a, const Tensor<T>& b) {
    Shape s = a.shape;
    s.dim[0] = a.shape[0] + b.shape[0];
    Tensor<T> out(s);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
    return out;
  }

  Tensor<T> reconstruction(const Tensor<T>& fg_masks, const Tensor<T>& bg_mask,
                           const Tensor<T>& fg_means, const Tensor<T>& bg_mean) const {
    const int K = fg_masks.shape[0], H = fg_masks.shape[1], W = fg_masks.shape[2];
    const int64_t M = static_cast<int64_t>(H) * W;
    Tensor<T> recon(Shape{3, H, W});
    for (int c2 = 0; c2 < 3; ++c2)
      for (int64_t m = 0; m < M; ++m) {
        T acc = bg_mask[m] * bg_mean[c2 * M + m];
        for (int k = 0; k < K; ++k)
          acc += fg_masks[k * M + m] * fg_means[(static_cast<int64_t>(k) * 3 + c2) * M + m];
        recon[c2 * M + m] = acc;
      }
    return recon;
  }

  ParamStore<T> params_;
  double priors_smooth_ = 0.9;
  double priors_target_ = 0.99;

  Conv2d<T> enc_conv1_, enc_conv2_, enc_conv3_, enc_fuse_, enc_mem_gate_, enc_mem_cand_,
      enc_head_, enc_reduce_;
  Conv2d<T> disc_pool_, disc_where_;
  Linear<T> disc_proposal_;
  Linear<T> glimpse_fc_, img_glimpse_fc_;
  GruCell<T> what_gru_;
  Linear<T> what_head_;
  Linear<T> prop_fc_, img_prop_fc_;
  GruCell<T> prop_where_gru_;
  Linear<T> prop_where_head_;
  GruCell<T> prop_pres_gru_;
  Linear<T> prop_pres_head_;
  Linear<T> dec_fc_;
  Conv2d<T> dec_conv1_, dec_conv2_, dec_app_, dec_mask_;
  Conv2d<T> bg_conv1_, bg_conv2_, bg_conv3_, bg_conv4_;
  Linear<T> bg_fc_;
  Linear<T> bgdec_fc_;
  Conv2d<T> bgdec_conv1_, bgdec_conv2_, bgdec_head_;
};

}  // namespace apex
