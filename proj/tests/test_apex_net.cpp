#include <gtest/gtest.h>

#include "apex/apex_net.hpp"
#include "apex/trainer.hpp"
#include "oracles.hpp"

using apex::ApexConfig;
using apex::ApexNet;
using apex::Graph;
using apex::ModelConfig;
using apex::ParamCtx;
using apex::RngStream;
using apex::SceneState;
using apex::Shape;
using apex::StepFlags;
using apex::StepOutputs;
using apex::Tensor;
using apex::Var;

namespace {

ApexConfig tiny_cfg() {
  ApexConfig c;
  c.data_image_size = 32;
  c.model_grid = 4;
  c.model_slot_cap = 8;
  c.train_seq_len = 2;
  return c;
}

Tensor<float> sprite_frame(int H, int W, int cy, int cx, int r, float val = 0.9f) {
  Tensor<float> f(Shape{3, H, W});
  f.fill(0.1f);
  for (int y = std::max(0, cy - r); y <= std::min(H - 1, cy + r); ++y)
    for (int x = std::max(0, cx - r); x <= std::min(W - 1, cx + r); ++x)
      for (int c = 0; c < 3; ++c) f.at(c, y, x) = val;
  return f;
}

}  // namespace

TEST(Encoder, ShapeFinitenessDeterminism) {
  ApexConfig c = tiny_cfg();
  ApexNet<float> net(ModelConfig::from(c), 3);
  Graph<float> g(false);
  ParamCtx<float> ctx(g, net.params(), false);
  SceneState<float> st = net.initial_state(g);
  Tensor<float> zero(Shape{3, 32, 32});
  Var frame = g.constant(zero);
  auto enc = net.encode_sequence_step(ctx, frame, st.enc_mem);
  EXPECT_EQ(g.shape(enc.e), (Shape{64, 8, 8}));
  EXPECT_TRUE(g.val(enc.e).all_finite());
  auto enc2 = net.encode_sequence_step(ctx, frame, st.enc_mem);
  EXPECT_EQ(g.val(enc.e).data, g.val(enc2.e).data);
}

TEST(Encoder, TranslationMovesFeaturePeak) {
  // architectural equivariance probe: an 8 px shift in the image moves the
  // strongest activation by 2 feature cells (stride 4), within one cell
  ApexConfig c;
  c.data_image_size = 64;
  ApexNet<float> net(ModelConfig::from(c), 11);
  auto peak_of = [&](const Tensor<float>& frame) {
    Graph<float> g(false);
    ParamCtx<float> ctx(g, net.params(), false);
    SceneState<float> st = net.initial_state(g);
    auto enc = net.encode_sequence_step(ctx, g.constant(frame), st.enc_mem);
    const Tensor<float>& e = g.val(enc.e);
    // peak of the per-cell activation norm difference from the corner cell
    int best_y = 0, best_x = 0;
    double best = -1;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        double acc = 0;
        for (int ch = 0; ch < 64; ++ch) {
          const double d = e.at(ch, y, x) - e.at(ch, 0, 0);
          acc += d * d;
        }
        if (acc > best) {
          best = acc;
          best_y = y;
          best_x = x;
        }
      }
    return std::make_pair(best_y, best_x);
  };
  auto [y1, x1] = peak_of(sprite_frame(64, 64, 20, 20, 4));
  auto [y2, x2] = peak_of(sprite_frame(64, 64, 20, 28, 4));
  EXPECT_LE(std::abs(y2 - y1), 1);
  EXPECT_NEAR(x2 - x1, 2, 1.01);
}

TEST(Decoder, ShapesAndDeterminism) {
  ApexConfig c = tiny_cfg();
  ApexNet<float> net(ModelConfig::from(c), 5);
  Graph<float> g(false);
  ParamCtx<float> ctx(g, net.params(), false);
  RngStream rng(3);
  Tensor<float> z = apex::normal_noise<float>(Shape{3, 32}, rng);
  auto d1 = net.decode_object(ctx, g.constant(z));
  auto d2 = net.decode_object(ctx, g.constant(z));
  EXPECT_EQ(g.shape(d1.appearance), (Shape{3, 3, 16, 16}));
  EXPECT_EQ(g.shape(d1.alpha), (Shape{3, 16, 16}));
  EXPECT_EQ(g.val(d1.appearance).data, g.val(d2.appearance).data);
  // appearance in [0,1], alpha within the clamp bound
  for (float v : g.val(d1.appearance).data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_LT(g.val(d1.alpha).max_abs(), c.model_logit_bound);
}

TEST(Background, PosteriorShapeAndDeterminism) {
  ApexConfig c = tiny_cfg();
  ApexNet<float> net(ModelConfig::from(c), 5);
  Graph<float> g(false);
  ParamCtx<float> ctx(g, net.params(), false);
  Tensor<float> frame = sprite_frame(32, 32, 16, 16, 5);
  Tensor<float> bgm = Tensor<float>::full(Shape{32, 32}, 1.0f);
  auto p1 = net.encode_background(ctx, g.constant(frame), g.constant(bgm));
  auto p2 = net.encode_background(ctx, g.constant(frame), g.constant(bgm));
  EXPECT_EQ(g.shape(p1.mean), (Shape{1, 64}));
  EXPECT_EQ(g.shape(p1.log_std), (Shape{1, 64}));
  EXPECT_EQ(g.val(p1.mean).data, g.val(p2.mean).data);
  Var img = net.decode_background(ctx, p1.mean);
  EXPECT_EQ(g.shape(img), (Shape{3, 32, 32}));
  EXPECT_TRUE(g.val(img).all_finite());
}

TEST(PContext, TrivialAndOracle) {
  Graph<double> g;
  RngStream rng(9);
  const int D = 2, gs = 6, H = 6, W = 6;
  Tensor<double> alphas(Shape{D, gs, gs});
  for (int64_t i = 0; i < alphas.numel(); ++i) alphas[i] = 2.0 * rng.next_normal();
  Tensor<double> poses(Shape{D, 4});
  for (int d = 0; d < D; ++d) {
    poses.at(d, 0) = rng.next_uniform(0.3, 0.8);
    poses.at(d, 1) = rng.next_uniform(0.3, 0.8);
    poses.at(d, 2) = rng.next_uniform(-0.4, 0.4);
    poses.at(d, 3) = rng.next_uniform(-0.4, 0.4);
  }
  // scope = 1 everywhere -> p_context = 1
  Var ones_scope = g.constant(Tensor<double>::full(Shape{H, W}, 1.0));
  Var pc1 = ApexNet<double>::p_context(g, g.constant(alphas), g.constant(poses), ones_scope);
  for (int d = 0; d < D; ++d) EXPECT_NEAR(g.val(pc1)[d], 1.0, 1e-9);

  // scope = 0 everywhere (fully explained) -> p_context = 0
  Var zero_scope = g.constant(Tensor<double>::zeros(Shape{H, W}));
  Var pc0 = ApexNet<double>::p_context(g, g.constant(alphas), g.constant(poses), zero_scope);
  for (int d = 0; d < D; ++d) EXPECT_NEAR(g.val(pc0)[d], 0.0, 1e-12);

  // scope zero exactly on a proposal's support, one elsewhere -> p_context = 0
  {
    Tensor<double> w_gl(Shape{1, gs, gs});
    for (int i = 0; i < gs; ++i)
      for (int j = 0; j < gs; ++j)
        w_gl.at(0, i, j) = std::tanh(std::log1p(std::exp(alphas.at(0, i, j))));
    apex::PoseParams p0{poses.at(0, 0), poses.at(0, 1), poses.at(0, 2), poses.at(0, 3)};
    Tensor<double> footprint = oracle::stn_place(w_gl, p0, H, W);
    Tensor<double> covered(Shape{H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) covered.at(y, x) = footprint.at(0, y, x) > 0 ? 0.0 : 1.0;
    Var pcc = ApexNet<double>::p_context(g, g.constant(alphas), g.constant(poses),
                                         g.constant(covered));
    EXPECT_NEAR(g.val(pcc)[0], 0.0, 1e-12);
  }

  // random scope vs the scalar Eq-17 oracle
  Tensor<double> scope(Shape{H, W});
  for (int64_t i = 0; i < scope.numel(); ++i) scope[i] = rng.next_unit_open();
  Var pc = ApexNet<double>::p_context(g, g.constant(alphas), g.constant(poses),
                                      g.constant(scope));
  for (int d = 0; d < D; ++d) {
    Tensor<double> a1(Shape{1, gs, gs});
    for (int i = 0; i < gs; ++i)
      for (int j = 0; j < gs; ++j) a1.at(0, i, j) = alphas.at(d, i, j);
    apex::PoseParams p{poses.at(d, 0), poses.at(d, 1), poses.at(d, 2), poses.at(d, 3)};
    EXPECT_NEAR(g.val(pc)[d], oracle::p_context(scope, a1, p), 1e-6);
  }
}

TEST(FilterSlots, Thresholding) {
  EXPECT_EQ(ApexNet<float>::filter_slots({1.0, 1.0}, 0.1).size(), 2u);
  EXPECT_TRUE(ApexNet<float>::filter_slots({0.0, 0.0}, 0.1).empty());
  auto keep = ApexNet<float>::filter_slots({0.05, 0.5, 0.09}, 0.1);
  ASSERT_EQ(keep.size(), 1u);
  EXPECT_EQ(keep[0], 1);
}

TEST(Step, FirstStepDiscoversOnly) {
  ApexConfig c = tiny_cfg();
  ApexNet<float> net(ModelConfig::from(c), 7);
  Graph<float> g(false);
  ParamCtx<float> ctx(g, net.params(), false);
  SceneState<float> st = net.initial_state(g);
  RngStream rng(1);
  StepFlags flags;
  flags.train = false;
  flags.hard_presence = true;
  StepOutputs<float> so = net.step(ctx, st, sprite_frame(32, 32, 10, 12, 4), flags, rng);
  EXPECT_EQ(so.propagated_count, 0);
  EXPECT_EQ(so.discovered_count, 16);  // 4x4 grid
  EXPECT_EQ(so.slot_ids.size(), 16u);
  // partition of unity on the step's masks
  const int K = so.fg_masks.shape[0];
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      double total = so.bg_mask.at(y, x);
      for (int k = 0; k < K; ++k) total += so.fg_masks.at(k, y, x);
      ASSERT_NEAR(total, 1.0, 1e-4);
    }
  EXPECT_LE(st.slot_count(), c.model_slot_cap);
  EXPECT_EQ(st.time_index, 1);
}

TEST(Step, LossTermsFiniteAcrossSeeds) {
  ApexConfig c = tiny_cfg();
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull, 6ull, 7ull, 8ull, 9ull, 10ull}) {
    ApexNet<float> net(ModelConfig::from(c), seed);
    Graph<float> g;
    ParamCtx<float> ctx(g, net.params(), true);
    SceneState<float> st = net.initial_state(g);
    RngStream rng(seed);
    StepFlags flags;
    flags.discovery_prior = 0.1;
    StepOutputs<float> so = net.step(ctx, st, sprite_frame(32, 32, 16, 10, 5), flags, rng);
    for (Var v : {so.loglik, so.kl_what, so.kl_where, so.kl_pres, so.kl_bg, so.entropy})
      ASSERT_TRUE(std::isfinite(g.val(v)[0])) << "seed " << seed;
    // a second step exercises propagation
    StepOutputs<float> so2 = net.step(ctx, st, sprite_frame(32, 32, 16, 12, 5), flags, rng);
    for (Var v : {so2.loglik, so2.kl_what, so2.kl_where, so2.kl_pres, so2.kl_bg, so2.entropy})
      ASSERT_TRUE(std::isfinite(g.val(v)[0])) << "seed " << seed;
    EXPECT_LE(st.slot_count(), c.model_slot_cap);
  }
}

TEST(Step, DeterministicGivenSeed) {
  ApexConfig c = tiny_cfg();
  auto run = [&]() {
    ApexNet<float> net(ModelConfig::from(c), 21);
    Graph<float> g;
    ParamCtx<float> ctx(g, net.params(), true);
    SceneState<float> st = net.initial_state(g);
    RngStream rng(33);
    StepFlags flags;
    StepOutputs<float> so = net.step(ctx, st, sprite_frame(32, 32, 12, 12, 4), flags, rng);
    return std::make_pair(g.val(so.loglik)[0], g.val(so.kl_pres)[0]);
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Step, SlotCapHonoured) {
  ApexConfig c = tiny_cfg();
  c.model_slot_cap = 3;
  c.model_filter_threshold = 0.0;  // keep everything, force the cap
  ApexNet<float> net(ModelConfig::from(c), 2);
  Graph<float> g;
  ParamCtx<float> ctx(g, net.params(), true);
  SceneState<float> st = net.initial_state(g);
  RngStream rng(4);
  StepFlags flags;
  std::vector<std::string> diag;
  net.step(ctx, st, sprite_frame(32, 32, 16, 16, 6), flags, rng, &diag);
  EXPECT_LE(st.slot_count(), 3);
  EXPECT_FALSE(diag.empty());  // drops were logged
}

TEST(Step, IdsPersistAcrossSteps) {
  ApexConfig c = tiny_cfg();
  ApexNet<float> net(ModelConfig::from(c), 13);
  Graph<float> g;
  ParamCtx<float> ctx(g, net.params(), true);
  SceneState<float> st = net.initial_state(g);
  RngStream rng(5);
  StepFlags flags;
  net.step(ctx, st, sprite_frame(32, 32, 12, 12, 4), flags, rng);
  std::vector<int64_t> ids_t1 = st.ids;
  StepOutputs<float> so2 = net.step(ctx, st, sprite_frame(32, 32, 12, 14, 4), flags, rng);
  // the first |ids_t1| exported slots at t=2 are the propagated ones, same ids
  ASSERT_GE(so2.slot_ids.size(), ids_t1.size());
  for (size_t i = 0; i < ids_t1.size(); ++i) EXPECT_EQ(so2.slot_ids[i], ids_t1[i]);
  // new discovery ids never reuse old ones
  for (size_t i = ids_t1.size(); i < so2.slot_ids.size(); ++i)
    for (int64_t old : ids_t1) EXPECT_NE(so2.slot_ids[i], old);
}

TEST(ImageSpaceStnAblation, RunsAndDiffers) {
  ApexConfig c = tiny_cfg();
  ApexNet<float> net(ModelConfig::from(c), 17);
  auto run = [&](bool image_space) {
    Graph<float> g;
    ParamCtx<float> ctx(g, net.params(), true);
    SceneState<float> st = net.initial_state(g);
    RngStream rng(6);
    StepFlags flags;
    flags.image_space_stn = image_space;
    StepOutputs<float> so = net.step(ctx, st, sprite_frame(32, 32, 14, 14, 4), flags, rng);
    return g.val(so.loglik)[0];
  };
  const float base = run(false);
  const float ablated = run(true);
  EXPECT_TRUE(std::isfinite(base));
  EXPECT_TRUE(std::isfinite(ablated));
  EXPECT_NE(base, ablated);
}

TEST(ScalorNormAblation, MasksStillPartition) {
  ApexConfig c = tiny_cfg();
  c.ablation_scalor_norm = true;
  ApexNet<float> net(ModelConfig::from(c), 19);
  Graph<float> g;
  ParamCtx<float> ctx(g, net.params(), true);
  SceneState<float> st = net.initial_state(g);
  RngStream rng(7);
  StepFlags flags;
  StepOutputs<float> so = net.step(ctx, st, sprite_frame(32, 32, 14, 10, 4), flags, rng);
  const int K = so.fg_masks.shape[0];
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      double total = so.bg_mask.at(y, x);
      for (int k = 0; k < K; ++k) total += so.fg_masks.at(k, y, x);
      ASSERT_NEAR(total, 1.0, 1e-4);
    }
}
