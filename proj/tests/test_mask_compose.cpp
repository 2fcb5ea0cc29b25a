#include <gtest/gtest.h>

#include <cmath>

#include "apex/mask_compose.hpp"
#include "apex/rng.hpp"
#include "oracles.hpp"

using apex::Graph;
using apex::PoseParams;
using apex::RngStream;
using apex::Shape;
using apex::Tensor;
using apex::Var;

namespace {

constexpr double kC = apex::kDefaultLogitBound;

Tensor<double> random_tensor(Shape s, RngStream& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.next_normal();
  return t;
}

PoseParams random_pose(RngStream& rng) {
  PoseParams p;
  p.scale_x = rng.next_uniform(0.25, 0.9);
  p.scale_y = rng.next_uniform(0.25, 0.9);
  p.center_x = rng.next_uniform(-0.6, 0.6);
  p.center_y = rng.next_uniform(-0.6, 0.6);
  return p;
}

std::vector<Tensor<double>> split_rows3(const Tensor<double>& t) {
  // [K,h,w] -> K tensors of [1,h,w]
  std::vector<Tensor<double>> out;
  const int K = t.shape[0], h = t.shape[1], w = t.shape[2];
  for (int k = 0; k < K; ++k) {
    Tensor<double> g(Shape{1, h, w});
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) g.at(0, i, j) = t.at(k, i, j);
    out.push_back(g);
  }
  return out;
}

}  // namespace

TEST(ClampLogits, ZeroAndSaturation) {
  Tensor<double> raw(Shape{1, 2, 2});
  EXPECT_EQ(apex::clamp_logits(raw, kC).max_abs(), 0.0);
  raw.fill(1e9);
  Tensor<double> hi = apex::clamp_logits(raw, kC);
  EXPECT_NEAR(hi[0], kC, 1e-9);
  raw.fill(-1e9);
  EXPECT_NEAR(apex::clamp_logits(raw, kC)[0], -kC, 1e-9);
}

TEST(ClampLogits, ScalarOracle) {
  Tensor<double> raw(Shape{1, 1, 1});
  raw[0] = 1.5;
  EXPECT_NEAR(apex::clamp_logits(raw, 8.0)[0], 8.0 * std::tanh(1.5), 1e-12);
}

TEST(Stn, PlaceIdentityMatchingSizes) {
  RngStream rng(21);
  Tensor<double> gl = random_tensor(Shape{2, 6, 6}, rng);
  Tensor<double> out = apex::stn_place(gl, PoseParams{}, 6, 6);
  EXPECT_LT(max_abs_diff(out, gl), 1e-12);
}

TEST(Stn, PlaceConstantInsideBox) {
  Tensor<double> gl = Tensor<double>::full(Shape{1, 4, 4}, 3.5);
  PoseParams p{0.5, 0.5, 0.0, 0.0};
  Tensor<double> out = apex::stn_place(gl, p, 16, 16);
  // interior of the box: value v; far outside: zero
  EXPECT_NEAR(out.at(0, 8, 8), 3.5, 1e-9);
  EXPECT_EQ(out.at(0, 0, 0), 0.0);
  EXPECT_EQ(out.at(0, 15, 15), 0.0);
}

TEST(Stn, PlaceHalfScaleBilinearOracle) {
  RngStream rng(22);
  Tensor<double> gl = random_tensor(Shape{1, 4, 4}, rng);
  PoseParams p{0.5, 0.5, 0.0, 0.0};
  Tensor<double> got = apex::stn_place(gl, p, 8, 8);
  Tensor<double> want = oracle::stn_place(gl, p, 8, 8);
  EXPECT_LT(max_abs_diff(got, want), 1e-12);
}

TEST(Stn, CropIdentityIsResize) {
  RngStream rng(23);
  Tensor<double> img = random_tensor(Shape{1, 8, 8}, rng);
  Tensor<double> got = apex::stn_crop(img, PoseParams{}, 8, 8);
  EXPECT_LT(max_abs_diff(got, img), 1e-12);
}

TEST(Stn, PlaceThenCropRoundTrip) {
  // smooth glimpse: bilinear round trip stays within a few percent
  Tensor<double> gl(Shape{1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      gl.at(0, i, j) = 0.5 + 0.4 * std::sin(0.35 * i) * std::cos(0.3 * j);
  PoseParams p{0.5, 0.5, 0.1, -0.05};
  Tensor<double> placed = apex::stn_place(gl, p, 32, 32);
  Tensor<double> back = apex::stn_crop(placed, p, 8, 8);
  EXPECT_LT(max_abs_diff(back, gl), 0.05);
}

TEST(Stn, CropOutsideImageRejected) {
  Tensor<double> img(Shape{1, 8, 8});
  PoseParams p{0.5, 0.5, 3.0, 0.0};
  EXPECT_THROW(apex::stn_crop(img, p, 4, 4), std::invalid_argument);
}

TEST(Stn, DegenerateScaleRejected) {
  Tensor<double> img(Shape{1, 8, 8});
  PoseParams p{0.01, 0.5, 0.0, 0.0};
  EXPECT_THROW(apex::stn_crop(img, p, 4, 4), std::invalid_argument);
  Tensor<double> gl(Shape{1, 4, 4});
  EXPECT_THROW(apex::stn_place(gl, p, 8, 8), std::invalid_argument);
}

TEST(ForegroundMask, AllAbsentIsZero) {
  RngStream rng(24);
  Tensor<double> alphas = random_tensor(Shape{3, 4, 4}, rng);
  std::vector<double> z = {0, 0, 0};
  std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng), random_pose(rng)};
  Tensor<double> m = apex::foreground_mask(alphas, z, poses, 8, 8);
  EXPECT_EQ(m.max_abs(), 0.0);
}

TEST(ForegroundMask, SingleObjectSaturates) {
  Tensor<double> alphas = Tensor<double>::full(Shape{1, 4, 4}, kC);
  std::vector<double> z = {1.0};
  std::vector<PoseParams> poses = {PoseParams{}};  // full image box
  Tensor<double> m = apex::foreground_mask(alphas, z, poses, 4, 4);
  const double want = std::tanh(apex::Graph<double>::softplus_scalar(kC));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(m.at(y, x), want, 1e-9);
}

TEST(ForegroundMask, TwoObjectScalarOracle) {
  RngStream rng(25);
  Tensor<double> alphas = random_tensor(Shape{2, 3, 3}, rng);
  std::vector<double> z = {1.0, 1.0};
  std::vector<PoseParams> poses = {PoseParams{0.7, 0.7, -0.2, -0.1}, PoseParams{0.6, 0.8, 0.3, 0.2}};
  Tensor<double> got = apex::foreground_mask(alphas, z, poses, 6, 6);
  Tensor<double> want = oracle::foreground_mask(split_rows3(alphas), z, poses, 6, 6);
  EXPECT_LT(max_abs_diff(got, want), 1e-9);
}

TEST(NormalizeMasks, SingletonIsOne) {
  RngStream rng(26);
  Tensor<double> alphas = random_tensor(Shape{1, 3, 3}, rng);
  Tensor<double> m = apex::normalize_object_masks(alphas, {1.0}, {random_pose(rng)}, 6, 6);
  for (int64_t i = 0; i < m.numel(); ++i) EXPECT_NEAR(m[i], 1.0, 1e-12);
}

TEST(NormalizeMasks, PresenceIntervalSeparation) {
  RngStream rng(27);
  Tensor<double> raw = random_tensor(Shape{2, 3, 3}, rng, 2.0);
  Tensor<double> alphas = apex::clamp_logits(raw, kC);
  std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng)};
  Tensor<double> m = apex::normalize_object_masks(alphas, {1.0, 0.0}, poses, 7, 7);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) EXPECT_GT(m.at(0, y, x), m.at(1, y, x));
}

TEST(NormalizeMasks, ThreeObjectSoftmaxOracle) {
  RngStream rng(28);
  Tensor<double> alphas = random_tensor(Shape{3, 3, 3}, rng, 2.0);
  std::vector<double> z = {1.0, 0.3, 0.0};
  std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng), random_pose(rng)};
  Tensor<double> got = apex::normalize_object_masks(alphas, z, poses, 5, 5, kC);
  auto want = oracle::normalize_object_masks(split_rows3(alphas), z, poses, 5, 5, kC);
  for (int k = 0; k < 3; ++k)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) EXPECT_NEAR(got.at(k, y, x), want[k].at(y, x), 1e-9);
}

TEST(ComposeMasks, AllAbsentGivesBackground) {
  RngStream rng(29);
  Tensor<double> alphas = random_tensor(Shape{2, 3, 3}, rng);
  auto ms = apex::compose_masks(alphas, {0.0, 0.0}, {random_pose(rng), random_pose(rng)}, 6, 6);
  for (int64_t i = 0; i < ms.bg_mask.numel(); ++i) EXPECT_EQ(ms.bg_mask[i], 1.0);
}

TEST(ComposeMasks, PartitionOfUnity) {
  RngStream rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    const int K = rng.next_int(1, 4);
    Tensor<double> alphas = random_tensor(Shape{K, 4, 4}, rng, 3.0);
    std::vector<double> z;
    std::vector<PoseParams> poses;
    for (int k = 0; k < K; ++k) {
      z.push_back(rng.next_unit_open());
      poses.push_back(random_pose(rng));
    }
    auto ms = apex::compose_masks(alphas, z, poses, 8, 8);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        double total = ms.bg_mask.at(y, x);
        for (int k = 0; k < K; ++k) total += ms.fg_masks.at(k, y, x);
        EXPECT_NEAR(total, 1.0, 1e-5);
      }
  }
}

TEST(ComposeMasks, RandomScalarOracle) {
  RngStream rng(31);
  Tensor<double> alphas = random_tensor(Shape{3, 4, 4}, rng, 2.5);
  std::vector<double> z = {0.9, 0.4, 0.1};
  std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng), random_pose(rng)};
  auto got = apex::compose_masks(alphas, z, poses, 8, 8);
  auto want = oracle::compose_masks(split_rows3(alphas), z, poses, 8, 8, kC);
  for (int k = 0; k < 3; ++k)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) EXPECT_NEAR(got.fg_masks.at(k, y, x), want.fg[k].at(y, x), 1e-9);
  EXPECT_LT(max_abs_diff(got.bg_mask, want.bg), 1e-9);
}

namespace {

apex::MaskStack<double> empty_foreground(int H, int W) {
  apex::MaskStack<double> ms;
  ms.fg_masks = Tensor<double>(Shape{1, H, W});
  ms.fg_total = Tensor<double>(Shape{H, W});
  ms.bg_mask = Tensor<double>::full(Shape{H, W}, 1.0);
  return ms;
}

}  // namespace

TEST(MixtureLogLik, PerfectBackgroundFit) {
  const int H = 4, W = 4;
  RngStream rng(32);
  Tensor<double> x(Shape{3, H, W});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.next_unit_open();
  apex::ComponentMeans<double> means;
  means.fg_means = Tensor<double>(Shape{1, 3, H, W});
  means.bg_mean = x;
  const double got = apex::mixture_log_likelihood(x, empty_foreground(H, W), means);
  const double want = -H * W * 3.0 * (0.5 * std::log(2 * M_PI) + std::log(means.sigma_bg));
  EXPECT_NEAR(got, want, 1e-6);
}

TEST(MixtureLogLik, OneSigmaOffset) {
  const int H = 4, W = 4;
  RngStream rng(33);
  Tensor<double> x(Shape{3, H, W});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.next_unit_open();
  apex::ComponentMeans<double> means;
  means.fg_means = Tensor<double>(Shape{1, 3, H, W});
  means.bg_mean = x;
  const double base = apex::mixture_log_likelihood(x, empty_foreground(H, W), means);
  for (int64_t i = 0; i < means.bg_mean.numel(); ++i) means.bg_mean[i] += means.sigma_bg;
  const double shifted = apex::mixture_log_likelihood(x, empty_foreground(H, W), means);
  EXPECT_NEAR(shifted, base - H * W * 3.0 / 2.0, 1e-6);
}

TEST(MixtureLogLik, DirectDensityOracle) {
  const int H = 4, W = 4;
  RngStream rng(34);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> alphas = random_tensor(Shape{2, 3, 3}, rng, 2.0);
    std::vector<double> z = {rng.next_unit_open(), rng.next_unit_open()};
    std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng)};
    auto ms = apex::compose_masks(alphas, z, poses, H, W);

    Tensor<double> x(Shape{3, H, W});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.next_unit_open();
    apex::ComponentMeans<double> means;
    // keep means near x so the no-logsumexp oracle cannot underflow
    means.fg_means = Tensor<double>(Shape{2, 3, H, W});
    for (int64_t k = 0; k < 2; ++k)
      for (int64_t i = 0; i < 3 * H * W; ++i)
        means.fg_means[k * 3 * H * W + i] = x[i] + 0.1 * rng.next_normal();
    means.bg_mean = Tensor<double>(Shape{3, H, W});
    for (int64_t i = 0; i < x.numel(); ++i) means.bg_mean[i] = x[i] + 0.05 * rng.next_normal();

    const double got = apex::mixture_log_likelihood(x, ms, means);

    std::vector<Tensor<double>> omasks, omeans;
    for (int k = 0; k < 2; ++k) {
      Tensor<double> m(Shape{H, W}), mu(Shape{3, H, W});
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) m.at(y, xx) = ms.fg_masks.at(k, y, xx);
      for (int64_t i = 0; i < mu.numel(); ++i) mu[i] = means.fg_means[k * 3 * H * W + i];
      omasks.push_back(m);
      omeans.push_back(mu);
    }
    omasks.push_back(ms.bg_mask);
    omeans.push_back(means.bg_mean);
    const double want =
        oracle::mixture_loglik_direct(x, omasks, omeans, {0.1, 0.1, 0.04});
    EXPECT_NEAR(got, want, 1e-6 * std::max(1.0, std::abs(want)));
  }
}

TEST(MixtureLogLik, RejectsNonFiniteInput) {
  const int H = 2, W = 2;
  Tensor<double> x(Shape{3, H, W});
  x[0] = std::numeric_limits<double>::quiet_NaN();
  apex::ComponentMeans<double> means;
  means.fg_means = Tensor<double>(Shape{1, 3, H, W});
  means.bg_mean = Tensor<double>(Shape{3, H, W});
  EXPECT_THROW(apex::mixture_log_likelihood(x, empty_foreground(H, W), means),
               std::invalid_argument);
}

TEST(EntropyLoss, DeterministicAssignmentIsZero) {
  const int H = 3, W = 3;
  apex::MaskStack<double> ms;
  ms.fg_total = Tensor<double>::full(Shape{H, W}, 1.0);
  ms.bg_mask = Tensor<double>(Shape{H, W});
  ms.fg_masks = Tensor<double>(Shape{2, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) ms.fg_masks.at((y + x) % 2, y, x) = 1.0;  // one-hot
  EXPECT_NEAR(apex::mask_entropy_loss(ms), 0.0, 1e-4);
}

TEST(EntropyLoss, NoForegroundIsZero) {
  const int H = 3, W = 3;
  apex::MaskStack<double> ms = empty_foreground(H, W);
  EXPECT_EQ(apex::mask_entropy_loss(ms), 0.0);
}

TEST(EntropyLoss, FiftyFiftyPixelContributesLog2) {
  const int H = 1, W = 1;
  apex::MaskStack<double> ms;
  ms.fg_total = Tensor<double>::full(Shape{H, W}, 1.0);
  ms.bg_mask = Tensor<double>(Shape{H, W});
  ms.fg_masks = Tensor<double>::full(Shape{2, H, W}, 0.5);
  EXPECT_NEAR(apex::mask_entropy_loss(ms), std::log(2.0), 1e-4);
}

TEST(EntropyLoss, ScalarOracle) {
  RngStream rng(35);
  Tensor<double> alphas = random_tensor(Shape{3, 3, 3}, rng, 2.0);
  std::vector<double> z = {0.8, 0.6, 0.9};
  std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng), random_pose(rng)};
  auto got_masks = apex::compose_masks(alphas, z, poses, 6, 6);
  auto want_masks = oracle::compose_masks(split_rows3(alphas), z, poses, 6, 6, kC);
  EXPECT_NEAR(apex::mask_entropy_loss(got_masks), oracle::entropy_loss(want_masks), 1e-9);
}

TEST(ScalorNormalize, KnownValues) {
  Tensor<double> a(Shape{1, 1, 1});
  a[0] = 1.0;
  EXPECT_NEAR(apex::scalor_style_normalize(a)[0], 1.0 / (1.0 + 1e-6), 1e-9);
  a[0] = 0.0;
  EXPECT_EQ(apex::scalor_style_normalize(a)[0], 0.0);

  Tensor<double> two(Shape{2, 1, 1});
  two[0] = 0.5;
  two[1] = 0.25;
  Tensor<double> m = apex::scalor_style_normalize(two);
  EXPECT_NEAR(m[0], 0.25 / (0.75 + 1e-6), 1e-9);
  EXPECT_NEAR(m[1], 0.0625 / (0.75 + 1e-6), 1e-9);
}

TEST(Properties, MonotoneForegroundInAlpha) {
  RngStream rng(36);
  for (int trial = 0; trial < 50; ++trial) {
    const int K = rng.next_int(1, 3);
    Tensor<double> alphas = random_tensor(Shape{K, 3, 3}, rng, 2.0);
    std::vector<double> z(K, 1.0);
    std::vector<PoseParams> poses;
    for (int k = 0; k < K; ++k) poses.push_back(random_pose(rng));
    Tensor<double> before = apex::foreground_mask(alphas, z, poses, 8, 8);
    Tensor<double> bumped = alphas;
    bumped[rng.next_below(bumped.numel())] += 0.5;
    Tensor<double> after = apex::foreground_mask(bumped, z, poses, 8, 8);
    for (int64_t i = 0; i < before.numel(); ++i) EXPECT_GE(after[i], before[i] - 1e-12);
  }
}

TEST(Properties, PresenceGatingExact) {
  RngStream rng(37);
  Tensor<double> alphas = random_tensor(Shape{3, 3, 3}, rng, 2.0);
  std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng), random_pose(rng)};
  Tensor<double> with_k = apex::foreground_mask(alphas, {1.0, 0.0, 1.0}, poses, 8, 8);
  // dropping the absent object's row entirely must not change m_fg
  Tensor<double> reduced(Shape{2, 3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      reduced.at(0, i, j) = alphas.at(0, i, j);
      reduced.at(1, i, j) = alphas.at(2, i, j);
    }
  Tensor<double> without_k =
      apex::foreground_mask(reduced, {1.0, 1.0}, {poses[0], poses[2]}, 8, 8);
  EXPECT_LT(max_abs_diff(with_k, without_k), 1e-12);
}

TEST(Properties, LikelihoodUpperBound) {
  RngStream rng(38);
  const int H = 4, W = 4;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> alphas = random_tensor(Shape{2, 3, 3}, rng, 2.0);
    std::vector<double> z = {rng.next_unit_open(), rng.next_unit_open()};
    std::vector<PoseParams> poses = {random_pose(rng), random_pose(rng)};
    auto ms = apex::compose_masks(alphas, z, poses, H, W);
    Tensor<double> x(Shape{3, H, W});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.next_unit_open();
    apex::ComponentMeans<double> means;
    means.fg_means = random_tensor(Shape{2, 3, H, W}, rng, 0.3);
    means.bg_mean = random_tensor(Shape{3, H, W}, rng, 0.3);
    const double ll = apex::mixture_log_likelihood(x, ms, means);
    const double bound =
        H * W * 3.0 * (-0.5 * std::log(2 * M_PI) - std::log(std::min(0.1, 0.04)));
    EXPECT_LE(ll, bound + 1e-9);
  }
}

// closed-form gradients vs central differences, as required at 1e-3
TEST(Gradients, ComposeLikelihoodEntropyVsFiniteDifferences) {
  RngStream rng(39);
  const int H = 4, W = 4, K = 2, gh = 3, gw = 3;
  Tensor<double> alphas = random_tensor(Shape{K, gh, gw}, rng, 1.5);
  Tensor<double> poses(Shape{K, 4});
  for (int k = 0; k < K; ++k) {
    poses.at(k, 0) = rng.next_uniform(0.35, 0.8);
    poses.at(k, 1) = rng.next_uniform(0.35, 0.8);
    poses.at(k, 2) = rng.next_uniform(-0.4, 0.4);
    poses.at(k, 3) = rng.next_uniform(-0.4, 0.4);
  }
  Tensor<double> zp(Shape{K});
  zp[0] = 0.9;
  zp[1] = 0.55;
  Tensor<double> fg_means = random_tensor(Shape{K, 3, H, W}, rng, 0.2);
  Tensor<double> bg_mean = random_tensor(Shape{3, H, W}, rng, 0.2);
  Tensor<double> x(Shape{3, H, W});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.next_unit_open();

  auto build = [&](Graph<double>& g, Var a, Var p, Var fm, Var bm) {
    auto ms = apex::compose_masks(g, a, g.constant(zp), p, H, W, kC);
    Var ll = apex::mixture_log_likelihood(g, ms, fm, bm, x, 0.1, 0.04);
    Var ent = apex::mask_entropy_loss(g, ms);
    return g.add(g.neg(ll), ent);
  };

  Graph<double> g;
  Var a = g.leaf(alphas, true);
  Var p = g.leaf(poses, true);
  Var fm = g.leaf(fg_means, true);
  Var bm = g.leaf(bg_mean, true);
  Var loss = build(g, a, p, fm, bm);
  g.backward(loss);

  auto eval = [&](const Tensor<double>& av, const Tensor<double>& pv, const Tensor<double>& fmv,
                  const Tensor<double>& bmv) {
    Graph<double> g2(false);
    return g2.val(build(g2, g2.leaf(av, false), g2.leaf(pv, false), g2.leaf(fmv, false),
                        g2.leaf(bmv, false)))[0];
  };

  const double h = 1e-5;
  auto check = [&](Var v, Tensor<double> base, int which) {
    Tensor<double> analytic = g.grad_of(v);
    RngStream pick(40 + which);
    for (int probe = 0; probe < 12; ++probe) {
      const int64_t i = pick.next_below(base.numel());
      Tensor<double> up = base, dn = base;
      up[i] += h;
      dn[i] -= h;
      double fu, fd;
      switch (which) {
        case 0: fu = eval(up, poses, fg_means, bg_mean); fd = eval(dn, poses, fg_means, bg_mean); break;
        case 1: fu = eval(alphas, up, fg_means, bg_mean); fd = eval(alphas, dn, fg_means, bg_mean); break;
        case 2: fu = eval(alphas, poses, up, bg_mean); fd = eval(alphas, poses, dn, bg_mean); break;
        default: fu = eval(alphas, poses, fg_means, up); fd = eval(alphas, poses, fg_means, dn); break;
      }
      const double fdg = (fu - fd) / (2 * h);
      // gradients below finite-difference resolution pass on absolute tolerance
      if (std::abs(fdg) < 1e-6 && std::abs(analytic[i]) < 1e-6) continue;
      const double denom = std::max(std::abs(fdg), std::abs(analytic[i]));
      EXPECT_LT(std::abs(analytic[i] - fdg) / denom, 1e-3)
          << "input " << which << " idx " << i << " analytic=" << analytic[i] << " fd=" << fdg;
    }
  };
  check(a, alphas, 0);
  check(p, poses, 1);
  check(fm, fg_means, 2);
  check(bm, bg_mean, 3);
}
