#include <gtest/gtest.h>

#include "apex/eval_metrics.hpp"
#include "apex/rng.hpp"
#include "oracles.hpp"

using apex::Detection;
using apex::LabelFrame;
using apex::RngStream;
using apex::Shape;
using apex::Tensor;
using apex::TrackSet;

namespace {

LabelFrame frame_from(int H, int W, std::vector<int> labels) {
  LabelFrame f;
  f.height = H;
  f.width = W;
  f.labels = std::move(labels);
  return f;
}

LabelFrame random_frame(int H, int W, int n_labels, RngStream& rng) {
  LabelFrame f;
  f.height = H;
  f.width = W;
  f.labels.resize(static_cast<size_t>(H) * W);
  for (auto& l : f.labels) l = rng.next_int(0, n_labels - 1);
  return f;
}

}  // namespace

TEST(Ari, PerfectAndPermuted) {
  RngStream rng(50);
  LabelFrame gt = random_frame(6, 6, 3, rng);
  EXPECT_EQ(apex::ari(gt, gt, false), 1.0);
  LabelFrame perm = gt;
  for (auto& l : perm.labels) l = (l + 7) * 3;  // relabel, same partition
  EXPECT_EQ(apex::ari(perm, gt, false), 1.0);
  EXPECT_EQ(apex::ari(perm, gt, true), 1.0);
}

TEST(Ari, AllTwoLabelPredictionsAgainstPairCountingOracle) {
  // every 2-label prediction on a 4x4 frame (2^16), against a fixed ground truth
  LabelFrame gt = frame_from(4, 4, {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3});
  for (uint32_t code = 0; code < (1u << 16); ++code) {
    std::vector<int> labels(16);
    for (int i = 0; i < 16; ++i) labels[i] = (code >> i) & 1;
    LabelFrame pred = frame_from(4, 4, labels);
    const double got = apex::ari(pred, gt, false);
    const double want = oracle::ari_pair_counting(pred.labels, gt.labels);
    ASSERT_NEAR(got, want, 1e-9) << "code " << code;
  }
}

TEST(Ari, DegenerateSingleClusters) {
  LabelFrame a = frame_from(2, 2, {5, 5, 5, 5});
  LabelFrame b = frame_from(2, 2, {1, 1, 1, 1});
  EXPECT_EQ(apex::ari(a, b, false), 1.0);
}

TEST(Ari, ForegroundOnlyIgnoresBackgroundNoise) {
  RngStream rng(51);
  LabelFrame gt = frame_from(4, 4, {0, 0, 0, 0, 1, 1, 0, 0, 2, 2, 0, 0, 0, 0, 0, 0});
  LabelFrame pred = gt;
  const double base = apex::ari(pred, gt, true);
  // scramble predictions on background pixels only
  for (size_t i = 0; i < pred.labels.size(); ++i)
    if (gt.labels[i] == 0) pred.labels[i] = rng.next_int(5, 9);
  EXPECT_EQ(apex::ari(pred, gt, true), base);
}

TEST(Msc, PerfectAndHalves) {
  RngStream rng(52);
  LabelFrame gt = random_frame(6, 6, 3, rng);
  EXPECT_EQ(apex::msc(gt, gt, false).value(), 1.0);

  LabelFrame halves = frame_from(2, 4, {1, 1, 2, 2, 1, 1, 2, 2});
  LabelFrame whole = frame_from(2, 4, {7, 7, 7, 7, 7, 7, 7, 7});
  EXPECT_NEAR(apex::msc(whole, halves, false).value(), 0.5, 1e-12);
}

TEST(Msc, SkippedWhenNoForeground) {
  LabelFrame gt = frame_from(2, 2, {0, 0, 0, 0});
  LabelFrame pred = frame_from(2, 2, {1, 1, 0, 0});
  EXPECT_FALSE(apex::msc(pred, gt, true).has_value());
  EXPECT_TRUE(apex::msc(pred, gt, false).has_value());
}

TEST(Msc, RandomInstancesAgainstContingencyOracle) {
  RngStream rng(53);
  for (int trial = 0; trial < 200; ++trial) {
    LabelFrame gt = random_frame(6, 6, rng.next_int(2, 4), rng);
    LabelFrame pred = random_frame(6, 6, rng.next_int(2, 4), rng);
    std::set<int> all_ids(gt.labels.begin(), gt.labels.end());
    const double want_all = oracle::msc_contingency(pred.labels, gt.labels, all_ids);
    EXPECT_NEAR(apex::msc(pred, gt, false).value(), want_all, 1e-9);
    std::set<int> fg_ids;
    for (int l : all_ids)
      if (l != 0) fg_ids.insert(l);
    auto got_fg = apex::msc(pred, gt, true);
    if (fg_ids.empty()) {
      EXPECT_FALSE(got_fg.has_value());
    } else if (got_fg.has_value()) {
      std::vector<int> gp, gg;
      for (size_t i = 0; i < gt.labels.size(); ++i)
        if (gt.labels[i] != 0) {
          gp.push_back(pred.labels[i]);
          gg.push_back(gt.labels[i]);
        }
      EXPECT_NEAR(*got_fg, oracle::msc_contingency(gp, gg, fg_ids), 1e-9);
    }
  }
}

namespace {

// axis-aligned box mask helper
std::vector<uint8_t> box_mask(int H, int W, int y0, int x0, int h, int w) {
  std::vector<uint8_t> m(static_cast<size_t>(H) * W, 0);
  for (int y = std::max(0, y0); y < std::min(H, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(W, x0 + w); ++x) m[y * W + x] = 1;
  return m;
}

TrackSet two_object_episode(int T, int H, int W) {
  TrackSet ts;
  ts.height = H;
  ts.width = W;
  for (int t = 0; t < T; ++t) {
    std::vector<Detection> dets;
    dets.push_back({1, box_mask(H, W, 1, 1 + t, 3, 3)});
    dets.push_back({2, box_mask(H, W, 6, 8 - t, 3, 3)});
    ts.frames.push_back(dets);
  }
  return ts;
}

}  // namespace

TEST(Mot, PerfectTracker) {
  TrackSet gt = two_object_episode(6, 12, 12);
  auto m = apex::mot_evaluate(gt, gt);
  EXPECT_EQ(m.mota, 100.0);
  EXPECT_EQ(m.raw_id_switches, 0);
  EXPECT_EQ(m.raw_misses, 0);
  EXPECT_EQ(m.raw_false_positives, 0);
  EXPECT_EQ(m.motp, 100.0);
  EXPECT_EQ(m.md, 100.0);
  EXPECT_EQ(m.mt, 100.0);
}

TEST(Mot, MidEpisodeIdSwapCostsTwoSwitches) {
  const int T = 6;
  TrackSet gt = two_object_episode(T, 12, 12);
  TrackSet pred = gt;
  for (int t = T / 2; t < T; ++t)
    for (auto& d : pred.frames[t]) d.track_id = d.track_id == 1 ? 2 : 1;
  auto m = apex::mot_evaluate(pred, gt);
  EXPECT_EQ(m.raw_id_switches, 2);
  EXPECT_EQ(m.raw_misses, 0);
  EXPECT_EQ(m.raw_false_positives, 0);
  EXPECT_NEAR(m.mota, 100.0 * (1.0 - 2.0 / (2 * T)), 1e-9);
}

TEST(Mot, EmptyGroundTruthRejected) {
  TrackSet gt, pred;
  gt.frames.resize(3);
  pred.frames.resize(3);
  EXPECT_THROW(apex::mot_evaluate(pred, gt), std::invalid_argument);
}

TEST(Mot, RandomMicroBenchmarksMatchExhaustiveOracle) {
  RngStream rng(54);
  const int H = 8, W = 8;
  for (int trial = 0; trial < 300; ++trial) {
    const int T = 3;
    std::vector<oracle::OracleTrackFrame> ogt(T), opred(T);
    TrackSet gt, pred;
    gt.height = pred.height = H;
    gt.width = pred.width = W;
    gt.frames.resize(T);
    pred.frames.resize(T);
    for (int t = 0; t < T; ++t) {
      const int ng = 2;
      const int np = rng.next_int(0, 3);
      for (int i = 0; i < ng; ++i) {
        auto m = box_mask(H, W, rng.next_int(0, 4), rng.next_int(0, 4), 3, 3);
        gt.frames[t].push_back({i + 1, m});
        ogt[t].ids.push_back(i + 1);
        ogt[t].masks.push_back(m);
      }
      for (int j = 0; j < np; ++j) {
        auto m = box_mask(H, W, rng.next_int(0, 4), rng.next_int(0, 4), 3, 3);
        const int64_t pid = rng.next_int(10, 12);
        // avoid duplicate pred ids inside one frame
        bool dup = false;
        for (auto& d : pred.frames[t])
          if (d.track_id == pid) dup = true;
        if (dup) continue;
        pred.frames[t].push_back({pid, m});
        opred[t].ids.push_back(pid);
        opred[t].masks.push_back(m);
      }
    }
    auto got = apex::mot_evaluate(pred, gt);
    auto want = oracle::oracle_mot(ogt, opred);
    ASSERT_EQ(got.raw_misses, want.misses) << "trial " << trial;
    ASSERT_EQ(got.raw_false_positives, want.fps) << "trial " << trial;
    ASSERT_EQ(got.raw_id_switches, want.id_switches) << "trial " << trial;
    ASSERT_EQ(got.raw_matches, want.matches) << "trial " << trial;
    if (want.matches > 0)
      ASSERT_NEAR(got.motp, 100.0 * want.iou_sum / want.matches, 1e-6) << "trial " << trial;
  }
}

TEST(SlotsToLabels, BackgroundOnly) {
  Tensor<float> fg(Shape{2, 3, 3});
  Tensor<float> bg = Tensor<float>::full(Shape{3, 3}, 1.0f);
  auto lf = apex::masks_to_labelframe(fg, bg);
  for (int l : lf.labels) EXPECT_EQ(l, 0);
  EXPECT_TRUE(apex::labelframe_to_detections(lf, {10, 11}).empty());
}

TEST(SlotsToLabels, DominantSlotsPartition) {
  Tensor<float> fg(Shape{2, 2, 2});
  Tensor<float> bg = Tensor<float>::full(Shape{2, 2}, 0.2f);
  fg.at(0, 0, 0) = 0.9f;
  fg.at(0, 0, 1) = 0.9f;
  fg.at(1, 1, 0) = 0.8f;
  auto lf = apex::masks_to_labelframe(fg, bg);
  EXPECT_EQ(lf.labels, (std::vector<int>{1, 1, 2, 0}));
  auto dets = apex::labelframe_to_detections(lf, {100, 200});
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[0].track_id, 100);
  EXPECT_EQ(dets[1].track_id, 200);
}

TEST(SlotsToLabels, RandomArgmaxAgainstLoopOracle) {
  RngStream rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const int K = rng.next_int(1, 4), H = 5, W = 5;
    Tensor<float> fg(Shape{K, H, W});
    Tensor<float> bg(Shape{H, W});
    for (int64_t i = 0; i < fg.numel(); ++i) fg[i] = static_cast<float>(rng.next_unit_open());
    for (int64_t i = 0; i < bg.numel(); ++i) bg[i] = static_cast<float>(rng.next_unit_open());
    auto lf = apex::masks_to_labelframe(fg, bg);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int arg = 0;
        float best = bg.at(y, x);
        for (int k = 0; k < K; ++k)
          if (fg.at(k, y, x) > best) {
            best = fg.at(k, y, x);
            arg = k + 1;
          }
        ASSERT_EQ(lf.labels[y * W + x], arg);
      }
  }
}

TEST(Hungarian, DiagonalAndBruteForce) {
  std::vector<std::vector<double>> c = {{0, 5}, {5, 0}};
  auto asg = apex::solve_assignment(c);
  EXPECT_EQ(asg[0], 0);
  EXPECT_EQ(asg[1], 1);

  RngStream rng(56);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 4;
    std::vector<std::vector<double>> cost(n, std::vector<double>(n));
    for (auto& row : cost)
      for (auto& v : row) v = rng.next_unit_open();
    auto got = apex::solve_assignment(cost);
    const double got_cost = apex::assignment_cost(cost, got);
    // brute force over all 4! permutations
    std::vector<int> perm = {0, 1, 2, 3};
    double best = 1e18;
    do {
      double c2 = 0;
      for (int i = 0; i < n; ++i) c2 += cost[i][perm[i]];
      best = std::min(best, c2);
    } while (std::next_permutation(perm.begin(), perm.end()));
    ASSERT_NEAR(got_cost, best, 1e-9);
  }
}

TEST(MetricsReport, TextRoundTripHasColumns) {
  apex::MetricsReport r;
  r.ari = 0.93;
  r.ari_fg = 0.89;
  r.has_mot = true;
  r.mot.mota = 50.5;
  const std::string s = r.to_text();
  EXPECT_NE(s.find("ARI-FG"), std::string::npos);
  EXPECT_NE(s.find("MOTA"), std::string::npos);
  EXPECT_NE(s.find("MT"), std::string::npos);
}
