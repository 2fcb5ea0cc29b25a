#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "apex/hungarian.hpp"
#include "apex/tensor.hpp"

// Segmentation metrics (ARI, MSC and foreground-only variants) and
// MOT16-protocol tracking metrics over mask IoU matching.

namespace apex {

struct LabelFrame {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // row-major [H*W]; ground-truth side uses 0 = background

  // optional per-label foreground flags (index = label). Empty means the
  // ground-truth convention: label != 0 is foreground.
  std::vector<uint8_t> fg_flags;

  bool is_fg(int label) const {
    if (fg_flags.empty()) return label != 0;
    return label >= 0 && label < static_cast<int>(fg_flags.size()) && fg_flags[label];
  }
};

struct Detection {
  int64_t track_id = -1;
  std::vector<uint8_t> mask;  // [H*W] binary
};

struct TrackSet {
  int height = 0;
  int width = 0;
  std::vector<std::vector<Detection>> frames;
};

// ---- ARI ----

inline double ari(const LabelFrame& pred, const LabelFrame& gt, bool fg_only) {
  if (pred.labels.size() != gt.labels.size())
    throw std::invalid_argument("ari: frame size mismatch");
  std::map<int, int64_t> ca, cb;
  std::map<std::pair<int, int>, int64_t> joint;
  int64_t n = 0;
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    if (fg_only && !gt.is_fg(gt.labels[i])) continue;
    ca[pred.labels[i]]++;
    cb[gt.labels[i]]++;
    joint[{pred.labels[i], gt.labels[i]}]++;
    n++;
  }
  if (n < 2) return 1.0;
  auto comb2 = [](int64_t m) -> double { return 0.5 * static_cast<double>(m) * (m - 1); };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (auto& [k, v] : joint) sum_ij += comb2(v);
  for (auto& [k, v] : ca) sum_a += comb2(v);
  for (auto& [k, v] : cb) sum_b += comb2(v);
  const double expected = sum_a * sum_b / comb2(n);
  const double maximum = 0.5 * (sum_a + sum_b);
  if (maximum == expected) return 1.0;  // degenerate: both partitions trivial
  return (sum_ij - expected) / (maximum - expected);
}

// ---- MSC ----

// size-weighted best-IoU covering of ground-truth segments; nullopt when
// fg_only finds no foreground segment (frame reported as skipped). fg_only
// restricts the whole computation to pixels whose gt label is foreground.
inline std::optional<double> msc(const LabelFrame& pred, const LabelFrame& gt, bool fg_only) {
  if (pred.labels.size() != gt.labels.size())
    throw std::invalid_argument("msc: frame size mismatch");
  std::vector<int> p, g;
  p.reserve(gt.labels.size());
  g.reserve(gt.labels.size());
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    if (fg_only && !gt.is_fg(gt.labels[i])) continue;
    p.push_back(pred.labels[i]);
    g.push_back(gt.labels[i]);
  }
  if (g.empty()) return std::nullopt;
  std::map<int, int64_t> gt_sizes;
  for (int l : g) gt_sizes[l]++;
  std::set<int> pred_ids(p.begin(), p.end());
  double total = 0;
  int64_t weight = 0;
  for (auto& [gid, gsize] : gt_sizes) {
    double best = 0;
    for (int pid : pred_ids) {
      int64_t inter = 0, uni = 0;
      for (size_t i = 0; i < g.size(); ++i) {
        const bool ing = g[i] == gid;
        const bool inp = p[i] == pid;
        if (ing && inp) inter++;
        if (ing || inp) uni++;
      }
      if (uni > 0) best = std::max(best, static_cast<double>(inter) / uni);
    }
    total += static_cast<double>(gsize) * best;
    weight += gsize;
  }
  return total / weight;
}

// ---- MOT16-protocol tracking ----

struct MotConfig {
  double iou_threshold = 0.5;
  double mostly_fraction = 0.8;  // MD / MT lifetime fraction
};

struct MotMetrics {
  double mota = 0;          // x100
  double motp = 0;          // x100, mean IoU of matches
  double match = 0;         // % of gt detections matched
  double id_switches = 0;   // % of gt detections
  double fps = 0;           // % of gt detections
  double miss = 0;          // % of gt detections
  double md = 0;            // % of gt tracks mostly detected
  double mt = 0;            // % of gt tracks mostly tracked (consistent id)
  int64_t raw_id_switches = 0;
  int64_t raw_misses = 0;
  int64_t raw_false_positives = 0;
  int64_t raw_matches = 0;
  int64_t total_gt = 0;
};

inline double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] != 0, ib = b[i] != 0;
    if (ia && ib) inter++;
    if (ia || ib) uni++;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

// Per-frame IoU matching with persistence preference: matches from the
// previous frame are kept while still above the threshold, remaining pairs get
// an optimal assignment. Identity switches follow the MOT16 convention of
// comparing against a track's last matched id, across gaps.
inline MotMetrics mot_evaluate(const TrackSet& pred, const TrackSet& gt,
                               const MotConfig& cfg = {}) {
  if (pred.frames.size() != gt.frames.size())
    throw std::invalid_argument("mot_evaluate: frame count mismatch");
  int64_t total_gt = 0;
  for (const auto& f : gt.frames) total_gt += static_cast<int64_t>(f.size());
  if (total_gt == 0) throw std::invalid_argument("mot_evaluate: empty ground truth");

  int64_t misses = 0, false_positives = 0, id_switches = 0, matches = 0;
  double iou_sum = 0;
  std::map<int64_t, int64_t> active_match;  // gt id -> pred id matched in previous frame
  std::map<int64_t, int64_t> last_match;    // gt id -> last pred id ever matched
  std::map<int64_t, int64_t> gt_lifetime, gt_detected;
  std::map<int64_t, std::map<int64_t, int64_t>> gt_id_counts;

  for (size_t t = 0; t < gt.frames.size(); ++t) {
    const auto& gts = gt.frames[t];
    const auto& prs = pred.frames[t];
    const int ng = static_cast<int>(gts.size());
    const int np = static_cast<int>(prs.size());
    std::vector<std::vector<double>> iou(ng, std::vector<double>(np, 0));
    for (int i = 0; i < ng; ++i)
      for (int j = 0; j < np; ++j) iou[i][j] = mask_iou(gts[i].mask, prs[j].mask);

    std::vector<int> gt_to_pred(ng, -1);
    std::vector<char> pred_used(np, 0);

    // persistence: keep previous pairs still above threshold
    for (int i = 0; i < ng; ++i) {
      auto it = active_match.find(gts[i].track_id);
      if (it == active_match.end()) continue;
      for (int j = 0; j < np; ++j) {
        if (!pred_used[j] && prs[j].track_id == it->second && iou[i][j] > cfg.iou_threshold) {
          gt_to_pred[i] = j;
          pred_used[j] = 1;
          break;
        }
      }
    }

    // optimal assignment on the remainder
    std::vector<int> free_g, free_p;
    for (int i = 0; i < ng; ++i)
      if (gt_to_pred[i] < 0) free_g.push_back(i);
    for (int j = 0; j < np; ++j)
      if (!pred_used[j]) free_p.push_back(j);
    if (!free_g.empty() && !free_p.empty()) {
      std::vector<std::vector<double>> cost(free_g.size(),
                                            std::vector<double>(free_p.size(), 2.0));
      for (size_t a = 0; a < free_g.size(); ++a)
        for (size_t b = 0; b < free_p.size(); ++b) {
          const double v = iou[free_g[a]][free_p[b]];
          if (v > cfg.iou_threshold) cost[a][b] = 1.0 - v;
        }
      std::vector<int> asg = solve_assignment(cost);
      for (size_t a = 0; a < free_g.size(); ++a) {
        if (asg[a] < 0) continue;
        if (cost[a][asg[a]] >= 1.999) continue;  // below threshold, not a match
        gt_to_pred[free_g[a]] = free_p[asg[a]];
        pred_used[free_p[asg[a]]] = 1;
      }
    }

    active_match.clear();
    for (int i = 0; i < ng; ++i) {
      const int64_t gid = gts[i].track_id;
      gt_lifetime[gid]++;
      if (gt_to_pred[i] < 0) {
        misses++;
        continue;
      }
      const int64_t pid = prs[gt_to_pred[i]].track_id;
      matches++;
      iou_sum += iou[i][gt_to_pred[i]];
      gt_detected[gid]++;
      gt_id_counts[gid][pid]++;
      auto lit = last_match.find(gid);
      if (lit != last_match.end() && lit->second != pid) id_switches++;
      last_match[gid] = pid;
      active_match[gid] = pid;
    }
    for (int j = 0; j < np; ++j)
      if (!pred_used[j]) false_positives++;
  }

  MotMetrics m;
  m.total_gt = total_gt;
  m.raw_id_switches = id_switches;
  m.raw_misses = misses;
  m.raw_false_positives = false_positives;
  m.raw_matches = matches;
  m.mota = 100.0 * (1.0 - static_cast<double>(misses + false_positives + id_switches) / total_gt);
  m.motp = matches > 0 ? 100.0 * iou_sum / matches : 0.0;
  m.match = 100.0 * matches / total_gt;
  m.id_switches = 100.0 * id_switches / total_gt;
  m.fps = 100.0 * false_positives / total_gt;
  m.miss = 100.0 * misses / total_gt;

  int64_t n_tracks = 0, n_md = 0, n_mt = 0;
  for (auto& [gid, life] : gt_lifetime) {
    n_tracks++;
    const double det = static_cast<double>(gt_detected[gid]);
    if (det / life >= cfg.mostly_fraction) n_md++;
    int64_t best_id = 0;
    for (auto& [pid, cnt] : gt_id_counts[gid]) best_id = std::max(best_id, cnt);
    if (static_cast<double>(best_id) / life >= cfg.mostly_fraction) n_mt++;
  }
  m.md = n_tracks > 0 ? 100.0 * n_md / n_tracks : 0.0;
  m.mt = n_tracks > 0 ? 100.0 * n_mt / n_tracks : 0.0;
  return m;
}

// ---- slot outputs -> label frames / detections ----

// pixel label = argmax over [fg_masks..., bg]; slot k labels pixels with k+1
template <typename T>
LabelFrame masks_to_labelframe(const Tensor<T>& fg_masks, const Tensor<T>& bg_mask) {
  const int K = fg_masks.shape[0], H = fg_masks.shape[1], W = fg_masks.shape[2];
  LabelFrame lf;
  lf.height = H;
  lf.width = W;
  lf.labels.assign(static_cast<size_t>(H) * W, 0);
  for (int64_t m = 0; m < static_cast<int64_t>(H) * W; ++m) {
    T best = bg_mask[m];
    int arg = 0;
    for (int k = 0; k < K; ++k) {
      const T v = fg_masks[k * H * W + m];
      if (v > best) {
        best = v;
        arg = k + 1;
      }
    }
    lf.labels[m] = arg;
  }
  return lf;
}

// per-slot binary masks from the argmax labelling; empty slots emit nothing
inline std::vector<Detection> labelframe_to_detections(const LabelFrame& lf,
                                                       const std::vector<int64_t>& slot_ids) {
  std::vector<Detection> out;
  for (size_t k = 0; k < slot_ids.size(); ++k) {
    Detection d;
    d.track_id = slot_ids[k];
    d.mask.assign(lf.labels.size(), 0);
    bool any = false;
    for (size_t i = 0; i < lf.labels.size(); ++i)
      if (lf.labels[i] == static_cast<int>(k) + 1) {
        d.mask[i] = 1;
        any = true;
      }
    if (any) out.push_back(std::move(d));
  }
  return out;
}

// ---- aggregated report ----

struct MetricsReport {
  double ari = 0, ari_fg = 0, msc = 0, msc_fg = 0;
  int64_t frames = 0;
  int64_t skipped_fg_frames = 0;
  MotMetrics mot;
  bool has_mot = false;

  std::string to_text() const {
    char buf[768];
    std::snprintf(buf, sizeof(buf),
                  "# segmentation (means over frames)\n"
                  "ARI-FG  %.4f\nMSC-FG  %.4f\nARI     %.4f\nMSC     %.4f\n"
                  "frames  %lld\nskipped_fg_frames %lld\n",
                  ari_fg, msc_fg, ari, msc, static_cast<long long>(frames),
                  static_cast<long long>(skipped_fg_frames));
    std::string s(buf);
    if (has_mot) {
      std::snprintf(buf, sizeof(buf),
                    "# tracking (MOT16 protocol, percentages)\n"
                    "MOTA    %.2f\nMOTP    %.2f\nMatch   %.2f\nID_S    %.3f\n"
                    "FPs     %.2f\nMiss    %.2f\nMD      %.2f\nMT      %.2f\n",
                    mot.mota, mot.motp, mot.match, mot.id_switches, mot.fps, mot.miss, mot.md,
                    mot.mt);
      s += buf;
    }
    return s;
  }
};

}  // namespace apex
