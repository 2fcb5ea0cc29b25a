#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <nlohmann/json.hpp>

#include "apex/apex_net.hpp"
#include "apex/checkpoint.hpp"
#include "apex/config.hpp"
#include "apex/data_synth.hpp"
#include "apex/eval_metrics.hpp"

// Objective assembly (negative ELBO plus the mask entropy loss), the training
// loop with checkpointing and validation, and checkpoint evaluation.

namespace apex {

struct TrainRecord {
  int64_t iteration = 0;
  double total_loss = 0;
  double nll = 0;
  double kl_pres = 0, kl_where = 0, kl_what = 0, kl_bg = 0;
  double entropy_loss = 0;
  double wall_time = 0;

  nlohmann::json to_json() const {
    return {{"iteration", iteration}, {"total_loss", total_loss}, {"nll", nll},
            {"kl_pres", kl_pres},     {"kl_where", kl_where},     {"kl_what", kl_what},
            {"kl_bg", kl_bg},         {"entropy_loss", entropy_loss}, {"wall_time", wall_time}};
  }
};

struct TrainDivergence : std::runtime_error {
  explicit TrainDivergence(const std::string& what) : std::runtime_error(what) {}
};

template <typename T>
struct ObjectiveTerms {
  double total = 0, nll = 0, kl_pres = 0, kl_where = 0, kl_what = 0, kl_bg = 0, entropy = 0;
};

template <typename T>
StepFlags train_step_flags(const ApexConfig& cfg, double discovery_prior, bool train) {
  StepFlags f;
  f.train = train;
  f.hard_presence = !train;
  f.discovery_prior = discovery_prior;
  f.image_space_stn = cfg.ablation_image_space_stn;
  f.gaussian_likelihood = cfg.ablation_gaussian_likelihood;
  return f;
}

// Loss over one episode subsequence. When grads_out is non-null, runs backward
// and accumulates leaf gradients into it (indexed like the parameter store).
template <typename T>
ObjectiveTerms<T> episode_objective(ApexNet<T>& net, const ApexConfig& cfg,
                                    const VideoEpisode& ep, int t0, int len, uint64_t noise_seed,
                                    double discovery_prior,
                                    std::vector<Tensor<T>>* grads_out,
                                    std::vector<std::string>* diag = nullptr) {
  Graph<T> g(grads_out != nullptr);
  ParamCtx<T> ctx(g, net.params(), grads_out != nullptr);
  SceneState<T> state = net.initial_state(g);
  RngStream rng(mix_seed(noise_seed, 0x51e9u));
  StepFlags flags = train_step_flags<T>(cfg, discovery_prior, /*train=*/true);

  Var total, nll_sum, klp_sum, klw_sum, kla_sum, klb_sum, ent_sum;
  auto acc = [&g](Var& dst, Var v) { dst = dst.valid() ? g.add(dst, v) : v; };
  for (int t = t0; t < t0 + len; ++t) {
    StepOutputs<T> so = net.step(ctx, state, ep.frame_chw<T>(t), flags, rng, diag);
    acc(nll_sum, g.neg(so.loglik));
    acc(klp_sum, so.kl_pres);
    acc(klw_sum, so.kl_where);
    acc(kla_sum, so.kl_what);
    acc(klb_sum, so.kl_bg);
    acc(ent_sum, so.entropy);
  }
  total = g.add(g.add(g.add(nll_sum, klp_sum), g.add(klw_sum, kla_sum)), klb_sum);
  if (!cfg.ablation_no_entropy_loss)
    total = g.add(total, g.mul_scalar(ent_sum, T(cfg.train_entropy_weight)));

  ObjectiveTerms<T> terms;
  terms.total = g.val(total)[0];
  terms.nll = g.val(nll_sum)[0];
  terms.kl_pres = g.val(klp_sum)[0];
  terms.kl_where = g.val(klw_sum)[0];
  terms.kl_what = g.val(kla_sum)[0];
  terms.kl_bg = g.val(klb_sum)[0];
  terms.entropy = g.val(ent_sum)[0];

  if (grads_out) {
    g.backward(total);
    ctx.harvest_to(*grads_out);
  }
  return terms;
}

// ---- evaluation ----

struct EpisodeEval {
  std::vector<LabelFrame> pred_frames;
  std::vector<LabelFrame> gt_frames;
  TrackSet pred_tracks;
  TrackSet gt_tracks;
  std::vector<Tensor<float>> recon;              // [3,H,W] per frame (optional)
  std::vector<std::vector<int64_t>> frame_slot_ids;  // ids aligned with fg mask rows
};

inline TrackSet gt_track_set(const VideoEpisode& ep) {
  TrackSet ts;
  ts.height = ep.height();
  ts.width = ep.width();
  const int T = ep.length(), H = ep.height(), W = ep.width();
  for (int t = 0; t < T; ++t) {
    std::vector<Detection> dets;
    for (auto& [label, id] : ep.gt_track_ids[t]) {
      Detection d;
      d.track_id = id;
      d.mask.assign(static_cast<size_t>(H) * W, 0);
      bool any = false;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (ep.gt_masks.at(t, y, x) == label) {
            d.mask[static_cast<size_t>(y) * W + x] = 1;
            any = true;
          }
      if (any) dets.push_back(std::move(d));
    }
    ts.frames.push_back(std::move(dets));
  }
  return ts;
}

inline LabelFrame gt_label_frame(const VideoEpisode& ep, int t) {
  LabelFrame lf;
  lf.height = ep.height();
  lf.width = ep.width();
  lf.labels.resize(static_cast<size_t>(lf.height) * lf.width);
  for (int y = 0; y < lf.height; ++y)
    for (int x = 0; x < lf.width; ++x)
      lf.labels[static_cast<size_t>(y) * lf.width + x] = ep.gt_masks.at(t, y, x);
  return lf;
}

// deterministic inference over a full episode; a fresh graph per frame keeps
// memory flat on long sequences
template <typename T>
EpisodeEval run_episode_inference(ApexNet<T>& net, const ApexConfig& cfg, const VideoEpisode& ep,
                                  double discovery_prior, bool collect_recon = false) {
  EpisodeEval out;
  out.pred_tracks.height = out.gt_tracks.height = ep.height();
  out.pred_tracks.width = out.gt_tracks.width = ep.width();
  StepFlags flags = train_step_flags<T>(cfg, discovery_prior, /*train=*/false);
  RngStream rng(1);  // unused in deterministic mode

  auto graph = std::make_unique<Graph<T>>(false);
  SceneState<T> state = net.initial_state(*graph);
  for (int t = 0; t < ep.length(); ++t) {
    ParamCtx<T> ctx(*graph, net.params(), false);
    StepOutputs<T> so = net.step(ctx, state, ep.frame_chw<T>(t), flags, rng);
    LabelFrame lf = masks_to_labelframe(so.fg_masks, so.bg_mask);
    out.pred_tracks.frames.push_back(labelframe_to_detections(lf, so.slot_ids));
    out.pred_frames.push_back(std::move(lf));
    out.frame_slot_ids.push_back(so.slot_ids);
    if (collect_recon) {
      Tensor<float> rc(so.recon.shape);
      for (int64_t i = 0; i < rc.numel(); ++i) rc[i] = static_cast<float>(so.recon[i]);
      out.recon.push_back(std::move(rc));
    }
    // migrate carried state into a fresh graph, drop the old tape
    auto next = std::make_unique<Graph<T>>(false);
    state.reanchor(*graph, *next);
    graph = std::move(next);
  }
  out.gt_tracks = gt_track_set(ep);
  for (int t = 0; t < ep.length(); ++t) out.gt_frames.push_back(gt_label_frame(ep, t));
  return out;
}

// per-frame fresh ids: the no-tracking control
inline TrackSet with_fresh_ids(const TrackSet& ts) {
  TrackSet out = ts;
  int64_t next = 1;
  for (auto& frame : out.frames)
    for (auto& d : frame) d.track_id = next++;
  return out;
}

struct SplitEvaluation {
  MetricsReport report;
  MetricsReport fresh_id_baseline;  // MOT columns only
};

// aggregates MOT raw counts across episodes, then converts to percentages
inline MotMetrics aggregate_mot(const std::vector<MotMetrics>& per_episode) {
  MotMetrics m;
  double iou_weighted = 0;
  int64_t tracks_scale = 0;
  double md_acc = 0, mt_acc = 0;
  for (const auto& e : per_episode) {
    m.total_gt += e.total_gt;
    m.raw_id_switches += e.raw_id_switches;
    m.raw_misses += e.raw_misses;
    m.raw_false_positives += e.raw_false_positives;
    m.raw_matches += e.raw_matches;
    iou_weighted += e.motp * e.raw_matches;
    md_acc += e.md;
    mt_acc += e.mt;
    tracks_scale++;
  }
  if (m.total_gt > 0) {
    m.mota = 100.0 * (1.0 - static_cast<double>(m.raw_misses + m.raw_false_positives +
                                                m.raw_id_switches) /
                                m.total_gt);
    m.match = 100.0 * m.raw_matches / m.total_gt;
    m.id_switches = 100.0 * m.raw_id_switches / m.total_gt;
    m.fps = 100.0 * m.raw_false_positives / m.total_gt;
    m.miss = 100.0 * m.raw_misses / m.total_gt;
  }
  m.motp = m.raw_matches > 0 ? iou_weighted / m.raw_matches : 0.0;
  m.md = tracks_scale > 0 ? md_acc / tracks_scale : 0.0;
  m.mt = tracks_scale > 0 ? mt_acc / tracks_scale : 0.0;
  return m;
}

template <typename T>
SplitEvaluation evaluate_split(ApexNet<T>& net, const ApexConfig& cfg,
                               const std::vector<VideoEpisode>& episodes,
                               double discovery_prior) {
  const int n = static_cast<int>(episodes.size());
  std::vector<EpisodeEval> evals(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(cfg.train_threads)
#endif
  for (int i = 0; i < n; ++i)
    evals[i] = run_episode_inference(net, cfg, episodes[i], discovery_prior);

  MotConfig mc;
  mc.iou_threshold = cfg.eval_iou_threshold;
  mc.mostly_fraction = cfg.eval_mostly_fraction;

  SplitEvaluation out;
  double ari_sum = 0, arifg_sum = 0, msc_sum = 0, mscfg_sum = 0;
  int64_t frames = 0, fg_frames = 0, skipped = 0;
  std::vector<MotMetrics> mot, mot_baseline;
  for (int i = 0; i < n; ++i) {
    const auto& ev = evals[i];
    for (size_t t = 0; t < ev.pred_frames.size(); ++t) {
      ari_sum += ari(ev.pred_frames[t], ev.gt_frames[t], false);
      arifg_sum += ari(ev.pred_frames[t], ev.gt_frames[t], true);
      if (auto v = msc(ev.pred_frames[t], ev.gt_frames[t], false)) msc_sum += *v;
      if (auto v = msc(ev.pred_frames[t], ev.gt_frames[t], true)) {
        mscfg_sum += *v;
        fg_frames++;
      } else {
        skipped++;
      }
      frames++;
    }
    mot.push_back(mot_evaluate(ev.pred_tracks, ev.gt_tracks, mc));
    mot_baseline.push_back(mot_evaluate(with_fresh_ids(ev.pred_tracks), ev.gt_tracks, mc));
  }
  out.report.frames = frames;
  out.report.skipped_fg_frames = skipped;
  out.report.ari = frames ? ari_sum / frames : 0;
  out.report.ari_fg = frames ? arifg_sum / frames : 0;
  out.report.msc = frames ? msc_sum / frames : 0;
  out.report.msc_fg = fg_frames ? mscfg_sum / fg_frames : 0;
  out.report.mot = aggregate_mot(mot);
  out.report.has_mot = true;
  out.fresh_id_baseline.mot = aggregate_mot(mot_baseline);
  out.fresh_id_baseline.has_mot = true;
  return out;
}

// ---- training loop ----

struct TrainResult {
  std::string final_checkpoint;
  std::vector<TrainRecord> records;
};

template <typename T>
class Trainer {
 public:
  Trainer(ApexConfig cfg, std::string out_dir)
      : cfg_(cfg), out_dir_(std::move(out_dir)),
        net_(ModelConfig::from(cfg), cfg.train_seed), priors_(net_.priors(cfg)) {
    net_.set_presence_prior_schedule(cfg.prior_pres_smooth, cfg.prior_pres_target);
    std::filesystem::create_directories(out_dir_);
  }

  ApexNet<T>& net() { return net_; }
  const ApexConfig& config() const { return cfg_; }

  void resume(const std::string& ckpt_path) {
    CheckpointMeta meta = load_checkpoint(ckpt_path, net_.params());
    start_iter_ = meta.iteration;
    adam_t_ = meta.adam_steps;
  }

  // one optimisation step over a derived batch; returns the record
  TrainRecord step(int64_t iter, const std::vector<VideoEpisode>& train_eps) {
    const auto tic = std::chrono::steady_clock::now();
    const int B = cfg_.train_batch;
    const double dp = priors_.discovery_prior_at(iter, cfg_.train_iters);
    const int n = static_cast<int>(train_eps.size());

    struct Item {
      int ep = 0;
      int t0 = 0;
      ObjectiveTerms<T> terms;
      std::vector<Tensor<T>> grads;
      std::string error;
    };
    std::vector<Item> items(B);
    for (int b = 0; b < B; ++b) {
      RngStream pick(mix_seed(cfg_.train_seed, static_cast<uint64_t>(iter) * 977 + b));
      items[b].ep = static_cast<int>(pick.next_below(n));
      const int T_len = train_eps[items[b].ep].length();
      const int span = std::max(1, T_len - cfg_.train_seq_len + 1);
      items[b].t0 = static_cast<int>(pick.next_below(span));
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(cfg_.train_threads)
#endif
    for (int b = 0; b < B; ++b) {
      try {
        items[b].terms = episode_objective(
            net_, cfg_, train_eps[items[b].ep], items[b].t0,
            std::min(cfg_.train_seq_len, train_eps[items[b].ep].length()),
            mix_seed(cfg_.train_seed, static_cast<uint64_t>(iter), b), dp, &items[b].grads);
      } catch (const std::exception& e) {
        items[b].error = e.what();
      }
    }
    TrainRecord rec;
    rec.iteration = iter;
    std::string bad;
    for (int b = 0; b < B; ++b) {
      if (!items[b].error.empty())
        throw TrainDivergence("step " + std::to_string(iter) + " failed on episode " +
                              std::to_string(items[b].ep) + ": " + items[b].error);
      if (!std::isfinite(items[b].terms.total))
        bad += (bad.empty() ? "" : ", ") + std::to_string(items[b].ep) + "@t" +
               std::to_string(items[b].t0);
      rec.total_loss += items[b].terms.total / B;
      rec.nll += items[b].terms.nll / B;
      rec.kl_pres += items[b].terms.kl_pres / B;
      rec.kl_where += items[b].terms.kl_where / B;
      rec.kl_what += items[b].terms.kl_what / B;
      rec.kl_bg += items[b].terms.kl_bg / B;
      rec.entropy_loss += items[b].terms.entropy / B;
    }
    if (!bad.empty())
      throw TrainDivergence("non-finite loss at iteration " + std::to_string(iter) +
                            ", batch episodes: " + bad);
    // deterministic merge order
    auto& ps = net_.params();
    ps.zero_grad();
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < ps.size(); ++p) {
        if (items[b].grads[p].numel() == 0) continue;
        Tensor<T>& dst = ps[p].grad;
        const Tensor<T>& src = items[b].grads[p];
        const T scale = T(1) / T(B);
        for (int64_t k = 0; k < src.numel(); ++k) dst[k] += scale * src[k];
      }
    ps.adam_step(cfg_.train_lr, ++adam_t_, cfg_.train_clip_norm);
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - tic).count();
    return rec;
  }

  TrainResult train(const std::vector<VideoEpisode>& train_eps,
                    const std::vector<VideoEpisode>& val_eps,
                    const std::function<void(const TrainRecord&)>& on_record = nullptr) {
    if (train_eps.empty()) throw std::invalid_argument("train: empty training set");
    std::ofstream log(std::filesystem::path(out_dir_) / "training_log.jsonl", std::ios::app);
    TrainResult result;
    for (int64_t iter = start_iter_ + 1; iter <= cfg_.train_iters; ++iter) {
      TrainRecord rec = step(iter, train_eps);
      log << rec.to_json().dump() << "\n";
      if (on_record) on_record(rec);
      result.records.push_back(rec);
      if (cfg_.train_val_every > 0 && iter % cfg_.train_val_every == 0 && !val_eps.empty()) {
        std::vector<VideoEpisode> subset(
            val_eps.begin(),
            val_eps.begin() + std::min<size_t>(val_eps.size(), cfg_.train_val_episodes));
        SplitEvaluation ev = evaluate_split(net_, cfg_, subset,
                                            priors_.discovery_prior_at(iter, cfg_.train_iters));
        nlohmann::json j = {{"iteration", iter},
                            {"val_ari", ev.report.ari},
                            {"val_ari_fg", ev.report.ari_fg},
                            {"val_mota", ev.report.mot.mota}};
        log << j.dump() << "\n";
        log.flush();
      }
      if (cfg_.train_ckpt_every > 0 && iter % cfg_.train_ckpt_every == 0) save_at(iter, false);
    }
    result.final_checkpoint = save_at(cfg_.train_iters, true);
    return result;
  }

  std::string save_at(int64_t iter, bool final_tag) {
    char name[64];
    if (final_tag)
      std::snprintf(name, sizeof(name), "checkpoint_final.ckpt");
    else
      std::snprintf(name, sizeof(name), "checkpoint_%06lld.ckpt", static_cast<long long>(iter));
    const std::string path = (std::filesystem::path(out_dir_) / name).string();
    save_checkpoint(path, cfg_, net_.params(), iter, adam_t_);
    return path;
  }

  double discovery_prior_now(int64_t iter) const {
    return priors_.discovery_prior_at(iter, cfg_.train_iters);
  }

 private:
  ApexConfig cfg_;
  std::string out_dir_;
  ApexNet<T> net_;
  PriorSet priors_;
  int64_t start_iter_ = 0;
  int64_t adam_t_ = 0;
};

// load a checkpoint and evaluate one split; writes report.txt into out_dir
inline SplitEvaluation evaluate_checkpoint(const std::string& ckpt_path,
                                           const std::string& dataset_root,
                                           const std::string& split, const std::string& out_dir,
                                           int limit_episodes = -1) {
  CheckpointMeta meta = read_checkpoint_meta(ckpt_path);
  ApexConfig cfg = meta.config;
  ApexNet<float> net(ModelConfig::from(cfg), cfg.train_seed);
  load_checkpoint(ckpt_path, net.params());
  net.set_presence_prior_schedule(cfg.prior_pres_smooth, cfg.prior_pres_target);
  const int limit = limit_episodes >= 0 ? limit_episodes : cfg.eval_episodes;
  std::vector<VideoEpisode> eps = read_dataset(dataset_root, split, limit);
  if (eps.empty()) throw std::runtime_error("evaluate: empty split " + split);
  PriorSet priors = net.priors(cfg);
  SplitEvaluation ev =
      evaluate_split(net, cfg, eps, priors.discovery_prior_at(meta.iteration, cfg.train_iters));
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream f(std::filesystem::path(out_dir) / ("report_" + split + ".txt"));
    f << ev.report.to_text();
    f << "# no-tracking baseline (fresh ids per frame)\n";
    f << "baseline_MOTA " << ev.fresh_id_baseline.mot.mota << "\n";
  }
  return ev;
}

}  // namespace apex
