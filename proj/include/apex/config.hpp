#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace apex {

// Flat key = value configuration covering dataset generation, the model, and
// training. Unknown keys are rejected; every run writes its snapshot next to
// its outputs.
struct ApexConfig {
  // dataset generation
  int data_image_size = 64;
  int data_num_objects = 3;
  int data_episode_length = 20;
  int data_episodes = 600;  // total, split 10:1:1
  bool data_arm = true;
  std::string data_motion = "static";  // static | drift
  uint64_t data_seed = 1;

  // model
  int model_feat_channels = 64;
  int model_reduced_channels = 16;
  int model_glimpse = 16;
  int model_feat_glimpse = 4;
  int model_what_dim = 32;
  int model_bg_dim = 64;
  int model_grid = 8;
  int model_slot_cap = 16;
  double model_logit_bound = 8.0;
  double model_sigma_fg = 0.1;
  double model_sigma_bg = 0.04;
  double model_filter_threshold = 0.1;
  double model_temperature = 0.5;

  // priors
  double prior_where_scale = 0.25;
  double prior_where_std = 0.5;
  double prior_pres_start = 0.1;
  double prior_pres_end = 0.01;
  double prior_pres_smooth = 0.9;
  double prior_pres_target = 0.99;

  // training
  double train_lr = 1e-4;
  int train_batch = 4;
  int64_t train_iters = 40000;
  int train_seq_len = 5;
  uint64_t train_seed = 0;
  double train_entropy_weight = 1.0;
  double train_clip_norm = 5.0;
  int train_ckpt_every = 2000;
  int train_val_every = 1000;
  int train_val_episodes = 12;
  bool train_inclusive_kl = true;
  int train_threads = 2;

  // ablations
  bool ablation_image_space_stn = false;
  bool ablation_no_entropy_loss = false;
  bool ablation_scalor_norm = false;
  bool ablation_gaussian_likelihood = false;

  // evaluation / tracking protocol
  double eval_iou_threshold = 0.5;
  double eval_mostly_fraction = 0.8;
  int eval_episodes = -1;  // -1: whole split

  // arrangement task
  double arrange_occupied_factor = 1.1;
  double arrange_grasp_slack = 0.03;
  double arrange_off_table_penalty = 1.0;
  int arrange_scenarios = 150;
  bool arrange_greedy_matching = false;

  // ---- registry ----

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("data_image_size", data_image_size);
    fn("data_num_objects", data_num_objects);
    fn("data_episode_length", data_episode_length);
    fn("data_episodes", data_episodes);
    fn("data_arm", data_arm);
    fn("data_motion", data_motion);
    fn("data_seed", data_seed);
    fn("model_feat_channels", model_feat_channels);
    fn("model_reduced_channels", model_reduced_channels);
    fn("model_glimpse", model_glimpse);
    fn("model_feat_glimpse", model_feat_glimpse);
    fn("model_what_dim", model_what_dim);
    fn("model_bg_dim", model_bg_dim);
    fn("model_grid", model_grid);
    fn("model_slot_cap", model_slot_cap);
    fn("model_logit_bound", model_logit_bound);
    fn("model_sigma_fg", model_sigma_fg);
    fn("model_sigma_bg", model_sigma_bg);
    fn("model_filter_threshold", model_filter_threshold);
    fn("model_temperature", model_temperature);
    fn("prior_where_scale", prior_where_scale);
    fn("prior_where_std", prior_where_std);
    fn("prior_pres_start", prior_pres_start);
    fn("prior_pres_end", prior_pres_end);
    fn("prior_pres_smooth", prior_pres_smooth);
    fn("prior_pres_target", prior_pres_target);
    fn("train_lr", train_lr);
    fn("train_batch", train_batch);
    fn("train_iters", train_iters);
    fn("train_seq_len", train_seq_len);
    fn("train_seed", train_seed);
    fn("train_entropy_weight", train_entropy_weight);
    fn("train_clip_norm", train_clip_norm);
    fn("train_ckpt_every", train_ckpt_every);
    fn("train_val_every", train_val_every);
    fn("train_val_episodes", train_val_episodes);
    fn("train_inclusive_kl", train_inclusive_kl);
    fn("train_threads", train_threads);
    fn("ablation_image_space_stn", ablation_image_space_stn);
    fn("ablation_no_entropy_loss", ablation_no_entropy_loss);
    fn("ablation_scalor_norm", ablation_scalor_norm);
    fn("ablation_gaussian_likelihood", ablation_gaussian_likelihood);
    fn("eval_iou_threshold", eval_iou_threshold);
    fn("eval_mostly_fraction", eval_mostly_fraction);
    fn("eval_episodes", eval_episodes);
    fn("arrange_occupied_factor", arrange_occupied_factor);
    fn("arrange_grasp_slack", arrange_grasp_slack);
    fn("arrange_off_table_penalty", arrange_off_table_penalty);
    fn("arrange_scenarios", arrange_scenarios);
    fn("arrange_greedy_matching", arrange_greedy_matching);
  }

  void set(const std::string& key, const std::string& value) {
    bool found = false;
    visit([&](const char* name, auto& field) {
      if (key != name) return;
      found = true;
      parse_into(field, value, key);
    });
    if (!found) throw std::invalid_argument("unknown config key: " + key);
  }

  std::string serialize() {
    std::ostringstream os;
    visit([&](const char* name, auto& field) { os << name << " = " << to_str(field) << "\n"; });
    return os.str();
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      lineno++;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const size_t eq = line.find('=');
      if (eq == std::string::npos) {
        if (line.find_first_not_of(" \t\r") != std::string::npos)
          throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        continue;
      }
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void save_file(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write config file: " + path);
    f << serialize();
  }

  // key=value override strings from the command line
  void apply_override(const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must be key=value, got: " + kv);
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  static void parse_into(int& f, const std::string& v, const std::string& key) {
    try { f = std::stoi(v); } catch (...) { throw std::invalid_argument("bad int for " + key); }
  }
  static void parse_into(int64_t& f, const std::string& v, const std::string& key) {
    try { f = std::stoll(v); } catch (...) { throw std::invalid_argument("bad int for " + key); }
  }
  static void parse_into(uint64_t& f, const std::string& v, const std::string& key) {
    try { f = std::stoull(v); } catch (...) { throw std::invalid_argument("bad int for " + key); }
  }
  static void parse_into(double& f, const std::string& v, const std::string& key) {
    try { f = std::stod(v); } catch (...) { throw std::invalid_argument("bad number for " + key); }
  }
  static void parse_into(bool& f, const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") f = true;
    else if (v == "false" || v == "0") f = false;
    else throw std::invalid_argument("bad bool for " + key + " (use true/false)");
  }
  static void parse_into(std::string& f, const std::string& v, const std::string&) { f = v; }

  static std::string to_str(int v) { return std::to_string(v); }
  static std::string to_str(int64_t v) { return std::to_string(v); }
  static std::string to_str(uint64_t v) { return std::to_string(v); }
  static std::string to_str(bool v) { return v ? "true" : "false"; }
  static std::string to_str(const std::string& v) { return v; }
  static std::string to_str(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
};

}  // namespace apex
