#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "apex/graph.hpp"
#include "apex/rng.hpp"
#include "apex/tensor.hpp"

// Latent-variable toolkit: diagonal Gaussians with reparameterised sampling,
// relaxed Bernoulli (Gumbel-Softmax) presence variables, exclusive / inclusive
// KL divergences, and the prior schedules.

namespace apex {

inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kProbClamp = 1e-6;
inline constexpr double kDefaultGumbelTemperature = 0.5;

struct DiagonalGaussian {
  std::vector<double> mean;
  std::vector<double> log_std;

  DiagonalGaussian() = default;
  DiagonalGaussian(std::vector<double> m, std::vector<double> ls)
      : mean(std::move(m)), log_std(std::move(ls)) {
    if (mean.size() != log_std.size())
      throw std::invalid_argument("DiagonalGaussian: dim mismatch");
  }
  static DiagonalGaussian standard(int dim) {
    return DiagonalGaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0));
  }
  size_t dim() const { return mean.size(); }
};

struct RelaxedBernoulli {
  double logit = 0.0;
  double temperature = kDefaultGumbelTemperature;
};

inline double clamped_log_std(double ls) { return std::min(kLogStdMax, std::max(kLogStdMin, ls)); }

inline double clamp_prob(double p) {
  return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}

// mean + exp(log_std) * noise
inline std::vector<double> sample_gaussian(const DiagonalGaussian& q,
                                           const std::vector<double>& noise) {
  if (noise.size() != q.dim()) throw std::invalid_argument("sample_gaussian: noise dim mismatch");
  std::vector<double> out(q.dim());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = q.mean[i] + std::exp(clamped_log_std(q.log_std[i])) * noise[i];
  return out;
}

// sigmoid((logit + log u - log(1-u)) / temperature); optional hard threshold
inline double sample_bernoulli_gumbel(const RelaxedBernoulli& q, double u, bool hard = false) {
  if (!(q.temperature > 0)) throw std::invalid_argument("gumbel: temperature must be positive");
  const double noise = std::log(u) - std::log1p(-u);
  const double y = 1.0 / (1.0 + std::exp(-(q.logit + noise) / q.temperature));
  if (hard) return y > 0.5 ? 1.0 : 0.0;
  return y;
}

// KL(q || p), closed form, summed over dimensions
inline double kl_gaussian_exclusive(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  if (q.dim() != p.dim()) throw std::invalid_argument("kl_gaussian: dim mismatch");
  double kl = 0;
  for (size_t i = 0; i < q.dim(); ++i) {
    const double lq = clamped_log_std(q.log_std[i]);
    const double lp = clamped_log_std(p.log_std[i]);
    const double vr = std::exp(2 * (lq - lp));
    const double d = (q.mean[i] - p.mean[i]) / std::exp(lp);
    kl += 0.5 * (vr + d * d - 1.0) + (lp - lq);
  }
  return kl;
}

// KL(p || q): same closed form with the arguments swapped
inline double kl_gaussian_inclusive(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  return kl_gaussian_exclusive(p, q);
}

inline double kl_bernoulli(double q_prob, double p_prob) {
  const double q = clamp_prob(q_prob);
  const double p = clamp_prob(p_prob);
  return q * std::log(q / p) + (1.0 - q) * std::log((1.0 - q) / (1.0 - p));
}

// Prior parameterisation. Presence priors follow schedules: discovery anneals
// towards a small probability over training, propagation smooths the previous
// presence value towards a persistence target.
struct PriorSet {
  DiagonalGaussian what_prior;
  DiagonalGaussian where_prior;
  DiagonalGaussian bg_prior;
  double pres_discovery_start = 0.1;
  double pres_discovery_end = 0.01;
  double pres_propagation_smooth = 0.9;   // weight on the previous value
  double pres_propagation_target = 0.99;  // persistence target

  // geometric interpolation start -> end over [0, anneal_iters]
  double discovery_prior_at(int64_t iter, int64_t anneal_iters) const {
    if (anneal_iters <= 0) return pres_discovery_end;
    const double f = std::min(1.0, std::max(0.0, static_cast<double>(iter) / anneal_iters));
    return pres_discovery_start * std::pow(pres_discovery_end / pres_discovery_start, f);
  }

  double propagation_prior(double prev_pres) const {
    const double p =
        pres_propagation_smooth * prev_pres + (1.0 - pres_propagation_smooth) * pres_propagation_target;
    return clamp_prob(p);
  }
};

// ---- graph builders (rowwise over N slots) ----

// mean:[N,D] + exp(clamp(log_std)) * noise
template <typename T>
Var gauss_sample(Graph<T>& g, Var mean, Var log_std, Var noise) {
  Var std = g.exp_(g.clamp(log_std, T(kLogStdMin), T(kLogStdMax)));
  return g.add(mean, g.mul(std, noise));
}

// KL(q||p) per row -> [N]; prior given as tensors broadcast to [N,D] by the caller
template <typename T>
Var gauss_kl_exclusive_rows(Graph<T>& g, Var q_mean, Var q_log_std, const Tensor<T>& p_mean,
                            const Tensor<T>& p_log_std) {
  Var lq = g.clamp(q_log_std, T(kLogStdMin), T(kLogStdMax));
  Var pm = g.constant(p_mean);
  Var lp = g.constant(p_log_std);
  Var diff_ls = g.sub(lq, lp);
  Var vr = g.exp_(g.mul_scalar(diff_ls, T(2)));
  Var d = g.mul(g.sub(q_mean, pm), g.exp_(g.neg(lp)));
  Var per_dim = g.sub(g.mul_scalar(g.add_scalar(g.add(vr, g.mul(d, d)), T(-1)), T(0.5)), diff_ls);
  return g.row_sum(per_dim);
}

// KL(p||q) per row -> [N]
template <typename T>
Var gauss_kl_inclusive_rows(Graph<T>& g, Var q_mean, Var q_log_std, const Tensor<T>& p_mean,
                            const Tensor<T>& p_log_std) {
  Var lq = g.clamp(q_log_std, T(kLogStdMin), T(kLogStdMax));
  Var pm = g.constant(p_mean);
  Var lp = g.constant(p_log_std);
  Var diff_ls = g.sub(lp, lq);  // roles swapped
  Var vr = g.exp_(g.mul_scalar(diff_ls, T(2)));
  Var d = g.mul(g.sub(pm, q_mean), g.exp_(g.neg(lq)));
  Var per_dim = g.sub(g.mul_scalar(g.add_scalar(g.add(vr, g.mul(d, d)), T(-1)), T(0.5)), diff_ls);
  return g.row_sum(per_dim);
}

// Bernoulli KL between probability vectors [N]
template <typename T>
Var bernoulli_kl_rows(Graph<T>& g, Var q_prob, Var p_prob) {
  Var q = g.clamp(q_prob, T(kProbClamp), T(1.0 - kProbClamp));
  Var p = g.clamp(p_prob, T(kProbClamp), T(1.0 - kProbClamp));
  Var one_q = g.one_minus(q);
  Var one_p = g.one_minus(p);
  Var pos = g.mul(q, g.sub(g.log_eps(q, T(0)), g.log_eps(p, T(0))));
  Var neg = g.mul(one_q, g.sub(g.log_eps(one_q, T(0)), g.log_eps(one_p, T(0))));
  return g.add(pos, neg);
}

// relaxed Bernoulli sample from probabilities q:[N] with uniform noise u:[N]
template <typename T>
Var relaxed_bernoulli_from_prob(Graph<T>& g, Var q_prob, const Tensor<T>& u, T temperature,
                                bool hard) {
  Var q = g.clamp(q_prob, T(kProbClamp), T(1.0 - kProbClamp));
  Var logit = g.sub(g.log_eps(q, T(0)), g.log_eps(g.one_minus(q), T(0)));
  Tensor<T> noise(u.shape);
  for (int64_t i = 0; i < u.numel(); ++i)
    noise[i] = std::log(u[i]) - std::log1p(-static_cast<double>(u[i]));
  Var y = g.sigmoid_(g.mul_scalar(g.add(logit, g.constant(noise)), T(1) / temperature));
  if (!hard) return y;
  // straight-through: hard value, relaxed gradient
  const Tensor<T>& yv = g.val(y);
  Tensor<T> delta(yv.shape);
  for (int64_t i = 0; i < yv.numel(); ++i) delta[i] = (yv[i] > T(0.5) ? T(1) : T(0)) - yv[i];
  return g.add(y, g.constant(delta));
}

// standard-normal noise tensor from a deterministic stream
template <typename T>
Tensor<T> normal_noise(Shape s, RngStream& rng) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.next_normal());
  return t;
}

template <typename T>
Tensor<T> uniform_noise(Shape s, RngStream& rng) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.next_unit_open());
  return t;
}

}  // namespace apex
