#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pfxd/error.hpp"
#include "pfxd/rng.hpp"
#include "pfxd/schedule.hpp"
#include "pfxd/tensor.hpp"
#include "pfxd/vocab.hpp"

namespace pfxd {

/// What the network output stands for.
enum class Parameterization { Epsilon, X0 };

/// Batched network callback: x stacks B chains of k rows each, feat holds one
/// feature row per chain, t is the (original, un-respaced) timestep.
template <typename T>
using DenoiseFn = std::function<Mat<T>(const Mat<T>& x, int t, const Mat<T>& feat)>;

template <typename T>
struct PosteriorParams {
  Mat<T> mean;
  double var = 0.0;
};

/// Coefficients of q(x_prev | x_t, x0) for a jump t -> t_prev.
struct StepCoefficients {
  double coef_xt = 0.0;
  double coef_x0 = 1.0;
  double var = 0.0;
};

/// One forward noising step: sqrt(1-beta) * x_prev + sqrt(beta) * noise.
template <typename T>
Mat<T> q_sample_step(const Mat<T>& x_prev, double beta, const Mat<T>& noise) {
  require_same_shape(x_prev, noise, "q_sample_step");
  require(beta >= 0.0 && beta < 1.0, ErrorKind::BadSchedule, "q_sample_step: beta outside [0,1)");
  return static_cast<T>(std::sqrt(1.0 - beta)) * x_prev + static_cast<T>(std::sqrt(beta)) * noise;
}

/// Closed-form jump from x0 straight to x_t.
template <typename T>
Mat<T> q_sample(const Mat<T>& x0, int t, const Schedule& sched, const Mat<T>& noise) {
  require_same_shape(x0, noise, "q_sample");
  double ab = sched.alpha_bar_at(t);
  return static_cast<T>(std::sqrt(ab)) * x0 + static_cast<T>(std::sqrt(1.0 - ab)) * noise;
}

template <typename T>
Mat<T> reconstruct_x0(const Mat<T>& x_t, int t, const Schedule& sched, const Mat<T>& z_tilde) {
  require_same_shape(x_t, z_tilde, "reconstruct_x0");
  double ab = sched.alpha_bar_at(t);
  return (x_t - static_cast<T>(std::sqrt(1.0 - ab)) * z_tilde) / static_cast<T>(std::sqrt(ab));
}

/// t_prev == 0 is the final step: mean is x0 and the variance vanishes.
inline StepCoefficients step_coefficients(const Schedule& sched, int t, int t_prev) {
  require(t >= 1 && t <= sched.steps() && t_prev >= 0 && t_prev < t, ErrorKind::BadTimestep,
          "step " + std::to_string(t) + " -> " + std::to_string(t_prev) + " invalid");
  if (t_prev == 0) return {0.0, 1.0, 0.0};
  double ab_t = sched.alpha_bar_at(t);
  double ab_prev = sched.alpha_bar_at(t_prev);
  double beta = t_prev == t - 1 ? sched.beta_at(t) : 1.0 - ab_t / ab_prev;
  double alpha = 1.0 - beta;
  StepCoefficients c;
  c.coef_xt = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t);
  c.coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab_t);
  c.var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
  return c;
}

template <typename T>
PosteriorParams<T> posterior(const Mat<T>& x_t, const Mat<T>& x0, int t, const Schedule& sched) {
  require_same_shape(x_t, x0, "posterior");
  auto c = step_coefficients(sched, t, t - 1);
  return {static_cast<T>(c.coef_xt) * x_t + static_cast<T>(c.coef_x0) * x0, c.var};
}

/// Snap every row to its nearest embedding row.
template <typename T>
Mat<T> clamp_to_embeddings(const Mat<T>& x, const EmbeddingTable<T>& table) {
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = table.weights.row(nearest_token(x.row(i), table));
  return out;
}

template <typename T>
struct ReverseOptions {
  Parameterization param = Parameterization::Epsilon;
  /// When set, the x0 estimate is snapped to this table before the posterior.
  const EmbeddingTable<T>* clamp = nullptr;
};

/// x0 estimate from the network output, before clamping.
template <typename T>
Mat<T> predict_x0(const Mat<T>& x_t, int t, const Schedule& sched, const Mat<T>& out,
                  Parameterization param) {
  return param == Parameterization::Epsilon ? reconstruct_x0(x_t, t, sched, out) : out;
}

/// One reverse step t -> t_prev. Noise is ignored when t_prev == 0.
template <typename T>
Mat<T> p_sample_jump(const Mat<T>& x_t, int t, int t_prev, const Schedule& sched,
                     const DenoiseFn<T>& denoiser, const Mat<T>& feat, const Mat<T>& noise,
                     const ReverseOptions<T>& opt = {}) {
  require_same_shape(x_t, noise, "p_sample_step");
  Mat<T> out = denoiser(x_t, t, feat);
  require_same_shape(x_t, out, "p_sample_step: denoiser output");
  require(out.allFinite(), ErrorKind::NonFinite, "denoiser output non-finite at t=" + std::to_string(t));
  Mat<T> x0 = predict_x0(x_t, t, sched, out, opt.param);
  if (opt.clamp) x0 = clamp_to_embeddings(x0, *opt.clamp);
  auto c = step_coefficients(sched, t, t_prev);
  Mat<T> next = static_cast<T>(c.coef_xt) * x_t + static_cast<T>(c.coef_x0) * x0;
  if (c.var > 0.0) next += static_cast<T>(std::sqrt(c.var)) * noise;
  return next;
}

template <typename T>
Mat<T> p_sample_step(const Mat<T>& x_t, int t, const Schedule& sched, const DenoiseFn<T>& denoiser,
                     const Mat<T>& feat, const Mat<T>& noise, const ReverseOptions<T>& opt = {}) {
  return p_sample_jump(x_t, t, t - 1, sched, denoiser, feat, noise, opt);
}

/// Evenly spaced subsequence of 1..T, descending, always holding T and 1
/// (a single step keeps only T).
inline std::vector<int> respaced_timesteps(int T, int eval_steps) {
  require(T >= 1, ErrorKind::BadConfig, "T must be >= 1");
  require(eval_steps >= 1 && eval_steps <= T, ErrorKind::BadConfig,
          "eval_steps must be in 1.." + std::to_string(T));
  std::vector<int> ts;
  if (eval_steps == 1) return {T};
  for (int i = eval_steps - 1; i >= 0; --i)
    ts.push_back(static_cast<int>(std::llround(1.0 + i * static_cast<double>(T - 1) / (eval_steps - 1))));
  return ts;
}

template <typename T>
struct SampleOptions {
  int k = 16;
  int d1 = 48;
  ReverseOptions<T> reverse;
  /// Called after each reverse step with the new timestep and stacked state.
  std::function<void(int, const Mat<T>&)> on_step;
};

/// Runs one reverse chain per seed, batched through the denoiser. Chain i
/// draws x_T and all step noises from Rng(seeds[i]) alone, so its result does
/// not depend on which other chains share the batch (up to GEMM rounding).
template <typename T>
Mat<T> sample_chains(const DenoiseFn<T>& denoiser, const Mat<T>& feats, const Schedule& sched,
                     int eval_steps, std::span<const std::uint64_t> seeds, const SampleOptions<T>& opt) {
  const auto B = static_cast<Eigen::Index>(seeds.size());
  require(B >= 1, ErrorKind::BadConfig, "need at least one chain");
  require(feats.rows() == B, ErrorKind::ShapeMismatch, "one feature row per chain required");
  auto ts = respaced_timesteps(sched.steps(), eval_steps);
  std::vector<Rng> rngs;
  rngs.reserve(seeds.size());
  for (auto s : seeds) rngs.emplace_back(s);

  auto draw = [&]() {
    Mat<T> m(B * opt.k, opt.d1);
    for (Eigen::Index b = 0; b < B; ++b)
      m.middleRows(b * opt.k, opt.k) = rngs[b].template normal_matrix<T>(opt.k, opt.d1);
    return m;
  };

  Mat<T> x = draw();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Mat<T> noise = t_prev > 0 ? draw() : Mat<T>::Zero(x.rows(), x.cols());
    x = p_sample_jump(x, t, t_prev, sched, denoiser, feats, noise, opt.reverse);
    if (opt.on_step) opt.on_step(t_prev, x);
  }
  return x;
}

template <typename T>
struct LatentState {
  Mat<T> x;
  int t = 0;
};

template <typename T>
LatentState<T> sample(const DenoiseFn<T>& denoiser, const Vec<T>& feat, const Schedule& sched,
                      int eval_steps, std::uint64_t seed, const SampleOptions<T>& opt) {
  Mat<T> f = feat.transpose();
  std::uint64_t seeds[] = {seed};
  return {sample_chains(denoiser, f, sched, eval_steps, std::span<const std::uint64_t>(seeds), opt), 0};
}

}  // namespace pfxd
