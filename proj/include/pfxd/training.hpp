#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "pfxd/checkpoint.hpp"
#include "pfxd/data.hpp"
#include "pfxd/denoiser.hpp"
#include "pfxd/diffusion.hpp"
#include "pfxd/schedule.hpp"
#include "pfxd/vocab.hpp"

namespace pfxd {

struct TrainConfig {
  int T = 1000;
  int batch_size = 32;  // full scale: 128
  int steps = 3000;     // full scale: 200000
  double lr = 1e-3;
  ScheduleKind schedule = ScheduleKind::TLinear;
  ScheduleParams schedule_params;
  double rounding_weight = 1.0;  // lambda
  Parameterization param = Parameterization::Epsilon;
  bool freeze_embedding = false;
  double embedding_init_std = 0.02;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int checkpoint_every = 500;
  std::uint64_t seed = 0;

  void validate() const {
    require(T >= 1 && batch_size >= 1 && steps >= 0 && lr > 0.0 && rounding_weight >= 0.0 &&
                clip_norm > 0.0 && checkpoint_every >= 1 && embedding_init_std > 0.0,
            ErrorKind::BadConfig, "training config values must be positive");
  }
};

/// One training pair: a caption and the index of its image feature row.
struct TrainExample {
  TokenSequence seq;
  int feat_index = 0;
};

/// Caption/feature pairs over every (record, caption) combination.
inline std::vector<TrainExample> make_examples(const std::vector<FeatureRecord>& records, const Vocabulary& vocab,
                                               int k) {
  std::vector<TrainExample> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    for (const auto& c : records[i].captions) out.push_back({encode(c, vocab, k), static_cast<int>(i)});
  return out;
}

template <typename T>
Mat<T> feature_matrix(const std::vector<FeatureRecord>& records) {
  require(!records.empty(), ErrorKind::EmptyInput, "no feature records");
  Mat<T> m(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(records.front().feat.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    require(records[i].feat.size() == static_cast<std::size_t>(m.cols()), ErrorKind::DimMismatch,
            "record '" + records[i].id + "' has a different feature width");
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(static_cast<Eigen::Index>(i), j) = records[i].feat[static_cast<std::size_t>(j)];
  }
  return m;
}

/// A batch with its random draws fixed, so the loss is a deterministic
/// function of the parameters.
template <typename T>
struct LossBatch {
  std::vector<TokenSequence> seqs;
  Mat<T> feats;         // B x d_f
  std::vector<int> ts;  // B timesteps in 1..T
  Mat<T> noise;         // (B*k) x d1
};

template <typename T>
LossBatch<T> draw_batch(const std::vector<TrainExample>& examples, std::span<const std::size_t> picks,
                        const Mat<T>& all_feats, const Schedule& sched, int d1, Rng& rng) {
  require(!picks.empty(), ErrorKind::EmptyInput, "empty batch");
  LossBatch<T> b;
  const auto B = static_cast<Eigen::Index>(picks.size());
  b.feats.resize(B, all_feats.cols());
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& ex = examples[picks[static_cast<std::size_t>(i)]];
    b.seqs.push_back(ex.seq);
    b.feats.row(i) = all_feats.row(ex.feat_index);
    b.ts.push_back(static_cast<int>(rng.uniform_int(1, sched.steps())));
  }
  const auto k = static_cast<Eigen::Index>(b.seqs.front().size());
  b.noise = rng.normal_matrix<T>(B * k, d1);
  return b;
}

struct LossValue {
  double total = 0.0;
  double mse = 0.0;
  double nll = 0.0;
};

template <typename T>
struct Gradients {
  DenoiserParams<T> model;
  Mat<T> emb;

  static Gradients zeros(const DenoiserConfig& cfg, Eigen::Index vocab_size) {
    return {DenoiserParams<T>::zeros(cfg), Mat<T>::Zero(vocab_size, cfg.d1)};
  }
  void set_zero() {
    model.set_zero();
    emb.setZero();
  }
  double squared_norm() const {
    double s = static_cast<double>(emb.squaredNorm());
    model.visit([&](const std::string&, const Mat<T>& m) { s += static_cast<double>(m.squaredNorm()); });
    return s;
  }
  bool all_finite() const { return emb.allFinite() && model.all_finite(); }
};

namespace detail {

template <typename T>
struct NoisedBatch {
  Mat<T> x0, xt;
  Vec<T> sa, sb;  // sqrt(alpha_bar), sqrt(1 - alpha_bar) per example
};

template <typename T>
NoisedBatch<T> noise_batch(const EmbeddingTable<T>& emb, const LossBatch<T>& batch, const Schedule& sched, int k) {
  const int B = static_cast<int>(batch.seqs.size());
  require(B >= 1, ErrorKind::EmptyInput, "loss: empty batch");
  const int d1 = emb.dim();
  NoisedBatch<T> nb;
  nb.x0.resize(static_cast<Eigen::Index>(B) * k, d1);
  nb.sa.resize(B);
  nb.sb.resize(B);
  for (int b = 0; b < B; ++b) {
    require(static_cast<int>(batch.seqs[b].size()) == k, ErrorKind::ShapeMismatch, "loss: caption length != k");
    nb.x0.middleRows(static_cast<Eigen::Index>(b) * k, k) = embed(std::span<const TokenId>(batch.seqs[b]), emb);
    double ab = sched.alpha_bar_at(batch.ts[b]);
    nb.sa(b) = static_cast<T>(std::sqrt(ab));
    nb.sb(b) = static_cast<T>(std::sqrt(1.0 - ab));
  }
  require_same_shape(nb.x0, batch.noise, "loss: noise");
  nb.xt.resize(nb.x0.rows(), d1);
  for (int b = 0; b < B; ++b) {
    auto r = static_cast<Eigen::Index>(b) * k;
    nb.xt.middleRows(r, k) = nb.sa(b) * nb.x0.middleRows(r, k) + nb.sb(b) * batch.noise.middleRows(r, k);
  }
  return nb;
}

template <typename T>
Mat<T> x0_estimate(const NoisedBatch<T>& nb, const Mat<T>& out, Parameterization param, int k) {
  if (param == Parameterization::X0) return out;
  Mat<T> x0_hat(out.rows(), out.cols());
  for (Eigen::Index b = 0; b < nb.sa.size(); ++b) {
    auto r = b * k;
    x0_hat.middleRows(r, k) = (nb.xt.middleRows(r, k) - nb.sb(b) * out.middleRows(r, k)) / nb.sa(b);
  }
  return x0_hat;
}

/// Turns logits into softmax probabilities in place; returns the summed
/// token cross-entropy.
template <typename T>
double softmax_nll(Mat<T>& logits, const std::vector<TokenSequence>& seqs, int k) {
  double nll = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    TokenId tok = seqs[static_cast<std::size_t>(i / k)][static_cast<std::size_t>(i % k)];
    T mx = row.maxCoeff();
    T shifted_tok = row(tok) - mx;
    row = (row.array() - mx).exp().matrix();
    T z = row.sum();
    nll += std::log(static_cast<double>(z)) - static_cast<double>(shifted_tok);
    row /= z;
  }
  return nll;
}

template <typename T>
LossValue loss_terms(const NoisedBatch<T>& nb, const Mat<T>& out, const EmbeddingTable<T>& emb,
                     const LossBatch<T>& batch, double rounding_weight, Parameterization param, int k,
                     Mat<T>* probs_out, Mat<T>* x0_hat_out) {
  const double n = static_cast<double>(batch.seqs.size()) * k;
  const Mat<T>& target = param == Parameterization::Epsilon ? batch.noise : nb.x0;
  LossValue lv;
  lv.mse = static_cast<double>((out - target).squaredNorm()) / (n * emb.dim());
  if (rounding_weight > 0.0) {
    Mat<T> x0_hat = x0_estimate(nb, out, param, k);
    Mat<T> probs = x0_hat * emb.weights.transpose();
    lv.nll = softmax_nll(probs, batch.seqs, k) / n;
    if (probs_out) *probs_out = std::move(probs);
    if (x0_hat_out) *x0_hat_out = std::move(x0_hat);
  }
  lv.total = lv.mse + rounding_weight * lv.nll;
  if (!std::isfinite(lv.total)) throw Error(ErrorKind::NonFinite, "loss diverged");
  return lv;
}

}  // namespace detail

/// Loss of a given network output `out` for the batch, without gradients.
/// Lets any denoiser (including analytic oracles) be scored.
template <typename T>
LossValue loss_from_output(const Mat<T>& out, const EmbeddingTable<T>& emb, const LossBatch<T>& batch,
                           const Schedule& sched, double rounding_weight, Parameterization param) {
  require(!batch.seqs.empty(), ErrorKind::EmptyInput, "loss: empty batch");
  const int k = static_cast<int>(batch.seqs.front().size());
  auto nb = detail::noise_batch(emb, batch, sched, k);
  require_same_shape(nb.x0, out, "loss: network output");
  return detail::loss_terms<T>(nb, out, emb, batch, rounding_weight, param, k, nullptr, nullptr);
}

/// The noised inputs x_t the network sees for this batch.
template <typename T>
Mat<T> noised_inputs(const EmbeddingTable<T>& emb, const LossBatch<T>& batch, const Schedule& sched) {
  require(!batch.seqs.empty(), ErrorKind::EmptyInput, "loss: empty batch");
  return detail::noise_batch(emb, batch, sched, static_cast<int>(batch.seqs.front().size())).xt;
}

/// Batch loss: per example, x0 = EMB(seq), x_t = q_sample(x0, t, noise),
/// out = network(x_t, t, feat). The regression term is |target - out|^2 /
/// (k*d1) with target = noise (epsilon mode) or x0 (x0 mode); the rounding
/// term is the token cross-entropy of logits x0_hat . EMB^T averaged over the
/// k positions. Both are averaged over the batch. If `grads` is non-null the
/// gradients are accumulated into it.
template <typename T>
LossValue compute_loss(const DenoiserModel<T>& model, const EmbeddingTable<T>& emb, const LossBatch<T>& batch,
                       const Schedule& sched, double rounding_weight, Parameterization param,
                       std::type_identity_t<Gradients<T>>* grads = nullptr) {
  const auto& cfg = model.config();
  const int B = static_cast<int>(batch.seqs.size());
  const int k = cfg.k, d1 = cfg.d1;
  require(B >= 1, ErrorKind::EmptyInput, "loss: empty batch");
  auto nb = detail::noise_batch(emb, batch, sched, k);

  DenoiserCache<T> cache;
  Mat<T> out = model.forward(nb.xt, batch.ts, batch.feats, grads ? &cache : nullptr);
  Mat<T> probs, x0_hat;
  LossValue lv = detail::loss_terms(nb, out, emb, batch, rounding_weight, param, k, &probs, &x0_hat);
  if (!grads) return lv;

  const double n = static_cast<double>(B) * k;
  const Mat<T>& target = param == Parameterization::Epsilon ? batch.noise : nb.x0;
  Mat<T> d_out = (out - target) * static_cast<T>(2.0 / (n * d1));
  Mat<T> d_x0 = Mat<T>::Zero(nb.x0.rows(), d1);
  Mat<T> d_xt_direct = Mat<T>::Zero(nb.x0.rows(), d1);
  if (param == Parameterization::X0) d_x0 -= d_out;

  if (rounding_weight > 0.0) {
    Mat<T>& d_logits = probs;
    for (Eigen::Index i = 0; i < d_logits.rows(); ++i)
      d_logits(i, batch.seqs[static_cast<std::size_t>(i / k)][static_cast<std::size_t>(i % k)]) -= T(1);
    d_logits *= static_cast<T>(rounding_weight / n);
    grads->emb.noalias() += d_logits.transpose() * x0_hat;
    Mat<T> d_x0_hat = d_logits * emb.weights;
    if (param == Parameterization::Epsilon) {
      for (int b = 0; b < B; ++b) {
        auto r = static_cast<Eigen::Index>(b) * k;
        d_out.middleRows(r, k) -= (nb.sb(b) / nb.sa(b)) * d_x0_hat.middleRows(r, k);
        d_xt_direct.middleRows(r, k) = d_x0_hat.middleRows(r, k) / nb.sa(b);
      }
    } else {
      d_out += d_x0_hat;
    }
  }

  Mat<T> d_xt;
  model.backward(cache, d_out, grads->model, &d_xt);
  d_xt += d_xt_direct;
  for (int b = 0; b < B; ++b) {
    auto r = static_cast<Eigen::Index>(b) * k;
    d_x0.middleRows(r, k) += nb.sa(b) * d_xt.middleRows(r, k);
  }
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < k; ++i)
      grads->emb.row(batch.seqs[b][i]) += d_x0.row(static_cast<Eigen::Index>(b) * k + i);
  return lv;
}

/// Adam first/second moments for every trainable tensor.
template <typename T>
struct AdamState {
  Gradients<T> m, v;
  std::int64_t step = 0;
};

template <typename T>
struct TrainState {
  DenoiserModel<T> model;
  EmbeddingTable<T> emb;
  AdamState<T> adam;
  std::int64_t step = 0;
  double last_loss = 0.0;
  double running_loss = 0.0;  // exponential moving average

  static TrainState init(const DenoiserConfig& cfg, std::size_t vocab_size, std::uint64_t seed,
                         double emb_std = 0.02) {
    Rng rng = Rng::derive(seed, 0);
    TrainState s;
    s.emb = EmbeddingTable<T>::random(vocab_size, cfg.d1, rng, emb_std);
    s.model = DenoiserModel<T>::init(cfg, rng);
    s.adam.m = Gradients<T>::zeros(cfg, static_cast<Eigen::Index>(vocab_size));
    s.adam.v = Gradients<T>::zeros(cfg, static_cast<Eigen::Index>(vocab_size));
    return s;
  }
};

/// Scalar Adam update shared by every tensor; bias-corrected.
template <typename T>
void adam_update(Mat<T>& p, const Mat<T>& g, Mat<T>& m, Mat<T>& v, std::int64_t step, const TrainConfig& cfg,
                 T grad_scale) {
  const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step)));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.adam_eps);
  auto ga = g.array() * grad_scale;
  m.array() = b1 * m.array() + (T(1) - b1) * ga;
  v.array() = b2 * v.array() + (T(1) - b2) * ga.square();
  p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

/// Clip to cfg.clip_norm (global L2 norm) and apply one Adam step.
template <typename T>
void apply_gradients(TrainState<T>& s, const Gradients<T>& g, const TrainConfig& cfg) {
  if (!g.all_finite()) throw Error(ErrorKind::NonFinite, "non-finite gradient at step " + std::to_string(s.step));
  double norm = std::sqrt(g.squared_norm());
  T scale = norm > cfg.clip_norm ? static_cast<T>(cfg.clip_norm / norm) : T(1);
  ++s.adam.step;
  std::vector<Mat<T>*> ps, ms, vs;
  std::vector<const Mat<T>*> gs;
  s.model.params().visit([&](const std::string&, Mat<T>& m) { ps.push_back(&m); });
  const_cast<DenoiserParams<T>&>(g.model).visit([&](const std::string&, Mat<T>& m) { gs.push_back(&m); });
  s.adam.m.model.visit([&](const std::string&, Mat<T>& m) { ms.push_back(&m); });
  s.adam.v.model.visit([&](const std::string&, Mat<T>& m) { vs.push_back(&m); });
  for (std::size_t i = 0; i < ps.size(); ++i) adam_update(*ps[i], *gs[i], *ms[i], *vs[i], s.adam.step, cfg, scale);
  if (!cfg.freeze_embedding) adam_update(s.emb.weights, g.emb, s.adam.m.emb, s.adam.v.emb, s.adam.step, cfg, scale);
  ++s.step;
}

/// One optimisation step on a prepared batch. Returns the pre-update loss.
template <typename T>
LossValue train_step(TrainState<T>& s, const LossBatch<T>& batch, const Schedule& sched, const TrainConfig& cfg,
                     Gradients<T>& scratch) {
  scratch.set_zero();
  auto lv = compute_loss(s.model, s.emb, batch, sched, cfg.rounding_weight, cfg.param, &scratch);
  apply_gradients(s, scratch, cfg);
#ifndef NDEBUG
  require(s.model.params().all_finite() && s.emb.weights.allFinite(), ErrorKind::NonFinite,
          "parameters non-finite after step " + std::to_string(s.step));
#endif
  s.last_loss = lv.total;
  s.running_loss = s.step == 1 ? lv.total : 0.98 * s.running_loss + 0.02 * lv.total;
  return lv;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"T", c.T},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"lr", c.lr},
          {"schedule", std::string(to_string(c.schedule))},
          {"beta_min", c.schedule_params.beta_min},
          {"beta_max", c.schedule_params.beta_max},
          {"cosine_offset", c.schedule_params.cosine_offset},
          {"alpha_bar_floor", c.schedule_params.alpha_bar_floor},
          {"rounding_weight", c.rounding_weight},
          {"parameterization", c.param == Parameterization::Epsilon ? "epsilon" : "x0"},
          {"freeze_embedding", c.freeze_embedding},
          {"embedding_init_std", c.embedding_init_std},
          {"clip_norm", c.clip_norm},
          {"seed", c.seed}};
}

template <typename T>
Checkpoint state_checkpoint(const TrainState<T>& s, const Vocabulary& vocab, const TrainConfig& cfg) {
  nlohmann::json meta;
  meta["format"] = "pfxd-checkpoint";
  meta["train"] = to_json(cfg);
  meta["schedule"] = std::string(to_string(cfg.schedule));
  meta["step"] = s.step;
  return make_checkpoint(s.model, s.emb, vocab, std::move(meta));
}

struct FitOptions {
  std::string log_path;  // CSV "step,loss,seconds"; empty disables
  std::function<void(std::int64_t step, const LossValue&)> on_step;
};

/// Train for cfg.steps on every (record, caption) pair and write the
/// checkpoint to out_path (also every cfg.checkpoint_every steps).
template <typename T>
TrainState<T> fit(const TrainConfig& cfg, const DenoiserConfig& model_cfg, const std::vector<FeatureRecord>& records,
                  const Vocabulary& vocab, const std::string& out_path, const FitOptions& opt = {}) {
  cfg.validate();
  require(!records.empty(), ErrorKind::EmptyInput, "training dataset is empty");
  auto sched = make_schedule(cfg.schedule, cfg.T, cfg.schedule_params);
  auto examples = make_examples(records, vocab, model_cfg.k);
  Mat<T> feats = feature_matrix<T>(records);
  require(feats.cols() == model_cfg.feat_dim, ErrorKind::DimMismatch,
          "dataset feature width " + std::to_string(feats.cols()) + " != model feat_dim " +
              std::to_string(model_cfg.feat_dim));

  auto state = TrainState<T>::init(model_cfg, vocab.size(), cfg.seed, cfg.embedding_init_std);
  Rng data_rng = Rng::derive(cfg.seed, 1);
  Rng noise_rng = Rng::derive(cfg.seed, 2);
  auto grads = Gradients<T>::zeros(model_cfg, static_cast<Eigen::Index>(vocab.size()));

  std::ofstream log;
  if (!opt.log_path.empty()) {
    log.open(opt.log_path, std::ios::trunc);
    if (!log) throw Error(ErrorKind::Io, "cannot write training log " + opt.log_path);
    log << "step,loss,seconds\n";
  }
  auto save = [&]() {
    if (!out_path.empty()) state_checkpoint(state, vocab, cfg).save(out_path);
  };

  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();
  std::vector<std::size_t> picks;
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = 0; step < cfg.steps; ++step) {
    picks.clear();
    while (picks.size() < static_cast<std::size_t>(cfg.batch_size)) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), data_rng.engine());
        cursor = 0;
      }
      picks.push_back(order[cursor++]);
    }
    auto batch = draw_batch<T>(examples, picks, feats, sched, model_cfg.d1, noise_rng);
    LossValue lv;
    try {
      lv = train_step(state, batch, sched, cfg, grads);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::NonFinite) save();  // state is still the last good one
      throw;
    }
    if (log) {
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << state.step << ',' << lv.total << ',' << secs << '\n';
    }
    if (opt.on_step) opt.on_step(state.step, lv);
    if (state.step % cfg.checkpoint_every == 0) save();
  }
  save();
  return state;
}

}  // namespace pfxd
