#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pfxd/diffusion.hpp"
#include "pfxd/error.hpp"
#include "pfxd/layers.hpp"
#include "pfxd/rng.hpp"
#include "pfxd/tensor.hpp"

namespace pfxd {

/// Network shape. Defaults are the desk-scale configuration.
struct DenoiserConfig {
  int d1 = 48;            // token embedding width
  int d2 = 128;           // model width
  int k = 16;             // caption length
  int prefix_len = 4;     // visual prefix rows (l)
  int layers = 4;         // encoder layers (E)
  int heads = 4;          // attention heads (H)
  int ffn_mult = 4;       // feed-forward width = ffn_mult * d2
  int feat_dim = 64;      // image feature width (d_f)
  int prefix_hidden = 0;  // mapping MLP hidden width; 0 means prefix_len * d2 / 2

  int seq_len() const { return prefix_len + k; }
  int hidden() const { return prefix_hidden > 0 ? prefix_hidden : std::max(1, prefix_len * d2 / 2); }

  void validate() const {
    require(d1 >= 2 && d2 >= 2 && k >= 2 && prefix_len >= 1 && layers >= 0 && heads >= 1 &&
                ffn_mult >= 1 && feat_dim >= 1 && prefix_hidden >= 0,
            ErrorKind::BadConfig, "denoiser dimensions must be positive");
    require(d2 % 2 == 0, ErrorKind::BadConfig, "d2 must be even");
    require(d2 % heads == 0, ErrorKind::BadConfig, "d2 must be divisible by heads");
  }

  bool operator==(const DenoiserConfig&) const = default;
};

template <typename T>
struct EncoderLayerParams {
  Mat<T> ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
  Mat<T> ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1.gamma", ln1_g);
    f(prefix + "ln1.beta", ln1_b);
    f(prefix + "attn.qkv.weight", qkv_w);
    f(prefix + "attn.qkv.bias", qkv_b);
    f(prefix + "attn.out.weight", out_w);
    f(prefix + "attn.out.bias", out_b);
    f(prefix + "ln2.gamma", ln2_g);
    f(prefix + "ln2.beta", ln2_b);
    f(prefix + "ffn.in.weight", ff1_w);
    f(prefix + "ffn.in.bias", ff1_b);
    f(prefix + "ffn.out.weight", ff2_w);
    f(prefix + "ffn.out.bias", ff2_b);
  }
};

/// Every trainable tensor of the denoiser. Also used as the gradient and
/// optimizer-moment container, since it has identical shapes.
template <typename T>
struct DenoiserParams {
  Mat<T> prefix_w1, prefix_b1, prefix_w2, prefix_b2;
  Mat<T> up_w, up_b, down_w, down_b;
  Mat<T> pos_emb, type_emb;
  Mat<T> time_w, time_b;
  std::vector<EncoderLayerParams<T>> layers;

  template <typename F>
  void visit(F&& f) {
    f("prefix.fc1.weight", prefix_w1);
    f("prefix.fc1.bias", prefix_b1);
    f("prefix.fc2.weight", prefix_w2);
    f("prefix.fc2.bias", prefix_b2);
    f("up.weight", up_w);
    f("up.bias", up_b);
    f("down.weight", down_w);
    f("down.bias", down_b);
    f("pos_emb", pos_emb);
    f("type_emb", type_emb);
    f("time.weight", time_w);
    f("time.bias", time_b);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].visit("layers." + std::to_string(i) + ".", f);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<DenoiserParams*>(this)->visit([&](const std::string& n, Mat<T>& m) {
      f(n, static_cast<const Mat<T>&>(m));
    });
  }

  /// Zero tensors with the shapes of `cfg`.
  static DenoiserParams zeros(const DenoiserConfig& cfg) {
    cfg.validate();
    const int D = cfg.d2, F = cfg.ffn_mult * cfg.d2, Hd = cfg.hidden();
    DenoiserParams p;
    p.prefix_w1 = Mat<T>::Zero(cfg.feat_dim, Hd);
    p.prefix_b1 = Mat<T>::Zero(1, Hd);
    p.prefix_w2 = Mat<T>::Zero(Hd, cfg.prefix_len * D);
    p.prefix_b2 = Mat<T>::Zero(1, cfg.prefix_len * D);
    p.up_w = Mat<T>::Zero(cfg.d1, D);
    p.up_b = Mat<T>::Zero(1, D);
    p.down_w = Mat<T>::Zero(D, cfg.d1);
    p.down_b = Mat<T>::Zero(1, cfg.d1);
    p.pos_emb = Mat<T>::Zero(cfg.seq_len(), D);
    p.type_emb = Mat<T>::Zero(2, D);
    p.time_w = Mat<T>::Zero(D, D);
    p.time_b = Mat<T>::Zero(1, D);
    p.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& l : p.layers) {
      l.ln1_g = Mat<T>::Zero(1, D);
      l.ln1_b = Mat<T>::Zero(1, D);
      l.qkv_w = Mat<T>::Zero(D, 3 * D);
      l.qkv_b = Mat<T>::Zero(1, 3 * D);
      l.out_w = Mat<T>::Zero(D, D);
      l.out_b = Mat<T>::Zero(1, D);
      l.ln2_g = Mat<T>::Zero(1, D);
      l.ln2_b = Mat<T>::Zero(1, D);
      l.ff1_w = Mat<T>::Zero(D, F);
      l.ff1_b = Mat<T>::Zero(1, F);
      l.ff2_w = Mat<T>::Zero(F, D);
      l.ff2_b = Mat<T>::Zero(1, D);
    }
    return p;
  }

  void set_zero() {
    visit([](const std::string&, Mat<T>& m) { m.setZero(); });
  }

  std::size_t count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const Mat<T>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  template <typename U>
  DenoiserParams<U> cast() const {
    DenoiserParams<U> out;
    out.layers.resize(layers.size());
    std::vector<Mat<U>*> dst;
    out.visit([&](const std::string&, Mat<U>& m) { dst.push_back(&m); });
    std::size_t i = 0;
    visit([&](const std::string&, const Mat<T>& m) { *dst[i++] = m.template cast<U>(); });
    return out;
  }
};

/// Activations kept from a forward pass for the backward pass.
template <typename T>
struct DenoiserCache {
  struct Layer {
    Mat<T> a_in, qkv, probs, ctx, f_in, f_pre, f_tanh, f_act;
    layers::LayerNormCache<T> ln1, ln2;
  };
  int batch = 0;
  std::vector<int> ts;
  Mat<T> feat, pre1, hid1, prefix;  // prefix: B x (l*d2)
  Mat<T> x, cap_up;                 // B*k rows
  Mat<T> time_sin, time_e;          // B rows
  std::vector<Layer> layers;
  Mat<T> top;                       // B*L x d2 after the last layer
  Mat<T> cap_out;                   // caption rows of `top`
};

/// The noise-prediction network: visual prefix mapping, up/down projection,
/// position/type/time embeddings and a pre-norm transformer encoder over the
/// concatenated [prefix; caption] sequence.
template <typename T>
class DenoiserModel {
 public:
  DenoiserModel() = default;
  DenoiserModel(DenoiserConfig cfg, DenoiserParams<T> params)
      : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
  }

  /// LeCun-normal weights, zero biases, unit layer-norm gains, small
  /// position/type tables.
  static DenoiserModel init(const DenoiserConfig& cfg, Rng& rng) {
    auto p = DenoiserParams<T>::zeros(cfg);
    auto fill = [&](Mat<T>& m, double stddev) { m = rng.normal_matrix<T>(m.rows(), m.cols(), stddev); };
    auto lecun = [&](Mat<T>& m) { fill(m, 1.0 / std::sqrt(static_cast<double>(m.rows()))); };
    lecun(p.prefix_w1);
    lecun(p.prefix_w2);
    lecun(p.up_w);
    lecun(p.down_w);
    fill(p.pos_emb, 0.02);
    fill(p.type_emb, 0.02);
    lecun(p.time_w);
    for (auto& l : p.layers) {
      l.ln1_g.setOnes();
      l.ln2_g.setOnes();
      lecun(l.qkv_w);
      lecun(l.out_w);
      lecun(l.ff1_w);
      lecun(l.ff2_w);
    }
    return DenoiserModel(cfg, std::move(p));
  }

  const DenoiserConfig& config() const { return cfg_; }
  DenoiserParams<T>& params() { return params_; }
  const DenoiserParams<T>& params() const { return params_; }

  /// Visual prefix for a single feature vector: l x d2.
  Mat<T> map_prefix(const Vec<T>& feat) const {
    require(feat.size() == cfg_.feat_dim, ErrorKind::DimMismatch,
            "feature width " + std::to_string(feat.size()) + " != " + std::to_string(cfg_.feat_dim));
    require(feat.allFinite(), ErrorKind::NonFinite, "map_prefix: non-finite feature");
    Mat<T> f = feat.transpose();
    Mat<T> pre, out;
    layers::linear(f, params_.prefix_w1, params_.prefix_b1, pre);
    Mat<T> h = pre.array().tanh().matrix();
    layers::linear(h, params_.prefix_w2, params_.prefix_b2, out);
    return Eigen::Map<Mat<T>>(out.data(), cfg_.prefix_len, cfg_.d2);
  }

  /// Concatenate [prefix; caption] rows and add position, type and time
  /// embeddings: (l+k) x d2.
  Mat<T> assemble_sequence(const Mat<T>& prefix, const Mat<T>& caption_up, int t) const {
    require(prefix.rows() == cfg_.prefix_len && prefix.cols() == cfg_.d2, ErrorKind::ShapeMismatch,
            "assemble_sequence: prefix must be l x d2");
    require(caption_up.rows() == cfg_.k && caption_up.cols() == cfg_.d2, ErrorKind::ShapeMismatch,
            "assemble_sequence: caption must be k x d2");
    Mat<T> seq(cfg_.seq_len(), cfg_.d2);
    seq.topRows(cfg_.prefix_len) = prefix;
    seq.bottomRows(cfg_.k) = caption_up;
    seq += params_.pos_emb;
    seq.topRows(cfg_.prefix_len).rowwise() += params_.type_emb.row(0);
    seq.bottomRows(cfg_.k).rowwise() += params_.type_emb.row(1);
    seq.rowwise() += time_embedding(t).row(0);
    return seq;
  }

  /// Single-example prediction z~ (k x d1).
  Mat<T> denoise(const Mat<T>& x_t, int t, const Vec<T>& feat) const {
    require(feat.size() == cfg_.feat_dim, ErrorKind::DimMismatch, "denoise: feature width");
    Mat<T> f = feat.transpose();
    int ts[] = {t};
    return forward(x_t, std::span<const int>(ts), f, nullptr);
  }

  /// Batched prediction. x stacks B examples of k rows; ts and feat have one
  /// entry/row per example. When `cache` is non-null, activations are stored
  /// for backward().
  Mat<T> forward(const Mat<T>& x, std::span<const int> ts, const Mat<T>& feat,
                 DenoiserCache<T>* cache) const {
    const int B = static_cast<int>(ts.size());
    const int k = cfg_.k, l = cfg_.prefix_len, L = cfg_.seq_len(), D = cfg_.d2;
    require(B >= 1 && x.rows() == static_cast<Eigen::Index>(B) * k && x.cols() == cfg_.d1,
            ErrorKind::ShapeMismatch, "forward: x must be (B*k) x d1");
    require(feat.rows() == B && feat.cols() == cfg_.feat_dim, ErrorKind::DimMismatch,
            "forward: feature rows/width mismatch");
    for (int t : ts) require(t >= 0, ErrorKind::BadTimestep, "forward: negative timestep");

    DenoiserCache<T> local;
    DenoiserCache<T>& c = cache ? *cache : local;
    c.batch = B;
    c.ts.assign(ts.begin(), ts.end());
    c.feat = feat;
    c.x = x;

    layers::linear(feat, params_.prefix_w1, params_.prefix_b1, c.pre1);
    c.hid1 = c.pre1.array().tanh().matrix();
    layers::linear(c.hid1, params_.prefix_w2, params_.prefix_b2, c.prefix);
    layers::linear(x, params_.up_w, params_.up_b, c.cap_up);

    c.time_sin.resize(B, D);
    for (int b = 0; b < B; ++b) layers::timestep_embedding<T>(ts[b], c.time_sin.row(b));
    layers::linear(c.time_sin, params_.time_w, params_.time_b, c.time_e);

    Mat<T> h(static_cast<Eigen::Index>(B) * L, D);
    Eigen::Map<const Mat<T>> prefix_rows(c.prefix.data(), static_cast<Eigen::Index>(B) * l, D);
    for (int b = 0; b < B; ++b) {
      auto seq = h.middleRows(static_cast<Eigen::Index>(b) * L, L);
      seq.topRows(l) = prefix_rows.middleRows(static_cast<Eigen::Index>(b) * l, l);
      seq.bottomRows(k) = c.cap_up.middleRows(static_cast<Eigen::Index>(b) * k, k);
      seq += params_.pos_emb;
      seq.topRows(l).rowwise() += params_.type_emb.row(0);
      seq.bottomRows(k).rowwise() += params_.type_emb.row(1);
      seq.rowwise() += c.time_e.row(b);
    }

    c.layers.resize(params_.layers.size());
    for (std::size_t i = 0; i < params_.layers.size(); ++i) {
      encoder_forward(params_.layers[i], h, B, c.layers[i]);
    }
    c.top = std::move(h);

    c.cap_out.resize(static_cast<Eigen::Index>(B) * k, D);
    for (int b = 0; b < B; ++b)
      c.cap_out.middleRows(static_cast<Eigen::Index>(b) * k, k) =
          c.top.middleRows(static_cast<Eigen::Index>(b) * L + l, k);
    Mat<T> out;
    layers::linear(c.cap_out, params_.down_w, params_.down_b, out);
    require(out.allFinite(), ErrorKind::NonFinite, "denoiser produced non-finite output");
    return out;
  }

  /// Backpropagate d(loss)/d(output) through a cached forward pass.
  /// Gradients accumulate into `grads`; d(loss)/d(x) is written to dx if set.
  void backward(const DenoiserCache<T>& c, const Mat<T>& d_out, DenoiserParams<T>& grads,
                Mat<T>* dx) const {
    const int B = c.batch;
    const int k = cfg_.k, l = cfg_.prefix_len, L = cfg_.seq_len(), D = cfg_.d2;
    require_same_shape(d_out, Mat<T>(static_cast<Eigen::Index>(B) * k, cfg_.d1), "backward: d_out");

    Mat<T> d_cap_out;
    layers::linear_backward(c.cap_out, params_.down_w, d_out, grads.down_w, grads.down_b, &d_cap_out);
    Mat<T> dh = Mat<T>::Zero(static_cast<Eigen::Index>(B) * L, D);
    for (int b = 0; b < B; ++b)
      dh.middleRows(static_cast<Eigen::Index>(b) * L + l, k) =
          d_cap_out.middleRows(static_cast<Eigen::Index>(b) * k, k);

    for (std::size_t i = params_.layers.size(); i-- > 0;)
      encoder_backward(params_.layers[i], grads.layers[i], c.layers[i], B, dh);

    Mat<T> d_prefix(B, static_cast<Eigen::Index>(l) * D);
    Eigen::Map<Mat<T>> d_prefix_rows(d_prefix.data(), static_cast<Eigen::Index>(B) * l, D);
    Mat<T> d_cap_up(static_cast<Eigen::Index>(B) * k, D);
    Mat<T> d_time_e(B, D);
    for (int b = 0; b < B; ++b) {
      auto seq = dh.middleRows(static_cast<Eigen::Index>(b) * L, L);
      grads.pos_emb += seq;
      grads.type_emb.row(0) += seq.topRows(l).colwise().sum();
      grads.type_emb.row(1) += seq.bottomRows(k).colwise().sum();
      d_time_e.row(b) = seq.colwise().sum();
      d_prefix_rows.middleRows(static_cast<Eigen::Index>(b) * l, l) = seq.topRows(l);
      d_cap_up.middleRows(static_cast<Eigen::Index>(b) * k, k) = seq.bottomRows(k);
    }
    layers::linear_backward(c.time_sin, params_.time_w, d_time_e, grads.time_w, grads.time_b,
                            static_cast<Mat<T>*>(nullptr));
    layers::linear_backward(c.x, params_.up_w, d_cap_up, grads.up_w, grads.up_b, dx);

    Mat<T> d_hid1;
    layers::linear_backward(c.hid1, params_.prefix_w2, d_prefix, grads.prefix_w2, grads.prefix_b2, &d_hid1);
    Mat<T> d_pre1 = (d_hid1.array() * (T(1) - c.hid1.array().square())).matrix();
    layers::linear_backward(c.feat, params_.prefix_w1, d_pre1, grads.prefix_w1, grads.prefix_b1,
                            static_cast<Mat<T>*>(nullptr));
  }

  /// Attention probabilities of one layer from a cached pass: rows are
  /// (example, head, query) triples, columns keys.
  static const Mat<T>& attention_probs(const DenoiserCache<T>& c, std::size_t layer) {
    return c.layers.at(layer).probs;
  }

  Mat<T> time_embedding(int t) const {
    Mat<T> s(1, cfg_.d2), out;
    layers::timestep_embedding<T>(t, s.row(0));
    layers::linear(s, params_.time_w, params_.time_b, out);
    return out;
  }

 private:
  void encoder_forward(const EncoderLayerParams<T>& p, Mat<T>& h, int B,
                       typename DenoiserCache<T>::Layer& c) const {
    const int L = cfg_.seq_len(), D = cfg_.d2, H = cfg_.heads, dh = D / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    layers::layer_norm(h, p.ln1_g, p.ln1_b, c.a_in, c.ln1);
    layers::linear(c.a_in, p.qkv_w, p.qkv_b, c.qkv);
    c.probs.resize(static_cast<Eigen::Index>(B) * H * L, L);
    c.ctx.resize(static_cast<Eigen::Index>(B) * L, D);
    for (int b = 0; b < B; ++b) {
      for (int hd = 0; hd < H; ++hd) {
        auto q = c.qkv.block(static_cast<Eigen::Index>(b) * L, hd * dh, L, dh);
        auto kk = c.qkv.block(static_cast<Eigen::Index>(b) * L, D + hd * dh, L, dh);
        auto v = c.qkv.block(static_cast<Eigen::Index>(b) * L, 2 * D + hd * dh, L, dh);
        auto pr = c.probs.middleRows((static_cast<Eigen::Index>(b) * H + hd) * L, L);
        pr.noalias() = (q * kk.transpose()) * scale;
        layers::softmax_rows(pr);
        c.ctx.block(static_cast<Eigen::Index>(b) * L, hd * dh, L, dh).noalias() = pr * v;
      }
    }
    Mat<T> attn;
    layers::linear(c.ctx, p.out_w, p.out_b, attn);
    h += attn;
    layers::layer_norm(h, p.ln2_g, p.ln2_b, c.f_in, c.ln2);
    layers::linear(c.f_in, p.ff1_w, p.ff1_b, c.f_pre);
    layers::gelu_forward(c.f_pre, c.f_tanh, c.f_act);
    Mat<T> ff;
    layers::linear(c.f_act, p.ff2_w, p.ff2_b, ff);
    h += ff;
  }

  // dh holds d(loss)/d(layer output) on entry and d(loss)/d(layer input) on exit.
  void encoder_backward(const EncoderLayerParams<T>& p, EncoderLayerParams<T>& g,
                        const typename DenoiserCache<T>::Layer& c, int B, Mat<T>& dh) const {
    const int L = cfg_.seq_len(), D = cfg_.d2, H = cfg_.heads, dh_w = D / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh_w));

    // feed-forward branch
    Mat<T> d_act;
    layers::linear_backward(c.f_act, p.ff2_w, dh, g.ff2_w, g.ff2_b, &d_act);
    Mat<T> d_pre;
    layers::gelu_backward(c.f_pre, c.f_tanh, d_act, d_pre);
    Mat<T> d_fin;
    layers::linear_backward(c.f_in, p.ff1_w, d_pre, g.ff1_w, g.ff1_b, &d_fin);
    Mat<T> d_mid;
    layers::layer_norm_backward(c.ln2, p.ln2_g, d_fin, g.ln2_g, g.ln2_b, d_mid);
    dh += d_mid;

    // attention branch
    Mat<T> d_ctx;
    layers::linear_backward(c.ctx, p.out_w, dh, g.out_w, g.out_b, &d_ctx);
    Mat<T> d_qkv(c.qkv.rows(), c.qkv.cols());
    Mat<T> d_p(L, L), d_s(L, L);
    for (int b = 0; b < B; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b) * L;
      for (int hd = 0; hd < H; ++hd) {
        auto q = c.qkv.block(r0, hd * dh_w, L, dh_w);
        auto kk = c.qkv.block(r0, D + hd * dh_w, L, dh_w);
        auto v = c.qkv.block(r0, 2 * D + hd * dh_w, L, dh_w);
        auto pr = c.probs.middleRows((static_cast<Eigen::Index>(b) * H + hd) * L, L);
        auto dc = d_ctx.block(r0, hd * dh_w, L, dh_w);
        d_p.noalias() = dc * v.transpose();
        d_qkv.block(r0, 2 * D + hd * dh_w, L, dh_w).noalias() = pr.transpose() * dc;
        Vec<T> rowdot = (d_p.array() * pr.array()).rowwise().sum();
        d_s = (pr.array() * (d_p.array().colwise() - rowdot.array())).matrix() * scale;
        d_qkv.block(r0, hd * dh_w, L, dh_w).noalias() = d_s * kk;
        d_qkv.block(r0, D + hd * dh_w, L, dh_w).noalias() = d_s.transpose() * q;
      }
    }
    Mat<T> d_ain;
    layers::linear_backward(c.a_in, p.qkv_w, d_qkv, g.qkv_w, g.qkv_b, &d_ain);
    Mat<T> d_in;
    layers::layer_norm_backward(c.ln1, p.ln1_g, d_ain, g.ln1_g, g.ln1_b, d_in);
    dh += d_in;
  }

  DenoiserConfig cfg_;
  DenoiserParams<T> params_;
};

/// Adapts a model to the sampler's callback shape (shared t per call).
template <typename T>
DenoiseFn<T> as_denoise_fn(const DenoiserModel<T>& model) {
  return [&model](const Mat<T>& x, int t, const Mat<T>& feat) {
    std::vector<int> ts(static_cast<std::size_t>(feat.rows()), t);
    return model.forward(x, ts, feat, nullptr);
  };
}

}  // namespace pfxd
