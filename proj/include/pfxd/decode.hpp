#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pfxd/denoiser.hpp"
#include "pfxd/diffusion.hpp"
#include "pfxd/schedule.hpp"
#include "pfxd/vocab.hpp"

namespace pfxd {

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::DimMismatch, "cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
  if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::ZeroVector, "cosine_similarity: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double cosine_similarity(const Vec<double>& a, const Vec<double>& b) {
  return cosine_similarity(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                           std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

/// Maps caption text into the image feature space.
using TextEncoder = std::function<Vec<double>(const std::string&)>;

template <typename T>
struct Candidate {
  std::string caption;
  TokenSequence tokens;
  Mat<T> latent;  // final x_0, k x d1
  std::uint64_t seed = 0;
};

struct DecodeOptions {
  int n = 5;
  int eval_steps = 50;
  Parameterization param = Parameterization::Epsilon;
  bool clamp = true;
};

/// n reverse chains with seeds base_seed + i, batched through the network,
/// each rounded to tokens and detokenized.
template <typename T>
std::vector<Candidate<T>> generate_candidates(const DenoiserModel<T>& model, const EmbeddingTable<T>& emb,
                                              const Vocabulary& vocab, const Vec<T>& feat, const Schedule& sched,
                                              const DecodeOptions& opt, std::uint64_t base_seed) {
  require(opt.n >= 1, ErrorKind::BadConfig, "need at least one candidate");
  const auto& cfg = model.config();
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(opt.n));
  for (int i = 0; i < opt.n; ++i) seeds[static_cast<std::size_t>(i)] = base_seed + static_cast<std::uint64_t>(i);
  Mat<T> feats = feat.transpose().replicate(opt.n, 1);
  SampleOptions<T> so;
  so.k = cfg.k;
  so.d1 = cfg.d1;
  so.reverse.param = opt.param;
  so.reverse.clamp = opt.clamp ? &emb : nullptr;
  Mat<T> x = sample_chains(as_denoise_fn(model), feats, sched, opt.eval_steps, seeds, so);
  std::vector<Candidate<T>> out;
  for (int i = 0; i < opt.n; ++i) {
    Candidate<T> c;
    c.latent = x.middleRows(static_cast<Eigen::Index>(i) * cfg.k, cfg.k);
    c.tokens = round_to_tokens(c.latent, emb);
    c.caption = detokenize(c.tokens, vocab);
    c.seed = seeds[static_cast<std::size_t>(i)];
    out.push_back(std::move(c));
  }
  return out;
}

struct Selection {
  std::size_t index = 0;
  std::string caption;
  double score = 0.0;
  std::vector<double> scores;  // NaN where the candidate was skipped
};

/// Argmax cosine between the image feature and each encoded candidate;
/// ties go to the lowest index. Candidates whose encoding is a zero vector
/// are skipped.
inline Selection select_best(const Vec<double>& feat, const std::vector<std::string>& candidates,
                             const TextEncoder& encoder) {
  require(!candidates.empty(), ErrorKind::NoValidCandidate, "no candidates");
  Selection sel;
  sel.scores.assign(candidates.size(), std::nan(""));
  bool found = false;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double s;
    try {
      s = cosine_similarity(feat, encoder(candidates[i]));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ZeroVector) throw;
      continue;
    }
    sel.scores[i] = s;
    if (!found || s > sel.score) sel.index = i, sel.score = s, found = true;
    if (candidates.size() == 1) break;
  }
  if (!found) throw Error(ErrorKind::NoValidCandidate, "every candidate encoded to a zero vector");
  sel.caption = candidates[sel.index];
  return sel;
}

}  // namespace pfxd
