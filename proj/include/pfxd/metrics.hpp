#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfxd/data.hpp"
#include "pfxd/decode.hpp"
#include "pfxd/parallel.hpp"
#include "pfxd/vocab.hpp"

namespace pfxd {

using Ngram = std::vector<std::string>;

inline std::map<Ngram, int> count_ngrams(const std::vector<std::string>& toks, int n) {
  std::map<Ngram, int> counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
    ++counts[Ngram(toks.begin() + static_cast<std::ptrdiff_t>(i), toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return counts;
}

/// Distinct n-grams / total n-grams pooled over the whole corpus.
inline double distinct_n(const std::vector<std::string>& captions, int n) {
  require(n >= 1, ErrorKind::BadConfig, "distinct_n: n must be >= 1");
  std::set<Ngram> distinct;
  std::size_t total = 0;
  for (const auto& c : captions) {
    for (auto& [g, cnt] : count_ngrams(tokenize(c), n)) {
      distinct.insert(g);
      total += static_cast<std::size_t>(cnt);
    }
  }
  if (total == 0) throw Error(ErrorKind::NoNGrams, "no caption has " + std::to_string(n) + " tokens");
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

/// Per-image variant: distinct_n within each group, averaged over groups that
/// have at least one n-gram.
inline double distinct_n_per_image(const std::vector<std::vector<std::string>>& groups, int n) {
  double sum = 0.0;
  int used = 0;
  for (const auto& g : groups) {
    try {
      sum += distinct_n(g, n);
      ++used;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoNGrams) throw;
    }
  }
  if (used == 0) throw Error(ErrorKind::NoNGrams, "no group has " + std::to_string(n) + "-grams");
  return sum / used;
}

/// Percentage of non-reserved vocabulary words appearing in the captions.
inline double vocab_usage(const std::vector<std::string>& captions, const Vocabulary& vocab) {
  const std::size_t denom = vocab.size() - kReservedTokens;
  if (denom == 0) return 0.0;
  std::set<std::string> used;
  for (const auto& c : captions)
    for (auto& w : tokenize(c))
      if (vocab.contains(w) && vocab.id(w) >= kReservedTokens) used.insert(std::move(w));
  return 100.0 * static_cast<double>(used.size()) / static_cast<double>(denom);
}

/// Per-order clipped match and candidate counts, corpus-summed.
struct BleuStats {
  std::vector<std::size_t> matches, totals;
  std::size_t hyp_len = 0, ref_len = 0;
};

inline BleuStats bleu_stats(const std::vector<std::string>& hypotheses,
                            const std::vector<std::vector<std::string>>& references, int max_n) {
  require(max_n >= 1, ErrorKind::BadConfig, "bleu: max_n must be >= 1");
  require(hypotheses.size() == references.size(), ErrorKind::LengthMismatch,
          "bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " + std::to_string(references.size()) +
              " reference sets");
  BleuStats st;
  st.matches.assign(static_cast<std::size_t>(max_n), 0);
  st.totals.assign(static_cast<std::size_t>(max_n), 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    require(!references[i].empty(), ErrorKind::BadConfig, "bleu: empty reference set");
    auto hyp = tokenize(hypotheses[i]);
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : references[i]) refs.push_back(tokenize(r));
    st.hyp_len += hyp.size();
    // closest reference length, shorter on ties
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
      auto d = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    st.ref_len += best;
    for (int n = 1; n <= max_n; ++n) {
      auto hc = count_ngrams(hyp, n);
      std::map<Ngram, int> max_ref;
      for (const auto& r : refs)
        for (auto& [g, c] : count_ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
      for (auto& [g, c] : hc) {
        auto it = max_ref.find(g);
        st.matches[static_cast<std::size_t>(n - 1)] += static_cast<std::size_t>(std::min(c, it == max_ref.end() ? 0 : it->second));
        st.totals[static_cast<std::size_t>(n - 1)] += static_cast<std::size_t>(c);
      }
    }
  }
  return st;
}

/// Corpus BLEU: uniform weights over orders 1..max_n, clipped precision,
/// add-one smoothing for orders >= 2, closest-reference brevity penalty.
inline double bleu_n(const std::vector<std::string>& hypotheses,
                     const std::vector<std::vector<std::string>>& references, int max_n) {
  auto st = bleu_stats(hypotheses, references, max_n);
  if (st.hyp_len == 0 || st.matches[0] == 0) return 0.0;
  double log_sum = std::log(static_cast<double>(st.matches[0]) / static_cast<double>(st.totals[0]));
  for (int n = 2; n <= max_n; ++n) {
    auto i = static_cast<std::size_t>(n - 1);
    log_sum += std::log((static_cast<double>(st.matches[i]) + 1.0) / (static_cast<double>(st.totals[i]) + 1.0));
  }
  double bp = st.hyp_len > st.ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(st.ref_len) / static_cast<double>(st.hyp_len));
  return bp * std::exp(log_sum / max_n);
}

struct EvalReport {
  double bleu1 = 0, bleu3 = 0, dist2 = 0, dist3 = 0, voc_u = 0, mean_similarity = 0;
  std::size_t records = 0, captions = 0, reference_captions = 0;
  int n_candidates = 0, eval_steps = 0;

  nlohmann::json to_json() const {
    return {{"bleu1", bleu1},
            {"bleu3", bleu3},
            {"dist2", dist2},
            {"dist3", dist3},
            {"voc_u", voc_u},
            {"voc_u_vocabulary", "model training vocabulary"},
            {"mean_similarity", mean_similarity},
            {"records", records},
            {"captions", captions},
            {"reference_captions", reference_captions},
            {"n_candidates", n_candidates},
            {"eval_steps", eval_steps}};
  }

  std::string to_table() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "metric           value\n"
                  "B@1              %.4f\n"
                  "B@3              %.4f\n"
                  "D@2              %.4f\n"
                  "D@3              %.4f\n"
                  "Voc-u (%%)        %.2f   (of the model training vocabulary)\n"
                  "similarity       %.4f\n"
                  "records          %zu\n"
                  "candidates (n)   %d\n"
                  "eval steps       %d\n",
                  bleu1, bleu3, dist2, dist3, voc_u, mean_similarity, records, n_candidates, eval_steps);
    return buf;
  }
};

/// Metrics of one generated caption per record against its references.
inline EvalReport score_outputs(const std::vector<FeatureRecord>& records, const std::vector<std::string>& generated,
                                const Vocabulary& vocab, const TextEncoder& encoder) {
  require(records.size() == generated.size(), ErrorKind::LengthMismatch, "one generated caption per record");
  EvalReport rep;
  std::vector<std::vector<std::string>> refs;
  for (const auto& r : records) refs.push_back(r.captions), rep.reference_captions += r.captions.size();
  rep.records = records.size();
  rep.captions = generated.size();
  rep.bleu1 = bleu_n(generated, refs, 1);
  rep.bleu3 = bleu_n(generated, refs, 3);
  auto dist_or_zero = [&](int n) {
    try {
      return distinct_n(generated, n);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoNGrams) throw;
      return 0.0;
    }
  };
  rep.dist2 = dist_or_zero(2);
  rep.dist3 = dist_or_zero(3);
  rep.voc_u = vocab_usage(generated, vocab);
  double sim = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto f = feature_vector<double>(records[i]);
    try {
      sim += cosine_similarity(f, encoder(generated[i]));
      ++counted;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ZeroVector) throw;
    }
  }
  rep.mean_similarity = counted ? sim / static_cast<double>(counted) : 0.0;
  return rep;
}

/// Candidate seed block of record i; record 0 uses `seed` itself.
inline std::uint64_t record_seed(std::uint64_t seed, std::size_t index) {
  return seed + static_cast<std::uint64_t>(index) * (1ULL << 20);
}

struct RecordOutput {
  std::string id;
  std::vector<std::string> candidates;
  Selection selection;
};

struct EvalResult {
  EvalReport report;
  std::vector<RecordOutput> outputs;
};

/// Generate, select and score one caption per record. Records run in
/// parallel; results are collected in record order.
template <typename T>
EvalResult evaluate(const DenoiserModel<T>& model, const EmbeddingTable<T>& emb, const Vocabulary& vocab,
                    const Schedule& sched, const std::vector<FeatureRecord>& records, const DecodeOptions& opt,
                    std::uint64_t seed, const TextEncoder& encoder, unsigned threads = thread_count()) {
  require(!records.empty(), ErrorKind::EmptyInput, "evaluation dataset is empty");
  EvalResult res;
  res.outputs.resize(records.size());
  parallel_for(
      records.size(),
      [&](std::size_t i) {
        try {
          auto cands = generate_candidates(model, emb, vocab, feature_vector<T>(records[i]), sched, opt,
                                           record_seed(seed, i));
          RecordOutput out;
          out.id = records[i].id;
          for (auto& c : cands) out.candidates.push_back(c.caption);
          out.selection = select_best(feature_vector<double>(records[i]), out.candidates, encoder);
          res.outputs[i] = std::move(out);
        } catch (const Error& e) {
          throw Error(e.kind(), "record '" + records[i].id + "': " + e.what());
        }
      },
      threads);
  std::vector<std::string> generated;
  for (const auto& o : res.outputs) generated.push_back(o.selection.caption);
  res.report = score_outputs(records, generated, vocab, encoder);
  res.report.n_candidates = opt.n;
  res.report.eval_steps = opt.eval_steps;
  return res;
}

}  // namespace pfxd
