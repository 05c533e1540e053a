// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   acceptance [--work-dir DIR] [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "metric_oracle.hpp"
#include "pfxd/pfxd.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace pfxd;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const ScheduleKind kAllKinds[] = {ScheduleKind::Square, ScheduleKind::Linear, ScheduleKind::Cosine,
                                  ScheduleKind::TCosine, ScheduleKind::TLinear};

MatD scalar(double v) { return MatD::Constant(1, 1, v); }

// ---------------------------------------------------------------------------
// 1. schedules

/// Long-double rebuild of the cumulative products, independent of the
/// library's construction order.
std::vector<long double> reference_alpha_bars(ScheduleKind kind, int T, const ScheduleParams& p) {
  std::vector<long double> ab(static_cast<std::size_t>(T));
  const long double lo = p.beta_min, hi = p.beta_max, floor = p.alpha_bar_floor;
  auto interp = [&](int t, bool sq) {
    long double f = T == 1 ? 0.0L : static_cast<long double>(t - 1) / (T - 1);
    if (sq) f *= f;
    return lo + f * (hi - lo);
  };
  auto cosine = [&](int t) {
    long double c = std::cos((static_cast<long double>(t) / T + p.cosine_offset) / (1.0L + p.cosine_offset) *
                             std::numbers::pi_v<long double> / 2);
    return c * c;
  };
  long double prod = 1.0L, prev_c = 1.0L;
  for (int t = 1; t <= T; ++t) {
    long double beta;
    if (kind == ScheduleKind::Cosine || kind == ScheduleKind::TCosine) {
      long double cur = cosine(t) / cosine(0);
      beta = std::clamp(1.0L - cur / prev_c, 1e-12L, 0.999L);
      prev_c = cur;
    } else {
      beta = interp(t, kind == ScheduleKind::Square);
    }
    prod *= 1.0L - beta;
    ab[static_cast<std::size_t>(t - 1)] = prod;
  }
  if (kind == ScheduleKind::TLinear || kind == ScheduleKind::TCosine)
    for (auto& a : ab) a = floor + (1.0L - floor) * a;
  return ab;
}

Outcome criterion_schedule() {
  auto lin = make_schedule(ScheduleKind::Linear, 1000);
  bool endpoints = lin.beta_at(1) == 0.01 && lin.beta_at(1000) == 0.03;
  double worst = 0.0;
  for (auto kind : kAllKinds) {
    for (int T : {1, 10, 1000}) {
      ScheduleParams p;
      auto s = make_schedule(kind, T, p);
      auto ref = reference_alpha_bars(kind, T, p);
      long double prod = 1.0L;
      for (int t = 1; t <= T; ++t) {
        prod *= 1.0L - static_cast<long double>(s.beta_at(t));
        double a = s.alpha_bar_at(t);
        worst = std::max({worst, static_cast<double>(std::fabs(a - prod)),
                          static_cast<double>(std::fabs(a - ref[static_cast<std::size_t>(t - 1)]))});
      }
    }
  }
  return {endpoints && worst <= 1e-10,
          fmt("beta_1=%.17g beta_T=%.17g, max alpha_bar error %.2e over 5 kinds x T in {1,10,1000}", lin.beta_at(1),
              lin.beta_at(1000), worst)};
}

// ---------------------------------------------------------------------------
// 2. reconstruct_x0 inverts q_sample

Outcome criterion_inverse() {
  Rng rng(2);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto kind = kAllKinds[i % 5];
    auto s = make_schedule(kind, 1000);
    int t = static_cast<int>(rng.uniform_int(1, 1000));
    MatD x0 = rng.normal_matrix<double>(4, 48);
    MatD eps = rng.normal_matrix<double>(4, 48);
    MatD back = reconstruct_x0(q_sample(x0, t, s, eps), t, s, eps);
    worst = std::max(worst, (back - x0).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-6, fmt("max |x0 - reconstruct(q_sample(x0))| = %.2e over 1000 cases", worst)};
}

// ---------------------------------------------------------------------------
// 3. posterior against grid Bayes and Monte Carlo

Outcome criterion_posterior() {
  auto s = make_schedule(ScheduleKind::Linear, 5, 0.1, 0.4);
  double worst = 0.0;
  for (double x0 : {-1.2, 0.0, 0.8}) {
    for (int t = 2; t <= 5; ++t) {
      for (double xt : {-1.0, 0.3, 1.7}) {
        // q(x_{t-1} | x_t, x0) is proportional to q(x_t | x_{t-1}) q(x_{t-1} | x0)
        const double ab_prev = s.alpha_bar_at(t - 1), beta = s.beta_at(t);
        const int n = 4001;
        const double lo = -8.0, hi = 8.0, h = (hi - lo) / (n - 1);
        double z = 0.0, m1 = 0.0, m2 = 0.0;
        for (int i = 0; i < n; ++i) {
          double u = lo + i * h;
          double a = xt - std::sqrt(1.0 - beta) * u;
          double b = u - std::sqrt(ab_prev) * x0;
          double w = std::exp(-a * a / (2 * beta) - b * b / (2 * (1.0 - ab_prev)));
          z += w, m1 += w * u, m2 += w * u * u;
        }
        double mean = m1 / z, var = m2 / z - mean * mean;
        auto p = posterior(scalar(xt), scalar(x0), t, s);
        worst = std::max({worst, std::abs(p.mean(0, 0) - mean), std::abs(p.var - var)});
      }
    }
  }

  // Sampling with a denoiser that returns the true noise must reproduce the
  // analytic posterior.
  auto s10 = make_schedule(ScheduleKind::Linear, 10, 0.05, 0.3);
  const int trials = 10000;
  double worst_z = 0.0;
  Rng rng(3);
  for (int t : {2, 6, 10}) {
    const double x0 = -0.6, eps = 0.9;
    MatD xt = q_sample(scalar(x0), t, s10, scalar(eps));
    DenoiseFn<double> oracle = [&](const MatD&, int, const MatD&) { return scalar(eps); };
    auto p = posterior(xt, scalar(x0), t, s10);
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < trials; ++i) {
      double y = p_sample_step(xt, t, s10, oracle, scalar(0.0), scalar(rng.normal()))(0, 0);
      sum += y, sq += y * y;
    }
    double mean = sum / trials, var = sq / trials - mean * mean;
    double z_mean = std::abs(mean - p.mean(0, 0)) / std::sqrt(p.var / trials);
    double z_var = std::abs(var - p.var) / (p.var * std::sqrt(2.0 / (trials - 1)));
    worst_z = std::max({worst_z, z_mean, z_var});
  }
  return {worst <= 1e-3 && worst_z < 3.0,
          fmt("grid Bayes max error %.2e (36 cases); Monte Carlo max |z| %.2f over 3 steps x 10k draws", worst,
              worst_z)};
}

// ---------------------------------------------------------------------------
// 4. denoiser gradients

Outcome criterion_gradients() {
  auto cfg = pfxd::testing::tiny_config();
  Rng rng(4);
  auto model = DenoiserModel<double>::init(cfg, rng);
  model.params().visit(
      [&](const std::string&, Mat<double>& p) { p += rng.normal_matrix<double>(p.rows(), p.cols(), 0.1); });
  const int B = 2;
  MatD x = rng.normal_matrix<double>(B * cfg.k, cfg.d1);
  MatD feat = rng.normal_matrix<double>(B, cfg.feat_dim);
  MatD w = rng.normal_matrix<double>(B * cfg.k, cfg.d1);
  std::vector<int> ts = {3, 640};
  auto loss = [&]() { return (model.forward(x, ts, feat, nullptr).array() * w.array()).sum(); };

  DenoiserCache<double> cache;
  model.forward(x, ts, feat, &cache);
  auto grads = DenoiserParams<double>::zeros(cfg);
  model.backward(cache, w, grads, nullptr);

  auto params = pfxd::testing::flat_params(model.params());
  auto gflat = pfxd::testing::flat_params(grads);
  std::vector<std::size_t> idx(params.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(std::min<std::size_t>(100, idx.size()));
  double worst = 0.0;
  std::string worst_name;
  for (auto i : idx) {
    double fd = pfxd::testing::central_difference(loss, params[i].second, 1e-5);
    double err = pfxd::testing::relative_error(fd, *gflat[i].second);
    if (err > worst) worst = err, worst_name = params[i].first;
  }
  return {idx.size() >= 100 && worst < 1e-3,
          fmt("%zu of %zu parameters, max relative error %.2e (%s)", idx.size(), params.size(), worst,
              worst_name.c_str())};
}

// ---------------------------------------------------------------------------
// 8. metrics against brute force

Outcome criterion_metrics() {
  const std::vector<std::string> lexicon = {"a", "red", "circle", "top", "left", "and"};
  Vocabulary vocab(std::vector<std::string>{"a", "and", "circle", "left", "red", "top", "zebra"});
  std::vector<std::string> vwords(vocab.tokens().begin() + kReservedTokens, vocab.tokens().end());
  Rng rng(8);
  int mismatches = 0, checks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto c = oracle::random_corpus(rng, lexicon);
    for (int n = 1; n <= 4; ++n, ++checks)
      if (bleu_n(c.hyps, c.refs, n) != oracle::bleu(c.hyps, c.refs, n)) ++mismatches;
    for (int n = 1; n <= 3; ++n, ++checks) {
      double want = oracle::distinct(c.hyps, n);
      try {
        double got = distinct_n(c.hyps, n);
        if (want < 0 || got != want) ++mismatches;
      } catch (const Error& e) {
        if (!(want < 0 && e.kind() == ErrorKind::NoNGrams)) ++mismatches;
      }
    }
    ++checks;
    if (vocab_usage(c.hyps, vocab) != oracle::vocab_usage(c.hyps, vwords)) ++mismatches;
  }
  double hand = distinct_n({"a a a"}, 2);
  return {mismatches == 0 && hand == 0.5,
          fmt("%d/%d exact matches on 100 corpora; Dist-2(\"a a a\") = %g", checks - mismatches, checks, hand)};
}

// ---------------------------------------------------------------------------
// trained-model criteria

/// Every id in range, nothing but padding after the end, no unknown word and
/// at least one word.
bool valid_sequence(const TokenSequence& seq, const Vocabulary& vocab) {
  bool ended = false;
  int words = 0;
  for (TokenId id : seq) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) return false;
    if (ended) {
      if (id != kPad) return false;
    } else if (id == kEos || id == kPad) {
      ended = true;
    } else if (id == kUnk) {
      return false;
    } else {
      ++words;
    }
  }
  return words > 0;
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.steps = 3000;
  c.batch_size = 32;
  c.param = Parameterization::X0;
  c.embedding_init_std = 1.0;
  c.lr = 2e-3;
  c.seed = 0;
  return c;
}

DenoiserConfig desk_model_config() {
  DenoiserConfig c;
  c.feat_dim = kToyFeatDim;
  return c;
}

struct Trained {
  TrainConfig train;
  DenoiserConfig model_cfg;
  TrainState<float> state;
  Vocabulary vocab;
  Schedule sched;
  std::vector<FeatureRecord> records;
  double train_seconds = 0.0;
};

DecodeOptions decode_opts(const Trained& m, int n, int eval_steps = 50) {
  DecodeOptions d;
  d.n = n;
  d.eval_steps = eval_steps;
  d.param = m.train.param;
  return d;
}

TextEncoder toy_encoder() {
  return [](const std::string& s) { return toy_encode_caption(s); };
}

Trained train_desk_model(const fs::path& dir) {
  Trained m{desk_train_config(), desk_model_config(), {}, toy_vocabulary(), make_schedule(ScheduleKind::TLinear, 1000),
            make_toy_dataset(32, 7)};
  m.sched = make_schedule(m.train.schedule, m.train.T, m.train.schedule_params);
  auto t0 = Clock::now();
  m.state = fit<float>(m.train, m.model_cfg, m.records, m.vocab, (dir / "desk.ckpt").string());
  m.train_seconds = seconds_since(t0);
  return m;
}

Outcome criterion_overfit(const Trained& m) {
  auto t0 = Clock::now();
  auto enc = toy_encoder();
  std::vector<std::string> chosen;
  std::size_t sequences = 0, invalid = 0;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    auto cands = generate_candidates(m.state.model, m.state.emb, m.vocab, feature_vector<float>(m.records[i]), m.sched,
                                     decode_opts(m, 5), record_seed(m.train.seed, i));
    std::vector<std::string> caps;
    for (const auto& c : cands) {
      ++sequences;
      if (!valid_sequence(c.tokens, m.vocab)) ++invalid;
      caps.push_back(c.caption);
    }
    chosen.push_back(select_best(feature_vector<double>(m.records[i]), caps, enc).caption);
  }
  auto rep = score_outputs(m.records, chosen, m.vocab, enc);
  double total = m.train_seconds + seconds_since(t0);
  return {rep.bleu1 >= 0.9 && invalid == 0 && m.train.steps <= 3000 && total <= 15 * 60,
          fmt("BLEU-1 %.4f (B@3 %.4f) on 32 training scenes after %d steps, %zu/%zu sequences valid, %.0fs",
              rep.bleu1, rep.bleu3, m.train.steps, sequences - invalid, sequences, total)};
}

/// Held-out scenes: a fresh dataset with any scene identical to a training
/// scene removed.
std::vector<FeatureRecord> held_out_scenes(const std::vector<FeatureRecord>& train, std::size_t count) {
  std::vector<FeatureRecord> out;
  auto pool = make_toy_dataset(count + 50, 1007);
  for (auto& r : pool) {
    bool seen = std::any_of(train.begin(), train.end(), [&](const FeatureRecord& t) { return t.feat == r.feat; });
    if (!seen && out.size() < count) out.push_back(std::move(r));
  }
  return out;
}

struct HeldOutRun {
  std::vector<FeatureRecord> records;
  std::vector<std::vector<std::string>> candidates;  // 15 per scene
  std::vector<bool> valid;
  double seconds = 0.0;
};

// Candidate i always uses seed base + i, so the first n of 15 chains are
// exactly the n-candidate run.
HeldOutRun sample_held_out(const Trained& m, std::size_t count, int n_max) {
  HeldOutRun run;
  run.records = held_out_scenes(m.records, count);
  auto t0 = Clock::now();
  for (std::size_t i = 0; i < run.records.size(); ++i) {
    auto cands = generate_candidates(m.state.model, m.state.emb, m.vocab, feature_vector<float>(run.records[i]),
                                     m.sched, decode_opts(m, n_max), record_seed(m.train.seed + 1, i));
    std::vector<std::string> caps;
    bool ok = true;
    for (const auto& c : cands) caps.push_back(c.caption), ok = ok && valid_sequence(c.tokens, m.vocab);
    run.candidates.push_back(std::move(caps));
    run.valid.push_back(ok);
  }
  run.seconds = seconds_since(t0);
  return run;
}

Outcome criterion_selection(const HeldOutRun& run) {
  auto t0 = Clock::now();
  auto enc = toy_encoder();
  const int ns[] = {1, 5, 10, 15};
  std::vector<std::vector<double>> sims(4);
  for (std::size_t i = 0; i < run.records.size(); ++i) {
    auto feat = feature_vector<double>(run.records[i]);
    for (int j = 0; j < 4; ++j) {
      std::vector<std::string> prefix(run.candidates[i].begin(), run.candidates[i].begin() + ns[j]);
      double s = ns[j] == 1 ? cosine_similarity(feat, enc(prefix.front())) : select_best(feat, prefix, enc).score;
      sims[static_cast<std::size_t>(j)].push_back(s);
    }
  }
  const double count = static_cast<double>(run.records.size());
  std::vector<double> means;
  for (const auto& v : sims) means.push_back(std::accumulate(v.begin(), v.end(), 0.0) / count);
  bool monotone = std::is_sorted(means.begin(), means.end());

  // one-sided paired t-test, n=5 against n=1
  double mean_d = means[1] - means[0], ss = 0.0;
  for (std::size_t i = 0; i < sims[0].size(); ++i) ss += std::pow(sims[1][i] - sims[0][i] - mean_d, 2);
  double sd = std::sqrt(ss / (count - 1));
  double p = 1.0;
  if (sd > 0) {
    boost::math::students_t dist(count - 1);
    p = boost::math::cdf(boost::math::complement(dist, mean_d / (sd / std::sqrt(count))));
  } else if (mean_d > 0) {
    p = 0.0;
  }
  double secs = run.seconds + seconds_since(t0);
  return {run.records.size() >= 200 && monotone && means[1] > means[0] && p < 0.05 && secs < 600,
          fmt("%zu held-out scenes, mean similarity n=1 %.4f, n=5 %.4f, n=10 %.4f, n=15 %.4f; paired t p=%.2g; %.0fs",
              run.records.size(), means[0], means[1], means[2], means[3], p, secs)};
}

double dist2(const std::vector<std::string>& caps) {
  try {
    return distinct_n(caps, 2);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NoNGrams) throw;
    return 0.0;
  }
}

Outcome criterion_diversity(const Trained& m, const HeldOutRun& run) {
  auto t0 = Clock::now();
  const int n = 8;
  std::size_t diverse = 0;
  std::vector<std::string> multi, single;
  for (std::size_t i = 0; i < run.records.size(); ++i) {
    std::vector<std::string> caps(run.candidates[i].begin(), run.candidates[i].begin() + n);
    if (std::set<std::string>(caps.begin(), caps.end()).size() >= 2) ++diverse;
    multi.insert(multi.end(), caps.begin(), caps.end());
    // same seed n times: the chain is deterministic, so this is one caption
    // repeated; rerun it once to confirm rather than assume
    single.insert(single.end(), n, caps.front());
  }
  bool repeat_same = true;
  for (std::size_t i = 0; i < std::min<std::size_t>(8, run.records.size()); ++i) {
    auto again = generate_candidates(m.state.model, m.state.emb, m.vocab, feature_vector<float>(run.records[i]),
                                     m.sched, decode_opts(m, 1), record_seed(m.train.seed + 1, i));
    repeat_same = repeat_same && again.front().caption == run.candidates[i].front();
  }
  double frac = static_cast<double>(diverse) / static_cast<double>(run.records.size());
  double d_multi = dist2(multi), d_single = dist2(single);
  double secs = run.seconds + seconds_since(t0);
  return {frac >= 0.5 && d_multi > d_single && repeat_same && secs < 600,
          fmt("%.1f%% of %zu scenes give >=2 distinct captions at n=8; corpus Dist-2 %.4f (8 seeds) vs %.4f (one seed x8); %.0fs",
              100.0 * frac, run.records.size(), d_multi, d_single, secs)};
}

Outcome criterion_respacing(const Trained& m) {
  const std::size_t scenes = 4;
  double secs[2] = {0, 0};
  std::size_t valid[2] = {0, 0};
  const int steps[2] = {50, 1000};
  std::string example[2];
  for (int r = 0; r < 2; ++r) {
    auto t0 = Clock::now();
    for (std::size_t i = 0; i < scenes; ++i) {
      auto cands = generate_candidates(m.state.model, m.state.emb, m.vocab, feature_vector<float>(m.records[i]),
                                       m.sched, decode_opts(m, 1, steps[r]), record_seed(m.train.seed, i));
      if (valid_sequence(cands.front().tokens, m.vocab)) ++valid[r];
      if (i == 0) example[r] = cands.front().caption;
    }
    secs[r] = seconds_since(t0);
  }
  double ratio = secs[0] / secs[1];
  return {valid[0] == scenes && valid[1] == scenes && ratio < 0.1,
          fmt("valid %zu/%zu at 50 steps, %zu/%zu at 1000; time %.2fs vs %.2fs (ratio %.3f); \"%s\" / \"%s\"",
              valid[0], scenes, valid[1], scenes, secs[0], secs[1], ratio, example[0].c_str(), example[1].c_str())};
}

Outcome criterion_determinism(const Trained& m, const fs::path& dir) {
  // two fresh short runs of the same configuration, then sampling twice
  TrainConfig c = m.train;
  c.steps = 200;
  c.checkpoint_every = 100;
  std::string bytes[2], samples[2];
  for (int r = 0; r < 2; ++r) {
    auto path = dir / ("determinism_" + std::to_string(r) + ".ckpt");
    auto st = fit<float>(c, m.model_cfg, m.records, m.vocab, path.string());
    bytes[r] = io::read_file(path.string());
    auto loaded = load_model<float>(Checkpoint::load(path.string()));
    std::ostringstream out;
    for (std::size_t i = 0; i < 4; ++i) {
      auto cands = generate_candidates(loaded.model, loaded.emb, loaded.vocab, feature_vector<float>(m.records[i]),
                                       m.sched, decode_opts(m, 5), record_seed(c.seed, i));
      for (const auto& cand : cands) {
        out << cand.caption << '\n';
        out.write(reinterpret_cast<const char*>(cand.latent.data()),
                  static_cast<std::streamsize>(cand.latent.size() * sizeof(float)));
      }
    }
    samples[r] = out.str();
  }
  // the long run's checkpoint on disk must also reload to the in-memory model
  auto reloaded = load_model<float>(Checkpoint::load((dir / "desk.ckpt").string()));
  bool same_model = state_checkpoint(m.state, m.vocab, m.train).serialize() ==
                    io::read_file((dir / "desk.ckpt").string()) &&
                    reloaded.emb.weights == m.state.emb.weights;
  bool pass = !bytes[0].empty() && bytes[0] == bytes[1] && samples[0] == samples[1] && same_model;
  return {pass, fmt("checkpoints %s (%zu bytes), samples %s (%zu bytes), desk checkpoint %s",
                    bytes[0] == bytes[1] ? "identical" : "DIFFER", bytes[0].size(),
                    samples[0] == samples[1] ? "identical" : "DIFFER", samples[0].size(),
                    same_model ? "matches the trained state" : "DIFFERS from the trained state")};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path dir = fs::temp_directory_path() / "pfxd_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      dir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: %s [--work-dir DIR] [--only 1,2,...]\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(dir);
  auto wanted = [&](int id) { return only.empty() || only.count(id) > 0; };

  int failed = 0;
  auto run = [&](int id, const char* name, const std::function<Outcome()>& f) {
    if (!wanted(id)) return;
    auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s [%d] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  };

  run(1, "schedule exactness", criterion_schedule);
  run(2, "algebraic inverse", criterion_inverse);
  run(3, "posterior correctness", criterion_posterior);
  run(4, "gradient fidelity", criterion_gradients);
  run(8, "metric oracles", criterion_metrics);

  bool needs_model = false;
  for (int id : {5, 6, 7, 9, 10}) needs_model = needs_model || wanted(id);
  if (needs_model) {
    std::fprintf(stderr, "training the desk model (3000 steps)...\n");
    std::optional<Trained> m;
    try {
      m = train_desk_model(dir);
    } catch (const std::exception& e) {
      for (int id : {5, 6, 7, 9, 10})
        if (wanted(id)) std::printf("FAIL [%d] training failed: %s\n", id, e.what()), ++failed;
    }
    if (m) {
      std::fprintf(stderr, "trained in %.0fs\n", m->train_seconds);
      run(5, "overfit end-to-end", [&] { return criterion_overfit(*m); });
      std::optional<HeldOutRun> held;
      if (wanted(6) || wanted(7)) held = sample_held_out(*m, 200, 15);
      run(6, "candidate-selection trend", [&] { return criterion_selection(*held); });
      run(7, "diversity mechanism", [&] { return criterion_diversity(*m, *held); });
      run(9, "respaced sampling", [&] { return criterion_respacing(*m); });
      run(10, "determinism", [&] { return criterion_determinism(*m, dir); });
    }
  }
  std::printf("%s: %d criteria failed\n", failed == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL", failed);
  return failed == 0 ? 0 : 1;
}
