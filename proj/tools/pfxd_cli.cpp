// pfxd: toy data generation, training, sampling, evaluation and schedule
// inspection for the prefix-conditioned text diffusion model.
//
// Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "pfxd/pfxd.hpp"

namespace fs = std::filesystem;
using namespace pfxd;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::BadConfig: return 1;
    case ErrorKind::NonFinite: return 3;
    default: return 2;
  }
}

/// Registers one --<key> flag per config key on a subcommand. Values are
/// kept as strings and applied after the config file.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app, const std::vector<std::string>& names) {
    app->add_option("--config", config_path, "flat JSON config file (flags override it)");
    for (const auto& name : names) {
      const auto& key = find_config_key(name);
      std::string flag = "--" + name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option(flag, values[name], key.help);
    }
  }

  RunConfig resolve(const CLI::App* app) const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    for (const auto& [name, text] : values) {
      std::string flag = "--" + name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (app->count(flag) > 0) set_config_value(c, name, parse_flag_value(name, text));
    }
    return c;
  }
};

std::vector<std::string> all_key_names() {
  std::vector<std::string> names;
  for (const auto& k : config_keys()) names.push_back(k.name);
  return names;
}

std::optional<TextEncoder> encoder_for(std::size_t feat_dim) {
  if (feat_dim != static_cast<std::size_t>(kToyFeatDim)) return std::nullopt;
  return TextEncoder([](const std::string& s) { return toy_encode_caption(s); });
}

Vocabulary dataset_vocabulary(const RunConfig& c, const std::vector<FeatureRecord>& records) {
  if (!c.vocab.empty()) return Vocabulary::load(c.vocab);
  std::vector<std::string> caps;
  for (const auto& r : records) caps.insert(caps.end(), r.captions.begin(), r.captions.end());
  return Vocabulary::build(caps);
}

std::vector<FeatureRecord> load_dataset(const RunConfig& c) {
  require(!c.features.empty(), ErrorKind::BadConfig, "config key 'features' is required");
  auto records = read_features(c.features);
  auto problems = validate_features(records);
  if (!problems.empty()) throw Error(ErrorKind::BadConfig, c.features + ": " + problems.front());
  require(!records.empty(), ErrorKind::EmptyInput, c.features + ": no records");
  return records;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(std::size_t count, std::uint64_t seed, const std::string& out_dir) {
  require(count >= 1, ErrorKind::BadConfig, "--count must be >= 1");
  fs::create_directories(out_dir);
  auto records = make_toy_dataset(count, seed);
  auto feat_path = (fs::path(out_dir) / "features.bin").string();
  auto cap_path = (fs::path(out_dir) / "captions.tsv").string();
  auto vocab_path = (fs::path(out_dir) / "vocab.txt").string();
  write_features(feat_path, records);
  write_captions(cap_path, records);
  toy_vocabulary().save(vocab_path);
  std::printf("wrote %zu records (d_f=%d, %zu captions) to %s\n", records.size(), kToyFeatDim, records.size() * 5,
              feat_path.c_str());
  std::printf("captions: %s\nvocabulary: %s (%zu tokens)\n", cap_path.c_str(), vocab_path.c_str(),
              toy_vocabulary().size());
  return 0;
}

int cmd_train(RunConfig c) {
  auto records = load_dataset(c);
  if (c.model.feat_dim != static_cast<int>(records.front().feat.size())) {
    std::fprintf(stderr, "note: feat_dim set to %zu from %s\n", records.front().feat.size(), c.features.c_str());
    c.model.feat_dim = static_cast<int>(records.front().feat.size());
  }
  c.validate();
  auto vocab = dataset_vocabulary(c, records);
  FitOptions fo;
  fo.log_path = c.log.empty() ? c.checkpoint + ".log.csv" : c.log;
  const auto every = std::max(1, c.train.steps / 20);
  fo.on_step = [&](std::int64_t step, const LossValue& lv) {
    if (step % every == 0 || step == c.train.steps)
      std::fprintf(stderr, "step %6lld  loss %.4f  mse %.4f  nll %.4f\n", static_cast<long long>(step), lv.total,
                   lv.mse, lv.nll);
  };
  auto st = fit<float>(c.train, c.model, records, vocab, c.checkpoint, fo);
  std::printf("trained %lld steps on %zu records; checkpoint %s; log %s\n", static_cast<long long>(st.step),
              records.size(), c.checkpoint.c_str(), fo.log_path.c_str());
  return 0;
}

struct LoadedRun {
  LoadedModel<float> lm;
  TrainConfig train;
  Schedule sched;
};

LoadedRun load_run(const RunConfig& c) {
  auto lm = load_model<float>(Checkpoint::load(c.checkpoint));
  auto train = lm.metadata.contains("train") ? train_config_from_json(lm.metadata["train"]) : c.train;
  auto sched = make_schedule(train.schedule, train.T, train.schedule_params);
  return {std::move(lm), train, std::move(sched)};
}

DecodeOptions decode_options(const RunConfig& c, const TrainConfig& train) {
  DecodeOptions d;
  d.n = c.n_candidates;
  d.eval_steps = c.eval_steps;
  d.param = train.param;
  d.clamp = c.clamp;
  return d;
}

int cmd_sample(const RunConfig& c, const std::string& id, int index) {
  auto run = load_run(c);
  auto records = load_dataset(c);
  const FeatureRecord* rec = nullptr;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < records.size(); ++i)
    if ((!id.empty() && records[i].id == id) || (id.empty() && static_cast<int>(i) == index)) rec = &records[i], pos = i;
  require(rec != nullptr, ErrorKind::BadConfig, id.empty() ? "record index out of range" : "no record with id '" + id + "'");
  auto opt = decode_options(c, run.train);
  auto cands = generate_candidates(run.lm.model, run.lm.emb, run.lm.vocab, feature_vector<float>(*rec), run.sched,
                                   opt, record_seed(c.train.seed, pos));
  std::vector<std::string> caps;
  for (const auto& cand : cands) caps.push_back(cand.caption);
  auto enc = encoder_for(rec->feat.size());
  std::optional<Selection> sel;
  if (enc) sel = select_best(feature_vector<double>(*rec), caps, *enc);
  require(sel || caps.size() == 1, ErrorKind::BadConfig,
          "no text encoder for d_f=" + std::to_string(rec->feat.size()) + "; use --n-candidates 1");
  std::printf("record %s\n", rec->id.c_str());
  for (std::size_t i = 0; i < caps.size(); ++i) {
    bool chosen = sel ? sel->index == i : true;
    if (sel) std::printf("%c %2zu  %7.4f  %s\n", chosen ? '*' : ' ', i, sel->scores[i], caps[i].c_str());
    else std::printf("* %2zu  %s\n", i, caps[i].c_str());
  }
  std::printf("chosen: %s\n", sel ? sel->caption.c_str() : caps.front().c_str());
  return 0;
}

int cmd_eval(const RunConfig& c, std::size_t limit) {
  auto run = load_run(c);
  auto records = load_dataset(c);
  if (limit > 0 && records.size() > limit) records.resize(limit);
  auto enc = encoder_for(records.front().feat.size());
  require(enc.has_value(), ErrorKind::BadConfig,
          "no text encoder for d_f=" + std::to_string(records.front().feat.size()));
  auto res = evaluate(run.lm.model, run.lm.emb, run.lm.vocab, run.sched, records, decode_options(c, run.train),
                      c.train.seed, *enc);
  std::printf("%s", res.report.to_table().c_str());
  if (!c.report.empty()) {
    nlohmann::json j = res.report.to_json();
    j["checkpoint"] = c.checkpoint;
    j["features"] = c.features;
    j["seed"] = c.train.seed;
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& o : res.outputs)
      outs.push_back({{"id", o.id}, {"caption", o.selection.caption}, {"score", o.selection.score},
                      {"candidates", o.candidates}});
    j["outputs"] = outs;
    io::write_file(c.report, j.dump(2) + "\n");
    std::printf("report: %s\n", c.report.c_str());
  }
  return 0;
}

int cmd_dump_schedule(const RunConfig& c, const std::string& out) {
  auto csv = dump_schedule(make_schedule(c.train.schedule, c.train.T, c.train.schedule_params));
  if (out.empty()) std::fwrite(csv.data(), 1, csv.size(), stdout);
  else io::write_file(out, csv);
  return 0;
}

int cmd_validate(const std::string& path) {
  auto records = read_features(path);
  auto problems = validate_features(records);
  for (const auto& p : problems) std::printf("%s\n", p.c_str());
  if (!problems.empty()) return 2;
  std::printf("ok: %zu records, d_f=%zu\n", records.size(), records.empty() ? 0 : records.front().feat.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prefix-conditioned text diffusion for captioning"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write a toy dataset (features.bin, captions.tsv, vocab.txt)");
  std::size_t count = 32;
  std::uint64_t gen_seed = 0;
  std::string out_dir = ".";
  gen->add_option("--count", count, "number of scenes");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out-dir", out_dir, "output directory");

  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  ConfigFlags train_flags;
  train_flags.attach(train, all_key_names());

  auto* sample = app.add_subcommand("sample", "print candidates and the selected caption for one record");
  ConfigFlags sample_flags;
  sample_flags.attach(sample, {"checkpoint", "features", "n_candidates", "eval_steps", "clamp", "seed"});
  std::string record_id;
  int record_index = 0;
  sample->add_option("--id", record_id, "record id");
  sample->add_option("--index", record_index, "record index when no id is given");

  auto* ev = app.add_subcommand("eval", "generate one caption per record and report metrics");
  ConfigFlags eval_flags;
  eval_flags.attach(ev, {"checkpoint", "features", "n_candidates", "eval_steps", "clamp", "seed", "report"});
  std::size_t limit = 0;
  ev->add_option("--limit", limit, "evaluate only the first N records");

  auto* dump = app.add_subcommand("dump-schedule", "print a noise schedule as CSV");
  ConfigFlags dump_flags;
  dump_flags.attach(dump, {"schedule", "T", "beta_min", "beta_max", "cosine_offset", "alpha_bar_floor"});
  std::string dump_out;
  dump->add_option("--out", dump_out, "write to a file instead of stdout");

  auto* val = app.add_subcommand("validate-features", "check a feature file");
  std::string val_path;
  val->add_option("path", val_path, "feature file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(count, gen_seed, out_dir);
    if (*train) return cmd_train(train_flags.resolve(train));
    if (*sample) {
      auto c = sample_flags.resolve(sample);
      c.validate();
      return cmd_sample(c, record_id, record_index);
    }
    if (*ev) {
      auto c = eval_flags.resolve(ev);
      c.validate();
      return cmd_eval(c, limit);
    }
    if (*dump) return cmd_dump_schedule(dump_flags.resolve(dump), dump_out);
    if (*val) return cmd_validate(val_path);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
