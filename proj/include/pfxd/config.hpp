#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfxd/denoiser.hpp"
#include "pfxd/error.hpp"
#include "pfxd/training.hpp"

namespace pfxd {

/// Everything a command-line run can set. Defaults are the desk-scale
/// settings (batch 32, 3000 steps) with the published values elsewhere.
struct RunConfig {
  TrainConfig train;
  DenoiserConfig model;
  int n_candidates = 5;
  int eval_steps = 50;
  bool clamp = true;
  std::string features;    // PFXFEAT1 dataset
  std::string vocab;       // optional; built from the dataset captions if empty
  std::string checkpoint = "pfxd.ckpt";
  std::string log;         // training CSV; defaults to <checkpoint>.log.csv
  std::string report;      // eval JSON output

  void validate() const {
    train.validate();
    model.validate();
    require(n_candidates >= 1, ErrorKind::BadConfig, "config key 'n_candidates' must be >= 1");
    require(eval_steps >= 1 && eval_steps <= train.T, ErrorKind::BadConfig,
            "config key 'eval_steps' must be in 1..T (" + std::to_string(train.T) + ")");
  }
};

enum class ValueKind { Int, UInt, Real, Bool, String };

struct ConfigKey {
  std::string name;
  ValueKind kind;
  std::string help;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

namespace detail {

template <typename M>
ConfigKey make_key(std::string name, ValueKind kind, std::string help, M RunConfig::*group,
                   std::function<void(M&, const nlohmann::json&)> set, std::function<nlohmann::json(const M&)> get) {
  return {std::move(name), kind, std::move(help),
          [group, set](RunConfig& c, const nlohmann::json& j) { set(c.*group, j); },
          [group, get](const RunConfig& c) { return get(c.*group); }};
}

#define PFXD_KEY(group_type, group, field, kind, help)                                                  \
  detail::make_key<group_type>(#field, kind, help, &RunConfig::group,                                     \
                               [](group_type& g, const nlohmann::json& j) { j.get_to(g.field); },        \
                               [](const group_type& g) { return nlohmann::json(g.field); })

}  // namespace detail

/// The flat key table shared by the JSON loader and the command-line flags.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    using K = ValueKind;
    std::vector<ConfigKey> v = {
        PFXD_KEY(TrainConfig, train, T, K::Int, "diffusion steps"),
        PFXD_KEY(TrainConfig, train, batch_size, K::Int, "training batch size (full scale: 128)"),
        PFXD_KEY(TrainConfig, train, steps, K::Int, "optimizer steps (full scale: 200000)"),
        PFXD_KEY(TrainConfig, train, lr, K::Real, "Adam learning rate"),
        PFXD_KEY(TrainConfig, train, rounding_weight, K::Real, "weight of the rounding loss"),
        PFXD_KEY(TrainConfig, train, freeze_embedding, K::Bool, "keep the embedding table fixed"),
        PFXD_KEY(TrainConfig, train, embedding_init_std, K::Real, "embedding initialisation std"),
        PFXD_KEY(TrainConfig, train, clip_norm, K::Real, "global gradient-norm clip"),
        PFXD_KEY(TrainConfig, train, checkpoint_every, K::Int, "checkpoint interval in steps"),
        PFXD_KEY(TrainConfig, train, seed, K::UInt, "seed for training and sampling"),
        PFXD_KEY(DenoiserConfig, model, d1, K::Int, "token embedding width"),
        PFXD_KEY(DenoiserConfig, model, d2, K::Int, "transformer width"),
        PFXD_KEY(DenoiserConfig, model, k, K::Int, "caption length in tokens"),
        PFXD_KEY(DenoiserConfig, model, prefix_len, K::Int, "visual prefix length l"),
        PFXD_KEY(DenoiserConfig, model, layers, K::Int, "transformer layers"),
        PFXD_KEY(DenoiserConfig, model, heads, K::Int, "attention heads"),
        PFXD_KEY(DenoiserConfig, model, ffn_mult, K::Int, "feed-forward width multiplier"),
        PFXD_KEY(DenoiserConfig, model, feat_dim, K::Int, "image feature width"),
        PFXD_KEY(DenoiserConfig, model, prefix_hidden, K::Int, "prefix MLP hidden width (0: l*d2/2)"),
    };
    v.push_back(detail::make_key<TrainConfig>(
        "schedule", K::String, "noise schedule kind", &RunConfig::train,
        [](TrainConfig& t, const nlohmann::json& j) { t.schedule = parse_schedule_kind(j.get<std::string>()); },
        [](const TrainConfig& t) { return nlohmann::json(std::string(to_string(t.schedule))); }));
    v.push_back(detail::make_key<TrainConfig>(
        "parameterization", K::String, "network target: epsilon or x0", &RunConfig::train,
        [](TrainConfig& t, const nlohmann::json& j) {
          auto s = j.get<std::string>();
          require(s == "epsilon" || s == "x0", ErrorKind::BadConfig,
                  "config key 'parameterization' must be 'epsilon' or 'x0', got '" + s + "'");
          t.param = s == "epsilon" ? Parameterization::Epsilon : Parameterization::X0;
        },
        [](const TrainConfig& t) { return nlohmann::json(t.param == Parameterization::Epsilon ? "epsilon" : "x0"); }));
    auto sched_key = [&](const char* name, double ScheduleParams::*field, const char* help) {
      v.push_back(detail::make_key<TrainConfig>(
          name, K::Real, help, &RunConfig::train,
          [field](TrainConfig& t, const nlohmann::json& j) { t.schedule_params.*field = j.get<double>(); },
          [field](const TrainConfig& t) { return nlohmann::json(t.schedule_params.*field); }));
    };
    sched_key("beta_min", &ScheduleParams::beta_min, "first beta");
    sched_key("beta_max", &ScheduleParams::beta_max, "last beta");
    sched_key("cosine_offset", &ScheduleParams::cosine_offset, "cosine schedule offset s");
    sched_key("alpha_bar_floor", &ScheduleParams::alpha_bar_floor, "floor of truncated schedules");
    auto top = [&](const char* name, K kind, const char* help, auto field) {
      using F = std::remove_reference_t<decltype(RunConfig{}.*field)>;
      v.push_back({name, kind, help, [field](RunConfig& c, const nlohmann::json& j) { c.*field = j.get<F>(); },
                   [field](const RunConfig& c) { return nlohmann::json(c.*field); }});
    };
    top("n_candidates", K::Int, "candidates per image", &RunConfig::n_candidates);
    top("eval_steps", K::Int, "respaced sampling steps", &RunConfig::eval_steps);
    top("clamp", K::Bool, "snap x0 estimates to embeddings while sampling", &RunConfig::clamp);
    top("features", K::String, "feature file (PFXFEAT1)", &RunConfig::features);
    top("vocab", K::String, "vocabulary file", &RunConfig::vocab);
    top("checkpoint", K::String, "checkpoint path", &RunConfig::checkpoint);
    top("log", K::String, "training log CSV path", &RunConfig::log);
    top("report", K::String, "evaluation report JSON path", &RunConfig::report);
    return v;
  }();
  return keys;
}

#undef PFXD_KEY

inline const ConfigKey& find_config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw Error(ErrorKind::BadConfig, "unknown config key '" + name + "'");
}

inline void set_config_value(RunConfig& c, const std::string& name, const nlohmann::json& value) {
  const auto& key = find_config_key(name);
  try {
    if (key.kind == ValueKind::UInt && value.is_number_integer() && value.get<std::int64_t>() < 0)
      throw Error(ErrorKind::BadConfig, "config key '" + name + "' must be non-negative");
    bool ok = key.kind == ValueKind::String ? value.is_string()
              : key.kind == ValueKind::Bool ? value.is_boolean()
              : key.kind == ValueKind::Real ? value.is_number()
                                            : value.is_number_integer();
    if (!ok) throw Error(ErrorKind::BadConfig, "config key '" + name + "' has the wrong type: " + value.dump());
    key.set(c, value);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, "config key '" + name + "': " + e.what());
  }
}

/// Apply a flat JSON object on top of `c`. Unknown keys are rejected.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::BadConfig, "config must be a JSON object");
  for (const auto& [name, value] : j.items()) set_config_value(c, name, value);
}

/// Convert a command-line string into the key's JSON type.
inline nlohmann::json parse_flag_value(const std::string& name, const std::string& text) {
  const auto& key = find_config_key(name);
  auto fail = [&]() -> nlohmann::json {
    throw Error(ErrorKind::BadConfig, "config key '" + name + "': cannot parse '" + text + "'");
  };
  try {
    std::size_t used = 0;
    switch (key.kind) {
      case ValueKind::String: return text;
      case ValueKind::Bool:
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        return fail();
      case ValueKind::Real: {
        double v = std::stod(text, &used);
        return used == text.size() ? nlohmann::json(v) : fail();
      }
      case ValueKind::UInt: {
        if (!text.empty() && text[0] == '-') return fail();
        unsigned long long v = std::stoull(text, &used, 0);
        return used == text.size() ? nlohmann::json(static_cast<std::uint64_t>(v)) : fail();
      }
      case ValueKind::Int: {
        long long v = std::stoll(text, &used);
        return used == text.size() ? nlohmann::json(v) : fail();
      }
    }
  } catch (const std::logic_error&) {
    return fail();
  }
  return fail();
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : config_keys()) j[k.name] = k.get(c);
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, path + ": " + e.what());
  }
  apply_json(c, j);
  return c;
}

/// Training settings stored in a checkpoint's metadata.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  for (const auto& [name, value] : j.items())
    if (name != "adam_beta1" && name != "adam_beta2" && name != "adam_eps") set_config_value(c, name, value);
  return c.train;
}

}  // namespace pfxd
