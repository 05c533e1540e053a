#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pfxd/error.hpp"

namespace pfxd {

enum class ScheduleKind { Square, Linear, Cosine, TCosine, TLinear };

inline std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Square: return "square";
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Cosine: return "cosine";
    case ScheduleKind::TCosine: return "t_cosine";
    case ScheduleKind::TLinear: return "t_linear";
  }
  return "?";
}

inline ScheduleKind parse_schedule_kind(std::string_view name) {
  for (auto k : {ScheduleKind::Square, ScheduleKind::Linear, ScheduleKind::Cosine,
                 ScheduleKind::TCosine, ScheduleKind::TLinear})
    if (to_string(k) == name) return k;
  throw Error(ErrorKind::BadConfig, "unknown schedule kind '" + std::string(name) + "'");
}

struct ScheduleParams {
  double beta_min = 0.01;
  double beta_max = 0.03;
  double cosine_offset = 0.008;
  double alpha_bar_floor = 1e-4;  // truncated kinds only
};

/// Variance schedule over timesteps 1..T. Arrays are stored 0-based, so
/// beta()[t-1] is beta_t; alpha_bar(0) is the clean-data value 1.
class Schedule {
 public:
  Schedule(ScheduleKind kind, std::vector<double> beta) : kind_(kind), beta_(std::move(beta)) {
    require(!beta_.empty(), ErrorKind::BadSchedule, "schedule needs at least one step");
    alpha_.resize(beta_.size());
    alpha_bar_.resize(beta_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      require(beta_[i] > 0.0 && beta_[i] < 1.0, ErrorKind::BadSchedule,
              "beta out of (0,1) at t=" + std::to_string(i + 1));
      alpha_[i] = 1.0 - beta_[i];
      prod *= alpha_[i];
      alpha_bar_[i] = prod;
    }
  }

  ScheduleKind kind() const { return kind_; }
  int steps() const { return static_cast<int>(beta_.size()); }
  const std::vector<double>& beta() const { return beta_; }
  const std::vector<double>& alpha() const { return alpha_; }
  const std::vector<double>& alpha_bar() const { return alpha_bar_; }

  double beta_at(int t) const { return beta_[index(t)]; }
  double alpha_at(int t) const { return alpha_[index(t)]; }
  double alpha_bar_at(int t) const { return alpha_bar_[index(t)]; }

  /// Like alpha_bar_at but t=0 yields 1.
  double alpha_bar_or_one(int t) const { return t == 0 ? 1.0 : alpha_bar_at(t); }

 private:
  std::size_t index(int t) const {
    if (t < 1 || t > steps())
      throw Error(ErrorKind::BadTimestep,
                  "t=" + std::to_string(t) + " outside 1.." + std::to_string(steps()));
    return static_cast<std::size_t>(t - 1);
  }

  ScheduleKind kind_;
  std::vector<double> beta_, alpha_, alpha_bar_;
};

namespace detail {

inline std::vector<double> interpolated_betas(int T, double lo, double hi, bool squared) {
  std::vector<double> beta(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    double f = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    if (squared) f *= f;
    // (1-f)*lo + f*hi pins both endpoints exactly
    beta[t - 1] = (1.0 - f) * lo + f * hi;
  }
  return beta;
}

inline std::vector<double> cosine_alpha_bars(int T, double s) {
  auto f = [&](double t) {
    double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> beta(static_cast<std::size_t>(T));
  double prev = 1.0, f0 = f(0.0);
  for (int t = 1; t <= T; ++t) {
    double cur = f(t) / f0;
    beta[t - 1] = std::clamp(1.0 - cur / prev, 1e-12, 0.999);
    prev = cur;
  }
  // re-accumulate from the clipped betas
  std::vector<double> ab(beta.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < beta.size(); ++i) ab[i] = prod *= 1.0 - beta[i];
  return ab;
}

inline std::vector<double> betas_from_alpha_bars(const std::vector<double>& ab) {
  std::vector<double> beta(ab.size());
  double prev = 1.0;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    beta[i] = 1.0 - ab[i] / prev;
    prev = ab[i];
  }
  return beta;
}

inline std::vector<double> alpha_bars_from_betas(const std::vector<double>& beta) {
  std::vector<double> ab(beta.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < beta.size(); ++i) ab[i] = prod *= 1.0 - beta[i];
  return ab;
}

}  // namespace detail

/// Build one of the five schedule kinds. beta_min/beta_max drive linear and
/// square (and their truncated forms); cosine ignores them.
///
/// Truncated kinds lift the base curve to ab' = floor + (1 - floor) * ab, which
/// keeps ab' above the floor while staying strictly decreasing (a hard max()
/// would produce zero betas in the tail).
inline Schedule make_schedule(ScheduleKind kind, int T, const ScheduleParams& p = {}) {
  require(T >= 1, ErrorKind::BadSchedule, "T must be >= 1");
  require(p.beta_min > 0.0 && p.beta_min <= p.beta_max && p.beta_max < 1.0,
          ErrorKind::BadSchedule, "need 0 < beta_min <= beta_max < 1");
  require(p.alpha_bar_floor > 0.0 && p.alpha_bar_floor < 1.0, ErrorKind::BadSchedule,
          "alpha_bar_floor must be in (0,1)");
  switch (kind) {
    case ScheduleKind::Linear:
      return Schedule(kind, detail::interpolated_betas(T, p.beta_min, p.beta_max, false));
    case ScheduleKind::Square:
      return Schedule(kind, detail::interpolated_betas(T, p.beta_min, p.beta_max, true));
    case ScheduleKind::Cosine:
      return Schedule(kind, detail::betas_from_alpha_bars(detail::cosine_alpha_bars(T, p.cosine_offset)));
    case ScheduleKind::TLinear:
    case ScheduleKind::TCosine: {
      auto ab = kind == ScheduleKind::TLinear
                    ? detail::alpha_bars_from_betas(
                          detail::interpolated_betas(T, p.beta_min, p.beta_max, false))
                    : detail::cosine_alpha_bars(T, p.cosine_offset);
      for (auto& a : ab) a = p.alpha_bar_floor + (1.0 - p.alpha_bar_floor) * a;
      return Schedule(kind, detail::betas_from_alpha_bars(ab));
    }
  }
  throw Error(ErrorKind::BadSchedule, "unknown schedule kind");
}

inline Schedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max) {
  ScheduleParams p;
  p.beta_min = beta_min;
  p.beta_max = beta_max;
  return make_schedule(kind, T, p);
}

/// CSV with header "t,beta,alpha,alpha_bar", 9 significant digits.
inline std::string dump_schedule(const Schedule& s) {
  std::string out = "t,beta,alpha,alpha_bar\n";
  char buf[128];
  for (int t = 1; t <= s.steps(); ++t) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", t, s.beta_at(t), s.alpha_at(t),
                  s.alpha_bar_at(t));
    out += buf;
  }
  return out;
}

struct ScheduleTable {
  std::vector<double> beta, alpha, alpha_bar;
};

inline ScheduleTable parse_schedule_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "t,beta,alpha,alpha_bar",
          ErrorKind::BadConfig, "schedule CSV: bad header");
  ScheduleTable tab;
  int expect = 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int t = 0;
    double b = 0, a = 0, ab = 0;
    require(std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &t, &b, &a, &ab) == 4 && t == expect,
            ErrorKind::BadConfig, "schedule CSV: bad row '" + line + "'");
    tab.beta.push_back(b);
    tab.alpha.push_back(a);
    tab.alpha_bar.push_back(ab);
    ++expect;
  }
  return tab;
}

}  // namespace pfxd
