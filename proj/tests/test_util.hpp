#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pfxd/denoiser.hpp"
#include "pfxd/rng.hpp"

namespace pfxd::testing {

/// The small configuration used for gradient checks.
inline DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.d1 = 4;
  c.d2 = 8;
  c.k = 3;
  c.prefix_len = 2;
  c.layers = 1;
  c.heads = 1;
  c.ffn_mult = 2;
  c.feat_dim = 5;
  c.prefix_hidden = 6;
  return c;
}

/// Flat list of (name, element pointer) for every scalar of a parameter set.
template <typename T>
std::vector<std::pair<std::string, T*>> flat_params(DenoiserParams<T>& p) {
  std::vector<std::pair<std::string, T*>> out;
  p.visit([&](const std::string& name, Mat<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) out.emplace_back(name + "[" + std::to_string(i) + "]", m.data() + i);
  });
  return out;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Central difference of f at *x with step h.
inline double central_difference(const std::function<double()>& f, double* x, double h) {
  double saved = *x;
  *x = saved + h;
  double up = f();
  *x = saved - h;
  double down = f();
  *x = saved;
  return (up - down) / (2 * h);
}

}  // namespace pfxd::testing
