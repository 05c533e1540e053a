#pragma once

#include <cmath>
#include <numbers>

#include "pfxd/tensor.hpp"

// Row-wise building blocks with explicit backward passes. Inputs are stacked
// rows (tokens); every function is shape-polymorphic in the row count.
namespace pfxd::layers {

/// y = x W + b
template <typename T>
void linear(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b, Mat<T>& y) {
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
}

/// Accumulates dW, db and writes dx (if requested).
template <typename T>
void linear_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>& dw, Mat<T>& db,
                     Mat<T>* dx) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  if (dx) dx->noalias() = dy * w.transpose();
}

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <typename T>
void layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, Mat<T>& y,
                LayerNormCache<T>& cache, T eps = T(1e-5)) {
  const auto n = x.rows();
  const T inv_d = T(1) / static_cast<T>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  y.resize(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    T mu = x.row(i).sum() * inv_d;
    auto centered = (x.row(i).array() - mu);
    T var = centered.square().sum() * inv_d;
    T r = T(1) / std::sqrt(var + eps);
    cache.rstd(i) = r;
    cache.xhat.row(i) = centered * r;
  }
  y = (cache.xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
}

template <typename T>
void layer_norm_backward(const LayerNormCache<T>& cache, const Mat<T>& gamma, const Mat<T>& dy,
                         Mat<T>& dgamma, Mat<T>& dbeta, Mat<T>& dx) {
  dgamma.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  Mat<T> dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  dx.resize(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    T m1 = dxhat.row(i).sum() * inv_d;
    T m2 = dxhat.row(i).dot(cache.xhat.row(i)) * inv_d;
    dx.row(i) = cache.rstd(i) * (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2).matrix();
  }
}

// tanh-approximated GELU
template <typename T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

/// Vectorised GELU over a matrix; `th` keeps the inner tanh for backward.
template <typename T>
void gelu_forward(const Mat<T>& x, Mat<T>& th, Mat<T>& y) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  th = (c * (x.array() + T(0.044715) * x.array().cube())).tanh().matrix();
  y = (T(0.5) * x.array() * (T(1) + th.array())).matrix();
}

template <typename T>
void gelu_backward(const Mat<T>& x, const Mat<T>& th, const Mat<T>& dy, Mat<T>& dx) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  auto xa = x.array();
  auto ta = th.array();
  dx = (dy.array() * (T(0.5) * (T(1) + ta) +
                      T(0.5) * xa * (T(1) - ta.square()) * c * (T(1) + T(0.134145) * xa.square())))
           .matrix();
}

/// In-place row softmax.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& s) {
  using T = typename Derived::Scalar;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    T mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

/// Sinusoidal embedding of a scalar timestep into `dim` (even) channels.
template <typename T>
void timestep_embedding(int t, Eigen::Ref<RowVec<T>> out) {
  const auto half = out.size() / 2;
  for (Eigen::Index i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out(i) = static_cast<T>(std::sin(t * freq));
    out(half + i) = static_cast<T>(std::cos(t * freq));
  }
}

}  // namespace pfxd::layers
