#pragma once

// Straight-from-the-formula reference implementations. Nothing here calls into
// the library's math; inputs and outputs cross over as plain vectors.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mexfuse/tensor.hpp"

namespace oracle {

struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<long double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0L) {}
  long double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  long double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat from_tensor(const mexfuse::Tensor& t) {
  Mat m(t.extent(0), t.rank() > 1 ? t.extent(1) : 1);
  const auto vals = t.values();
  for (std::size_t i = 0; i < vals.size(); ++i) m.v[i] = vals[i];
  return m;
}

inline Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Mat m(r, c);
  for (auto& x : m.v) x = n(rng);
  return m;
}

inline mexfuse::Tensor to_tensor(const Mat& m) {
  std::vector<double> vals(m.v.begin(), m.v.end());
  return mexfuse::Tensor::from_values({m.rows, m.cols}, std::move(vals));
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < c.v.size(); ++i) c.v[i] += b.v[i];
  return c;
}

inline Mat softmax_rows(const Mat& a) {
  Mat s(a.rows, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    long double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols; ++j) mx = std::max(mx, a(i, j));
    long double z = 0.0L;
    for (std::size_t j = 0; j < a.cols; ++j) z += std::exp(a(i, j) - mx);
    for (std::size_t j = 0; j < a.cols; ++j) s(i, j) = std::exp(a(i, j) - mx) / z;
  }
  return s;
}

/// softmax(q kᵀ / sqrt(width))
inline Mat attention_map(const Mat& q, const Mat& k) {
  Mat logits = matmul(q, transpose(k));
  const long double inv = 1.0L / std::sqrt(static_cast<long double>(q.cols));
  for (auto& x : logits.v) x *= inv;
  return softmax_rows(logits);
}

/// x W + b, W given as [d_in x d_out].
struct Affine {
  Mat w;
  std::vector<long double> b;

  [[nodiscard]] Mat operator()(const Mat& x) const {
    Mat y = matmul(x, w);
    for (std::size_t i = 0; i < y.rows; ++i)
      for (std::size_t j = 0; j < y.cols; ++j) y(i, j) += b[j];
    return y;
  }
};

/// Role name -> affine map. A missing role means identity.
using Projections = std::map<std::string, Affine>;

inline Mat apply(const Projections& p, const std::string& role, const Mat& x) {
  const auto it = p.find(role);
  return it == p.end() ? x : it->second(x);
}

struct MexResult {
  Mat p_it, p_tp, p_itp, fused;
};

/// p_it = softmax(qI kTᵀ/√d), p_tp = softmax(qT kPᵀ/√d), p_itp = p_it p_tp,
/// fused = out(p_it vT + p_itp vP) (+ I).
inline MexResult mex(const Mat& I, const Mat& T, const Mat& P, const Projections& proj = {},
                     bool residual = false) {
  MexResult r;
  r.p_it = attention_map(apply(proj, "global.query", I), apply(proj, "local.key", T));
  r.p_tp = attention_map(apply(proj, "local.query", T), apply(proj, "prompt.key", P));
  r.p_itp = matmul(r.p_it, r.p_tp);
  const Mat mixed = add(matmul(r.p_it, apply(proj, "local.value", T)),
                        matmul(r.p_itp, apply(proj, "prompt.value", P)));
  r.fused = apply(proj, "output", mixed);
  if (residual) r.fused = add(r.fused, I);
  return r;
}

struct CascadeResult {
  Mat p1, p2, stage1, fused;
};

/// s1 = T + out1(softmax(q1(T) k1(I)ᵀ/√d) v1(I)); s2 = s1 + out2(softmax(q2(s1) k2(P)ᵀ/√d) v2(P)).
inline CascadeResult cascade(const Mat& T, const Mat& I, const Mat& P, const Projections& proj = {}) {
  CascadeResult r;
  r.p1 = attention_map(apply(proj, "stage1.query", T), apply(proj, "stage1.key", I));
  r.stage1 = add(T, apply(proj, "stage1.output", matmul(r.p1, apply(proj, "stage1.value", I))));
  r.p2 = attention_map(apply(proj, "stage2.query", r.stage1), apply(proj, "stage2.key", P));
  r.fused = add(r.stage1, apply(proj, "stage2.output", matmul(r.p2, apply(proj, "stage2.value", P))));
  return r;
}

/// Mean over tokens per frame, then max over frames. frames[f] is [s x d].
inline std::vector<long double> st_pool(const std::vector<Mat>& frames) {
  const std::size_t d = frames.front().cols;
  std::vector<long double> out(d, -INFINITY);
  for (const auto& f : frames) {
    for (std::size_t j = 0; j < d; ++j) {
      long double m = 0.0L;
      for (std::size_t i = 0; i < f.rows; ++i) m += f(i, j);
      out[j] = std::max(out[j], m / static_cast<long double>(f.rows));
    }
  }
  return out;
}

inline long double cosine(const std::vector<long double>& a, const std::vector<long double>& b) {
  long double dot = 0.0L, na = 0.0L, nb = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

/// w_i = exp(τ x_i) / Σ exp(τ x_k), straight division in long double.
inline std::vector<long double> temperature_softmax(const std::vector<double>& x, double tau) {
  std::vector<long double> w(x.size());
  long double z = 0.0L;
  for (std::size_t i = 0; i < x.size(); ++i) z += std::exp(static_cast<long double>(tau) * x[i]);
  for (std::size_t i = 0; i < x.size(); ++i) w[i] = std::exp(static_cast<long double>(tau) * x[i]) / z;
  return w;
}

/// (f(x + h e_i) - f(x - h e_i)) / 2h, restoring x[i] afterwards.
inline double central_difference(const std::function<double()>& f, double& xi, double h) {
  const double saved = xi;
  xi = saved + h;
  const double plus = f();
  xi = saved - h;
  const double minus = f();
  xi = saved;
  return (plus - minus) / (2.0 * h);
}

// Floor sits well above central-difference round-off (~1e-11 at h = 1e-5), so
// gradients that are exactly zero do not read as large relative errors.
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline long double max_abs_diff(const Mat& a, const mexfuse::Tensor& t) {
  long double m = 0.0L;
  const auto vals = t.values();
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - vals[i]));
  return m;
}

}  // namespace oracle
