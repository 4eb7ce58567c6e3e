// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

// Deterministic dense float32 kernels. Every reduction accumulates in
// ascending index order and no kernel mixes rows, so a row of any output
// depends only on the matching row of its input. The model relies on this to
// make chunked and one-token-at-a-time forwards bit-identical.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "triforce/error.hpp"

namespace triforce {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(element_count(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape product " +
                           std::to_string(element_count(shape_)));
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0f;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }

  /// Row `r` of the tensor viewed as [size / last_dim, last_dim].
  std::span<float> row(std::size_t r) {
    const std::size_t n = shape_.back();
    return std::span<float>(data_).subspan(r * n, n);
  }
  std::span<const float> row(std::size_t r) const {
    const std::size_t n = shape_.back();
    return std::span<const float>(data_).subspan(r * n, n);
  }
  std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / shape_.back(); }

  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

namespace kernels {

/// out[m,n] = a[m,k] * b[k,n]. For each output row the k loop is outermost,
/// so out[i][j] accumulates a[i][p] * b[p][j] for p ascending.
inline void matmul(std::span<const float> a, std::size_t m, std::size_t k,
                   std::span<const float> b, std::size_t n, std::span<float> out) {
  for (std::size_t i = 0; i < m; ++i) {
    float* o = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) o[j] = 0.0f;
    const float* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ai[p];
      const float* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
    }
  }
}

inline float dot(std::span<const float> a, std::span<const float> b) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// In-place exp(scale * x - max) / sum over one row.
inline void softmax(std::span<float> x, float scale = 1.0f) {
  if (x.empty()) return;
  float mx = scale * x[0];
  for (float v : x) mx = std::max(mx, scale * v);
  float sum = 0.0f;
  for (float& v : x) {
    v = std::exp(scale * v - mx);
    sum += v;
  }
  const float inv = 1.0f / sum;
  for (float& v : x) v *= inv;
}

inline void rms_norm(std::span<const float> x, std::span<const float> gain, float eps,
                     std::span<float> out) {
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float denom = ss / static_cast<float>(x.size()) + eps;
  const float inv = denom > 0.0f ? 1.0f / std::sqrt(denom) : 0.0f;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

/// Rotation angles for dimension pair i at position pos: pos * theta^(-2i/d).
inline void rope_angles(std::int64_t pos, std::size_t head_dim, double theta,
                        std::span<float> cos_out, std::span<float> sin_out) {
  for (std::size_t i = 0; i < head_dim / 2; ++i) {
    const double freq =
        std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double angle = static_cast<double>(pos) * freq;
    cos_out[i] = static_cast<float>(std::cos(angle));
    sin_out[i] = static_cast<float>(std::sin(angle));
  }
}

inline void rope_rotate(std::span<float> x, std::span<const float> c, std::span<const float> s) {
  for (std::size_t i = 0; i < c.size(); ++i) {
    const float x0 = x[2 * i];
    const float x1 = x[2 * i + 1];
    x[2 * i] = x0 * c[i] - x1 * s[i];
    x[2 * i + 1] = x0 * s[i] + x1 * c[i];
  }
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace kernels

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions disagree: " + std::to_string(a.dim(1)) +
                         " vs " + std::to_string(b.dim(0)));
  }
  Tensor out({a.dim(0), b.dim(1)});
  kernels::matmul(a.data(), a.dim(0), a.dim(1), b.data(), b.dim(1), out.data());
  return out;
}

inline Tensor softmax_rows(const Tensor& x, float scale = 1.0f) {
  if (x.rank() != 2 || x.dim(1) == 0) throw DimensionError("softmax_rows expects [m, n>=1]");
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) kernels::softmax(out.row(r), scale);
  return out;
}

inline Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  if (x.rank() == 0 || gain.rank() != 1 || x.shape().back() != gain.dim(0)) {
    throw DimensionError("rms_norm gain does not match last dimension");
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) kernels::rms_norm(x.row(r), gain.data(), eps, out.row(r));
  return out;
}

/// Rotary embedding of a [positions, head_dim] block.
inline Tensor rope_apply(const Tensor& x, std::span<const std::int64_t> positions, double theta) {
  if (x.rank() != 2) throw DimensionError("rope_apply expects [positions, head_dim]");
  const std::size_t d = x.dim(1);
  if (d % 2 != 0) throw DimensionError("rope_apply requires even head_dim, got " + std::to_string(d));
  if (positions.size() != x.dim(0)) throw DimensionError("rope_apply positions length mismatch");
  Tensor out = x;
  std::vector<float> c(d / 2), s(d / 2);
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    kernels::rope_angles(positions[r], d, theta, c, s);
    kernels::rope_rotate(out.row(r), c, s);
  }
  return out;
}

}  // namespace triforce
