// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "triforce/model_config.hpp"
#include "triforce/rng.hpp"

namespace triforce {

/// Next-token distribution. Probabilities are held in double even though
/// logits are float, so verify ratios and residuals are not dominated by
/// rounding on small vocabularies.
struct ProbVector {
  enum class Role { Draft, Intermediate, Target };

  Role role = Role::Target;
  std::vector<double> p;

  std::size_t size() const { return p.size(); }
  double operator[](std::size_t i) const { return p[i]; }
};

/// Lowest index wins ties.
inline Token argmax(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<Token>(best);
}

/// softmax(logits / T); T == 0 gives a one-hot on argmax.
inline ProbVector to_probs(std::span<const float> logits, double temperature,
                           ProbVector::Role role = ProbVector::Role::Target) {
  if (temperature < 0.0) throw ContractError("temperature must be >= 0");
  if (logits.empty()) throw ContractError("empty logits");
  ProbVector out{role, std::vector<double>(logits.size(), 0.0)};
  if (temperature == 0.0) {
    out.p[static_cast<std::size_t>(argmax(logits))] = 1.0;
    return out;
  }
  double mx = logits[0] / temperature;
  for (float v : logits) mx = std::max(mx, v / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.p[i] = std::exp(logits[i] / temperature - mx);
    sum += out.p[i];
  }
  for (double& v : out.p) v /= sum;
  return out;
}

/// Inverse-CDF draw consuming exactly one uniform.
inline Token sample_from(const ProbVector& dist, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < dist.p.size(); ++i) {
    if (dist.p[i] <= 0.0) continue;
    acc += dist.p[i];
    last_nonzero = i;
    if (u < acc) return static_cast<Token>(i);
  }
  return static_cast<Token>(last_nonzero);
}

/// One-hot distributions are returned without touching the stream, so a
/// greedy run never depends on the seed. Otherwise one uniform is consumed.
inline Token sample(std::span<const float> logits, double temperature, Rng& rng) {
  if (temperature == 0.0) return argmax(logits);
  return sample_from(to_probs(logits, temperature), rng);
}

}  // namespace triforce
