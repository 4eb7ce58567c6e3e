// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

namespace stats {

struct ChiSquare {
  double statistic = 0;
  std::size_t dof = 0;
  double p_value = 1;
};

/// Goodness of fit of `counts` to `probs`. Bins with expected count below 5
/// are pooled (in index order) so the asymptotic distribution holds.
inline ChiSquare chi_square_gof(const std::vector<std::size_t>& counts, const std::vector<double>& probs) {
  double n = 0;
  for (auto c : counts) n += static_cast<double>(c);
  std::vector<double> obs, exp;
  double po = 0, pe = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    po += static_cast<double>(counts[i]);
    pe += probs[i] * n;
    if (pe >= 5.0) {
      obs.push_back(po);
      exp.push_back(pe);
      po = pe = 0;
    }
  }
  if (pe > 0 || po > 0) {
    if (exp.empty()) {
      obs.push_back(po);
      exp.push_back(pe);
    } else {
      obs.back() += po;
      exp.back() += pe;
    }
  }
  ChiSquare r;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (exp[i] > 0) r.statistic += (obs[i] - exp[i]) * (obs[i] - exp[i]) / exp[i];
  }
  if (obs.size() < 2) return r;
  r.dof = obs.size() - 1;
  r.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(static_cast<double>(r.dof)), r.statistic));
  return r;
}

}  // namespace stats
