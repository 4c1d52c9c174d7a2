#pragma once

#include <vector>

#include "adfp/common.hpp"

namespace adfp {

// Diffusion hyperparameters. `alpha_bar[t]` is the cumulative product
// prod_{s<=t}(1 - beta_s) with alpha_bar[0] = 1, indexed t in [0, T].
// `tau` is the strictly increasing subsampled step sequence with tau.back() == T.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] = beta_t, t in [1, T]
  std::vector<double> alpha_bar;  // size T + 1
  std::vector<int> tau;

  static NoiseSchedule linear(int T, double beta_start, double beta_end);

  double alpha(int t) const;
  NoiseSchedule with_subsample(int S) const;
  std::vector<double> beta_from_alpha() const;
  int subsample_count() const { return static_cast<int>(tau.size()); }

  void validate() const;
};

}  // namespace adfp
