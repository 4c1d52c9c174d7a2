#include "adfp/schedule.hpp"

#include <stdexcept>
#include <string>

namespace adfp {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 1)
    throw std::invalid_argument("NoiseSchedule: T must be >= 1, got " +
                                std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument(
        "NoiseSchedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta[static_cast<size_t>(t - 1)] = b;
    s.alpha_bar[static_cast<size_t>(t)] =
        s.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - b);
  }
  s.tau.resize(static_cast<size_t>(T));
  for (int t = 1; t <= T; ++t) s.tau[static_cast<size_t>(t - 1)] = t;
  s.validate();
  return s;
}

double NoiseSchedule::alpha(int t) const {
  if (t < 0 || t > T)
    throw std::invalid_argument("NoiseSchedule: t = " + std::to_string(t) +
                                " outside [0, " + std::to_string(T) + "]");
  return alpha_bar[static_cast<size_t>(t)];
}

NoiseSchedule NoiseSchedule::with_subsample(int S) const {
  if (S < 1 || S > T)
    throw std::invalid_argument("NoiseSchedule: subsample count " +
                                std::to_string(S) + " outside [1, " +
                                std::to_string(T) + "]");
  NoiseSchedule s = *this;
  s.tau.resize(static_cast<size_t>(S));
  for (int i = 1; i <= S; ++i)
    s.tau[static_cast<size_t>(i - 1)] =
        static_cast<int>(static_cast<int64_t>(i) * T / S);
  s.validate();
  return s;
}

std::vector<double> NoiseSchedule::beta_from_alpha() const {
  std::vector<double> out(static_cast<size_t>(T));
  for (int t = 1; t <= T; ++t)
    out[static_cast<size_t>(t - 1)] =
        1.0 - alpha_bar[static_cast<size_t>(t)] /
                  alpha_bar[static_cast<size_t>(t - 1)];
  return out;
}

void NoiseSchedule::validate() const {
  if (T < 1 || beta.size() != static_cast<size_t>(T) ||
      alpha_bar.size() != static_cast<size_t>(T) + 1)
    throw std::invalid_argument("NoiseSchedule: inconsistent sizes");
  for (int t = 1; t <= T; ++t) {
    const double a = alpha_bar[static_cast<size_t>(t)];
    if (!(a > 0.0 && a <= 1.0 && a < alpha_bar[static_cast<size_t>(t - 1)]))
      throw std::invalid_argument(
          "NoiseSchedule: alpha must be strictly decreasing in (0, 1]");
    const double b = beta[static_cast<size_t>(t - 1)];
    if (!(b > 0.0 && b < 1.0))
      throw std::invalid_argument("NoiseSchedule: beta outside (0, 1)");
  }
  if (tau.empty() || tau.back() != T)
    throw std::invalid_argument("NoiseSchedule: tau must end at T");
  int prev = 0;
  for (int t : tau) {
    if (t <= prev || t > T)
      throw std::invalid_argument("NoiseSchedule: tau must be strictly "
                                  "increasing within [1, T]");
    prev = t;
  }
}

}  // namespace adfp
