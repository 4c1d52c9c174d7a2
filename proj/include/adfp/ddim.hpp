#pragma once

#include "adfp/schedule.hpp"
#include "adfp/tensor.hpp"

namespace adfp {

// Anything that predicts the noise residual for a batch at given timesteps.
struct NoisePredictor {
  virtual ~NoisePredictor() = default;
  virtual Tensor predict(const Tensor& x, std::span<const int> t) const = 0;
};

// Fixed-output predictor, used to exercise the exact-roundtrip property.
class ConstantPredictor : public NoisePredictor {
 public:
  explicit ConstantPredictor(float value) : value_(value) {}
  Tensor predict(const Tensor& x, std::span<const int>) const override {
    return Tensor::full(x.shape(), value_);
  }

 private:
  float value_;
};

// One deterministic (sigma = 0) denoising step, t_from > t_to >= 0.
Tensor ddim_reverse_step(const Tensor& x, int t_from, int t_to,
                         const NoisePredictor& model, const NoiseSchedule& sched);

// One inversion step (Euler in the x/sqrt(alpha) coordinate), t_to > t_from >= 0.
// The noise residual is evaluated at the current (lower-t) state.
Tensor ddim_invert_step(const Tensor& x, int t_from, int t_to,
                        const NoisePredictor& model, const NoiseSchedule& sched);

// Full fingerprint transform: invert 0 -> T over S subsampled steps, then
// reverse back to 0. Input/output are [0,1] images; the model runs on [-1,1].
// Output is clamped to [0,1]. Deterministic for fixed inputs.
Tensor ddim_transform(const Tensor& x0, const NoisePredictor& model,
                      const NoiseSchedule& sched, int S);

// Element k (0-based) is ddim_transform applied k+1 times.
std::vector<Tensor> recursive_transform(const Tensor& x0,
                                        const NoisePredictor& model,
                                        const NoiseSchedule& sched, int S,
                                        int n);

// Forward noising: x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) noise.
Tensor forward_noising(const Tensor& x0, int t, const Tensor& noise,
                       const NoiseSchedule& sched);

void clamp01_(Tensor& x);

}  // namespace adfp
