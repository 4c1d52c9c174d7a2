#include "adfp/ddim.hpp"

#include <algorithm>
#include <cmath>

namespace adfp {

namespace {

void check_step_range(const char* op, int t_from, int t_to,
                      const NoiseSchedule& sched) {
  if (t_from < 0 || t_from > sched.T || t_to < 0 || t_to > sched.T)
    throw std::invalid_argument(std::string(op) + ": timestep outside [0, " +
                                std::to_string(sched.T) + "]");
}

std::vector<int> fill_t(int t, int64_t batch) {
  return std::vector<int>(static_cast<size_t>(batch), t);
}

}  // namespace

Tensor ddim_reverse_step(const Tensor& x, int t_from, int t_to,
                         const NoisePredictor& model,
                         const NoiseSchedule& sched) {
  check_step_range("ddim_reverse_step", t_from, t_to, sched);
  if (t_from <= t_to)
    throw std::invalid_argument("ddim_reverse_step: need t_from > t_to, got " +
                                std::to_string(t_from) + " -> " +
                                std::to_string(t_to));
  NoGradGuard ng;
  const auto t = fill_t(t_from, x.dim(0));
  Tensor eps = model.predict(x, t);
  if (eps.shape() != x.shape())
    throw std::invalid_argument("ddim_reverse_step: predictor output " +
                                format_shape(eps.shape()) +
                                " does not match input " +
                                format_shape(x.shape()));
  const double a_from = sched.alpha(t_from), a_to = sched.alpha(t_to);
  const float scale = static_cast<float>(std::sqrt(a_to / a_from));
  const float eps_coef = static_cast<float>(
      std::sqrt(1.0 - a_to) - std::sqrt(a_to / a_from) * std::sqrt(1.0 - a_from));
  return add(mul(x, scale), mul(eps, eps_coef));
}

Tensor ddim_invert_step(const Tensor& x, int t_from, int t_to,
                        const NoisePredictor& model,
                        const NoiseSchedule& sched) {
  check_step_range("ddim_invert_step", t_from, t_to, sched);
  if (t_to <= t_from)
    throw std::invalid_argument("ddim_invert_step: need t_to > t_from, got " +
                                std::to_string(t_from) + " -> " +
                                std::to_string(t_to));
  NoGradGuard ng;
  const auto t = fill_t(t_from, x.dim(0));
  Tensor eps = model.predict(x, t);
  if (eps.shape() != x.shape())
    throw std::invalid_argument("ddim_invert_step: predictor output " +
                                format_shape(eps.shape()) +
                                " does not match input " +
                                format_shape(x.shape()));
  const double a_from = sched.alpha(t_from), a_to = sched.alpha(t_to);
  // x_to / sqrt(a_to) = x_from / sqrt(a_from) + (sigma_to - sigma_from) eps,
  // sigma_t = sqrt((1 - a_t) / a_t)
  const float scale = static_cast<float>(std::sqrt(a_to / a_from));
  const double sigma_from = std::sqrt((1.0 - a_from) / a_from);
  const double sigma_to = std::sqrt((1.0 - a_to) / a_to);
  const float eps_coef =
      static_cast<float>(std::sqrt(a_to) * (sigma_to - sigma_from));
  return add(mul(x, scale), mul(eps, eps_coef));
}

void clamp01_(Tensor& x) {
  for (float& v : x.raw()) v = std::clamp(v, 0.0f, 1.0f);
}

Tensor ddim_transform(const Tensor& x0, const NoisePredictor& model,
                      const NoiseSchedule& sched, int S) {
  if (x0.rank() != 4)
    throw std::invalid_argument("ddim_transform: expected NCHW batch, got " +
                                format_shape(x0.shape()));
  NoGradGuard ng;
  const NoiseSchedule sub = sched.with_subsample(S);
  std::vector<int> grid;
  grid.reserve(sub.tau.size() + 1);
  grid.push_back(0);
  grid.insert(grid.end(), sub.tau.begin(), sub.tau.end());

  const int64_t n = x0.dim(0);
  Tensor out = Tensor::zeros(x0.shape());
  const int64_t chw = x0.size() / n;
  // independent sub-batches; the step sequence is identical for each chunk
  parallel_for(n, 8, [&](int64_t begin, int64_t end) {
    std::vector<float> buf(static_cast<size_t>((end - begin) * chw));
    const float* src = x0.data().data() + begin * chw;
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = 2.0f * src[i] - 1.0f;
    Shape shape = x0.shape();
    shape[0] = end - begin;
    Tensor x = Tensor::from_data(shape, std::move(buf));
    for (size_t k = 0; k + 1 < grid.size(); ++k)
      x = ddim_invert_step(x, grid[k], grid[k + 1], model, sub);
    for (size_t k = grid.size() - 1; k >= 1; --k)
      x = ddim_reverse_step(x, grid[k], grid[k - 1], model, sub);
    const float* res = x.data().data();
    float* dst = out.raw().data() + begin * chw;
    for (int64_t i = 0; i < (end - begin) * chw; ++i)
      dst[i] = std::clamp((res[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
  });
  return out;
}

std::vector<Tensor> recursive_transform(const Tensor& x0,
                                        const NoisePredictor& model,
                                        const NoiseSchedule& sched, int S,
                                        int n) {
  if (n < 1)
    throw std::invalid_argument("recursive_transform: n must be >= 1");
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(n));
  Tensor cur = x0;
  for (int k = 0; k < n; ++k) {
    cur = ddim_transform(cur, model, sched, S);
    out.push_back(cur);
  }
  return out;
}

Tensor forward_noising(const Tensor& x0, int t, const Tensor& noise,
                       const NoiseSchedule& sched) {
  if (x0.shape() != noise.shape())
    throw std::invalid_argument("forward_noising: shape mismatch " +
                                format_shape(x0.shape()) + " vs " +
                                format_shape(noise.shape()));
  if (t < 1 || t > sched.T)
    throw std::invalid_argument("forward_noising: t outside [1, T]");
  const double a = sched.alpha(t);
  return add(mul(x0, static_cast<float>(std::sqrt(a))),
             mul(noise, static_cast<float>(std::sqrt(1.0 - a))));
}

}  // namespace adfp
