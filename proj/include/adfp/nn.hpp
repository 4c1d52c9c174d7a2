#pragma once

#include <map>
#include <string>

#include "adfp/tensor.hpp"

namespace adfp {

// Named parameters in deterministic (lexicographic) order.
template <typename T>
using Params = std::map<std::string, TensorT<T>>;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Owns model parameters plus Adam moments and the step counter.
template <typename T>
class ParameterSetT {
 public:
  void add(const std::string& name, TensorT<T> value);
  bool has(const std::string& name) const;
  TensorT<T>& at(const std::string& name);
  const TensorT<T>& at(const std::string& name) const;
  const Params<T>& values() const { return params_; }
  size_t count() const { return params_.size(); }
  int64_t step() const { return step_; }

  // Shared value buffers, fresh gradient slots; one view per worker keeps
  // concurrent backward sweeps race-free.
  Params<T> shadow() const;
  // Shared value buffers, no gradients recorded through them.
  Params<T> frozen() const;

  void zero_grads();
  // Adds gradients collected in shadow views, in lexicographic order.
  void accumulate(const std::vector<Params<T>>& shadows);
  void adam_step(const AdamConfig& cfg);

  void save(const std::string& path) const;
  static ParameterSetT load(const std::string& path);

  bool same_values(const ParameterSetT& other) const;

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  Params<T> params_;
  std::map<std::string, Slot> adam_;
  int64_t step_ = 0;
};

using ParameterSet = ParameterSetT<float>;

// ---- layer parameter registration (Kaiming-style init) ----
template <typename T>
void register_conv(ParameterSetT<T>& ps, const std::string& name, int64_t out_c,
                   int64_t in_c, int64_t k, Rng& rng, bool zero_init = false);
template <typename T>
void register_linear(ParameterSetT<T>& ps, const std::string& name, int64_t in_f,
                     int64_t out_f, Rng& rng, bool zero_init = false);
template <typename T>
void register_group_norm(ParameterSetT<T>& ps, const std::string& name,
                         int64_t channels);

// ---- layer forwards over a parameter view ----
template <typename T>
TensorT<T> conv2d_layer(const TensorT<T>& x, const Params<T>& p,
                        const std::string& name, int stride = 1, int pad = 1);
template <typename T>
TensorT<T> linear_layer(const TensorT<T>& x, const Params<T>& p,
                        const std::string& name);
template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, const Params<T>& p,
                      const std::string& name, int groups,
                      double eps = 1e-5);

// Sinusoidal position features for integer timesteps, shape [B, dim].
template <typename T>
TensorT<T> sinusoidal_embedding(std::span<const int> t, int64_t dim,
                                double max_period = 10000.0);

template <typename T>
const TensorT<T>& param(const Params<T>& p, const std::string& name);

}  // namespace adfp
