#pragma once

#include <string>

#include "adfp/dataset.hpp"
#include "adfp/ddim.hpp"
#include "adfp/nn.hpp"
#include "adfp/schedule.hpp"

namespace adfp {

struct DenoiserDesc {
  int image_size = 32;
  int channels = 3;
  int base = 8;       // width of the first level; levels run base/2b/4b
  int temb_dim = 32;
  int T = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int S = 50;
};

// Small 3-level conv U-Net with skip connections, SiLU activations and a
// sinusoidal timestep embedding added per residual block.
class DenoiserModel : public NoisePredictor {
 public:
  DenoiserModel(DenoiserDesc desc, uint64_t seed);

  Tensor forward(const Params<float>& p, const Tensor& x,
                 std::span<const int> t) const;
  Tensor predict(const Tensor& x, std::span<const int> t) const override;

  const DenoiserDesc& desc() const { return desc_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  NoiseSchedule schedule() const;

  // writes <basepath>.ckpt (grad-core format) and <basepath>.json sidecar
  void save(const std::string& basepath) const;
  static DenoiserModel load(const std::string& basepath);

 private:
  DenoiserDesc desc_;
  ParameterSet params_;
};

struct DenoiserTrainLog {
  std::vector<double> epoch_loss;
  std::vector<std::string> checkpoints;  // basepaths of mid-training snapshots
};

// Minimizes the mean squared error between sampled and predicted noise on
// [-1,1]-rescaled images. Deterministic for a fixed seed.
DenoiserTrainLog train_denoiser(DenoiserModel& model,
                                const LabeledImageSet& data, int epochs,
                                int batch, double lr, uint64_t seed,
                                int checkpoint_every = 0,
                                const std::string& checkpoint_dir = "");

}  // namespace adfp
