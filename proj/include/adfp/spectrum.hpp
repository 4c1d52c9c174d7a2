#pragma once

#include <map>
#include <string>

#include "adfp/dataset.hpp"
#include "adfp/ddim.hpp"

namespace adfp {

struct PowerSpectrum1D {
  std::vector<double> power;   // per-bin mean, bins 0..r_max
  std::vector<int64_t> count;  // coordinates assigned per bin
};

// Squared magnitude of the centered 2-D DFT (DC at (H/2, W/2)). Power-of-two
// sizes go through an FFT; other sizes use the direct transform.
std::vector<double> dft2_power(std::span<const float> image, int64_t H,
                               int64_t W);
std::vector<double> dft2_power(std::span<const double> image, int64_t H,
                               int64_t W);

// Radial binning with round-half-to-even radii; bins beyond
// floor(min(H, W)/2) are dropped.
PowerSpectrum1D azimuthal_average(std::span<const double> power_grid, int64_t H,
                                  int64_t W);

struct SpectrumReport {
  std::vector<std::string> set_names;
  // curves[depth-1][set] = mean 1-D spectrum over samples and channels
  std::vector<std::vector<std::vector<double>>> curves;
  // pairwise L1 distance between set curves, averaged over pairs, per depth
  std::vector<double> mean_pairwise_l1;
};

// Applies the recursive transform up to depth n to (at most `samples`) images
// of each set and averages the per-channel spectra.
SpectrumReport spectrum_report(
    const std::vector<std::pair<std::string, LabeledImageSet>>& sets,
    const NoisePredictor& model, const NoiseSchedule& sched, int S,
    int n_recursions, int64_t samples);

}  // namespace adfp
