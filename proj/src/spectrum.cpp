#include "adfp/spectrum.hpp"

#include <cmath>
#include <complex>
#include <numbers>

namespace adfp {

namespace {

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

void fft_pow2(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

void dft_naive(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) *
                         static_cast<double>(t) / static_cast<double>(n);
      acc += a[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  a = std::move(out);
}

void transform_1d(std::vector<std::complex<double>>& a) {
  if (is_pow2(static_cast<int64_t>(a.size())))
    fft_pow2(a);
  else
    dft_naive(a);
}

std::vector<double> dft2_power_impl(const double* img, int64_t H, int64_t W) {
  if (H < 2 || W < 2)
    throw std::invalid_argument("dft2_power: need H, W >= 2");
  for (int64_t i = 0; i < H * W; ++i)
    if (!std::isfinite(img[i]))
      throw std::invalid_argument("dft2_power: non-finite pixel value");

  std::vector<std::complex<double>> grid(static_cast<size_t>(H * W));
  for (int64_t i = 0; i < H * W; ++i) grid[static_cast<size_t>(i)] = img[i];

  std::vector<std::complex<double>> row(static_cast<size_t>(W));
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) row[static_cast<size_t>(x)] = grid[static_cast<size_t>(y * W + x)];
    transform_1d(row);
    for (int64_t x = 0; x < W; ++x) grid[static_cast<size_t>(y * W + x)] = row[static_cast<size_t>(x)];
  }
  std::vector<std::complex<double>> col(static_cast<size_t>(H));
  for (int64_t x = 0; x < W; ++x) {
    for (int64_t y = 0; y < H; ++y) col[static_cast<size_t>(y)] = grid[static_cast<size_t>(y * W + x)];
    transform_1d(col);
    for (int64_t y = 0; y < H; ++y) grid[static_cast<size_t>(y * W + x)] = col[static_cast<size_t>(y)];
  }

  // center the DC bin at (H/2, W/2)
  std::vector<double> power(static_cast<size_t>(H * W));
  for (int64_t u = 0; u < H; ++u)
    for (int64_t v = 0; v < W; ++v) {
      const int64_t cu = (u + H / 2) % H;
      const int64_t cv = (v + W / 2) % W;
      power[static_cast<size_t>(cu * W + cv)] =
          std::norm(grid[static_cast<size_t>(u * W + v)]);
    }
  return power;
}

}  // namespace

std::vector<double> dft2_power(std::span<const float> image, int64_t H,
                               int64_t W) {
  if (static_cast<int64_t>(image.size()) != H * W)
    throw std::invalid_argument("dft2_power: buffer does not match H*W");
  std::vector<double> tmp(image.begin(), image.end());
  return dft2_power_impl(tmp.data(), H, W);
}

std::vector<double> dft2_power(std::span<const double> image, int64_t H,
                               int64_t W) {
  if (static_cast<int64_t>(image.size()) != H * W)
    throw std::invalid_argument("dft2_power: buffer does not match H*W");
  return dft2_power_impl(image.data(), H, W);
}

PowerSpectrum1D azimuthal_average(std::span<const double> power_grid, int64_t H,
                                  int64_t W) {
  if (static_cast<int64_t>(power_grid.size()) != H * W)
    throw std::invalid_argument("azimuthal_average: buffer does not match H*W");
  const int64_t u0 = H / 2, v0 = W / 2;
  const int64_t r_max = std::min(H, W) / 2;
  PowerSpectrum1D out;
  out.power.assign(static_cast<size_t>(r_max) + 1, 0.0);
  out.count.assign(static_cast<size_t>(r_max) + 1, 0);
  for (int64_t u = 0; u < H; ++u) {
    for (int64_t v = 0; v < W; ++v) {
      const double du = static_cast<double>(u - u0);
      const double dv = static_cast<double>(v - v0);
      // round-half-to-even radius bin
      const auto r = static_cast<int64_t>(
          std::nearbyint(std::sqrt(du * du + dv * dv)));
      if (r > r_max) continue;
      out.power[static_cast<size_t>(r)] += power_grid[static_cast<size_t>(u * W + v)];
      ++out.count[static_cast<size_t>(r)];
    }
  }
  for (size_t r = 0; r < out.power.size(); ++r)
    if (out.count[r] > 0) out.power[r] /= static_cast<double>(out.count[r]);
  return out;
}

SpectrumReport spectrum_report(
    const std::vector<std::pair<std::string, LabeledImageSet>>& sets,
    const NoisePredictor& model, const NoiseSchedule& sched, int S,
    int n_recursions, int64_t samples) {
  if (sets.empty())
    throw std::invalid_argument("spectrum_report: no input sets");
  const int64_t H = sets.front().second.images.dim(2);
  const int64_t W = sets.front().second.images.dim(3);
  for (const auto& [name, set] : sets)
    if (set.images.dim(2) != H || set.images.dim(3) != W)
      throw std::invalid_argument("spectrum_report: sets disagree on image size");

  SpectrumReport report;
  report.curves.assign(static_cast<size_t>(n_recursions), {});

  for (const auto& [name, set] : sets) {
    report.set_names.push_back(name);
    const int64_t n = std::min<int64_t>(samples, set.count());
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    const LabeledImageSet sub = set.subset(idx);
    const auto depths =
        recursive_transform(sub.images, model, sched, S, n_recursions);

    for (int d = 0; d < n_recursions; ++d) {
      const Tensor& imgs = depths[static_cast<size_t>(d)];
      const int64_t C = imgs.dim(1);
      std::vector<double> curve;
      int64_t added = 0;
      const float* data = imgs.data().data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t c = 0; c < C; ++c) {
          const auto grid = dft2_power(
              std::span<const float>(data + (i * C + c) * H * W,
                                     static_cast<size_t>(H * W)),
              H, W);
          const auto spec = azimuthal_average(grid, H, W);
          if (curve.empty()) curve.assign(spec.power.size(), 0.0);
          for (size_t r = 0; r < spec.power.size(); ++r)
            curve[r] += spec.power[r];
          ++added;
        }
      }
      for (double& v : curve) v /= static_cast<double>(std::max<int64_t>(added, 1));
      report.curves[static_cast<size_t>(d)].push_back(std::move(curve));
    }
  }

  report.mean_pairwise_l1.assign(static_cast<size_t>(n_recursions), 0.0);
  const size_t k = sets.size();
  if (k >= 2) {
    for (int d = 0; d < n_recursions; ++d) {
      double total = 0.0;
      int64_t pairs = 0;
      for (size_t a = 0; a < k; ++a)
        for (size_t b = a + 1; b < k; ++b) {
          const auto& ca = report.curves[static_cast<size_t>(d)][a];
          const auto& cb = report.curves[static_cast<size_t>(d)][b];
          double l1 = 0.0;
          for (size_t r = 0; r < ca.size(); ++r) l1 += std::abs(ca[r] - cb[r]);
          total += l1;
          ++pairs;
        }
      report.mean_pairwise_l1[static_cast<size_t>(d)] =
          total / static_cast<double>(pairs);
    }
  }
  return report;
}

}  // namespace adfp
