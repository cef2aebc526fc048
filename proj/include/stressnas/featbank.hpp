#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stressnas/dataset.hpp"

namespace stressnas::features {

struct FilterBankConfig {
  double pre_emphasis_alpha = 0.97;
  double frame_len_s = 8.0;
  double frame_shift_s = 2.0;
  std::size_t nfft = 0;       // 0: next power of two >= frame samples
  std::size_t n_filters = 0;  // 0: min(16, nfft / 2)
  bool mean_normalize = true;
};

/// Sample-domain parameters of a FilterBankConfig at one sampling rate.
struct FrameGeometry {
  std::size_t frame_samples = 0;
  std::size_t shift_samples = 0;
  std::size_t nfft = 0;
  std::size_t n_filters = 0;

  std::size_t frame_count(std::size_t signal_len) const;
};

/// Resolves defaults and validates the config for a signal at `rate`.
FrameGeometry resolve(const FilterBankConfig& cfg, double rate);

struct FilterBankImage {
  std::string channel;
  std::size_t rows = 0;  // frames
  std::size_t cols = 0;  // filters
  std::vector<double> values;  // row-major

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

std::vector<double> pre_emphasis(std::span<const double> x, double alpha);

/// Hamming taper of length n: 0.54 - 0.46 cos(2 pi k / (n - 1)).
std::vector<double> hamming(std::size_t n);

/// Overlapping frames with the Hamming taper applied.
std::vector<std::vector<double>> frame_and_window(std::span<const double> x,
                                                  double rate,
                                                  double frame_len_s,
                                                  double frame_shift_s);

bool is_power_of_two(std::size_t n);
std::size_t next_power_of_two(std::size_t n);

/// In-place iterative radix-2 FFT; size must be a power of two.
void fft(std::span<std::complex<double>> a);

/// One-sided power spectrum |X[k]|^2 / nfft for k = 0..nfft/2.
std::vector<double> power_spectrum(std::span<const double> frame,
                                   std::size_t nfft);

/// Triangular filters with linearly spaced edges over [0, rate / 2].
struct FilterMatrix {
  std::size_t n_filters = 0;
  std::size_t n_bins = 0;
  std::vector<double> weights;  // n_filters x n_bins, row-major
  std::vector<double> edges;    // fractional bins b_0 .. b_{m+1}

  double at(std::size_t f, std::size_t k) const {
    return weights[f * n_bins + k];
  }
};

FilterMatrix triangular_filterbank(std::size_t nfft, std::size_t n_filters,
                                   double rate);

inline constexpr double kLogFloor = 1e-10;

/// Pre-emphasis, framing, power spectrum, triangular filtering, log
/// compression and (optionally) per-filter mean removal over frames.
FilterBankImage compute_filterbank(std::span<const double> channel,
                                   double rate, const FilterBankConfig& cfg,
                                   std::string name = {});

inline constexpr std::size_t kStatsPerChannel = 6;
inline constexpr std::size_t kMixedFeatureDim =
    kStatsPerChannel * data::kChannelNames.size();
inline constexpr std::array<std::string_view, kStatsPerChannel> kStatNames = {
    "mean", "std", "min", "max", "range", "slope"};

using MixedFeatures = std::array<double, kMixedFeatureDim>;

/// Per-channel mean, population std, min, max, range and OLS slope per
/// second for the six wrist channels in canonical order.
MixedFeatures mixed_features(const data::Window& window);

}  // namespace stressnas::features
