#include "stressnas/featbank.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "stressnas/error.hpp"

namespace stressnas::features {

std::size_t FrameGeometry::frame_count(std::size_t signal_len) const {
  if (signal_len < frame_samples) return 0;
  return (signal_len - frame_samples) / shift_samples + 1;
}

FrameGeometry resolve(const FilterBankConfig& cfg, double rate) {
  if (!(cfg.pre_emphasis_alpha >= 0.0 && cfg.pre_emphasis_alpha < 1.0))
    throw ConfigError("pre-emphasis alpha must lie in [0, 1)");
  if (!(cfg.frame_len_s > 0.0) || !(cfg.frame_shift_s > 0.0))
    throw ConfigError("frame length and shift must be positive");
  FrameGeometry g;
  g.frame_samples = static_cast<std::size_t>(std::llround(cfg.frame_len_s * rate));
  g.shift_samples = static_cast<std::size_t>(std::llround(cfg.frame_shift_s * rate));
  if (g.frame_samples < 2 || g.shift_samples < 1)
    throw ConfigError("frame too short at this sampling rate");
  g.nfft = cfg.nfft == 0 ? next_power_of_two(g.frame_samples) : cfg.nfft;
  if (!is_power_of_two(g.nfft)) throw ConfigError("nfft must be a power of two");
  if (g.nfft < g.frame_samples)
    throw ConfigError("nfft must cover the frame length");
  g.n_filters = cfg.n_filters == 0 ? std::min<std::size_t>(16, g.nfft / 2)
                                   : cfg.n_filters;
  if (g.n_filters < 1 || g.n_filters > g.nfft / 2)
    throw ConfigError("n_filters must lie in [1, nfft/2]");
  return g;
}

std::vector<double> pre_emphasis(std::span<const double> x, double alpha) {
  std::vector<double> y(x.size());
  if (x.empty()) return y;
  y[0] = x[0];
  for (std::size_t n = 1; n < x.size(); ++n) y[n] = x[n] - alpha * x[n - 1];
  return y;
}

std::vector<double> hamming(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  const double denom = static_cast<double>(n - 1);
  for (std::size_t k = 0; k < n; ++k)
    w[k] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi *
                                  static_cast<double>(k) / denom);
  return w;
}

std::vector<std::vector<double>> frame_and_window(std::span<const double> x,
                                                  double rate,
                                                  double frame_len_s,
                                                  double frame_shift_s) {
  const auto frame = static_cast<std::size_t>(std::llround(frame_len_s * rate));
  const auto shift = static_cast<std::size_t>(std::llround(frame_shift_s * rate));
  if (frame == 0 || shift == 0)
    throw ConfigError("frame length and shift must be at least one sample");
  if (x.size() < frame)
    throw DataError("signal shorter than one frame (" +
                    std::to_string(x.size()) + " < " + std::to_string(frame) +
                    " samples)");
  const auto taper = hamming(frame);
  const std::size_t count = (x.size() - frame) / shift + 1;
  std::vector<std::vector<double>> frames(count, std::vector<double>(frame));
  for (std::size_t f = 0; f < count; ++f)
    for (std::size_t n = 0; n < frame; ++n)
      frames[f][n] = x[f * shift + n] * taper[n];
  return frames;
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft(std::span<std::complex<double>> a) {
  const std::size_t n = a.size();
  if (!is_power_of_two(n)) throw ConfigError("FFT size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      // Twiddles evaluated directly; recurrence drift would cost accuracy at
      // large n.
      const std::complex<double> w(std::cos(angle * static_cast<double>(k)),
                                   std::sin(angle * static_cast<double>(k)));
      for (std::size_t i = k; i < n; i += len) {
        const auto u = a[i];
        const auto v = a[i + half] * w;
        a[i] = u + v;
        a[i + half] = u - v;
      }
    }
  }
}

std::vector<double> power_spectrum(std::span<const double> frame,
                                   std::size_t nfft) {
  if (!is_power_of_two(nfft)) throw ConfigError("nfft must be a power of two");
  if (frame.size() > nfft) throw ConfigError("frame longer than nfft");
  std::vector<std::complex<double>> buf(nfft);
  std::copy(frame.begin(), frame.end(), buf.begin());
  fft(buf);
  std::vector<double> p(nfft / 2 + 1);
  const double scale = 1.0 / static_cast<double>(nfft);
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::norm(buf[k]) * scale;
  return p;
}

FilterMatrix triangular_filterbank(std::size_t nfft, std::size_t n_filters,
                                   double rate) {
  if (n_filters < 1 || n_filters > nfft / 2)
    throw ConfigError("n_filters must lie in [1, nfft/2]");
  FilterMatrix fm;
  fm.n_filters = n_filters;
  fm.n_bins = nfft / 2 + 1;
  fm.weights.assign(fm.n_filters * fm.n_bins, 0.0);
  fm.edges.resize(n_filters + 2);
  const double nyquist = rate / 2.0;
  for (std::size_t i = 0; i < fm.edges.size(); ++i) {
    const double f = nyquist * static_cast<double>(i) /
                     static_cast<double>(n_filters + 1);
    fm.edges[i] = f * static_cast<double>(nfft) / rate;
  }
  for (std::size_t m = 1; m <= n_filters; ++m) {
    const double lo = fm.edges[m - 1], mid = fm.edges[m], hi = fm.edges[m + 1];
    for (std::size_t k = 0; k < fm.n_bins; ++k) {
      const double b = static_cast<double>(k);
      double w = 0.0;
      if (b >= lo && b <= mid)
        w = (b - lo) / (mid - lo);
      else if (b > mid && b <= hi)
        w = (hi - b) / (hi - mid);
      fm.weights[(m - 1) * fm.n_bins + k] = w;
    }
  }
  return fm;
}

FilterBankImage compute_filterbank(std::span<const double> channel,
                                   double rate, const FilterBankConfig& cfg,
                                   std::string name) {
  const auto geo = resolve(cfg, rate);
  const auto emphasized = pre_emphasis(channel, cfg.pre_emphasis_alpha);
  const auto frames =
      frame_and_window(emphasized, rate, cfg.frame_len_s, cfg.frame_shift_s);
  const auto bank = triangular_filterbank(geo.nfft, geo.n_filters, rate);

  FilterBankImage img;
  img.channel = std::move(name);
  img.rows = frames.size();
  img.cols = geo.n_filters;
  img.values.assign(img.rows * img.cols, 0.0);
  for (std::size_t r = 0; r < img.rows; ++r) {
    const auto p = power_spectrum(frames[r], geo.nfft);
    for (std::size_t f = 0; f < img.cols; ++f) {
      double e = 0.0;
      for (std::size_t k = 0; k < bank.n_bins; ++k) e += bank.at(f, k) * p[k];
      img.values[r * img.cols + f] = std::log(e + kLogFloor);
    }
  }
  if (cfg.mean_normalize) {
    for (std::size_t f = 0; f < img.cols; ++f) {
      double mean = 0.0;
      for (std::size_t r = 0; r < img.rows; ++r) mean += img.at(r, f);
      mean /= static_cast<double>(img.rows);
      for (std::size_t r = 0; r < img.rows; ++r)
        img.values[r * img.cols + f] -= mean;
    }
  }
  for (double v : img.values)
    if (!std::isfinite(v))
      throw NumericalError("non-finite filter-bank value for channel " +
                           img.channel);
  return img;
}

MixedFeatures mixed_features(const data::Window& window) {
  MixedFeatures out{};
  std::size_t slot = 0;
  for (auto name : data::kChannelNames) {
    const auto& ch = window.channel(name);
    const auto x = ch.samples;
    if (x.empty()) throw DataError("empty channel " + std::string(name));
    const double n = static_cast<double>(x.size());
    double sum = 0.0, lo = x[0], hi = x[0];
    for (double v : x) {
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    // OLS slope against t_i = i / rate.
    const double t_mean = (n - 1.0) / 2.0 / ch.sample_rate_hz;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double dt = static_cast<double>(i) / ch.sample_rate_hz - t_mean;
      sxy += dt * (x[i] - mean);
      sxx += dt * dt;
    }
    out[slot++] = mean;
    out[slot++] = std::sqrt(ss / n);
    out[slot++] = lo;
    out[slot++] = hi;
    out[slot++] = hi - lo;
    out[slot++] = sxx > 0.0 ? sxy / sxx : 0.0;
  }
  return out;
}

}  // namespace stressnas::features
