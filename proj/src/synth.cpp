#include <cmath>
#include <numbers>
#include <random>

#include "stressnas/dataset.hpp"
#include "stressnas/error.hpp"
#include "stressnas/seed.hpp"

namespace stressnas::data {

namespace {

struct ChannelStyle {
  double base;
  double class_offset;   // added once per class index
  double subject_spread; // uniform half-width of the per-subject offset
  double amplitude;
};

ChannelStyle style_for(std::string_view name) {
  if (name == "ACC_x") return {0.0, 0.02, 0.005, 0.2};
  if (name == "ACC_y") return {0.0, -0.02, 0.005, 0.2};
  if (name == "ACC_z") return {1.0, 0.01, 0.005, 0.2};
  if (name == "EDA") return {2.0, 0.2, 0.05, 0.1};
  if (name == "BVP") return {0.0, 0.0, 0.0, 50.0};
  return {33.0, 0.2, 0.05, 0.05};  // TEMP
}

constexpr std::array<int, 3> kClassFilterCentre = {3, 8, 13};
// Tone-to-noise ratio per class. After log compression and per-filter mean
// removal this sets the depth of the envelope pattern, a cue that survives
// global pooling, unlike the tone position alone.
constexpr std::array<double, 3> kClassToneGain = {0.5, 2.0, 8.0};

}  // namespace

double synth_class_frequency(double rate, int class_index) {
  if (class_index < 0 || class_index > 2)
    throw ConfigError("synthetic class index out of range");
  return kClassFilterCentre[static_cast<std::size_t>(class_index)] *
         (rate / 2.0) / 17.0;
}

std::vector<RawRecording> synth_dataset(const SynthConfig& cfg) {
  if (cfg.n_subjects < 2) throw ConfigError("synth needs at least 2 subjects");
  if (!(cfg.duration_s > 0.0) || !(cfg.block_s > 0.0))
    throw ConfigError("synth duration and block length must be positive");

  const auto wesad_ids = wrist_subject_ids();
  const std::size_t n_labels =
      static_cast<std::size_t>(std::llround(cfg.duration_s * kLabelRateHz));
  const std::size_t n_blocks =
      static_cast<std::size_t>(std::ceil(cfg.duration_s / cfg.block_s));
  const double two_pi = 2.0 * std::numbers::pi;

  std::vector<RawRecording> out;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    RawRecording rec;
    rec.subject_id = s < static_cast<int>(wesad_ids.size())
                         ? wesad_ids[static_cast<std::size_t>(s)]
                         : 18 + s - static_cast<int>(wesad_ids.size());
    std::mt19937_64 rng(derive_seed(cfg.seed, rec.subject_id, "synth"));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Block b carries protocol code 1 + b % 3.
    std::vector<int> block_class(n_blocks);
    for (std::size_t b = 0; b < n_blocks; ++b)
      block_class[b] = static_cast<int>(b % 3);

    rec.labels.resize(n_labels);
    for (std::size_t i = 0; i < n_labels; ++i) {
      const double t = static_cast<double>(i) / kLabelRateHz;
      const auto b = std::min(n_blocks - 1,
                              static_cast<std::size_t>(t / cfg.block_s));
      rec.labels[i] = static_cast<std::uint8_t>(kBaseline + block_class[b]);
    }

    for (auto name : kChannelNames) {
      const double rate = nominal_rate(name);
      const auto style = style_for(name);
      const double subject_offset = style.subject_spread * unit(rng);
      std::array<double, 3> freq{};
      for (int c = 0; c < 3; ++c)
        freq[static_cast<std::size_t>(c)] =
            synth_class_frequency(rate, c) * (1.0 + cfg.freq_jitter * unit(rng));
      std::vector<double> carrier_phase(n_blocks), envelope_phase(n_blocks);
      for (std::size_t b = 0; b < n_blocks; ++b) {
        carrier_phase[b] = two_pi * 0.5 * (unit(rng) + 1.0);
        envelope_phase[b] = two_pi * 0.5 * (unit(rng) + 1.0);
      }

      Channel ch;
      ch.sample_rate_hz = rate;
      const auto n = static_cast<std::size_t>(std::llround(cfg.duration_s * rate));
      ch.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / rate;
        const auto b = std::min(n_blocks - 1,
                                static_cast<std::size_t>(t / cfg.block_s));
        const int c = block_class[b];
        const double env =
            0.5 * (1.0 - std::cos(two_pi * t / cfg.modulation_period_s +
                                  envelope_phase[b]));
        const double tone =
            kClassToneGain[static_cast<std::size_t>(c)] *
            std::sin(two_pi * freq[static_cast<std::size_t>(c)] * t +
                     carrier_phase[b]);
        ch.samples[i] = style.base + subject_offset + style.class_offset * c +
                        style.amplitude * (env * tone + cfg.noise_std * gauss(rng));
      }
      rec.channels.emplace(std::string(name), std::move(ch));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace stressnas::data
