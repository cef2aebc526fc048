#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stressnas::data {

// Wrist-device channels in canonical order.
inline constexpr std::array<std::string_view, 6> kChannelNames = {
    "ACC_x", "ACC_y", "ACC_z", "EDA", "BVP", "TEMP"};
inline constexpr double kLabelRateHz = 700.0;

/// Native sampling rate of a wrist channel; throws DataError for unknown names.
double nominal_rate(std::string_view channel);

/// Subject ids that survive the device-malfunction exclusions (1 and 12).
std::vector<int> wrist_subject_ids();

struct Channel {
  double sample_rate_hz = 0.0;
  std::vector<double> samples;

  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate_hz;
  }
};

// Protocol codes on the 700 Hz label track.
enum ProtocolCode : std::uint8_t {
  kTransient = 0,
  kBaseline = 1,
  kStress = 2,
  kAmusement = 3,
  kMeditation = 4,
};

struct RawRecording {
  int subject_id = 0;
  std::map<std::string, Channel, std::less<>> channels;
  std::vector<std::uint8_t> labels;  // protocol codes at 700 Hz

  const Channel& channel(std::string_view name) const;
  bool has_channel(std::string_view name) const {
    return channels.find(name) != channels.end();
  }
  /// Shortest duration over all channels and the label track.
  double duration_s() const;
  /// Checks the cross-channel duration agreement (1 s) and label length.
  void validate() const;
};

enum class TaskMode { three_state, binary };

int n_classes(TaskMode mode);
std::string_view to_string(TaskMode mode);
TaskMode parse_task_mode(std::string_view text);

inline constexpr std::uint8_t kIgnoreClass = 255;

/// Maps protocol codes to task classes; everything that is not baseline,
/// stress or amusement maps to kIgnoreClass.
std::vector<std::uint8_t> map_conditions(std::span<const std::uint8_t> labels,
                                         TaskMode mode);

struct WindowConfig {
  double window_len_s = 60.0;
  double shift_s = 0.25;

  void validate() const;
};

/// Non-owning view of one channel inside a window.
struct ChannelSlice {
  std::string_view name;
  double sample_rate_hz = 0.0;
  std::span<const double> samples;
};

/// One window over a recording. Slices point into the RawRecording, which
/// must outlive the window.
struct Window {
  int subject_id = 0;
  double start_time_s = 0.0;
  int class_label = 0;
  std::vector<ChannelSlice> channels;  // canonical order, present channels only

  const ChannelSlice& channel(std::string_view name) const;
};

/// Half-open sample range [begin, end) of a window at `rate`.
struct SampleSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};
SampleSpan window_span(double start_s, double len_s, double rate);

/// Sliding windows at t = k * shift, kept only when every 700 Hz class
/// sample in the span carries the same non-ignored class.
std::vector<Window> segment_windows(const RawRecording& rec,
                                    const WindowConfig& cfg, TaskMode mode);

struct Fold {
  int held_out_subject_id = 0;
  std::vector<int> train_subject_ids;
};

/// One fold per subject in ascending id order.
std::vector<Fold> loso_folds(std::vector<int> subject_ids);

// ---------------------------------------------------------------------------
// On-disk format: raw little-endian arrays plus manifest.json.

struct ChannelEntry {
  std::string name;
  double sample_rate_hz = 0.0;
  std::string file;
  std::size_t n_samples = 0;
  std::string dtype;  // "f32le"
};

struct LabelEntry {
  std::string file;
  double sample_rate_hz = kLabelRateHz;
  std::size_t n_samples = 0;
  std::string dtype;  // "u8"
};

struct SubjectManifest {
  int subject_id = 0;
  std::vector<ChannelEntry> channels;
  LabelEntry label;
};

SubjectManifest read_manifest(const std::filesystem::path& dir);

struct LoadOptions {
  bool interpolate_nan = false;
};

struct LoadReport {
  std::size_t interpolated_nans = 0;
};

/// Reads one subject directory. Fails on missing channels, length
/// mismatches and NaNs unless `interpolate_nan` is set, in which case
/// interior NaN runs are filled linearly and counted in `report`.
RawRecording load_subject(const std::filesystem::path& dir,
                          const LoadOptions& options = {},
                          LoadReport* report = nullptr);

/// Loads every subdirectory holding a manifest.json, sorted by subject id.
std::vector<RawRecording> load_dataset(const std::filesystem::path& root,
                                       const LoadOptions& options = {});

/// Writes the recording in the neutral format. Samples are narrowed to f32.
SubjectManifest write_subject(const RawRecording& rec,
                              const std::filesystem::path& dir);

/// Linear fill of interior NaN runs. Returns the number of filled samples;
/// throws DataError when a NaN touches either end.
std::size_t interpolate_interior_nans(std::vector<double>& x,
                                      std::string_view channel);

// ---------------------------------------------------------------------------
// Synthetic data for desk-scale runs.

struct SynthConfig {
  int n_subjects = 5;
  double duration_s = 600.0;
  double block_s = 100.0;  // conditions cycle baseline, stress, amusement
  std::uint64_t seed = 0;
  double noise_std = 0.5;
  double freq_jitter = 0.02;     // relative, per subject and class
  double modulation_period_s = 20.0;
};

/// Tone frequency carried by `class_index` on a channel sampled at `rate`.
/// Tones sit on the centres of a 16-filter linear bank over [0, rate/2].
double synth_class_frequency(double rate, int class_index);

std::vector<RawRecording> synth_dataset(const SynthConfig& cfg);

}  // namespace stressnas::data
