#include "stressnas/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "stressnas/error.hpp"

namespace stressnas::data {

namespace {

using nlohmann::json;

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0x0000ff00u) | ((v << 8) & 0x00ff0000u) |
         (v << 24);
}

std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<char> bytes(size);
  if (size > 0 && !in.read(bytes.data(), static_cast<std::streamsize>(size)))
    throw DataError("cannot read " + path.string());
  return bytes;
}

std::vector<double> decode_f32le(const std::vector<char>& bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

void write_f32le(const std::filesystem::path& path,
                 std::span<const double> values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
    std::memcpy(bytes.data() + 4 * i, &bits, 4);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

double nominal_rate(std::string_view channel) {
  if (channel == "ACC_x" || channel == "ACC_y" || channel == "ACC_z")
    return 32.0;
  if (channel == "EDA" || channel == "TEMP") return 4.0;
  if (channel == "BVP") return 64.0;
  throw DataError("unknown channel " + std::string(channel));
}

std::vector<int> wrist_subject_ids() {
  std::vector<int> ids;
  for (int id = 2; id <= 17; ++id)
    if (id != 12) ids.push_back(id);
  return ids;
}

const Channel& RawRecording::channel(std::string_view name) const {
  auto it = channels.find(name);
  if (it == channels.end())
    throw DataError("subject " + std::to_string(subject_id) +
                    ": missing channel " + std::string(name));
  return it->second;
}

double RawRecording::duration_s() const {
  double d = static_cast<double>(labels.size()) / kLabelRateHz;
  for (const auto& [name, ch] : channels) d = std::min(d, ch.duration_s());
  return d;
}

void RawRecording::validate() const {
  if (channels.empty()) return;
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  for (const auto& [name, ch] : channels) {
    if (ch.sample_rate_hz <= 0.0)
      throw DataError("channel " + name + " has non-positive sample rate");
    lo = std::min(lo, ch.duration_s());
    hi = std::max(hi, ch.duration_s());
  }
  if (hi - lo > 1.0)
    throw DataError("subject " + std::to_string(subject_id) +
                    ": channel durations disagree by more than 1 s");
  const double label_s = static_cast<double>(labels.size()) / kLabelRateHz;
  if (label_s < lo - 1.0 || label_s > hi + 1.0)
    throw DataError("subject " + std::to_string(subject_id) +
                    ": label track duration disagrees with channels");
}

int n_classes(TaskMode mode) { return mode == TaskMode::three_state ? 3 : 2; }

std::string_view to_string(TaskMode mode) {
  return mode == TaskMode::three_state ? "three_state" : "binary";
}

TaskMode parse_task_mode(std::string_view text) {
  if (text == "three_state" || text == "three-state" || text == "3")
    return TaskMode::three_state;
  if (text == "binary" || text == "2") return TaskMode::binary;
  throw ConfigError("unknown task mode '" + std::string(text) + "'");
}

std::vector<std::uint8_t> map_conditions(std::span<const std::uint8_t> labels,
                                         TaskMode mode) {
  std::vector<std::uint8_t> out(labels.size(), kIgnoreClass);
  const bool binary = mode == TaskMode::binary;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    switch (labels[i]) {
      case kBaseline: out[i] = 0; break;
      case kStress: out[i] = 1; break;
      case kAmusement: out[i] = binary ? 0 : 2; break;
      default: break;
    }
  }
  return out;
}

void WindowConfig::validate() const {
  if (!(window_len_s > 0.0)) throw ConfigError("window_len_s must be > 0");
  if (!(shift_s > 0.0)) throw ConfigError("shift_s must be > 0");
  if (shift_s > window_len_s)
    throw ConfigError("shift_s must not exceed window_len_s");
}

const ChannelSlice& Window::channel(std::string_view name) const {
  for (const auto& c : channels)
    if (c.name == name) return c;
  throw DataError("window lacks channel " + std::string(name));
}

SampleSpan window_span(double start_s, double len_s, double rate) {
  return {static_cast<std::size_t>(std::llround(start_s * rate)),
          static_cast<std::size_t>(std::llround((start_s + len_s) * rate))};
}

std::vector<Window> segment_windows(const RawRecording& rec,
                                    const WindowConfig& cfg, TaskMode mode) {
  cfg.validate();
  std::vector<Window> windows;
  const auto classes = map_conditions(rec.labels, mode);
  if (classes.empty()) return windows;

  // run_end[i] = one past the last index of the constant run containing i.
  std::vector<std::size_t> run_end(classes.size());
  run_end.back() = classes.size();
  for (std::size_t i = classes.size() - 1; i-- > 0;)
    run_end[i] = classes[i] == classes[i + 1] ? run_end[i + 1] : i + 1;

  struct Present {
    std::string_view name;
    const Channel* ch;
  };
  std::vector<Present> present;
  for (auto name : kChannelNames) {
    auto it = rec.channels.find(name);
    if (it != rec.channels.end()) present.push_back({it->first, &it->second});
  }

  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * cfg.shift_s;
    const auto lab = window_span(t, cfg.window_len_s, kLabelRateHz);
    if (lab.end > classes.size()) break;
    bool inside = true;
    for (const auto& p : present) {
      if (window_span(t, cfg.window_len_s, p.ch->sample_rate_hz).end >
          p.ch->samples.size()) {
        inside = false;
        break;
      }
    }
    if (!inside) break;
    if (lab.begin >= lab.end) continue;
    const auto cls = classes[lab.begin];
    if (cls == kIgnoreClass || run_end[lab.begin] < lab.end) continue;

    Window w;
    w.subject_id = rec.subject_id;
    w.start_time_s = t;
    w.class_label = cls;
    w.channels.reserve(present.size());
    for (const auto& p : present) {
      const auto s = window_span(t, cfg.window_len_s, p.ch->sample_rate_hz);
      w.channels.push_back(
          {p.name, p.ch->sample_rate_hz,
           std::span<const double>(p.ch->samples).subspan(s.begin,
                                                          s.end - s.begin)});
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

std::vector<Fold> loso_folds(std::vector<int> subject_ids) {
  std::sort(subject_ids.begin(), subject_ids.end());
  if (std::adjacent_find(subject_ids.begin(), subject_ids.end()) !=
      subject_ids.end())
    throw DataError("duplicate subject id in fold construction");
  if (subject_ids.size() < 2)
    throw DataError("leave-one-subject-out needs at least 2 subjects");
  std::vector<Fold> folds;
  for (int held : subject_ids) {
    Fold f;
    f.held_out_subject_id = held;
    for (int id : subject_ids)
      if (id != held) f.train_subject_ids.push_back(id);
    folds.push_back(std::move(f));
  }
  return folds;
}

SubjectManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  json j;
  try {
    in >> j;
    SubjectManifest m;
    m.subject_id = j.at("subject_id").get<int>();
    for (const auto& c : j.at("channels")) {
      ChannelEntry e;
      e.name = c.at("name").get<std::string>();
      e.sample_rate_hz = c.at("sample_rate_hz").get<double>();
      e.file = c.at("file").get<std::string>();
      e.n_samples = c.at("n_samples").get<std::size_t>();
      e.dtype = c.at("dtype").get<std::string>();
      m.channels.push_back(std::move(e));
    }
    const auto& l = j.at("label");
    m.label.file = l.at("file").get<std::string>();
    m.label.sample_rate_hz = l.at("sample_rate_hz").get<double>();
    m.label.n_samples = l.at("n_samples").get<std::size_t>();
    m.label.dtype = l.at("dtype").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

std::size_t interpolate_interior_nans(std::vector<double>& x,
                                      std::string_view channel) {
  std::size_t filled = 0;
  std::size_t i = 0;
  while (i < x.size()) {
    if (!std::isnan(x[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < x.size() && std::isnan(x[j])) ++j;
    if (i == 0 || j == x.size())
      throw DataError("channel " + std::string(channel) +
                      ": NaN at boundary index " + std::to_string(i) +
                      " cannot be interpolated");
    const double a = x[i - 1];
    const double b = x[j];
    const double span = static_cast<double>(j - i + 1);
    for (std::size_t k = i; k < j; ++k)
      x[k] = a + (b - a) * static_cast<double>(k - i + 1) / span;
    filled += j - i;
    i = j;
  }
  return filled;
}

RawRecording load_subject(const std::filesystem::path& dir,
                          const LoadOptions& options, LoadReport* report) {
  const auto manifest = read_manifest(dir);
  RawRecording rec;
  rec.subject_id = manifest.subject_id;
  std::size_t interpolated = 0;

  for (auto name : kChannelNames) {
    auto it = std::find_if(manifest.channels.begin(), manifest.channels.end(),
                           [&](const ChannelEntry& e) { return e.name == name; });
    if (it == manifest.channels.end())
      throw DataError("subject " + std::to_string(rec.subject_id) +
                      ": missing channel " + std::string(name));
    if (it->dtype != "f32le")
      throw DataError("channel " + it->name + ": unsupported dtype " +
                      it->dtype);
    if (it->sample_rate_hz != nominal_rate(name)) {
      std::ostringstream msg;
      msg << "channel " << it->name << ": sample rate " << it->sample_rate_hz
          << " Hz, expected " << nominal_rate(name) << " Hz";
      throw DataError(msg.str());
    }
    const auto bytes = read_bytes(dir / it->file);
    if (bytes.size() != it->n_samples * 4)
      throw DataError("channel " + it->name + ": length mismatch, expected " +
                      std::to_string(it->n_samples * 4) + " bytes, found " +
                      std::to_string(bytes.size()));
    Channel ch{it->sample_rate_hz, decode_f32le(bytes)};
    for (std::size_t i = 0; i < ch.samples.size(); ++i) {
      if (std::isnan(ch.samples[i]) && !options.interpolate_nan)
        throw DataError("channel " + it->name + ": NaN at index " +
                        std::to_string(i));
    }
    if (options.interpolate_nan)
      interpolated += interpolate_interior_nans(ch.samples, it->name);
    rec.channels.emplace(it->name, std::move(ch));
  }

  if (manifest.label.dtype != "u8")
    throw DataError("label track: unsupported dtype " + manifest.label.dtype);
  if (manifest.label.sample_rate_hz != kLabelRateHz)
    throw DataError("label track must be sampled at 700 Hz");
  const auto bytes = read_bytes(dir / manifest.label.file);
  if (bytes.size() != manifest.label.n_samples)
    throw DataError("label track: length mismatch, expected " +
                    std::to_string(manifest.label.n_samples) +
                    " bytes, found " + std::to_string(bytes.size()));
  rec.labels.assign(bytes.begin(), bytes.end());
  rec.validate();
  if (report) report->interpolated_nans = interpolated;
  return rec;
}

std::vector<RawRecording> load_dataset(const std::filesystem::path& root,
                                       const LoadOptions& options) {
  if (!std::filesystem::is_directory(root))
    throw DataError("dataset directory not found: " + root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root))
    if (entry.is_directory() &&
        std::filesystem::exists(entry.path() / "manifest.json"))
      dirs.push_back(entry.path());
  std::vector<RawRecording> recs;
  for (const auto& d : dirs) recs.push_back(load_subject(d, options));
  std::sort(recs.begin(), recs.end(),
            [](const RawRecording& a, const RawRecording& b) {
              return a.subject_id < b.subject_id;
            });
  std::set<int> seen;
  for (const auto& r : recs)
    if (!seen.insert(r.subject_id).second)
      throw DataError("duplicate subject id " + std::to_string(r.subject_id) +
                      " under " + root.string());
  if (recs.empty())
    throw DataError("no subject directories under " + root.string());
  return recs;
}

SubjectManifest write_subject(const RawRecording& rec,
                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  SubjectManifest m;
  m.subject_id = rec.subject_id;
  json j;
  j["subject_id"] = rec.subject_id;
  j["channels"] = json::array();
  for (auto name : kChannelNames) {
    const auto& ch = rec.channel(name);
    ChannelEntry e{std::string(name), ch.sample_rate_hz,
                   std::string(name) + ".f32", ch.samples.size(), "f32le"};
    write_f32le(dir / e.file, ch.samples);
    j["channels"].push_back({{"name", e.name},
                             {"sample_rate_hz", e.sample_rate_hz},
                             {"file", e.file},
                             {"n_samples", e.n_samples},
                             {"dtype", e.dtype}});
    m.channels.push_back(std::move(e));
  }
  m.label = {"labels.u8", kLabelRateHz, rec.labels.size(), "u8"};
  {
    std::ofstream out(dir / m.label.file, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / m.label.file).string());
    out.write(reinterpret_cast<const char*>(rec.labels.data()),
              static_cast<std::streamsize>(rec.labels.size()));
  }
  j["label"] = {{"file", m.label.file},
                {"sample_rate_hz", m.label.sample_rate_hz},
                {"n_samples", m.label.n_samples},
                {"dtype", m.label.dtype}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << "\n";
  return m;
}

}  // namespace stressnas::data
