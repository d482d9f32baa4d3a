#include "pyramidcast/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "pyramidcast/errors.hpp"
#include "pyramidcast/sha256.hpp"

namespace pyramidcast {

namespace {

constexpr char kMagic[4] = {'H', 'U', 'T', 'D'};
constexpr uint32_t kVersion = 1;
constexpr double kPi = 3.14159265358979323846;

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string strip_suffix(const std::string& path) {
  auto ends_with = [&](const char* suf) {
    const size_t n = std::strlen(suf);
    return path.size() > n && path.compare(path.size() - n, n, suf) == 0;
  };
  if (ends_with(".json")) return path.substr(0, path.size() - 5);
  if (ends_with(".bin")) return path.substr(0, path.size() - 4);
  return path;
}

}  // namespace

int64_t TrafficDataset::slots_per_day() const {
  const int64_t minutes_per_day = 24 * 60;
  if (sample_interval_minutes <= 0 || minutes_per_day % sample_interval_minutes != 0) {
    throw ConfigError("sample interval " + std::to_string(sample_interval_minutes) +
                      " minutes does not divide a day evenly");
  }
  return minutes_per_day / sample_interval_minutes;
}

void TrafficDataset::validate() const {
  const int64_t slots = slots_per_day();
  if (num_steps < 1 || num_sensors < 1 || num_channels < 1) {
    throw DataError("dataset " + name + " has degenerate dimensions");
  }
  if (start_slot_of_day < 0 || start_slot_of_day >= slots) {
    throw ConfigError("start_slot_of_day " + std::to_string(start_slot_of_day) +
                      " outside [0, " + std::to_string(slots) + ")");
  }
  if (start_day_of_week < 0 || start_day_of_week >= 7) {
    throw ConfigError("start_day_of_week must lie in [0, 7)");
  }
  if (static_cast<int64_t>(values.size()) != num_steps * num_sensors * num_channels) {
    throw DataError("dataset " + name + " value count mismatch");
  }
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw DataError("dataset " + name + " has non-finite value at flat offset " +
                      std::to_string(i));
    }
  }
}

Splits split_dataset(const TrafficDataset& ds, double train_ratio, double val_ratio,
                     double test_ratio) {
  if (train_ratio <= 0.0 || val_ratio < 0.0 || test_ratio < 0.0) {
    throw ConfigError("split ratios must be positive (train) and non-negative");
  }
  const double total = train_ratio + val_ratio + test_ratio;
  if (std::fabs(total - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1, got " + std::to_string(total));
  }
  const int64_t t = ds.num_steps;
  const int64_t b1 = static_cast<int64_t>(std::floor(train_ratio * t));
  const int64_t b2 = static_cast<int64_t>(std::floor((train_ratio + val_ratio) * t));
  Splits s;
  s.train = {0, b1};
  s.val = {b1, b2};
  s.test = {b2, t};
  return s;
}

NormStats fit_norm(const TrafficDataset& ds, SplitRange train_range) {
  if (train_range.size() < 1) {
    throw ConfigError("normalization requires a nonempty training range");
  }
  const int64_t c = ds.num_channels;
  NormStats stats;
  stats.mean.assign(c, 0.0);
  stats.stddev.assign(c, 0.0);
  const int64_t count = train_range.size() * ds.num_sensors;
  for (int64_t t = train_range.begin; t < train_range.end; ++t) {
    for (int64_t s = 0; s < ds.num_sensors; ++s) {
      for (int64_t ch = 0; ch < c; ++ch) stats.mean[ch] += ds.at(t, s, ch);
    }
  }
  for (int64_t ch = 0; ch < c; ++ch) stats.mean[ch] /= static_cast<double>(count);
  for (int64_t t = train_range.begin; t < train_range.end; ++t) {
    for (int64_t s = 0; s < ds.num_sensors; ++s) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double d = ds.at(t, s, ch) - stats.mean[ch];
        stats.stddev[ch] += d * d;
      }
    }
  }
  for (int64_t ch = 0; ch < c; ++ch) {
    stats.stddev[ch] = std::sqrt(stats.stddev[ch] / static_cast<double>(count));
    if (!(stats.stddev[ch] > 0.0)) {
      throw DataError("degenerate data: channel " + std::to_string(ch) +
                      " has zero standard deviation on the training range");
    }
  }
  return stats;
}

double apply_norm(double x, const NormStats& stats, int64_t channel) {
  return (x - stats.mean[channel]) / stats.stddev[channel];
}

double invert_norm(double x, const NormStats& stats, int64_t channel) {
  return x * stats.stddev[channel] + stats.mean[channel];
}

SampleIndex::SampleIndex(SplitRange range, int64_t history_len, int64_t future_len,
                         int64_t num_sensors)
    : range_(range),
      history_len_(history_len),
      future_len_(future_len),
      num_sensors_(num_sensors) {
  num_offsets_ = range.size() - history_len - future_len + 1;
  if (num_offsets_ < 1) {
    throw ConfigError("range of " + std::to_string(range.size()) +
                      " steps is shorter than history+future = " +
                      std::to_string(history_len + future_len));
  }
}

SampleRef SampleIndex::at(int64_t i) const {
  if (i < 0 || i >= count()) {
    throw ConfigError("sample index " + std::to_string(i) + " out of range [0, " +
                      std::to_string(count()) + ")");
  }
  return {i / num_sensors_, i % num_sensors_};
}

SampleIndex iter_samples(const TrafficDataset& ds, SplitRange range, int64_t history_len,
                         int64_t future_len) {
  if (range.begin < 0 || range.end > ds.num_steps || range.begin >= range.end) {
    throw ConfigError("sample range outside dataset bounds");
  }
  return SampleIndex(range, history_len, future_len, ds.num_sensors);
}

Sample materialize_sample(const TrafficDataset& ds, const SampleIndex& index,
                          SampleRef ref) {
  const int64_t t0 = index.range().begin + ref.offset;
  const int64_t hist = index.history_len();
  const int64_t fut = index.future_len();
  const int64_t c = ds.num_channels;
  Sample s;
  s.sensor_id = ref.sensor;
  s.history.resize(hist * c);
  s.future.resize(fut * c);
  s.tid_history.resize(hist);
  s.diw_history.resize(hist);
  s.tid_future.resize(fut);
  s.diw_future.resize(fut);
  for (int64_t k = 0; k < hist; ++k) {
    const int64_t t = t0 + k;
    for (int64_t ch = 0; ch < c; ++ch) s.history[k * c + ch] = ds.at(t, ref.sensor, ch);
    s.tid_history[k] = ds.time_of_day_slot(t);
    s.diw_history[k] = ds.day_of_week(t);
  }
  for (int64_t k = 0; k < fut; ++k) {
    const int64_t t = t0 + hist + k;
    for (int64_t ch = 0; ch < c; ++ch) s.future[k * c + ch] = ds.at(t, ref.sensor, ch);
    s.tid_future[k] = ds.time_of_day_slot(t);
    s.diw_future[k] = ds.day_of_week(t);
  }
  return s;
}

TrafficDataset generate_synthetic(const SyntheticSpec& spec, uint64_t seed) {
  if (spec.num_sensors < 1 || spec.num_days < 1 || spec.spike_width < 1) {
    throw ConfigError("synthetic spec requires positive sensors, days and spike width");
  }
  TrafficDataset ds;
  ds.name = spec.name;
  ds.num_sensors = spec.num_sensors;
  ds.num_channels = 1;
  ds.sample_interval_minutes = spec.sample_interval_minutes;
  ds.start_slot_of_day = spec.start_slot_of_day;
  ds.start_day_of_week = spec.start_day_of_week;
  const int64_t slots = ds.slots_per_day();
  ds.num_steps = spec.num_days * slots;
  ds.values.assign(ds.num_steps * ds.num_sensors, 0.0);

  const double start_prob = spec.spike_rate_per_day / static_cast<double>(slots);
  for (int64_t sensor = 0; sensor < spec.num_sensors; ++sensor) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(sensor)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double phase = unit(rng) * 2.0 * kPi;

    std::vector<double> series(ds.num_steps);
    for (int64_t t = 0; t < ds.num_steps; ++t) {
      const double tid = static_cast<double>(ds.time_of_day_slot(t));
      series[t] = spec.base_level +
                  spec.daily_amplitude *
                      std::sin(2.0 * kPi * tid / static_cast<double>(slots) + phase);
    }
    if (spec.spike_rate_per_day > 0.0 && spec.spike_depth != 0.0) {
      for (int64_t t = 0; t < ds.num_steps; ++t) {
        if (unit(rng) < start_prob) {
          // sudden drop to -depth at t, linear recovery over spike_width steps
          for (int64_t k = 0; k < spec.spike_width && t + k < ds.num_steps; ++k) {
            const double frac =
                1.0 - static_cast<double>(k) / static_cast<double>(spec.spike_width);
            series[t + k] -= spec.spike_depth * frac;
          }
        }
      }
    }
    if (spec.noise_sigma > 0.0) {
      for (int64_t t = 0; t < ds.num_steps; ++t) {
        series[t] += spec.noise_sigma * gauss(rng);
      }
    }
    for (int64_t t = 0; t < ds.num_steps; ++t) {
      // quantize through f32 so that file round trips are bit-exact
      ds.values[t * ds.num_sensors + sensor] =
          static_cast<double>(static_cast<float>(series[t]));
    }
  }
  ds.validate();
  return ds;
}

void save_dataset(const TrafficDataset& ds, const std::string& stem) {
  ds.validate();
  std::string payload;
  payload.reserve(8 + ds.values.size() * 4);
  payload.append(kMagic, 4);
  for (int i = 0; i < 4; ++i) {
    payload.push_back(static_cast<char>((kVersion >> (8 * i)) & 0xff));
  }
  for (double v : ds.values) {
    const float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) {
      payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
  {
    std::ofstream out(stem + ".bin", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + stem + ".bin for writing");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("failed writing " + stem + ".bin");
  }
  nlohmann::json meta = {
      {"name", ds.name},
      {"num_steps", ds.num_steps},
      {"num_sensors", ds.num_sensors},
      {"num_channels", ds.num_channels},
      {"sample_interval_minutes", ds.sample_interval_minutes},
      {"start_slot_of_day", ds.start_slot_of_day},
      {"start_day_of_week", ds.start_day_of_week},
      {"payload_sha256", sha256_hex(payload.data(), payload.size())},
  };
  std::ofstream out(stem + ".json", std::ios::trunc);
  if (!out) throw DataError("cannot open " + stem + ".json for writing");
  out << meta.dump(2) << "\n";
}

TrafficDataset load_dataset(const std::string& path) {
  const std::string stem = strip_suffix(path);
  std::ifstream jf(stem + ".json");
  if (!jf) throw DataError("cannot open dataset metadata " + stem + ".json");
  nlohmann::json meta;
  try {
    jf >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset metadata " + stem + ".json: " + e.what());
  }

  TrafficDataset ds;
  try {
    ds.name = meta.at("name").get<std::string>();
    ds.num_steps = meta.at("num_steps").get<int64_t>();
    ds.num_sensors = meta.at("num_sensors").get<int64_t>();
    ds.num_channels = meta.at("num_channels").get<int64_t>();
    ds.sample_interval_minutes = meta.at("sample_interval_minutes").get<int64_t>();
    ds.start_slot_of_day = meta.at("start_slot_of_day").get<int64_t>();
    ds.start_day_of_week = meta.at("start_day_of_week").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset metadata " + stem + ".json missing keys: " + e.what());
  }

  std::ifstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw DataError("cannot open dataset payload " + stem + ".bin");
  std::string payload((std::istreambuf_iterator<char>(bf)),
                      std::istreambuf_iterator<char>());

  if (payload.size() < 8) {
    throw DataError("truncated payload " + stem + ".bin: " +
                    std::to_string(payload.size()) + " bytes, header needs 8");
  }
  if (std::memcmp(payload.data(), kMagic, 4) != 0) {
    throw DataError("bad magic in " + stem + ".bin at offset 0 (expected HUTD)");
  }
  uint32_t version = 0;
  for (int i = 3; i >= 0; --i) {
    version = (version << 8) | static_cast<uint8_t>(payload[4 + i]);
  }
  if (version != kVersion) {
    throw DataError("unsupported payload version " + std::to_string(version) +
                    " at offset 4 in " + stem + ".bin");
  }
  const int64_t expected_count = ds.num_steps * ds.num_sensors * ds.num_channels;
  const size_t expected_bytes = 8 + static_cast<size_t>(expected_count) * 4;
  if (payload.size() != expected_bytes) {
    throw DataError("truncated payload " + stem + ".bin at offset " +
                    std::to_string(payload.size()) + " (expected " +
                    std::to_string(expected_bytes) + " bytes)");
  }
  const std::string digest = sha256_hex(payload.data(), payload.size());
  const std::string recorded = meta.value("payload_sha256", "");
  if (!recorded.empty() && digest != recorded) {
    throw DataError("payload hash mismatch for " + stem + ".bin: metadata records " +
                    recorded + " but payload hashes to " + digest);
  }

  ds.values.resize(expected_count);
  for (int64_t i = 0; i < expected_count; ++i) {
    uint32_t bits = 0;
    for (int j = 3; j >= 0; --j) {
      bits = (bits << 8) | static_cast<uint8_t>(payload[8 + i * 4 + j]);
    }
    float f;
    std::memcpy(&f, &bits, 4);
    if (!std::isfinite(f)) {
      throw DataError("non-finite value at offset " + std::to_string(8 + i * 4) +
                      " in " + stem + ".bin");
    }
    ds.values[i] = static_cast<double>(f);
  }
  ds.validate();
  return ds;
}

TrafficDataset import_csv(const std::string& csv_path, const std::string& name,
                          int64_t sample_interval_minutes, int64_t start_slot_of_day,
                          int64_t start_day_of_week) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open CSV file " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV file " + csv_path + " is empty");

  auto split_fields = [](const std::string& row) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(row);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!row.empty() && row.back() == ',') fields.push_back("");
    return fields;
  };

  auto header = split_fields(line);
  if (header.empty()) throw DataError("CSV header row of " + csv_path + " is empty");
  bool skip_first = false;
  {
    std::string first = header[0];
    for (char& ch : first) ch = static_cast<char>(std::tolower(ch));
    if (first.empty() || first == "time" || first == "timestamp" || first == "date") {
      skip_first = true;
    }
  }
  const size_t first_col = skip_first ? 1 : 0;
  const int64_t sensors = static_cast<int64_t>(header.size() - first_col);
  if (sensors < 1) throw DataError("CSV file " + csv_path + " has no sensor columns");

  TrafficDataset ds;
  ds.name = name;
  ds.num_sensors = sensors;
  ds.num_channels = 1;
  ds.sample_interval_minutes = sample_interval_minutes;
  ds.start_slot_of_day = start_slot_of_day;
  ds.start_day_of_week = start_day_of_week;

  int64_t row_num = 1;
  while (std::getline(in, line)) {
    ++row_num;
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (static_cast<int64_t>(fields.size()) - static_cast<int64_t>(first_col) !=
        sensors) {
      throw DataError("CSV row " + std::to_string(row_num) + " has " +
                      std::to_string(static_cast<int64_t>(fields.size()) -
                                     static_cast<int64_t>(first_col)) +
                      " values, expected " + std::to_string(sensors));
    }
    for (int64_t s = 0; s < sensors; ++s) {
      const std::string& f = fields[first_col + s];
      try {
        const float v = std::stof(f);
        ds.values.push_back(static_cast<double>(v));
      } catch (const std::exception&) {
        throw DataError("CSV row " + std::to_string(row_num) + " column " +
                        std::to_string(first_col + s + 1) + ": cannot parse '" + f +
                        "'");
      }
    }
    ++ds.num_steps;
  }
  ds.validate();
  return ds;
}

}  // namespace pyramidcast
