#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pyramidcast {

/// Multivariate traffic observations on a fixed sampling grid.
/// `values` is laid out [time][sensor][channel], row-major. Values are
/// exactly representable as 32-bit floats so that file round trips are
/// bit-exact.
struct TrafficDataset {
  std::string name = "dataset";
  int64_t num_steps = 0;
  int64_t num_sensors = 0;
  int64_t num_channels = 1;
  int64_t sample_interval_minutes = 5;
  int64_t start_slot_of_day = 0;   // in [0, slots_per_day)
  int64_t start_day_of_week = 0;   // Monday=0 .. Sunday=6
  std::vector<double> values;

  int64_t slots_per_day() const;
  double at(int64_t t, int64_t sensor, int64_t channel) const {
    return values[(t * num_sensors + sensor) * num_channels + channel];
  }
  int64_t time_of_day_slot(int64_t t) const {
    return (start_slot_of_day + t) % slots_per_day();
  }
  int64_t day_of_week(int64_t t) const {
    return (start_day_of_week + (start_slot_of_day + t) / slots_per_day()) % 7;
  }
  void validate() const;
};

struct SplitRange {
  int64_t begin = 0;
  int64_t end = 0;
  int64_t size() const { return end - begin; }
};

struct Splits {
  SplitRange train, val, test;
};

/// Contiguous, disjoint, ordered ranges covering [0, num_steps); boundaries
/// are floor(cumulative_ratio * num_steps).
Splits split_dataset(const TrafficDataset& ds, double train_ratio, double val_ratio,
                     double test_ratio);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel z-score statistics computed on the training range only.
NormStats fit_norm(const TrafficDataset& ds, SplitRange train_range);
double apply_norm(double x, const NormStats& stats, int64_t channel);
double invert_norm(double x, const NormStats& stats, int64_t channel);

struct SampleRef {
  int64_t offset = 0;  // relative to the range start
  int64_t sensor = 0;
};

/// Enumeration over (offset, sensor) pairs with stride 1 over time,
/// offset-major. count = (range_len - T - T_f + 1) * num_sensors.
class SampleIndex {
 public:
  SampleIndex(SplitRange range, int64_t history_len, int64_t future_len,
              int64_t num_sensors);
  int64_t count() const { return num_offsets_ * num_sensors_; }
  SampleRef at(int64_t i) const;
  SplitRange range() const { return range_; }
  int64_t history_len() const { return history_len_; }
  int64_t future_len() const { return future_len_; }

 private:
  SplitRange range_;
  int64_t history_len_, future_len_, num_offsets_, num_sensors_;
};

SampleIndex iter_samples(const TrafficDataset& ds, SplitRange range, int64_t history_len,
                         int64_t future_len);

/// One (history window, future window, temporal indices, sensor id) instance.
/// History/future hold raw (unnormalized) values.
struct Sample {
  std::vector<double> history;  // [T][C]
  std::vector<double> future;   // [T_f][C]
  int64_t sensor_id = 0;
  std::vector<int64_t> tid_history, diw_history;  // per history step
  std::vector<int64_t> tid_future, diw_future;    // per future step
};

Sample materialize_sample(const TrafficDataset& ds, const SampleIndex& index,
                          SampleRef ref);

/// Synthetic multi-scale traffic: per sensor a daily sinusoid with a
/// sensor-specific phase, randomly placed congestion dips (sharp drop,
/// linear recovery), and Gaussian noise. Deterministic given the seed.
struct SyntheticSpec {
  std::string name = "synthetic";
  int64_t num_sensors = 8;
  int64_t num_days = 60;
  int64_t sample_interval_minutes = 5;
  int64_t start_slot_of_day = 0;
  int64_t start_day_of_week = 0;
  double base_level = 50.0;
  double daily_amplitude = 15.0;
  double noise_sigma = 1.0;
  double spike_rate_per_day = 2.0;  // expected dips per day per sensor
  double spike_depth = 20.0;
  int64_t spike_width = 6;          // steps from drop to full recovery
};

TrafficDataset generate_synthetic(const SyntheticSpec& spec, uint64_t seed);

// Dataset files: `<stem>.json` metadata + `<stem>.bin` payload
// (magic "HUTD", u32 LE version 1, f32 LE values in (time, sensor, channel)
// order).
void save_dataset(const TrafficDataset& ds, const std::string& stem);
TrafficDataset load_dataset(const std::string& path);

/// CSV import: header row, time rows x sensor columns. A leading
/// "time"/"timestamp" column is skipped.
TrafficDataset import_csv(const std::string& csv_path, const std::string& name,
                          int64_t sample_interval_minutes, int64_t start_slot_of_day,
                          int64_t start_day_of_week);

}  // namespace pyramidcast
