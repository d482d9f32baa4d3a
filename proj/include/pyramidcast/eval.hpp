#pragma once

#include <span>
#include <string>
#include <vector>

#include "pyramidcast/config.hpp"
#include "pyramidcast/dataset.hpp"
#include "pyramidcast/model.hpp"

namespace pyramidcast {

// Plain metric helpers over flat arrays; mask entries are 0/1.
double metric_mae(std::span<const double> pred, std::span<const double> truth,
                  std::span<const double> mask);
double metric_mse(std::span<const double> pred, std::span<const double> truth,
                  std::span<const double> mask);
/// Percent; entries with |truth| < 1e-3 are force-masked.
double metric_mape(std::span<const double> pred, std::span<const double> truth,
                   std::span<const double> mask);

/// Historical inertia: output = history[T - T_f : T].
std::vector<double> hi_baseline(const std::vector<double>& history, int64_t history_len,
                                int64_t channels, int64_t future_len);

struct HorizonMetrics {
  int64_t horizon = 0;  // 1-indexed future step
  double mae = 0.0;
  double mape = 0.0;
  double mse = 0.0;
  int64_t samples = 0;
  int64_t masked_entries = 0;  // entries excluded by the data mask
};

struct EvalReport {
  std::string dataset;
  std::string model;  // checkpoint stem or "hi"
  std::string split;
  std::vector<HorizonMetrics> horizons;
  double overall_mae = 0.0;
  double overall_mape = 0.0;
  double overall_mse = 0.0;
  int64_t samples = 0;
};

/// Deterministic iteration over the range's samples; metrics on
/// de-normalized values at each listed horizon (exactly step h, or steps
/// 1..h in cumulative mode).
EvalReport evaluate_model(Model& model, const TrafficDataset& ds, SplitRange range,
                          const std::vector<int64_t>& horizons, int64_t batch_size,
                          bool mask_zeros, bool cumulative, int stage);

EvalReport evaluate_hi(const TrafficDataset& ds, SplitRange range, int64_t history_len,
                       int64_t future_len, const std::vector<int64_t>& horizons,
                       bool mask_zeros, bool cumulative);

void write_report_json(const EvalReport& report, const std::string& path);
void write_report_csv(const EvalReport& report, const std::string& path);
std::string format_report_text(const EvalReport& report);

/// CSV rows of (sensor, step, truth, prediction), de-normalized, grouped by
/// sample in the given id order.
void export_predictions(Model& model, const TrafficDataset& ds, SplitRange range,
                        const std::vector<int64_t>& sample_ids,
                        const std::string& path, int stage);

struct BenchmarkReport {
  double median_seconds_per_epoch = 0.0;
  std::vector<double> epoch_seconds;  // measured epochs, warm-up excluded
  int64_t steps_per_epoch = 0;
  int64_t peak_rss_kb = 0;
};

/// Times stage-1 training epochs: one warm-up epoch then at least three
/// measured ones.
BenchmarkReport benchmark_training(const TrafficDataset& ds, const RunConfig& cfg,
                                   int64_t measured_epochs);

}  // namespace pyramidcast
