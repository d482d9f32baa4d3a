#include "pyramidcast/eval.hpp"

#include <sys/resource.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pyramidcast/errors.hpp"
#include "pyramidcast/training.hpp"

namespace pyramidcast {

namespace {

constexpr double kMapeGuard = 1e-3;

void check_metric_shapes(std::span<const double> pred, std::span<const double> truth,
                         std::span<const double> mask) {
  if (pred.size() != truth.size() || pred.size() != mask.size()) {
    throw ConfigError("metric inputs must have equal lengths");
  }
}

}  // namespace

double metric_mae(std::span<const double> pred, std::span<const double> truth,
                  std::span<const double> mask) {
  check_metric_shapes(pred, truth, mask);
  double acc = 0.0, count = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == 0.0) continue;
    acc += std::fabs(pred[i] - truth[i]);
    count += 1.0;
  }
  if (count == 0.0) throw NumericError("degenerate metric: empty mask for MAE");
  return acc / count;
}

double metric_mse(std::span<const double> pred, std::span<const double> truth,
                  std::span<const double> mask) {
  check_metric_shapes(pred, truth, mask);
  double acc = 0.0, count = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == 0.0) continue;
    const double d = pred[i] - truth[i];
    acc += d * d;
    count += 1.0;
  }
  if (count == 0.0) throw NumericError("degenerate metric: empty mask for MSE");
  return acc / count;
}

double metric_mape(std::span<const double> pred, std::span<const double> truth,
                   std::span<const double> mask) {
  check_metric_shapes(pred, truth, mask);
  double acc = 0.0, count = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == 0.0 || std::fabs(truth[i]) < kMapeGuard) continue;
    acc += std::fabs(pred[i] - truth[i]) / std::fabs(truth[i]);
    count += 1.0;
  }
  if (count == 0.0) {
    throw NumericError("degenerate metric: every entry masked for MAPE");
  }
  return acc / count * 100.0;
}

std::vector<double> hi_baseline(const std::vector<double>& history, int64_t history_len,
                                int64_t channels, int64_t future_len) {
  if (static_cast<int64_t>(history.size()) != history_len * channels) {
    throw ConfigError("hi_baseline: history length mismatch");
  }
  if (future_len > history_len) {
    throw ConfigError("hi_baseline: future length " + std::to_string(future_len) +
                      " exceeds history length " + std::to_string(history_len));
  }
  const int64_t start = (history_len - future_len) * channels;
  return std::vector<double>(history.begin() + start, history.end());
}

namespace {

struct MetricAccumulator {
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  double pct_sum = 0.0;
  double count = 0.0;
  double pct_count = 0.0;
  int64_t masked_out = 0;

  void add(double pred, double truth, bool keep) {
    if (!keep) {
      ++masked_out;
      return;
    }
    const double d = pred - truth;
    abs_sum += std::fabs(d);
    sq_sum += d * d;
    count += 1.0;
    if (std::fabs(truth) >= kMapeGuard) {
      pct_sum += std::fabs(d) / std::fabs(truth);
      pct_count += 1.0;
    }
  }
  double mae() const {
    if (count == 0.0) throw NumericError("degenerate metric: empty mask for MAE");
    return abs_sum / count;
  }
  double mse() const { return sq_sum / count; }
  double mape() const {
    if (pct_count == 0.0) {
      throw NumericError("degenerate metric: every entry masked for MAPE");
    }
    return pct_sum / pct_count * 100.0;
  }
};

/// Shared accumulation for model predictions and the HI baseline.
EvalReport accumulate_report(
    const TrafficDataset& ds, SplitRange range, int64_t history_len,
    int64_t future_len, const std::vector<int64_t>& horizons, bool mask_zeros,
    bool cumulative,
    const std::function<std::vector<double>(const std::vector<int64_t>&)>& predict,
    int64_t batch_size, const std::string& model_name) {
  for (int64_t h : horizons) {
    if (h < 1 || h > future_len) {
      throw ConfigError("horizon " + std::to_string(h) + " outside [1, " +
                        std::to_string(future_len) + "]");
    }
  }
  const auto index = iter_samples(ds, range, history_len, future_len);
  const int64_t channels = ds.num_channels;

  std::vector<MetricAccumulator> per_horizon(horizons.size());
  MetricAccumulator overall;

  for (int64_t start = 0; start < index.count(); start += batch_size) {
    const int64_t stop = std::min<int64_t>(start + batch_size, index.count());
    std::vector<int64_t> ids(stop - start);
    for (int64_t i = start; i < stop; ++i) ids[i - start] = i;
    const std::vector<double> preds = predict(ids);  // [B, T_f, C] de-normalized
    for (int64_t b = 0; b < stop - start; ++b) {
      const Sample s = materialize_sample(ds, index, index.at(ids[b]));
      const double* pred = preds.data() + b * future_len * channels;
      for (int64_t k = 0; k < future_len; ++k) {
        for (int64_t ch = 0; ch < channels; ++ch) {
          const double truth = s.future[k * channels + ch];
          const bool keep = !mask_zeros || truth != 0.0;
          const double p = pred[k * channels + ch];
          overall.add(p, truth, keep);
          for (size_t hi = 0; hi < horizons.size(); ++hi) {
            const int64_t h = horizons[hi];
            const bool in_scope = cumulative ? (k + 1 <= h) : (k + 1 == h);
            if (in_scope) per_horizon[hi].add(p, truth, keep);
          }
        }
      }
    }
  }

  EvalReport report;
  report.dataset = ds.name;
  report.model = model_name;
  report.samples = index.count();
  for (size_t hi = 0; hi < horizons.size(); ++hi) {
    HorizonMetrics m;
    m.horizon = horizons[hi];
    m.mae = per_horizon[hi].mae();
    m.mape = per_horizon[hi].mape();
    m.mse = per_horizon[hi].mse();
    m.samples = index.count();
    m.masked_entries = per_horizon[hi].masked_out;
    report.horizons.push_back(m);
  }
  report.overall_mae = overall.mae();
  report.overall_mape = overall.mape();
  report.overall_mse = overall.mse();
  return report;
}

}  // namespace

EvalReport evaluate_model(Model& model, const TrafficDataset& ds, SplitRange range,
                          const std::vector<int64_t>& horizons, int64_t batch_size,
                          bool mask_zeros, bool cumulative, int stage) {
  const ModelConfig& cfg = model.config();
  const auto index = iter_samples(ds, range, cfg.history_len, cfg.future_len);
  auto predict = [&](const std::vector<int64_t>& ids) {
    Batch batch = make_batch(ds, index, ids, model.norm_stats(), cfg, mask_zeros);
    Tensor pred = model.denormalize(model.forward_norm(batch, stage));
    return std::vector<double>(pred.data().begin(), pred.data().end());
  };
  return accumulate_report(ds, range, cfg.history_len, cfg.future_len, horizons,
                           mask_zeros, cumulative, predict, batch_size, "model");
}

EvalReport evaluate_hi(const TrafficDataset& ds, SplitRange range, int64_t history_len,
                       int64_t future_len, const std::vector<int64_t>& horizons,
                       bool mask_zeros, bool cumulative) {
  const auto index = iter_samples(ds, range, history_len, future_len);
  const int64_t channels = ds.num_channels;
  auto predict = [&](const std::vector<int64_t>& ids) {
    std::vector<double> out(ids.size() * future_len * channels);
    for (size_t b = 0; b < ids.size(); ++b) {
      const Sample s = materialize_sample(ds, index, index.at(ids[b]));
      const auto pred = hi_baseline(s.history, history_len, channels, future_len);
      std::copy(pred.begin(), pred.end(), out.begin() + b * future_len * channels);
    }
    return out;
  };
  return accumulate_report(ds, range, history_len, future_len, horizons, mask_zeros,
                           cumulative, predict, 256, "hi");
}

void write_report_json(const EvalReport& report, const std::string& path) {
  nlohmann::json j = {
      {"dataset", report.dataset}, {"model", report.model},   {"split", report.split},
      {"samples", report.samples}, {"overall_mae", report.overall_mae},
      {"overall_mape", report.overall_mape},                  {"overall_mse", report.overall_mse},
  };
  j["horizons"] = nlohmann::json::array();
  for (const auto& h : report.horizons) {
    j["horizons"].push_back({{"horizon", h.horizon},
                             {"mae", h.mae},
                             {"mape", h.mape},
                             {"mse", h.mse},
                             {"samples", h.samples},
                             {"masked_entries", h.masked_entries}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "horizon,mae,mape,mse,samples,masked_entries\n";
  char buf[160];
  for (const auto& h : report.horizons) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9f,%.9f,%.9f,%lld,%lld\n",
                  static_cast<long long>(h.horizon), h.mae, h.mape, h.mse,
                  static_cast<long long>(h.samples),
                  static_cast<long long>(h.masked_entries));
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "overall,%.9f,%.9f,%.9f,%lld,\n", report.overall_mae,
                report.overall_mape, report.overall_mse,
                static_cast<long long>(report.samples));
  out << buf;
}

std::string format_report_text(const EvalReport& report) {
  std::ostringstream os;
  os << "dataset: " << report.dataset << "  model: " << report.model
     << "  split: " << report.split << "  samples: " << report.samples << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-10s %12s %12s %12s\n", "horizon", "MAE", "MAPE(%)",
                "MSE");
  os << buf;
  for (const auto& h : report.horizons) {
    std::snprintf(buf, sizeof(buf), "%-10lld %12.4f %12.4f %12.4f\n",
                  static_cast<long long>(h.horizon), h.mae, h.mape, h.mse);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-10s %12.4f %12.4f %12.4f\n", "overall",
                report.overall_mae, report.overall_mape, report.overall_mse);
  os << buf;
  return os.str();
}

void export_predictions(Model& model, const TrafficDataset& ds, SplitRange range,
                        const std::vector<int64_t>& sample_ids, const std::string& path,
                        int stage) {
  const ModelConfig& cfg = model.config();
  const auto index = iter_samples(ds, range, cfg.history_len, cfg.future_len);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "sensor,step,truth,prediction\n";
  char buf[128];
  for (int64_t id : sample_ids) {
    const SampleRef ref = index.at(id);
    Batch batch = make_batch(ds, index, {id}, model.norm_stats(), cfg, false);
    Tensor pred = model.denormalize(model.forward_norm(batch, stage));
    const Sample s = materialize_sample(ds, index, ref);
    for (int64_t k = 0; k < cfg.future_len; ++k) {
      for (int64_t ch = 0; ch < cfg.channels; ++ch) {
        std::snprintf(buf, sizeof(buf), "%lld,%lld,%.9f,%.9f\n",
                      static_cast<long long>(ref.sensor), static_cast<long long>(k + 1),
                      s.future[k * cfg.channels + ch],
                      pred.data()[(k * cfg.channels) + ch]);
        out << buf;
      }
    }
  }
}

BenchmarkReport benchmark_training(const TrafficDataset& ds, const RunConfig& cfg,
                                   int64_t measured_epochs) {
  if (measured_epochs < 3) measured_epochs = 3;
  const auto splits = split_dataset(ds, cfg.split_train, cfg.split_val, cfg.split_test);
  const NormStats stats = fit_norm(ds, splits.train);
  Model model(cfg.model, ds.num_sensors, ds.slots_per_day(), stats, cfg.seed);
  model.set_stage(1);
  auto trainables = model.trainable_params();
  const auto index =
      iter_samples(ds, splits.train, cfg.model.history_len, cfg.model.future_len);

  AdamState adam;
  BenchmarkReport report;
  report.steps_per_epoch =
      (index.count() + cfg.optim.batch_size - 1) / cfg.optim.batch_size;
  for (int64_t epoch = 0; epoch < measured_epochs + 1; ++epoch) {
    const auto start_time = std::chrono::steady_clock::now();
    const auto order = shuffled_ids(index.count(), cfg.seed, 1, epoch);
    const double lr = lr_at(epoch, cfg.optim);
    for (int64_t start = 0; start < static_cast<int64_t>(order.size());
         start += cfg.optim.batch_size) {
      const int64_t stop = std::min<int64_t>(start + cfg.optim.batch_size,
                                             order.size());
      std::vector<int64_t> ids(order.begin() + start, order.begin() + stop);
      Batch batch = make_batch(ds, index, ids, stats, cfg.model, cfg.mask_zeros);
      Tensor loss = model.stage1_loss(batch);
      backward(loss);
      clip_gradients(trainables, cfg.optim.grad_clip_norm);
      adam_step(trainables, adam, cfg.optim, lr);
      for (Parameter* p : trainables) p->value.clear_grad();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time)
            .count();
    if (epoch > 0) report.epoch_seconds.push_back(seconds);  // first epoch warms up
  }
  std::vector<double> sorted = report.epoch_seconds;
  std::sort(sorted.begin(), sorted.end());
  report.median_seconds_per_epoch = sorted[sorted.size() / 2];

  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  report.peak_rss_kb = usage.ru_maxrss;
  return report;
}

}  // namespace pyramidcast
