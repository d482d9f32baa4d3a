#include "pyramidcast/eval.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "pyramidcast/errors.hpp"
#include "pyramidcast/training.hpp"

using namespace pyramidcast;

namespace {

std::vector<double> ones(size_t n) { return std::vector<double>(n, 1.0); }

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

TrafficDataset ramp_dataset(int64_t steps, int64_t sensors) {
  TrafficDataset ds;
  ds.name = "ramp";
  ds.num_steps = steps;
  ds.num_sensors = sensors;
  ds.num_channels = 1;
  ds.sample_interval_minutes = 60;
  ds.values.resize(steps * sensors);
  for (int64_t t = 0; t < steps; ++t) {
    for (int64_t s = 0; s < sensors; ++s) {
      ds.values[t * sensors + s] = static_cast<double>(static_cast<float>(t + 10));
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("metric hand values") {
  std::vector<double> pred = {1.0, 5.0};
  std::vector<double> truth = {2.0, 2.0};
  auto mask = ones(2);
  CHECK(metric_mae(pred, pred, mask) == 0.0);
  CHECK(metric_mae(pred, truth, mask) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(metric_mse(pred, truth, mask) == doctest::Approx(5.0).epsilon(1e-15));

  std::vector<double> shifted = {4.0, 4.0};
  CHECK(metric_mae(shifted, truth, mask) == doctest::Approx(2.0));
  CHECK(metric_mse(shifted, truth, mask) == doctest::Approx(4.0));

  // symmetry
  CHECK(metric_mae(pred, truth, mask) == metric_mae(truth, pred, mask));
  CHECK(metric_mae(pred, truth, mask) >= 0.0);
  CHECK(metric_mse(pred, truth, mask) >= 0.0);
}

TEST_CASE("mape percent with zero guard") {
  CHECK(metric_mape({{110.0}}, {{100.0}}, ones(1)) ==
        doctest::Approx(10.0).epsilon(1e-12));
  std::vector<double> pred = {90.0, 120.0};
  std::vector<double> truth = {100.0, 100.0};
  CHECK(metric_mape(pred, truth, ones(2)) == doctest::Approx(15.0).epsilon(1e-12));

  // zero truth entries are excluded by the guard
  std::vector<double> pred2 = {90.0, 7.0};
  std::vector<double> truth2 = {100.0, 0.0};
  CHECK(metric_mape(pred2, truth2, ones(2)) == doctest::Approx(10.0).epsilon(1e-12));

  std::vector<double> zeros = {0.0, 0.0};
  CHECK_THROWS_AS(metric_mape(pred, zeros, ones(2)), NumericError);
  CHECK_THROWS_AS(metric_mae(pred, truth, std::vector<double>{0.0, 0.0}), NumericError);
}

TEST_CASE("hi baseline copies the most recent steps") {
  std::vector<double> history = {1, 2, 3, 4, 5, 6};
  auto full = hi_baseline(history, 6, 1, 6);
  CHECK(full == history);
  auto tail = hi_baseline(history, 6, 1, 2);
  CHECK(tail == std::vector<double>{5, 6});
  CHECK_THROWS_AS(hi_baseline(history, 6, 1, 7), ConfigError);
}

TEST_CASE("hi achieves zero error on noiseless periodic data") {
  SyntheticSpec spec;
  spec.num_sensors = 2;
  spec.num_days = 6;
  spec.sample_interval_minutes = 60;
  spec.noise_sigma = 0.0;
  spec.spike_rate_per_day = 0.0;
  auto ds = generate_synthetic(spec, 5);
  auto report = evaluate_hi(ds, {0, ds.num_steps}, 24, 24, {1, 12, 24}, false, false);
  CHECK(report.overall_mae == 0.0);
  for (const auto& h : report.horizons) {
    CHECK(h.mae == 0.0);
    CHECK(h.mse == 0.0);
  }
}

TEST_CASE("horizons are 1-indexed single steps") {
  // one offset: history = steps 0..3, future = steps 4..7; a single pulse at
  // step 5 (= horizon 2) separates the conventions
  TrafficDataset ds;
  ds.name = "pulse";
  ds.num_steps = 8;
  ds.num_sensors = 1;
  ds.num_channels = 1;
  ds.sample_interval_minutes = 60;
  ds.values = {10, 10, 10, 10, 10, 15, 10, 10};
  auto report = evaluate_hi(ds, {0, 8}, 4, 4, {1, 2, 3, 4}, false, false);
  CHECK(report.horizons[0].mae == 0.0);
  CHECK(report.horizons[1].mae == 5.0);
  CHECK(report.horizons[2].mae == 0.0);
  CHECK(report.horizons[3].mae == 0.0);

  // cumulative mode averages steps 1..h instead
  auto cum = evaluate_hi(ds, {0, 8}, 4, 4, {1, 2, 3, 4}, false, true);
  CHECK(cum.horizons[1].mae == doctest::Approx(2.5));
  CHECK(cum.horizons[3].mae == doctest::Approx(1.25));

  CHECK_THROWS_AS(evaluate_hi(ds, {0, 8}, 4, 4, {5}, false, false), ConfigError);
}

TEST_CASE("hi on a ramp gives constant per-horizon error") {
  auto ds = ramp_dataset(72, 2);
  auto report = evaluate_hi(ds, {0, 72}, 24, 24, {1, 24}, false, false);
  // x(t) - x(t - 24) == 24 everywhere on the ramp
  CHECK(report.overall_mae == doctest::Approx(24.0));
  CHECK(report.horizons[0].mae == doctest::Approx(24.0));
  CHECK(report.horizons[1].mae == doctest::Approx(24.0));
  CHECK(report.overall_mse == doctest::Approx(24.0 * 24.0));
}

TEST_CASE("masked evaluation skips zero truth entries") {
  TrafficDataset ds;
  ds.name = "masked";
  ds.num_steps = 8;
  ds.num_sensors = 2;
  ds.num_channels = 1;
  ds.sample_interval_minutes = 60;
  // history all 1s; sensor 0's first future step is 0 (missing)
  ds.values = {1, 1, 1, 1, 1, 1, 1, 1, 0, 3, 3, 3, 3, 3, 3, 3};
  auto report = evaluate_hi(ds, {0, 8}, 4, 4, {1, 2}, true, false);
  // entries with zero truth are excluded from the average
  CHECK(report.overall_mae == doctest::Approx(2.0));
  CHECK(report.horizons[0].masked_entries == 1);
  CHECK(report.horizons[1].masked_entries == 0);
}

namespace {

RunConfig model_config(const std::string& out_dir) {
  RunConfig cfg;
  cfg.split_train = 0.5;
  cfg.split_val = 0.25;
  cfg.split_test = 0.25;
  cfg.model.history_len = 24;
  cfg.model.future_len = 24;
  cfg.model.segment_len = 2;
  cfg.model.d = 4;
  cfg.model.d_spatial = 4;
  cfg.model.d_tid = 4;
  cfg.model.d_diw = 4;
  cfg.model.num_blocks = 2;
  cfg.model.window_size = 3;
  cfg.model.num_heads = 2;
  cfg.model.mlp_ratio = 2.0;
  cfg.model.d_dec = 4;
  cfg.model.dec_heads = 2;
  cfg.optim.batch_size = 32;
  cfg.optim.max_epochs = 1;
  cfg.horizons = {1, 12, 24};
  cfg.seed = 2;
  cfg.out_dir = out_dir;
  return cfg;
}

}  // namespace

TEST_CASE("model evaluation is pure and reports are byte-stable") {
  SyntheticSpec spec;
  spec.num_sensors = 3;
  spec.num_days = 10;
  spec.sample_interval_minutes = 60;
  auto ds = generate_synthetic(spec, 9);

  const std::string dir = "/tmp/pyramidcast_eval_pure";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto cfg = model_config(dir);
  train_stage1(ds, cfg);
  auto ckpt = load_checkpoint(dir + "/encoder_best");
  Model model = model_from_checkpoint(ckpt, 0);

  const auto splits = split_dataset(ds, 0.5, 0.25, 0.25);
  auto r1 = evaluate_model(model, ds, splits.test, cfg.horizons, 32, false, false, 1);
  auto r2 = evaluate_model(model, ds, splits.test, cfg.horizons, 32, false, false, 1);
  CHECK(r1.overall_mae == r2.overall_mae);
  CHECK(r1.overall_mape == r2.overall_mape);
  CHECK(r1.overall_mse == r2.overall_mse);
  for (size_t i = 0; i < r1.horizons.size(); ++i) {
    CHECK(r1.horizons[i].mae == r2.horizons[i].mae);
  }

  r1.split = r2.split = "test";
  write_report_json(r1, dir + "/r1.json");
  write_report_json(r2, dir + "/r2.json");
  CHECK(file_bytes(dir + "/r1.json") == file_bytes(dir + "/r2.json"));
  write_report_csv(r1, dir + "/r1.csv");
  const std::string csv = file_bytes(dir + "/r1.csv");
  CHECK(csv.find("horizon,mae,mape,mse,samples,masked_entries") == 0);
  const std::string text = format_report_text(r1);
  CHECK(text.find("overall") != std::string::npos);
}

TEST_CASE("export_predictions writes stable rows") {
  SyntheticSpec spec;
  spec.num_sensors = 2;
  spec.num_days = 8;
  spec.sample_interval_minutes = 60;
  auto ds = generate_synthetic(spec, 21);
  const std::string dir = "/tmp/pyramidcast_eval_export";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto cfg = model_config(dir);
  train_stage1(ds, cfg);
  Model model = model_from_checkpoint(load_checkpoint(dir + "/encoder_best"), 0);

  const auto splits = split_dataset(ds, 0.5, 0.25, 0.25);
  export_predictions(model, ds, splits.test, {0, 1}, dir + "/preds.csv", 1);
  std::ifstream in(dir + "/preds.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "sensor,step,truth,prediction");
  int64_t rows = 0;
  int64_t commas_ok = 0;
  while (std::getline(in, line)) {
    ++rows;
    commas_ok += std::count(line.begin(), line.end(), ',') == 3;
  }
  CHECK(rows == 2 * 24);  // two samples x T_f steps
  CHECK(commas_ok == rows);
}

TEST_CASE("run config round trips through the key=value format") {
  RunConfig cfg;
  cfg.dataset = "/data/foo";
  cfg.model.variant_name = "no_stpe";
  cfg.optim.milestones = {2, 7, 9};
  cfg.horizons = {3, 6};
  cfg.mask_zeros = true;
  cfg.seed = 42;

  const std::string path = "/tmp/pyramidcast_cfg.txt";
  save_run_config(cfg, path);
  auto loaded = load_run_config(path);
  CHECK(run_config_to_map(loaded) == run_config_to_map(cfg));

  // comments and blank lines are tolerated; unknown keys are not
  {
    std::ofstream out(path, std::ios::trunc);
    out << "# comment line\n\n  lr = 0.001  # trailing comment\nvariant=concat\n";
  }
  auto partial = load_run_config(path);
  CHECK(partial.optim.lr == doctest::Approx(0.001));
  CHECK(partial.model.variant_name == "concat");

  {
    std::ofstream out(path, std::ios::trunc);
    out << "nonsense=1\n";
  }
  CHECK_THROWS_AS(load_run_config(path), ConfigError);
  {
    std::ofstream out(path, std::ios::trunc);
    out << "lr 0.001\n";
  }
  CHECK_THROWS_AS(load_run_config(path), ConfigError);
}

TEST_CASE("benchmark reports a positive median epoch time") {
  SyntheticSpec spec;
  spec.num_sensors = 2;
  spec.num_days = 6;
  spec.sample_interval_minutes = 60;
  auto ds = generate_synthetic(spec, 3);
  auto cfg = model_config("/tmp");
  auto report = benchmark_training(ds, cfg, 3);
  CHECK(report.epoch_seconds.size() == 3);
  CHECK(report.median_seconds_per_epoch > 0.0);
  CHECK(report.steps_per_epoch > 0);
  CHECK(report.peak_rss_kb > 0);
}
