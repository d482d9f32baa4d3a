#include "pyramidcast/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "pyramidcast/errors.hpp"
#include "pyramidcast/eval.hpp"
#include "pyramidcast/training.hpp"

namespace pyramidcast {

namespace {

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), pattern, a, b, c);
  return std::string(buf);
}

Tensor randn(Shape shape, std::mt19937_64& rng, bool rg = true) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), rg);
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::string fresh_dir(const std::string& base, const std::string& tag) {
  const std::string dir = base + "/" + tag;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Tiny graph-check configuration: P=4, d=4, S=2, window=2, L=2, T_f=8.
ModelConfig tiny_model_config(const std::string& variant = "full") {
  ModelConfig m;
  m.history_len = 8;
  m.future_len = 8;
  m.segment_len = 2;
  m.d = 4;
  m.d_spatial = 4;
  m.d_tid = 4;
  m.d_diw = 4;
  m.num_blocks = 2;
  m.window_size = 2;
  m.num_heads = 2;
  m.mlp_ratio = 2.0;
  m.d_dec = 4;
  m.dec_heads = 2;
  m.variant_name = variant;
  return m;
}

TrafficDataset tiny_dataset(uint64_t seed) {
  SyntheticSpec spec;
  spec.name = "tinycheck";
  spec.num_sensors = 3;
  spec.num_days = 4;
  spec.sample_interval_minutes = 180;  // 8 slots per day
  spec.noise_sigma = 1.0;
  spec.spike_rate_per_day = 1.0;
  spec.spike_depth = 8.0;
  spec.spike_width = 2;
  return generate_synthetic(spec, seed);
}

// Small but non-trivial training configuration used by the freeze,
// determinism and scheduler checks.
RunConfig small_run_config(const std::string& out_dir, const std::string& variant) {
  RunConfig cfg;
  cfg.split_train = 0.5;
  cfg.split_val = 0.25;
  cfg.split_test = 0.25;
  cfg.model = tiny_model_config(variant);
  cfg.model.history_len = 16;
  cfg.model.future_len = 16;
  cfg.model.num_blocks = 3;
  cfg.model.window_size = 2;
  cfg.optim.batch_size = 32;
  cfg.optim.max_epochs = 2;
  cfg.optim.lr = 0.002;
  cfg.horizons = {1, 8, 16};
  cfg.seed = 17;
  cfg.out_dir = out_dir;
  return cfg;
}

TrafficDataset small_dataset(uint64_t seed) {
  SyntheticSpec spec;
  spec.name = "smallcheck";
  spec.num_sensors = 4;
  spec.num_days = 16;
  spec.sample_interval_minutes = 90;  // 16 slots per day
  spec.noise_sigma = 1.0;
  spec.spike_rate_per_day = 1.0;
  spec.spike_depth = 10.0;
  spec.spike_width = 3;
  return generate_synthetic(spec, seed);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

CheckResult check_gradient_correctness() {
  Timer timer;
  CheckResult result;
  result.name = "gradient correctness";

  std::mt19937_64 rng(101);
  double ops_tight = 0.0;   // linear / matmul / softmax in isolation, 1e-6
  double ops_loose = 0.0;   // every other primitive, 1e-4

  {
    auto x = randn({4, 8}, rng);
    auto w = randn({5, 8}, rng);
    auto b = randn({5}, rng);
    auto probe = randn({4, 5}, rng, false);
    auto fn = [&]() { return sum(mul(linear(x, w, b), probe)); };
    ops_tight = std::max(
        ops_tight, grad_check(fn, {{"x", x}, {"w", w}, {"b", b}}, 1e-5).max_rel_err);
  }
  {
    auto a = randn({2, 3, 4}, rng);
    auto b = randn({2, 4, 5}, rng);
    auto shared = randn({4, 5}, rng);
    auto probe = randn({2, 3, 5}, rng, false);
    auto fn = [&]() {
      return add(sum(mul(matmul(a, b), probe)), sum(mul(matmul(a, shared), probe)));
    };
    ops_tight = std::max(
        ops_tight,
        grad_check(fn, {{"a", a}, {"b", b}, {"s", shared}}, 1e-5).max_rel_err);
  }
  {
    auto x = randn({3, 6}, rng);
    auto probe = randn({3, 6}, rng, false);
    auto fn = [&]() { return sum(mul(softmax_last(x), probe)); };
    ops_tight = std::max(ops_tight, grad_check(fn, {{"x", x}}, 1e-5).max_rel_err);
  }
  {
    auto a = randn({2, 6}, rng);
    auto b = randn({2, 6}, rng);
    auto gain = randn({6}, rng);
    auto bias = randn({6}, rng);
    auto table = randn({5, 3}, rng);
    auto probe = randn({2, 6}, rng, false);
    auto fn = [&]() {
      auto ln = layer_norm(a, gain, bias, 1e-5);
      auto parts = split(ln, 1, {2, 4});
      auto rejoined = concat({parts[0], parts[1]}, 1);
      auto moved = swap_axes(reshape(rejoined, {2, 2, 3}), 0, 1);
      auto looked = embedding_lookup(table, {0, 4, 2, 1}, {2, 2});
      auto picked = index_select(add(moved, looked), 1, {1, 0});
      auto affine = channel_affine(picked, {2.0, -1.0, 0.5}, {0.1, 0.2, 0.3});
      auto g = gelu(transpose_last2(affine));
      auto scaled = mul_scalar(add_scalar(abs(g), 0.25), 1.75);
      return add(mean(scaled), add(sum(mul(sub(a, b), probe)), mean(mul(a, b))));
    };
    ops_loose = std::max(
        ops_loose, grad_check(fn,
                              {{"a", a}, {"b", b}, {"gain", gain}, {"bias", bias},
                               {"table", table}},
                              1e-5)
                       .max_rel_err);
  }

  // full one-sample encoder-loss and decoder-loss graphs, tiny config
  auto ds = tiny_dataset(23);
  const auto splits = split_dataset(ds, 0.5, 0.25, 0.25);
  const auto stats = fit_norm(ds, splits.train);
  Model model(tiny_model_config(), ds.num_sensors, ds.slots_per_day(), stats, 31);
  const auto index = iter_samples(ds, splits.train, 8, 8);
  Batch batch = make_batch(ds, index, {2}, stats, model.config(), false);

  model.set_stage(1);
  std::vector<std::pair<std::string, Tensor>> stage1;
  for (Parameter* p : model.trainable_params()) stage1.emplace_back(p->name, p->value);
  auto enc_fn = [&]() { return model.stage1_loss(batch); };
  const double enc_err = grad_check(enc_fn, stage1, 1e-5).max_rel_err;

  model.set_stage(2);
  std::vector<std::pair<std::string, Tensor>> stage2;
  for (Parameter* p : model.trainable_params()) stage2.emplace_back(p->name, p->value);
  auto dec_fn = [&]() { return model.stage2_loss(batch); };
  const double dec_err = grad_check(dec_fn, stage2, 1e-5).max_rel_err;

  result.pass = ops_tight < 1e-6 && ops_loose < 1e-4 && enc_err < 1e-4 &&
                dec_err < 1e-4;
  result.detail = fmt("ops %.2e (tight) / %.2e; graphs ", ops_tight, ops_loose) +
                  fmt("enc %.2e / dec %.2e", enc_err, dec_err);
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_shape_chain() {
  Timer timer;
  CheckResult result;
  result.name = "shape chain";

  ModelConfig cfg;  // defaults: T=288, L=12, d=32, S=4, window=3
  const auto chain = cfg.scale_chain();
  const std::vector<std::pair<int64_t, int64_t>> expected = {
      {24, 32}, {12, 64}, {6, 128}, {3, 256}};
  bool ok = chain == expected && cfg.num_segments() == 24 && cfg.dec_segments() == 24;

  NormStats stats{{0.0}, {1.0}};
  Model model(cfg, 2, 288, stats, 7);
  ok = ok && model.params().at("enc.head.weight").value.shape() == Shape{288, 768};

  std::mt19937_64 rng(3);
  Batch batch;
  batch.size = 1;
  batch.history_norm = randn({1, 288, 1}, rng, false);
  batch.future_raw = Tensor::zeros({1, 288, 1});
  batch.mask = Tensor::full({1, 288, 1}, 1.0);
  batch.mask_count = 288;
  batch.seg_sensor.assign(24, 0);
  batch.seg_tid.resize(24);
  batch.seg_diw.assign(24, 0);
  for (int64_t j = 0; j < 24; ++j) batch.seg_tid[j] = j * 12;
  batch.fut_seg_sensor.assign(24, 0);
  batch.fut_seg_tid = batch.seg_tid;
  batch.fut_seg_diw.assign(24, 1);

  auto pyr = model.run_encoder(model.encode_tokens(batch));
  ok = ok && pyr.scales.size() == 4;
  const std::vector<Shape> shapes = {
      {1, 24, 32}, {1, 12, 64}, {1, 6, 128}, {1, 3, 256}};
  for (size_t l = 0; l < pyr.scales.size() && ok; ++l) {
    ok = pyr.scales[l].shape() == shapes[l];
  }
  ok = ok && pyr.intermediate.shape() == Shape{1, 288, 1};
  auto refined = model.run_decoder(pyr, batch);
  ok = ok && refined.shape() == Shape{1, 288, 1};

  result.pass = ok;
  result.detail = "pyramid (24,32),(12,64),(6,128),(3,256); head width 768; P_dec 24";
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_window_locality() {
  Timer timer;
  CheckResult result;
  result.name = "window locality";

  ModelConfig cfg;  // defaults
  NormStats stats{{0.0}, {1.0}};
  Model model(cfg, 2, 288, stats, 29);

  std::mt19937_64 rng(11);
  auto make_batch_from = [&](const std::vector<double>& hist) {
    Batch b;
    b.size = 1;
    b.history_norm = Tensor::from_data({1, 288, 1}, hist);
    b.future_raw = Tensor::zeros({1, 288, 1});
    b.mask = Tensor::full({1, 288, 1}, 1.0);
    b.mask_count = 288;
    b.seg_sensor.assign(24, 0);
    b.seg_tid.resize(24);
    b.seg_diw.assign(24, 0);
    for (int64_t j = 0; j < 24; ++j) b.seg_tid[j] = j * 12;
    b.fut_seg_sensor.assign(24, 0);
    b.fut_seg_tid = b.seg_tid;
    b.fut_seg_diw.assign(24, 1);
    return b;
  };
  std::vector<double> base_hist(288);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : base_hist) v = dist(rng);
  auto base = model.run_encoder(model.encode_tokens(make_batch_from(base_hist)));

  // combinatorial merge/window dependency oracle
  const auto chain = cfg.scale_chain();
  const int64_t window = cfg.window_size;
  std::vector<std::vector<std::set<int64_t>>> deps(chain.size());
  deps[0].resize(chain[0].first);
  for (int64_t t = 0; t < chain[0].first; ++t) {
    const int64_t w0 = (t / window) * window;
    for (int64_t j = w0; j < w0 + window; ++j) deps[0][t].insert(j);
  }
  for (size_t l = 1; l < chain.size(); ++l) {
    const int64_t p = chain[l].first;
    std::vector<std::set<int64_t>> merged(p);
    for (int64_t k = 0; k < p; ++k) {
      merged[k].insert(deps[l - 1][2 * k].begin(), deps[l - 1][2 * k].end());
      merged[k].insert(deps[l - 1][2 * k + 1].begin(), deps[l - 1][2 * k + 1].end());
    }
    deps[l].resize(p);
    for (int64_t t = 0; t < p; ++t) {
      const int64_t w0 = (t / window) * window;
      for (int64_t j = w0; j < w0 + window && j < p; ++j) {
        deps[l][t].insert(merged[j].begin(), merged[j].end());
      }
    }
  }

  bool ok = true;
  std::string failure;
  for (int64_t q = 0; q < 24 && ok; ++q) {
    auto hist = base_hist;
    for (int64_t k = q * 12; k < (q + 1) * 12; ++k) hist[k] += 1.0;
    auto moved = model.run_encoder(model.encode_tokens(make_batch_from(hist)));
    for (size_t l = 0; l < chain.size() && ok; ++l) {
      const Tensor& a = base.scales[l];
      const Tensor& b = moved.scales[l];
      for (int64_t t = 0; t < chain[l].first && ok; ++t) {
        bool changed = false;
        for (int64_t c = 0; c < chain[l].second; ++c) {
          changed |= (a.at({0, t, c}) != b.at({0, t, c}));
        }
        const bool in_deps = deps[l][t].count(q) > 0;
        if (changed != in_deps) {
          ok = false;
          failure = "scale " + std::to_string(l + 1) + " token " + std::to_string(t) +
                    " perturbation " + std::to_string(q) +
                    (changed ? " leaked" : " failed to propagate");
        }
      }
    }
  }

  result.pass = ok;
  result.detail = ok ? "24 segment perturbations match the merge/window oracle at "
                       "every scale"
                     : failure;
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_attention_normalization(int64_t trials) {
  Timer timer;
  CheckResult result;
  result.name = "attention normalization";

  std::mt19937_64 rng(13);
  double worst = 0.0;
  int64_t rows_checked = 0;
  for (int64_t trial = 0; trial < trials; ++trial) {
    std::vector<Tensor> capture;
    if (trial % 2 == 0) {
      const int64_t heads_options[] = {1, 2, 4};
      const int64_t window_options[] = {2, 3, 4};
      const int64_t h = heads_options[trial / 2 % 3];
      const int64_t w = window_options[trial / 6 % 3];
      const int64_t width = 4 * h;
      const int64_t seq = w * (1 + trial % 3);
      AttentionParams attn;
      attn.q = {randn({width, width}, rng, false), randn({width}, rng, false)};
      attn.k_weight = randn({width, width}, rng, false);
      attn.v = {randn({width, width}, rng, false), randn({width}, rng, false)};
      attn.out = {randn({width, width}, rng, false), randn({width}, rng, false)};
      window_attention(randn({1, seq, width}, rng, false), w, h, attn, &capture);
    } else {
      const int64_t h = 1 + trial % 4;
      const int64_t d_dec = 4 * h;
      const int64_t p_enc = 1 + trial % 7;
      auto kv = randn({1, p_enc, d_dec}, rng, false);
      auto queries = randn({1, 3 + trial % 5, d_dec}, rng, false);
      cross_scale_attention(kv, queries, h, &capture);
    }
    for (const Tensor& probs : capture) {
      const int64_t width = probs.extent(-1);
      const int64_t rows = probs.numel() / width;
      for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int64_t i = 0; i < width; ++i) s += probs.data()[r * width + i];
        worst = std::max(worst, std::fabs(s - 1.0));
        ++rows_checked;
      }
    }
  }
  result.pass = worst <= 1e-12;
  result.detail = fmt("worst |row sum - 1| = %.2e over %g rows", worst,
                      static_cast<double>(rows_checked));
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_two_stage_freeze(const std::string& work_dir, int64_t stage2_epochs) {
  Timer timer;
  CheckResult result;
  result.name = "two-stage freeze";

  auto ds = small_dataset(41);
  const std::string dir = fresh_dir(work_dir, "freeze");
  auto cfg = small_run_config(dir, "full");
  train_stage1(ds, cfg);
  RunConfig stage2_cfg = cfg;
  stage2_cfg.optim.max_epochs = stage2_epochs;
  train_stage2(ds, dir + "/encoder_best", stage2_cfg);

  auto enc = load_checkpoint(dir + "/encoder_best");
  auto dec = load_checkpoint(dir + "/decoder_best");
  bool ok = dec.encoder_payload_sha256 == enc.payload_sha256;
  int64_t compared = 0;
  for (const auto& name : enc.param_order) {
    const auto& a = enc.params.at(name).second;
    const auto& b = dec.params.at(name).second;
    if (a.size() != b.size()) {
      ok = false;
      break;
    }
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) ok = false;
    compared += static_cast<int64_t>(a.size());
  }
  result.pass = ok;
  result.detail = fmt("%g stage-1 parameter values byte-identical after %g stage-2 "
                      "epochs",
                      static_cast<double>(compared),
                      static_cast<double>(stage2_epochs));
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_determinism(const std::string& work_dir) {
  Timer timer;
  CheckResult result;
  result.name = "determinism";

  auto ds = small_dataset(43);
  auto run_once = [&](const std::string& tag) {
    const std::string dir = fresh_dir(work_dir, tag);
    auto cfg = small_run_config(dir, "full");
    train_stage1(ds, cfg);
    train_stage2(ds, dir + "/encoder_best", cfg);
    auto ckpt = load_checkpoint(dir + "/decoder_best");
    Model model = model_from_checkpoint(ckpt, 0);
    const auto splits = split_dataset(ds, cfg.split_train, cfg.split_val, cfg.split_test);
    auto report = evaluate_model(model, ds, splits.test, cfg.horizons,
                                 cfg.optim.batch_size, cfg.mask_zeros, false, 2);
    report.split = "test";
    write_report_json(report, dir + "/report.json");
    write_report_csv(report, dir + "/report.csv");
    return dir;
  };
  const std::string a = run_once("det_a");
  const std::string b = run_once("det_b");

  bool ok = true;
  for (const char* f :
       {"/encoder_best.bin", "/encoder_best.json", "/decoder_best.bin",
        "/decoder_best.json", "/report.json", "/report.csv"}) {
    ok = ok && read_bytes(a + f) == read_bytes(b + f);
  }
  result.pass = ok;
  result.detail = "checkpoints and reports byte-identical across two runs";
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_hi_sanity(int64_t min_points) {
  Timer timer;
  CheckResult result;
  result.name = "HI sanity";

  // exact zero on noiseless period-288 data
  SyntheticSpec clean;
  clean.num_sensors = 4;
  clean.num_days = 5;
  clean.noise_sigma = 0.0;
  clean.spike_rate_per_day = 0.0;
  auto ds0 = generate_synthetic(clean, 51);
  auto clean_report =
      evaluate_hi(ds0, {0, ds0.num_steps}, 288, 288, {288}, false, false);
  const bool exact_zero = clean_report.overall_mae == 0.0;

  // noisy convergence to 2*sigma/sqrt(pi)
  const double sigma = 2.0;
  SyntheticSpec noisy = clean;
  noisy.num_sensors = 8;
  noisy.num_days = 120;
  noisy.noise_sigma = sigma;
  auto ds1 = generate_synthetic(noisy, 53);
  auto noisy_report =
      evaluate_hi(ds1, {0, ds1.num_steps}, 288, 288, {288}, false, false);
  const double expected = 2.0 * sigma / std::sqrt(M_PI);
  const double rel = std::fabs(noisy_report.overall_mae - expected) / expected;
  const int64_t points =
      (ds1.num_steps - 576 + 1) * ds1.num_sensors * 288;  // samples x steps

  result.pass = exact_zero && rel < 0.02 && points >= min_points;
  result.detail = fmt("clean MAE %.1e; noisy MAE vs 2s/sqrt(pi): rel err %.4f",
                      clean_report.overall_mae, rel) +
                  " over " + std::to_string(points) + " points";
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_single_batch_overfit(int64_t max_steps, double target) {
  Timer timer;
  CheckResult result;
  result.name = "single-batch overfit";

  auto ds = small_dataset(57);
  const auto splits = split_dataset(ds, 0.5, 0.25, 0.25);
  const auto stats = fit_norm(ds, splits.train);
  auto cfg = small_run_config("/tmp", "full");
  cfg.model.d = 8;
  cfg.model.d_spatial = 8;
  cfg.model.mlp_ratio = 4.0;
  Model model(cfg.model, ds.num_sensors, ds.slots_per_day(), stats, 61);
  model.set_stage(1);
  auto trainables = model.trainable_params();

  const auto index =
      iter_samples(ds, splits.train, cfg.model.history_len, cfg.model.future_len);
  std::vector<int64_t> ids;
  const int64_t stride = std::max<int64_t>(1, index.count() / 32);
  for (int64_t i = 0; i < 32; ++i) ids.push_back((i * stride) % index.count());
  Batch batch = make_batch(ds, index, ids, stats, cfg.model, false);

  OptimConfig opt;
  opt.weight_decay = 0.0;
  AdamState adam;
  double normalized = std::numeric_limits<double>::infinity();
  int64_t steps_taken = 0;
  for (int64_t step = 0; step < max_steps; ++step) {
    auto loss = model.stage1_loss(batch);
    normalized = loss.value() / stats.stddev[0];
    ++steps_taken;
    if (normalized < target) break;
    backward(loss);
    clip_gradients(trainables, opt.grad_clip_norm);
    // halve the rate every 250 steps so the iterates settle into the batch
    const double lr = 0.02 * std::pow(0.5, static_cast<double>(step / 250));
    adam_step(trainables, adam, opt, lr);
    for (Parameter* p : trainables) p->value.clear_grad();
  }
  result.pass = normalized < target;
  result.detail = fmt("normalized MAE %.2e after %g steps (target %.0e)", normalized,
                      static_cast<double>(steps_taken), target);
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_ablation_ordering(const std::string& work_dir, int64_t epochs,
                                    const std::vector<uint64_t>& seeds) {
  Timer timer;
  CheckResult result;
  result.name = "ablation ordering";

  auto make_config = [&](const std::string& dir, const std::string& variant,
                         uint64_t seed) {
    RunConfig cfg;
    cfg.split_train = 0.7;
    cfg.split_val = 0.1;
    cfg.split_test = 0.2;
    cfg.model.history_len = 24;
    cfg.model.future_len = 24;
    cfg.model.segment_len = 2;
    cfg.model.d = 8;
    cfg.model.d_spatial = 8;
    cfg.model.d_tid = 4;
    cfg.model.d_diw = 4;
    cfg.model.num_blocks = 3;
    cfg.model.window_size = 3;
    cfg.model.num_heads = 2;
    cfg.model.mlp_ratio = 4.0;
    cfg.model.d_dec = 8;
    cfg.model.dec_heads = 2;
    cfg.model.variant_name = variant;
    cfg.optim.max_epochs = epochs;
    cfg.horizons = {1, 12, 24};
    cfg.seed = seed;
    cfg.out_dir = dir;
    return cfg;
  };

  std::vector<double> mae_full, mae_no_decoder, mae_no_hierarchy;
  for (uint64_t seed : seeds) {
    SyntheticSpec spec;  // multi-scale synthetic: daily wave + dips + noise
    spec.name = "ablation";
    spec.num_sensors = 8;
    spec.num_days = 60;
    spec.sample_interval_minutes = 60;  // 24 slots per day
    spec.base_level = 50.0;
    spec.daily_amplitude = 12.0;
    spec.noise_sigma = 1.0;
    spec.spike_rate_per_day = 2.0;
    spec.spike_depth = 15.0;
    spec.spike_width = 4;
    auto ds = generate_synthetic(spec, 1000 + seed);
    const auto splits = split_dataset(ds, 0.7, 0.1, 0.2);

    auto eval_ckpt = [&](const std::string& stem, int stage) {
      auto ckpt = load_checkpoint(stem);
      Model model = model_from_checkpoint(ckpt, 0);
      auto report = evaluate_model(model, ds, splits.test, {1, 12, 24}, 64, false,
                                   false, stage);
      return report.overall_mae;
    };

    {
      const std::string dir = fresh_dir(work_dir, "full_s" + std::to_string(seed));
      auto cfg = make_config(dir, "full", seed);
      train_stage1(ds, cfg);
      train_stage2(ds, dir + "/encoder_best", cfg);
      mae_full.push_back(eval_ckpt(dir + "/decoder_best", 2));
      // no_decoder shares the stage-1 run: the intermediate prediction is
      // the final output
      mae_no_decoder.push_back(eval_ckpt(dir + "/encoder_best", 1));
    }
    {
      const std::string dir = fresh_dir(work_dir, "nh_s" + std::to_string(seed));
      auto cfg = make_config(dir, "no_hierarchy", seed);
      train_stage1(ds, cfg);
      train_stage2(ds, dir + "/encoder_best", cfg);
      mae_no_hierarchy.push_back(eval_ckpt(dir + "/decoder_best", 2));
    }
  }

  const double med_full = median(mae_full);
  const double med_nd = median(mae_no_decoder);
  const double med_nh = median(mae_no_hierarchy);
  result.pass = med_full < med_nd && med_full < med_nh && med_full <= 0.95 * med_nd;
  result.detail = fmt("median test MAE: full %.4f, no_decoder %.4f, no_hierarchy %.4f",
                      med_full, med_nd, med_nh) +
                  fmt("; full/no_decoder = %.3f (need <= 0.95)", med_full / med_nd);
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_scheduler_and_clipping(const std::string& work_dir) {
  Timer timer;
  CheckResult result;
  result.name = "scheduler and clipping";

  OptimConfig opt;  // paper defaults
  bool ok = std::fabs(lr_at(0, opt) - 0.0005) < 1e-15 &&
            std::fabs(lr_at(50, opt) - 0.000125) < 1e-12 &&
            std::fabs(lr_at(130, opt) - 0.00003125) < 1e-12;
  double prev = lr_at(0, opt);
  for (int64_t e = 1; e <= 200 && ok; ++e) {
    const double cur = lr_at(e, opt);
    ok = cur <= prev;
    prev = cur;
  }

  // short runs: one with clipping forced, one with the default bound
  auto ds = small_dataset(67);
  double forced_max = 0.0, default_max = 0.0;
  {
    auto cfg = small_run_config(fresh_dir(work_dir, "clip_forced"), "full");
    cfg.optim.max_epochs = 1;
    cfg.optim.grad_clip_norm = 0.05;
    auto res = train_stage1(ds, cfg);
    forced_max = res.max_post_clip_norm;
    ok = ok && forced_max <= 0.05 + 1e-9 && forced_max > 0.0;
  }
  {
    auto cfg = small_run_config(fresh_dir(work_dir, "clip_default"), "full");
    cfg.optim.max_epochs = 1;
    auto res = train_stage1(ds, cfg);
    default_max = res.max_post_clip_norm;
    ok = ok && default_max <= 5.0 + 1e-9;
  }

  result.pass = ok;
  result.detail = fmt("lr 0.0005/0.000125/0.00003125 at epochs 0/50/130; clipped "
                      "norms %.4f and %.4f within bounds",
                      forced_max, default_max);
  result.seconds = timer.seconds();
  return result;
}

CheckResult check_dataset_roundtrip(const std::string& work_dir) {
  Timer timer;
  CheckResult result;
  result.name = "dataset round trip";

  SyntheticSpec spec;
  spec.num_sensors = 5;
  spec.num_days = 3;
  spec.noise_sigma = 2.0;
  spec.spike_rate_per_day = 2.0;
  auto ds = generate_synthetic(spec, 71);
  const std::string dir = fresh_dir(work_dir, "roundtrip");
  save_dataset(ds, dir + "/a");
  auto loaded = load_dataset(dir + "/a");
  bool ok = loaded.values.size() == ds.values.size();
  for (size_t i = 0; i < ds.values.size() && ok; ++i) {
    ok = std::memcmp(&loaded.values[i], &ds.values[i], sizeof(double)) == 0;
  }
  save_dataset(loaded, dir + "/b");
  ok = ok && read_bytes(dir + "/a.bin") == read_bytes(dir + "/b.bin");

  // pinned split boundaries
  TrafficDataset probe = ds;
  probe.values.clear();
  probe.num_steps = 34272;
  probe.values.assign(probe.num_steps * probe.num_sensors, 1.0);
  auto s = split_dataset(probe, 0.7, 0.1, 0.2);
  ok = ok && s.train.end == 23990 && s.val.end == 27417 && s.test.end == 34272;
  probe.num_steps = 16992;
  probe.values.assign(probe.num_steps * probe.num_sensors, 1.0);
  auto s2 = split_dataset(probe, 0.6, 0.2, 0.2);
  ok = ok && s2.train.end == 10195 && s2.val.end == 13593 && s2.test.end == 16992;

  result.pass = ok;
  result.detail = "bit-exact save/load; boundaries 23990/27417/34272 and "
                  "10195/13593/16992";
  result.seconds = timer.seconds();
  return result;
}

std::vector<CheckResult> run_selftest(const std::string& work_dir) {
  std::vector<CheckResult> results;
  results.push_back(check_shape_chain());
  results.push_back(check_window_locality());
  results.push_back(check_attention_normalization(100));
  results.push_back(check_dataset_roundtrip(work_dir));
  results.push_back(check_scheduler_and_clipping(work_dir));
  results.push_back(check_two_stage_freeze(work_dir, 1));
  return results;
}

std::string format_check_line(const CheckResult& result) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "[%s] %s: %s (%.1fs)",
                result.pass ? "PASS" : "FAIL", result.name.c_str(),
                result.detail.c_str(), result.seconds);
  return std::string(buf);
}

}  // namespace pyramidcast
