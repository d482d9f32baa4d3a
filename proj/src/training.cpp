#include "pyramidcast/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <ostream>
#include <random>

#include "json.hpp"
#include "pyramidcast/errors.hpp"

namespace pyramidcast {

double lr_at(int64_t epoch, const OptimConfig& cfg) {
  if (epoch < 0) throw ConfigError("epoch must be non-negative");
  int64_t fired = 0;
  for (int64_t m : cfg.milestones) {
    if (m <= epoch) ++fired;
  }
  return cfg.lr * std::pow(cfg.gamma, static_cast<double>(fired));
}

double clip_gradients(const std::vector<Parameter*>& params, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("gradient clip norm must be positive");
  double sq = 0.0;
  for (Parameter* p : params) {
    if (!p->value.has_grad()) continue;
    for (double g : p->value.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter " + p->name);
      }
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Parameter* p : params) {
      if (!p->value.has_grad()) continue;
      for (double& g : p->value.grad_mut()) g *= scale;
    }
  }
  return norm;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               const OptimConfig& cfg, double lr) {
  const int64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  for (Parameter* p : params) {
    if (!p->value.requires_grad()) continue;  // frozen parameters never move
    if (!p->value.has_grad()) {
      throw NumericError("missing gradient for trainable parameter " + p->name);
    }
    auto grad = p->value.grad_mut();
    auto theta = p->value.mutable_data();
    auto& [m, v] = state.moments[p->name];
    if (m.empty()) {
      m.assign(grad.size(), 0.0);
      v.assign(grad.size(), 0.0);
    }
    const bool l2 = !cfg.decoupled_weight_decay && p->decay && cfg.weight_decay > 0.0;
    for (size_t i = 0; i < grad.size(); ++i) {
      double g = grad[i];
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter " + p->name);
      }
      if (l2) g += cfg.weight_decay * theta[i];
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
    if (cfg.decoupled_weight_decay && p->decay && cfg.weight_decay > 0.0) {
      for (size_t i = 0; i < theta.size(); ++i) {
        theta[i] -= lr * cfg.weight_decay * theta[i];
      }
    }
  }
}

uint64_t shuffle_seed(uint64_t seed, int64_t stage, int64_t epoch) {
  uint64_t z = seed;
  z ^= 0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(stage) + 1);
  z ^= 0xbf58476d1ce4e5b9ULL * (static_cast<uint64_t>(epoch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<int64_t> shuffled_ids(int64_t count, uint64_t seed, int64_t stage,
                                  int64_t epoch) {
  std::vector<int64_t> ids(count);
  for (int64_t i = 0; i < count; ++i) ids[i] = i;
  std::mt19937_64 rng(shuffle_seed(seed, stage, epoch));
  for (int64_t i = count - 1; i > 0; --i) {
    std::uniform_int_distribution<int64_t> dist(0, i);
    std::swap(ids[i], ids[dist(rng)]);
  }
  return ids;
}

namespace {

struct StageDriver {
  int stage = 1;       // which parameters train
  int ckpt_stage = 1;  // what the checkpoint carries
  std::string ckpt_stem;
  std::string encoder_hash;
  std::function<Tensor(Model&, const Batch&)> train_loss;
  std::function<Tensor(Model&, const Batch&)> val_loss;
};

TrainResult run_training(Model& model, const TrafficDataset& ds, const RunConfig& cfg,
                         const StageDriver& driver, std::ostream* log_stream) {
  cfg.optim.validate();
  const auto splits = split_dataset(ds, cfg.split_train, cfg.split_val, cfg.split_test);
  if (splits.val.size() < cfg.model.history_len + cfg.model.future_len) {
    throw ConfigError("validation range of " + std::to_string(splits.val.size()) +
                      " steps cannot hold one sample; adjust split ratios");
  }
  const auto train_index =
      iter_samples(ds, splits.train, cfg.model.history_len, cfg.model.future_len);
  const auto val_index =
      iter_samples(ds, splits.val, cfg.model.history_len, cfg.model.future_len);

  model.set_stage(driver.stage);
  auto trainables = model.trainable_params();
  if (trainables.empty()) throw ConfigError("no trainable parameters for this stage");

  AdamState adam;
  TrainResult result;
  result.checkpoint_stem = driver.ckpt_stem;
  std::ofstream log_file(driver.ckpt_stem + ".log.jsonl", std::ios::trunc);

  bool saved_once = false;
  for (int64_t epoch = 0; epoch < cfg.optim.max_epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, cfg.optim);
    const auto order = shuffled_ids(train_index.count(), cfg.seed, driver.stage, epoch);

    double train_abs_sum = 0.0;
    double train_count = 0.0;
    for (int64_t start = 0; start < static_cast<int64_t>(order.size());
         start += cfg.optim.batch_size) {
      const int64_t stop =
          std::min<int64_t>(start + cfg.optim.batch_size, order.size());
      std::vector<int64_t> ids(order.begin() + start, order.begin() + stop);
      Batch batch =
          make_batch(ds, train_index, ids, model.norm_stats(), cfg.model, cfg.mask_zeros);
      Tensor loss = driver.train_loss(model, batch);
      const double loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw NumericError(
            "training loss became non-finite at epoch " + std::to_string(epoch) +
            (saved_once ? "; last good checkpoint retained at " + driver.ckpt_stem
                        : "; no checkpoint was saved yet"));
      }
      backward(loss);
      const double pre_norm = clip_gradients(trainables, cfg.optim.grad_clip_norm);
      const double post_norm = std::min(pre_norm, cfg.optim.grad_clip_norm);
      if (post_norm > cfg.optim.grad_clip_norm + 1e-9) {
        throw NumericError("clipped gradient norm exceeded the bound");
      }
      result.max_post_clip_norm = std::max(result.max_post_clip_norm, post_norm);
      adam_step(trainables, adam, cfg.optim, lr);
      for (Parameter* p : trainables) p->value.clear_grad();
      train_abs_sum += loss_value * batch.mask_count;
      train_count += batch.mask_count;
    }

    double val_abs_sum = 0.0;
    double val_count = 0.0;
    for (int64_t start = 0; start < val_index.count(); start += cfg.optim.batch_size) {
      const int64_t stop = std::min<int64_t>(start + cfg.optim.batch_size,
                                             val_index.count());
      std::vector<int64_t> ids(stop - start);
      for (int64_t i = start; i < stop; ++i) ids[i - start] = i;
      Batch batch =
          make_batch(ds, val_index, ids, model.norm_stats(), cfg.model, cfg.mask_zeros);
      Tensor loss = driver.val_loss(model, batch);
      val_abs_sum += loss.value() * batch.mask_count;
      val_count += batch.mask_count;
    }

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
            .count();
    EpochLog entry{epoch, lr, train_count > 0 ? train_abs_sum / train_count : 0.0,
                   val_count > 0 ? val_abs_sum / val_count : 0.0, seconds};
    result.logs.push_back(entry);
    nlohmann::json line = {{"epoch", entry.epoch},
                           {"lr", entry.lr},
                           {"train_mae", entry.train_mae},
                           {"val_mae", entry.val_mae},
                           {"seconds", entry.seconds}};
    if (log_stream) (*log_stream) << line.dump() << "\n";
    if (log_file) log_file << line.dump() << "\n";

    if (entry.val_mae < result.best_val_mae) {
      result.best_val_mae = entry.val_mae;
      result.best_epoch = epoch;
      result.payload_sha256 =
          save_checkpoint(model, driver.ckpt_stage, ds.name, cfg.mask_zeros,
                          driver.ckpt_stem, driver.encoder_hash);
      saved_once = true;
    }
  }
  if (!saved_once) throw NumericError("training finished without a checkpoint");
  return result;
}

}  // namespace

TrainResult train_stage1(const TrafficDataset& ds, const RunConfig& cfg,
                         std::ostream* log_stream) {
  const auto splits = split_dataset(ds, cfg.split_train, cfg.split_val, cfg.split_test);
  const NormStats stats = fit_norm(ds, splits.train);
  Model model(cfg.model, ds.num_sensors, ds.slots_per_day(), stats, cfg.seed);

  StageDriver driver;
  const VariantSpec spec = cfg.model.variant_spec();
  if (spec.mode == TrainMode::end_to_end) {
    driver.stage = 1;  // end2end trains everything in one pass
    driver.ckpt_stage = 2;
    driver.ckpt_stem = cfg.out_dir + "/model_best";
    driver.train_loss = [](Model& m, const Batch& b) { return m.end_to_end_loss(b); };
    driver.val_loss = [](Model& m, const Batch& b) { return m.stage2_loss(b); };
  } else {
    driver.stage = 1;
    driver.ckpt_stage = 1;
    driver.ckpt_stem = cfg.out_dir + "/encoder_best";
    driver.train_loss = [](Model& m, const Batch& b) { return m.stage1_loss(b); };
    driver.val_loss = [](Model& m, const Batch& b) { return m.stage1_loss(b); };
  }
  return run_training(model, ds, cfg, driver, log_stream);
}

TrainResult train_stage2(const TrafficDataset& ds, const std::string& encoder_stem,
                         const RunConfig& cfg, std::ostream* log_stream) {
  CheckpointData ckpt = load_checkpoint(encoder_stem);
  if (ckpt.stage != 1) {
    throw ConfigError("stage-2 training expects a stage-1 checkpoint, got stage " +
                      std::to_string(ckpt.stage));
  }
  const VariantSpec spec = ckpt.config.variant_spec();
  if (!spec.use_decoder && !spec.concat_head) {
    throw ConfigError("variant " + spec.name + " has no stage-2 parameters to train");
  }
  if (ckpt.num_sensors != ds.num_sensors || ckpt.slots_per_day != ds.slots_per_day() ||
      ckpt.config.channels != ds.num_channels) {
    throw ConfigError("checkpoint was trained on an incompatible dataset layout");
  }

  RunConfig stage_cfg = cfg;
  stage_cfg.model = ckpt.config;  // architecture comes from the checkpoint
  Model model = model_from_checkpoint(ckpt, cfg.seed);

  StageDriver driver;
  driver.stage = 2;
  driver.ckpt_stage = 2;
  driver.ckpt_stem = cfg.out_dir + "/decoder_best";
  driver.encoder_hash = ckpt.payload_sha256;
  driver.train_loss = [](Model& m, const Batch& b) { return m.stage2_loss(b); };
  driver.val_loss = [](Model& m, const Batch& b) { return m.stage2_loss(b); };
  return run_training(model, ds, stage_cfg, driver, log_stream);
}

}  // namespace pyramidcast
