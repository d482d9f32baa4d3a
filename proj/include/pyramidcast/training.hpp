#pragma once

#include <iosfwd>
#include <limits>
#include <unordered_map>

#include "pyramidcast/checkpoint.hpp"
#include "pyramidcast/config.hpp"
#include "pyramidcast/dataset.hpp"
#include "pyramidcast/model.hpp"

namespace pyramidcast {

/// base_lr * gamma^(number of milestones <= epoch)
double lr_at(int64_t epoch, const OptimConfig& cfg);

/// Global L2 clipping over the trainable gradients, in place. Returns the
/// pre-clip norm. Non-finite gradients abort naming the parameter.
double clip_gradients(const std::vector<Parameter*>& params, double max_norm);

struct AdamState {
  int64_t step = 0;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>>
      moments;  // first/second moment per trainable parameter
};

/// Classic Adam with bias correction; weight decay is added to the gradient
/// (L2) for decay-eligible parameters unless decoupled mode is selected.
void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               const OptimConfig& cfg, double lr);

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0.0;
  double train_mae = 0.0;
  double val_mae = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::string checkpoint_stem;
  std::string payload_sha256;  // of the best checkpoint
  double best_val_mae = std::numeric_limits<double>::infinity();
  int64_t best_epoch = -1;
  double max_post_clip_norm = 0.0;
  std::vector<EpochLog> logs;
};

/// Stage 1: trains embedding + encoder + intermediate head on the
/// intermediate-prediction MAE (variant end2end instead optimizes the joint
/// loss over all parameters and emits a stage-2 checkpoint directly).
TrainResult train_stage1(const TrafficDataset& ds, const RunConfig& cfg,
                         std::ostream* log_stream = nullptr);

/// Stage 2: loads the encoder checkpoint, freezes stage-1 parameters
/// (except in no_fix mode) and trains the decoder side on the final MAE.
TrainResult train_stage2(const TrafficDataset& ds, const std::string& encoder_stem,
                         const RunConfig& cfg, std::ostream* log_stream = nullptr);

uint64_t shuffle_seed(uint64_t seed, int64_t stage, int64_t epoch);

/// Fisher-Yates order over [0, count), a pure function of (seed, stage,
/// epoch).
std::vector<int64_t> shuffled_ids(int64_t count, uint64_t seed, int64_t stage,
                                  int64_t epoch);

}  // namespace pyramidcast
