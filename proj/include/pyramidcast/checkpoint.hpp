#pragma once

#include <map>
#include <string>
#include <vector>

#include "pyramidcast/model.hpp"

namespace pyramidcast {

/// Checkpoint = `<stem>.json` manifest (config, parameter names/shapes,
/// payload hash) + `<stem>.bin` payload of little-endian 64-bit floats in
/// manifest order. Stage-1 checkpoints carry the stage-1 parameters only;
/// stage-2 checkpoints carry everything plus the hash of the encoder
/// checkpoint they were trained against.
struct CheckpointData {
  int stage = 1;
  ModelConfig config;
  std::string dataset_name;
  int64_t num_sensors = 0;
  int64_t slots_per_day = 0;
  bool mask_zeros = false;
  NormStats stats;
  std::string payload_sha256;
  std::string encoder_payload_sha256;  // stage 2 only
  std::vector<std::string> param_order;
  std::map<std::string, std::pair<Shape, std::vector<double>>> params;
};

/// Returns the payload sha256.
std::string save_checkpoint(const Model& model, int stage,
                            const std::string& dataset_name, bool mask_zeros,
                            const std::string& stem,
                            const std::string& encoder_payload_sha256 = "");

CheckpointData load_checkpoint(const std::string& stem);

/// Builds a model from the manifest and fills every recorded parameter.
Model model_from_checkpoint(const CheckpointData& ckpt, uint64_t seed = 0);

/// Copies recorded parameters into an existing model (shape-checked).
void load_params_into(Model& model, const CheckpointData& ckpt);

}  // namespace pyramidcast
