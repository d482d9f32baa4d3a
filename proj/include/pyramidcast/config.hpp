#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pyramidcast/model.hpp"

namespace pyramidcast {

struct OptimConfig {
  double lr = 0.0005;
  double weight_decay = 0.0001;
  int64_t batch_size = 64;
  std::vector<int64_t> milestones = {1, 40, 80, 120};
  double gamma = 0.5;
  double grad_clip_norm = 5.0;
  int64_t max_epochs = 150;
  bool decoupled_weight_decay = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  void validate() const;
};

/// Full run description. Round-trips losslessly through the key=value
/// config file format (UTF-8, `#` comments, CLI flags override).
struct RunConfig {
  std::string dataset;
  double split_train = 0.7;
  double split_val = 0.1;
  double split_test = 0.2;
  ModelConfig model;
  OptimConfig optim;
  std::vector<int64_t> horizons = {12, 48, 96, 144, 192, 288};
  bool mask_zeros = false;
  bool cumulative_horizons = false;
  uint64_t seed = 1;
  std::string out_dir = ".";
};

RunConfig run_config_from_map(const std::map<std::string, std::string>& kv,
                              RunConfig base = RunConfig());
std::map<std::string, std::string> run_config_to_map(const RunConfig& cfg);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
std::map<std::string, std::string> parse_kv_file(const std::string& path);

}  // namespace pyramidcast
