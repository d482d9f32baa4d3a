#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pyramidcast/dataset.hpp"
#include "pyramidcast/decoder.hpp"
#include "pyramidcast/embedding.hpp"
#include "pyramidcast/encoder.hpp"
#include "pyramidcast/tensor.hpp"

namespace pyramidcast {

enum class TrainMode { two_stage, end_to_end, no_fix };

/// Resolved ablation/variant configuration.
struct VariantSpec {
  std::string name = "full";
  bool use_decoder = true;        // false: intermediate prediction is final
  bool concat_head = false;       // decoder replaced by upsample+concat+linear
  bool hierarchy = true;          // false: constant (P, d), global attention
  bool use_stpe = true;           // false: learned per-position table
  bool segment_embedding = true;  // false: per-step tokens (L = 1)
  TrainMode mode = TrainMode::two_stage;
};

/// Known names: full, concat, no_decoder, no_hierarchy, no_stpe, no_se,
/// end2end, no_fix.
VariantSpec variant(const std::string& name);

struct ModelConfig {
  int64_t history_len = 288;
  int64_t future_len = 288;
  int64_t segment_len = 12;
  int64_t channels = 1;
  int64_t d = 32;
  int64_t d_spatial = 32;
  int64_t d_tid = 8;
  int64_t d_diw = 32;
  int64_t num_blocks = 4;
  int64_t window_size = 3;
  int64_t num_heads = 4;
  double mlp_ratio = 4.0;
  int64_t d_dec = 32;
  int64_t dec_heads = 4;
  bool merge_projection = false;
  bool residual_refine = false;
  bool scale_order_coarse_to_fine = true;
  std::string variant_name = "full";

  VariantSpec variant_spec() const { return variant(variant_name); }
  int64_t num_segments() const;  // P
  int64_t dec_segments() const;  // P_dec
  int64_t mlp_hidden(int64_t width) const;
  /// (token count, width) per encoder block, fine to coarse.
  std::vector<std::pair<int64_t, int64_t>> scale_chain() const;
  void validate() const;
};

struct Parameter {
  std::string name;
  Tensor value;
  int stage = 1;      // 1: embedding/encoder/head, 2: decoder side
  bool decay = false; // weight decay applies (matrices and tables only)
};

class ParamStore {
 public:
  Tensor register_param(const std::string& name, Tensor value, int stage, bool decay);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }

 private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, size_t> index_;
};

/// One training/eval mini-batch. Index vectors are per segment (first step
/// of each segment), flattened batch-major.
struct Batch {
  int64_t size = 0;
  Tensor history_norm;  // [B, T, C]
  Tensor future_raw;    // [B, T_f, C], constant
  Tensor mask;          // [B, T_f, C], 0/1 constant
  double mask_count = 0.0;
  std::vector<int64_t> seg_sensor, seg_tid, seg_diw;              // [B*P]
  std::vector<int64_t> fut_seg_sensor, fut_seg_tid, fut_seg_diw;  // [B*P_dec]
};

Batch make_batch(const TrafficDataset& ds, const SampleIndex& index,
                 const std::vector<int64_t>& sample_ids, const NormStats& stats,
                 const ModelConfig& cfg, bool mask_zeros);

/// All learnable state plus the forward paths for every variant.
class Model {
 public:
  Model(const ModelConfig& cfg, int64_t num_sensors, int64_t slots_per_day,
        NormStats stats, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const VariantSpec& spec() const { return spec_; }
  int64_t num_sensors() const { return num_sensors_; }
  int64_t slots_per_day() const { return slots_per_day_; }
  const NormStats& norm_stats() const { return stats_; }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const EmbeddingParams& embedding_params() const { return emb_; }

  /// Sets which parameters are trainable. Stage 1 trains embedding +
  /// encoder + intermediate head; stage 2 trains the decoder side with
  /// stage-1 parameters frozen (except in no_fix/end2end modes).
  void set_stage(int stage);
  std::vector<Parameter*> trainable_params();

  Tensor encode_tokens(const Batch& batch);
  ScalePyramid run_encoder(const Tensor& tokens, std::vector<Tensor>* capture = nullptr);
  Tensor run_decoder(const ScalePyramid& pyr, const Batch& batch,
                     std::vector<Tensor>* capture = nullptr);
  Tensor run_concat_head(const ScalePyramid& pyr);

  /// Final normalized prediction for the active variant. `stage` selects the
  /// stage-1 (intermediate) or stage-2 (refined) output.
  Tensor forward_norm(const Batch& batch, int stage,
                      std::vector<Tensor>* capture = nullptr);
  Tensor denormalize(const Tensor& pred_norm) const;

  Tensor stage1_loss(const Batch& batch);
  Tensor stage2_loss(const Batch& batch);
  Tensor end_to_end_loss(const Batch& batch);

 private:
  void build_params(uint64_t seed);

  ModelConfig cfg_;
  VariantSpec spec_;
  int64_t num_sensors_;
  int64_t slots_per_day_;
  NormStats stats_;
  ParamStore params_;
  EmbeddingParams emb_;
  EncoderParams enc_;
  std::optional<DecoderParams> dec_;
  std::optional<LinearParams> concat_head_;
};

}  // namespace pyramidcast
