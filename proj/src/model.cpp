#include "pyramidcast/model.hpp"

#include <cmath>
#include <random>

#include "pyramidcast/errors.hpp"

namespace pyramidcast {

VariantSpec variant(const std::string& name) {
  VariantSpec v;
  v.name = name;
  if (name == "full") {
    return v;
  } else if (name == "concat") {
    v.concat_head = true;
    v.use_decoder = false;
    return v;
  } else if (name == "no_decoder") {
    v.use_decoder = false;
    return v;
  } else if (name == "no_hierarchy") {
    v.hierarchy = false;
    return v;
  } else if (name == "no_stpe") {
    v.use_stpe = false;
    return v;
  } else if (name == "no_se") {
    v.segment_embedding = false;
    return v;
  } else if (name == "end2end") {
    v.mode = TrainMode::end_to_end;
    return v;
  } else if (name == "no_fix") {
    v.mode = TrainMode::no_fix;
    return v;
  }
  throw ConfigError("unknown variant '" + name +
                    "' (expected full, concat, no_decoder, no_hierarchy, no_stpe, "
                    "no_se, end2end, no_fix)");
}

int64_t ModelConfig::num_segments() const {
  const int64_t seg = variant_spec().segment_embedding ? segment_len : 1;
  if (seg < 1 || history_len % seg != 0) {
    throw ConfigError("history length " + std::to_string(history_len) +
                      " is not divisible by segment length " + std::to_string(seg));
  }
  return history_len / seg;
}

int64_t ModelConfig::dec_segments() const {
  const int64_t seg = variant_spec().segment_embedding ? segment_len : 1;
  if (future_len % seg != 0) {
    throw ConfigError("future length " + std::to_string(future_len) +
                      " is not divisible by segment length " + std::to_string(seg));
  }
  return future_len / seg;
}

int64_t ModelConfig::mlp_hidden(int64_t width) const {
  const int64_t h = static_cast<int64_t>(std::llround(mlp_ratio * static_cast<double>(width)));
  return std::max<int64_t>(h, 1);
}

std::vector<std::pair<int64_t, int64_t>> ModelConfig::scale_chain() const {
  const VariantSpec v = variant_spec();
  std::vector<std::pair<int64_t, int64_t>> chain;
  int64_t p = num_segments();
  int64_t width = d;
  for (int64_t l = 0; l < num_blocks; ++l) {
    if (l > 0 && v.hierarchy) {
      if (p % 2 != 0) {
        throw ConfigError("token count " + std::to_string(p) +
                          " at block " + std::to_string(l) + " is odd; cannot merge");
      }
      p /= 2;
      width *= 2;
    }
    chain.emplace_back(p, width);
  }
  return chain;
}

void ModelConfig::validate() const {
  if (history_len < 1 || future_len < 1 || channels < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (num_blocks < 1) throw ConfigError("at least one encoder block is required");
  const VariantSpec v = variant_spec();
  const auto chain = scale_chain();
  for (size_t l = 0; l < chain.size(); ++l) {
    const auto [p, width] = chain[l];
    if (v.hierarchy) {
      if (p % window_size != 0) {
        throw ConfigError("scale " + std::to_string(l + 1) + " has " +
                          std::to_string(p) + " tokens, not divisible by window size " +
                          std::to_string(window_size));
      }
    }
    if (width % num_heads != 0) {
      throw ConfigError("scale " + std::to_string(l + 1) + " width " +
                        std::to_string(width) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
  }
  if (v.use_decoder) {
    dec_segments();
    if (d_dec % dec_heads != 0) {
      throw ConfigError("decoder width " + std::to_string(d_dec) +
                        " is not divisible by " + std::to_string(dec_heads) + " heads");
    }
  }
  if (v.concat_head) {
    const int64_t p = num_segments();
    if (future_len % p != 0) {
      throw ConfigError("concat variant needs future length divisible by " +
                        std::to_string(p) + " tokens");
    }
  }
}

Tensor ParamStore::register_param(const std::string& name, Tensor value, int stage,
                                  bool decay) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  value.set_requires_grad(true);
  index_[name] = items_.size();
  items_.push_back(Parameter{name, value, stage, decay});
  return value;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return items_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return items_[it->second];
}

namespace {

class InitRng {
 public:
  explicit InitRng(uint64_t seed) : gen_(seed) {}

  Tensor xavier(Shape shape, int64_t fan_out, int64_t fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = dist(gen_);
    return Tensor::from_data(std::move(shape), std::move(data));
  }

  // normal(0, sigma) truncated at +-2 sigma
  Tensor trunc_normal(Shape shape, double sigma) {
    std::normal_distribution<double> dist(0.0, sigma);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) {
      double x = dist(gen_);
      while (std::fabs(x) > 2.0 * sigma) x = dist(gen_);
      v = x;
    }
    return Tensor::from_data(std::move(shape), std::move(data));
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace

Model::Model(const ModelConfig& cfg, int64_t num_sensors, int64_t slots_per_day,
             NormStats stats, uint64_t seed)
    : cfg_(cfg),
      spec_(cfg.variant_spec()),
      num_sensors_(num_sensors),
      slots_per_day_(slots_per_day),
      stats_(std::move(stats)) {
  cfg_.validate();
  if (num_sensors_ < 1 || slots_per_day_ < 1) {
    throw ConfigError("model needs positive sensor count and slots per day");
  }
  if (static_cast<int64_t>(stats_.mean.size()) != cfg_.channels) {
    throw ConfigError("normalization stats channel count mismatch");
  }
  build_params(seed);
}

void Model::build_params(uint64_t seed) {
  InitRng rng(seed);
  const int64_t seg = spec_.segment_embedding ? cfg_.segment_len : 1;
  const int64_t seg_width = seg * cfg_.channels;
  const int64_t p = cfg_.num_segments();
  const auto chain = cfg_.scale_chain();

  auto linear_param = [&](const std::string& name, int64_t out, int64_t in,
                          int stage) {
    LinearParams lp;
    lp.weight = params_.register_param(name + ".weight", rng.xavier({out, in}, out, in),
                                       stage, true);
    lp.bias = params_.register_param(name + ".bias", Tensor::zeros({out}), stage, false);
    return lp;
  };
  auto norm_param = [&](const std::string& name, int64_t width, int stage) {
    LayerNormParams np;
    np.gain = params_.register_param(name + ".gain", Tensor::full({width}, 1.0), stage,
                                     false);
    np.bias = params_.register_param(name + ".bias", Tensor::zeros({width}), stage,
                                     false);
    return np;
  };
  auto table_param = [&](const std::string& name, Shape shape, int stage) {
    return params_.register_param(name, rng.trunc_normal(std::move(shape), 0.02), stage,
                                  true);
  };

  // input embedding
  emb_.seg = linear_param("emb.seg", cfg_.d, seg_width, 1);
  if (spec_.use_stpe) {
    emb_.e_spatial = table_param("emb.e_spatial", {num_sensors_, cfg_.d_spatial}, 1);
    emb_.t_tid = table_param("emb.t_tid", {slots_per_day_, cfg_.d_tid}, 1);
    emb_.t_diw = table_param("emb.t_diw", {7, cfg_.d_diw}, 1);
    const int64_t fuse_in = cfg_.d + cfg_.d_spatial + cfg_.d_tid + cfg_.d_diw;
    emb_.fuse = linear_param("emb.fuse", cfg_.d, fuse_in, 1);
  } else {
    emb_.pos_table = table_param("emb.pos_table", {p, cfg_.d}, 1);
  }

  // encoder blocks, fine to coarse
  for (int64_t l = 0; l < cfg_.num_blocks; ++l) {
    const int64_t width = chain[l].second;
    const std::string base = "enc.block" + std::to_string(l + 1);
    WindowBlockParams block;
    if (l > 0 && spec_.hierarchy && cfg_.merge_projection) {
      block.merge_proj = linear_param(base + ".merge_proj", width, width, 1);
    }
    block.ln1 = norm_param(base + ".ln1", width, 1);
    block.attn.q = linear_param(base + ".attn.q", width, width, 1);
    block.attn.k_weight = params_.register_param(
        base + ".attn.k.weight", rng.xavier({width, width}, width, width), 1, true);
    block.attn.v = linear_param(base + ".attn.v", width, width, 1);
    block.attn.out = linear_param(base + ".attn.out", width, width, 1);
    block.ln2 = norm_param(base + ".ln2", width, 1);
    const int64_t hidden = cfg_.mlp_hidden(width);
    block.mlp.fc1 = linear_param(base + ".mlp.fc1", hidden, width, 1);
    block.mlp.fc2 = linear_param(base + ".mlp.fc2", width, hidden, 1);
    enc_.blocks.push_back(std::move(block));
  }

  // intermediate prediction head
  const int64_t top_width = chain.back().first * chain.back().second;
  enc_.head = linear_param("enc.head", cfg_.future_len * cfg_.channels, top_width, 1);

  if (spec_.use_decoder) {
    DecoderParams dec;
    dec.seg = linear_param("dec.seg", cfg_.d_dec, seg_width, 2);
    if (spec_.use_stpe) {
      const int64_t fuse_in = cfg_.d_dec + cfg_.d_spatial + cfg_.d_tid + cfg_.d_diw;
      dec.fuse = linear_param("dec.fuse", cfg_.d_dec, fuse_in, 2);
    } else {
      dec.pos_table = table_param("dec.pos_table", {cfg_.dec_segments(), cfg_.d_dec}, 2);
    }
    for (int64_t k = 0; k < cfg_.num_blocks; ++k) {
      const size_t scale_idx = cfg_.scale_order_coarse_to_fine
                                   ? static_cast<size_t>(cfg_.num_blocks - 1 - k)
                                   : static_cast<size_t>(k);
      const int64_t enc_width = chain[scale_idx].second;
      const std::string base = "dec.block" + std::to_string(k + 1);
      CrossBlockParams block;
      block.ln_enc = norm_param(base + ".ln_enc", enc_width, 2);
      block.kv_proj = linear_param(base + ".kv_proj", cfg_.d_dec, enc_width, 2);
      block.ln_dec = norm_param(base + ".ln_dec", cfg_.d_dec, 2);
      block.attn_out = linear_param(base + ".attn_out", cfg_.d_dec, cfg_.d_dec, 2);
      block.ln2 = norm_param(base + ".ln2", cfg_.d_dec, 2);
      const int64_t hidden = cfg_.mlp_hidden(cfg_.d_dec);
      block.mlp.fc1 = linear_param(base + ".mlp.fc1", hidden, cfg_.d_dec, 2);
      block.mlp.fc2 = linear_param(base + ".mlp.fc2", cfg_.d_dec, hidden, 2);
      dec.blocks.push_back(std::move(block));
    }
    dec.head = linear_param("dec.head", seg * cfg_.channels, cfg_.d_dec, 2);
    dec_ = std::move(dec);
  }

  if (spec_.concat_head) {
    int64_t total_width = 0;
    for (const auto& [pl, dl] : chain) total_width += dl;
    const int64_t out = (cfg_.future_len / p) * cfg_.channels;
    concat_head_ = linear_param("concat.head", out, total_width, 2);
  }
}

void Model::set_stage(int stage) {
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  if (stage == 2 && !spec_.use_decoder && !spec_.concat_head) {
    throw ConfigError("variant " + spec_.name + " has no stage-2 parameters");
  }
  for (Parameter& p : params_.items()) {
    bool trainable;
    if (spec_.mode == TrainMode::end_to_end) {
      trainable = true;
    } else if (stage == 1) {
      trainable = (p.stage == 1);
    } else if (spec_.mode == TrainMode::no_fix) {
      trainable = true;
    } else {
      trainable = (p.stage == 2);
    }
    p.value.set_requires_grad(trainable);
  }
}

std::vector<Parameter*> Model::trainable_params() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_.items()) {
    if (p.value.requires_grad()) out.push_back(&p);
  }
  return out;
}

Tensor Model::encode_tokens(const Batch& batch) {
  const int64_t seg = spec_.segment_embedding ? cfg_.segment_len : 1;
  auto tokens = segment_embed(batch.history_norm, seg, emb_.seg);
  if (spec_.use_stpe) {
    return st_positional_encode(tokens, emb_, batch.seg_sensor, batch.seg_tid,
                                batch.seg_diw);
  }
  return positional_table_encode(tokens, *emb_.pos_table);
}

ScalePyramid Model::run_encoder(const Tensor& tokens, std::vector<Tensor>* capture) {
  return encoder_forward(tokens, enc_, cfg_.window_size, cfg_.num_heads,
                         cfg_.future_len, cfg_.channels, spec_.hierarchy, capture);
}

Tensor Model::run_decoder(const ScalePyramid& pyr, const Batch& batch,
                          std::vector<Tensor>* capture) {
  if (!dec_) throw ConfigError("variant " + spec_.name + " has no decoder");
  const int64_t seg = spec_.segment_embedding ? cfg_.segment_len : 1;
  auto queries = build_queries(pyr.intermediate, seg, *dec_, emb_, spec_.use_stpe,
                               batch.fut_seg_sensor, batch.fut_seg_tid,
                               batch.fut_seg_diw);
  auto refined = decoder_forward(pyr, queries, *dec_, cfg_.dec_heads, seg,
                                 cfg_.channels, cfg_.scale_order_coarse_to_fine,
                                 capture);
  if (cfg_.residual_refine) return add(pyr.intermediate, refined);
  return refined;
}

Tensor Model::run_concat_head(const ScalePyramid& pyr) {
  if (!concat_head_) throw ConfigError("variant " + spec_.name + " has no concat head");
  const int64_t p = cfg_.num_segments();
  std::vector<Tensor> upsampled;
  for (const Tensor& scale : pyr.scales) {
    const int64_t pl = scale.extent(1);
    const int64_t repeat = p / pl;
    if (repeat == 1) {
      upsampled.push_back(scale);
      continue;
    }
    std::vector<int64_t> idx(p);
    for (int64_t i = 0; i < p; ++i) idx[i] = i / repeat;  // nearest upsampling
    upsampled.push_back(index_select(scale, 1, idx));
  }
  auto features = concat(upsampled, 2);           // [B, P, sum(d_l)]
  auto out = apply_linear(features, *concat_head_);  // [B, P, (T_f/P)*C]
  const int64_t batch = features.extent(0);
  return reshape(out, {batch, cfg_.future_len, cfg_.channels});
}

Tensor Model::forward_norm(const Batch& batch, int stage, std::vector<Tensor>* capture) {
  auto pyr = run_encoder(encode_tokens(batch), capture);
  if (stage == 1 || (!spec_.use_decoder && !spec_.concat_head)) {
    return pyr.intermediate;
  }
  if (spec_.concat_head) return run_concat_head(pyr);
  return run_decoder(pyr, batch, capture);
}

Tensor Model::denormalize(const Tensor& pred_norm) const {
  return channel_affine(pred_norm, stats_.stddev, stats_.mean);
}

Tensor Model::stage1_loss(const Batch& batch) {
  auto pyr = run_encoder(encode_tokens(batch));
  return masked_mae_loss(denormalize(pyr.intermediate), batch.future_raw, batch.mask);
}

Tensor Model::stage2_loss(const Batch& batch) {
  auto pyr = run_encoder(encode_tokens(batch));
  Tensor pred = spec_.concat_head ? run_concat_head(pyr) : run_decoder(pyr, batch);
  return masked_mae_loss(denormalize(pred), batch.future_raw, batch.mask);
}

Tensor Model::end_to_end_loss(const Batch& batch) {
  auto pyr = run_encoder(encode_tokens(batch));
  auto enc_loss =
      masked_mae_loss(denormalize(pyr.intermediate), batch.future_raw, batch.mask);
  Tensor pred = spec_.concat_head ? run_concat_head(pyr) : run_decoder(pyr, batch);
  auto dec_loss = masked_mae_loss(denormalize(pred), batch.future_raw, batch.mask);
  return add(enc_loss, dec_loss);
}

Batch make_batch(const TrafficDataset& ds, const SampleIndex& index,
                 const std::vector<int64_t>& sample_ids, const NormStats& stats,
                 const ModelConfig& cfg, bool mask_zeros) {
  const int64_t b = static_cast<int64_t>(sample_ids.size());
  if (b < 1) throw ConfigError("empty batch");
  const int64_t t = cfg.history_len;
  const int64_t tf = cfg.future_len;
  const int64_t c = cfg.channels;
  if (index.history_len() != t || index.future_len() != tf) {
    throw ConfigError("sample index window does not match model config");
  }
  if (ds.num_channels != c) {
    throw ConfigError("dataset has " + std::to_string(ds.num_channels) +
                      " channels but model expects " + std::to_string(c));
  }
  const int64_t seg = cfg.variant_spec().segment_embedding ? cfg.segment_len : 1;
  const int64_t p = t / seg;
  const int64_t p_dec = tf / seg;

  Batch batch;
  batch.size = b;
  std::vector<double> hist(b * t * c);
  std::vector<double> fut(b * tf * c);
  std::vector<double> mask(b * tf * c);
  batch.seg_sensor.resize(b * p);
  batch.seg_tid.resize(b * p);
  batch.seg_diw.resize(b * p);
  batch.fut_seg_sensor.resize(b * p_dec);
  batch.fut_seg_tid.resize(b * p_dec);
  batch.fut_seg_diw.resize(b * p_dec);

  for (int64_t i = 0; i < b; ++i) {
    const Sample s = materialize_sample(ds, index, index.at(sample_ids[i]));
    for (int64_t k = 0; k < t; ++k) {
      for (int64_t ch = 0; ch < c; ++ch) {
        hist[(i * t + k) * c + ch] = apply_norm(s.history[k * c + ch], stats, ch);
      }
    }
    for (int64_t k = 0; k < tf; ++k) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double raw = s.future[k * c + ch];
        fut[(i * tf + k) * c + ch] = raw;
        const bool keep = !mask_zeros || raw != 0.0;
        mask[(i * tf + k) * c + ch] = keep ? 1.0 : 0.0;
        if (keep) batch.mask_count += 1.0;
      }
    }
    for (int64_t j = 0; j < p; ++j) {
      batch.seg_sensor[i * p + j] = s.sensor_id;
      batch.seg_tid[i * p + j] = s.tid_history[j * seg];
      batch.seg_diw[i * p + j] = s.diw_history[j * seg];
    }
    for (int64_t j = 0; j < p_dec; ++j) {
      batch.fut_seg_sensor[i * p_dec + j] = s.sensor_id;
      batch.fut_seg_tid[i * p_dec + j] = s.tid_future[j * seg];
      batch.fut_seg_diw[i * p_dec + j] = s.diw_future[j * seg];
    }
  }
  batch.history_norm = Tensor::from_data({b, t, c}, std::move(hist));
  batch.future_raw = Tensor::from_data({b, tf, c}, std::move(fut));
  batch.mask = Tensor::from_data({b, tf, c}, std::move(mask));
  return batch;
}

}  // namespace pyramidcast
