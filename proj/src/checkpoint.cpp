#include "pyramidcast/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "pyramidcast/errors.hpp"
#include "pyramidcast/sha256.hpp"

namespace pyramidcast {

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"history_len", c.history_len},
      {"future_len", c.future_len},
      {"segment_len", c.segment_len},
      {"channels", c.channels},
      {"d", c.d},
      {"d_spatial", c.d_spatial},
      {"d_tid", c.d_tid},
      {"d_diw", c.d_diw},
      {"num_blocks", c.num_blocks},
      {"window_size", c.window_size},
      {"num_heads", c.num_heads},
      {"mlp_ratio", c.mlp_ratio},
      {"d_dec", c.d_dec},
      {"dec_heads", c.dec_heads},
      {"merge_projection", c.merge_projection},
      {"residual_refine", c.residual_refine},
      {"scale_order_coarse_to_fine", c.scale_order_coarse_to_fine},
      {"variant", c.variant_name},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.history_len = j.at("history_len").get<int64_t>();
  c.future_len = j.at("future_len").get<int64_t>();
  c.segment_len = j.at("segment_len").get<int64_t>();
  c.channels = j.at("channels").get<int64_t>();
  c.d = j.at("d").get<int64_t>();
  c.d_spatial = j.at("d_spatial").get<int64_t>();
  c.d_tid = j.at("d_tid").get<int64_t>();
  c.d_diw = j.at("d_diw").get<int64_t>();
  c.num_blocks = j.at("num_blocks").get<int64_t>();
  c.window_size = j.at("window_size").get<int64_t>();
  c.num_heads = j.at("num_heads").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.d_dec = j.at("d_dec").get<int64_t>();
  c.dec_heads = j.at("dec_heads").get<int64_t>();
  c.merge_projection = j.at("merge_projection").get<bool>();
  c.residual_refine = j.at("residual_refine").get<bool>();
  c.scale_order_coarse_to_fine = j.at("scale_order_coarse_to_fine").get<bool>();
  c.variant_name = j.at("variant").get<std::string>();
  return c;
}

void append_le64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_le64(const std::string& in, size_t offset) {
  uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) {
    bits = (bits << 8) | static_cast<uint8_t>(in[offset + static_cast<size_t>(i)]);
  }
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

std::string save_checkpoint(const Model& model, int stage,
                            const std::string& dataset_name, bool mask_zeros,
                            const std::string& stem,
                            const std::string& encoder_payload_sha256) {
  if (stage != 1 && stage != 2) throw ConfigError("checkpoint stage must be 1 or 2");

  std::string payload;
  nlohmann::json params_json = nlohmann::json::array();
  for (const Parameter& p : model.params().items()) {
    if (stage == 1 && p.stage != 1) continue;
    nlohmann::json entry = {{"name", p.name}, {"shape", p.value.shape()},
                            {"stage", p.stage}};
    params_json.push_back(entry);
    for (double v : p.value.data()) append_le64(payload, v);
  }

  {
    std::ofstream out(stem + ".bin", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + stem + ".bin for writing");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("failed writing " + stem + ".bin");
  }

  const std::string payload_hash = sha256_hex(payload.data(), payload.size());
  nlohmann::json manifest = {
      {"format", "pyramidcast-checkpoint"},
      {"version", 1},
      {"stage", stage},
      {"model", config_to_json(model.config())},
      {"dataset_name", dataset_name},
      {"num_sensors", model.num_sensors()},
      {"slots_per_day", model.slots_per_day()},
      {"mask_zeros", mask_zeros},
      {"norm_mean", model.norm_stats().mean},
      {"norm_std", model.norm_stats().stddev},
      {"params", params_json},
      {"payload_sha256", payload_hash},
  };
  if (stage == 2) manifest["encoder_payload_sha256"] = encoder_payload_sha256;

  std::ofstream out(stem + ".json", std::ios::trunc);
  if (!out) throw DataError("cannot open " + stem + ".json for writing");
  out << manifest.dump(2) << "\n";
  return payload_hash;
}

CheckpointData load_checkpoint(const std::string& stem) {
  std::ifstream jf(stem + ".json");
  if (!jf) throw DataError("cannot open checkpoint manifest " + stem + ".json");
  nlohmann::json manifest;
  try {
    jf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest " + stem + ".json: " + e.what());
  }

  CheckpointData ckpt;
  try {
    if (manifest.at("format").get<std::string>() != "pyramidcast-checkpoint") {
      throw DataError("not a checkpoint manifest: " + stem + ".json");
    }
    ckpt.stage = manifest.at("stage").get<int>();
    ckpt.config = config_from_json(manifest.at("model"));
    ckpt.dataset_name = manifest.at("dataset_name").get<std::string>();
    ckpt.num_sensors = manifest.at("num_sensors").get<int64_t>();
    ckpt.slots_per_day = manifest.at("slots_per_day").get<int64_t>();
    ckpt.mask_zeros = manifest.at("mask_zeros").get<bool>();
    ckpt.stats.mean = manifest.at("norm_mean").get<std::vector<double>>();
    ckpt.stats.stddev = manifest.at("norm_std").get<std::vector<double>>();
    ckpt.payload_sha256 = manifest.at("payload_sha256").get<std::string>();
    ckpt.encoder_payload_sha256 = manifest.value("encoder_payload_sha256", "");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest " + stem + ".json missing keys: " + e.what());
  }

  std::ifstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw DataError("cannot open checkpoint payload " + stem + ".bin");
  std::string payload((std::istreambuf_iterator<char>(bf)),
                      std::istreambuf_iterator<char>());
  const std::string digest = sha256_hex(payload.data(), payload.size());
  if (digest != ckpt.payload_sha256) {
    throw DataError("checkpoint payload hash mismatch for " + stem +
                    ".bin: manifest records " + ckpt.payload_sha256 +
                    " but payload hashes to " + digest);
  }

  size_t offset = 0;
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const int64_t count = shape_numel(shape);
    if (offset + static_cast<size_t>(count) * 8 > payload.size()) {
      throw DataError("checkpoint payload " + stem + ".bin truncated at byte " +
                      std::to_string(payload.size()) + " while reading " + name);
    }
    std::vector<double> data(count);
    for (int64_t i = 0; i < count; ++i) {
      data[i] = read_le64(payload, offset + static_cast<size_t>(i) * 8);
    }
    offset += static_cast<size_t>(count) * 8;
    ckpt.param_order.push_back(name);
    ckpt.params[name] = {shape, std::move(data)};
  }
  if (offset != payload.size()) {
    throw DataError("checkpoint payload " + stem + ".bin has " +
                    std::to_string(payload.size() - offset) + " trailing bytes");
  }
  return ckpt;
}

void load_params_into(Model& model, const CheckpointData& ckpt) {
  for (const auto& name : ckpt.param_order) {
    const auto& [shape, data] = ckpt.params.at(name);
    Parameter& p = model.params().at(name);
    if (p.value.shape() != shape) {
      throw DataError("checkpoint parameter " + name + " has shape " +
                      shape_str(shape) + " but model expects " +
                      shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    std::copy(data.begin(), data.end(), dst.begin());
  }
}

Model model_from_checkpoint(const CheckpointData& ckpt, uint64_t seed) {
  Model model(ckpt.config, ckpt.num_sensors, ckpt.slots_per_day, ckpt.stats, seed);
  load_params_into(model, ckpt);
  return model;
}

}  // namespace pyramidcast
