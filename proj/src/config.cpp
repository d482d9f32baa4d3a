#include "pyramidcast/config.hpp"

#include <fstream>
#include <sstream>

#include "pyramidcast/errors.hpp"

namespace pyramidcast {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + key + ": expected boolean, got '" + v + "'");
}

std::vector<int64_t> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_int(key, item));
  }
  return out;
}

std::string int_list_to_string(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    os << v[i];
  }
  return os.str();
}

std::string double_to_string(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void OptimConfig::validate() const {
  if (lr <= 0 || weight_decay < 0 || batch_size < 1 || gamma <= 0 ||
      grad_clip_norm <= 0 || max_epochs < 1) {
    throw ConfigError("optimizer settings must be positive");
  }
  for (size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) {
      throw ConfigError("milestones must be strictly increasing");
    }
  }
}

RunConfig run_config_from_map(const std::map<std::string, std::string>& kv,
                              RunConfig base) {
  RunConfig c = std::move(base);
  for (const auto& [key, raw] : kv) {
    const std::string v = trim(raw);
    if (key == "dataset") c.dataset = v;
    else if (key == "split_train") c.split_train = to_double(key, v);
    else if (key == "split_val") c.split_val = to_double(key, v);
    else if (key == "split_test") c.split_test = to_double(key, v);
    else if (key == "variant") c.model.variant_name = v;
    else if (key == "seed") c.seed = static_cast<uint64_t>(to_int(key, v));
    else if (key == "out_dir") c.out_dir = v;
    else if (key == "history_len") c.model.history_len = to_int(key, v);
    else if (key == "future_len") c.model.future_len = to_int(key, v);
    else if (key == "segment_len") c.model.segment_len = to_int(key, v);
    else if (key == "channels") c.model.channels = to_int(key, v);
    else if (key == "d") c.model.d = to_int(key, v);
    else if (key == "d_spatial") c.model.d_spatial = to_int(key, v);
    else if (key == "d_tid") c.model.d_tid = to_int(key, v);
    else if (key == "d_diw") c.model.d_diw = to_int(key, v);
    else if (key == "blocks") c.model.num_blocks = to_int(key, v);
    else if (key == "window") c.model.window_size = to_int(key, v);
    else if (key == "heads") c.model.num_heads = to_int(key, v);
    else if (key == "mlp_ratio") c.model.mlp_ratio = to_double(key, v);
    else if (key == "d_dec") c.model.d_dec = to_int(key, v);
    else if (key == "dec_heads") c.model.dec_heads = to_int(key, v);
    else if (key == "merge_projection") c.model.merge_projection = to_bool(key, v);
    else if (key == "residual_refine") c.model.residual_refine = to_bool(key, v);
    else if (key == "scale_order") {
      if (v == "coarse_to_fine") c.model.scale_order_coarse_to_fine = true;
      else if (v == "fine_to_coarse") c.model.scale_order_coarse_to_fine = false;
      else throw ConfigError("scale_order must be coarse_to_fine or fine_to_coarse");
    }
    else if (key == "lr") c.optim.lr = to_double(key, v);
    else if (key == "weight_decay") c.optim.weight_decay = to_double(key, v);
    else if (key == "batch_size") c.optim.batch_size = to_int(key, v);
    else if (key == "milestones") c.optim.milestones = to_int_list(key, v);
    else if (key == "gamma") c.optim.gamma = to_double(key, v);
    else if (key == "grad_clip") c.optim.grad_clip_norm = to_double(key, v);
    else if (key == "max_epochs") c.optim.max_epochs = to_int(key, v);
    else if (key == "adam_decoupled") c.optim.decoupled_weight_decay = to_bool(key, v);
    else if (key == "horizons") c.horizons = to_int_list(key, v);
    else if (key == "mask_zeros") c.mask_zeros = to_bool(key, v);
    else if (key == "cumulative_horizons") c.cumulative_horizons = to_bool(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

std::map<std::string, std::string> run_config_to_map(const RunConfig& c) {
  std::map<std::string, std::string> kv;
  kv["dataset"] = c.dataset;
  kv["split_train"] = double_to_string(c.split_train);
  kv["split_val"] = double_to_string(c.split_val);
  kv["split_test"] = double_to_string(c.split_test);
  kv["variant"] = c.model.variant_name;
  kv["seed"] = std::to_string(c.seed);
  kv["out_dir"] = c.out_dir;
  kv["history_len"] = std::to_string(c.model.history_len);
  kv["future_len"] = std::to_string(c.model.future_len);
  kv["segment_len"] = std::to_string(c.model.segment_len);
  kv["channels"] = std::to_string(c.model.channels);
  kv["d"] = std::to_string(c.model.d);
  kv["d_spatial"] = std::to_string(c.model.d_spatial);
  kv["d_tid"] = std::to_string(c.model.d_tid);
  kv["d_diw"] = std::to_string(c.model.d_diw);
  kv["blocks"] = std::to_string(c.model.num_blocks);
  kv["window"] = std::to_string(c.model.window_size);
  kv["heads"] = std::to_string(c.model.num_heads);
  kv["mlp_ratio"] = double_to_string(c.model.mlp_ratio);
  kv["d_dec"] = std::to_string(c.model.d_dec);
  kv["dec_heads"] = std::to_string(c.model.dec_heads);
  kv["merge_projection"] = c.model.merge_projection ? "true" : "false";
  kv["residual_refine"] = c.model.residual_refine ? "true" : "false";
  kv["scale_order"] =
      c.model.scale_order_coarse_to_fine ? "coarse_to_fine" : "fine_to_coarse";
  kv["lr"] = double_to_string(c.optim.lr);
  kv["weight_decay"] = double_to_string(c.optim.weight_decay);
  kv["batch_size"] = std::to_string(c.optim.batch_size);
  kv["milestones"] = int_list_to_string(c.optim.milestones);
  kv["gamma"] = double_to_string(c.optim.gamma);
  kv["grad_clip"] = double_to_string(c.optim.grad_clip_norm);
  kv["max_epochs"] = std::to_string(c.optim.max_epochs);
  kv["adam_decoupled"] = c.optim.decoupled_weight_decay ? "true" : "false";
  kv["horizons"] = int_list_to_string(c.horizons);
  kv["mask_zeros"] = c.mask_zeros ? "true" : "false";
  kv["cumulative_horizons"] = c.cumulative_horizons ? "true" : "false";
  return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int64_t line_num = 0;
  while (std::getline(in, line)) {
    ++line_num;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config file " + path + " line " + std::to_string(line_num) +
                        ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_map(parse_kv_file(path));
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open config file " + path + " for writing");
  for (const auto& [k, v] : run_config_to_map(cfg)) out << k << "=" << v << "\n";
}

}  // namespace pyramidcast
