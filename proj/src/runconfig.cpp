#include "marv/runconfig.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace marv {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig config;
  auto& v = config.values_;
  // model
  v["model.depth"] = "4";
  v["model.hidden"] = "256";
  v["model.mlp"] = "1024";
  v["model.heads"] = "8";
  v["model.patch"] = "2";
  v["model.frame_h"] = "16";
  v["model.frame_w"] = "16";
  v["model.max_frames"] = "16";
  v["model.interval_vocab"] = "25";
  v["model.noise_vocab"] = "5";
  v["model.head_width"] = "256";
  v["model.head_blocks"] = "3";
  v["model.train_timesteps"] = "1000";
  // training
  v["train.mode"] = "ctf";
  v["train.dynamic_interval"] = "true";
  v["train.dynamic_noise"] = "true";
  v["train.lr"] = "1e-4";
  v["train.warmup_steps"] = "500";
  v["train.weight_decay"] = "0.02";
  v["train.batch_size"] = "16";
  v["train.steps"] = "2000";
  v["train.epochs"] = "0";
  v["train.ema_decay"] = "0.99";
  v["train.clip_len"] = "16";
  v["train.mask_ratio_lo"] = "0.7";
  v["train.mask_ratio_hi"] = "1.0";
  v["train.noise_sigma_scale"] = "0.07";
  v["train.denoise_steps"] = "100";
  v["train.seed"] = "0";
  // dataset
  v["data.num_videos"] = "8";
  v["data.video_length"] = "400";
  v["data.min_shapes"] = "1";
  v["data.max_shapes"] = "3";
  v["data.min_radius"] = "1.5";
  v["data.max_radius"] = "3.0";
  v["data.max_speed"] = "1.5";
  v["data.seed"] = "0";
  // generation
  v["gen.mode"] = "first_frame";
  v["gen.frames"] = "16";
  v["gen.interval"] = "1";
  v["gen.decode_steps"] = "64";
  v["gen.denoise_steps"] = "100";
  v["gen.seed"] = "0";
  v["gen.deterministic"] = "false";
  return config;
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
    set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

int RunConfig::get_int(const std::string& key) const {
  try {
    return std::stoi(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " is not an integer: " + get(key));
  }
}

double RunConfig::get_double(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " is not a number: " + get(key));
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key " + key + " is not a boolean: " + v);
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  try {
    return std::stoull(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " is not an unsigned integer: " + get(key));
  }
}

std::string RunConfig::canonical() const {
  std::string out;  // std::map iterates in key order already
  for (const auto& [key, value] : values_) {
    out += key;
    out += '=';
    out += value;
    out += '\n';
  }
  return out;
}

std::string RunConfig::fingerprint() const {
  std::uint64_t h = fnv1a(canonical());
  std::string hex(16, '0');
  for (int i = 15; i >= 0; --i) {
    hex[static_cast<size_t>(i)] = "0123456789abcdef"[h & 0xf];
    h >>= 4;
  }
  return hex;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig cfg;
  cfg.depth = get_int("model.depth");
  cfg.hidden = get_int("model.hidden");
  cfg.mlp = get_int("model.mlp");
  cfg.heads = get_int("model.heads");
  cfg.patch = get_int("model.patch");
  cfg.frame_h = get_int("model.frame_h");
  cfg.frame_w = get_int("model.frame_w");
  cfg.max_frames = get_int("model.max_frames");
  cfg.interval_vocab = get_int("model.interval_vocab");
  cfg.noise_vocab = get_int("model.noise_vocab");
  cfg.head_width = get_int("model.head_width");
  cfg.head_blocks = get_int("model.head_blocks");
  cfg.train_timesteps = get_int("model.train_timesteps");
  cfg.validate();
  return cfg;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig tc;
  tc.mode = get("train.mode");
  tc.dynamic_interval = get_bool("train.dynamic_interval");
  tc.dynamic_noise = get_bool("train.dynamic_noise");
  tc.lr = get_double("train.lr");
  tc.warmup_steps = get_int("train.warmup_steps");
  tc.weight_decay = get_double("train.weight_decay");
  tc.batch_size = get_int("train.batch_size");
  tc.steps = get_int("train.steps");
  tc.epochs = get_int("train.epochs");
  tc.ema_decay = get_double("train.ema_decay");
  tc.clip_len = get_int("train.clip_len");
  tc.mask_ratio_lo = get_double("train.mask_ratio_lo");
  tc.mask_ratio_hi = get_double("train.mask_ratio_hi");
  tc.noise_sigma_scale = get_double("train.noise_sigma_scale");
  tc.denoise_steps = get_int("train.denoise_steps");
  tc.seed = get_u64("train.seed");
  tc.validate();
  return tc;
}

ToyDatasetSpec RunConfig::dataset_spec() const {
  ToyDatasetSpec spec;
  spec.num_videos = get_int("data.num_videos");
  spec.video_length = get_int("data.video_length");
  spec.height = get_int("model.frame_h");
  spec.width = get_int("model.frame_w");
  spec.patch = get_int("model.patch");
  spec.min_shapes = get_int("data.min_shapes");
  spec.max_shapes = get_int("data.max_shapes");
  spec.min_radius = get_double("data.min_radius");
  spec.max_radius = get_double("data.max_radius");
  spec.max_speed = get_double("data.max_speed");
  spec.seed = get_u64("data.seed");
  spec.validate();
  return spec;
}

}  // namespace marv
