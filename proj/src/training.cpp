#include "marv/training.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace marv {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'R', 'V', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json config_json(const ModelConfig& c) {
  return {{"depth", c.depth},
          {"hidden", c.hidden},
          {"mlp", c.mlp},
          {"heads", c.heads},
          {"patch", c.patch},
          {"frame_h", c.frame_h},
          {"frame_w", c.frame_w},
          {"max_frames", c.max_frames},
          {"interval_vocab", c.interval_vocab},
          {"noise_vocab", c.noise_vocab},
          {"head_width", c.head_width},
          {"head_blocks", c.head_blocks},
          {"train_timesteps", c.train_timesteps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.depth = j.at("depth");
  c.hidden = j.at("hidden");
  c.mlp = j.at("mlp");
  c.heads = j.at("heads");
  c.patch = j.at("patch");
  c.frame_h = j.at("frame_h");
  c.frame_w = j.at("frame_w");
  c.max_frames = j.at("max_frames");
  c.interval_vocab = j.at("interval_vocab");
  c.noise_vocab = j.at("noise_vocab");
  c.head_width = j.at("head_width");
  c.head_blocks = j.at("head_blocks");
  c.train_timesteps = j.at("train_timesteps");
  return c;
}

nlohmann::json train_config_json(const TrainConfig& t) {
  return {{"mode", t.mode},
          {"dynamic_interval", t.dynamic_interval},
          {"dynamic_noise", t.dynamic_noise},
          {"lr", t.lr},
          {"warmup_steps", t.warmup_steps},
          {"weight_decay", t.weight_decay},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"batch_size", t.batch_size},
          {"steps", t.steps},
          {"epochs", t.epochs},
          {"ema_decay", t.ema_decay},
          {"clip_len", t.clip_len},
          {"mask_ratio_lo", t.mask_ratio_lo},
          {"mask_ratio_hi", t.mask_ratio_hi},
          {"noise_sigma_scale", t.noise_sigma_scale},
          {"max_resample", t.max_resample},
          {"denoise_steps", t.denoise_steps},
          {"seed", t.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.mode = j.at("mode");
  t.dynamic_interval = j.at("dynamic_interval");
  t.dynamic_noise = j.at("dynamic_noise");
  t.lr = j.at("lr");
  t.warmup_steps = j.at("warmup_steps");
  t.weight_decay = j.at("weight_decay");
  t.adam_beta1 = j.at("adam_beta1");
  t.adam_beta2 = j.at("adam_beta2");
  t.adam_eps = j.at("adam_eps");
  t.batch_size = j.at("batch_size");
  t.steps = j.at("steps");
  t.epochs = j.at("epochs");
  t.ema_decay = j.at("ema_decay");
  t.clip_len = j.at("clip_len");
  t.mask_ratio_lo = j.at("mask_ratio_lo");
  t.mask_ratio_hi = j.at("mask_ratio_hi");
  t.noise_sigma_scale = j.at("noise_sigma_scale");
  t.max_resample = j.at("max_resample");
  t.denoise_steps = j.at("denoise_steps");
  t.seed = j.at("seed");
  return t;
}

char hex_digit(std::uint64_t v) { return "0123456789abcdef"[v & 0xf]; }

std::string u64_hex(std::uint64_t v) {
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = hex_digit(v);
    v >>= 4;
  }
  return s;
}

std::uint64_t hex_u64(const std::string& s) {
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw ManifestError("checkpoint: bad hex rng state");
  }
  return v;
}

}  // namespace

void save_checkpoint(const TrainState<float>& state, const std::string& path) {
  nlohmann::json meta;
  meta["config"] = config_json(state.model_config);
  meta["train"] = train_config_json(state.train_config);
  meta["step"] = state.step;
  nlohmann::json rng_words = nlohmann::json::array();
  for (auto w : state.rng.state()) rng_words.push_back(u64_hex(w));
  meta["rng"] = rng_words;

  std::vector<float> payload;
  nlohmann::json tensors = nlohmann::json::array();
  auto dump_group = [&](const std::string& group, const Parameters<float>& p) {
    for_each_param(p, [&](const std::string& name, const MatF& mat) {
      nlohmann::json entry;
      entry["name"] = group + "/" + name;
      entry["rows"] = mat.rows();
      entry["cols"] = mat.cols();
      entry["dtype"] = "f32";
      entry["offset"] = payload.size() * sizeof(float);
      tensors.push_back(entry);
      payload.insert(payload.end(), mat.data(), mat.data() + mat.size());
    });
  };
  dump_group("params", state.params);
  dump_group("ema", state.ema);
  dump_group("adam_m", state.adam_m);
  dump_group("adam_v", state.adam_v);
  meta["tensors"] = tensors;

  const std::string json = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t json_len = json.size();
  out.write(reinterpret_cast<const char*>(&json_len), sizeof(json_len));
  out.write(json.data(), static_cast<std::streamsize>(json.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw IoError("short write to checkpoint " + path);
}

TrainState<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t json_len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&json_len), sizeof(json_len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0 || version != kVersion)
    throw ManifestError("not a checkpoint file: " + path);
  std::string json(json_len, '\0');
  in.read(json.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw ManifestError("truncated checkpoint header: " + path);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  if (raw.size() % sizeof(float) != 0)
    throw ManifestError("checkpoint payload not float-aligned: " + path);
  std::vector<float> payload(raw.size() / sizeof(float));
  std::memcpy(payload.data(), raw.data(), raw.size());

  const auto meta = nlohmann::json::parse(json);
  TrainState<float> state;
  state.model_config = config_from_json(meta.at("config"));
  state.model_config.validate();
  state.train_config = train_config_from_json(meta.at("train"));
  state.step = meta.at("step");
  std::array<std::uint64_t, 4> words{};
  for (size_t i = 0; i < 4; ++i)
    words[i] = hex_u64(meta.at("rng").at(i).get<std::string>());
  state.rng.set_state(words);

  std::map<std::string, nlohmann::json> entries;
  for (const auto& t : meta.at("tensors")) entries[t.at("name")] = t;

  state.params = make_empty_params<float>(state.model_config);
  state.ema = make_empty_params<float>(state.model_config);
  state.adam_m = make_empty_params<float>(state.model_config);
  state.adam_v = make_empty_params<float>(state.model_config);
  auto load_group = [&](const std::string& group, Parameters<float>& p) {
    for_each_param(p, [&](const std::string& name, MatF& mat) {
      const auto it = entries.find(group + "/" + name);
      if (it == entries.end())
        throw ManifestError("checkpoint missing tensor " + group + "/" + name);
      const auto& e = it->second;
      if (e.at("rows") != mat.rows() || e.at("cols") != mat.cols() ||
          e.at("dtype") != "f32")
        throw ManifestError("checkpoint tensor " + group + "/" + name +
                            " disagrees with model config");
      const std::uint64_t offset = e.at("offset");
      if (offset % sizeof(float) != 0 ||
          offset / sizeof(float) + static_cast<std::uint64_t>(mat.size()) > payload.size())
        throw ManifestError("checkpoint tensor " + group + "/" + name +
                            " outside payload");
      std::memcpy(mat.data(), payload.data() + offset / sizeof(float),
                  static_cast<size_t>(mat.size()) * sizeof(float));
    });
  };
  load_group("params", state.params);
  load_group("ema", state.ema);
  load_group("adam_m", state.adam_m);
  load_group("adam_v", state.adam_v);
  return state;
}

TrainState<float> load_checkpoint(const std::string& path, const ModelConfig& expect) {
  TrainState<float> state = load_checkpoint(path);
  if (!(state.model_config == expect))
    throw ManifestError("checkpoint model config mismatch: " + path);
  return state;
}

void write_loss_history_csv(const std::vector<LossRow>& history,
                            const std::string& path,
                            const std::string& fingerprint) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# config_fingerprint=" << fingerprint << "\n";
  out << "step,loss,lr,grad_norm\n";
  char line[160];
  for (const auto& row : history) {
    std::snprintf(line, sizeof(line), "%ld,%.9g,%.9g,%.9g\n", row.step, row.loss,
                  row.lr, row.grad_norm);
    out << line;
  }
}

}  // namespace marv
