// Command-line entry point: dataset synthesis, training, generation,
// evaluation, and the KV-cache benchmark. Exit codes: 0 success, 2 config
// error, 3 runtime/numeric error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "marv/experiments.hpp"
#include "marv/image_io.hpp"
#include "marv/inference.hpp"
#include "marv/runconfig.hpp"

namespace fs = std::filesystem;
using namespace marv;

namespace {

// MARV_OUT_ROOT anchors relative output paths when set.
fs::path resolve_out(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("MARV_OUT_ROOT")) return fs::path(root) / p;
  return p;
}

RunConfig load_config(const std::string& config_path,
                      const std::vector<std::string>& overrides) {
  RunConfig config = RunConfig::defaults();
  if (!config_path.empty()) config.apply_file(config_path);
  for (const auto& kv : overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got: " + kv);
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return config;
}

std::vector<VideoClip> load_corpus(const RunConfig& config, const std::string& data_dir) {
  if (!data_dir.empty()) return read_dataset(data_dir);
  return synth_toy_dataset(config.dataset_spec());
}

int cmd_synth(const RunConfig& config, const std::string& out_dir) {
  const auto spec = config.dataset_spec();
  const auto corpus = synth_toy_dataset(spec);
  const fs::path out = resolve_out(out_dir);
  write_dataset(corpus, spec, out.string());
  std::cout << "wrote " << corpus.size() << " clips; manifest "
            << (out / "manifest.jsonl").string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& config, const std::string& out_dir,
              const std::string& data_dir, const std::string& resume_path) {
  const ModelConfig cfg = config.model_config();
  const TrainConfig tc = config.train_config();
  const auto corpus = load_corpus(config, data_dir);
  const auto sched = make_schedule(cfg.train_timesteps, tc.denoise_steps);
  const auto bufs = make_buffers<float>(cfg);

  TrainState<float> state;
  if (!resume_path.empty()) {
    state = load_checkpoint(resume_path, cfg);
  } else {
    state = init_train_state<float>(cfg, tc);
  }
  state.train_config = tc;

  const int steps = tc.total_steps(corpus.size());
  const fs::path out = resolve_out(out_dir);
  fs::create_directories(out);
  for (int i = 0; i < steps; ++i) {
    const auto batch = make_batch<float>(corpus, cfg, tc, sched, state.rng);
    const double loss = train_step(state, bufs, sched, batch);
    if ((i + 1) % 50 == 0 || i + 1 == steps)
      std::cout << "step " << state.step << " loss " << loss << "\n";
  }
  const std::string ckpt = (out / "checkpoint.ckpt").string();
  save_checkpoint(state, ckpt);
  write_loss_history_csv(state.history, (out / "loss.csv").string(),
                         config.fingerprint());
  std::cout << "checkpoint " << ckpt << "\nloss history " << (out / "loss.csv").string()
            << "\n";
  return 0;
}

GenerationRequest request_from(const RunConfig& config, const std::string& condition_dir,
                               bool require_condition = true) {
  GenerationRequest request;
  const std::string mode = config.get("gen.mode");
  if (mode == "unconditional") request.mode = GenerationRequest::Mode::unconditional;
  else if (mode == "first_frame") request.mode = GenerationRequest::Mode::first_frame;
  else if (mode == "k_frame") request.mode = GenerationRequest::Mode::k_frame;
  else throw ConfigError("gen.mode must be unconditional|first_frame|k_frame");
  request.total_frames = config.get_int("gen.frames");
  request.interval = config.get_int("gen.interval");
  request.decode_steps = config.get_int("gen.decode_steps");
  request.denoise_steps = config.get_int("gen.denoise_steps");
  request.seed = config.get_u64("gen.seed");
  request.deterministic = config.get_bool("gen.deterministic");
  request.mtf_roles = config.get("train.mode") == "mtf";
  if (request.mode != GenerationRequest::Mode::unconditional) {
    if (condition_dir.empty() && require_condition)
      throw ConfigError("generate: --condition required for conditional modes");
    if (!condition_dir.empty()) request.conditioning = read_frames_dir(condition_dir);
  }
  return request;
}

int cmd_generate(const RunConfig& config, const std::string& out_dir,
                 const std::string& checkpoint_path, const std::string& condition_dir,
                 bool gif) {
  const ModelConfig cfg = config.model_config();
  if (checkpoint_path.empty()) throw ConfigError("generate: --checkpoint required");
  const auto state = load_checkpoint(checkpoint_path, cfg);
  const auto request = request_from(config, condition_dir);

  const auto result = rollout(state.ema, cfg, request, true);
  const fs::path out = resolve_out(out_dir);
  write_frames_png(result.video, out.string());
  if (gif) write_frames_gif(result.video, (out / "rollout.gif").string());
  write_trace_csv(result.trace, (out / "trace.csv").string(), config.fingerprint());
  std::cout << "generated " << result.video.num_frames << " frames under "
            << out.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& config, const std::string& out_dir,
             const std::string& experiment, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& seeds_csv) {
  const fs::path out = resolve_out(out_dir);
  fs::create_directories(out);

  if (experiment == "metrics") {
    if (checkpoint_path.empty()) throw ConfigError("eval metrics: --checkpoint required");
    const ModelConfig cfg = config.model_config();
    const TrainConfig tc = config.train_config();
    const auto state = load_checkpoint(checkpoint_path, cfg);
    const auto corpus = load_corpus(config, data_dir);

    std::ofstream csv(out / "metrics.csv");
    csv << "# config_fingerprint=" << config.fingerprint() << "\n";
    csv << "clip,frame,mse,psnr,coherence_error,trajectory_error\n";
    for (size_t c = 0; c < corpus.size(); ++c) {
      const VideoClip reference = sample_clip(corpus[c], tc.clip_len, 1, 0);
      GenerationRequest request = request_from(config, "", false);
      request.mode = GenerationRequest::Mode::first_frame;
      request.conditioning = reference;
      request.total_frames = tc.clip_len;
      request.seed = hash_mix(config.get_u64("gen.seed"), c);
      const auto result = rollout(state.ema, cfg, request, true);
      const auto report = frame_metrics(result.video, reference);
      for (size_t f = 0; f < report.mse.size(); ++f)
        csv << c << "," << f << "," << report.mse[f] << "," << report.psnr[f] << ","
            << report.temporal_coherence_error << "," << report.trajectory_error
            << "\n";
    }
    std::cout << "metrics " << (out / "metrics.csv").string() << "\n";
    return 0;
  }

  ExperimentConfig exp;
  exp.model = config.model_config();
  exp.train = config.train_config();
  exp.data = config.dataset_spec();
  exp.fingerprint = config.fingerprint();
  if (!seeds_csv.empty()) {
    exp.seeds.clear();
    std::string token;
    for (char ch : seeds_csv + ",") {
      if (ch == ',') {
        if (!token.empty()) exp.seeds.push_back(std::stoull(token));
        token.clear();
      } else {
        token.push_back(ch);
      }
    }
  }

  std::vector<CellResult> rows;
  if (experiment == "ctf_vs_mtf") {
    rows = run_ctf_vs_mtf(exp);
    const int favoring = seeds_favoring(rows, "ctf", "mtf");
    std::cout << "ctf lower coherence error in " << favoring << "/" << exp.seeds.size()
              << " seeds\n";
  } else if (experiment == "ablation") {
    rows = run_ablation(exp);
  } else {
    throw ConfigError("eval: --experiment must be ctf_vs_mtf|ablation|metrics");
  }
  write_results_csv(rows, (out / "results.csv").string(), exp.fingerprint);
  write_run_manifest(rows, exp, (out / "manifest.json").string());
  std::cout << "results " << (out / "results.csv").string() << "\n";
  return 0;
}

int cmd_bench(const RunConfig& config, const std::string& out_dir,
              const std::string& checkpoint_path) {
  const ModelConfig cfg = config.model_config();
  Parameters<float> params;
  if (!checkpoint_path.empty()) {
    params = load_checkpoint(checkpoint_path, cfg).ema;
  } else {
    params = init_params<float>(cfg, config.get_u64("train.seed"));
    std::cout << "no checkpoint given; timing randomly initialized weights\n";
  }
  GenerationRequest request = request_from(config, "", false);
  request.mode = GenerationRequest::Mode::unconditional;

  const auto rows = bench_generation(params, cfg, request);
  const fs::path out = resolve_out(out_dir);
  fs::create_directories(out);
  write_bench_csv(rows, (out / "bench.csv").string(), config.fingerprint());
  double cached = 0.0, uncached = 0.0;
  float diff = 0.0f;
  for (const auto& row : rows) {
    cached += row.cached_ms;
    uncached += row.uncached_ms;
    diff = std::max(diff, row.max_abs_diff);
  }
  std::cout << "cached total " << cached << " ms, uncached total " << uncached
            << " ms, max abs diff " << diff << "\n"
            << "bench " << (out / "bench.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked autoregressive video generation"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand name

  std::string config_path, out_dir = "out", data_dir, checkpoint_path, condition_dir;
  std::string experiment = "ctf_vs_mtf", seeds_csv, resume_path;
  bool gif = false;
  std::vector<std::string> overrides;

  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--set", overrides, "override config entries (key=value)");
  app.add_option("--out", out_dir, "output directory (MARV_OUT_ROOT anchors relative paths)");

  auto* synth = app.add_subcommand("synth", "synthesize a toy video dataset");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", data_dir, "dataset directory (default: synthesize)");
  train->add_option("--resume", resume_path, "checkpoint to resume from");
  std::string mode_flag;
  train->add_option("--mode", mode_flag, "ctf|mtf");
  int steps_flag = -1, seed_flag = -1;
  train->add_option("--steps", steps_flag, "training steps");
  train->add_option("--seed", seed_flag, "training seed");
  std::string dyn_interval_flag, dyn_noise_flag;
  train->add_option("--dynamic-interval", dyn_interval_flag, "on|off");
  train->add_option("--dynamic-noise", dyn_noise_flag, "on|off");

  auto* generate = app.add_subcommand("generate", "autoregressive rollout");
  generate->add_option("--checkpoint", checkpoint_path, "trained checkpoint");
  generate->add_option("--condition", condition_dir, "conditioning frames directory");
  int frames_flag = -1;
  generate->add_option("--frames", frames_flag, "total frames");
  int interval_flag = -1;
  generate->add_option("--interval", interval_flag, "generation interval");
  int gen_seed_flag = -1;
  generate->add_option("--seed", gen_seed_flag, "generation seed");
  bool deterministic_flag = false;
  generate->add_flag("--deterministic", deterministic_flag, "zero all sampling noise");
  generate->add_flag("--gif", gif, "also write an animated gif");

  auto* evaluate = app.add_subcommand("eval", "experiments and metrics");
  evaluate->add_option("--experiment", experiment, "ctf_vs_mtf|ablation|metrics");
  evaluate->add_option("--checkpoint", checkpoint_path, "checkpoint (metrics mode)");
  evaluate->add_option("--data", data_dir, "dataset directory");
  evaluate->add_option("--seeds", seeds_csv, "comma-separated experiment seeds");

  auto* bench = app.add_subcommand("bench", "kv-cache timing and equivalence");
  bench->add_option("--checkpoint", checkpoint_path, "checkpoint (optional)");
  int bench_frames_flag = -1;
  bench->add_option("--frames", bench_frames_flag, "frames to generate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig config = load_config(config_path, overrides);
    // flag overrides beat the file
    if (!mode_flag.empty()) config.set("train.mode", mode_flag);
    if (steps_flag >= 0) config.set("train.steps", std::to_string(steps_flag));
    if (seed_flag >= 0) config.set("train.seed", std::to_string(seed_flag));
    if (!dyn_interval_flag.empty())
      config.set("train.dynamic_interval", dyn_interval_flag);
    if (!dyn_noise_flag.empty()) config.set("train.dynamic_noise", dyn_noise_flag);
    if (frames_flag >= 0) config.set("gen.frames", std::to_string(frames_flag));
    if (interval_flag >= 0) config.set("gen.interval", std::to_string(interval_flag));
    if (gen_seed_flag >= 0) config.set("gen.seed", std::to_string(gen_seed_flag));
    if (deterministic_flag) config.set("gen.deterministic", "true");
    if (bench_frames_flag >= 0) config.set("gen.frames", std::to_string(bench_frames_flag));

    if (synth->parsed()) return cmd_synth(config, out_dir);
    if (train->parsed()) return cmd_train(config, out_dir, data_dir, resume_path);
    if (generate->parsed())
      return cmd_generate(config, out_dir, checkpoint_path, condition_dir, gif);
    if (evaluate->parsed())
      return cmd_eval(config, out_dir, experiment, checkpoint_path, data_dir, seeds_csv);
    if (bench->parsed()) return cmd_bench(config, out_dir, checkpoint_path);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ManifestError& e) {
    std::cerr << "manifest error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
