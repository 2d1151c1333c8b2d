#include "marv/experiments.hpp"

#include <fstream>
#include <map>

#include "json.hpp"

namespace marv {

CellResult run_cell(const ExperimentConfig& exp, const std::string& mode,
                    bool dynamic_interval, bool dynamic_noise, std::uint64_t seed) {
  ModelConfig cfg = exp.model;
  TrainConfig tc = exp.train;
  tc.mode = mode;
  tc.dynamic_interval = dynamic_interval;
  tc.dynamic_noise = dynamic_noise;
  tc.seed = seed;
  tc.validate();

  const auto corpus = synth_toy_dataset(exp.data);
  const int held = std::min(exp.held_out_clips, static_cast<int>(corpus.size()) - 1);
  if (held < 1) throw ConfigError("experiment: corpus too small for a held-out split");
  const std::vector<VideoClip> train_split(corpus.begin(), corpus.end() - held);
  const std::vector<VideoClip> eval_split(corpus.end() - held, corpus.end());

  const auto sched = make_schedule(cfg.train_timesteps, tc.denoise_steps);
  const auto bufs = make_buffers<float>(cfg);
  auto state = init_train_state<float>(cfg, tc);
  const int steps = tc.total_steps(train_split.size());
  double last_loss = 0.0;
  for (int i = 0; i < steps; ++i) {
    const auto batch = make_batch<float>(train_split, cfg, tc, sched, state.rng);
    last_loss = train_step(state, bufs, sched, batch);
  }

  // first-frame conditional prediction on held-out clips, fixed protocol
  const int eval_len = exp.eval_clip_len > 0 ? exp.eval_clip_len : tc.clip_len;
  double coherence = 0.0, mse = 0.0, trajectory = 0.0;
  for (size_t c = 0; c < eval_split.size(); ++c) {
    const VideoClip reference =
        sample_clip(eval_split[c], eval_len, exp.eval_interval, 0);
    GenerationRequest request;
    request.mode = GenerationRequest::Mode::first_frame;
    request.conditioning = reference;
    request.total_frames = eval_len;
    request.interval = exp.eval_interval;
    request.decode_steps = exp.gen_decode_steps;
    request.denoise_steps = exp.gen_denoise_steps;
    request.seed = hash_mix(seed, static_cast<std::uint64_t>(c) + 1000);
    request.mtf_roles = mode == "mtf";
    const auto result = rollout(state.ema, cfg, request, true);
    const auto report = frame_metrics(result.video, reference);
    coherence += report.temporal_coherence_error;
    mse += report.mean_mse();
    trajectory += report.trajectory_error;
  }
  const double n = static_cast<double>(eval_split.size());

  CellResult row;
  row.mode = mode;
  row.dynamic_interval = dynamic_interval;
  row.dynamic_noise = dynamic_noise;
  row.seed = seed;
  row.coherence_error = coherence / n;
  row.mean_mse = mse / n;
  row.trajectory_error = trajectory / n;
  row.final_train_loss = last_loss;
  return row;
}

std::vector<CellResult> run_ctf_vs_mtf(const ExperimentConfig& exp) {
  std::vector<CellResult> rows;
  for (const auto seed : exp.seeds) {
    rows.push_back(run_cell(exp, "ctf", true, true, seed));
    rows.push_back(run_cell(exp, "mtf", true, true, seed));
  }
  return rows;
}

std::vector<CellResult> run_ablation(const ExperimentConfig& exp) {
  std::vector<CellResult> rows;
  for (const auto seed : exp.seeds) {
    for (const bool interval : {true, false}) {
      for (const bool noise : {true, false}) {
        rows.push_back(run_cell(exp, "ctf", interval, noise, seed));
      }
    }
  }
  return rows;
}

int seeds_favoring(const std::vector<CellResult>& rows, const std::string& mode_a,
                   const std::string& mode_b) {
  std::map<std::uint64_t, std::pair<double, double>> by_seed;
  for (const auto& row : rows) {
    if (row.mode == mode_a) by_seed[row.seed].first = row.coherence_error;
    if (row.mode == mode_b) by_seed[row.seed].second = row.coherence_error;
  }
  int favoring = 0;
  for (const auto& [seed, pair] : by_seed)
    if (pair.first <= pair.second) ++favoring;
  return favoring;
}

void write_results_csv(const std::vector<CellResult>& rows, const std::string& path,
                       const std::string& fingerprint) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# config_fingerprint=" << fingerprint << "\n";
  out << "mode,dynamic_interval,dynamic_noise,seed,coherence_error,mean_mse,"
         "trajectory_error,final_train_loss\n";
  char line[256];
  for (const auto& row : rows) {
    std::snprintf(line, sizeof(line), "%s,%d,%d,%llu,%.9g,%.9g,%.9g,%.9g\n",
                  row.mode.c_str(), row.dynamic_interval ? 1 : 0,
                  row.dynamic_noise ? 1 : 0,
                  static_cast<unsigned long long>(row.seed), row.coherence_error,
                  row.mean_mse, row.trajectory_error, row.final_train_loss);
    out << line;
  }
}

void write_run_manifest(const std::vector<CellResult>& rows,
                        const ExperimentConfig& exp, const std::string& path) {
  nlohmann::json manifest;
  manifest["fingerprint"] = exp.fingerprint;
  manifest["seeds"] = exp.seeds;
  manifest["model"] = {{"depth", exp.model.depth},
                       {"hidden", exp.model.hidden},
                       {"heads", exp.model.heads},
                       {"frame_h", exp.model.frame_h},
                       {"frame_w", exp.model.frame_w}};
  manifest["train"] = {{"steps", exp.train.steps},
                       {"batch_size", exp.train.batch_size},
                       {"clip_len", exp.train.clip_len},
                       {"lr", exp.train.lr}};
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& row : rows) {
    cells.push_back({{"mode", row.mode},
                     {"dynamic_interval", row.dynamic_interval},
                     {"dynamic_noise", row.dynamic_noise},
                     {"seed", row.seed},
                     {"coherence_error", row.coherence_error},
                     {"mean_mse", row.mean_mse},
                     {"trajectory_error", row.trajectory_error}});
  }
  manifest["cells"] = cells;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << manifest.dump(2) << "\n";
}

}  // namespace marv
