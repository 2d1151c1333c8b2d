#pragma once

#include <string>
#include <vector>

#include "marv/inference.hpp"
#include "marv/metrics.hpp"
#include "marv/training.hpp"

namespace marv {

// Shared protocol for the teacher-forcing comparison and the training-strategy
// ablation: train under identical budgets, then score first-frame conditional
// prediction on held-out clips.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  ToyDatasetSpec data;
  int held_out_clips = 4;     // taken from the end of the corpus
  int eval_clip_len = 0;      // defaults to train.clip_len
  int eval_interval = 1;
  int gen_decode_steps = 8;
  int gen_denoise_steps = 40;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string fingerprint;
};

struct CellResult {
  std::string mode;
  bool dynamic_interval = true;
  bool dynamic_noise = true;
  std::uint64_t seed = 0;
  double coherence_error = 0.0;
  double mean_mse = 0.0;
  double trajectory_error = 0.0;
  double final_train_loss = 0.0;
};

// Trains one cell and evaluates it; deterministic in (config, seed).
CellResult run_cell(const ExperimentConfig& exp, const std::string& mode,
                    bool dynamic_interval, bool dynamic_noise, std::uint64_t seed);

// ctf vs mtf with both exposure-bias strategies on, across seeds.
std::vector<CellResult> run_ctf_vs_mtf(const ExperimentConfig& exp);

// 2x2 grid over {dynamic_interval, dynamic_noise} for ctf, across seeds.
std::vector<CellResult> run_ablation(const ExperimentConfig& exp);

// mode -> mean coherence over seeds; returns how many seeds favor `a`.
int seeds_favoring(const std::vector<CellResult>& rows, const std::string& mode_a,
                   const std::string& mode_b);

void write_results_csv(const std::vector<CellResult>& rows, const std::string& path,
                       const std::string& fingerprint);
void write_run_manifest(const std::vector<CellResult>& rows,
                        const ExperimentConfig& exp, const std::string& path);

}  // namespace marv
