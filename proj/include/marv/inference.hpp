#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "marv/data.hpp"
#include "marv/diffusion.hpp"
#include "marv/model.hpp"

namespace marv {

struct GenerationRequest {
  enum class Mode : std::uint8_t { unconditional, first_frame, k_frame };
  Mode mode = Mode::first_frame;
  VideoClip conditioning;  // empty for unconditional
  int total_frames = 16;
  int interval = 1;
  int decode_steps = 64;    // masked prediction steps per frame
  int denoise_steps = 100;  // diffusion head steps
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool mtf_roles = false;  // commit completed frames masked-role (mtf models)

  int conditioning_frames() const {
    switch (mode) {
      case Mode::unconditional: return 0;
      case Mode::first_frame: return 1;
      case Mode::k_frame: return conditioning.num_frames;
    }
    return 0;
  }
};

struct RolloutTrace {
  struct StepRow {
    int frame_index;
    int step;
    int tokens_finalized;
    double ms;
  };
  std::vector<StepRow> steps;
  std::vector<double> frame_ms;  // per generated or committed frame
  int committed_frames = 0;
};

struct RolloutResult {
  VideoClip video;
  RolloutTrace trace;
};

// Frame-by-frame generation: iterative masked decoding inside each frame,
// commits between frames. use_cache=false recomputes the full sequence every
// decode step (the quadratic baseline); both paths draw identical rng
// substreams keyed by (seed, frame, step) and produce identical videos.
RolloutResult rollout(const Parameters<float>& params, const ModelConfig& cfg,
                      const GenerationRequest& request, bool use_cache = true);

struct BenchRow {
  int frame_index = 0;
  double cached_ms = 0.0;
  double uncached_ms = 0.0;
  float max_abs_diff = 0.0f;  // pixel difference between the two paths
};

std::vector<BenchRow> bench_generation(const Parameters<float>& params,
                                       const ModelConfig& cfg,
                                       const GenerationRequest& request);

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path,
                     const std::string& fingerprint);
void write_trace_csv(const RolloutTrace& trace, const std::string& path,
                     const std::string& fingerprint);

}  // namespace marv
