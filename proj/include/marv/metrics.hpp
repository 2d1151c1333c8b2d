#pragma once

#include <string>
#include <utility>
#include <vector>

#include "marv/data.hpp"

namespace marv {

// Desk-scale substitutes for distributional video metrics: per-frame MSE and
// PSNR, a temporal-coherence error that compares consecutive-frame deltas
// (motion faithfulness), and a shape-centroid trajectory error.
struct MetricReport {
  std::vector<double> mse;   // per frame
  std::vector<double> psnr;  // per frame, capped at 99 dB
  double temporal_coherence_error = 0.0;
  double trajectory_error = 0.0;
  std::string config_fingerprint;

  double mean_mse() const;
};

MetricReport frame_metrics(const VideoClip& generated, const VideoClip& reference);

// Intensity-weighted centroid of pixels deviating from the -1 background;
// canvas center when nothing is foreground.
std::pair<double, double> foreground_centroid(const VideoClip& clip, int frame);

}  // namespace marv
