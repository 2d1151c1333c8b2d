#include "marv/metrics.hpp"

#include <cmath>

namespace marv {

namespace {
constexpr double kPsnrCap = 99.0;
constexpr double kPeak = 2.0;  // pixel range width for [-1, 1]
}  // namespace

double MetricReport::mean_mse() const {
  if (mse.empty()) return 0.0;
  double total = 0.0;
  for (double v : mse) total += v;
  return total / static_cast<double>(mse.size());
}

std::pair<double, double> foreground_centroid(const VideoClip& clip, int frame) {
  double wx = 0.0, wy = 0.0, total = 0.0;
  for (int y = 0; y < clip.height; ++y) {
    for (int x = 0; x < clip.width; ++x) {
      double dev = 0.0;
      for (int c = 0; c < clip.channels; ++c) dev += clip.at(frame, y, x, c) + 1.0f;
      if (dev < 0.25) continue;
      wx += dev * x;
      wy += dev * y;
      total += dev;
    }
  }
  if (total == 0.0)
    return {(clip.width - 1) / 2.0, (clip.height - 1) / 2.0};
  return {wx / total, wy / total};
}

MetricReport frame_metrics(const VideoClip& generated, const VideoClip& reference) {
  if (generated.num_frames != reference.num_frames ||
      generated.height != reference.height || generated.width != reference.width ||
      generated.channels != reference.channels)
    throw ShapeError("frame_metrics: clip shapes differ");

  MetricReport report;
  const size_t n = generated.frame_size();
  for (int f = 0; f < generated.num_frames; ++f) {
    const float* g = generated.frame_data(f);
    const float* r = reference.frame_data(f);
    double err = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(g[i]) - r[i];
      err += d * d;
    }
    err /= static_cast<double>(n);
    report.mse.push_back(err);
    report.psnr.push_back(
        err <= 0.0 ? kPsnrCap
                   : std::min(kPsnrCap, 10.0 * std::log10(kPeak * kPeak / err)));
  }

  // mean squared difference between consecutive-frame deltas
  double coherence = 0.0;
  if (generated.num_frames > 1) {
    for (int f = 0; f + 1 < generated.num_frames; ++f) {
      const float* g0 = generated.frame_data(f);
      const float* g1 = generated.frame_data(f + 1);
      const float* r0 = reference.frame_data(f);
      const float* r1 = reference.frame_data(f + 1);
      for (size_t i = 0; i < n; ++i) {
        const double d = (static_cast<double>(g1[i]) - g0[i]) -
                         (static_cast<double>(r1[i]) - r0[i]);
        coherence += d * d;
      }
    }
    coherence /= static_cast<double>(n) * (generated.num_frames - 1);
  }
  report.temporal_coherence_error = coherence;

  double trajectory = 0.0;
  for (int f = 0; f < generated.num_frames; ++f) {
    const auto [gx, gy] = foreground_centroid(generated, f);
    const auto [rx, ry] = foreground_centroid(reference, f);
    trajectory += std::hypot(gx - rx, gy - ry);
  }
  report.trajectory_error = trajectory / generated.num_frames;
  return report;
}

}  // namespace marv
