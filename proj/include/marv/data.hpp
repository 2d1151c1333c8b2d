#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "marv/common.hpp"
#include "marv/rng.hpp"
#include "marv/tensor.hpp"

namespace marv {

// Raw frames with values in [-1, 1], stored frame-major / row-major /
// interleaved RGB.
struct VideoClip {
  int num_frames = 0;
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;
  int interval = 1;  // source-frame stride this clip was sampled at
  std::string source_id;
  int start_index = 0;

  static VideoClip zeros(int n, int h, int w);

  size_t frame_size() const {
    return static_cast<size_t>(height) * width * channels;
  }
  float& at(int f, int y, int x, int c) {
    return pixels[(static_cast<size_t>(f) * height + y) * width * channels +
                  static_cast<size_t>(x) * channels + c];
  }
  float at(int f, int y, int x, int c) const {
    return pixels[(static_cast<size_t>(f) * height + y) * width * channels +
                  static_cast<size_t>(x) * channels + c];
  }
  float* frame_data(int f) { return pixels.data() + frame_size() * f; }
  const float* frame_data(int f) const { return pixels.data() + frame_size() * f; }
};

// One moving shape with constant velocity and elastic wall bounces. Shared
// between the dataset synthesizer and the kinematics tests.
struct ShapeSpec {
  enum class Kind : std::uint8_t { square, circle };
  Kind kind = Kind::square;
  double x = 0.0, y = 0.0;    // center at frame 0
  double vx = 0.0, vy = 0.0;  // per-frame velocity
  double radius = 2.0;
  float color[3] = {1.0f, 1.0f, 1.0f};
};

struct ToyDatasetSpec {
  int num_videos = 8;
  int video_length = 400;
  int height = 16;
  int width = 16;
  int patch = 2;  // canvas must stay divisible by the tokenizer patch
  int min_shapes = 1;
  int max_shapes = 3;
  double min_radius = 1.5;
  double max_radius = 3.0;
  double max_speed = 1.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Deterministic in (spec.seed, video index); per-video seed is
// hash_mix(seed, index) so videos can be generated independently.
std::vector<VideoClip> synth_toy_dataset(const ToyDatasetSpec& spec);

// Renders shapes over `num_frames` with reflective walls; background is -1.
VideoClip render_shape_trajectories(const std::vector<ShapeSpec>& shapes,
                                    int num_frames, int height, int width);

// Positions after k steps of the bounce dynamics, exposed for the renderer
// and reused nowhere else (tests carry their own closed form).
void advance_shape(ShapeSpec& shape, int height, int width);

// Frames at source indices start, start+interval, ...
VideoClip sample_clip(const VideoClip& source, int num_frames, int interval,
                      int start);

// One frame's m continuous tokens of fixed dimension.
struct TokenGrid {
  int frame_index = 0;
  MatF tokens;  // m x d

  bool operator==(const TokenGrid&) const = default;
};

int tokens_per_frame(int height, int width, int patch);
int token_dim(int patch, int channels = 3);

// Non-overlapping patches in row-major patch order, each flattened to a
// d-vector in (y, x, channel) order. Exact inverse of unpatchify.
TokenGrid patchify(const VideoClip& clip, int frame, int patch);
MatF patchify_frame(const float* frame, int height, int width, int channels,
                    int patch);
void unpatchify(const MatF& tokens, int patch, int height, int width,
                int channels, float* frame_out);
void unpatchify_into(const TokenGrid& grid, int patch, VideoClip* clip,
                     int frame);

struct NoiseSpec {
  int level = 1;               // in [1, 5]
  double sigma_scale = 0.07;   // sigma(level) = sigma_scale * level

  double sigma() const;
  void validate(int vocab = 5) const;
};

// tokens + sigma(level) * eps with standard normal eps. Callers apply this to
// observation frames only; the layout module routes the level embedding.
MatF inject_noise(const MatF& tokens, const NoiseSpec& noise, Rng& rng);

// On-disk corpus: one subdirectory per clip with frame_%05d.png files plus a
// line-delimited manifest (one record per clip: id, length, seed).
struct DatasetManifestRow {
  std::string id;
  int length = 0;
  std::uint64_t seed = 0;
};

void write_dataset(const std::vector<VideoClip>& corpus,
                   const ToyDatasetSpec& spec, const std::string& dir);
std::vector<DatasetManifestRow> read_dataset_manifest(const std::string& dir);
std::vector<VideoClip> read_dataset(const std::string& dir);

}  // namespace marv
