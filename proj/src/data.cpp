#include "marv/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "marv/image_io.hpp"

namespace fs = std::filesystem;

namespace marv {

VideoClip VideoClip::zeros(int n, int h, int w) {
  VideoClip clip;
  clip.num_frames = n;
  clip.height = h;
  clip.width = w;
  clip.pixels.assign(static_cast<size_t>(n) * h * w * 3, 0.0f);
  return clip;
}

void ToyDatasetSpec::validate() const {
  if (num_videos < 1 || video_length < 1)
    throw ConfigError("toy dataset: num_videos and video_length must be >= 1");
  if (patch < 1 || height % patch != 0 || width % patch != 0)
    throw ConfigError("toy dataset: canvas not divisible by patch size");
  if (min_shapes < 1 || max_shapes < min_shapes)
    throw ConfigError("toy dataset: bad shape count range");
  if (!(min_radius > 0.0) || max_radius < min_radius)
    throw ConfigError("toy dataset: bad radius range");
  if (2.0 * max_radius + 1.0 > std::min(height, width))
    throw ConfigError("toy dataset: max_radius too large for canvas");
}

namespace {

// reflect p into [lo, hi], flipping v on each bounce
void reflect_axis(double& p, double& v, double lo, double hi) {
  if (hi <= lo) {
    p = lo;
    v = 0.0;
    return;
  }
  while (p < lo || p > hi) {
    if (p < lo) {
      p = 2.0 * lo - p;
      v = -v;
    } else {
      p = 2.0 * hi - p;
      v = -v;
    }
  }
}

void draw_shape(VideoClip& clip, int frame, const ShapeSpec& s) {
  const double r = s.radius;
  const int y0 = std::max(0, static_cast<int>(std::floor(s.y - r)));
  const int y1 = std::min(clip.height - 1, static_cast<int>(std::ceil(s.y + r)));
  const int x0 = std::max(0, static_cast<int>(std::floor(s.x - r)));
  const int x1 = std::min(clip.width - 1, static_cast<int>(std::ceil(s.x + r)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - s.x;
      const double dy = y - s.y;
      const bool inside = s.kind == ShapeSpec::Kind::square
                              ? std::abs(dx) <= r && std::abs(dy) <= r
                              : dx * dx + dy * dy <= r * r;
      if (!inside) continue;
      for (int c = 0; c < 3; ++c) clip.at(frame, y, x, c) = s.color[c];
    }
  }
}

constexpr float kPalette[6][3] = {
    {1.0f, 0.25f, 0.25f}, {0.25f, 1.0f, 0.25f}, {0.3f, 0.5f, 1.0f},
    {1.0f, 1.0f, 0.3f},   {1.0f, 0.4f, 1.0f},  {0.3f, 1.0f, 1.0f},
};

}  // namespace

void advance_shape(ShapeSpec& shape, int height, int width) {
  shape.x += shape.vx;
  shape.y += shape.vy;
  reflect_axis(shape.x, shape.vx, shape.radius, width - 1 - shape.radius);
  reflect_axis(shape.y, shape.vy, shape.radius, height - 1 - shape.radius);
}

VideoClip render_shape_trajectories(const std::vector<ShapeSpec>& shapes,
                                    int num_frames, int height, int width) {
  if (num_frames < 1) throw ConfigError("render: num_frames must be >= 1");
  VideoClip clip = VideoClip::zeros(num_frames, height, width);
  std::fill(clip.pixels.begin(), clip.pixels.end(), -1.0f);
  std::vector<ShapeSpec> state = shapes;
  for (int f = 0; f < num_frames; ++f) {
    for (const auto& s : state) draw_shape(clip, f, s);
    for (auto& s : state) advance_shape(s, height, width);
  }
  return clip;
}

std::vector<VideoClip> synth_toy_dataset(const ToyDatasetSpec& spec) {
  spec.validate();
  std::vector<VideoClip> corpus;
  corpus.reserve(static_cast<size_t>(spec.num_videos));
  for (int v = 0; v < spec.num_videos; ++v) {
    Rng rng(hash_mix(spec.seed, static_cast<std::uint64_t>(v)));
    const int count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
    std::vector<ShapeSpec> shapes(static_cast<size_t>(count));
    for (auto& s : shapes) {
      s.kind = rng.uniform_int(0, 1) == 0 ? ShapeSpec::Kind::square
                                          : ShapeSpec::Kind::circle;
      s.radius = rng.uniform(spec.min_radius, spec.max_radius);
      s.x = rng.uniform(s.radius, spec.width - 1 - s.radius);
      s.y = rng.uniform(s.radius, spec.height - 1 - s.radius);
      s.vx = rng.uniform(-spec.max_speed, spec.max_speed);
      s.vy = rng.uniform(-spec.max_speed, spec.max_speed);
      const float* color = kPalette[rng.uniform_int(0, 5)];
      std::copy(color, color + 3, s.color);
    }
    VideoClip clip =
        render_shape_trajectories(shapes, spec.video_length, spec.height, spec.width);
    clip.source_id = "video_" + std::to_string(v);
    corpus.push_back(std::move(clip));
  }
  return corpus;
}

VideoClip sample_clip(const VideoClip& source, int num_frames, int interval,
                      int start) {
  if (num_frames < 1 || interval < 1 || start < 0)
    throw SamplingError("sample_clip: bad request");
  const long last = static_cast<long>(start) +
                    static_cast<long>(num_frames - 1) * interval;
  if (last >= source.num_frames)
    throw SamplingError("sample_clip: request exceeds source length");

  VideoClip clip = VideoClip::zeros(num_frames, source.height, source.width);
  for (int k = 0; k < num_frames; ++k) {
    const float* src = source.frame_data(start + k * interval);
    std::copy(src, src + clip.frame_size(), clip.frame_data(k));
  }
  clip.interval = interval;
  clip.source_id = source.source_id;
  clip.start_index = start;
  return clip;
}

int tokens_per_frame(int height, int width, int patch) {
  if (patch < 1 || height % patch != 0 || width % patch != 0)
    throw ConfigError("tokenizer: frame dims not divisible by patch size");
  return (height / patch) * (width / patch);
}

int token_dim(int patch, int channels) { return patch * patch * channels; }

MatF patchify_frame(const float* frame, int height, int width, int channels,
                    int patch) {
  const int m = tokens_per_frame(height, width, patch);
  const int d = token_dim(patch, channels);
  const int gw = width / patch;
  MatF tokens(m, d);
  for (int t = 0; t < m; ++t) {
    const int py = t / gw, px = t % gw;
    for (int dy = 0; dy < patch; ++dy) {
      for (int dx = 0; dx < patch; ++dx) {
        const int y = py * patch + dy, x = px * patch + dx;
        for (int c = 0; c < channels; ++c) {
          tokens(t, (dy * patch + dx) * channels + c) =
              frame[(static_cast<size_t>(y) * width + x) * channels + c];
        }
      }
    }
  }
  return tokens;
}

TokenGrid patchify(const VideoClip& clip, int frame, int patch) {
  TokenGrid grid;
  grid.frame_index = frame;
  grid.tokens = patchify_frame(clip.frame_data(frame), clip.height, clip.width,
                               clip.channels, patch);
  return grid;
}

void unpatchify(const MatF& tokens, int patch, int height, int width,
                int channels, float* frame_out) {
  const int m = tokens_per_frame(height, width, patch);
  if (tokens.rows() != m || tokens.cols() != token_dim(patch, channels))
    throw ShapeError("unpatchify: token grid shape mismatch");
  const int gw = width / patch;
  for (int t = 0; t < m; ++t) {
    const int py = t / gw, px = t % gw;
    for (int dy = 0; dy < patch; ++dy) {
      for (int dx = 0; dx < patch; ++dx) {
        const int y = py * patch + dy, x = px * patch + dx;
        for (int c = 0; c < channels; ++c) {
          frame_out[(static_cast<size_t>(y) * width + x) * channels + c] =
              tokens(t, (dy * patch + dx) * channels + c);
        }
      }
    }
  }
}

void unpatchify_into(const TokenGrid& grid, int patch, VideoClip* clip,
                     int frame) {
  unpatchify(grid.tokens, patch, clip->height, clip->width, clip->channels,
             clip->frame_data(frame));
}

double NoiseSpec::sigma() const { return sigma_scale * level; }

void NoiseSpec::validate(int vocab) const {
  if (level < 1 || level > vocab)
    throw ConfigError("noise level outside [1, " + std::to_string(vocab) + "]");
  if (sigma_scale < 0.0) throw ConfigError("noise sigma_scale must be >= 0");
}

MatF inject_noise(const MatF& tokens, const NoiseSpec& noise, Rng& rng) {
  noise.validate();
  const double sigma = noise.sigma();
  MatF out = tokens;
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      out(i, j) += static_cast<float>(sigma * rng.normal());
  return out;
}

void write_dataset(const std::vector<VideoClip>& corpus,
                   const ToyDatasetSpec& spec, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
  if (!manifest) throw IoError("cannot write manifest under " + dir);
  for (size_t v = 0; v < corpus.size(); ++v) {
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%05zu", v);
    const fs::path clip_dir = fs::path(dir) / name;
    write_frames_png(corpus[v], clip_dir.string());
    nlohmann::json row;
    row["id"] = name;
    row["length"] = corpus[v].num_frames;
    row["seed"] = hash_mix(spec.seed, static_cast<std::uint64_t>(v));
    manifest << row.dump() << "\n";
  }
}

std::vector<DatasetManifestRow> read_dataset_manifest(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.jsonl");
  if (!manifest) throw IoError("missing manifest.jsonl under " + dir);
  std::vector<DatasetManifestRow> rows;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto row = nlohmann::json::parse(line);
    rows.push_back({row.at("id").get<std::string>(), row.at("length").get<int>(),
                    row.at("seed").get<std::uint64_t>()});
  }
  return rows;
}

std::vector<VideoClip> read_dataset(const std::string& dir) {
  std::vector<VideoClip> corpus;
  for (const auto& row : read_dataset_manifest(dir)) {
    VideoClip clip = read_frames_dir((fs::path(dir) / row.id).string());
    if (clip.num_frames != row.length)
      throw IoError("clip " + row.id + ": frame count disagrees with manifest");
    clip.source_id = row.id;
    corpus.push_back(std::move(clip));
  }
  return corpus;
}

}  // namespace marv
