#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "marv/data.hpp"
#include "marv/image_io.hpp"

using namespace marv;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("marv_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Intensity-weighted centroid of pixels deviating from the -1 background.
std::pair<double, double> centroid(const VideoClip& clip, int frame) {
  double wx = 0.0, wy = 0.0, total = 0.0;
  for (int y = 0; y < clip.height; ++y) {
    for (int x = 0; x < clip.width; ++x) {
      double dev = 0.0;
      for (int c = 0; c < 3; ++c) dev += clip.at(frame, y, x, c) + 1.0f;
      if (dev < 0.25) continue;
      wx += dev * x;
      wy += dev * y;
      total += dev;
    }
  }
  if (total == 0.0) return {clip.width / 2.0, clip.height / 2.0};
  return {wx / total, wy / total};
}

// Closed-form bounce kinematics: reflected position after k unit steps,
// independent of the renderer's stepping.
double triangle_position(double x0, double v, double lo, double hi, int k) {
  const double span = hi - lo;
  double q = std::fmod(x0 - lo + v * k, 2.0 * span);
  if (q < 0) q += 2.0 * span;
  return lo + (q <= span ? q : 2.0 * span - q);
}

}  // namespace

TEST_CASE("toy dataset is deterministic in (spec, seed)") {
  ToyDatasetSpec spec;
  spec.num_videos = 3;
  spec.video_length = 24;
  spec.seed = 7;
  const auto a = synth_toy_dataset(spec);
  const auto b = synth_toy_dataset(spec);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].pixels == b[i].pixels);

  spec.seed = 8;
  const auto c = synth_toy_dataset(spec);
  CHECK(a[0].pixels != c[0].pixels);
}

TEST_CASE("toy dataset cardinality and value range") {
  ToyDatasetSpec spec;
  spec.num_videos = 4;
  spec.video_length = 64;
  spec.seed = 1;
  const auto corpus = synth_toy_dataset(spec);
  REQUIRE(corpus.size() == 4);
  for (const auto& clip : corpus) {
    CHECK(clip.num_frames == 64);
    CHECK(clip.height == spec.height);
    CHECK(clip.width == spec.width);
    for (float v : clip.pixels) {
      CHECK(std::isfinite(v));
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("toy dataset validates canvas/patch divisibility") {
  ToyDatasetSpec spec;
  spec.height = 15;  // not divisible by patch 2
  CHECK_THROWS_AS(synth_toy_dataset(spec), ConfigError);
}

TEST_CASE("rendered shape follows closed-form bounce kinematics") {
  ShapeSpec shape;
  shape.kind = ShapeSpec::Kind::square;
  shape.radius = 2.0;
  shape.x = shape.radius;  // left wall of a width-32 canvas
  shape.y = 8.0;
  shape.vx = 1.0;
  shape.vy = 0.0;

  const int width = 32, height = 16, frames = 40;
  const auto clip = render_shape_trajectories({shape}, frames, height, width);

  const double lo = shape.radius, hi = width - 1 - shape.radius;
  int first_bounce = static_cast<int>(hi - shape.x);  // steps until the wall
  for (int f = 0; f < frames; ++f) {
    const auto [cx, cy] = centroid(clip, f);
    const double want = triangle_position(shape.x, 1.0, lo, hi, f);
    CHECK(std::abs(cx - want) < 1e-9);
    CHECK(std::abs(cy - shape.y) < 1e-9);
    if (f > 0 && f <= first_bounce) {
      const auto [prev_x, prev_y] = centroid(clip, f - 1);
      CHECK(cx - prev_x == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("sample_clip index arithmetic") {
  VideoClip source = VideoClip::zeros(100, 4, 4);
  for (int f = 0; f < 100; ++f) source.at(f, 0, 0, 0) = static_cast<float>(f);
  source.source_id = "src";

  const auto a = sample_clip(source, 16, 1, 0);
  REQUIRE(a.num_frames == 16);
  for (int k = 0; k < 16; ++k) CHECK(a.at(k, 0, 0, 0) == static_cast<float>(k));

  const auto b = sample_clip(source, 16, 3, 2);
  CHECK(b.interval == 3);
  CHECK(b.start_index == 2);
  for (int k = 0; k < 16; ++k) CHECK(b.at(k, 0, 0, 0) == static_cast<float>(2 + 3 * k));

  CHECK_THROWS_AS(sample_clip(source, 16, 7, 2), SamplingError);  // 2+15*7=107
  CHECK_THROWS_AS(sample_clip(source, 2, 1, -1), SamplingError);
}

TEST_CASE("patchify counts and exact inverse") {
  VideoClip clip = VideoClip::zeros(1, 4, 4);
  Rng rng(3);
  for (auto& v : clip.pixels) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  const auto grid = patchify(clip, 0, 2);
  CHECK(grid.tokens.rows() == 4);
  CHECK(grid.tokens.cols() == 12);

  VideoClip back = VideoClip::zeros(1, 4, 4);
  unpatchify_into(grid, 2, &back, 0);
  CHECK(back.pixels == clip.pixels);

  VideoClip constant = VideoClip::zeros(1, 4, 4);
  std::fill(constant.pixels.begin(), constant.pixels.end(), 0.5f);
  const auto cgrid = patchify(constant, 0, 2);
  for (int t = 0; t < 4; ++t)
    for (int j = 0; j < 12; ++j) CHECK(cgrid.tokens(t, j) == 0.5f);
}

TEST_CASE("tokenizer inverse holds for random frames and patch sizes") {
  Rng rng(11);
  for (int patch : {1, 2, 4}) {
    VideoClip clip = VideoClip::zeros(1, 8, 12);
    for (auto& v : clip.pixels) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    const auto grid = patchify(clip, 0, patch);
    CHECK(grid.tokens.rows() == tokens_per_frame(8, 12, patch));
    VideoClip back = VideoClip::zeros(1, 8, 12);
    unpatchify_into(grid, patch, &back, 0);
    CHECK(back.pixels == clip.pixels);
  }
  CHECK_THROWS_AS(tokens_per_frame(9, 12, 2), ConfigError);
}

TEST_CASE("inject_noise zero-sigma identity and determinism") {
  Rng rng(5);
  MatF tokens(4, 12);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 12; ++j) tokens(i, j) = static_cast<float>(rng.uniform(-1.0, 1.0));

  NoiseSpec zero{3, 0.0};
  Rng r1(9);
  CHECK(inject_noise(tokens, zero, r1) == tokens);

  NoiseSpec level2{2, 0.07};
  Rng r2(9), r3(9);
  CHECK(inject_noise(tokens, level2, r2) == inject_noise(tokens, level2, r3));

  NoiseSpec bad{6, 0.07};
  Rng r4(9);
  CHECK_THROWS_AS(inject_noise(tokens, bad, r4), ConfigError);
}

TEST_CASE("inject_noise variance and mean shift") {
  const int n = 100000;
  MatF tokens(n, 1);
  Rng data_rng(21);
  for (int i = 0; i < n; ++i) tokens(i, 0) = static_cast<float>(data_rng.uniform(-1.0, 1.0));

  NoiseSpec level5{5, 0.07};
  Rng rng(22);
  const MatF noisy = inject_noise(tokens, level5, rng);

  auto variance = [](const MatF& m) {
    const double mean = m.cast<double>().mean();
    return (m.cast<double>().array() - mean).square().mean();
  };
  const double sigma2 = level5.sigma() * level5.sigma();
  const double want = variance(tokens) + sigma2;
  CHECK(std::abs(variance(noisy) - want) / want < 0.05);

  const double shift = (noisy - tokens).cast<double>().mean();
  CHECK(std::abs(shift) < 4.0 * level5.sigma() / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("png frame round trip within quantization bound") {
  const auto dir = temp_dir("png");
  ToyDatasetSpec spec;
  spec.num_videos = 1;
  spec.video_length = 16;
  spec.seed = 13;
  const auto clip = synth_toy_dataset(spec)[0];

  write_frames_png(clip, dir.string());
  const auto back = read_frames_dir(dir.string());
  REQUIRE(back.num_frames == 16);
  REQUIRE(back.height == clip.height);
  REQUIRE(back.width == clip.width);
  float max_err = 0.0f;
  for (size_t i = 0; i < clip.pixels.size(); ++i)
    max_err = std::max(max_err, std::abs(clip.pixels[i] - back.pixels[i]));
  CHECK(max_err <= 2.0f / 255.0f);
}

TEST_CASE("read_frames_dir on an empty directory is an error") {
  const auto dir = temp_dir("empty");
  CHECK_THROWS_AS(read_frames_dir(dir.string()), IoError);
  CHECK_THROWS_AS(read_frames_dir((dir / "missing").string()), IoError);
}

TEST_CASE("read_png rejects corrupt files") {
  const auto dir = temp_dir("corrupt");
  const auto path = dir / "frame_00000.png";
  std::ofstream(path) << "not a png";
  int w = 0, h = 0;
  CHECK_THROWS_AS(read_png_rgb8(path.string(), &w, &h), IoError);
}

TEST_CASE("gif preserves frame count and order") {
  const auto dir = temp_dir("gif");
  const int w = 10, h = 6, n = 16;

  // distinct exact-palette color per frame
  std::vector<std::vector<std::uint8_t>> frames;
  std::vector<std::array<std::uint8_t, 3>> colors;
  for (int f = 0; f < n; ++f) {
    const std::uint8_t r = static_cast<std::uint8_t>((f % 6) * 255 / 5);
    const std::uint8_t g = static_cast<std::uint8_t>((f % 7) * 255 / 6);
    colors.push_back({r, g, 0});
    std::vector<std::uint8_t> rgb(static_cast<size_t>(w) * h * 3);
    for (size_t p = 0; p < static_cast<size_t>(w) * h; ++p) {
      rgb[p * 3] = r;
      rgb[p * 3 + 1] = g;
      rgb[p * 3 + 2] = 0;
    }
    frames.push_back(std::move(rgb));
  }

  const auto path = (dir / "clip.gif").string();
  write_gif_rgb8(path, w, h, frames);
  int rw = 0, rh = 0;
  const auto back = read_gif_rgb8(path, &rw, &rh);
  REQUIRE(back.size() == static_cast<size_t>(n));
  CHECK(rw == w);
  CHECK(rh == h);
  for (int f = 0; f < n; ++f) {
    CHECK(back[f][0] == colors[f][0]);
    CHECK(back[f][1] == colors[f][1]);
    CHECK(back[f][2] == colors[f][2]);
  }
}

TEST_CASE("gif clip export for synthesized video") {
  const auto dir = temp_dir("gifclip");
  ToyDatasetSpec spec;
  spec.num_videos = 1;
  spec.video_length = 16;
  spec.seed = 3;
  const auto clip = synth_toy_dataset(spec)[0];
  const auto path = (dir / "toy.gif").string();
  write_frames_gif(clip, path);
  const auto back = read_gif_clip(path);
  CHECK(back.num_frames == 16);
  CHECK(back.height == clip.height);
  CHECK(back.width == clip.width);
}

TEST_CASE("dataset directory round trip with manifest") {
  const auto dir = temp_dir("dataset");
  ToyDatasetSpec spec;
  spec.num_videos = 3;
  spec.video_length = 12;
  spec.seed = 99;
  const auto corpus = synth_toy_dataset(spec);
  write_dataset(corpus, spec, dir.string());

  const auto rows = read_dataset_manifest(dir.string());
  REQUIRE(rows.size() == 3);
  for (const auto& row : rows) CHECK(row.length == 12);
  CHECK(rows[0].id == "clip_00000");
  CHECK(rows[0].seed == hash_mix(99, 0));

  const auto back = read_dataset(dir.string());
  REQUIRE(back.size() == 3);
  for (size_t v = 0; v < back.size(); ++v) {
    REQUIRE(back[v].num_frames == corpus[v].num_frames);
    float max_err = 0.0f;
    for (size_t i = 0; i < corpus[v].pixels.size(); ++i)
      max_err = std::max(max_err, std::abs(corpus[v].pixels[i] - back[v].pixels[i]));
    CHECK(max_err <= 2.0f / 255.0f);
  }
}
