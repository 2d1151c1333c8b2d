#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "marv/data.hpp"

namespace marv {

// Minimal 8-bit RGB codecs: PNG (color type 2, via zlib) and animated GIF
// (fixed 6x7x6 color cube). Enough to export frames and read them back;
// arbitrary external images are out of scope.

void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& rgb);
std::vector<std::uint8_t> read_png_rgb8(const std::string& path, int* width,
                                        int* height);

void write_gif_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::vector<std::uint8_t>>& frames,
                    int delay_cs = 8);
std::vector<std::vector<std::uint8_t>> read_gif_rgb8(const std::string& path,
                                                     int* width, int* height);

// [-1,1] float <-> byte quantization used by all frame I/O
std::uint8_t quantize_unit(float v);
float dequantize_unit(std::uint8_t b);

std::vector<std::uint8_t> frame_to_rgb8(const VideoClip& clip, int frame);

// frame_%05d.png files under dir
void write_frames_png(const VideoClip& clip, const std::string& dir);
VideoClip read_frames_dir(const std::string& dir);

void write_frames_gif(const VideoClip& clip, const std::string& path,
                      int delay_cs = 8);
VideoClip read_gif_clip(const std::string& path);

}  // namespace marv
