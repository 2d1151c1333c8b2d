#include "marv/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace marv {

std::uint8_t quantize_unit(float v) {
  const float clamped = std::clamp(v, -1.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround((clamped + 1.0f) * 127.5f));
}

float dequantize_unit(std::uint8_t b) {
  return static_cast<float>(b) / 127.5f - 1.0f;
}

std::vector<std::uint8_t> frame_to_rgb8(const VideoClip& clip, int frame) {
  std::vector<std::uint8_t> rgb(clip.frame_size());
  const float* src = clip.frame_data(frame);
  for (size_t i = 0; i < rgb.size(); ++i) rgb[i] = quantize_unit(src[i]);
  return rgb;
}

// ---------------------------------------------------------------------------
// PNG: 8-bit RGB, color type 2, filter 0 scanlines on write; reader handles
// the five standard filters and strips alpha if present.
// ---------------------------------------------------------------------------

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_be32(out, static_cast<std::uint32_t>(
                    crc32(0, body.data(), static_cast<uInt>(body.size()))));
}

constexpr std::uint8_t kPngSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& rgb) {
  if (static_cast<size_t>(width) * height * 3 != rgb.size())
    throw ShapeError("write_png: pixel buffer size mismatch");

  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (width * 3 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    const std::uint8_t* row = rgb.data() + static_cast<size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<size_t>(width) * 3);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png deflate failed for " + path);
  compressed.resize(bound);

  std::vector<std::uint8_t> out(kPngSignature, kPngSignature + 8);
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(width));
  put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", compressed);
  append_chunk(out, "IEND", {});
  write_file_bytes(path, out);
}

std::vector<std::uint8_t> read_png_rgb8(const std::string& path, int* width,
                                        int* height) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSignature, 8) != 0)
    throw IoError("not a png file: " + path);

  int w = 0, h = 0, channels = 0;
  std::vector<std::uint8_t> idat;
  size_t pos = 8;
  while (pos + 12 <= bytes.size()) {
    const std::uint32_t len = get_be32(&bytes[pos]);
    if (pos + 12 + len > bytes.size()) throw IoError("truncated png: " + path);
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const std::uint8_t* data = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError("bad IHDR in " + path);
      w = static_cast<int>(get_be32(data));
      h = static_cast<int>(get_be32(data + 4));
      const int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8 || (color != 2 && color != 6) || interlace != 0)
        throw IoError(path + ": only 8-bit non-interlaced RGB(A) supported");
      channels = color == 2 ? 3 : 4;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0 || idat.empty()) throw IoError("no image data in " + path);

  const size_t stride = static_cast<size_t>(w) * channels;
  std::vector<std::uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("png inflate failed for " + path);

  std::vector<std::uint8_t> pixels(static_cast<size_t>(h) * stride);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
    const std::uint8_t* src = &raw[static_cast<size_t>(y) * (stride + 1) + 1];
    std::uint8_t* dst = &pixels[static_cast<size_t>(y) * stride];
    const std::uint8_t* up = y > 0 ? dst - stride : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<size_t>(channels) ? dst[i - channels] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= static_cast<size_t>(channels)) ? up[i - channels] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw IoError("png: unknown filter in " + path);
      }
      dst[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }

  if (channels == 4) {  // strip alpha
    std::vector<std::uint8_t> rgb(static_cast<size_t>(w) * h * 3);
    for (size_t p = 0; p < static_cast<size_t>(w) * h; ++p)
      for (int ch = 0; ch < 3; ++ch) rgb[p * 3 + ch] = pixels[p * 4 + ch];
    pixels = std::move(rgb);
  }
  *width = w;
  *height = h;
  return pixels;
}

// ---------------------------------------------------------------------------
// GIF89a with a fixed 6x7x6 RGB cube palette and standard LZW.
// ---------------------------------------------------------------------------

namespace {

constexpr int kRLevels = 6, kGLevels = 7, kBLevels = 6;

std::uint8_t gif_index(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const int ri = (r * (kRLevels - 1) + 127) / 255;
  const int gi = (g * (kGLevels - 1) + 127) / 255;
  const int bi = (b * (kBLevels - 1) + 127) / 255;
  return static_cast<std::uint8_t>((ri * kGLevels + gi) * kBLevels + bi);
}

void gif_palette(std::uint8_t table[256][3]) {
  for (int ri = 0; ri < kRLevels; ++ri)
    for (int gi = 0; gi < kGLevels; ++gi)
      for (int bi = 0; bi < kBLevels; ++bi) {
        std::uint8_t* e = table[(ri * kGLevels + gi) * kBLevels + bi];
        e[0] = static_cast<std::uint8_t>(ri * 255 / (kRLevels - 1));
        e[1] = static_cast<std::uint8_t>(gi * 255 / (kGLevels - 1));
        e[2] = static_cast<std::uint8_t>(bi * 255 / (kBLevels - 1));
      }
  for (int i = kRLevels * kGLevels * kBLevels; i < 256; ++i)
    table[i][0] = table[i][1] = table[i][2] = 0;
}

class BitWriter {
 public:
  void put(int code, int bits) {
    acc_ |= static_cast<std::uint32_t>(code) << used_;
    used_ += bits;
    while (used_ >= 8) {
      bytes_.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
      acc_ >>= 8;
      used_ -= 8;
    }
  }
  std::vector<std::uint8_t> finish() {
    if (used_ > 0) bytes_.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
    acc_ = 0;
    used_ = 0;
    return std::move(bytes_);
  }

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint32_t acc_ = 0;
  int used_ = 0;
};

std::vector<std::uint8_t> lzw_encode(const std::vector<std::uint8_t>& indices) {
  constexpr int kMinCodeSize = 8;
  constexpr int kClear = 1 << kMinCodeSize;
  constexpr int kEoi = kClear + 1;

  std::vector<int> dict(4096 * 256, -1);  // (prefix, byte) -> code
  auto reset = [&] { std::fill(dict.begin(), dict.end(), -1); };

  BitWriter bits;
  int code_size = kMinCodeSize + 1;
  int next = kEoi + 1;
  reset();
  bits.put(kClear, code_size);

  int prefix = indices.empty() ? 0 : indices[0];
  for (size_t i = 1; i < indices.size(); ++i) {
    const int k = indices[i];
    const size_t key = static_cast<size_t>(prefix) * 256 + k;
    if (dict[key] >= 0) {
      prefix = dict[key];
      continue;
    }
    bits.put(prefix, code_size);
    dict[key] = next++;
    if (next == (1 << code_size) && code_size < 12) ++code_size;
    if (next == 4096) {
      bits.put(kClear, code_size);
      reset();
      code_size = kMinCodeSize + 1;
      next = kEoi + 1;
    }
    prefix = k;
  }
  bits.put(prefix, code_size);
  bits.put(kEoi, code_size);
  return bits.finish();
}

class BitReader {
 public:
  BitReader(const std::uint8_t* data, size_t size) : data_(data), size_(size) {}
  int get(int bits) {
    while (used_ < bits) {
      if (pos_ >= size_) throw IoError("gif: lzw stream truncated");
      acc_ |= static_cast<std::uint64_t>(data_[pos_++]) << used_;
      used_ += 8;
    }
    const int v = static_cast<int>(acc_ & ((1u << bits) - 1));
    acc_ >>= bits;
    used_ -= bits;
    return v;
  }

 private:
  const std::uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
  std::uint64_t acc_ = 0;
  int used_ = 0;
};

std::vector<std::uint8_t> lzw_decode(const std::vector<std::uint8_t>& stream,
                                     int min_code_size, size_t expected) {
  const int clear = 1 << min_code_size;
  const int eoi = clear + 1;

  std::vector<std::vector<std::uint8_t>> dict;
  auto reset = [&] {
    dict.assign(static_cast<size_t>(eoi) + 1, {});
    for (int i = 0; i < clear; ++i) dict[static_cast<size_t>(i)] = {static_cast<std::uint8_t>(i)};
  };

  BitReader bits(stream.data(), stream.size());
  int code_size = min_code_size + 1;
  reset();
  std::vector<std::uint8_t> out;
  out.reserve(expected);

  int prev = -1;
  while (out.size() < expected) {
    const int code = bits.get(code_size);
    if (code == clear) {
      reset();
      code_size = min_code_size + 1;
      prev = -1;
      continue;
    }
    if (code == eoi) break;
    std::vector<std::uint8_t> entry;
    if (code < static_cast<int>(dict.size()) && !dict[static_cast<size_t>(code)].empty()) {
      entry = dict[static_cast<size_t>(code)];
    } else if (code == static_cast<int>(dict.size()) && prev >= 0) {
      entry = dict[static_cast<size_t>(prev)];
      entry.push_back(dict[static_cast<size_t>(prev)][0]);
    } else {
      throw IoError("gif: corrupt lzw code");
    }
    out.insert(out.end(), entry.begin(), entry.end());
    if (prev >= 0 && dict.size() < 4096) {
      std::vector<std::uint8_t> added = dict[static_cast<size_t>(prev)];
      added.push_back(entry[0]);
      dict.push_back(std::move(added));
      if (static_cast<int>(dict.size()) == (1 << code_size) && code_size < 12)
        ++code_size;
    }
    prev = code;
  }
  return out;
}

void put_le16(std::vector<std::uint8_t>& out, int v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

}  // namespace

void write_gif_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::vector<std::uint8_t>>& frames,
                    int delay_cs) {
  if (frames.empty()) throw ConfigError("write_gif: no frames");
  std::vector<std::uint8_t> out;
  const char* header = "GIF89a";
  out.insert(out.end(), header, header + 6);
  put_le16(out, width);
  put_le16(out, height);
  out.push_back(0xf7);  // global color table, 8 bits, 256 entries
  out.push_back(0);     // background color index
  out.push_back(0);     // aspect

  std::uint8_t palette[256][3];
  gif_palette(palette);
  for (auto& entry : palette) out.insert(out.end(), entry, entry + 3);

  // netscape looping extension
  const std::uint8_t loop[] = {0x21, 0xff, 0x0b, 'N', 'E', 'T', 'S', 'C', 'A',
                               'P',  'E',  '2',  '.', '0', 0x03, 0x01, 0x00,
                               0x00, 0x00};
  out.insert(out.end(), loop, loop + sizeof(loop));

  for (const auto& rgb : frames) {
    if (rgb.size() != static_cast<size_t>(width) * height * 3)
      throw ShapeError("write_gif: frame size mismatch");
    out.push_back(0x21);  // graphic control
    out.push_back(0xf9);
    out.push_back(0x04);
    out.push_back(0x00);
    put_le16(out, delay_cs);
    out.push_back(0x00);
    out.push_back(0x00);

    out.push_back(0x2c);  // image descriptor
    put_le16(out, 0);
    put_le16(out, 0);
    put_le16(out, width);
    put_le16(out, height);
    out.push_back(0x00);  // no local color table, not interlaced

    std::vector<std::uint8_t> indices(static_cast<size_t>(width) * height);
    for (size_t p = 0; p < indices.size(); ++p)
      indices[p] = gif_index(rgb[p * 3], rgb[p * 3 + 1], rgb[p * 3 + 2]);
    const auto lzw = lzw_encode(indices);

    out.push_back(8);  // lzw min code size
    for (size_t off = 0; off < lzw.size(); off += 255) {
      const size_t n = std::min<size_t>(255, lzw.size() - off);
      out.push_back(static_cast<std::uint8_t>(n));
      out.insert(out.end(), lzw.begin() + off, lzw.begin() + off + n);
    }
    out.push_back(0x00);  // block terminator
  }
  out.push_back(0x3b);  // trailer
  write_file_bytes(path, out);
}

std::vector<std::vector<std::uint8_t>> read_gif_rgb8(const std::string& path,
                                                     int* width, int* height) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 13 || std::memcmp(bytes.data(), "GIF", 3) != 0)
    throw IoError("not a gif file: " + path);

  const int w = bytes[6] | (bytes[7] << 8);
  const int h = bytes[8] | (bytes[9] << 8);
  const std::uint8_t flags = bytes[10];
  size_t pos = 13;

  std::uint8_t global_palette[256][3] = {};
  if (flags & 0x80) {
    const int entries = 2 << (flags & 0x07);
    for (int i = 0; i < entries; ++i) {
      if (pos + 3 > bytes.size()) throw IoError("gif: truncated palette");
      global_palette[i][0] = bytes[pos++];
      global_palette[i][1] = bytes[pos++];
      global_palette[i][2] = bytes[pos++];
    }
  }

  auto skip_subblocks = [&] {
    while (true) {
      if (pos >= bytes.size()) throw IoError("gif: truncated sub-blocks");
      const std::uint8_t n = bytes[pos++];
      if (n == 0) return;
      pos += n;
    }
  };

  std::vector<std::vector<std::uint8_t>> frames;
  while (pos < bytes.size()) {
    const std::uint8_t block = bytes[pos++];
    if (block == 0x3b) break;
    if (block == 0x21) {  // extension: label + sub-blocks
      if (pos >= bytes.size()) throw IoError("gif: truncated extension");
      ++pos;
      skip_subblocks();
      continue;
    }
    if (block != 0x2c) throw IoError("gif: unexpected block type");

    if (pos + 9 > bytes.size()) throw IoError("gif: truncated image descriptor");
    const int fw = bytes[pos + 4] | (bytes[pos + 5] << 8);
    const int fh = bytes[pos + 6] | (bytes[pos + 7] << 8);
    const std::uint8_t iflags = bytes[pos + 8];
    pos += 9;
    if (fw != w || fh != h || (iflags & 0x40))
      throw IoError("gif: only full-frame non-interlaced images supported");

    std::uint8_t local_palette[256][3];
    const std::uint8_t(*palette)[3] = global_palette;
    if (iflags & 0x80) {
      const int entries = 2 << (iflags & 0x07);
      for (int i = 0; i < entries; ++i) {
        local_palette[i][0] = bytes[pos++];
        local_palette[i][1] = bytes[pos++];
        local_palette[i][2] = bytes[pos++];
      }
      palette = local_palette;
    }

    if (pos >= bytes.size()) throw IoError("gif: truncated image data");
    const int min_code_size = bytes[pos++];
    std::vector<std::uint8_t> lzw;
    while (true) {
      if (pos >= bytes.size()) throw IoError("gif: truncated image data");
      const std::uint8_t n = bytes[pos++];
      if (n == 0) break;
      if (pos + n > bytes.size()) throw IoError("gif: truncated image data");
      lzw.insert(lzw.end(), bytes.begin() + pos, bytes.begin() + pos + n);
      pos += n;
    }

    const auto indices =
        lzw_decode(lzw, min_code_size, static_cast<size_t>(w) * h);
    if (indices.size() != static_cast<size_t>(w) * h)
      throw IoError("gif: decoded pixel count mismatch");
    std::vector<std::uint8_t> rgb(static_cast<size_t>(w) * h * 3);
    for (size_t p = 0; p < indices.size(); ++p) {
      rgb[p * 3 + 0] = palette[indices[p]][0];
      rgb[p * 3 + 1] = palette[indices[p]][1];
      rgb[p * 3 + 2] = palette[indices[p]][2];
    }
    frames.push_back(std::move(rgb));
  }
  *width = w;
  *height = h;
  return frames;
}

// ---------------------------------------------------------------------------
// Frame-directory and clip-level helpers
// ---------------------------------------------------------------------------

void write_frames_png(const VideoClip& clip, const std::string& dir) {
  fs::create_directories(dir);
  for (int f = 0; f < clip.num_frames; ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05d.png", f);
    write_png_rgb8((fs::path(dir) / name).string(), clip.width, clip.height,
                   frame_to_rgb8(clip, f));
  }
}

VideoClip read_frames_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      files.push_back(entry.path());
  }
  if (files.empty()) throw IoError("no png frames under " + dir);
  std::sort(files.begin(), files.end());

  VideoClip clip;
  for (size_t f = 0; f < files.size(); ++f) {
    int w = 0, h = 0;
    const auto rgb = read_png_rgb8(files[f].string(), &w, &h);
    if (f == 0) {
      clip = VideoClip::zeros(static_cast<int>(files.size()), h, w);
    } else if (w != clip.width || h != clip.height) {
      throw IoError("frame size mismatch in " + dir + ": " + files[f].string());
    }
    float* dst = clip.frame_data(static_cast<int>(f));
    for (size_t i = 0; i < rgb.size(); ++i) dst[i] = dequantize_unit(rgb[i]);
  }
  clip.source_id = dir;
  return clip;
}

void write_frames_gif(const VideoClip& clip, const std::string& path,
                      int delay_cs) {
  std::vector<std::vector<std::uint8_t>> frames;
  frames.reserve(static_cast<size_t>(clip.num_frames));
  for (int f = 0; f < clip.num_frames; ++f) frames.push_back(frame_to_rgb8(clip, f));
  write_gif_rgb8(path, clip.width, clip.height, frames, delay_cs);
}

VideoClip read_gif_clip(const std::string& path) {
  int w = 0, h = 0;
  const auto frames = read_gif_rgb8(path, &w, &h);
  if (frames.empty()) throw IoError("gif has no frames: " + path);
  VideoClip clip = VideoClip::zeros(static_cast<int>(frames.size()), h, w);
  for (size_t f = 0; f < frames.size(); ++f) {
    float* dst = clip.frame_data(static_cast<int>(f));
    for (size_t i = 0; i < frames[f].size(); ++i) dst[i] = dequantize_unit(frames[f][i]);
  }
  clip.source_id = path;
  return clip;
}

}  // namespace marv
