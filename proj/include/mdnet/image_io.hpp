#pragma once

#include <fstream>

#include "mdnet/common.hpp"

namespace mdnet {

// Binary netpbm readers/writers. Grayscale cache images use P5 (8- or
// 16-bit; 16-bit samples are big-endian per the format), color output uses
// P6. Both are lossless and dependency-free.

struct GrayImage {
  int64_t h = 0, w = 0;
  int maxval = 255;
  std::vector<uint16_t> px;  // row-major, already byte-order normalized
};

struct RgbImage {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> px;  // interleaved rgb
};

namespace pnm_detail {

inline int next_token(std::istream& is) {
  // skips whitespace and '#' comments, returns the next integer
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  int v;
  if (!(is >> v)) throw IoError("malformed netpbm header");
  return v;
}

}  // namespace pnm_detail

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image: " + path);
  os << "P5\n" << img.w << " " << img.h << "\n" << img.maxval << "\n";
  if (img.maxval > 255) {
    for (uint16_t v : img.px) {
      const uint8_t hi = uint8_t(v >> 8), lo = uint8_t(v & 0xff);
      os.put(char(hi));
      os.put(char(lo));
    }
  } else {
    for (uint16_t v : img.px) os.put(char(uint8_t(v)));
  }
  if (!os) throw IoError("write failure: " + path);
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read image: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') throw IoError("not a binary PGM file: " + path);
  GrayImage img;
  img.w = pnm_detail::next_token(is);
  img.h = pnm_detail::next_token(is);
  img.maxval = pnm_detail::next_token(is);
  is.get();  // single whitespace after maxval
  img.px.resize(size_t(img.h * img.w));
  if (img.maxval > 255) {
    std::vector<uint8_t> raw(img.px.size() * 2);
    is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (!is) throw IoError("truncated PGM data: " + path);
    for (size_t i = 0; i < img.px.size(); ++i)
      img.px[i] = uint16_t((raw[2 * i] << 8) | raw[2 * i + 1]);
  } else {
    std::vector<uint8_t> raw(img.px.size());
    is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (!is) throw IoError("truncated PGM data: " + path);
    for (size_t i = 0; i < img.px.size(); ++i) img.px[i] = raw[i];
  }
  return img;
}

inline void write_ppm(const std::string& path, const RgbImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image: " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.px.data()), std::streamsize(img.px.size()));
  if (!os) throw IoError("write failure: " + path);
}

// Perceptually uniform colormap (viridis anchors, linearly interpolated);
// fixed so emitted heatmaps are reproducible goldens.
inline std::array<uint8_t, 3> viridis(real t) {
  static const uint8_t anchors[][3] = {
      {68, 1, 84},    {71, 19, 101},  {72, 36, 117},  {70, 52, 128},  {65, 68, 135},
      {59, 82, 139},  {53, 95, 141},  {47, 108, 142}, {42, 120, 142}, {37, 132, 142},
      {33, 145, 140}, {30, 156, 137}, {34, 168, 132}, {47, 180, 124}, {68, 191, 112},
      {94, 201, 98},  {122, 209, 81}, {155, 217, 60}, {189, 223, 38}, {223, 227, 24},
      {253, 231, 37}};
  constexpr int n = int(sizeof(anchors) / sizeof(anchors[0]));
  t = std::clamp(t, 0.0, 1.0);
  const real pos = t * real(n - 1);
  const int lo = int(pos);
  const int hi = std::min(lo + 1, n - 1);
  const real f = pos - real(lo);
  std::array<uint8_t, 3> out;
  for (int c = 0; c < 3; ++c)
    out[size_t(c)] =
        uint8_t(std::lround(real(anchors[lo][c]) * (1.0 - f) + real(anchors[hi][c]) * f));
  return out;
}

}  // namespace mdnet
