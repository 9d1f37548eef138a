#pragma once

// Binary PPM (P6, maxval 255).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "cobit/codebook.hpp"

namespace cobit {

inline std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)); }

inline void write_ppm(const RawImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image '" + path + "'");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string bytes(img.pixels.size(), '\0');
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<char>(to_byte(img.pixels[i]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to '" + path + "'");
}

/// Reads P6 with maxval 255; pixel values become byte / 255.
inline RawImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read image '" + path + "'");
  auto token = [&] {
    std::string t;
    for (int c; (c = in.get()) != EOF;) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(c)) {
        if (!t.empty()) break;
      } else {
        t += char(c);
      }
    }
    return t;
  };
  if (token() != "P6") throw FormatError("image '" + path + "' is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError("image '" + path + "': malformed header");
  }
  if (w == 0 || h == 0 || maxval != 255) throw FormatError("image '" + path + "': expected maxval 255 and a non-empty size");
  RawImage img(h, w);
  std::string bytes(img.pixels.size(), '\0');
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw FormatError("image '" + path + "': truncated");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = float(static_cast<unsigned char>(bytes[i])) / 255.f;
  return img;
}

}  // namespace cobit
