#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "attnet/checkpoint.hpp"
#include "attnet/errors.hpp"
#include "attnet/frontend.hpp"

namespace attnet {

// Binary P5 reader. Header comments are allowed; maxval up to 65535
// (16-bit samples are big-endian). Values are scaled to [0, 1] by maxval.
inline Image parse_pgm(std::span<const std::uint8_t> bytes) {
  using Kind = FormatError::Kind;
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError(Kind::bad_magic, "not a PGM file: bad magic");
  if (bytes[1] != '5') {
    throw FormatError(Kind::unsupported_variant,
                      std::string("unsupported netpbm variant P") + static_cast<char>(bytes[1]) + " (only binary P5)");
  }
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_number = [&](const char* what) -> unsigned long {
    skip_space();
    if (pos >= bytes.size()) throw FormatError(Kind::truncated, std::string("PGM header truncated before ") + what);
    if (!std::isdigit(bytes[pos])) throw FormatError(Kind::bad_dims, std::string("PGM header: bad ") + what);
    unsigned long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1'000'000'000UL) throw FormatError(Kind::bad_dims, std::string("PGM header: ") + what + " too large");
    }
    return v;
  };
  const unsigned long width = read_number("width");
  const unsigned long height = read_number("height");
  const unsigned long maxval = read_number("maxval");
  if (width == 0 || height == 0) throw FormatError(Kind::bad_dims, "PGM has zero width or height");
  if (maxval == 0 || maxval > 65535) throw FormatError(Kind::bad_dims, "PGM maxval must lie in [1, 65535]");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw FormatError(Kind::truncated, "PGM header not terminated by whitespace");
  }
  ++pos;
  const std::size_t sample = maxval < 256 ? 1 : 2;
  const std::size_t count = static_cast<std::size_t>(width) * height;
  if (bytes.size() - pos < count * sample) {
    throw FormatError(Kind::truncated, "PGM payload truncated: expected " + std::to_string(count * sample) +
                                           " bytes, got " + std::to_string(bytes.size() - pos));
  }
  Image img(height, width);
  for (std::size_t i = 0; i < count; ++i) {
    unsigned v = bytes[pos + i * sample];
    if (sample == 2) v = (v << 8) | bytes[pos + i * sample + 1];
    img.values[i] = std::min(1.0, static_cast<double>(v) / static_cast<double>(maxval));
  }
  return img;
}

inline Image load_pgm(const std::string& path) { return parse_pgm(read_file_bytes(path)); }

inline std::vector<std::uint8_t> encode_pgm(std::size_t height, std::size_t width, std::span<const std::uint8_t> pixels) {
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

inline void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path);
}

// Writes an image as 8-bit P5, rounding v·255.
inline void export_pgm(const Image& img, const std::string& path) {
  std::vector<std::uint8_t> px(img.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.values[i], 0.0, 1.0) * 255.0));
  }
  write_bytes(path, encode_pgm(img.height, img.width, px));
}

}  // namespace attnet
