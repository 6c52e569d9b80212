#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gsa/error.hpp"

namespace gsa::png {

namespace detail {

inline void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xFF));
}

inline void put_chunk(std::string& out, std::string_view type, std::string_view data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type);
  body.append(data);
  out.append(body);
  const auto crc = ::crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                           static_cast<uInt>(body.size()));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// 8-bit grayscale PNG, filter type 0 on every scanline.
inline std::string encode_gray8(std::size_t width, std::size_t height,
                                const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height || width == 0 || height == 0) {
    throw Error(ErrorCode::kShape, "png: pixel count does not match extents");
  }
  std::string raw;
  raw.reserve(height * (width + 1));
  for (std::size_t r = 0; r < height; ++r) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(pixels.data() + r * width), width);
  }
  uLongf cap = compressBound(static_cast<uLong>(raw.size()));
  std::string z(cap, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &cap,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                Z_BEST_COMPRESSION) != Z_OK) {
    throw Error(ErrorCode::kIo, "png: deflate failed");
  }
  z.resize(cap);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // depth 8, gray, deflate, filter 0, no interlace
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", z);
  detail::put_chunk(out, "IEND", {});
  return out;
}

/// Min-max rescale to [0, 255] for display; a constant image maps to 0.
inline std::vector<std::uint8_t> display_bytes(const std::vector<float>& values) {
  std::vector<std::uint8_t> out(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = double(*hi) - double(*lo);
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double t = (double(values[i]) - double(*lo)) / span;
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * t), 0L, 255L));
  }
  return out;
}

}  // namespace gsa::png
