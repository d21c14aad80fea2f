#include "advin/png.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace advin {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& body) {
  put_u32(out, static_cast<std::uint32_t>(body.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), body.begin(), body.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png_grid(const std::filesystem::path& path, const Tensor& images, std::size_t columns) {
  if (images.rank() != 4) throw ShapeError("png: expected (N,C,H,W), got " + to_string(images.shape()));
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (c != 1 && c != 3) throw ShapeError("png: channel count must be 1 or 3");
  columns = std::max<std::size_t>(1, std::min(columns, n));
  const std::size_t rows = (n + columns - 1) / columns;
  const std::size_t width = columns * (w + 1) + 1, height = rows * (h + 1) + 1;

  std::vector<std::uint8_t> raw;
  raw.reserve(height * (1 + width * c));
  for (std::size_t py = 0; py < height; ++py) {
    raw.push_back(0);  // filter: none
    for (std::size_t px = 0; px < width; ++px) {
      const bool gutter = py % (h + 1) == 0 || px % (w + 1) == 0;
      const std::size_t tile = (py / (h + 1)) * columns + px / (w + 1);
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::uint8_t v = 255;
        if (!gutter && tile < n) {
          const std::size_t y = py % (h + 1) - 1, x = px % (w + 1) - 1;
          const float f = images[((tile * c + ch) * h + y) * w + x];
          v = static_cast<std::uint8_t>(std::lround(std::clamp(f, 0.0f, 1.0f) * 255.0f));
        }
        raw.push_back(v);
      }
    }
  }

  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> packed(packed_size);
  if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("png: deflate failed");
  }
  packed.resize(packed_size);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.insert(ihdr.end(), {8, static_cast<std::uint8_t>(c == 3 ? 2 : 0), 0, 0, 0});
  chunk(out, "IHDR", ihdr);
  chunk(out, "IDAT", packed);
  chunk(out, "IEND", {});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("png: cannot open " + path.string());
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw std::runtime_error("png: write failed for " + path.string());
}

}  // namespace advin
