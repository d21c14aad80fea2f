#pragma once

#include <cstddef>
#include <filesystem>

#include "advin/tensor.hpp"

namespace advin {

/// Writes images (N,C,H,W), C in {1,3}, values clamped to [0,1], as an 8-bit
/// PNG grid with `columns` tiles per row and a one-pixel gutter.
void write_png_grid(const std::filesystem::path& path, const Tensor& images,
                    std::size_t columns = 8);

}  // namespace advin
