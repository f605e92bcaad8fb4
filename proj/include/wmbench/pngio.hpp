#pragma once

#include <filesystem>

#include "wmbench/tensor.hpp"

namespace wmbench {

// Minimal PNG codec for the benchmark's own artifacts: 8-bit grayscale or
// RGB, non-interlaced. Pixels map to [0,1] floats (value / 255).
//
// Writing quantizes with round-to-nearest, so tensors that already sit on
// the 8-bit grid survive a save/load cycle bit-exactly.

void write_png(const std::filesystem::path& path, const Tensor& image, int sample_index = 0);
Tensor read_png(const std::filesystem::path& path);

}  // namespace wmbench
