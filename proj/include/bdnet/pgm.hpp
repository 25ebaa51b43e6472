#pragma once

#include <filesystem>

#include "bdnet/tensor.hpp"

namespace bdnet {

/// Reads an 8-bit binary PGM (P5) into a 1x1xHxW tensor of values 0..255.
Tensor read_pgm(const std::filesystem::path& path);

/// Writes a 1x1xHxW tensor as 8-bit P5, clamping and rounding to 0..255.
void write_pgm(const std::filesystem::path& path, const Tensor& gray);

}  // namespace bdnet
