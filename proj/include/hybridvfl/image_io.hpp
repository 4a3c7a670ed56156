#pragma once

#include <string>

#include "hybridvfl/tensor.hpp"

namespace hvfl {

// Decode a PNG/JPEG file to [3,H,W] RGB floats in [0,1], resized to
// target_size x target_size (no resize when target_size == 0).
// Throws IngestionError with the path on failure.
Tensor decode_image(const std::string& path, std::size_t target_size);

// Write [3,H,W] floats in [0,1] as an 8-bit PNG.
void encode_png(const std::string& path, const Tensor& image);

bool image_io_available();

}  // namespace hvfl
