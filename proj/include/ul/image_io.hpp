#pragma once

#include <string>

#include "ul/tensor.hpp"

namespace ul {

// Lossless image files in binary PNM: P5 (1 channel) or P6 (3 channels),
// 16-bit samples. Pixel values map linearly between [-1, 1] and the integer
// range, so a write/read round trip is exact to within half a quantization
// step (2/65535).
void write_pnm(const std::string& path, const Tensor& image);  // [H,W,C], C in {1,3}
Tensor read_pnm(const std::string& path);                      // -> [H,W,C] in [-1,1]

// Center-crop to square, resize (nearest neighbor) and convert channels.
Tensor fit_image(const Tensor& image, int resolution, int channels);

}  // namespace ul
