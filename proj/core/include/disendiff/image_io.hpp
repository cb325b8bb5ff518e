#pragma once

#include <string>
#include <vector>

#include "disendiff/tensor.hpp"

namespace disendiff {

// Binary PPM (P6); image (3,H,W) in [-1,1] mapped to [0,255], round half up.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);  // back to [-1,1]

// Binary PGM (P5); map (H,W) linearly scaled so its max maps to 255.
void write_pgm_scaled(const std::string& path, const Tensor& map);
// PGM of a binary mask (0/1 values -> 0/255).
void write_pgm_mask(const std::string& path, const std::vector<uint8_t>& mask,
                    int h, int w);

}  // namespace disendiff
