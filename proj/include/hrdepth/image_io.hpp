#pragma once

#include <string>
#include <vector>

#include "hrdepth/tensor.hpp"

namespace hrdepth {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Any PNG (gray, palette, alpha, 16-bit) as (1, 3, H, W) in [0, 1], from 8-bit RGB.
Tensor read_png_rgb(const std::string& path);
/// (1, 3, H, W) or (1, 1, H, W) values clamped to [0, 1] and rounded to 8 bits.
void write_png_rgb(const std::string& path, const Tensor& image);

struct Gray16 {
  int width = 0, height = 0;
  std::vector<unsigned short> values;
};
Gray16 read_png_gray16(const std::string& path);
void write_png_gray16(const std::string& path, const Gray16& img);

/// 16-bit depth image with `scale` counts per metre; zero marks invalid.
Tensor read_depth_png(const std::string& path, double scale = 256.0);
/// Depth (1, 1, H, W) as round(depth * scale), saturated at 65535.
void write_depth_png(const std::string& path, const Tensor& depth, double scale);

}  // namespace hrdepth
