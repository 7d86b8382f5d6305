#pragma once

#include <string>
#include <vector>

#include "mindvis/tensor.hpp"

namespace mindvis {

// RGB image, height x width x 3, values in [0, 1], interleaved (HWC).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

// [3, H, W] planar tensor.
Tensor image_to_tensor(const Image& img);
// Clamps into [0, 1].
Image tensor_to_image(const Tensor& t);

// Bilinear resample of the window (y0, x0, h, w) to out_h x out_w, sampling
// at pixel centres. A full-size window at the original size is the identity.
Image crop_resize(const Image& img, int y0, int x0, int h, int w, int out_h, int out_w);

// Binary PPM (P6), 8 bits per channel.
void write_ppm(const std::string& path, const Image& img);
std::vector<unsigned char> encode_ppm(const Image& img);

// Rows of equally sized tiles separated by `pad` pixels of white.
Image make_grid(const std::vector<std::vector<Image>>& rows, int pad = 2);

}  // namespace mindvis
