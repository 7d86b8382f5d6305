#include "mindvis/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mindvis/binio.hpp"
#include "mindvis/errors.hpp"

namespace mindvis {

Tensor image_to_tensor(const Image& img) {
  Tensor t({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t[(static_cast<std::size_t>(c) * img.height + y) * img.width + x] = img.at(y, x, c);
  return t;
}

Image tensor_to_image(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_image: expected [3, H, W], got " + shape_str(t.shape()));
  Image img(t.dim(1), t.dim(2));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        img.at(y, x, c) = std::clamp(t[(static_cast<std::size_t>(c) * img.height + y) * img.width + x], 0.0, 1.0);
  return img;
}

Image crop_resize(const Image& img, int y0, int x0, int h, int w, int out_h, int out_w) {
  if (h <= 0 || w <= 0 || y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width) {
    throw InvalidArgument("crop_resize: window outside image");
  }
  Image out(out_h, out_w);
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y1 = static_cast<int>(std::floor(fy));
    const int y2 = std::min(y1 + 1, h - 1);
    const double wy = fy - y1;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x1 = static_cast<int>(std::floor(fx));
      const int x2 = std::min(x1 + 1, w - 1);
      const double wx = fx - x1;
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(y0 + y1, x0 + x1, c) * (1.0 - wx) + img.at(y0 + y1, x0 + x2, c) * wx;
        const double bot = img.at(y0 + y2, x0 + x1, c) * (1.0 - wx) + img.at(y0 + y2, x0 + x2, c) * wx;
        out.at(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

std::vector<unsigned char> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels.size());
  for (double v : img.pixels) out.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

void write_ppm(const std::string& path, const Image& img) { binio::write_file(path, encode_ppm(img)); }

Image make_grid(const std::vector<std::vector<Image>>& rows, int pad) {
  if (rows.empty() || rows[0].empty()) throw InvalidArgument("make_grid: no tiles");
  const int th = rows[0][0].height, tw = rows[0][0].width;
  std::size_t ncols = 0;
  for (const auto& r : rows) ncols = std::max(ncols, r.size());
  const int gh = static_cast<int>(rows.size()) * (th + pad) + pad;
  const int gw = static_cast<int>(ncols) * (tw + pad) + pad;
  Image grid(gh, gw, 1.0);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const Image& tile = rows[r][c];
      if (tile.height != th || tile.width != tw) throw InvalidArgument("make_grid: tiles differ in size");
      const int oy = pad + static_cast<int>(r) * (th + pad);
      const int ox = pad + static_cast<int>(c) * (tw + pad);
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x)
          for (int ch = 0; ch < 3; ++ch) grid.at(oy + y, ox + x, ch) = tile.at(y, x, ch);
    }
  return grid;
}

}  // namespace mindvis
