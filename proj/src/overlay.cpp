#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "uad/errors.hpp"
#include "uad/overlay.hpp"

namespace uad {

RgbImage render_overlay(std::span<const float> base, std::span<const std::uint8_t> labels, std::size_t height,
                        std::size_t width, float lo, float hi, float alpha) {
  if (base.size() != height * width || (!labels.empty() && labels.size() != height * width))
    throw ShapeMismatch("overlay inputs do not match " + std::to_string(height) + "x" + std::to_string(width));
  RgbImage img{height, width, std::vector<std::uint8_t>(height * width * 3)};
  const float span = hi > lo ? hi - lo : 1.f;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const float g = std::clamp((base[i] - lo) / span, 0.f, 1.f) * 255.f;
    float rgb[3] = {g, g, g};
    const std::uint8_t l = labels.empty() ? 0 : labels[i];
    if (l > 0 && l < kLabelColours.size()) {
      const Rgb c = kLabelColours[l];
      rgb[0] = (1 - alpha) * rgb[0] + alpha * c.r;
      rgb[1] = (1 - alpha) * rgb[1] + alpha * c.g;
      rgb[2] = (1 - alpha) * rgb[2] + alpha * c.b;
    }
    for (int k = 0; k < 3; ++k) img.pixels[i * 3 + k] = static_cast<std::uint8_t>(std::lround(rgb[k]));
  }
  return img;
}

void write_png(const RgbImage& image, const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y)
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() + y * image.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace uad
