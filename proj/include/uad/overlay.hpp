#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "uad/volume.hpp"

namespace uad {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Colour per label 0..3; background is never painted.
inline constexpr std::array<Rgb, 4> kLabelColours = {Rgb{0, 0, 0}, Rgb{230, 40, 40}, Rgb{40, 200, 40},
                                                     Rgb{40, 90, 240}};

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
};

/// Grayscale of `base` mapped from [lo, hi], blended with the label colours.
RgbImage render_overlay(std::span<const float> base, std::span<const std::uint8_t> labels, std::size_t height,
                        std::size_t width, float lo, float hi, float alpha = 0.5f);

/// Fixed zlib level and no timestamp chunk, so equal images give equal bytes.
void write_png(const RgbImage& image, const std::filesystem::path& path);

}  // namespace uad
