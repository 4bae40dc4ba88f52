#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uad/volume.hpp"

namespace uad {

class RegionRefiner;

/// Boolean volume stored as 0/1 bytes in z-major order.
struct BinaryMask3D {
  Dims3 dims;
  std::vector<std::uint8_t> data;

  BinaryMask3D() = default;
  explicit BinaryMask3D(const Dims3& d) : dims(d), data(d.voxels(), 0) {}

  std::size_t count() const;
  bool empty() const { return count() == 0; }
  std::span<std::uint8_t> slice(std::size_t z) { return {data.data() + z * dims.slice_size(), dims.slice_size()}; }
  std::span<const std::uint8_t> slice(std::size_t z) const {
    return {data.data() + z * dims.slice_size(), dims.slice_size()};
  }
  friend bool operator==(const BinaryMask3D&, const BinaryMask3D&) = default;
};

struct Mask2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Mask2D() = default;
  Mask2D(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t count() const;
  friend bool operator==(const Mask2D&, const Mask2D&) = default;
};

struct PostprocConfig {
  double threshold_fraction = 0.2;
  double threshold_floor = 1.2;
  std::size_t otsu_bins = 256;
  /// 3D connectivity for component labeling: 6, 18 or 26.
  int connectivity = 26;
  double confidence_gate = 0.9;
  int max_attempts = 3;
  /// Built-in refiner: admissible deviation from the running region mean.
  double region_tolerance = 1.0;

  void validate() const;
  friend bool operator==(const PostprocConfig&, const PostprocConfig&) = default;
};

/// max(original - recon, 0) per voxel and modality.
MultimodalVolume residual(const MultimodalVolume& original, const MultimodalVolume& recon);

struct ThresholdResult {
  std::vector<float> values;
  double tau = 0.0;
};

/// tau = max(fraction * max(map), floor); values below tau are zeroed.
ThresholdResult threshold(std::span<const float> map, double fraction = 0.2, double floor = 1.2);

struct OtsuResult {
  std::vector<std::uint8_t> mask;
  /// Lower edge of the first foreground bin; NaN when the degenerate rule applied.
  double threshold = 0.0;
};

/// Histograms nonzero values into `bins` bins over [min_nonzero, max] and keeps
/// the bins at or above the split maximizing between-class variance.
OtsuResult otsu_binarize(std::span<const float> map, std::size_t bins = 256);

/// Per axial slice: opening then closing with the 4-neighbour cross.
BinaryMask3D morph_clean(const BinaryMask3D& mask);

/// Component labels in raster order of first voxel (0 = background), plus sizes
/// indexed by label - 1.
struct Components {
  std::vector<std::uint32_t> labels;
  std::vector<std::size_t> sizes;
};
Components label_components_3d(const BinaryMask3D& mask, int connectivity = 26);

/// Keeps the largest component; ties go to the one encountered first.
BinaryMask3D largest_component_3d(const BinaryMask3D& mask, int connectivity = 26);

/// Pixel coordinates use x = column, y = row.
struct Point2 {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

struct PromptSet {
  /// Inclusive (x0, y0, x1, y1).
  std::array<int, 4> bbox{};
  std::array<Point2, 5> points{};
  std::uint64_t seed = 0;
  friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

/// Throws std::invalid_argument on an empty mask.
PromptSet make_prompts(const Mask2D& mask, std::uint64_t seed);

struct RefineOutcome {
  Mask2D mask;
  double confidence = 0.0;
  int attempts = 0;
  bool accepted = false;
};

RefineOutcome refine_slice(std::span<const float> image, const Mask2D& initial, RegionRefiner& refiner,
                           std::uint64_t seed, double gate = 0.9, int max_attempts = 3);

/// Intermediate volumes of one modality, in pipeline order.
struct SegmentTrace {
  std::vector<float> residual;
  std::vector<float> thresholded;
  BinaryMask3D otsu;
  BinaryMask3D morph;
  BinaryMask3D component;
  BinaryMask3D refined;
  double tau = 0.0;
  double otsu_threshold = 0.0;
};

inline constexpr std::array<const char*, 6> kStageNames = {"residual", "threshold", "otsu", "morph", "cc", "refined"};

/// residual -> threshold -> Otsu -> morphology -> largest component, then
/// optional per-slice refinement followed by a second largest-component pass.
BinaryMask3D segment_modality(const MultimodalVolume& vol, const MultimodalVolume& recon, const std::string& tag,
                              RegionRefiner* refiner, bool use_refiner, const PostprocConfig& cfg = {},
                              std::uint64_t seed = 0, SegmentTrace* trace = nullptr);

/// Per axial slice, the mask plus every background pixel not 4-connected to the slice border.
BinaryMask3D fill_holes_2d(const BinaryMask3D& mask);

/// ET = t1c; SNFH = t2f minus t1c; NET = holes of ET or SNFH.
LabelVolume fuse_masks(const BinaryMask3D& t1c, const BinaryMask3D& t2f);

/// Voxels whose label is in `classes`.
BinaryMask3D region_mask(const LabelVolume& labels, std::initializer_list<std::uint8_t> classes);

}  // namespace uad
