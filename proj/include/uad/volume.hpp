#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace uad {

inline constexpr float kNormEpsilon = 1e-8f;

/// Extent of a 3D grid, z outermost.
struct Dims3 {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t voxels() const { return depth * height * width; }
  std::size_t slice_size() const { return height * width; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * height + y) * width + x;
  }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

std::string to_string(const Dims3& d);

/// Multimodal 3D intensity volume stored as (modality, z, y, x), C order.
class MultimodalVolume {
 public:
  MultimodalVolume() = default;
  MultimodalVolume(std::vector<std::string> modalities, Dims3 dims,
                   std::array<float, 3> spacing_mm = {1.f, 1.f, 1.f});
  MultimodalVolume(std::vector<std::string> modalities, Dims3 dims,
                   std::array<float, 3> spacing_mm, std::vector<float> data);

  const std::vector<std::string>& modalities() const { return modalities_; }
  std::size_t n_modalities() const { return modalities_.size(); }
  const Dims3& dims() const { return dims_; }
  const std::array<float, 3>& spacing_mm() const { return spacing_; }

  /// Position of `tag` in the modality list; throws DataError if absent.
  std::size_t modality_index(const std::string& tag) const;

  std::span<float> channel(std::size_t m);
  std::span<const float> channel(std::size_t m) const;
  std::span<float> slice(std::size_t m, std::size_t z);
  std::span<const float> slice(std::size_t m, std::size_t z) const;

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  float& at(std::size_t m, std::size_t z, std::size_t y, std::size_t x) {
    return data_[m * dims_.voxels() + dims_.index(z, y, x)];
  }
  float at(std::size_t m, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[m * dims_.voxels() + dims_.index(z, y, x)];
  }

  friend bool operator==(const MultimodalVolume&, const MultimodalVolume&) = default;

 private:
  std::vector<std::string> modalities_;
  Dims3 dims_;
  std::array<float, 3> spacing_{1.f, 1.f, 1.f};
  std::vector<float> data_;
};

enum Label : std::uint8_t { kBackground = 0, kNET = 1, kSNFH = 2, kET = 3 };

/// Voxel labels {0 background, 1 NET, 2 SNFH, 3 ET}.
struct LabelVolume {
  Dims3 dims;
  std::vector<std::uint8_t> data;

  LabelVolume() = default;
  explicit LabelVolume(Dims3 d) : dims(d), data(d.voxels(), 0) {}

  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return data[dims.index(z, y, x)]; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return data[dims.index(z, y, x)];
  }
  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

struct NormalizationRecord {
  float mean = 0.f;
  float std = 0.f;
  float epsilon = kNormEpsilon;
};

/// Channel-concatenated axial slices, stored (n, modality, y, x).
struct SliceBatch {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;
  /// Source z index for every slice, in order.
  std::vector<std::size_t> z_index;

  std::size_t size() const { return z_index.size(); }
  bool empty() const { return z_index.empty(); }
  std::size_t slice_elems() const { return channels * height * width; }
  std::span<const float> slice(std::size_t i) const {
    return {data.data() + i * slice_elems(), slice_elems()};
  }
  void append(std::span<const float> values, std::size_t z);
  /// Concatenates `other` onto this batch; geometry must match.
  void extend(const SliceBatch& other);
};

MultimodalVolume load_volume(const std::filesystem::path& dir);
void save_volume(const MultimodalVolume& vol, const std::filesystem::path& dir);

/// Reads `labels.u8` from a case directory; `dims` is the expected extent.
LabelVolume load_labels(const std::filesystem::path& dir, const Dims3& dims);
void save_labels(const LabelVolume& labels, const std::filesystem::path& dir);

/// Per-volume, per-modality z-score over all voxels.
std::pair<MultimodalVolume, std::vector<NormalizationRecord>> zscore_normalize(
    const MultimodalVolume& vol);
MultimodalVolume zscore_denormalize(const MultimodalVolume& vol,
                                    const std::vector<NormalizationRecord>& records);

struct PseudoVolumeSplit {
  SliceBatch healthy;
  SliceBatch anomalous;
};

/// A slice is anomalous iff any of its labels is nonzero.
PseudoVolumeSplit split_pseudo_volumes(const MultimodalVolume& vol, const LabelVolume& labels);

/// All axial slices of a volume, in z order.
SliceBatch volume_slices(const MultimodalVolume& vol);

}  // namespace uad
