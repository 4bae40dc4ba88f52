#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "uad/volume.hpp"

namespace uad {

/// Tissue classes the generator paints. Order is the column order of IntensityModel.
enum class Tissue : std::size_t { kBackground, kGray, kWhite, kET, kNET, kSNFH, kCount };

inline constexpr std::size_t kTissueCount = static_cast<std::size_t>(Tissue::kCount);
inline constexpr std::array<const char*, 4> kPhantomModalities = {"t1c", "t1n", "t2f", "t2w"};
inline constexpr std::array<const char*, kTissueCount> kTissueNames = {
    "background", "gray", "white", "et", "net", "snfh"};

struct TissueIntensity {
  float mean = 0.f;
  float std = 0.f;
  friend bool operator==(const TissueIntensity&, const TissueIntensity&) = default;
};

/// Raw-intensity (mean, texture std) per modality and tissue.
struct IntensityModel {
  std::array<std::array<TissueIntensity, kTissueCount>, kPhantomModalities.size()> table{};

  const TissueIntensity& get(std::size_t modality, Tissue t) const {
    return table[modality][static_cast<std::size_t>(t)];
  }
  static IntensityModel defaults();
  friend bool operator==(const IntensityModel&, const IntensityModel&) = default;
};

struct PhantomSpec {
  Dims3 shape{32, 96, 96};
  std::uint64_t seed = 0;
  bool tumor_present = false;
  int tumor_count = 1;
  IntensityModel intensity = IntensityModel::defaults();
  /// Gaussian sigma (voxels) of the tissue texture.
  float smoothness_sigma = 1.5f;
  /// Range of the outer (SNFH) in-plane tumor radius, voxels.
  float tumor_radius_min = 5.5f;
  float tumor_radius_max = 8.5f;

  friend bool operator==(const PhantomSpec&, const PhantomSpec&) = default;
};

struct Phantom {
  MultimodalVolume volume;
  LabelVolume labels;
  /// Voxels whose brain membership weight is at least one half.
  std::size_t brain_voxels = 0;
};

/// Deterministic in `spec`; throws ConfigError if the tumors do not fit the brain.
Phantom generate_phantom(const PhantomSpec& spec);

nlohmann::json to_json(const PhantomSpec& spec);
/// Missing keys keep their defaults; unknown keys are rejected.
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

}  // namespace uad
