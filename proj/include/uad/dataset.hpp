#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "uad/volume.hpp"

namespace uad {

struct CaseEntry {
  std::string id;
  /// "train", "val" or "test".
  std::string split;
  bool tumor_present = false;
  std::size_t brain_voxels = 0;
  friend bool operator==(const CaseEntry&, const CaseEntry&) = default;
};

/// `manifest.json` at the dataset root; each case lives in `<root>/<id>/`.
struct DatasetManifest {
  std::vector<CaseEntry> cases;

  std::vector<CaseEntry> split(const std::string& name) const;
  /// Throws DataError for an unknown id.
  const CaseEntry& find(const std::string& id) const;
};

DatasetManifest load_manifest(const std::filesystem::path& root);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& root);

/// Healthy slices of every listed case, concatenated in manifest order.
SliceBatch collect_healthy_slices(const std::filesystem::path& root, const std::vector<CaseEntry>& cases);

/// Prediction directory layout: `<dir>/labels.u8` plus `shape.json`.
void save_prediction(const LabelVolume& labels, const std::filesystem::path& dir);
LabelVolume load_prediction(const std::filesystem::path& dir);

/// Refuses a non-empty `dir` unless `force`, in which case it is cleared.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

}  // namespace uad
