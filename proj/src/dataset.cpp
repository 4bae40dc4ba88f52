#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "uad/dataset.hpp"
#include "uad/errors.hpp"

namespace uad {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<CaseEntry> DatasetManifest::split(const std::string& name) const {
  std::vector<CaseEntry> out;
  std::copy_if(cases.begin(), cases.end(), std::back_inserter(out), [&](const CaseEntry& c) { return c.split == name; });
  return out;
}

const CaseEntry& DatasetManifest::find(const std::string& id) const {
  for (const auto& c : cases)
    if (c.id == id) return c;
  throw DataError("case '" + id + "' is not in the manifest");
}

DatasetManifest load_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("no manifest.json in '" + root.string() + "'");
  DatasetManifest m;
  try {
    const json j = json::parse(in);
    for (const auto& c : j.at("cases"))
      m.cases.push_back({c.at("id").get<std::string>(), c.at("split").get<std::string>(),
                         c.at("tumor_present").get<bool>(), c.at("brain_voxels").get<std::size_t>()});
  } catch (const json::exception& e) {
    throw DataError("malformed manifest in '" + root.string() + "': " + e.what());
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& root) {
  json cases = json::array();
  for (const auto& c : manifest.cases)
    cases.push_back(
        {{"id", c.id}, {"split", c.split}, {"tumor_present", c.tumor_present}, {"brain_voxels", c.brain_voxels}});
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write manifest in '" + root.string() + "'");
  out << json{{"cases", cases}}.dump(2) << "\n";
}

SliceBatch collect_healthy_slices(const fs::path& root, const std::vector<CaseEntry>& cases) {
  SliceBatch out;
  for (const auto& c : cases) {
    const fs::path dir = root / c.id;
    const auto [norm, _] = zscore_normalize(load_volume(dir));
    const LabelVolume labels =
        fs::exists(dir / "labels.u8") ? load_labels(dir, norm.dims()) : LabelVolume(norm.dims());
    out.extend(split_pseudo_volumes(norm, labels).healthy);
  }
  return out;
}

void save_prediction(const LabelVolume& labels, const fs::path& dir) {
  save_labels(labels, dir);
  std::ofstream out(dir / "shape.json");
  if (!out) throw IoError("cannot write '" + (dir / "shape.json").string() + "'");
  out << json{{"shape", {labels.dims.depth, labels.dims.height, labels.dims.width}}}.dump() << "\n";
}

LabelVolume load_prediction(const fs::path& dir) {
  std::ifstream in(dir / "shape.json");
  if (!in) throw IoError("no prediction in '" + dir.string() + "'");
  Dims3 d;
  try {
    const auto s = json::parse(in).at("shape").get<std::array<std::size_t, 3>>();
    d = {s[0], s[1], s[2]};
  } catch (const json::exception& e) {
    throw DataError("malformed prediction shape in '" + dir.string() + "': " + e.what());
  }
  return load_labels(dir, d);
}

void prepare_output_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw IoError("output directory '" + dir.string() + "' is not empty (use --force)");
    fs::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear '" + dir.string() + "': " + ec.message());
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

}  // namespace uad
