#include "uad/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "uad/errors.hpp"

namespace uad {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(const Dims3& d) {
  return "(" + std::to_string(d.depth) + "," + std::to_string(d.height) + "," +
         std::to_string(d.width) + ")";
}

MultimodalVolume::MultimodalVolume(std::vector<std::string> modalities, Dims3 dims,
                                   std::array<float, 3> spacing_mm)
    : MultimodalVolume(std::move(modalities), dims, spacing_mm, {}) {}

MultimodalVolume::MultimodalVolume(std::vector<std::string> modalities, Dims3 dims,
                                   std::array<float, 3> spacing_mm, std::vector<float> data)
    : modalities_(std::move(modalities)), dims_(dims), spacing_(spacing_mm), data_(std::move(data)) {
  if (modalities_.empty()) throw DataError("volume needs at least one modality");
  std::set<std::string> unique(modalities_.begin(), modalities_.end());
  if (unique.size() != modalities_.size()) throw DataError("duplicate modality tags");
  if (dims_.depth == 0 || dims_.height == 0 || dims_.width == 0)
    throw DataError("volume extent must be positive, got " + to_string(dims_));
  for (float s : spacing_)
    if (!(s > 0.f)) throw DataError("spacing must be positive");
  const std::size_t n = modalities_.size() * dims_.voxels();
  if (data_.empty()) data_.assign(n, 0.f);
  if (data_.size() != n)
    throw ShapeMismatch("volume data has " + std::to_string(data_.size()) + " values, expected " +
                        std::to_string(n));
}

std::size_t MultimodalVolume::modality_index(const std::string& tag) const {
  auto it = std::find(modalities_.begin(), modalities_.end(), tag);
  if (it == modalities_.end()) throw DataError("volume has no modality '" + tag + "'");
  return static_cast<std::size_t>(it - modalities_.begin());
}

std::span<float> MultimodalVolume::channel(std::size_t m) {
  return {data_.data() + m * dims_.voxels(), dims_.voxels()};
}
std::span<const float> MultimodalVolume::channel(std::size_t m) const {
  return {data_.data() + m * dims_.voxels(), dims_.voxels()};
}
std::span<float> MultimodalVolume::slice(std::size_t m, std::size_t z) {
  return channel(m).subspan(z * dims_.slice_size(), dims_.slice_size());
}
std::span<const float> MultimodalVolume::slice(std::size_t m, std::size_t z) const {
  return channel(m).subspan(z * dims_.slice_size(), dims_.slice_size());
}

void SliceBatch::append(std::span<const float> values, std::size_t z) {
  if (values.size() != slice_elems()) throw ShapeMismatch("slice size does not match batch geometry");
  data.insert(data.end(), values.begin(), values.end());
  z_index.push_back(z);
}

void SliceBatch::extend(const SliceBatch& other) {
  if (other.empty()) return;
  if (empty() && data.empty()) {
    channels = other.channels;
    height = other.height;
    width = other.width;
  }
  if (other.channels != channels || other.height != height || other.width != width)
    throw ShapeMismatch("cannot concatenate slice batches of different geometry");
  data.insert(data.end(), other.data.begin(), other.data.end());
  z_index.insert(z_index.end(), other.z_index.begin(), other.z_index.end());
}

namespace {

static_assert(sizeof(float) == 4);

void write_bytes(const fs::path& p, const char* bytes, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  out.write(bytes, static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<char> buf(size);
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  if (!in) throw IoError("read failed for '" + p.string() + "'");
  return buf;
}

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

void floats_to_le(std::span<const float> in, std::vector<char>& out) {
  out.resize(in.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), in.data(), out.size());
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::uint32_t v = byteswap32(std::bit_cast<std::uint32_t>(in[i]));
      std::memcpy(out.data() + 4 * i, &v, 4);
    }
  }
}

void le_to_floats(const std::vector<char>& in, std::span<float> out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), in.data(), in.size());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t v;
      std::memcpy(&v, in.data() + 4 * i, 4);
      out[i] = std::bit_cast<float>(byteswap32(v));
    }
  }
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in '" + p.string() + "': " + e.what());
  }
}

}  // namespace

MultimodalVolume load_volume(const fs::path& dir) {
  const fs::path header_path = dir / "header.json";
  if (!fs::exists(header_path)) throw DataError("missing header.json in '" + dir.string() + "'");
  const json header = read_json(header_path);

  std::vector<std::string> tags;
  std::array<std::size_t, 4> shape{};
  std::array<float, 3> spacing{};
  try {
    tags = header.at("modalities").get<std::vector<std::string>>();
    const auto s = header.at("shape").get<std::vector<std::size_t>>();
    const auto sp = header.at("spacing_mm").get<std::vector<float>>();
    if (s.size() != 4 || sp.size() != 3) throw DataError("header shape/spacing has wrong arity");
    std::copy(s.begin(), s.end(), shape.begin());
    std::copy(sp.begin(), sp.end(), spacing.begin());
    if (header.value("dtype", "f32le") != "f32le") throw DataError("unsupported dtype");
    if (header.value("order", "zyx") != "zyx") throw DataError("unsupported order");
  } catch (const json::exception& e) {
    throw DataError("invalid header in '" + dir.string() + "': " + e.what());
  }
  if (shape[0] != tags.size())
    throw DataError("header declares " + std::to_string(shape[0]) + " modalities but lists " +
                    std::to_string(tags.size()));
  std::set<std::string> unique(tags.begin(), tags.end());
  if (unique.size() != tags.size()) throw DataError("duplicate modality tags in header");

  MultimodalVolume vol(tags, Dims3{shape[1], shape[2], shape[3]}, spacing);
  const std::size_t expected = 4 * vol.dims().voxels();
  for (std::size_t m = 0; m < tags.size(); ++m) {
    const fs::path raw = dir / (tags[m] + ".f32");
    if (!fs::exists(raw)) throw MissingModality(tags[m]);
    const auto bytes = read_bytes(raw);
    if (bytes.size() != expected)
      throw DataError("'" + raw.string() + "' has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(expected));
    auto ch = vol.channel(m);
    le_to_floats(bytes, ch);
    for (std::size_t i = 0; i < ch.size(); ++i)
      if (!std::isfinite(ch[i])) throw NonFiniteData(tags[m], i);
  }
  return vol;
}

void save_volume(const MultimodalVolume& vol, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const auto& d = vol.dims();
  json header;
  header["shape"] = {vol.n_modalities(), d.depth, d.height, d.width};
  header["spacing_mm"] = vol.spacing_mm();
  header["modalities"] = vol.modalities();
  header["dtype"] = "f32le";
  header["order"] = "zyx";
  const std::string text = header.dump(2) + "\n";
  write_bytes(dir / "header.json", text.data(), text.size());

  std::vector<char> buf;
  for (std::size_t m = 0; m < vol.n_modalities(); ++m) {
    floats_to_le(vol.channel(m), buf);
    write_bytes(dir / (vol.modalities()[m] + ".f32"), buf.data(), buf.size());
  }
}

LabelVolume load_labels(const fs::path& dir, const Dims3& dims) {
  const fs::path raw = dir / "labels.u8";
  const auto bytes = read_bytes(raw);
  if (bytes.size() != dims.voxels())
    throw DataError("'" + raw.string() + "' has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(dims.voxels()));
  LabelVolume labels(dims);
  std::memcpy(labels.data.data(), bytes.data(), bytes.size());
  for (std::size_t i = 0; i < labels.data.size(); ++i)
    if (labels.data[i] > 3)
      throw DataError("label value " + std::to_string(labels.data[i]) + " at flat index " +
                      std::to_string(i) + " is not in {0,1,2,3}");
  return labels;
}

void save_labels(const LabelVolume& labels, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  write_bytes(dir / "labels.u8", reinterpret_cast<const char*>(labels.data.data()), labels.data.size());
}

std::pair<MultimodalVolume, std::vector<NormalizationRecord>> zscore_normalize(
    const MultimodalVolume& vol) {
  MultimodalVolume out = vol;
  std::vector<NormalizationRecord> records;
  for (std::size_t m = 0; m < vol.n_modalities(); ++m) {
    const auto in = vol.channel(m);
    double sum = 0.0;
    for (float v : in) sum += v;
    const double mean = sum / static_cast<double>(in.size());
    double sq = 0.0;
    for (float v : in) sq += (v - mean) * (v - mean);
    const double stddev = std::sqrt(sq / static_cast<double>(in.size()));
    const double denom = std::max(stddev, static_cast<double>(kNormEpsilon));
    auto o = out.channel(m);
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = static_cast<float>((in[i] - mean) / denom);
    records.push_back({static_cast<float>(mean), static_cast<float>(stddev), kNormEpsilon});
  }
  return {std::move(out), std::move(records)};
}

MultimodalVolume zscore_denormalize(const MultimodalVolume& vol,
                                    const std::vector<NormalizationRecord>& records) {
  if (records.size() != vol.n_modalities())
    throw ShapeMismatch("normalization record count does not match modality count");
  MultimodalVolume out = vol;
  for (std::size_t m = 0; m < vol.n_modalities(); ++m) {
    const double scale = std::max(static_cast<double>(records[m].std),
                                  static_cast<double>(records[m].epsilon));
    for (float& v : out.channel(m)) v = static_cast<float>(v * scale + records[m].mean);
  }
  return out;
}

namespace {

void gather_slice(const MultimodalVolume& vol, std::size_t z, std::vector<float>& buf) {
  const std::size_t plane = vol.dims().slice_size();
  buf.resize(vol.n_modalities() * plane);
  for (std::size_t m = 0; m < vol.n_modalities(); ++m) {
    const auto s = vol.slice(m, z);
    std::copy(s.begin(), s.end(), buf.begin() + static_cast<std::ptrdiff_t>(m * plane));
  }
}

SliceBatch empty_batch_like(const MultimodalVolume& vol) {
  SliceBatch b;
  b.channels = vol.n_modalities();
  b.height = vol.dims().height;
  b.width = vol.dims().width;
  return b;
}

}  // namespace

PseudoVolumeSplit split_pseudo_volumes(const MultimodalVolume& vol, const LabelVolume& labels) {
  if (labels.dims != vol.dims())
    throw ShapeMismatch("label extent " + to_string(labels.dims) + " does not match volume " +
                        to_string(vol.dims()));
  PseudoVolumeSplit split{empty_batch_like(vol), empty_batch_like(vol)};
  const std::size_t plane = vol.dims().slice_size();
  std::vector<float> buf;
  for (std::size_t z = 0; z < vol.dims().depth; ++z) {
    const auto first = labels.data.begin() + static_cast<std::ptrdiff_t>(z * plane);
    const bool anomalous = std::any_of(first, first + static_cast<std::ptrdiff_t>(plane),
                                       [](std::uint8_t l) { return l != 0; });
    gather_slice(vol, z, buf);
    (anomalous ? split.anomalous : split.healthy).append(buf, z);
  }
  return split;
}

SliceBatch volume_slices(const MultimodalVolume& vol) {
  SliceBatch b = empty_batch_like(vol);
  std::vector<float> buf;
  for (std::size_t z = 0; z < vol.dims().depth; ++z) {
    gather_slice(vol, z, buf);
    b.append(buf, z);
  }
  return b;
}

}  // namespace uad
