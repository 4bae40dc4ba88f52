#include <bit>
#include <cstring>
#include <fstream>

#include "uad/errors.hpp"
#include "uad/train.hpp"

namespace uad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "parameter blobs are written in host order");

constexpr const char* kFormat = "uadseg-checkpoint-v1";

void write_blob(const fs::path& p, const std::vector<float>& values) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

std::vector<float> read_blob(const fs::path& p, std::size_t count) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  if (static_cast<std::size_t>(in.tellg()) != count * 4)
    throw DataError("'" + p.string() + "' does not hold " + std::to_string(count) + " floats");
  in.seekg(0);
  std::vector<float> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * 4));
  if (!in) throw IoError("read failed for '" + p.string() + "'");
  return v;
}

}  // namespace

void save_checkpoint(const ModelState& state, const fs::path& dir) {
  const auto& params = state.model.named_parameters();
  std::vector<float> values, first, second;
  json manifest = json::array();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [name, p] = params[k];
    manifest.push_back({{"name", name}, {"shape", p.shape()}, {"offset", values.size()}});
    values.insert(values.end(), p.values().begin(), p.values().end());
    if (k < state.adam.first.size()) {
      first.insert(first.end(), state.adam.first[k].begin(), state.adam.first[k].end());
      second.insert(second.end(), state.adam.second[k].begin(), state.adam.second[k].end());
    }
  }
  const bool has_moments = !state.adam.first.empty();

  json header = {{"format", kFormat},
                 {"dtype", "f32le"},
                 {"model_config", to_json(state.model.config())},
                 {"epoch", state.epoch},
                 {"best_val_loss", state.best_val_loss},
                 {"parameter_count", values.size()},
                 {"adam",
                  {{"lr", state.adam.lr},
                   {"weight_decay", state.adam.weight_decay},
                   {"decoupled", state.adam.decoupled},
                   {"beta1", state.adam.beta1},
                   {"beta2", state.adam.beta2},
                   {"eps", state.adam.eps},
                   {"step", state.adam.step},
                   {"has_moments", has_moments}}},
                 {"manifest", manifest}};

  fs::path target = dir;
  if (target.filename().empty()) target = target.parent_path();
  const fs::path tmp = target.string() + ".tmp";
  const fs::path old = target.string() + ".old";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw IoError("cannot create '" + tmp.string() + "': " + ec.message());
  {
    std::ofstream out(tmp / "header.json");
    if (!out) throw IoError("cannot write checkpoint header in '" + tmp.string() + "'");
    out << header.dump(2) << "\n";
  }
  write_blob(tmp / "params.f32", values);
  if (has_moments) {
    write_blob(tmp / "adam_m.f32", first);
    write_blob(tmp / "adam_v.f32", second);
  }
  fs::remove_all(old, ec);
  if (fs::exists(target)) fs::rename(target, old);
  fs::rename(tmp, target);
  fs::remove_all(old, ec);
}

ModelState load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "header.json");
  if (!in) throw IoError("no checkpoint header in '" + dir.string() + "'");
  json header;
  try {
    header = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (header.value("format", "") != kFormat) throw DataError("'" + dir.string() + "' is not a checkpoint");

  ModelState state(model_config_from_json(header.at("model_config")), 0);
  const std::size_t count = header.at("parameter_count").get<std::size_t>();
  if (count != state.model.parameter_count())
    throw DataError("checkpoint holds " + std::to_string(count) + " values, model needs " +
                    std::to_string(state.model.parameter_count()));
  const auto values = read_blob(dir / "params.f32", count);
  const auto& adam = header.at("adam");
  const bool has_moments = adam.value("has_moments", false);
  std::vector<float> first, second;
  if (has_moments) {
    first = read_blob(dir / "adam_m.f32", count);
    second = read_blob(dir / "adam_v.f32", count);
  }

  const auto& manifest = header.at("manifest");
  auto& params = state.model.named_parameters();
  if (manifest.size() != params.size()) throw DataError("checkpoint manifest does not match the model layout");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    const auto& entry = manifest[k];
    if (entry.at("name").get<std::string>() != name || entry.at("shape").get<nn::Shape>() != p.shape())
      throw DataError("checkpoint entry '" + entry.at("name").get<std::string>() + "' does not match '" + name + "'");
    const auto offset = entry.at("offset").get<std::size_t>();
    std::memcpy(p.values().data(), values.data() + offset, p.numel() * sizeof(float));
    if (has_moments) {
      state.adam.first.emplace_back(first.begin() + static_cast<std::ptrdiff_t>(offset),
                                    first.begin() + static_cast<std::ptrdiff_t>(offset + p.numel()));
      state.adam.second.emplace_back(second.begin() + static_cast<std::ptrdiff_t>(offset),
                                     second.begin() + static_cast<std::ptrdiff_t>(offset + p.numel()));
    }
  }
  state.adam.lr = adam.at("lr").get<double>();
  state.adam.weight_decay = adam.at("weight_decay").get<double>();
  state.adam.decoupled = adam.at("decoupled").get<bool>();
  state.adam.beta1 = adam.at("beta1").get<double>();
  state.adam.beta2 = adam.at("beta2").get<double>();
  state.adam.eps = adam.at("eps").get<double>();
  state.adam.step = adam.at("step").get<std::uint64_t>();
  state.epoch = header.at("epoch").get<std::size_t>();
  const auto& best = header.at("best_val_loss");
  state.best_val_loss = best.is_number() ? best.get<double>() : std::numeric_limits<double>::infinity();
  return state;
}

}  // namespace uad
