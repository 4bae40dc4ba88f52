#include <fstream>
#include <set>
#include <thread>

#include "uad/config.hpp"
#include "uad/errors.hpp"

namespace uad {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(RefinerMode mode) {
  switch (mode) {
    case RefinerMode::kOff: return "off";
    case RefinerMode::kBuiltin: return "builtin";
    case RefinerMode::kExternal: return "external";
  }
  return "off";
}

RefinerMode refiner_mode_from_string(const std::string& s) {
  if (s == "off") return RefinerMode::kOff;
  if (s == "builtin") return RefinerMode::kBuiltin;
  if (s == "external") return RefinerMode::kExternal;
  throw ConfigError("refiner mode must be off, builtin or external, got '" + s + "'");
}

PipelineConfig PipelineConfig::toy() {
  PipelineConfig c;
  c.model = ModelConfig::toy();
  c.train.lr = 1e-3;
  c.train.batch_size = 16;
  c.train.epochs = 20;
  c.metrics = MetricParams{};
  c.phantom.shape = {32, 96, 96};
  return c;
}

void PipelineConfig::validate() const {
  model.validate();
  train.validate();
  postproc.validate();
  metrics.validate();
  if (refiner == RefinerMode::kExternal && refiner_command.empty())
    throw ConfigError("external refiner mode needs a refiner command");
  if (!(refiner_timeout_s > 0)) throw ConfigError("refiner timeout must be positive");
  if (phantom.shape.height != model.image_size || phantom.shape.width != model.image_size)
    throw ConfigError("phantom slices are " + std::to_string(phantom.shape.height) + "x" +
                      std::to_string(phantom.shape.width) + " but the model expects " +
                      std::to_string(model.image_size));
  if (phantom.shape.depth == 0) throw ConfigError("phantom depth must be positive");
}

std::size_t PipelineConfig::worker_count() const {
  if (workers > 0) return workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

json postproc_json(const PostprocConfig& p) {
  return {{"threshold_fraction", p.threshold_fraction}, {"threshold_floor", p.threshold_floor},
          {"otsu_bins", p.otsu_bins},                   {"connectivity", p.connectivity},
          {"confidence_gate", p.confidence_gate},       {"max_attempts", p.max_attempts},
          {"region_tolerance", p.region_tolerance}};
}

PostprocConfig postproc_from_json(const json& j, PostprocConfig p) {
  reject_unknown(j,
                 {"threshold_fraction", "threshold_floor", "otsu_bins", "connectivity", "confidence_gate",
                  "max_attempts", "region_tolerance"},
                 "postproc");
  p.threshold_fraction = j.value("threshold_fraction", p.threshold_fraction);
  p.threshold_floor = j.value("threshold_floor", p.threshold_floor);
  p.otsu_bins = j.value("otsu_bins", p.otsu_bins);
  p.connectivity = j.value("connectivity", p.connectivity);
  p.confidence_gate = j.value("confidence_gate", p.confidence_gate);
  p.max_attempts = j.value("max_attempts", p.max_attempts);
  p.region_tolerance = j.value("region_tolerance", p.region_tolerance);
  return p;
}

json metrics_json(const MetricParams& m) {
  return {{"dilation_radius", m.dilation_radius},
          {"min_lesion_voxels", m.min_lesion_voxels},
          {"connectivity", m.connectivity},
          {"detection_uses_lesionwise", m.detection_uses_lesionwise}};
}

MetricParams metrics_from_json(const json& j, MetricParams m) {
  reject_unknown(j, {"dilation_radius", "min_lesion_voxels", "connectivity", "detection_uses_lesionwise"}, "metrics");
  m.dilation_radius = j.value("dilation_radius", m.dilation_radius);
  m.min_lesion_voxels = j.value("min_lesion_voxels", m.min_lesion_voxels);
  m.connectivity = j.value("connectivity", m.connectivity);
  m.detection_uses_lesionwise = j.value("detection_uses_lesionwise", m.detection_uses_lesionwise);
  return m;
}

json phantom_json(const PhantomPlan& p) {
  return {{"train_healthy", p.train_healthy},
          {"val_healthy", p.val_healthy},
          {"test_healthy", p.test_healthy},
          {"test_tumor", p.test_tumor},
          {"shape", {p.shape.depth, p.shape.height, p.shape.width}}};
}

PhantomPlan phantom_from_json(const json& j, PhantomPlan p) {
  reject_unknown(j, {"train_healthy", "val_healthy", "test_healthy", "test_tumor", "shape"}, "phantom");
  p.train_healthy = j.value("train_healthy", p.train_healthy);
  p.val_healthy = j.value("val_healthy", p.val_healthy);
  p.test_healthy = j.value("test_healthy", p.test_healthy);
  p.test_tumor = j.value("test_tumor", p.test_tumor);
  if (j.contains("shape")) {
    const auto s = j.at("shape").get<std::array<std::size_t, 3>>();
    p.shape = {s[0], s[1], s[2]};
  }
  return p;
}

}  // namespace

json to_json(const PipelineConfig& c) {
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"postproc", postproc_json(c.postproc)},
          {"refiner", {{"mode", to_string(c.refiner)}, {"command", c.refiner_command}, {"timeout_s", c.refiner_timeout_s}}},
          {"metrics", metrics_json(c.metrics)},
          {"phantom", phantom_json(c.phantom)},
          {"paths", {{"dataset", c.dataset_dir.string()}, {"work", c.work_dir.string()}}},
          {"seed", c.seed},
          {"workers", c.workers}};
}

PipelineConfig pipeline_config_from_json(const json& j, PipelineConfig c) {
  reject_unknown(j, {"model", "train", "postproc", "refiner", "metrics", "phantom", "paths", "seed", "workers"},
                 "pipeline config");
  try {
    if (j.contains("model")) c.model = model_config_from_json(j["model"], c.model);
    if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
    if (j.contains("postproc")) c.postproc = postproc_from_json(j["postproc"], c.postproc);
    if (j.contains("metrics")) c.metrics = metrics_from_json(j["metrics"], c.metrics);
    if (j.contains("phantom")) c.phantom = phantom_from_json(j["phantom"], c.phantom);
    if (j.contains("refiner")) {
      const auto& r = j["refiner"];
      reject_unknown(r, {"mode", "command", "timeout_s"}, "refiner");
      if (r.contains("mode")) c.refiner = refiner_mode_from_string(r["mode"].get<std::string>());
      c.refiner_command = r.value("command", c.refiner_command);
      c.refiner_timeout_s = r.value("timeout_s", c.refiner_timeout_s);
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      reject_unknown(p, {"dataset", "work"}, "paths");
      if (p.contains("dataset")) c.dataset_dir = p["dataset"].get<std::string>();
      if (p.contains("work")) c.work_dir = p["work"].get<std::string>();
    }
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid pipeline config: ") + e.what());
  }
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path, PipelineConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return pipeline_config_from_json(j, std::move(base));
}

}  // namespace uad
