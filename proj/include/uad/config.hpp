#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "uad/metrics.hpp"
#include "uad/model.hpp"
#include "uad/phantom.hpp"
#include "uad/postproc.hpp"
#include "uad/train.hpp"

namespace uad {

enum class RefinerMode { kOff, kBuiltin, kExternal };

const char* to_string(RefinerMode mode);
/// Throws ConfigError on anything but off, builtin or external.
RefinerMode refiner_mode_from_string(const std::string& s);

/// Case counts per split for generated phantom datasets.
struct PhantomPlan {
  std::size_t train_healthy = 12;
  std::size_t val_healthy = 2;
  std::size_t test_healthy = 10;
  std::size_t test_tumor = 20;
  Dims3 shape{32, 240, 240};
  friend bool operator==(const PhantomPlan&, const PhantomPlan&) = default;
};

struct PipelineConfig {
  ModelConfig model = ModelConfig::paper_scale();
  TrainConfig train;
  PostprocConfig postproc;
  RefinerMode refiner = RefinerMode::kOff;
  std::string refiner_command;
  double refiner_timeout_s = 120.0;
  MetricParams metrics = MetricParams::paper_scale();
  PhantomPlan phantom;
  std::filesystem::path dataset_dir = "dataset";
  std::filesystem::path work_dir = "run";
  std::uint64_t seed = 0;
  /// Parallel cases; 0 means one per hardware thread.
  std::size_t workers = 0;

  /// Toy-scale model and phantom-scale metric settings.
  static PipelineConfig toy();

  void validate() const;
  std::size_t worker_count() const;
  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

nlohmann::json to_json(const PipelineConfig& cfg);
/// Missing keys keep the values in `base`; unknown keys throw ConfigError.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path, PipelineConfig base = {});

}  // namespace uad
