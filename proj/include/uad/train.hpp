#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <json.hpp>

#include "uad/model.hpp"
#include "uad/nn/adam.hpp"
#include "uad/volume.hpp"

namespace uad {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = true;
  std::size_t batch_size = 32;
  /// Target epoch count; a resumed state trains until its counter reaches it.
  std::size_t epochs = 100;
  double alpha = 100.0;
  double noise_std = 0.2;
  double ssim_data_range = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Everything a checkpoint holds.
struct ModelState {
  MViTAE model;
  nn::AdamState adam;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t epoch = 0;

  ModelState(const ModelConfig& cfg, std::uint64_t seed) : model(cfg, seed) {}
};

/// Checkpoint directory: header.json (config, counters, manifest of
/// name/shape/offset) plus params.f32, adam_m.f32, adam_v.f32. The directory is
/// replaced atomically (written beside it, then renamed).
void save_checkpoint(const ModelState& state, const std::filesystem::path& dir);
ModelState load_checkpoint(const std::filesystem::path& dir);

struct LossTerms {
  FTensor total;
  double mse = 0.0;
  double ssim = 0.0;
};

/// L = MSE(xhat, x) + alpha * (1 - SSIM(xhat, x)).
LossTerms reconstruction_loss(const FTensor& xhat, const FTensor& x, double alpha, double ssim_data_range);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool saved = false;
};

/// Noise-free loss of `model` over `batch`, averaged per slice.
double evaluate_loss(const MViTAE& model, const SliceBatch& batch, const TrainConfig& cfg);

/// Trains on healthy slices with input noise against the clean target. After
/// every epoch the noiseless validation loss is computed and, when it improves
/// on state.best_val_loss, the state is checkpointed to `checkpoint_dir`.
/// Throws DataError on an empty training set.
std::vector<EpochRecord> train(ModelState& state, const SliceBatch& train_set, const SliceBatch& val_set,
                               const TrainConfig& cfg,
                               const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                               const std::function<void(const EpochRecord&)>& on_epoch = {});

/// `epoch,train_loss,val_loss,saved` with a header row.
void write_loss_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path, bool append = false);

}  // namespace uad
