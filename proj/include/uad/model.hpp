#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uad/nn/tensor.hpp"
#include "uad/volume.hpp"

namespace uad {

using FTensor = nn::Tensor<float>;

enum class LatentPooling { kFlatten, kMean };
enum class FfnActivation { kGelu, kRelu };
enum class PositionalEncoding { kLearned, kSinusoidal };

/// Architecture hyperparameters of the multimodal ViT autoencoder.
struct ModelConfig {
  std::size_t image_size = 240;
  std::size_t patch_size = 24;
  std::size_t n_modalities = 4;
  std::size_t embed_dim = 512;
  std::size_t n_layers = 6;
  std::size_t n_heads = 8;
  std::size_t ffn_dim = 1024;
  std::size_t latent_dim = 512;
  /// (channels, side, side) the latent vector is reshaped into.
  std::array<std::size_t, 3> decoder_seed_shape{8, 8, 8};
  /// Number of 3x3 convolutions; the last one projects to n_modalities.
  std::size_t decoder_layers = 6;
  /// Output width of the first decoder convolution; halved per stage.
  std::size_t decoder_channels = 256;
  std::size_t decoder_min_channels = 8;
  LatentPooling pooling = LatentPooling::kFlatten;
  FfnActivation ffn_activation = FfnActivation::kGelu;
  PositionalEncoding positional = PositionalEncoding::kLearned;

  static ModelConfig paper_scale();
  /// 96x96 desk-scale instance.
  static ModelConfig toy();

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
  std::size_t tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
  /// x2 upsamples needed to grow the seed to at least image_size.
  std::size_t upsample_count() const;
  /// Output channels of decoder convolution i.
  std::size_t decoder_out_channels(std::size_t i) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep defaults; unknown keys throw ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Multimodal ViT autoencoder: patch embedding, pre-norm transformer encoder,
/// fusion layer to a latent vector, convolutional upsampling decoder.
class MViTAE {
 public:
  MViTAE(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// x: [B, n_modalities, image_size, image_size] -> same shape.
  FTensor forward(const FTensor& x) const;

  /// Parameters in a fixed order, keyed by layer path.
  const std::vector<std::pair<std::string, FTensor>>& named_parameters() const { return params_; }
  std::vector<std::pair<std::string, FTensor>>& named_parameters() { return params_; }
  std::vector<FTensor> parameters() const;
  std::size_t parameter_count() const;
  /// Throws std::out_of_range for an unknown name.
  FTensor& parameter(const std::string& name);
  const FTensor& parameter(const std::string& name) const;

  void zero_grad();

 private:
  FTensor& add_param(const std::string& name, nn::Shape shape, std::vector<float> values);

  ModelConfig cfg_;
  std::vector<std::pair<std::string, FTensor>> params_;
  FTensor sinusoidal_;
};

/// Convenience: reconstruct every slice of `batch` without noise or grad,
/// processing at most `chunk` slices per forward call.
SliceBatch reconstruct_slices(const MViTAE& model, const SliceBatch& batch, std::size_t chunk = 16);

/// Slice-wise reconstruction of a normalized volume; H = W = image_size required.
MultimodalVolume reconstruct_volume(const MViTAE& model, const MultimodalVolume& vol);

}  // namespace uad
