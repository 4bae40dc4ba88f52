#include "uad/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "uad/errors.hpp"
#include "uad/nn/ops.hpp"
#include "uad/rng.hpp"

namespace uad {

using nlohmann::json;
namespace ops = nn;

ModelConfig ModelConfig::paper_scale() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.image_size = 96;
  c.patch_size = 12;
  c.embed_dim = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.ffn_dim = 128;
  c.latent_dim = 64;
  c.decoder_seed_shape = {4, 4, 4};
  c.decoder_layers = 6;
  c.decoder_channels = 64;
  c.decoder_min_channels = 8;
  return c;
}

std::size_t ModelConfig::upsample_count() const {
  std::size_t n = 0;
  for (std::size_t side = decoder_seed_shape[1]; side < image_size; side *= 2) ++n;
  return n;
}

std::size_t ModelConfig::decoder_out_channels(std::size_t i) const {
  if (i + 1 == decoder_layers) return n_modalities;
  return std::max(decoder_channels >> i, decoder_min_channels);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (image_size == 0 || patch_size == 0 || n_modalities == 0 || embed_dim == 0 || n_layers == 0 ||
      n_heads == 0 || ffn_dim == 0 || latent_dim == 0 || decoder_layers == 0 || decoder_channels == 0)
    fail("all sizes must be positive");
  if (image_size % patch_size) fail("image_size must be divisible by patch_size");
  if (embed_dim % n_heads) fail("embed_dim must be divisible by n_heads");
  const auto& s = decoder_seed_shape;
  if (s[0] == 0 || s[1] == 0 || s[1] != s[2]) fail("decoder_seed_shape must be (c, s, s) with positive sizes");
  if (latent_dim != s[0] * s[1] * s[2]) fail("latent_dim must equal c*s*s of decoder_seed_shape");
  if (decoder_layers < upsample_count() + 1)
    fail("decoder_layers must exceed the number of x2 upsamples (" + std::to_string(upsample_count()) + ")");
  if (positional == PositionalEncoding::kSinusoidal && embed_dim % 2) fail("sinusoidal encoding needs even embed_dim");
}

namespace {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<LatentPooling> kPooling[] = {{LatentPooling::kFlatten, "flatten"}, {LatentPooling::kMean, "mean"}};
constexpr EnumName<FfnActivation> kActivation[] = {{FfnActivation::kGelu, "gelu"}, {FfnActivation::kRelu, "relu"}};
constexpr EnumName<PositionalEncoding> kPositional[] = {{PositionalEncoding::kLearned, "learned"},
                                                        {PositionalEncoding::kSinusoidal, "sinusoidal"}};

template <typename E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <typename E, std::size_t N>
E enum_parse(const EnumName<E> (&table)[N], const std::string& s, const char* key) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  throw ConfigError(std::string("model config: invalid value '") + s + "' for " + key);
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"patch_size", c.patch_size},
          {"n_modalities", c.n_modalities},
          {"embed_dim", c.embed_dim},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"ffn_dim", c.ffn_dim},
          {"latent_dim", c.latent_dim},
          {"decoder_seed_shape", c.decoder_seed_shape},
          {"decoder_layers", c.decoder_layers},
          {"decoder_channels", c.decoder_channels},
          {"decoder_min_channels", c.decoder_min_channels},
          {"pooling", enum_name(kPooling, c.pooling)},
          {"ffn_activation", enum_name(kActivation, c.ffn_activation)},
          {"positional", enum_name(kPositional, c.positional)}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  static const std::set<std::string> known = {
      "image_size", "patch_size", "n_modalities", "embed_dim", "n_layers", "n_heads", "ffn_dim", "latent_dim",
      "decoder_seed_shape", "decoder_layers", "decoder_channels", "decoder_min_channels", "pooling",
      "ffn_activation", "positional"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  try {
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.n_modalities = j.value("n_modalities", c.n_modalities);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.decoder_seed_shape = j.value("decoder_seed_shape", c.decoder_seed_shape);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
    c.decoder_min_channels = j.value("decoder_min_channels", c.decoder_min_channels);
    if (j.contains("pooling")) c.pooling = enum_parse(kPooling, j.at("pooling").get<std::string>(), "pooling");
    if (j.contains("ffn_activation"))
      c.ffn_activation = enum_parse(kActivation, j.at("ffn_activation").get<std::string>(), "ffn_activation");
    if (j.contains("positional"))
      c.positional = enum_parse(kPositional, j.at("positional").get<std::string>(), "positional");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

// ------------------------------------------------------------------- model

FTensor& MViTAE::add_param(const std::string& name, nn::Shape shape, std::vector<float> values) {
  params_.emplace_back(name, FTensor::parameter(std::move(shape), std::move(values)));
  return params_.back().second;
}

MViTAE::MViTAE(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  auto uniform = [&](std::size_t n, double bound) {
    std::vector<float> v(n);
    for (float& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
    return v;
  };
  auto constant = [](std::size_t n, float c) { return std::vector<float>(n, c); };
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    add_param(name + ".weight", {in, out}, uniform(in * out, bound));
    add_param(name + ".bias", {out}, uniform(out, bound));
  };
  auto add_norm = [&](const std::string& name, std::size_t d) {
    add_param(name + ".gamma", {d}, constant(d, 1.f));
    add_param(name + ".beta", {d}, constant(d, 0.f));
  };

  const std::size_t d = cfg_.embed_dim, n = cfg_.tokens();
  add_linear("patch_embed", cfg_.patch_size * cfg_.patch_size * cfg_.n_modalities, d);
  if (cfg_.positional == PositionalEncoding::kLearned) {
    add_param("pos_embed", {n, d}, uniform(n * d, 0.02));
  } else {
    std::vector<float> table(n * d);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        table[p * d + i] = static_cast<float>(std::sin(p * freq));
        table[p * d + i + 1] = static_cast<float>(std::cos(p * freq));
      }
    sinusoidal_ = FTensor({n, d}, std::move(table));
  }
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string b = "encoder." + std::to_string(l);
    add_norm(b + ".ln1", d);
    add_linear(b + ".attn.q", d, d);
    add_linear(b + ".attn.k", d, d);
    add_linear(b + ".attn.v", d, d);
    add_linear(b + ".attn.out", d, d);
    add_norm(b + ".ln2", d);
    add_linear(b + ".ffn.fc1", d, cfg_.ffn_dim);
    add_linear(b + ".ffn.fc2", cfg_.ffn_dim, d);
  }
  add_norm("encoder.ln_final", d);
  add_linear("fusion", cfg_.pooling == LatentPooling::kFlatten ? n * d : d, cfg_.latent_dim);

  std::size_t in = cfg_.decoder_seed_shape[0];
  for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) {
    const std::size_t out = cfg_.decoder_out_channels(i);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * 9));
    const std::string name = "decoder." + std::to_string(i);
    add_param(name + ".weight", {out, in, 3, 3}, uniform(out * in * 9, bound));
    add_param(name + ".bias", {out}, uniform(out, bound));
    in = out;
  }
}

std::vector<FTensor> MViTAE::parameters() const {
  std::vector<FTensor> out;
  for (const auto& [_, p] : params_) out.push_back(p);
  return out;
}

std::size_t MViTAE::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [_, p] : params_) total += p.numel();
  return total;
}

FTensor& MViTAE::parameter(const std::string& name) {
  for (auto& [n, p] : params_)
    if (n == name) return p;
  throw std::out_of_range("no parameter named '" + name + "'");
}

const FTensor& MViTAE::parameter(const std::string& name) const {
  return const_cast<MViTAE*>(this)->parameter(name);
}

void MViTAE::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

FTensor MViTAE::forward(const FTensor& x) const {
  const auto& c = cfg_;
  if (x.rank() != 4 || x.dim(1) != c.n_modalities || x.dim(2) != c.image_size || x.dim(3) != c.image_size)
    throw ShapeMismatch("model expects [B," + std::to_string(c.n_modalities) + "," + std::to_string(c.image_size) +
                        "," + std::to_string(c.image_size) + "], got " + nn::shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  auto p = [this](const std::string& name) -> const FTensor& { return parameter(name); };
  auto lin = [&](const FTensor& in, const std::string& name) {
    return ops::linear(in, p(name + ".weight"), p(name + ".bias"));
  };
  auto norm = [&](const FTensor& in, const std::string& name) {
    return ops::layer_norm(in, p(name + ".gamma"), p(name + ".beta"));
  };

  FTensor t = lin(ops::patchify(x, c.patch_size), "patch_embed");
  t = ops::add_broadcast(t, c.positional == PositionalEncoding::kLearned ? p("pos_embed") : sinusoidal_);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string b = "encoder." + std::to_string(l);
    const FTensor h = norm(t, b + ".ln1");
    const nn::AttentionWeights<float> w{p(b + ".attn.q.weight"), p(b + ".attn.q.bias"),
                                        p(b + ".attn.k.weight"), p(b + ".attn.k.bias"),
                                        p(b + ".attn.v.weight"), p(b + ".attn.v.bias"),
                                        p(b + ".attn.out.weight"), p(b + ".attn.out.bias")};
    t = ops::add(t, ops::multi_head_attention(h, h, h, w, c.n_heads));
    FTensor f = lin(norm(t, b + ".ln2"), b + ".ffn.fc1");
    f = c.ffn_activation == FfnActivation::kGelu ? ops::gelu(f) : ops::relu(f);
    t = ops::add(t, lin(f, b + ".ffn.fc2"));
  }
  t = norm(t, "encoder.ln_final");
  const FTensor pooled = c.pooling == LatentPooling::kFlatten
                             ? ops::reshape(t, {batch, c.tokens() * c.embed_dim})
                             : ops::mean_axis(t, 1);
  const FTensor latent = lin(pooled, "fusion");

  const auto& seed = c.decoder_seed_shape;
  FTensor y = ops::reshape(latent, {batch, seed[0], seed[1], seed[2]});
  const std::size_t ups = c.upsample_count();
  for (std::size_t i = 0; i < c.decoder_layers; ++i) {
    if (i >= 1 && i <= ups) {
      y = ops::upsample_nearest2x(y);
      if (i == ups && y.dim(2) != c.image_size) y = ops::crop_center(y, c.image_size, c.image_size);
    }
    const std::string name = "decoder." + std::to_string(i);
    y = ops::conv2d(y, p(name + ".weight"), p(name + ".bias"));
    if (i + 1 < c.decoder_layers) y = ops::gelu(y);
  }
  if (ups == 0 && y.dim(2) != c.image_size) y = ops::crop_center(y, c.image_size, c.image_size);
  return y;
}

SliceBatch reconstruct_slices(const MViTAE& model, const SliceBatch& batch, std::size_t chunk) {
  const auto& c = model.config();
  if (batch.channels != c.n_modalities || batch.height != c.image_size || batch.width != c.image_size)
    throw ShapeMismatch("slice geometry (" + std::to_string(batch.channels) + "," + std::to_string(batch.height) +
                        "," + std::to_string(batch.width) + ") does not match the model input");
  nn::NoGradGuard no_grad;
  SliceBatch out = batch;
  const std::size_t elems = batch.slice_elems();
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t n = std::min(chunk, batch.size() - start);
    std::vector<float> buf(batch.data.begin() + static_cast<std::ptrdiff_t>(start * elems),
                           batch.data.begin() + static_cast<std::ptrdiff_t>((start + n) * elems));
    const FTensor y = model.forward(FTensor({n, batch.channels, batch.height, batch.width}, std::move(buf)));
    std::copy(y.values().begin(), y.values().end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * elems));
  }
  return out;
}

MultimodalVolume reconstruct_volume(const MViTAE& model, const MultimodalVolume& vol) {
  const auto& d = vol.dims();
  if (d.height != model.config().image_size || d.width != model.config().image_size)
    throw ShapeMismatch("volume slices are " + std::to_string(d.height) + "x" + std::to_string(d.width) +
                        ", model expects " + std::to_string(model.config().image_size));
  const SliceBatch recon = reconstruct_slices(model, volume_slices(vol), 1);
  MultimodalVolume out = vol;
  const std::size_t plane = d.slice_size();
  for (std::size_t z = 0; z < d.depth; ++z) {
    const auto s = recon.slice(z);
    for (std::size_t m = 0; m < vol.n_modalities(); ++m)
      std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(m * plane), plane, out.slice(m, z).begin());
  }
  return out;
}

}  // namespace uad
