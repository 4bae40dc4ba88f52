#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "uad/errors.hpp"
#include "uad/nn/loss.hpp"
#include "uad/nn/ops.hpp"
#include "uad/rng.hpp"
#include "uad/train.hpp"

namespace uad {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0) || weight_decay < 0 || batch_size == 0 || epochs == 0 || alpha < 0 || noise_std < 0 ||
      !(ssim_data_range > 0))
    throw ConfigError("train config: lr, batch_size, epochs and ssim_data_range must be positive; "
                      "weight_decay, alpha and noise_std non-negative");
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"decoupled_weight_decay", c.decoupled_weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"alpha", c.alpha},
          {"noise_std", c.noise_std},
          {"ssim_data_range", c.ssim_data_range},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  static const std::set<std::string> known = {"lr", "weight_decay", "decoupled_weight_decay", "batch_size",
                                              "epochs", "alpha", "noise_std", "ssim_data_range", "seed"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
  try {
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.decoupled_weight_decay = j.value("decoupled_weight_decay", c.decoupled_weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.alpha = j.value("alpha", c.alpha);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.ssim_data_range = j.value("ssim_data_range", c.ssim_data_range);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  }
  return c;
}

LossTerms reconstruction_loss(const FTensor& xhat, const FTensor& x, double alpha, double ssim_data_range) {
  const FTensor mse = nn::mse_loss(xhat, x);
  const FTensor sim = nn::ssim(xhat, x, static_cast<float>(ssim_data_range));
  const FTensor structural = nn::add_scalar(nn::scale(sim, -1.f), 1.f);
  LossTerms out;
  out.total = nn::add(mse, nn::scale(structural, static_cast<float>(alpha)));
  out.mse = mse.item();
  out.ssim = sim.item();
  return out;
}

namespace {

FTensor gather(const SliceBatch& set, std::span<const std::size_t> indices) {
  const std::size_t elems = set.slice_elems();
  std::vector<float> buf(indices.size() * elems);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto s = set.slice(indices[i]);
    std::copy(s.begin(), s.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * elems));
  }
  return FTensor({indices.size(), set.channels, set.height, set.width}, std::move(buf));
}

// Independent stream per epoch so a resumed run draws what an uninterrupted one would.
Rng epoch_rng(std::uint64_t seed, std::size_t epoch) {
  return Rng(derive_seed(seed, epoch));
}

}  // namespace

double evaluate_loss(const MViTAE& model, const SliceBatch& batch, const TrainConfig& cfg) {
  if (batch.empty()) return 0.0;
  nn::NoGradGuard no_grad;
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t n = std::min(cfg.batch_size, order.size() - start);
    const FTensor x = gather(batch, std::span(order).subspan(start, n));
    const auto loss = reconstruction_loss(model.forward(x), x, cfg.alpha, cfg.ssim_data_range);
    total += static_cast<double>(loss.total.item()) * static_cast<double>(n);
  }
  return total / static_cast<double>(batch.size());
}

std::vector<EpochRecord> train(ModelState& state, const SliceBatch& train_set, const SliceBatch& val_set,
                               const TrainConfig& cfg, const std::optional<fs::path>& checkpoint_dir,
                               const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training set contains no healthy slices");
  const auto& mc = state.model.config();
  if (train_set.channels != mc.n_modalities || train_set.height != mc.image_size || train_set.width != mc.image_size)
    throw ShapeMismatch("training slices do not match the model input geometry");

  state.adam.lr = cfg.lr;
  state.adam.weight_decay = cfg.weight_decay;
  state.adam.decoupled = cfg.decoupled_weight_decay;
  std::vector<FTensor> params = state.model.parameters();

  std::vector<EpochRecord> history;
  std::vector<std::size_t> order(train_set.size());
  while (state.epoch < cfg.epochs) {
    const std::size_t epoch = state.epoch + 1;
    Rng rng = epoch_rng(cfg.seed, epoch);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

    double train_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const FTensor clean = gather(train_set, std::span(order).subspan(start, n));
      std::vector<float> noisy(clean.values().begin(), clean.values().end());
      if (cfg.noise_std > 0)
        for (float& v : noisy) v += static_cast<float>(rng.normal(0.0, cfg.noise_std));
      const FTensor input(clean.shape(), std::move(noisy));

      state.model.zero_grad();
      auto loss = reconstruction_loss(state.model.forward(input), clean, cfg.alpha, cfg.ssim_data_range);
      loss.total.backward();
      nn::adam_step(params, state.adam);
      train_total += static_cast<double>(loss.total.item()) * static_cast<double>(n);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(train_set.size());
    rec.val_loss = evaluate_loss(state.model, val_set.empty() ? train_set : val_set, cfg);
    state.epoch = epoch;
    if (rec.val_loss < state.best_val_loss) {
      state.best_val_loss = rec.val_loss;
      rec.saved = true;
      if (checkpoint_dir) save_checkpoint(state, *checkpoint_dir);
    }
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  state.model.zero_grad();
  return history;
}

void write_loss_csv(const std::vector<EpochRecord>& history, const fs::path& path, bool append) {
  const bool header = !append || !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  if (header) out << "epoch,train_loss,val_loss,saved\n";
  char line[128];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%d\n", r.epoch, r.train_loss, r.val_loss, r.saved ? 1 : 0);
    out << line;
  }
}

}  // namespace uad
