#include <fstream>
#include <sstream>

#include <doctest.h>

#include "support/tiny.hpp"
#include "support/tmpdir.hpp"
#include "uad/errors.hpp"
#include "uad/nn/loss.hpp"
#include "uad/train.hpp"

using namespace uad;
using testing::TempDir;

namespace {

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig t;
  t.lr = 1e-3;
  t.batch_size = 4;
  t.epochs = epochs;
  t.seed = 17;
  return t;
}

std::vector<float> flat_params(const MViTAE& m) {
  std::vector<float> out;
  for (const auto& [_, p] : m.named_parameters()) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

}  // namespace

TEST_CASE("loss combines MSE and weighted SSIM") {
  const auto s = testing::random_slices(2, 3);
  const FTensor x({2, 4, 24, 24}, s.data);
  std::vector<float> noisy = s.data;
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += 0.1f * static_cast<float>((i * 7919) % 13) / 13.f;
  const FTensor xhat({2, 4, 24, 24}, noisy);
  const auto t = reconstruction_loss(xhat, x, 100.0, 4.0);
  const double mse = nn::mse_loss(xhat, x).item();
  const double ss = nn::ssim(xhat, x, 4.f).item();
  CHECK(t.mse == doctest::Approx(mse));
  CHECK(t.ssim == doctest::Approx(ss));
  CHECK(t.total.item() == doctest::Approx(mse + 100.0 * (1.0 - ss)).epsilon(1e-5));
  CHECK(reconstruction_loss(x, x, 100.0, 4.0).total.item() == 0.f);
}

TEST_CASE("training lowers the validation loss") {
  const auto train_set = testing::random_slices(16, 1);
  const auto val_set = testing::random_slices(4, 2);
  ModelState st(testing::tiny_model(), 0);
  const double before = evaluate_loss(st.model, val_set, quick_config(1));
  const auto history = train(st, train_set, val_set, quick_config(8));
  REQUIRE(history.size() == 8);
  CHECK(history.back().val_loss < before);
  CHECK(st.epoch == 8);
  CHECK(history.front().saved);
}

TEST_CASE("training is bit-reproducible") {
  const auto train_set = testing::random_slices(8, 1);
  const auto val_set = testing::random_slices(2, 2);
  ModelState a(testing::tiny_model(), 0), b(testing::tiny_model(), 0);
  const auto ha = train(a, train_set, val_set, quick_config(3));
  const auto hb = train(b, train_set, val_set, quick_config(3));
  CHECK(flat_params(a.model) == flat_params(b.model));
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].train_loss == hb[i].train_loss);
}

TEST_CASE("checkpoint round-trip restores weights and optimizer state") {
  TempDir tmp;
  const auto train_set = testing::random_slices(8, 1);
  ModelState st(testing::tiny_model(), 0);
  train(st, train_set, {}, quick_config(2));
  save_checkpoint(st, tmp / "ckpt");
  const auto back = load_checkpoint(tmp / "ckpt");
  CHECK(back.model.config() == st.model.config());
  CHECK(flat_params(back.model) == flat_params(st.model));
  CHECK(back.adam.step == st.adam.step);
  CHECK(back.adam.first == st.adam.first);
  CHECK(back.adam.second == st.adam.second);
  CHECK(back.epoch == 2);
  CHECK(back.best_val_loss == st.best_val_loss);
}

TEST_CASE("resuming continues the epoch counter and matches an uninterrupted run") {
  TempDir tmp;
  const auto train_set = testing::random_slices(8, 1);
  const auto val_set = testing::random_slices(2, 2);

  ModelState straight(testing::tiny_model(), 0);
  train(straight, train_set, val_set, quick_config(4));

  ModelState first(testing::tiny_model(), 0);
  train(first, train_set, val_set, quick_config(2));
  save_checkpoint(first, tmp / "last");
  auto resumed = load_checkpoint(tmp / "last");
  const auto h = train(resumed, train_set, val_set, quick_config(4));
  REQUIRE(h.size() == 2);
  CHECK(h[0].epoch == 3);
  CHECK(h[1].epoch == 4);
  CHECK(flat_params(resumed.model) == flat_params(straight.model));
}

TEST_CASE("best checkpoint is written only on improvement") {
  TempDir tmp;
  const auto train_set = testing::random_slices(8, 1);
  ModelState st(testing::tiny_model(), 0);
  std::vector<EpochRecord> seen;
  const auto h = train(st, train_set, {}, quick_config(3), tmp / "best", [&](const EpochRecord& r) { seen.push_back(r); });
  CHECK(seen.size() == 3);
  CHECK(std::filesystem::exists(tmp / "best" / "header.json"));
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : h) {
    CHECK(r.saved == (r.val_loss < best));
    best = std::min(best, r.val_loss);
  }
  CHECK(load_checkpoint(tmp / "best").best_val_loss == best);
}

TEST_CASE("empty training set and bad configs are rejected") {
  ModelState st(testing::tiny_model(), 0);
  CHECK_THROWS_AS(train(st, SliceBatch{4, 24, 24, {}, {}}, {}, quick_config(1)), DataError);
  CHECK_THROWS_AS(train(st, testing::random_slices(2, 0, 16), {}, quick_config(1)), ShapeMismatch);
  auto bad = quick_config(1);
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = quick_config(1);
  bad.lr = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("train config JSON round-trips and rejects unknown keys") {
  auto t = quick_config(5);
  t.decoupled_weight_decay = false;
  CHECK(train_config_from_json(to_json(t)) == t);
  auto j = to_json(t);
  j["momentum"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}

TEST_CASE("loss CSV has a header and one row per epoch") {
  TempDir tmp;
  write_loss_csv({{1, 0.5, 0.4, true}, {2, 0.3, 0.45, false}}, tmp / "loss.csv");
  write_loss_csv({{3, 0.2, 0.3, true}}, tmp / "loss.csv", true);
  std::ifstream in(tmp / "loss.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "epoch,train_loss,val_loss,saved");
  CHECK(lines[3].rfind("3,", 0) == 0);
}
