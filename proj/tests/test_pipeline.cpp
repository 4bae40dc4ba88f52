#include <atomic>
#include <cmath>
#include <fstream>

#include <doctest.h>

#include "support/tmpdir.hpp"
#include "uad/errors.hpp"
#include "uad/pipeline.hpp"

using namespace uad;
using testing::TempDir;
namespace fs = std::filesystem;

namespace {

const std::string kStub = UAD_REFINER_STUB;

PipelineConfig small_config() {
  auto c = PipelineConfig::toy();
  c.phantom = {2, 1, 1, 2, {32, 96, 96}};
  c.train.epochs = 2;
  c.workers = 1;
  c.seed = 5;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Shared across test cases: one dataset and one trained model.
struct Fixture {
  TempDir tmp;
  PipelineConfig cfg = small_config();
  fs::path dataset = tmp / "dataset";
  fs::path model = tmp / "model";
  DatasetManifest manifest;
  Fixture() {
    manifest = run_phantom(cfg, dataset, false);
    run_train(cfg, dataset, model, false, false);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("parallel_for visits every index once and rethrows the lowest failure") {
  for (std::size_t workers : {1u, 3u}) {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(50, workers, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) CHECK(h == 1);
    try {
      parallel_for(20, workers, [](std::size_t i) {
        if (i == 7 || i == 13) throw DataError("case " + std::to_string(i));
      });
      FAIL("expected an exception");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()) == "case 7");
    }
  }
}

TEST_CASE("phantom datasets list every case with its split") {
  auto& f = fixture();
  CHECK(f.manifest.cases.size() == 6);
  CHECK(f.manifest.split("train").size() == 2);
  CHECK(f.manifest.split("val").size() == 1);
  CHECK(f.manifest.split("test").size() == 3);
  CHECK(f.manifest.find("test_t001").tumor_present);
  CHECK(fs::exists(f.dataset / "test_t000" / "labels.u8"));
  CHECK(fs::exists(f.dataset / "test_t000" / "phantom_spec.json"));
  CHECK(load_volume(f.dataset / "train_h000").dims() == Dims3{32, 96, 96});
}

TEST_CASE("training writes best and latest checkpoints and a loss log") {
  auto& f = fixture();
  CHECK(fs::exists(f.model / "checkpoint" / "header.json"));
  CHECK(fs::exists(f.model / "last" / "header.json"));
  CHECK(load_checkpoint(f.model / "last").epoch == 2);
  std::ifstream in(f.model / "loss.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("resume continues from the latest checkpoint") {
  auto& f = fixture();
  TempDir tmp;
  fs::copy(f.model, tmp / "model", fs::copy_options::recursive);
  auto cfg = f.cfg;
  cfg.train.epochs = 3;
  const auto h = run_train(cfg, f.dataset, tmp / "model", true, false);
  REQUIRE(h.size() == 1);
  CHECK(h[0].epoch == 3);
  CHECK(load_checkpoint(tmp / "model" / "last").epoch == 3);
  CHECK_THROWS_AS(run_train(cfg, f.dataset, tmp / "model", false, false), IoError);
}

TEST_CASE("training refuses a mismatched architecture on resume") {
  auto& f = fixture();
  TempDir tmp;
  fs::copy(f.model, tmp / "model", fs::copy_options::recursive);
  auto cfg = f.cfg;
  cfg.model.n_layers = 3;
  CHECK_THROWS_AS(run_train(cfg, f.dataset, tmp / "model", true, false), ConfigError);
}

TEST_CASE("segmentation writes one prediction per case and stage traces on request") {
  auto& f = fixture();
  TempDir tmp;
  const std::vector<fs::path> cases{f.dataset / "test_t000", f.dataset / "test_h000"};
  const auto run = run_segment(f.cfg, f.model / "checkpoint", cases, tmp / "pred", true);
  CHECK(run.case_ids == std::vector<std::string>{"test_t000", "test_h000"});
  CHECK(run.slice_scores.size() == 64);
  CHECK(run.slice_positive.size() == 64);
  for (const auto& id : run.case_ids) {
    CHECK(load_prediction(tmp / "pred" / id).dims == Dims3{32, 96, 96});
    for (const char* tag : {"t1c", "t2f"})
      for (const char* file : {"residual.f32", "threshold.f32", "otsu.u8", "morph.u8", "cc.u8", "refined.u8",
                               "stages.json"})
        CHECK(fs::exists(tmp / "pred" / id / "debug" / tag / file));
  }
  // Healthy slices never count as positive.
  for (std::size_t i = 32; i < 64; ++i) CHECK_FALSE(run.slice_positive[i]);
}

TEST_CASE("stage traces round-trip and recompose the prediction") {
  auto& f = fixture();
  TempDir tmp;
  const auto state = load_checkpoint(f.model / "checkpoint");
  const auto raw = load_volume(f.dataset / "test_t001");
  SegmentTrace t1c, t2f;
  const auto seg = segment_case(state.model, raw, f.cfg, nullptr, 1, &t1c, &t2f);
  write_segment_trace(t2f, raw.dims(), tmp / "t2f");
  const auto back = read_segment_trace(tmp / "t2f", raw.dims());
  CHECK(back.residual == t2f.residual);
  CHECK(back.thresholded == t2f.thresholded);
  CHECK(back.otsu == t2f.otsu);
  CHECK(back.morph == t2f.morph);
  CHECK(back.component == t2f.component);
  CHECK(back.refined == t2f.refined);
  CHECK(back.tau == t2f.tau);
  CHECK(seg.t1c == t1c.refined);
  CHECK(seg.t2f == t2f.refined);
  CHECK(seg.labels == fuse_masks(t1c.refined, t2f.refined));
}

TEST_CASE("an external refiner below the gate leaves predictions unchanged") {
  auto& f = fixture();
  const auto state = load_checkpoint(f.model / "checkpoint");
  const auto raw = load_volume(f.dataset / "test_t000");
  const auto plain = segment_case(state.model, raw, f.cfg, nullptr, 9);

  auto cfg = f.cfg;
  cfg.refiner = RefinerMode::kExternal;
  cfg.refiner_command = "'" + kStub + "' box 0.5";
  auto refiner = make_refiner(cfg);
  REQUIRE(refiner);
  const auto refined = segment_case(state.model, raw, cfg, refiner.get(), 9);
  CHECK(refined.labels == plain.labels);

  cfg.refiner_command = "'" + kStub + "' die";
  auto dead = make_refiner(cfg);
  CHECK(segment_case(state.model, raw, cfg, dead.get(), 9).labels == plain.labels);
}

TEST_CASE("refiner factory follows the mode") {
  auto cfg = small_config();
  CHECK(make_refiner(cfg) == nullptr);
  cfg.refiner = RefinerMode::kBuiltin;
  CHECK(dynamic_cast<BuiltinRefiner*>(make_refiner(cfg).get()) != nullptr);
  CHECK(case_seed(cfg, "a") != case_seed(cfg, "b"));
  CHECK(case_seed(cfg, "a") == case_seed(cfg, "a"));
}

TEST_CASE("evaluation names missing and extra predictions") {
  auto& f = fixture();
  TempDir tmp;
  for (const auto& c : f.manifest.split("test"))
    save_prediction(load_labels(f.dataset / c.id, {32, 96, 96}), tmp / "pred" / c.id);
  const auto report = run_evaluate(f.cfg, tmp / "pred", f.dataset, tmp / "report");
  CHECK(report.cases.size() == 3);
  CHECK(report.detection_rate == 1.0);
  for (auto r : kRegions) CHECK(report.mean[static_cast<std::size_t>(r)].lesionwise == 1.0);
  CHECK(fs::exists(tmp / "report" / "report.json"));

  fs::remove_all(tmp / "pred" / "test_h000");
  save_prediction(LabelVolume({32, 96, 96}), tmp / "pred" / "bogus");
  try {
    run_evaluate(f.cfg, tmp / "pred", f.dataset, std::nullopt);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("test_h000") != std::string::npos);
    CHECK(msg.find("bogus") != std::string::npos);
  }
}

TEST_CASE("reconstruction keeps the case geometry") {
  auto& f = fixture();
  TempDir tmp;
  run_reconstruct(f.cfg, f.model / "checkpoint", f.dataset / "test_h000", tmp / "recon");
  const auto recon = load_volume(tmp / "recon");
  const auto raw = load_volume(f.dataset / "test_h000");
  CHECK(recon.dims() == raw.dims());
  CHECK(recon.modalities() == raw.modalities());
  for (float v : recon.data()) REQUIRE(std::isfinite(v));
  CHECK_FALSE(recon == raw);
}

TEST_CASE("end-to-end runs are byte-identical") {
  TempDir a, b;
  auto cfg = small_config();
  cfg.train.epochs = 1;
  const auto ra = run_e2e(cfg, a / "work", false);
  run_e2e(cfg, b / "work", false);
  CHECK(ra.report.cases.size() == 3);
  CHECK(ra.history.size() == 1);
  CHECK(slurp(a / "work" / "report.json") == slurp(b / "work" / "report.json"));
  for (const char* id : {"test_h000", "test_t000", "test_t001"})
    CHECK(slurp(a / "work" / "predictions" / id / "labels.u8") == slurp(b / "work" / "predictions" / id / "labels.u8"));
  CHECK(fs::exists(a / "work" / "report.txt"));
  CHECK(fs::exists(a / "work" / "config.json"));
}
