#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "uad/errors.hpp"
#include "uad/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

struct Options {
  std::string config;
  std::string preset = "full";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> refiner;
  std::optional<std::string> refiner_cmd;
  bool debug = false;
  bool force = false;
  bool quiet = false;
};

uad::PipelineConfig resolve(const Options& o) {
  uad::PipelineConfig cfg;
  if (o.preset == "toy")
    cfg = uad::PipelineConfig::toy();
  else if (o.preset != "full")
    throw uad::ConfigError("preset must be full or toy");
  if (!o.config.empty()) cfg = uad::load_pipeline_config(o.config, cfg);
  if (o.seed) cfg.seed = *o.seed;
  if (o.workers) cfg.workers = *o.workers;
  if (o.refiner) cfg.refiner = uad::refiner_mode_from_string(*o.refiner);
  if (o.refiner_cmd) {
    cfg.refiner_command = *o.refiner_cmd;
    if (!o.refiner) cfg.refiner = uad::RefinerMode::kExternal;
  }
  cfg.validate();
  return cfg;
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& s, std::size_t depth) {
  if (s.empty()) return {depth / 2, depth / 2 + 1};
  const auto colon = s.find(':');
  try {
    if (colon == std::string::npos) {
      const std::size_t z = std::stoul(s);
      return {z, z + 1};
    }
    const std::size_t a = colon == 0 ? 0 : std::stoul(s.substr(0, colon));
    const std::size_t b = colon + 1 == s.size() ? depth : std::stoul(s.substr(colon + 1));
    return {a, b};
  } catch (const std::exception&) {
    throw uad::ConfigError("slice range must look like Z, A:B, A: or :B");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised brain anomaly segmentation with a multimodal ViT autoencoder"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "Pipeline configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--preset", o.preset, "Base configuration before --config: full or toy")
      ->check(CLI::IsMember({"full", "toy"}));
  app.add_option("--seed", o.seed, "Override the configured seed");
  app.add_option("--workers", o.workers, "Cases processed in parallel (0 = CPU count)");
  app.add_option("--refiner", o.refiner, "Mask refinement: off, builtin or external")
      ->check(CLI::IsMember({"off", "builtin", "external"}));
  app.add_option("--refiner-cmd", o.refiner_cmd, "Command line of an external refiner process");
  app.add_flag("--debug", o.debug, "Write per-stage intermediate volumes");
  app.add_flag("--force", o.force, "Overwrite non-empty output directories");
  app.add_flag("-q,--quiet", o.quiet, "Only log warnings and errors");

  std::string out, dataset, checkpoint, case_dir, pred, slices, modality = "t2f";
  std::vector<std::string> cases;
  bool resume = false;
  std::optional<std::size_t> train_healthy, val_healthy, test_healthy, test_tumor;

  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  phantom->add_option("--out", out, "Dataset directory")->required();
  phantom->add_option("--train-healthy", train_healthy);
  phantom->add_option("--val-healthy", val_healthy);
  phantom->add_option("--test-healthy", test_healthy);
  phantom->add_option("--test-tumor", test_tumor);

  auto* train = app.add_subcommand("train", "Train the autoencoder on healthy slices");
  train->add_option("--dataset", dataset)->required();
  train->add_option("--out", out, "Receives checkpoint/, last/ and loss.csv")->required();
  train->add_flag("--resume", resume, "Continue from an existing checkpoint in --out");

  auto* recon = app.add_subcommand("reconstruct", "Reconstruct one case");
  recon->add_option("--checkpoint", checkpoint)->required();
  recon->add_option("--case", case_dir)->required();
  recon->add_option("--out", out)->required();

  auto* segment = app.add_subcommand("segment", "Segment cases into label volumes");
  segment->add_option("--checkpoint", checkpoint)->required();
  segment->add_option("--out", out)->required();
  segment->add_option("--dataset", dataset, "Segment every test case of this dataset");
  segment->add_option("cases", cases, "Case directories");

  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against ground truth");
  evaluate->add_option("--pred", pred)->required();
  evaluate->add_option("--dataset", dataset)->required();
  evaluate->add_option("--out", out, "Directory for report.json and report.txt");

  auto* overlay = app.add_subcommand("overlay", "Render label overlays as PNG");
  overlay->add_option("--case", case_dir)->required();
  overlay->add_option("--pred", pred, "Prediction directory of the case")->required();
  overlay->add_option("--out", out)->required();
  overlay->add_option("--slices", slices, "Z, A:B (half-open), A: or :B; default the middle slice");
  overlay->add_option("--modality", modality, "Grayscale base");

  auto* e2e = app.add_subcommand("e2e", "Phantom, train, segment and evaluate in one run");
  e2e->add_option("--out", out, "Work directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  spdlog::set_level(o.quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    uad::PipelineConfig cfg = resolve(o);
    if (phantom->parsed()) {
      if (train_healthy) cfg.phantom.train_healthy = *train_healthy;
      if (val_healthy) cfg.phantom.val_healthy = *val_healthy;
      if (test_healthy) cfg.phantom.test_healthy = *test_healthy;
      if (test_tumor) cfg.phantom.test_tumor = *test_tumor;
      uad::run_phantom(cfg, out, o.force);
    } else if (train->parsed()) {
      uad::run_train(cfg, dataset, out, resume, o.force);
    } else if (recon->parsed()) {
      uad::run_reconstruct(cfg, checkpoint, case_dir, out);
    } else if (segment->parsed()) {
      std::vector<fs::path> dirs(cases.begin(), cases.end());
      if (!dataset.empty())
        for (const auto& c : uad::load_manifest(dataset).split("test")) dirs.push_back(fs::path(dataset) / c.id);
      if (dirs.empty()) throw uad::ConfigError("segment needs case directories or --dataset");
      uad::run_segment(cfg, checkpoint, dirs, out, o.debug);
    } else if (evaluate->parsed()) {
      const auto report = uad::run_evaluate(cfg, pred, dataset, out.empty() ? std::nullopt : std::optional<fs::path>(out));
      std::cout << uad::format_table(report);
    } else if (overlay->parsed()) {
      const auto depth = uad::load_volume(case_dir).dims().depth;
      const auto [z0, z1] = parse_range(slices, depth);
      for (const auto& p : uad::run_overlay(case_dir, pred, z0, z1, out, modality)) std::cout << p.string() << "\n";
    } else if (e2e->parsed()) {
      const auto result = uad::run_e2e(cfg, out, o.force);
      std::cout << uad::format_table(result.report);
      std::printf("slice AUROC %.4f\n", result.slice_auroc);
    }
    return kOk;
  } catch (const uad::ConfigError& e) {
    spdlog::error("{}", e.what());
    return kConfig;
  } catch (const uad::DataError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const uad::IoError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntime;
  }
}
