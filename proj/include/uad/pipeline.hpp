#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uad/config.hpp"
#include "uad/dataset.hpp"
#include "uad/metrics.hpp"
#include "uad/refiner.hpp"

namespace uad {

/// Runs fn(0..n-1) on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Nullptr for RefinerMode::kOff.
std::unique_ptr<RegionRefiner> make_refiner(const PipelineConfig& cfg);

struct CaseSegmentation {
  LabelVolume labels;
  BinaryMask3D t1c;
  BinaryMask3D t2f;
  /// Mean squared reconstruction error per axial slice, normalized units.
  std::vector<double> slice_scores;
};

/// Normalizes, reconstructs and segments one raw volume. Traces, when given,
/// receive the t1c and t2f intermediates.
CaseSegmentation segment_case(const MViTAE& model, const MultimodalVolume& raw, const PipelineConfig& cfg,
                              RegionRefiner* refiner, std::uint64_t seed, SegmentTrace* t1c_trace = nullptr,
                              SegmentTrace* t2f_trace = nullptr);

/// Stage volumes under `dir/<tag>/`: residual.f32, threshold.f32, otsu.u8,
/// morph.u8, cc.u8, refined.u8 and stages.json.
void write_segment_trace(const SegmentTrace& trace, const Dims3& dims, const std::filesystem::path& dir);
SegmentTrace read_segment_trace(const std::filesystem::path& dir, const Dims3& dims);

/// Seed used for refinement prompts of a case.
std::uint64_t case_seed(const PipelineConfig& cfg, const std::string& case_id);

DatasetManifest run_phantom(const PipelineConfig& cfg, const std::filesystem::path& out, bool force);

/// Trains on the train split and validates on the val split. `out` receives
/// checkpoint/ and loss.csv; with `resume` an existing checkpoint continues.
std::vector<EpochRecord> run_train(const PipelineConfig& cfg, const std::filesystem::path& dataset,
                                   const std::filesystem::path& out, bool resume, bool force);

/// Writes the reconstruction (in input intensity units) as a volume directory.
void run_reconstruct(const PipelineConfig& cfg, const std::filesystem::path& checkpoint,
                     const std::filesystem::path& case_dir, const std::filesystem::path& out);

struct SegmentRun {
  std::vector<std::string> case_ids;
  std::vector<double> slice_scores;
  std::vector<bool> slice_positive;
};

/// Segments every case directory into `out/<case id>/`; with `debug` the
/// stage volumes go to `out/<case id>/debug/`.
SegmentRun run_segment(const PipelineConfig& cfg, const std::filesystem::path& checkpoint,
                       const std::vector<std::filesystem::path>& case_dirs, const std::filesystem::path& out,
                       bool debug);

/// Scores `pred_root/<id>` against every test case of the dataset. Missing
/// or extra predictions raise DataError naming the cases.
MetricsReport run_evaluate(const PipelineConfig& cfg, const std::filesystem::path& pred_root,
                           const std::filesystem::path& dataset, const std::optional<std::filesystem::path>& out);

/// One `<z>_gt.png` and `<z>_pred.png` per slice in [z0, z1).
std::vector<std::filesystem::path> run_overlay(const std::filesystem::path& case_dir,
                                               const std::filesystem::path& pred_dir, std::size_t z0, std::size_t z1,
                                               const std::filesystem::path& out, const std::string& modality = "t2f");

struct E2EResult {
  MetricsReport report;
  double slice_auroc = 0.0;
  std::vector<EpochRecord> history;
};

/// phantom -> train -> segment test split -> evaluate, all under `work`.
E2EResult run_e2e(const PipelineConfig& cfg, const std::filesystem::path& work, bool force);

}  // namespace uad
