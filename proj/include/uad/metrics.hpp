#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "uad/postproc.hpp"
#include "uad/volume.hpp"

namespace uad {

/// 2|P and G| / (|P| + |G|); 1 when both are empty.
double volumetric_dice(const BinaryMask3D& pred, const BinaryMask3D& gt);

struct LesionMatch {
  std::uint32_t gt_id = 0;
  std::size_t voxels = 0;
  std::vector<std::uint32_t> pred_ids;
  double dice = 0.0;
};

struct LesionMatchTable {
  std::vector<LesionMatch> lesions;
  /// Prediction components touching no dilated GT lesion.
  std::vector<std::uint32_t> false_positives;
};

struct LesionwiseResult {
  double score = 0.0;
  LesionMatchTable table;
};

struct MetricParams {
  int dilation_radius = 0;
  std::size_t min_lesion_voxels = 0;
  int connectivity = 26;
  /// Detection counts a case when its WT lesion-wise (else volumetric) Dice is above zero.
  bool detection_uses_lesionwise = true;

  static MetricParams paper_scale() { return {3, 50, 26, true}; }
  void validate() const;
  friend bool operator==(const MetricParams&, const MetricParams&) = default;
};

/// Per GT lesion Dice against the union of overlapping prediction components,
/// averaged together with a zero for every unmatched prediction component.
LesionwiseResult lesionwise_dice(const BinaryMask3D& pred, const BinaryMask3D& gt, int dilation_radius = 0,
                                 std::size_t min_lesion_voxels = 0, int connectivity = 26);

/// Fraction of entries strictly above zero; throws std::invalid_argument when empty.
double detection_rate(const std::vector<double>& per_case_wt);

/// Area under the ROC curve via the rank-sum statistic, ties counted one half.
/// Throws std::invalid_argument unless both classes are present.
double auroc(const std::vector<double>& scores, const std::vector<bool>& positive);

enum class Region { kET, kNET, kSNFH, kTC, kWT };
inline constexpr std::array<Region, 5> kRegions = {Region::kET, Region::kNET, Region::kSNFH, Region::kTC, Region::kWT};
const char* region_name(Region r);
BinaryMask3D region_of(const LabelVolume& labels, Region r);

struct RegionScore {
  double lesionwise = 0.0;
  double volumetric = 0.0;
};

struct CaseScores {
  std::string case_id;
  std::array<RegionScore, 5> regions{};
  const RegionScore& at(Region r) const { return regions[static_cast<std::size_t>(r)]; }
};

/// Throws DataError on labels outside {0,1,2,3} and ShapeMismatch on differing extents.
CaseScores evaluate_case(const LabelVolume& pred, const LabelVolume& gt, const MetricParams& params = {},
                         const std::string& case_id = {});

struct MetricsReport {
  std::vector<CaseScores> cases;
  std::array<RegionScore, 5> mean{};
  double detection_rate = 0.0;
};

/// Aggregates per-case scores; detection is computed over `cases` as given.
MetricsReport make_report(std::vector<CaseScores> cases, const MetricParams& params = {});

nlohmann::json to_json(const MetricsReport& report);
/// Aligned table with lesion-wise DSC per region and DR in percent.
std::string format_table(const MetricsReport& report);

}  // namespace uad
