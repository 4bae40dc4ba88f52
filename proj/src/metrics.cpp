#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "uad/errors.hpp"
#include "uad/metrics.hpp"

namespace uad {

namespace {

void require_same(const Dims3& a, const Dims3& b) {
  if (a != b) throw ShapeMismatch("masks differ in extent: " + to_string(a) + " vs " + to_string(b));
}

struct Box {
  std::size_t z0, z1, y0, y1, x0, x1;  // inclusive
};

}  // namespace

double volumetric_dice(const BinaryMask3D& pred, const BinaryMask3D& gt) {
  require_same(pred.dims, gt.dims);
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    p += pred.data[i] != 0;
    g += gt.data[i] != 0;
    both += pred.data[i] && gt.data[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

void MetricParams::validate() const {
  if (dilation_radius < 0) throw ConfigError("dilation_radius must be non-negative");
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ConfigError("metric connectivity must be 6, 18 or 26");
}

LesionwiseResult lesionwise_dice(const BinaryMask3D& pred, const BinaryMask3D& gt, int dilation_radius,
                                 std::size_t min_lesion_voxels, int connectivity) {
  require_same(pred.dims, gt.dims);
  const Dims3& d = gt.dims;
  const Components gcc = label_components_3d(gt, connectivity);
  const Components pcc = label_components_3d(pred, connectivity);

  std::vector<Box> boxes(gcc.sizes.size(), Box{d.depth, 0, d.height, 0, d.width, 0});
  for (std::size_t z = 0, i = 0; z < d.depth; ++z)
    for (std::size_t y = 0; y < d.height; ++y)
      for (std::size_t x = 0; x < d.width; ++x, ++i)
        if (const auto l = gcc.labels[i]) {
          Box& b = boxes[l - 1];
          b = {std::min(b.z0, z), std::max(b.z1, z), std::min(b.y0, y), std::max(b.y1, y), std::min(b.x0, x),
               std::max(b.x1, x)};
        }

  LesionwiseResult out;
  std::vector<std::uint8_t> matched(pcc.sizes.size(), 0);
  const auto r = static_cast<std::size_t>(dilation_radius);
  for (std::uint32_t l = 1; l <= gcc.sizes.size(); ++l) {
    if (gcc.sizes[l - 1] < min_lesion_voxels) continue;
    const Box& b = boxes[l - 1];
    LesionMatch m;
    m.gt_id = l;
    m.voxels = gcc.sizes[l - 1];

    // Prediction components reaching into the lesion's Chebyshev dilation.
    const Box e{b.z0 - std::min(b.z0, r), std::min(b.z1 + r, d.depth - 1), b.y0 - std::min(b.y0, r),
                std::min(b.y1 + r, d.height - 1), b.x0 - std::min(b.x0, r), std::min(b.x1 + r, d.width - 1)};
    std::set<std::uint32_t> hits;
    for (std::size_t z = e.z0; z <= e.z1; ++z)
      for (std::size_t y = e.y0; y <= e.y1; ++y)
        for (std::size_t x = e.x0; x <= e.x1; ++x) {
          const auto p = pcc.labels[d.index(z, y, x)];
          if (!p || hits.contains(p)) continue;
          bool near = false;
          for (std::size_t zz = z - std::min(z, r); !near && zz <= std::min(z + r, d.depth - 1); ++zz)
            for (std::size_t yy = y - std::min(y, r); !near && yy <= std::min(y + r, d.height - 1); ++yy)
              for (std::size_t xx = x - std::min(x, r); !near && xx <= std::min(x + r, d.width - 1); ++xx)
                near = gcc.labels[d.index(zz, yy, xx)] == l;
          if (near) hits.insert(p);
        }
    m.pred_ids.assign(hits.begin(), hits.end());
    for (auto p : m.pred_ids) matched[p - 1] = 1;

    std::size_t union_size = 0, inter = 0;
    for (auto p : m.pred_ids) union_size += pcc.sizes[p - 1];
    if (!m.pred_ids.empty())
      for (std::size_t i = 0; i < d.voxels(); ++i)
        if (gcc.labels[i] == l && pcc.labels[i] && hits.contains(pcc.labels[i])) ++inter;
    m.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(m.voxels + union_size);
    out.table.lesions.push_back(std::move(m));
  }
  for (std::uint32_t p = 1; p <= pcc.sizes.size(); ++p)
    if (!matched[p - 1]) out.table.false_positives.push_back(p);

  const std::size_t terms = out.table.lesions.size() + out.table.false_positives.size();
  if (terms == 0) {
    out.score = 1.0;
    return out;
  }
  double sum = 0.0;
  for (const auto& m : out.table.lesions) sum += m.dice;
  out.score = sum / static_cast<double>(terms);
  return out;
}

double detection_rate(const std::vector<double>& per_case_wt) {
  if (per_case_wt.empty()) throw std::invalid_argument("detection rate of an empty case list");
  const auto hits = std::count_if(per_case_wt.begin(), per_case_wt.end(), [](double v) { return v > 0.0; });
  return static_cast<double>(hits) / static_cast<double>(per_case_wt.size());
}

double auroc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) {
        rank_sum += mid_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc needs positive and negative examples");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1) / 2) / (np * static_cast<double>(n_neg));
}

const char* region_name(Region r) {
  switch (r) {
    case Region::kET: return "ET";
    case Region::kNET: return "NET";
    case Region::kSNFH: return "SNFH";
    case Region::kTC: return "TC";
    case Region::kWT: return "WT";
  }
  return "?";
}

BinaryMask3D region_of(const LabelVolume& labels, Region r) {
  switch (r) {
    case Region::kET: return region_mask(labels, {kET});
    case Region::kNET: return region_mask(labels, {kNET});
    case Region::kSNFH: return region_mask(labels, {kSNFH});
    case Region::kTC: return region_mask(labels, {kNET, kET});
    case Region::kWT: return region_mask(labels, {kNET, kSNFH, kET});
  }
  throw std::invalid_argument("unknown region");
}

CaseScores evaluate_case(const LabelVolume& pred, const LabelVolume& gt, const MetricParams& params,
                         const std::string& case_id) {
  require_same(pred.dims, gt.dims);
  for (const auto* v : {&pred, &gt})
    for (auto l : v->data)
      if (l > kET) throw DataError("label value " + std::to_string(l) + " outside {0,1,2,3}");
  CaseScores out;
  out.case_id = case_id;
  for (Region r : kRegions) {
    const BinaryMask3D p = region_of(pred, r);
    const BinaryMask3D g = region_of(gt, r);
    auto& s = out.regions[static_cast<std::size_t>(r)];
    s.volumetric = volumetric_dice(p, g);
    s.lesionwise = lesionwise_dice(p, g, params.dilation_radius, params.min_lesion_voxels, params.connectivity).score;
  }
  return out;
}

MetricsReport make_report(std::vector<CaseScores> cases, const MetricParams& params) {
  MetricsReport rep;
  rep.cases = std::move(cases);
  if (rep.cases.empty()) return rep;
  std::vector<double> wt;
  for (const auto& c : rep.cases) {
    for (std::size_t k = 0; k < kRegions.size(); ++k) {
      rep.mean[k].lesionwise += c.regions[k].lesionwise;
      rep.mean[k].volumetric += c.regions[k].volumetric;
    }
    const auto& w = c.at(Region::kWT);
    wt.push_back(params.detection_uses_lesionwise ? w.lesionwise : w.volumetric);
  }
  const auto n = static_cast<double>(rep.cases.size());
  for (auto& m : rep.mean) {
    m.lesionwise /= n;
    m.volumetric /= n;
  }
  rep.detection_rate = detection_rate(wt);
  return rep;
}

nlohmann::json to_json(const MetricsReport& report) {
  using nlohmann::json;
  auto regions = [](const std::array<RegionScore, 5>& s) {
    json j = json::object();
    for (Region r : kRegions)
      j[region_name(r)] = {{"lesionwise_dice", s[static_cast<std::size_t>(r)].lesionwise},
                           {"volumetric_dice", s[static_cast<std::size_t>(r)].volumetric}};
    return j;
  };
  json cases = json::array();
  for (const auto& c : report.cases) cases.push_back({{"case", c.case_id}, {"regions", regions(c.regions)}});
  return {{"cases", cases},
          {"mean", regions(report.mean)},
          {"detection_rate", report.detection_rate},
          {"n_cases", report.cases.size()}};
}

std::string format_table(const MetricsReport& report) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %8s %8s %8s %8s %8s %8s\n", "", "DSC ET", "DSC NET", "DSC SNFH", "DSC TC",
                "DSC WT", "DR %");
  out << buf;
  auto row = [&](const char* name, const std::array<RegionScore, 5>& s, bool lesionwise, const char* dr) {
    auto v = [&](Region r) {
      const auto& x = s[static_cast<std::size_t>(r)];
      return lesionwise ? x.lesionwise : x.volumetric;
    };
    std::snprintf(buf, sizeof buf, "%-12s %8.3f %8.3f %8.3f %8.3f %8.3f %8s\n", name, v(Region::kET),
                  v(Region::kNET), v(Region::kSNFH), v(Region::kTC), v(Region::kWT), dr);
    out << buf;
  };
  char dr[32];
  std::snprintf(dr, sizeof dr, "%.1f", 100.0 * report.detection_rate);
  row("lesion-wise", report.mean, true, dr);
  row("volumetric", report.mean, false, "");
  return out.str();
}

}  // namespace uad
