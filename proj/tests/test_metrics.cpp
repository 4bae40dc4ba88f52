#include <doctest.h>

#include "support/oracles.hpp"
#include "uad/errors.hpp"
#include "uad/metrics.hpp"

using namespace uad;
using namespace uad::testing;

namespace {

// O(n^2) pair count.
double auroc_oracle(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

}  // namespace

TEST_CASE("volumetric Dice hand cases") {
  BinaryMask3D a({1, 4, 4}), b({1, 4, 4});
  CHECK(volumetric_dice(a, b) == 1.0);
  paint_box(a, 0, 1, 0, 2, 0, 2);
  CHECK(volumetric_dice(a, b) == 0.0);
  paint_box(b, 0, 1, 0, 2, 0, 1);
  CHECK(volumetric_dice(a, b) == doctest::Approx(4.0 / 6.0));
  CHECK(volumetric_dice(a, a) == 1.0);
  CHECK_THROWS_AS(volumetric_dice(a, BinaryMask3D({1, 4, 5})), ShapeMismatch);
}

TEST_CASE("volumetric Dice is symmetric and bounded") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_mask(rng, 10);
    BinaryMask3D b(a.dims);
    for (auto& v : b.data) v = rng.uniform() < 0.3;
    const double ab = volumetric_dice(a, b);
    CHECK(ab == volumetric_dice(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("lesion-wise Dice hand cases") {
  BinaryMask3D gt({8, 12, 12});
  paint_box(gt, 1, 3, 1, 3, 1, 3);

  SUBCASE("perfect") { CHECK(lesionwise_dice(gt, gt).score == 1.0); }
  SUBCASE("one false positive component") {
    auto pred = gt;
    paint_box(pred, 6, 8, 8, 10, 8, 10);
    const auto r = lesionwise_dice(pred, gt);
    CHECK(r.score == doctest::Approx(0.5));
    CHECK(r.table.false_positives.size() == 1);
    CHECK(r.table.lesions.size() == 1);
  }
  SUBCASE("one missed lesion") {
    auto both = gt;
    paint_box(both, 6, 8, 8, 10, 8, 10);
    const auto r = lesionwise_dice(gt, both);
    CHECK(r.score == doctest::Approx(0.5));
    CHECK(r.table.lesions.size() == 2);
    CHECK(r.table.lesions[1].pred_ids.empty());
    CHECK(r.table.lesions[1].dice == 0.0);
  }
  SUBCASE("both empty") { CHECK(lesionwise_dice(BinaryMask3D(gt.dims), BinaryMask3D(gt.dims)).score == 1.0); }
  SUBCASE("one side empty") {
    CHECK(lesionwise_dice(BinaryMask3D(gt.dims), gt).score == 0.0);
    CHECK(lesionwise_dice(gt, BinaryMask3D(gt.dims)).score == 0.0);
  }
  SUBCASE("a split prediction is scored as one union") {
    BinaryMask3D big(gt.dims), pred(gt.dims);
    paint_box(big, 0, 4, 0, 4, 0, 8);
    paint_box(pred, 0, 4, 0, 4, 0, 3);
    paint_box(pred, 0, 4, 0, 4, 5, 8);
    const auto r = lesionwise_dice(pred, big);
    CHECK(r.table.lesions[0].pred_ids.size() == 2);
    CHECK(r.score == doctest::Approx(2.0 * 96 / (96 + 128)));
  }
}

TEST_CASE("dilated matching absorbs a nearby component") {
  BinaryMask3D gt({10, 12, 12});
  paint_box(gt, 2, 6, 2, 6, 2, 6);  // A: 64 voxels
  auto pred = gt;
  paint_box(pred, 3, 5, 3, 5, 8, 10);  // B: 8 voxels, two-voxel gap from A
  const auto wide = lesionwise_dice(pred, gt, 3);
  CHECK(wide.score == doctest::Approx(128.0 / 136.0));
  CHECK(wide.table.false_positives.empty());
  const auto tight = lesionwise_dice(pred, gt, 0);
  CHECK(tight.score == doctest::Approx(0.5));
  CHECK(tight.table.false_positives.size() == 1);
}

TEST_CASE("lesions below the size floor are ignored and overlapping predictions count as false positives") {
  BinaryMask3D gt({10, 12, 12});
  paint_box(gt, 2, 6, 2, 6, 2, 6);     // 64 voxels
  paint_box(gt, 0, 2, 9, 11, 9, 11);  // 8 voxels
  const auto r = lesionwise_dice(gt, gt, 0, 50);
  REQUIRE(r.table.lesions.size() == 1);
  CHECK(r.table.lesions[0].voxels == 64);
  CHECK(r.table.false_positives.size() == 1);
  CHECK(r.score == doctest::Approx(0.5));
  CHECK(lesionwise_dice(gt, gt, 0, 8).score == 1.0);
}

TEST_CASE("lesion-wise Dice of a mask with itself is one") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_mask(rng, 12);
    const auto r = lesionwise_dice(m, m);
    CHECK(r.score == 1.0);
    CHECK(r.table.false_positives.empty());
  }
}

TEST_CASE("lesion-wise Dice is symmetric when lesions pair up one to one") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    // Three well separated slots; each side gets an overlapping box, its own box or nothing.
    BinaryMask3D a({12, 12, 40}), b({12, 12, 40});
    for (std::size_t slot = 0; slot < 3; ++slot) {
      const std::size_t x0 = 2 + slot * 13;
      const int kind = static_cast<int>(rng.index(4));
      if (kind != 1) paint_box(a, 3, 9, 3, 9, x0, x0 + 6);
      if (kind != 2) paint_box(b, 2 + rng.index(3), 8 + rng.index(3), 2 + rng.index(3), 8 + rng.index(3), x0 + rng.index(2),
                               x0 + 5 + rng.index(2));
    }
    CHECK(lesionwise_dice(a, b, 0, 0).score == doctest::Approx(lesionwise_dice(b, a, 0, 0).score).epsilon(1e-12));
  }
}

TEST_CASE("an all-background prediction scores zero on every non-empty region") {
  LabelVolume gt({6, 10, 10});
  for (std::size_t y = 2; y < 8; ++y)
    for (std::size_t x = 2; x < 8; ++x) gt.at(2, y, x) = kSNFH;
  for (std::size_t y = 4; y < 6; ++y)
    for (std::size_t x = 4; x < 6; ++x) gt.at(2, y, x) = kNET;
  gt.at(2, 3, 3) = kET;
  const auto s = evaluate_case(LabelVolume(gt.dims), gt, {}, "bg");
  for (auto r : kRegions) {
    CHECK(s.at(r).lesionwise == 0.0);
    CHECK(s.at(r).volumetric == 0.0);
  }
}

TEST_CASE("lesion-wise Dice stays in [0,1] and dilation never adds false positives") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_mask(rng, 12);
    BinaryMask3D b(a.dims);
    for (auto& v : b.data) v = rng.uniform() < 0.1;
    const auto r0 = lesionwise_dice(a, b, 0);
    const auto r2 = lesionwise_dice(a, b, 2);
    CHECK(r0.score >= 0.0);
    CHECK(r0.score <= 1.0);
    CHECK(r2.table.false_positives.size() <= r0.table.false_positives.size());
  }
}

TEST_CASE("detection rate counts strictly positive scores") {
  CHECK(detection_rate({0.0, 0.1, 0.5}) == doctest::Approx(2.0 / 3.0));
  std::vector<double> v(451, 0.0);
  std::fill_n(v.begin(), 403, 0.7);
  CHECK(detection_rate(v) == doctest::Approx(403.0 / 451.0));
  CHECK(detection_rate(v) * 100 == doctest::Approx(89.36).epsilon(1e-4));
  CHECK_THROWS_AS(detection_rate({}), std::invalid_argument);
}

TEST_CASE("AUROC hand cases") {
  CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {false, false, true, true}) == doctest::Approx(0.75));
  CHECK(auroc({1, 2, 3, 4}, {false, false, true, true}) == 1.0);
  CHECK(auroc({1, 2, 3, 4}, {true, true, false, false}) == 0.0);
  CHECK(auroc({5, 5, 5, 5}, {true, false, true, false}) == 0.5);
  CHECK_THROWS_AS(auroc({1, 2}, {true, true}), std::invalid_argument);
  CHECK_THROWS_AS(auroc({1, 2}, {true}), std::invalid_argument);
}

TEST_CASE("AUROC matches pair counting with ties") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.index(60);
    std::vector<double> s(n);
    std::vector<bool> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(6));
      p[i] = rng.uniform() < 0.5;
    }
    p[0] = true;
    p[1] = false;
    CHECK(auroc(s, p) == doctest::Approx(auroc_oracle(s, p)).epsilon(1e-12));
  }
}

TEST_CASE("regions are unions of labels") {
  LabelVolume l({1, 1, 4});
  l.data = {0, 1, 2, 3};
  CHECK(region_of(l, Region::kET).data == std::vector<std::uint8_t>{0, 0, 0, 1});
  CHECK(region_of(l, Region::kNET).data == std::vector<std::uint8_t>{0, 1, 0, 0});
  CHECK(region_of(l, Region::kSNFH).data == std::vector<std::uint8_t>{0, 0, 1, 0});
  CHECK(region_of(l, Region::kTC).data == std::vector<std::uint8_t>{0, 1, 0, 1});
  CHECK(region_of(l, Region::kWT).data == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(std::string(region_name(Region::kWT)) == "WT");
}

TEST_CASE("case scores and report aggregates") {
  LabelVolume gt({4, 8, 8});
  for (std::size_t z = 1; z < 3; ++z)
    for (std::size_t y = 2; y < 6; ++y)
      for (std::size_t x = 2; x < 6; ++x) gt.at(z, y, x) = (y == 3 || y == 4) && (x == 3 || x == 4) ? kET : kSNFH;
  const auto perfect = evaluate_case(gt, gt, {}, "a");
  for (auto r : kRegions) {
    CHECK(perfect.at(r).lesionwise == 1.0);
    CHECK(perfect.at(r).volumetric == 1.0);
  }
  const auto miss = evaluate_case(LabelVolume(gt.dims), gt, {}, "b");
  CHECK(miss.at(Region::kWT).lesionwise == 0.0);
  CHECK(miss.at(Region::kNET).lesionwise == 1.0);  // NET empty on both sides

  const auto report = make_report({perfect, miss});
  CHECK(report.cases.size() == 2);
  CHECK(report.mean[static_cast<std::size_t>(Region::kWT)].lesionwise == doctest::Approx(0.5));
  CHECK(report.detection_rate == doctest::Approx(0.5));

  const auto j = to_json(report);
  CHECK(j["cases"].size() == 2);
  const auto table = format_table(report);
  for (const char* col : {"DSC ET", "DSC NET", "DSC SNFH", "DSC TC", "DSC WT", "DR %"})
    CHECK(table.find(col) != std::string::npos);
  CHECK(table.find("lesion-wise") != std::string::npos);
  CHECK(table.find("volumetric") != std::string::npos);

  LabelVolume bad = gt;
  bad.data[0] = 4;
  CHECK_THROWS_AS(evaluate_case(bad, gt), DataError);
  CHECK_THROWS_AS(evaluate_case(LabelVolume({4, 8, 9}), gt), ShapeMismatch);
}

TEST_CASE("metric params validation") {
  MetricParams p;
  CHECK_NOTHROW(p.validate());
  p.dilation_radius = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = MetricParams::paper_scale();
  CHECK(p.dilation_radius == 3);
  CHECK(p.min_lesion_voxels == 50);
}
