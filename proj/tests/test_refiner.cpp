#include <cstring>
#include <fstream>

#include <doctest.h>
#include <json.hpp>

#include "support/scripted_refiner.hpp"
#include "support/tmpdir.hpp"
#include "uad/postproc.hpp"
#include "uad/phantom.hpp"
#include "uad/refiner.hpp"
#include "uad/rng.hpp"

using namespace uad;
using namespace uad::testing;
using nlohmann::json;

namespace {

const std::string kStub = UAD_REFINER_STUB;

// 10x10 image, initial mask a 3x4 block.
struct SliceFixture {
  std::vector<float> image = std::vector<float>(100, 0.f);
  Mask2D initial = Mask2D(10, 10);
  SliceFixture() {
    for (std::size_t y = 2; y < 5; ++y)
      for (std::size_t x = 3; x < 7; ++x) {
        initial.data[y * 10 + x] = 1;
        image[y * 10 + x] = 4.f;
      }
  }
};

Mask2D bbox_mask(const PromptSet& p, std::size_t h, std::size_t w) {
  Mask2D m(h, w);
  for (int y = p.bbox[1]; y <= p.bbox[3]; ++y)
    for (int x = p.bbox[0]; x <= p.bbox[2]; ++x) m.data[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = 1;
  return m;
}

// Flood fill from the prompt points over pixels within `tol` of the mean seed
// intensity, clipped to the box.
Mask2D fixed_mean_flood(const std::vector<float>& img, std::size_t h, std::size_t w, const PromptSet& p, double tol) {
  Mask2D out(h, w);
  double seed_mean = 0;
  for (const auto& pt : p.points) seed_mean += img[static_cast<std::size_t>(pt.y) * w + static_cast<std::size_t>(pt.x)];
  seed_mean /= static_cast<double>(p.points.size());
  std::vector<Point2> stack(p.points.begin(), p.points.end());
  while (!stack.empty()) {
    const Point2 q = stack.back();
    stack.pop_back();
    if (q.x < p.bbox[0] || q.x > p.bbox[2] || q.y < p.bbox[1] || q.y > p.bbox[3]) continue;
    const std::size_t i = static_cast<std::size_t>(q.y) * w + static_cast<std::size_t>(q.x);
    if (out.data[i] || std::abs(img[i] - seed_mean) > tol) continue;
    out.data[i] = 1;
    stack.push_back({q.x + 1, q.y});
    stack.push_back({q.x - 1, q.y});
    stack.push_back({q.x, q.y + 1});
    stack.push_back({q.x, q.y - 1});
  }
  return out;
}

double dice2d(const Mask2D& a, const Mask2D& b) {
  double inter = 0, total = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] && b.data[i];
    total += a.data[i] + b.data[i];
  }
  return total == 0 ? 1.0 : 2 * inter / total;
}

}  // namespace

TEST_CASE("confident answer is accepted on the first attempt") {
  SliceFixture f;
  auto r = flood_refiner(0.95);
  const auto out = refine_slice(f.image, f.initial, r, 40);
  CHECK(out.attempts == 1);
  CHECK(out.accepted);
  CHECK(out.mask.count() == 100);
  CHECK(out.confidence == 0.95);
  CHECK(r.ids == std::vector<std::int64_t>{40});
}

TEST_CASE("three low-confidence answers keep the initial mask") {
  SliceFixture f;
  auto r = flood_refiner(0.5);
  const auto out = refine_slice(f.image, f.initial, r, 40);
  CHECK(out.attempts == 3);
  CHECK_FALSE(out.accepted);
  CHECK(out.mask == f.initial);
  CHECK(r.ids == std::vector<std::int64_t>{40, 41, 42});
  CHECK(r.prompts[0] == make_prompts(f.initial, 40));
  CHECK(r.prompts[2] == make_prompts(f.initial, 42));
}

TEST_CASE("gate is inclusive and retries stop at the first accepted answer") {
  SliceFixture f;
  ScriptedRefiner r([](const RefineRequest& req, int call) {
    Mask2D m(req.height, req.width);
    m.data[0] = 1;
    return RefineResponse{m, call == 1 ? 0.9 : 0.2};
  });
  const auto out = refine_slice(f.image, f.initial, r, 0);
  CHECK(out.attempts == 2);
  CHECK(out.accepted);
  CHECK(out.mask.count() == 1);
}

TEST_CASE("refiner failures fall back to the initial mask") {
  SliceFixture f;
  ScriptedRefiner thrower([](const RefineRequest&, int) -> RefineResponse { throw RefinerError("boom"); });
  auto out = refine_slice(f.image, f.initial, thrower, 0);
  CHECK(out.mask == f.initial);
  CHECK_FALSE(out.accepted);
  CHECK(out.attempts == 1);

  ScriptedRefiner wrong_size([](const RefineRequest&, int) { return RefineResponse{Mask2D(3, 3), 1.0}; });
  out = refine_slice(f.image, f.initial, wrong_size, 0);
  CHECK(out.mask == f.initial);
  CHECK_FALSE(out.accepted);
}

TEST_CASE("empty slices are never sent") {
  SliceFixture f;
  auto r = flood_refiner(1.0);
  const auto out = refine_slice(f.image, Mask2D(10, 10), r, 0);
  CHECK(r.calls == 0);
  CHECK(out.attempts == 0);
  CHECK(out.mask.count() == 0);
}

TEST_CASE("built-in refiner recovers a homogeneous block with confidence one") {
  SliceFixture f;
  BuiltinRefiner b(1.0);
  const auto out = refine_slice(f.image, f.initial, b, 3);
  CHECK(out.accepted);
  CHECK(out.confidence == 1.0);
  CHECK(out.mask == f.initial);
}

TEST_CASE("built-in region growing stays inside the box and within tolerance") {
  std::vector<float> img(36, 0.f);
  for (std::size_t i = 0; i < 36; ++i) img[i] = static_cast<float>(i % 6);  // ramp along x
  PromptSet p;
  p.bbox = {0, 0, 3, 5};
  for (auto& pt : p.points) pt = {0, 0};
  const auto m = grow_region(img, 6, 6, p, 1.0);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      if (x > 3) CHECK(m.at(y, x) == 0);
    }
  CHECK(m.at(0, 0) == 1);
  CHECK(m.at(5, 1) == 1);
}

TEST_CASE("base64 round-trips arbitrary bytes") {
  Rng rng(1);
  for (std::size_t n = 0; n < 40; ++n) {
    std::vector<std::uint8_t> v(n);
    for (auto& b : v) b = static_cast<std::uint8_t>(rng.index(256));
    CHECK(base64_decode(base64_encode(v)) == v);
  }
  CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a', 'n'}) == "TWFu");
  CHECK(base64_encode(std::vector<std::uint8_t>{'M'}) == "TQ==");
  CHECK_THROWS_AS(base64_decode("T$=="), RefinerError);
  CHECK_THROWS_AS(base64_decode("abc"), RefinerError);
}

TEST_CASE("request encoding carries geometry, prompts and little-endian floats") {
  SliceFixture f;
  RefineRequest req{7, 10, 10, f.image, make_prompts(f.initial, 7), &f.initial};
  const auto j = json::parse(encode_request(req));
  CHECK(j["id"] == 7);
  CHECK(j["h"] == 10);
  CHECK(j["w"] == 10);
  CHECK(j["bbox"] == json::array({3, 2, 6, 4}));
  CHECK(j["points"].size() == 5);
  CHECK_FALSE(j.contains("initial"));
  const auto raw = base64_decode(j["image_b64"].get<std::string>());
  REQUIRE(raw.size() == 400);
  float v;
  std::memcpy(&v, raw.data() + 4 * 23, 4);
  CHECK(v == 4.f);
}

TEST_CASE("response decoding validates every field") {
  const std::vector<std::uint8_t> ones(4, 1);
  const auto ok = json{{"id", 3}, {"mask_b64", base64_encode(ones)}, {"confidence", 0.7}};
  const auto r = decode_response(ok.dump(), 3, 2, 2);
  CHECK(r.confidence == 0.7);
  CHECK(r.mask.count() == 4);

  CHECK_THROWS_AS(decode_response("not json", 3, 2, 2), RefinerError);
  CHECK_THROWS_AS(decode_response(ok.dump(), 4, 2, 2), RefinerError);
  CHECK_THROWS_AS(decode_response(ok.dump(), 3, 2, 3), RefinerError);
  auto bad = ok;
  bad["confidence"] = 1.5;
  CHECK_THROWS_AS(decode_response(bad.dump(), 3, 2, 2), RefinerError);
  bad = ok;
  bad["mask_b64"] = base64_encode(std::vector<std::uint8_t>{0, 2, 0, 1});
  CHECK_THROWS_AS(decode_response(bad.dump(), 3, 2, 2), RefinerError);
  CHECK_THROWS_AS(decode_response(json{{"id", 3}, {"error", "oom"}}.dump(), 3, 2, 2), RefinerError);
  CHECK_THROWS_AS(decode_response(json{{"id", 3}}.dump(), 3, 2, 2), RefinerError);
}

TEST_CASE("command lines split on whitespace with quotes") {
  CHECK(split_command("a b  'c d' \"e f\"") == std::vector<std::string>{"a", "b", "c d", "e f"});
  CHECK(split_command("python -m sam 'x'") == std::vector<std::string>{"python", "-m", "sam", "x"});
  CHECK(split_command("''") == std::vector<std::string>{""});
}

TEST_CASE("external refiner speaks the protocol with a child process") {
  TempDir tmp;
  SliceFixture f;
  const auto log = (tmp / "requests.ndjson").string();
  {
    ExternalRefiner ext({kStub, "record", log});
    const auto out = refine_slice(f.image, f.initial, ext, 11);
    CHECK(out.accepted);
    CHECK(out.mask == bbox_mask(make_prompts(f.initial, 11), 10, 10));
    const auto again = refine_slice(f.image, f.initial, ext, 12);
    CHECK(again.accepted);
  }
  std::ifstream in(log);
  std::string line;
  std::vector<json> seen;
  while (std::getline(in, line)) seen.push_back(json::parse(line));
  REQUIRE(seen.size() == 2);
  CHECK(seen[0]["id"] == 11);
  CHECK(seen[1]["id"] == 12);
}

TEST_CASE("external refiner below the gate retries three times") {
  SliceFixture f;
  ExternalRefiner ext({kStub, "box", "0.5"});
  const auto out = refine_slice(f.image, f.initial, ext, 0);
  CHECK(out.attempts == 3);
  CHECK(out.mask == f.initial);
  CHECK(out.confidence == 0.5);
}

TEST_CASE("protocol violations fall back without killing the stream") {
  SliceFixture f;
  SUBCASE("error then recovery") {
    ExternalRefiner ext({kStub, "error-once"});
    auto out = refine_slice(f.image, f.initial, ext, 0);
    CHECK_FALSE(out.accepted);
    CHECK(out.mask == f.initial);
    out = refine_slice(f.image, f.initial, ext, 5);
    CHECK(out.accepted);
  }
  SUBCASE("wrong id") {
    ExternalRefiner ext({kStub, "wrong-id"});
    const auto out = refine_slice(f.image, f.initial, ext, 0);
    CHECK_FALSE(out.accepted);
    CHECK(out.mask == f.initial);
  }
  SUBCASE("malformed") {
    ExternalRefiner ext({kStub, "malformed"});
    CHECK_THROWS_AS(ext.refine({0, 10, 10, f.image, make_prompts(f.initial, 0), &f.initial}), RefinerError);
  }
}

TEST_CASE("dead or stalled children turn into errors") {
  SliceFixture f;
  const RefineRequest req{0, 10, 10, f.image, make_prompts(f.initial, 0), &f.initial};
  SUBCASE("exits") {
    ExternalRefiner ext({kStub, "die"});
    CHECK_THROWS_AS(ext.refine(req), RefinerError);
    CHECK_THROWS_AS(ext.refine(req), RefinerError);
  }
  SUBCASE("times out") {
    ExternalRefiner ext({kStub, "hang"}, std::chrono::milliseconds(300));
    CHECK_THROWS_AS(ext.refine(req), RefinerError);
    const auto out = refine_slice(f.image, f.initial, ext, 0);
    CHECK(out.mask == f.initial);
  }
  SUBCASE("missing executable") {
    CHECK_THROWS_AS(
        [] {
          ExternalRefiner ext({"/nonexistent/refiner"});
          SliceFixture g;
          ext.refine({0, 10, 10, g.image, make_prompts(g.initial, 0), &g.initial});
        }(),
        RefinerError);
  }
}

TEST_CASE("region growing on a phantom enhancing core beats a fixed-mean flood fill") {
  for (std::uint64_t seed : {3u, 8u, 13u}) {
    PhantomSpec spec;
    spec.seed = seed;
    spec.tumor_present = true;
    const auto ph = generate_phantom(spec);
    const auto [norm, _] = zscore_normalize(ph.volume);
    const Dims3& d = ph.labels.dims;

    std::size_t best_z = 0, best_n = 0;
    for (std::size_t z = 0; z < d.depth; ++z) {
      std::size_t n = 0;
      for (std::size_t i = 0; i < d.slice_size(); ++i) n += ph.labels.data[z * d.slice_size() + i] == kET;
      if (n > best_n) std::tie(best_z, best_n) = std::pair{z, n};
    }
    REQUIRE(best_n > 0);
    Mask2D et(d.height, d.width);
    for (std::size_t i = 0; i < d.slice_size(); ++i) et.data[i] = ph.labels.data[best_z * d.slice_size() + i] == kET;
    const auto img = norm.slice(norm.modality_index("t1c"), best_z);
    const std::vector<float> image(img.begin(), img.end());
    const auto prompts = make_prompts(et, seed);

    const double grown = dice2d(grow_region(image, d.height, d.width, prompts, 1.0), et);
    const double oracle = dice2d(fixed_mean_flood(image, d.height, d.width, prompts, 1.0), et);
    INFO("seed " << seed << " grown " << grown << " oracle " << oracle);
    CHECK(grown >= oracle);
    CHECK(grown > 0.8);
  }
}
