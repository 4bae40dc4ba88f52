#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "uad/errors.hpp"
#include "uad/postproc.hpp"
#include "uad/refiner.hpp"
#include "uad/rng.hpp"

namespace uad {

std::size_t BinaryMask3D::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

std::size_t Mask2D::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

void PostprocConfig::validate() const {
  if (!(threshold_fraction >= 0) || !(threshold_floor >= 0))
    throw ConfigError("threshold fraction and floor must be non-negative");
  if (otsu_bins < 2) throw ConfigError("otsu_bins must be at least 2");
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ConfigError("connectivity must be 6, 18 or 26");
  if (!(confidence_gate >= 0 && confidence_gate <= 1)) throw ConfigError("confidence gate must lie in [0,1]");
  if (max_attempts < 1) throw ConfigError("max_attempts must be at least 1");
  if (!(region_tolerance >= 0)) throw ConfigError("region_tolerance must be non-negative");
}

MultimodalVolume residual(const MultimodalVolume& original, const MultimodalVolume& recon) {
  if (original.dims() != recon.dims() || original.modalities() != recon.modalities())
    throw ShapeMismatch("residual: reconstruction " + to_string(recon.dims()) + " does not match original " +
                        to_string(original.dims()));
  MultimodalVolume out(original.modalities(), original.dims(), original.spacing_mm());
  const auto& a = original.data();
  const auto& b = recon.data();
  auto& r = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = std::max(a[i] - b[i], 0.f);
  return out;
}

ThresholdResult threshold(std::span<const float> map, double fraction, double floor) {
  float peak = 0.f;
  for (float v : map) peak = std::max(peak, v);
  ThresholdResult out;
  out.tau = std::max(fraction * static_cast<double>(peak), floor);
  out.values.assign(map.begin(), map.end());
  for (float& v : out.values)
    if (static_cast<double>(v) < out.tau) v = 0.f;
  return out;
}

OtsuResult otsu_binarize(std::span<const float> map, std::size_t bins) {
  OtsuResult out;
  out.mask.assign(map.size(), 0);
  float lo = std::numeric_limits<float>::infinity();
  float hi = -std::numeric_limits<float>::infinity();
  for (float v : map)
    if (v != 0.f) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi >= lo)) {
    out.threshold = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  if (hi == lo) {
    for (std::size_t i = 0; i < map.size(); ++i) out.mask[i] = map[i] != 0.f;
    out.threshold = std::numeric_limits<double>::quiet_NaN();
    return out;
  }

  const double width = (static_cast<double>(hi) - lo) / static_cast<double>(bins);
  auto bin_of = [&](float v) {
    const auto b = static_cast<std::size_t>(std::floor((static_cast<double>(v) - lo) / width));
    return std::min(b, bins - 1);
  };
  std::vector<double> hist(bins, 0.0);
  for (float v : map)
    if (v != 0.f) hist[bin_of(v)] += 1.0;

  // Between-class variance in bin-index units: (n1*S0 - n0*S1)^2 / (n0*n1).
  const double total_n = std::accumulate(hist.begin(), hist.end(), 0.0);
  double total_s = 0.0;
  for (std::size_t b = 0; b < bins; ++b) total_s += hist[b] * static_cast<double>(b);
  double n0 = 0.0, s0 = 0.0, best = -1.0;
  std::size_t best_k = 1;
  for (std::size_t k = 1; k < bins; ++k) {
    n0 += hist[k - 1];
    s0 += hist[k - 1] * static_cast<double>(k - 1);
    const double n1 = total_n - n0;
    if (n0 == 0.0 || n1 == 0.0) continue;
    const double d = n1 * s0 - n0 * (total_s - s0);
    const double score = d * d / (n0 * n1);
    if (score > best) {
      best = score;
      best_k = k;
    }
  }
  for (std::size_t i = 0; i < map.size(); ++i) out.mask[i] = map[i] != 0.f && bin_of(map[i]) >= best_k;
  out.threshold = lo + static_cast<double>(best_k) * width;
  return out;
}

namespace {

using Plane = std::span<const std::uint8_t>;

void erode_cross(Plane in, std::span<std::uint8_t> out, std::size_t h, std::size_t w) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      out[i] = in[i] && y > 0 && in[i - w] && y + 1 < h && in[i + w] && x > 0 && in[i - 1] && x + 1 < w && in[i + 1];
    }
}

void dilate_cross(Plane in, std::span<std::uint8_t> out, std::size_t h, std::size_t w) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      out[i] = in[i] || (y > 0 && in[i - w]) || (y + 1 < h && in[i + w]) || (x > 0 && in[i - 1]) ||
               (x + 1 < w && in[i + 1]);
    }
}

struct Offset3 {
  int dz, dy, dx;
};

std::vector<Offset3> neighbourhood(int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw std::invalid_argument("connectivity must be 6, 18 or 26, got " + std::to_string(connectivity));
  std::vector<Offset3> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int order = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (order == 0) continue;
        if (connectivity == 6 && order > 1) continue;
        if (connectivity == 18 && order > 2) continue;
        out.push_back({dz, dy, dx});
      }
  return out;
}

}  // namespace

BinaryMask3D morph_clean(const BinaryMask3D& mask) {
  const std::size_t h = mask.dims.height, w = mask.dims.width;
  BinaryMask3D out(mask.dims);
  std::vector<std::uint8_t> a(h * w), b(h * w);
  for (std::size_t z = 0; z < mask.dims.depth; ++z) {
    erode_cross(mask.slice(z), a, h, w);
    dilate_cross(a, b, h, w);
    dilate_cross(b, a, h, w);
    erode_cross(a, out.slice(z), h, w);
  }
  return out;
}

Components label_components_3d(const BinaryMask3D& mask, int connectivity) {
  const Dims3& d = mask.dims;
  const auto offsets = neighbourhood(connectivity);
  Components out;
  out.labels.assign(d.voxels(), 0);
  std::vector<std::size_t> queue;
  for (std::size_t start = 0; start < d.voxels(); ++start) {
    if (!mask.data[start] || out.labels[start]) continue;
    const auto label = static_cast<std::uint32_t>(out.sizes.size() + 1);
    out.labels[start] = label;
    queue.assign(1, start);
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t i = queue[head];
      const auto z = static_cast<long>(i / d.slice_size());
      const auto y = static_cast<long>((i / d.width) % d.height);
      const auto x = static_cast<long>(i % d.width);
      for (const auto& o : offsets) {
        const long nz = z + o.dz, ny = y + o.dy, nx = x + o.dx;
        if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<long>(d.depth) || ny >= static_cast<long>(d.height) ||
            nx >= static_cast<long>(d.width))
          continue;
        const std::size_t j = d.index(static_cast<std::size_t>(nz), static_cast<std::size_t>(ny),
                                      static_cast<std::size_t>(nx));
        if (mask.data[j] && !out.labels[j]) {
          out.labels[j] = label;
          queue.push_back(j);
        }
      }
    }
    out.sizes.push_back(queue.size());
  }
  return out;
}

BinaryMask3D largest_component_3d(const BinaryMask3D& mask, int connectivity) {
  const Components cc = label_components_3d(mask, connectivity);
  BinaryMask3D out(mask.dims);
  if (cc.sizes.empty()) return out;
  const auto best = static_cast<std::uint32_t>(std::max_element(cc.sizes.begin(), cc.sizes.end()) - cc.sizes.begin() + 1);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = cc.labels[i] == best;
  return out;
}

PromptSet make_prompts(const Mask2D& mask, std::uint64_t seed) {
  std::vector<Point2> pixels;
  PromptSet p;
  p.seed = seed;
  p.bbox = {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), -1, -1};
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) {
        const Point2 pt{static_cast<int>(x), static_cast<int>(y)};
        pixels.push_back(pt);
        p.bbox = {std::min(p.bbox[0], pt.x), std::min(p.bbox[1], pt.y), std::max(p.bbox[2], pt.x),
                  std::max(p.bbox[3], pt.y)};
      }
  if (pixels.empty()) throw std::invalid_argument("make_prompts: mask is empty");

  Rng rng(seed);
  if (pixels.size() < p.points.size()) {
    for (auto& pt : p.points) pt = pixels[rng.index(pixels.size())];
  } else {
    // Partial Fisher-Yates over the pixel list.
    for (std::size_t k = 0; k < p.points.size(); ++k) {
      const std::size_t j = k + rng.index(pixels.size() - k);
      std::swap(pixels[k], pixels[j]);
      p.points[k] = pixels[k];
    }
  }
  return p;
}

RefineOutcome refine_slice(std::span<const float> image, const Mask2D& initial, RegionRefiner& refiner,
                           std::uint64_t seed, double gate, int max_attempts) {
  RefineOutcome out;
  out.mask = initial;
  if (initial.count() == 0) return out;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    RefineRequest req;
    req.id = static_cast<std::int64_t>(seed) + attempt;
    req.height = initial.height;
    req.width = initial.width;
    req.image = image;
    req.prompts = make_prompts(initial, seed + static_cast<std::uint64_t>(attempt));
    req.initial = &initial;
    RefineResponse resp;
    ++out.attempts;
    try {
      resp = refiner.refine(req);
    } catch (const std::exception& e) {
      spdlog::warn("refiner failed ({}); keeping the initial mask", e.what());
      out.mask = initial;
      out.confidence = 0.0;
      out.accepted = false;
      return out;
    }
    if (resp.mask.height != initial.height || resp.mask.width != initial.width) {
      spdlog::warn("refiner returned a {}x{} mask for a {}x{} slice; keeping the initial mask", resp.mask.height,
                   resp.mask.width, initial.height, initial.width);
      out.mask = initial;
      out.accepted = false;
      return out;
    }
    out.confidence = resp.confidence;
    if (resp.confidence >= gate) {
      out.mask = std::move(resp.mask);
      out.accepted = true;
      return out;
    }
  }
  out.mask = initial;
  return out;
}

BinaryMask3D segment_modality(const MultimodalVolume& vol, const MultimodalVolume& recon, const std::string& tag,
                              RegionRefiner* refiner, bool use_refiner, const PostprocConfig& cfg,
                              std::uint64_t seed, SegmentTrace* trace) {
  if (vol.dims() != recon.dims() || vol.modalities() != recon.modalities())
    throw ShapeMismatch("segment: reconstruction " + to_string(recon.dims()) + " does not match volume " +
                        to_string(vol.dims()));
  if (use_refiner && refiner == nullptr) throw std::invalid_argument("segment: refinement requested without a refiner");
  const std::size_t m = vol.modality_index(tag);
  const Dims3& d = vol.dims();

  std::vector<float> res(d.voxels());
  const auto orig = vol.channel(m);
  const auto rec = recon.channel(m);
  for (std::size_t i = 0; i < res.size(); ++i) res[i] = std::max(orig[i] - rec[i], 0.f);

  ThresholdResult th = threshold(res, cfg.threshold_fraction, cfg.threshold_floor);
  OtsuResult otsu = otsu_binarize(th.values, cfg.otsu_bins);
  BinaryMask3D binary(d);
  binary.data = std::move(otsu.mask);
  BinaryMask3D cleaned = morph_clean(binary);
  BinaryMask3D component = largest_component_3d(cleaned, cfg.connectivity);

  BinaryMask3D refined = component;
  if (use_refiner) {
    for (std::size_t z = 0; z < d.depth; ++z) {
      Mask2D initial(d.height, d.width);
      const auto src = component.slice(z);
      std::copy(src.begin(), src.end(), initial.data.begin());
      if (initial.count() == 0) continue;
      const auto outcome = refine_slice(vol.slice(m, z), initial, *refiner, seed + 3 * z, cfg.confidence_gate,
                                        cfg.max_attempts);
      std::copy(outcome.mask.data.begin(), outcome.mask.data.end(), refined.slice(z).begin());
    }
    refined = largest_component_3d(refined, cfg.connectivity);
  }

  if (trace) {
    trace->residual = std::move(res);
    trace->thresholded = std::move(th.values);
    trace->otsu = std::move(binary);
    trace->morph = std::move(cleaned);
    trace->component = std::move(component);
    trace->refined = refined;
    trace->tau = th.tau;
    trace->otsu_threshold = otsu.threshold;
  }
  return refined;
}

BinaryMask3D fill_holes_2d(const BinaryMask3D& mask) {
  const std::size_t h = mask.dims.height, w = mask.dims.width;
  BinaryMask3D out(mask.dims);
  std::vector<std::uint8_t> outside(h * w);
  std::vector<std::size_t> stack;
  for (std::size_t z = 0; z < mask.dims.depth; ++z) {
    const auto in = mask.slice(z);
    std::fill(outside.begin(), outside.end(), 0);
    stack.clear();
    auto seed = [&](std::size_t i) {
      if (!in[i] && !outside[i]) {
        outside[i] = 1;
        stack.push_back(i);
      }
    };
    for (std::size_t x = 0; x < w; ++x) {
      seed(x);
      seed((h - 1) * w + x);
    }
    for (std::size_t y = 0; y < h; ++y) {
      seed(y * w);
      seed(y * w + w - 1);
    }
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / w, x = i % w;
      if (y > 0) seed(i - w);
      if (y + 1 < h) seed(i + w);
      if (x > 0) seed(i - 1);
      if (x + 1 < w) seed(i + 1);
    }
    auto dst = out.slice(z);
    for (std::size_t i = 0; i < h * w; ++i) dst[i] = !outside[i];
  }
  return out;
}

LabelVolume fuse_masks(const BinaryMask3D& t1c, const BinaryMask3D& t2f) {
  if (t1c.dims != t2f.dims)
    throw ShapeMismatch("fuse: t1c mask " + to_string(t1c.dims) + " vs t2f mask " + to_string(t2f.dims));
  BinaryMask3D tumor(t1c.dims);
  for (std::size_t i = 0; i < tumor.data.size(); ++i) tumor.data[i] = t1c.data[i] || t2f.data[i];
  const BinaryMask3D filled = fill_holes_2d(tumor);
  LabelVolume out(t1c.dims);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (t1c.data[i])
      out.data[i] = kET;
    else if (t2f.data[i])
      out.data[i] = kSNFH;
    else if (filled.data[i])
      out.data[i] = kNET;
  }
  return out;
}

BinaryMask3D region_mask(const LabelVolume& labels, std::initializer_list<std::uint8_t> classes) {
  BinaryMask3D out(labels.dims);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::find(classes.begin(), classes.end(), labels.data[i]) != classes.end();
  return out;
}

}  // namespace uad
