#include "uad/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "uad/errors.hpp"
#include "uad/rng.hpp"

namespace uad {

using nlohmann::json;

IntensityModel IntensityModel::defaults() {
  // Columns: background, gray, white, ET, NET, SNFH. Raw units; after per-volume
  // z-scoring the brain/background step dominates the std (about 1.3), which puts
  // ET (t1c) and SNFH/ET (t2f) roughly 2.3 z above healthy tissue.
  IntensityModel m;
  auto row = [](std::array<float, kTissueCount> means, std::array<float, kTissueCount> stds) {
    std::array<TissueIntensity, kTissueCount> r{};
    for (std::size_t i = 0; i < kTissueCount; ++i) r[i] = {means[i], stds[i]};
    return r;
  };
  const std::array<float, kTissueCount> stds = {0.05f, 0.2f, 0.2f, 0.3f, 0.2f, 0.3f};
  m.table[0] = row({-3.f, 0.f, 0.4f, 3.f, -1.f, 0.f}, stds);     // t1c
  m.table[1] = row({-3.f, 0.f, 0.4f, 0.f, -0.5f, -0.5f}, stds);  // t1n
  m.table[2] = row({-3.f, 0.f, -0.4f, 3.f, 0.5f, 3.f}, stds);    // t2f
  m.table[3] = row({-3.f, 0.f, -0.6f, 2.f, 1.f, 2.5f}, stds);    // t2w
  return m;
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center{};  // z, y, x
  std::array<double, 3> axes{};

  double radius_at(double z, double y, double x) const {
    const double dz = (z - center[0]) / axes[0];
    const double dy = (y - center[1]) / axes[1];
    const double dx = (x - center[2]) / axes[2];
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  }
};

// Smooth membership falling from 1 to 0 across roughly 1.5 voxels at the surface.
double soft_inside(const Ellipsoid& e, double z, double y, double x) {
  const double r = e.radius_at(z, y, x);
  const double min_axis = std::min({e.axes[0], e.axes[1], e.axes[2]});
  const double signed_dist = (r - 1.0) * min_axis;
  return std::clamp(0.5 - signed_dist / 1.5, 0.0, 1.0);
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable 3D blur with clamped borders, in place.
void blur3d(std::vector<double>& f, const Dims3& d, double sigma) {
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernel(sigma);
  const long r = static_cast<long>(k.size() / 2);
  const std::array<std::size_t, 3> extent = {d.depth, d.height, d.width};
  const std::array<std::size_t, 3> stride = {d.height * d.width, d.width, 1};
  std::vector<double> line;
  std::vector<double> out;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::size_t n = extent[axis];
    line.resize(n);
    out.resize(n);
    for (std::size_t base = 0; base < f.size(); ++base) {
      // Visit each line once, from the element whose coordinate on `axis` is zero.
      if ((base / stride[axis]) % n != 0) continue;
      for (std::size_t i = 0; i < n; ++i) line[i] = f[base + i * stride[axis]];
      for (long i = 0; i < static_cast<long>(n); ++i) {
        double acc = 0.0;
        for (long t = -r; t <= r; ++t) {
          const long j = std::clamp(i + t, 0L, static_cast<long>(n) - 1);
          acc += k[t + r] * line[j];
        }
        out[i] = acc;
      }
      for (std::size_t i = 0; i < n; ++i) f[base + i * stride[axis]] = out[i];
    }
  }
}

void validate(const PhantomSpec& spec) {
  if (spec.shape.depth < 4 || spec.shape.height < 8 || spec.shape.width < 8)
    throw ConfigError("phantom shape " + to_string(spec.shape) + " is too small");
  if (spec.tumor_count < 0) throw ConfigError("tumor_count must be non-negative");
  if (spec.smoothness_sigma < 0.f) throw ConfigError("smoothness_sigma must be non-negative");
  if (!(spec.tumor_radius_min > 0.f) || spec.tumor_radius_max < spec.tumor_radius_min)
    throw ConfigError("invalid tumor radius range");
}

// Tumor sub-shells, as fractions of the outer (SNFH) normalized radius.
constexpr double kEtFraction = 0.35;
constexpr double kNetFraction = 0.6;

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const Dims3 d = spec.shape;
  const double cz = (d.depth - 1) / 2.0, cy = (d.height - 1) / 2.0, cx = (d.width - 1) / 2.0;

  Ellipsoid brain;
  brain.center = {cz + rng.uniform(-1.0, 1.0), cy + rng.uniform(-3.0, 3.0), cx + rng.uniform(-3.0, 3.0)};
  brain.axes = {0.42 * d.depth * rng.uniform(0.92, 1.08), 0.40 * d.height * rng.uniform(0.92, 1.08),
                0.34 * d.width * rng.uniform(0.92, 1.08)};
  Ellipsoid white = brain;
  for (double& a : white.axes) a *= 0.6 * rng.uniform(0.9, 1.1);

  std::vector<Ellipsoid> tumors;
  if (spec.tumor_present) {
    for (int t = 0; t < spec.tumor_count; ++t) {
      const double r = rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max);
      Ellipsoid tumor;
      tumor.axes = {0.8 * r * rng.uniform(0.85, 1.15), r * rng.uniform(0.85, 1.15),
                    r * rng.uniform(0.85, 1.15)};
      const double max_axis = std::max({tumor.axes[0], tumor.axes[1], tumor.axes[2]});
      const double min_brain = std::min({brain.axes[0], brain.axes[1], brain.axes[2]});
      bool placed = false;
      for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
        tumor.center = {rng.uniform(brain.center[0] - brain.axes[0], brain.center[0] + brain.axes[0]),
                        rng.uniform(brain.center[1] - brain.axes[1], brain.center[1] + brain.axes[1]),
                        rng.uniform(brain.center[2] - brain.axes[2], brain.center[2] + brain.axes[2])};
        const double rb = brain.radius_at(tumor.center[0], tumor.center[1], tumor.center[2]);
        if (rb + max_axis / min_brain > 0.85) continue;
        placed = std::all_of(tumors.begin(), tumors.end(), [&](const Ellipsoid& o) {
          double dist2 = 0.0;
          for (int a = 0; a < 3; ++a) dist2 += std::pow(o.center[a] - tumor.center[a], 2);
          const double reach = max_axis + std::max({o.axes[0], o.axes[1], o.axes[2]}) + 3.0;
          return dist2 > reach * reach;
        });
      }
      if (!placed)
        throw ConfigError("tumor " + std::to_string(t) + " does not fit inside the brain");
      tumors.push_back(tumor);
    }
  }

  std::vector<std::string> tags(kPhantomModalities.begin(), kPhantomModalities.end());
  Phantom out{MultimodalVolume(tags, d), LabelVolume(d), 0};

  std::vector<double> brain_w(d.voxels()), white_w(d.voxels());
  for (std::size_t z = 0; z < d.depth; ++z)
    for (std::size_t y = 0; y < d.height; ++y)
      for (std::size_t x = 0; x < d.width; ++x) {
        const std::size_t i = d.index(z, y, x);
        brain_w[i] = soft_inside(brain, z, y, x);
        white_w[i] = soft_inside(white, z, y, x);
        if (brain_w[i] >= 0.5) ++out.brain_voxels;
        for (const auto& tumor : tumors) {
          const double q = tumor.radius_at(z, y, x);
          if (q <= kEtFraction) out.labels.data[i] = kET;
          else if (q <= kNetFraction) out.labels.data[i] = kNET;
          else if (q <= 1.0) out.labels.data[i] = kSNFH;
        }
      }

  std::vector<double> texture(d.voxels());
  for (std::size_t m = 0; m < tags.size(); ++m) {
    for (double& v : texture) v = rng.normal();
    blur3d(texture, d, spec.smoothness_sigma);
    double mean = 0.0, sq = 0.0;
    for (double v : texture) mean += v;
    mean /= static_cast<double>(texture.size());
    for (double v : texture) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(texture.size()));
    const double inv = sd > 0.0 ? 1.0 / sd : 0.0;

    auto ch = out.volume.channel(m);
    const auto& bg = spec.intensity.get(m, Tissue::kBackground);
    const auto& gray = spec.intensity.get(m, Tissue::kGray);
    const auto& wm = spec.intensity.get(m, Tissue::kWhite);
    for (std::size_t i = 0; i < ch.size(); ++i) {
      const double n = (texture[i] - mean) * inv;
      double tissue = (1.0 - white_w[i]) * (gray.mean + gray.std * n) + white_w[i] * (wm.mean + wm.std * n);
      switch (out.labels.data[i]) {
        case kET: tissue = spec.intensity.get(m, Tissue::kET).mean + spec.intensity.get(m, Tissue::kET).std * n; break;
        case kNET: tissue = spec.intensity.get(m, Tissue::kNET).mean + spec.intensity.get(m, Tissue::kNET).std * n; break;
        case kSNFH: tissue = spec.intensity.get(m, Tissue::kSNFH).mean + spec.intensity.get(m, Tissue::kSNFH).std * n; break;
        default: break;
      }
      const double background = bg.mean + bg.std * n;
      ch[i] = static_cast<float>(brain_w[i] * tissue + (1.0 - brain_w[i]) * background);
    }
  }
  return out;
}

json to_json(const PhantomSpec& spec) {
  json intensity = json::object();
  for (std::size_t m = 0; m < kPhantomModalities.size(); ++m) {
    json row = json::object();
    for (std::size_t t = 0; t < kTissueCount; ++t)
      row[kTissueNames[t]] = {{"mean", spec.intensity.table[m][t].mean},
                              {"std", spec.intensity.table[m][t].std}};
    intensity[kPhantomModalities[m]] = row;
  }
  return {{"shape", {spec.shape.depth, spec.shape.height, spec.shape.width}},
          {"seed", spec.seed},
          {"tumor_present", spec.tumor_present},
          {"tumor_count", spec.tumor_count},
          {"smoothness_sigma", spec.smoothness_sigma},
          {"tumor_radius_min", spec.tumor_radius_min},
          {"tumor_radius_max", spec.tumor_radius_max},
          {"intensity_model", intensity},
          {"rng", kRngAlgorithm}};
}

PhantomSpec phantom_spec_from_json(const json& j) {
  static const std::set<std::string> known = {
      "shape", "seed", "tumor_present", "tumor_count", "smoothness_sigma",
      "tumor_radius_min", "tumor_radius_max", "intensity_model", "rng"};
  if (!j.is_object()) throw ConfigError("phantom spec must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown phantom spec key '" + key + "'");
  PhantomSpec s;
  try {
    if (j.contains("shape")) {
      const auto v = j.at("shape").get<std::vector<std::size_t>>();
      if (v.size() != 3) throw ConfigError("phantom shape must be [D,H,W]");
      s.shape = {v[0], v[1], v[2]};
    }
    s.seed = j.value("seed", s.seed);
    s.tumor_present = j.value("tumor_present", s.tumor_present);
    s.tumor_count = j.value("tumor_count", s.tumor_count);
    s.smoothness_sigma = j.value("smoothness_sigma", s.smoothness_sigma);
    s.tumor_radius_min = j.value("tumor_radius_min", s.tumor_radius_min);
    s.tumor_radius_max = j.value("tumor_radius_max", s.tumor_radius_max);
    if (j.contains("intensity_model")) {
      for (const auto& [tag, row] : j.at("intensity_model").items()) {
        auto it = std::find_if(kPhantomModalities.begin(), kPhantomModalities.end(),
                               [&](const char* t) { return tag == t; });
        if (it == kPhantomModalities.end()) throw ConfigError("unknown modality '" + tag + "'");
        const auto m = static_cast<std::size_t>(it - kPhantomModalities.begin());
        for (std::size_t t = 0; t < kTissueCount; ++t) {
          if (!row.contains(kTissueNames[t])) continue;
          const auto& cell = row.at(kTissueNames[t]);
          s.intensity.table[m][t] = {cell.value("mean", s.intensity.table[m][t].mean),
                                     cell.value("std", s.intensity.table[m][t].std)};
        }
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid phantom spec: ") + e.what());
  }
  return s;
}

}  // namespace uad
