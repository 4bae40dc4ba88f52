#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>

#include <boost/asio/post.hpp>
#include <boost/asio/thread_pool.hpp>
#include <spdlog/spdlog.h>

#include "uad/errors.hpp"
#include "uad/model.hpp"
#include "uad/overlay.hpp"
#include "uad/phantom.hpp"
#include "uad/pipeline.hpp"
#include "uad/rng.hpp"
#include "uad/train.hpp"

namespace uad {

namespace fs = std::filesystem;
using nlohmann::json;

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  boost::asio::thread_pool pool(std::min(workers, n));
  std::mutex mutex;
  std::exception_ptr first;
  std::size_t first_index = n;
  for (std::size_t i = 0; i < n; ++i)
    boost::asio::post(pool, [&, i] {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (i < first_index) {
          first_index = i;
          first = std::current_exception();
        }
      }
    });
  pool.join();
  if (first) std::rethrow_exception(first);
}

std::unique_ptr<RegionRefiner> make_refiner(const PipelineConfig& cfg) {
  switch (cfg.refiner) {
    case RefinerMode::kOff: return nullptr;
    case RefinerMode::kBuiltin: return std::make_unique<BuiltinRefiner>(cfg.postproc.region_tolerance);
    case RefinerMode::kExternal:
      return std::make_unique<ExternalRefiner>(
          split_command(cfg.refiner_command),
          std::chrono::milliseconds(static_cast<long>(cfg.refiner_timeout_s * 1000.0)));
  }
  return nullptr;
}

std::uint64_t case_seed(const PipelineConfig& cfg, const std::string& case_id) {
  return derive_seed(cfg.seed, fnv1a(case_id));
}

CaseSegmentation segment_case(const MViTAE& model, const MultimodalVolume& raw, const PipelineConfig& cfg,
                              RegionRefiner* refiner, std::uint64_t seed, SegmentTrace* t1c_trace,
                              SegmentTrace* t2f_trace) {
  const auto [norm, _] = zscore_normalize(raw);
  const MultimodalVolume recon = reconstruct_volume(model, norm);
  const bool refine = refiner != nullptr;
  CaseSegmentation out;
  out.t1c = segment_modality(norm, recon, "t1c", refiner, refine, cfg.postproc, derive_seed(seed, 0), t1c_trace);
  out.t2f = segment_modality(norm, recon, "t2f", refiner, refine, cfg.postproc, derive_seed(seed, 1), t2f_trace);
  out.labels = fuse_masks(out.t1c, out.t2f);

  const Dims3& d = norm.dims();
  out.slice_scores.assign(d.depth, 0.0);
  for (std::size_t z = 0; z < d.depth; ++z) {
    double sum = 0.0;
    for (std::size_t m = 0; m < norm.n_modalities(); ++m) {
      const auto a = norm.slice(m, z);
      const auto b = recon.slice(m, z);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = static_cast<double>(a[i]) - b[i];
        sum += e * e;
      }
    }
    out.slice_scores[z] = sum / static_cast<double>(d.slice_size() * norm.n_modalities());
  }
  return out;
}

namespace {

void write_raw(const fs::path& p, const void* data, std::size_t bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

template <typename T>
std::vector<T> read_raw(const fs::path& p, std::size_t count) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  if (static_cast<std::size_t>(in.tellg()) != count * sizeof(T))
    throw DataError("'" + p.string() + "' has the wrong size");
  in.seekg(0);
  std::vector<T> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(T)));
  return v;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in '" + p.string() + "': " + e.what());
  }
}

MViTAE load_model(const PipelineConfig& cfg, const fs::path& checkpoint) {
  ModelState state = load_checkpoint(checkpoint);
  if (!(state.model.config() == cfg.model))
    spdlog::warn("checkpoint architecture differs from the configured model; using the checkpoint's");
  return std::move(state.model);
}

}  // namespace

void write_segment_trace(const SegmentTrace& t, const Dims3& dims, const fs::path& dir) {
  fs::create_directories(dir);
  write_raw(dir / "residual.f32", t.residual.data(), t.residual.size() * 4);
  write_raw(dir / "threshold.f32", t.thresholded.data(), t.thresholded.size() * 4);
  write_raw(dir / "otsu.u8", t.otsu.data.data(), t.otsu.data.size());
  write_raw(dir / "morph.u8", t.morph.data.data(), t.morph.data.size());
  write_raw(dir / "cc.u8", t.component.data.data(), t.component.data.size());
  write_raw(dir / "refined.u8", t.refined.data.data(), t.refined.data.size());
  const json otsu = std::isnan(t.otsu_threshold) ? json(nullptr) : json(t.otsu_threshold);
  write_json(dir / "stages.json", {{"shape", {dims.depth, dims.height, dims.width}},
                                   {"tau", t.tau},
                                   {"otsu_threshold", otsu},
                                   {"stages", kStageNames}});
}

SegmentTrace read_segment_trace(const fs::path& dir, const Dims3& dims) {
  SegmentTrace t;
  const std::size_t n = dims.voxels();
  t.residual = read_raw<float>(dir / "residual.f32", n);
  t.thresholded = read_raw<float>(dir / "threshold.f32", n);
  auto mask = [&](const char* name) {
    BinaryMask3D m(dims);
    m.data = read_raw<std::uint8_t>(dir / name, n);
    return m;
  };
  t.otsu = mask("otsu.u8");
  t.morph = mask("morph.u8");
  t.component = mask("cc.u8");
  t.refined = mask("refined.u8");
  const json j = read_json(dir / "stages.json");
  t.tau = j.at("tau").get<double>();
  t.otsu_threshold = j.at("otsu_threshold").is_null() ? std::nan("") : j.at("otsu_threshold").get<double>();
  return t;
}

DatasetManifest run_phantom(const PipelineConfig& cfg, const fs::path& out, bool force) {
  prepare_output_dir(out, force);
  struct Job {
    std::string id, split;
    bool tumor;
  };
  std::vector<Job> jobs;
  auto add = [&](std::size_t n, const char* split, const char* tag, bool tumor) {
    for (std::size_t i = 0; i < n; ++i) {
      char id[64];
      std::snprintf(id, sizeof id, "%s_%s%03zu", split, tag, i);
      jobs.push_back({id, split, tumor});
    }
  };
  add(cfg.phantom.train_healthy, "train", "h", false);
  add(cfg.phantom.val_healthy, "val", "h", false);
  add(cfg.phantom.test_healthy, "test", "h", false);
  add(cfg.phantom.test_tumor, "test", "t", true);

  DatasetManifest manifest;
  manifest.cases.resize(jobs.size());
  parallel_for(jobs.size(), cfg.worker_count(), [&](std::size_t i) {
    const Job& job = jobs[i];
    PhantomSpec spec;
    spec.shape = cfg.phantom.shape;
    spec.seed = derive_seed(cfg.seed, fnv1a(job.id));
    spec.tumor_present = job.tumor;
    const Phantom ph = generate_phantom(spec);
    const fs::path dir = out / job.id;
    save_volume(ph.volume, dir);
    save_labels(ph.labels, dir);
    write_json(dir / "phantom_spec.json", to_json(spec));
    manifest.cases[i] = {job.id, job.split, job.tumor, ph.brain_voxels};
  });
  save_manifest(manifest, out);
  spdlog::info("wrote {} phantom cases to {}", jobs.size(), out.string());
  return manifest;
}

std::vector<EpochRecord> run_train(const PipelineConfig& cfg, const fs::path& dataset, const fs::path& out,
                                   bool resume, bool force) {
  const DatasetManifest manifest = load_manifest(dataset);
  const fs::path ckpt = out / "checkpoint";
  const fs::path csv = out / "loss.csv";
  const bool continuing = resume && fs::exists(ckpt / "header.json");
  if (!continuing) prepare_output_dir(out, force);

  const SliceBatch train_set = collect_healthy_slices(dataset, manifest.split("train"));
  if (train_set.empty()) throw DataError("dataset '" + dataset.string() + "' has no healthy training slices");
  const SliceBatch val_set = collect_healthy_slices(dataset, manifest.split("val"));
  spdlog::info("training on {} slices, validating on {}", train_set.size(), val_set.size());

  // `checkpoint` holds the best epoch, `last` the most recent one; a resumed run continues from `last`.
  const fs::path last = out / "last";
  ModelState state = continuing ? load_checkpoint(fs::exists(last / "header.json") ? last : ckpt)
                                : ModelState(cfg.model, derive_seed(cfg.seed, 101));
  if (continuing && !(state.model.config() == cfg.model))
    throw ConfigError("checkpoint architecture does not match the configured model");
  if (continuing) spdlog::info("resuming at epoch {}", state.epoch);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, 202);
  auto history = train(state, train_set, val_set, tc, ckpt, [&](const EpochRecord& r) {
    spdlog::info("epoch {:3d}  train {:.5f}  val {:.5f}{}", r.epoch, r.train_loss, r.val_loss, r.saved ? "  *" : "");
    write_loss_csv({r}, csv, true);
    save_checkpoint(state, last);
  });
  return history;
}

void run_reconstruct(const PipelineConfig& cfg, const fs::path& checkpoint, const fs::path& case_dir,
                     const fs::path& out) {
  const MViTAE model = load_model(cfg, checkpoint);
  const MultimodalVolume raw = load_volume(case_dir);
  const auto [norm, records] = zscore_normalize(raw);
  save_volume(zscore_denormalize(reconstruct_volume(model, norm), records), out);
}

SegmentRun run_segment(const PipelineConfig& cfg, const fs::path& checkpoint, const std::vector<fs::path>& case_dirs,
                       const fs::path& out, bool debug) {
  const MViTAE model = load_model(cfg, checkpoint);
  const auto refiner = make_refiner(cfg);
  fs::create_directories(out);

  std::vector<std::vector<double>> scores(case_dirs.size());
  std::vector<std::vector<bool>> positive(case_dirs.size());
  SegmentRun run;
  for (const auto& dir : case_dirs) run.case_ids.push_back(dir.filename().string());

  parallel_for(case_dirs.size(), cfg.worker_count(), [&](std::size_t i) {
    const fs::path& dir = case_dirs[i];
    const std::string& id = run.case_ids[i];
    const MultimodalVolume raw = load_volume(dir);
    SegmentTrace t1c, t2f;
    const CaseSegmentation seg =
        segment_case(model, raw, cfg, refiner.get(), case_seed(cfg, id), debug ? &t1c : nullptr, debug ? &t2f : nullptr);
    const fs::path dst = out / id;
    save_prediction(seg.labels, dst);
    if (debug) {
      write_segment_trace(t1c, raw.dims(), dst / "debug" / "t1c");
      write_segment_trace(t2f, raw.dims(), dst / "debug" / "t2f");
    }
    scores[i] = seg.slice_scores;
    if (fs::exists(dir / "labels.u8")) {
      const LabelVolume gt = load_labels(dir, raw.dims());
      for (std::size_t z = 0; z < raw.dims().depth; ++z) {
        const auto* s = gt.data.data() + z * raw.dims().slice_size();
        positive[i].push_back(std::any_of(s, s + raw.dims().slice_size(), [](std::uint8_t v) { return v != 0; }));
      }
    }
    spdlog::info("segmented {}", id);
  });

  for (std::size_t i = 0; i < case_dirs.size(); ++i) {
    if (positive[i].size() != scores[i].size()) continue;
    run.slice_scores.insert(run.slice_scores.end(), scores[i].begin(), scores[i].end());
    run.slice_positive.insert(run.slice_positive.end(), positive[i].begin(), positive[i].end());
  }
  return run;
}

MetricsReport run_evaluate(const PipelineConfig& cfg, const fs::path& pred_root, const fs::path& dataset,
                           const std::optional<fs::path>& out) {
  const DatasetManifest manifest = load_manifest(dataset);
  const auto tests = manifest.split("test");
  if (tests.empty()) throw DataError("dataset '" + dataset.string() + "' has no test cases");

  std::set<std::string> expected, found;
  for (const auto& c : tests) expected.insert(c.id);
  if (fs::is_directory(pred_root))
    for (const auto& e : fs::directory_iterator(pred_root))
      if (e.is_directory() && fs::exists(e.path() / "labels.u8")) found.insert(e.path().filename().string());
  std::string missing, extra;
  for (const auto& id : expected)
    if (!found.contains(id)) missing += (missing.empty() ? "" : ", ") + id;
  for (const auto& id : found)
    if (!expected.contains(id)) extra += (extra.empty() ? "" : ", ") + id;
  if (!missing.empty() || !extra.empty())
    throw DataError("prediction and ground-truth case lists differ" +
                    (missing.empty() ? std::string() : "; missing predictions: " + missing) +
                    (extra.empty() ? std::string() : "; predictions without ground truth: " + extra));

  std::vector<CaseScores> scores(tests.size());
  parallel_for(tests.size(), cfg.worker_count(), [&](std::size_t i) {
    const auto& c = tests[i];
    const LabelVolume pred = load_prediction(pred_root / c.id);
    const LabelVolume gt = load_labels(dataset / c.id, pred.dims);
    scores[i] = evaluate_case(pred, gt, cfg.metrics, c.id);
  });
  MetricsReport report = make_report(std::move(scores), cfg.metrics);
  if (out) {
    fs::create_directories(*out);
    write_json(*out / "report.json", to_json(report));
    std::ofstream(*out / "report.txt") << format_table(report);
  }
  return report;
}

std::vector<fs::path> run_overlay(const fs::path& case_dir, const fs::path& pred_dir, std::size_t z0, std::size_t z1,
                                  const fs::path& out, const std::string& modality) {
  const MultimodalVolume raw = load_volume(case_dir);
  const auto [norm, _] = zscore_normalize(raw);
  const Dims3& d = norm.dims();
  const LabelVolume pred = load_prediction(pred_dir);
  if (pred.dims != d) throw ShapeMismatch("prediction " + to_string(pred.dims) + " vs case " + to_string(d));
  const LabelVolume gt = fs::exists(case_dir / "labels.u8") ? load_labels(case_dir, d) : LabelVolume(d);
  z1 = std::min(z1, d.depth);
  if (z0 >= z1) throw ConfigError("empty slice range");

  const auto channel = norm.channel(norm.modality_index(modality));
  const auto [lo, hi] = std::minmax_element(channel.begin(), channel.end());
  fs::create_directories(out);
  std::vector<fs::path> written;
  for (std::size_t z = z0; z < z1; ++z) {
    const auto base = norm.slice(norm.modality_index(modality), z);
    for (const auto& [tag, vol] : {std::pair{"gt", &gt}, std::pair{"pred", &pred}}) {
      const std::span<const std::uint8_t> lab(vol->data.data() + z * d.slice_size(), d.slice_size());
      char name[64];
      std::snprintf(name, sizeof name, "%03zu_%s.png", z, tag);
      write_png(render_overlay(base, lab, d.height, d.width, *lo, *hi), out / name);
      written.push_back(out / name);
    }
  }
  return written;
}

E2EResult run_e2e(const PipelineConfig& cfg, const fs::path& work, bool force) {
  cfg.validate();
  prepare_output_dir(work, force);
  write_json(work / "config.json", to_json(cfg));
  const fs::path dataset = work / "dataset";
  const DatasetManifest manifest = run_phantom(cfg, dataset, true);

  E2EResult result;
  result.history = run_train(cfg, dataset, work / "model", false, true);

  std::vector<fs::path> cases;
  for (const auto& c : manifest.split("test")) cases.push_back(dataset / c.id);
  const SegmentRun seg = run_segment(cfg, work / "model" / "checkpoint", cases, work / "predictions", false);
  result.report = run_evaluate(cfg, work / "predictions", dataset, std::nullopt);
  result.slice_auroc = auroc(seg.slice_scores, seg.slice_positive);

  json j = to_json(result.report);
  j["slice_auroc"] = result.slice_auroc;
  write_json(work / "report.json", j);
  std::ofstream(work / "report.txt") << format_table(result.report);
  return result;
}

}  // namespace uad
