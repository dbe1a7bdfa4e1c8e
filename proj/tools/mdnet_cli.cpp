// mdnet: command-line front end for the segmentation toolkit.
//
// Subcommands: preprocess | synth | train | eval | predict | viz | inspect.
// Every command that writes outputs echoes its effective configuration to
// <out>/config.json. Config precedence: built-in defaults, then --config
// file, then --preset, then --set dotted-path overrides. Relative --data and
// cache --out paths resolve under $MDNET_CACHE_ROOT when it is set.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mdnet/data.hpp"
#include "mdnet/eval.hpp"
#include "mdnet/image_io.hpp"
#include "mdnet/model.hpp"
#include "mdnet/train.hpp"

namespace fs = std::filesystem;
using namespace mdnet;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& c, bool with_out = true) {
  cmd->add_option("--config", c.config_path, "JSON config file");
  cmd->add_option("--preset", c.preset, "model preset: full or tiny")
      ->check(CLI::IsMember({"full", "tiny"}));
  cmd->add_option("--set", c.overrides,
                  "dotted-path config override, e.g. --set train.learning_rate=0.001");
  if (with_out) cmd->add_option("--out", c.out, "output directory")->required();
}

RunConfig build_config(const CommonOpts& c) {
  RunConfig run;
  if (!c.config_path.empty()) {
    std::ifstream is(c.config_path);
    if (!is) throw IoError("cannot read config file: " + c.config_path);
    json j;
    try {
      is >> j;
    } catch (const std::exception& e) {
      throw ConfigError("malformed config file " + c.config_path + ": " + e.what());
    }
    run.apply_json(j);
  }
  if (!c.preset.empty()) run.model = ModelConfig::from_preset(c.preset);
  for (const std::string& kv : c.overrides) run.apply_override(kv);
  run.validate();
  return run;
}

fs::path cache_rooted(const std::string& path) {
  fs::path p(path);
  const char* root = std::getenv("MDNET_CACHE_ROOT");
  if (root && *root && p.is_relative()) return fs::path(root) / p;
  return p;
}

void echo_config(const RunConfig& run, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "config.json");
  if (!os) throw IoError("cannot write config echo in " + out_dir.string());
  os << run.to_json_doc().dump(2) << "\n";
}

json checkpoint_manifest(const RunConfig& run, const std::string& kind, int epoch,
                         real val_loss) {
  return json{{"format_version", 1},
              {"preset", run.model.preset},
              {"kind", kind},
              {"epoch", epoch},
              {"val_loss", val_loss},
              {"config", run.to_json_doc()}};
}

// model + params from a checkpoint archive (config comes from its manifest)
std::pair<MDNet, ParamStore> load_model(const std::string& ckpt_path, RunConfig& run_out) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  if (!ck.manifest.contains("config"))
    throw IoError("checkpoint manifest lacks a config block: " + ckpt_path);
  RunConfig run;
  run.apply_json(ck.manifest.at("config"));
  run.validate();
  MDNet model(run.model);
  ParamStore store = model.init(0);
  import_weights(store, ck);
  run_out = run;
  return {std::move(model), std::move(store)};
}

Tensor image_from_pgm(const std::string& path) {
  GrayImage img = read_pgm(path);
  Tensor t(Shape{3, img.h, img.w});
  const real inv = 1.0 / real(img.maxval);
  for (int64_t i = 0; i < img.h * img.w; ++i) t[i] = real(img.px[size_t(i)]) * inv;
  for (int c = 1; c < 3; ++c)
    std::copy(t.vec().begin(), t.vec().begin() + img.h * img.w,
              t.vec().begin() + c * img.h * img.w);
  return t;
}

void write_mask_pgm(const fs::path& path, const Tensor& mask) {  // [1,H,W] or [N,1,H,W]
  const int64_t H = mask.dim(mask.ndim() - 2), W = mask.dim(mask.ndim() - 1);
  GrayImage img;
  img.h = H;
  img.w = W;
  img.maxval = 255;
  img.px.resize(size_t(H * W));
  for (int64_t i = 0; i < H * W; ++i) img.px[size_t(i)] = mask[i] != 0.0 ? 255 : 0;
  write_pgm(path.string(), img);
}

void write_prob_pgm(const fs::path& path, const real* prob, int64_t H, int64_t W) {
  GrayImage img;
  img.h = H;
  img.w = W;
  img.maxval = 65535;
  img.px.resize(size_t(H * W));
  for (int64_t i = 0; i < H * W; ++i)
    img.px[size_t(i)] = uint16_t(std::lround(std::clamp(prob[i], 0.0, 1.0) * 65535.0));
  write_pgm(path.string(), img);
}

// ---------- synth ----------

int cmd_synth(const CommonOpts& common, int n, int size, uint64_t seed, bool overfit) {
  RunConfig run = build_config(common);
  const fs::path out = cache_rooted(common.out);
  auto samples = synth_generate(seed, n, size);

  DataManifest m;
  m.dataset_kind = "synthetic";
  m.window_lo = run.preprocess.window_lo;
  m.window_hi = run.preprocess.window_hi;
  m.out_size = size;
  m.foreground_only = false;

  std::vector<std::string> ids;
  for (const Sample& s : samples) ids.push_back(s.meta.volume_id);
  std::map<std::string, std::string> split_of;
  if (overfit) {
    for (const auto& id : ids) split_of[id] = "train";
  } else {
    SplitResult sp = split_dataset(ids, DatasetKind::Generic, seed);
    for (const auto& id : sp.train) split_of[id] = "train";
    for (const auto& id : sp.val) split_of[id] = "val";
    for (const auto& id : sp.test) split_of[id] = "test";
  }

  fs::create_directories(out);
  for (const Sample& s : samples)
    m.volumes.push_back(write_volume_cache(out.string(), s.meta.volume_id,
                                           split_of.at(s.meta.volume_id), {s}));
  m.save((out / "manifest.json").string());
  echo_config(run, out);
  std::cout << "synth: wrote " << samples.size() << " samples (" << size << "x" << size
            << ") to " << out.string() << (overfit ? " [single all-train split]" : "") << "\n";
  return 0;
}

// ---------- preprocess ----------

struct VolumePair {
  std::string id, image, label;
};

std::vector<VolumePair> discover_pairs(const fs::path& input, DatasetKind kind,
                                       std::vector<std::string>& missing) {
  auto is_nifti = [](const fs::path& p) {
    const std::string n = p.filename().string();
    return n.size() > 4 && (n.substr(n.size() - 4) == ".nii" ||
                            (n.size() > 7 && n.substr(n.size() - 7) == ".nii.gz"));
  };
  auto stem_of = [](const fs::path& p) {
    std::string n = p.filename().string();
    if (n.size() > 7 && n.substr(n.size() - 7) == ".nii.gz") return n.substr(0, n.size() - 7);
    return n.substr(0, n.size() - 4);
  };
  std::vector<VolumePair> pairs;
  auto try_label = [&](const fs::path& dir, const std::string& stem) -> std::string {
    for (const char* ext : {".nii", ".nii.gz"}) {
      fs::path cand = dir / (stem + ext);
      if (fs::exists(cand)) return cand.string();
    }
    return "";
  };

  if (kind == DatasetKind::Spleen) {
    const fs::path imgs = input / "imagesTr";
    if (!fs::is_directory(imgs))
      throw IoError("spleen layout expects imagesTr/ and labelsTr/ under " + input.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(imgs))
      if (e.is_regular_file() && is_nifti(e.path()) &&
          e.path().filename().string()[0] != '.')
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
      const std::string stem = stem_of(f);
      const std::string lab = try_label(input / "labelsTr", stem);
      if (lab.empty())
        missing.push_back(stem);
      else
        pairs.push_back({stem, f.string(), lab});
    }
  } else {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_regular_file() && is_nifti(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
      const std::string stem = stem_of(f);
      if (kind == DatasetKind::LiTS) {
        if (stem.rfind("volume-", 0) != 0) continue;
        const std::string id = stem.substr(7);
        const std::string lab = try_label(input, "segmentation-" + id);
        if (lab.empty())
          missing.push_back(stem);
        else
          pairs.push_back({stem, f.string(), lab});
      } else {  // generic: <stem>.nii[.gz] with <stem>_label.nii[.gz]
        if (stem.size() > 6 && stem.substr(stem.size() - 6) == "_label") continue;
        const std::string lab = try_label(input, stem + "_label");
        if (lab.empty())
          missing.push_back(stem);
        else
          pairs.push_back({stem, f.string(), lab});
      }
    }
  }
  return pairs;
}

int cmd_preprocess(const CommonOpts& common, const std::string& input_dir,
                   const std::string& kind_str, uint64_t seed,
                   const std::vector<int>& label_ids) {
  RunConfig run = build_config(common);
  const DatasetKind kind = dataset_kind_from_string(kind_str);
  const fs::path input(input_dir);
  const fs::path out = cache_rooted(common.out);
  if (!fs::is_directory(input)) throw IoError("input directory not found: " + input.string());

  std::vector<std::string> missing;
  std::vector<VolumePair> pairs = discover_pairs(input, kind, missing);
  if (!missing.empty()) {
    std::string msg = "missing label files for:";
    for (const auto& m : missing) msg += " " + m;
    throw IoError(msg);
  }
  if (pairs.empty())
    throw IoError("no volume/label pairs found in " + input.string() + " (kind " + kind_str +
                  "); nothing written");

  std::set<int> mapping(label_ids.begin(), label_ids.end());
  if (mapping.empty())
    mapping = kind == DatasetKind::LiTS ? std::set<int>{1, 2} : std::set<int>{1};

  std::vector<std::string> ids;
  for (const auto& p : pairs) ids.push_back(p.id);
  SplitResult sp = split_dataset(ids, kind, seed);
  std::map<std::string, std::string> split_of;
  for (const auto& id : sp.train) split_of[id] = "train";
  for (const auto& id : sp.val) split_of[id] = "val";
  for (const auto& id : sp.test) split_of[id] = "test";

  DataManifest m;
  m.dataset_kind = kind_str;
  m.window_lo = run.preprocess.window_lo;
  m.window_hi = run.preprocess.window_hi;
  m.out_size = run.preprocess.out_size;
  m.foreground_only = run.preprocess.foreground_only;

  fs::create_directories(out);
  std::set<int> unknown;
  for (const VolumePair& p : pairs) {
    Volume vol = load_volume(p.image, p.label, p.id);
    auto samples = slice_and_preprocess(vol, run.preprocess, mapping, &unknown);
    m.volumes.push_back(write_volume_cache(out.string(), p.id, split_of.at(p.id), samples));
    std::cout << "preprocess: " << p.id << " -> " << samples.size() << " slices\n";
  }
  if (!unknown.empty()) {
    std::cerr << "warning: unknown label ids treated as background:";
    for (int u : unknown) std::cerr << " " << u;
    std::cerr << "\n";
  }
  m.save((out / "manifest.json").string());
  echo_config(run, out);
  std::cout << "preprocess: " << pairs.size() << " volumes (train " << sp.train.size() << ", val "
            << sp.val.size() << ", test " << sp.test.size() << ") -> " << out.string() << "\n";
  return 0;
}

// ---------- train ----------

int cmd_train(const CommonOpts& common, const std::string& data_path, bool resume,
              const std::string& train_split, const std::string& val_split, int ckpt_every) {
  RunConfig run = build_config(common);
  const fs::path data = cache_rooted(data_path);
  const fs::path out(common.out);
  const fs::path manifest_path = fs::is_directory(data) ? data / "manifest.json" : data;
  const std::string base_dir = manifest_path.parent_path().string();
  DataManifest manifest = DataManifest::load(manifest_path.string());

  auto train_samples = load_split(base_dir, manifest, train_split);
  if (train_samples.empty())
    throw ConfigError("train: split '" + train_split + "' is empty in " +
                      manifest_path.string());
  TrainSet train_set = to_train_set(train_samples);
  TrainSet val_set;
  if (val_split == train_split) {
    val_set = train_set;  // shared storage enables single-sweep metrics
  } else {
    auto val_samples = load_split(base_dir, manifest, val_split);
    if (val_samples.empty())
      throw ConfigError("train: validation split '" + val_split + "' is empty in " +
                        manifest_path.string());
    val_set = to_train_set(val_samples);
  }

  fs::create_directories(out);
  echo_config(run, out);
  const fs::path history_path = out / "history.jsonl";
  const fs::path timing_path = out / "timing.jsonl";

  ResumeState rs;
  const ResumeState* rs_ptr = nullptr;
  if (resume) {
    const fs::path last = out / "last.ckpt";
    if (!fs::exists(last)) throw IoError("--resume: no checkpoint at " + last.string());
    Checkpoint ck = load_checkpoint(last.string());
    MDNet model(run.model);
    rs.params = model.init(0);
    import_weights(rs.params, ck);
    rs.optim_extra = ck.extra;
    rs.next_epoch = ck.manifest.value("next_epoch", 1);
    rs.best_val = ck.manifest.value("best_val", std::numeric_limits<real>::infinity());
    rs.best_epoch = ck.manifest.value("best_epoch", 0);
    rs.patience_counter = ck.manifest.value("patience_counter", 0);
    const fs::path best = out / "best.ckpt";
    if (fs::exists(best)) {
      Checkpoint bk = load_checkpoint(best.string());
      rs.best_params = model.init(0);
      import_weights(rs.best_params, bk);
    } else {
      rs.best_params = rs.params.clone();
    }
    rs_ptr = &rs;
    std::cout << "train: resuming from epoch " << rs.next_epoch << "\n";
  } else {
    std::ofstream(history_path).close();  // fresh deterministic history
    std::ofstream(timing_path).close();
  }

  int last_best_epoch = rs_ptr ? rs.best_epoch : 0;
  int last_written_epoch = 0;
  auto last_manifest = [&](const EpochRecord& rec, const EarlyStopper& st) {
    json man = checkpoint_manifest(run, "last", rec.epoch, rec.val_loss);
    man["next_epoch"] = rec.epoch + 1;
    man["best_val"] = st.best;
    man["best_epoch"] = st.best_epoch;
    man["patience_counter"] = st.counter;
    return man;
  };
  auto on_epoch = [&](const EpochRecord& rec, const ParamStore& current, const Adam& adam,
                      const EarlyStopper& st) {
    {
      std::ofstream hs(history_path, std::ios::app);
      hs << TrainHistory::record_json(rec).dump() << "\n";
      std::ofstream tsn(timing_path, std::ios::app);
      tsn << json{{"epoch", rec.epoch}, {"seconds", rec.seconds}}.dump() << "\n";
    }
    if (st.best_epoch == rec.epoch) {
      json man = checkpoint_manifest(run, "best", rec.epoch, rec.val_loss);
      save_checkpoint((out / "best.ckpt").string(), current, man);
      last_best_epoch = rec.epoch;
    }
    // the final epoch always persists so --resume sees the full state
    if (rec.epoch % std::max(1, ckpt_every) == 0 || rec.epoch == run.train.max_epochs) {
      save_checkpoint((out / "last.ckpt").string(), current, last_manifest(rec, st),
                      adam.export_state());
      last_written_epoch = rec.epoch;
    }
    std::cout << "epoch " << rec.epoch << ": train_loss " << rec.train_loss << " val_loss "
              << rec.val_loss << " val_dsc [" << rec.val_dsc[0] << ", " << rec.val_dsc[1] << ", "
              << rec.val_dsc[2] << "]" << (st.best_epoch == rec.epoch ? " *" : "") << "\n";
  };

  // the loop may stop before max_epochs; rewrite last.ckpt for the tail only
  Adam final_adam(run.train.learning_rate);
  EarlyStopper final_stopper(run.train.patience);
  EpochRecord final_rec;
  auto capture = [&](const EpochRecord& rec, const ParamStore& current, const Adam& adam,
                     const EarlyStopper& st) {
    on_epoch(rec, current, adam, st);
    final_rec = rec;
    final_stopper = st;
    final_adam.import_state(adam.export_state());
  };

  TrainResult result = train(run.model, run.train, train_set, val_set, rs_ptr, capture);

  if (!result.history.epochs.empty() && last_written_epoch != final_rec.epoch)
    save_checkpoint((out / "last.ckpt").string(), result.last_params,
                    last_manifest(final_rec, final_stopper), final_adam.export_state());
  if (!fs::exists(out / "best.ckpt") || last_best_epoch != result.best_epoch) {
    json bman = checkpoint_manifest(run, "best", result.best_epoch, result.best_val_loss);
    save_checkpoint((out / "best.ckpt").string(), result.best_params, bman);
  }
  std::cout << "train: " << result.stop_reason << " after " << result.history.epochs.size()
            << " epoch(s); best val loss " << result.best_val_loss << " at epoch "
            << result.best_epoch << "\n";
  return 0;
}

// ---------- eval ----------

int cmd_eval(const CommonOpts& common, const std::string& ckpt, const std::string& data_path,
             const std::string& split, real threshold, bool per_slice, int batch) {
  const fs::path data = cache_rooted(data_path);
  const fs::path manifest_path = fs::is_directory(data) ? data / "manifest.json" : data;
  DataManifest manifest = DataManifest::load(manifest_path.string());
  if (manifest.out_size % 32 != 0)
    throw ConfigError("eval: manifest image size " + std::to_string(manifest.out_size) +
                      " is incompatible with the model (needs a multiple of 32)");
  RunConfig run;
  auto [model, store] = load_model(ckpt, run);
  for (const std::string& kv : common.overrides) run.apply_override(kv);

  EvalOptions opt;
  opt.split = split;
  opt.threshold = threshold;
  opt.per_slice = per_slice;
  opt.batch_size = batch;
  MetricsReport report = evaluate_split(manifest_path.parent_path().string(), manifest,
                                        model_predictor(model, store), opt);

  const fs::path out(common.out);
  fs::create_directories(out);
  echo_config(run, out);
  const std::string text = format_report(report, split, threshold, per_slice);
  {
    std::ofstream os(out / "report.txt");
    os << text;
    std::ofstream js(out / "report.json");
    js << report_json(report, split, threshold, per_slice).dump(2) << "\n";
  }
  std::cout << text;
  return 0;
}

// ---------- predict ----------

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

int cmd_predict(const CommonOpts& common, const std::string& ckpt, const std::string& input,
                real threshold) {
  RunConfig run;
  auto [model, store] = load_model(ckpt, run);
  for (const std::string& kv : common.overrides) run.apply_override(kv);
  const fs::path out(common.out);
  fs::create_directories(out);
  echo_config(run, out);

  auto predict_one = [&](const Tensor& image, int index) {
    Prediction p = model.predict(store, image, threshold);
    char name[32];
    std::snprintf(name, sizeof(name), "mask_%04d.pgm", index);
    write_mask_pgm(out / name, p.mask);
    for (int h = 0; h < 3; ++h) {
      std::snprintf(name, sizeof(name), "prob%d_%04d.pgm", h + 1, index);
      write_prob_pgm(out / name, p.probs[size_t(h)].data(), p.probs[size_t(h)].dim(2),
                     p.probs[size_t(h)].dim(3));
    }
  };

  if (ends_with(input, ".nii") || ends_with(input, ".nii.gz")) {
    NiftiVolume nv = read_nifti(input);
    Volume vol;
    vol.id = fs::path(input).filename().string();
    vol.d = nv.nz;
    vol.h = nv.ny;
    vol.w = nv.nx;
    vol.spacing = nv.spacing;
    vol.voxels = std::move(nv.data);
    vol.labels.assign(size_t(vol.d * vol.h * vol.w), 0);
    auto samples = slice_and_preprocess(vol, run.preprocess, {});
    for (const Sample& s : samples) predict_one(s.image, s.meta.slice_index);
    std::cout << "predict: " << samples.size() << " slice(s) -> " << out.string() << "\n";
  } else if (ends_with(input, ".pgm")) {
    Tensor img = image_from_pgm(input);
    if (img.dim(1) % 32 != 0 || img.dim(2) % 32 != 0)
      throw ConfigError("predict: image dims must be divisible by 32, got " +
                        shape_str(img.shape()));
    predict_one(img, 0);
    std::cout << "predict: 1 image -> " << out.string() << "\n";
  } else {
    throw ConfigError("predict: unsupported input type (expected .nii, .nii.gz or .pgm): " +
                      input);
  }
  return 0;
}

// ---------- viz ----------

int cmd_viz(const CommonOpts& common, const std::string& ckpt, const std::string& input,
            int slice_index, real threshold) {
  RunConfig run;
  auto [model, store] = load_model(ckpt, run);
  for (const std::string& kv : common.overrides) run.apply_override(kv);
  const fs::path out(common.out);
  fs::create_directories(out);
  echo_config(run, out);

  Tensor image;
  if (ends_with(input, ".pgm")) {
    image = image_from_pgm(input);
  } else if (ends_with(input, ".nii") || ends_with(input, ".nii.gz")) {
    NiftiVolume nv = read_nifti(input);
    Volume vol;
    vol.id = "viz";
    vol.d = nv.nz;
    vol.h = nv.ny;
    vol.w = nv.nx;
    vol.spacing = nv.spacing;
    vol.voxels = std::move(nv.data);
    vol.labels.assign(size_t(vol.d * vol.h * vol.w), 0);
    if (slice_index < 0 || slice_index >= vol.d)
      throw ConfigError("viz: slice index " + std::to_string(slice_index) +
                        " outside volume depth " + std::to_string(vol.d));
    auto samples = slice_and_preprocess(vol, run.preprocess, {});
    image = samples[size_t(slice_index)].image;
  } else {
    throw ConfigError("viz: unsupported input type: " + input);
  }

  Prediction p = model.predict(store, image, threshold);
  const int64_t H = p.probs[0].dim(2), W = p.probs[0].dim(3);

  auto heatmap_of = [&](const Tensor& prob) {
    RgbImage hm;
    hm.h = H;
    hm.w = W;
    hm.px.resize(size_t(H * W * 3));
    for (int64_t i = 0; i < H * W; ++i) {
      const auto rgb = viridis(prob[i]);
      for (int c = 0; c < 3; ++c) hm.px[size_t(3 * i + c)] = rgb[size_t(c)];
    }
    return hm;
  };

  char name[32];
  for (int h = 0; h < 3; ++h) {
    std::snprintf(name, sizeof(name), "heatmap_m%d.ppm", h + 1);
    write_ppm((out / name).string(), heatmap_of(p.probs[size_t(h)]));

    // boundary of the thresholded head over the grayscale input
    RgbImage ov;
    ov.h = H;
    ov.w = W;
    ov.px.resize(size_t(H * W * 3));
    const real* g = image.data();  // first channel
    std::vector<uint8_t> bin(size_t(H * W));
    const Tensor& prob = p.probs[size_t(h)];
    for (int64_t i = 0; i < H * W; ++i) bin[size_t(i)] = prob[i] > threshold;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const int64_t i = y * W + x;
        const uint8_t v = uint8_t(std::lround(std::clamp(g[i], 0.0, 1.0) * 255.0));
        bool edge = false;
        if (bin[size_t(i)]) {
          edge = y == 0 || y == H - 1 || x == 0 || x == W - 1 || !bin[size_t(i - W)] ||
                 !bin[size_t(i + W)] || !bin[size_t(i - 1)] || !bin[size_t(i + 1)];
        }
        ov.px[size_t(3 * i) + 0] = edge ? 255 : v;
        ov.px[size_t(3 * i) + 1] = edge ? 48 : v;
        ov.px[size_t(3 * i) + 2] = edge ? 48 : v;
      }
    std::snprintf(name, sizeof(name), "overlay_m%d.ppm", h + 1);
    write_ppm((out / name).string(), ov);
  }

  // side-by-side refinement panel, columns ordered M1 | M2 | M3
  const int64_t sep = 2;
  RgbImage panel;
  panel.h = H;
  panel.w = 3 * W + 2 * sep;
  panel.px.assign(size_t(panel.h * panel.w * 3), 255);
  for (int h = 0; h < 3; ++h) {
    RgbImage hm = heatmap_of(p.probs[size_t(h)]);
    const int64_t x0 = h * (W + sep);
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c)
          panel.px[size_t(3 * (y * panel.w + x0 + x) + c)] = hm.px[size_t(3 * (y * W + x) + c)];
  }
  write_ppm((out / "panel.ppm").string(), panel);
  std::cout << "viz: wrote 3 heatmaps, 3 overlays and panel.ppm to " << out.string() << "\n";
  return 0;
}

// ---------- inspect ----------

int cmd_inspect(const CommonOpts& common, int size) {
  RunConfig run = build_config(common);
  if (size % 32 != 0) throw ConfigError("inspect: --size must be a multiple of 32");
  TraceState ts = MDNet::trace(run.model, size, size);

  std::map<std::string, int64_t> params_by_module;
  int64_t total_params = 0;
  for (const ParamSpec& s : ts.specs) {
    if (s.buffer) continue;
    const int64_t n = numel(s.shape);
    params_by_module[s.name.substr(0, s.name.find('.'))] += n;
    total_params += n;
  }

  std::printf("Architecture summary: preset %s, input [3,%d,%d]\n\n",
              run.model.preset.c_str(), size, size);
  std::printf("%-10s %14s %16s\n", "module", "params", "MACs");
  for (const auto& [mod, p] : params_by_module)
    std::printf("%-10s %14lld %16.0f\n", mod.c_str(), static_cast<long long>(p),
                ts.macs_by_module.count(mod) ? ts.macs_by_module.at(mod) : 0.0);
  std::printf("%-10s %14lld %16.0f\n", "total", static_cast<long long>(total_params), ts.macs);
  std::printf("\ntotal parameters: %lld (%.2f M)\n", static_cast<long long>(total_params),
              double(total_params) / 1e6);
  std::printf("total MACs at [3,%d,%d]: %.0f (%.2f GMac)\n\n", size, size, ts.macs,
              ts.macs / 1e9);

  std::printf("feature-shape trace\n");
  for (const auto& [label, shape] : ts.shape_log)
    std::printf("  %-4s %s\n", label.c_str(), shape_str(shape).c_str());
  if (!common.out.empty()) echo_config(run, common.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MDNet: multi-decoder segmentation network toolkit"};
  app.require_subcommand(1);

  // synth
  CommonOpts synth_c;
  int synth_n = 16, synth_size = 256;
  uint64_t synth_seed = 0;
  bool synth_overfit = false;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset cache");
  add_common(synth, synth_c);
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--size", synth_size, "square sample size (multiple of 32)");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_flag("--overfit", synth_overfit,
                  "place every sample in the train split (desk-scale overfit runs)");

  // preprocess
  CommonOpts prep_c;
  std::string prep_input, prep_kind = "generic";
  uint64_t prep_seed = 0;
  std::vector<int> prep_labels;
  CLI::App* prep = app.add_subcommand("preprocess", "slice CT volumes into a training cache");
  add_common(prep, prep_c);
  prep->add_option("--input", prep_input, "directory of NIfTI volume/label pairs")->required();
  prep->add_option("--kind", prep_kind, "dataset kind: lits | msd_spleen | generic")
      ->check(CLI::IsMember({"lits", "msd_spleen", "generic"}));
  prep->add_option("--seed", prep_seed, "split shuffle seed");
  prep->add_option("--labels", prep_labels, "foreground label ids (default per kind)");

  // train
  CommonOpts train_c;
  std::string train_data, train_split = "train", val_split = "val";
  bool train_resume = false;
  uint64_t train_seed = std::numeric_limits<uint64_t>::max();
  int ckpt_every = 1;
  CLI::App* traincmd = app.add_subcommand("train", "train on a preprocessed cache");
  add_common(traincmd, train_c);
  traincmd->add_option("--data", train_data, "dataset manifest (or its directory)")->required();
  traincmd->add_option("--seed", train_seed, "training seed (shorthand for train.seed)");
  traincmd->add_option("--train-split", train_split, "split used for optimization");
  traincmd->add_option("--val-split", val_split, "split used for validation/early stopping");
  traincmd->add_option("--checkpoint-every", ckpt_every, "epochs between last.ckpt writes");
  traincmd->add_flag("--resume", train_resume, "continue from <out>/last.ckpt");

  // eval
  CommonOpts eval_c;
  std::string eval_ckpt, eval_data, eval_split = "test";
  double eval_threshold = 0.5;
  bool eval_per_slice = false;
  int eval_batch = 4;
  CLI::App* evalcmd = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  add_common(evalcmd, eval_c);
  evalcmd->add_option("--checkpoint", eval_ckpt, "checkpoint archive")->required();
  evalcmd->add_option("--data", eval_data, "dataset manifest (or its directory)")->required();
  evalcmd->add_option("--split", eval_split, "split to score");
  evalcmd->add_option("--threshold", eval_threshold, "foreground probability threshold");
  evalcmd->add_flag("--per-slice", eval_per_slice, "score per slice instead of per volume");
  evalcmd->add_option("--batch", eval_batch, "inference batch size");

  // predict
  CommonOpts pred_c;
  std::string pred_ckpt, pred_input;
  double pred_threshold = 0.5;
  CLI::App* predcmd = app.add_subcommand("predict", "segment a volume or image");
  add_common(predcmd, pred_c);
  predcmd->add_option("--checkpoint", pred_ckpt, "checkpoint archive")->required();
  predcmd->add_option("--input", pred_input, "input .nii/.nii.gz volume or .pgm image")
      ->required();
  predcmd->add_option("--threshold", pred_threshold, "foreground probability threshold");

  // viz
  CommonOpts viz_c;
  std::string viz_ckpt, viz_input;
  int viz_slice = 0;
  double viz_threshold = 0.5;
  CLI::App* vizcmd = app.add_subcommand("viz", "heatmaps, overlays and a refinement panel");
  add_common(vizcmd, viz_c);
  vizcmd->add_option("--checkpoint", viz_ckpt, "checkpoint archive")->required();
  vizcmd->add_option("--input", viz_input, "input .pgm image or .nii volume")->required();
  vizcmd->add_option("--slice", viz_slice, "slice index for volume inputs");
  vizcmd->add_option("--threshold", viz_threshold, "overlay threshold");

  // inspect
  CommonOpts insp_c;
  int insp_size = 512;
  CLI::App* inspcmd = app.add_subcommand("inspect", "parameter/MAC table and shape trace");
  add_common(inspcmd, insp_c, false);
  inspcmd->add_option("--out", insp_c.out, "optional directory for the config echo");
  inspcmd->add_option("--size", insp_size, "input size for the MAC count");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_c, synth_n, synth_size, synth_seed, synth_overfit);
    if (prep->parsed()) return cmd_preprocess(prep_c, prep_input, prep_kind, prep_seed, prep_labels);
    if (traincmd->parsed()) {
      if (train_seed != std::numeric_limits<uint64_t>::max())
        train_c.overrides.push_back("train.seed=" + std::to_string(train_seed));
      return cmd_train(train_c, train_data, train_resume, train_split, val_split, ckpt_every);
    }
    if (evalcmd->parsed())
      return cmd_eval(eval_c, eval_ckpt, eval_data, eval_split, eval_threshold, eval_per_slice,
                      eval_batch);
    if (predcmd->parsed()) return cmd_predict(pred_c, pred_ckpt, pred_input, pred_threshold);
    if (vizcmd->parsed()) return cmd_viz(viz_c, viz_ckpt, viz_input, viz_slice, viz_threshold);
    if (inspcmd->parsed()) return cmd_inspect(insp_c, insp_size);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
