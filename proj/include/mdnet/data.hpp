#pragma once

#include <filesystem>
#include <set>

#include "mdnet/config.hpp"
#include "mdnet/image_io.hpp"
#include "mdnet/nifti.hpp"
#include "mdnet/ops.hpp"
#include "mdnet/train.hpp"

namespace mdnet {

namespace fs = std::filesystem;

// ---------- volumes ----------

struct Volume {
  std::string id;
  int64_t d = 0, h = 0, w = 0;       // slices, rows, cols
  std::vector<real> voxels;          // Hounsfield units, z-major
  std::vector<int32_t> labels;       // congruent grid
  std::array<real, 3> spacing{1, 1, 1};  // (z,y,x) mm

  void validate() const {
    if (int64_t(voxels.size()) != d * h * w || int64_t(labels.size()) != d * h * w)
      shape_fail("Volume", "voxel/label grids do not match dims");
    for (real s : spacing)
      if (!(s > 0.0)) throw ConfigError("Volume: spacing must be positive");
  }
};

inline Volume load_volume(const std::string& image_path, const std::string& label_path,
                          const std::string& id = "") {
  NiftiVolume img = read_nifti(image_path);
  NiftiVolume lab = read_nifti(label_path);
  if (img.nz != lab.nz || img.ny != lab.ny || img.nx != lab.nx)
    shape_fail("load_volume", "image grid " + std::to_string(img.nx) + "x" +
                                  std::to_string(img.ny) + "x" + std::to_string(img.nz) +
                                  " does not match label grid " + std::to_string(lab.nx) + "x" +
                                  std::to_string(lab.ny) + "x" + std::to_string(lab.nz) + " (" +
                                  image_path + " / " + label_path + ")");
  Volume v;
  v.id = id.empty() ? fs::path(image_path).filename().string() : id;
  v.d = img.nz;
  v.h = img.ny;
  v.w = img.nx;
  v.spacing = img.spacing;
  v.voxels = std::move(img.data);
  v.labels.resize(lab.data.size());
  for (size_t i = 0; i < lab.data.size(); ++i) v.labels[i] = int32_t(std::lround(lab.data[i]));
  v.validate();
  return v;
}

// Union of the mapped label ids. Nonzero ids outside the mapping are treated
// as background and reported through `unknown_ids` when provided.
inline std::vector<uint8_t> merge_labels(const std::vector<int32_t>& labels,
                                         const std::set<int>& mapping,
                                         std::set<int>* unknown_ids = nullptr) {
  std::vector<uint8_t> mask(labels.size(), 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    const int v = labels[i];
    if (mapping.count(v)) {
      mask[i] = 1;
    } else if (v != 0 && unknown_ids) {
      unknown_ids->insert(v);
    }
  }
  return mask;
}

// ---------- preprocessing ----------

struct SampleMeta {
  std::string volume_id;
  int slice_index = 0;
  std::array<real, 3> spacing{1, 1, 1};
};

struct Sample {
  Tensor image;  // [3,S,S] in [0,1]
  Tensor mask;   // [1,S,S] binary
  SampleMeta meta;
};

namespace data_detail {

inline std::vector<uint8_t> nearest_resize(const uint8_t* src, int64_t h, int64_t w, int64_t s) {
  std::vector<uint8_t> out(size_t(s * s));
  for (int64_t y = 0; y < s; ++y) {
    int64_t sy = int64_t(std::floor((real(y) + 0.5) * real(h) / real(s)));
    sy = std::clamp<int64_t>(sy, 0, h - 1);
    for (int64_t x = 0; x < s; ++x) {
      int64_t sx = int64_t(std::floor((real(x) + 0.5) * real(w) / real(s)));
      sx = std::clamp<int64_t>(sx, 0, w - 1);
      out[size_t(y * s + x)] = src[sy * w + sx];
    }
  }
  return out;
}

}  // namespace data_detail

// Axial slices: HU window clip, min-max normalize against the window bounds,
// bilinear resize to out_size, grayscale replicated to three channels; label
// masks are merged then nearest-resized.
inline std::vector<Sample> slice_and_preprocess(const Volume& vol, const PreprocessConfig& cfg,
                                                const std::set<int>& fg_labels,
                                                std::set<int>* unknown_ids = nullptr) {
  cfg.validate();
  vol.validate();
  const int64_t S = cfg.out_size;
  const real lo = cfg.window_lo, hi = cfg.window_hi;
  std::vector<uint8_t> fg = merge_labels(vol.labels, fg_labels, unknown_ids);

  std::vector<Sample> samples;
  NoGrad ng;
  for (int64_t z = 0; z < vol.d; ++z) {
    Tensor plane(Shape{1, 1, vol.h, vol.w});
    const real* src = vol.voxels.data() + z * vol.h * vol.w;
    real* dst = plane.data();
    for (int64_t i = 0; i < vol.h * vol.w; ++i)
      dst[i] = (std::clamp(src[i], lo, hi) - lo) / (hi - lo);
    Tensor resized = ops::bilinear_resize(plane, S, S);

    std::vector<uint8_t> msk =
        data_detail::nearest_resize(fg.data() + z * vol.h * vol.w, vol.h, vol.w, S);

    Sample s;
    s.image = Tensor(Shape{3, S, S});
    for (int c = 0; c < 3; ++c)
      std::copy(resized.vec().begin(), resized.vec().end(),
                s.image.vec().begin() + c * S * S);
    s.mask = Tensor(Shape{1, S, S});
    int64_t fg_count = 0;
    for (int64_t i = 0; i < S * S; ++i) {
      s.mask[i] = msk[size_t(i)] ? 1.0 : 0.0;
      fg_count += msk[size_t(i)];
    }
    if (cfg.foreground_only && fg_count == 0) continue;
    s.meta = {vol.id, int(z), vol.spacing};
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------- splits ----------

enum class DatasetKind { LiTS, Spleen, Generic };

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "lits") return DatasetKind::LiTS;
  if (s == "msd_spleen" || s == "spleen") return DatasetKind::Spleen;
  if (s == "generic" || s == "synthetic") return DatasetKind::Generic;
  throw ConfigError("unknown dataset kind '" + s + "' (expected lits, msd_spleen or generic)");
}

struct SplitResult {
  std::vector<std::string> train, val, test;
};

// LiTS: seeded shuffle into 91/20/20. Spleen: order-preserving first 5 test,
// next 5 val, remainder train. Generic: seeded shuffle by ratios.
inline SplitResult split_dataset(std::vector<std::string> ids, DatasetKind kind, uint64_t seed,
                                 std::array<real, 3> ratios = {0.70, 0.15, 0.15}) {
  {
    std::set<std::string> uniq(ids.begin(), ids.end());
    if (uniq.size() != ids.size()) throw ConfigError("split_dataset: duplicate volume ids");
  }
  SplitResult r;
  switch (kind) {
    case DatasetKind::LiTS: {
      if (ids.size() != 131)
        throw ConfigError("LiTS split expects exactly 131 volumes, got " +
                          std::to_string(ids.size()));
      std::mt19937_64 rng(seed);
      std::shuffle(ids.begin(), ids.end(), rng);
      r.train.assign(ids.begin(), ids.begin() + 91);
      r.val.assign(ids.begin() + 91, ids.begin() + 111);
      r.test.assign(ids.begin() + 111, ids.end());
      break;
    }
    case DatasetKind::Spleen: {
      if (ids.size() < 11)
        throw ConfigError("spleen split needs at least 11 volumes, got " +
                          std::to_string(ids.size()));
      r.test.assign(ids.begin(), ids.begin() + 5);
      r.val.assign(ids.begin() + 5, ids.begin() + 10);
      r.train.assign(ids.begin() + 10, ids.end());
      break;
    }
    case DatasetKind::Generic: {
      if (ids.size() < 3)
        throw ConfigError("generic split needs at least 3 volumes, got " +
                          std::to_string(ids.size()));
      std::mt19937_64 rng(seed);
      std::shuffle(ids.begin(), ids.end(), rng);
      const int64_t n = int64_t(ids.size());
      int64_t n_test = std::max<int64_t>(1, int64_t(real(n) * ratios[2]));
      int64_t n_val = std::max<int64_t>(1, int64_t(real(n) * ratios[1]));
      if (n_test + n_val >= n)
        throw ConfigError("generic split ratios leave no training volumes");
      r.test.assign(ids.begin(), ids.begin() + n_test);
      r.val.assign(ids.begin() + n_test, ids.begin() + n_test + n_val);
      r.train.assign(ids.begin() + n_test + n_val, ids.end());
      break;
    }
  }
  return r;
}

// ---------- synthetic data ----------

// Lobed soft-edged blobs over a textured background with exact masks; mask
// fraction is kept within [0.02, 0.5] by construction (geometry bounds plus
// a resample guard).
inline std::vector<Sample> synth_generate(uint64_t seed, int n, int size) {
  if (n < 1) throw ConfigError("synth_generate: n must be >= 1");
  if (size < 32 || size % 32 != 0)
    throw ConfigError("synth_generate: size must be a positive multiple of 32");
  std::vector<Sample> out;
  const real S = real(size);
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(train_detail::mix(seed, 0x5EED0000ULL + uint64_t(i)));
    std::uniform_real_distribution<real> u01(0.0, 1.0);
    Sample s;
    s.image = Tensor(Shape{3, size, size});
    s.mask = Tensor(Shape{1, size, size});
    for (int attempt = 0; attempt < 64; ++attempt) {
      const real cx = (0.38 + 0.24 * u01(rng)) * S;
      const real cy = (0.38 + 0.24 * u01(rng)) * S;
      const real r0 = (0.12 + 0.14 * u01(rng)) * S;
      const int lobes = 2 + int(u01(rng) * 4.0);
      const real amp = 0.30 * u01(rng);
      const real phase = 2.0 * M_PI * u01(rng);
      const real contrast = 0.25 + 0.20 * u01(rng);
      const real fx = 1.0 + 2.0 * u01(rng), fy = 1.0 + 2.0 * u01(rng);
      const real px = 2.0 * M_PI * u01(rng), py = 2.0 * M_PI * u01(rng);
      const real edge = 1.5;

      std::mt19937_64 noise_rng(train_detail::mix(seed, 0xB6600000ULL + uint64_t(i)));
      std::uniform_real_distribution<real> un(-0.02, 0.02);

      int64_t fg_count = 0;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const real dx = real(x) + 0.5 - cx;
          const real dy = real(y) + 0.5 - cy;
          const real rho = std::sqrt(dx * dx + dy * dy);
          const real theta = std::atan2(dy, dx);
          const real rb = r0 * (1.0 + amp * std::cos(real(lobes) * theta + phase));
          const bool inside = rho <= rb;
          fg_count += inside;
          s.mask[y * size + x] = inside ? 1.0 : 0.0;

          real bg = 0.30 + 0.10 * std::sin(2.0 * M_PI * fx * real(x) / S + px) *
                               std::sin(2.0 * M_PI * fy * real(y) / S + py) +
                    0.08 * (real(x) + real(y)) / (2.0 * S) + un(noise_rng);
          const real soft = 1.0 / (1.0 + std::exp(-(rb - rho) / edge));
          s.image[y * size + x] = std::clamp(bg + contrast * soft, 0.0, 1.0);
        }
      const real frac = real(fg_count) / (S * S);
      if (frac >= 0.02 && frac <= 0.5) break;
    }
    for (int c = 1; c < 3; ++c)
      std::copy(s.image.vec().begin(), s.image.vec().begin() + size * size,
                s.image.vec().begin() + c * size * size);
    s.meta = {"synth-" + std::to_string(i), 0, {1.0, 1.0, 1.0}};
    out.push_back(std::move(s));
  }
  return out;
}

// ---------- cache layout & manifest ----------

struct SliceEntry {
  int index = 0;
  std::string image_rel, mask_rel;
  int64_t fg_pixels = 0;
};

struct VolumeEntry {
  std::string id;
  std::string split;  // train | val | test
  std::array<real, 3> spacing{1, 1, 1};
  std::vector<SliceEntry> slices;
};

struct DataManifest {
  int format_version = 1;
  std::string dataset_kind = "generic";
  real window_lo = -200.0, window_hi = 250.0;
  int out_size = 512;
  bool foreground_only = false;
  std::vector<VolumeEntry> volumes;

  json to_json() const {
    json jv = json::array();
    for (const VolumeEntry& v : volumes) {
      json js = json::array();
      for (const SliceEntry& s : v.slices)
        js.push_back(json{{"index", s.index},
                          {"image", s.image_rel},
                          {"mask", s.mask_rel},
                          {"fg_pixels", s.fg_pixels}});
      jv.push_back(json{{"id", v.id}, {"split", v.split}, {"spacing", v.spacing},
                        {"slices", js}});
    }
    return json{{"format_version", format_version}, {"dataset_kind", dataset_kind},
                {"window", json{{"lo", window_lo}, {"hi", window_hi}}},
                {"out_size", out_size},       {"foreground_only", foreground_only},
                {"volumes", jv}};
  }

  static DataManifest from_json(const json& j) {
    DataManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1)
      throw IoError("unsupported manifest format_version " + std::to_string(m.format_version));
    m.dataset_kind = j.at("dataset_kind").get<std::string>();
    m.window_lo = j.at("window").at("lo").get<real>();
    m.window_hi = j.at("window").at("hi").get<real>();
    m.out_size = j.at("out_size").get<int>();
    m.foreground_only = j.at("foreground_only").get<bool>();
    for (const json& jv : j.at("volumes")) {
      VolumeEntry v;
      v.id = jv.at("id").get<std::string>();
      v.split = jv.at("split").get<std::string>();
      v.spacing = jv.at("spacing").get<std::array<real, 3>>();
      for (const json& js : jv.at("slices"))
        v.slices.push_back(SliceEntry{js.at("index").get<int>(),
                                      js.at("image").get<std::string>(),
                                      js.at("mask").get<std::string>(),
                                      js.at("fg_pixels").get<int64_t>()});
      m.volumes.push_back(std::move(v));
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest: " + path);
    os << to_json().dump(2) << "\n";
  }

  static DataManifest load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read manifest: " + path);
    json j;
    try {
      is >> j;
    } catch (const std::exception& e) {
      throw IoError("malformed manifest " + path + ": " + e.what());
    }
    return from_json(j);
  }

  const VolumeEntry* find(const std::string& id) const {
    for (const VolumeEntry& v : volumes)
      if (v.id == id) return &v;
    return nullptr;
  }
};

// Writes one volume's slices as 16-bit grayscale + 8-bit mask PGMs and
// returns the filled entry.
inline VolumeEntry write_volume_cache(const std::string& base_dir, const std::string& id,
                                      const std::string& split,
                                      const std::vector<Sample>& samples) {
  VolumeEntry entry;
  entry.id = id;
  entry.split = split;
  if (!samples.empty()) entry.spacing = samples.front().meta.spacing;
  const fs::path vdir = fs::path(base_dir) / "volumes" / id;
  fs::create_directories(vdir);
  char name[32];
  for (const Sample& s : samples) {
    const int64_t S = s.image.dim(1);
    GrayImage img;
    img.h = S;
    img.w = S;
    img.maxval = 65535;
    img.px.resize(size_t(S * S));
    for (int64_t i = 0; i < S * S; ++i)
      img.px[size_t(i)] = uint16_t(std::lround(std::clamp(s.image[i], 0.0, 1.0) * 65535.0));
    GrayImage msk;
    msk.h = S;
    msk.w = S;
    msk.maxval = 255;
    msk.px.resize(size_t(S * S));
    int64_t fg = 0;
    for (int64_t i = 0; i < S * S; ++i) {
      msk.px[size_t(i)] = s.mask[i] != 0.0 ? 255 : 0;
      fg += s.mask[i] != 0.0;
    }
    std::snprintf(name, sizeof(name), "img_%04d.pgm", s.meta.slice_index);
    const std::string img_rel = "volumes/" + id + "/" + name;
    write_pgm((fs::path(base_dir) / img_rel).string(), img);
    std::snprintf(name, sizeof(name), "msk_%04d.pgm", s.meta.slice_index);
    const std::string msk_rel = "volumes/" + id + "/" + name;
    write_pgm((fs::path(base_dir) / msk_rel).string(), msk);
    entry.slices.push_back(SliceEntry{s.meta.slice_index, img_rel, msk_rel, fg});
  }
  return entry;
}

inline Sample load_cached_sample(const std::string& base_dir, const VolumeEntry& vol,
                                 const SliceEntry& slice) {
  GrayImage img = read_pgm((fs::path(base_dir) / slice.image_rel).string());
  GrayImage msk = read_pgm((fs::path(base_dir) / slice.mask_rel).string());
  if (img.h != msk.h || img.w != msk.w)
    shape_fail("load_cached_sample", "image/mask size mismatch for " + slice.image_rel);
  Sample s;
  const int64_t S = img.h;
  s.image = Tensor(Shape{3, S, S});
  const real inv = 1.0 / real(img.maxval);
  for (int64_t i = 0; i < S * S; ++i) s.image[i] = real(img.px[size_t(i)]) * inv;
  for (int c = 1; c < 3; ++c)
    std::copy(s.image.vec().begin(), s.image.vec().begin() + S * S,
              s.image.vec().begin() + c * S * S);
  s.mask = Tensor(Shape{1, S, S});
  for (int64_t i = 0; i < S * S; ++i) s.mask[i] = msk.px[size_t(i)] > 0 ? 1.0 : 0.0;
  s.meta = {vol.id, slice.index, vol.spacing};
  return s;
}

// All samples of a split, ordered by (volume appearance, slice index).
inline std::vector<Sample> load_split(const std::string& base_dir, const DataManifest& m,
                                      const std::string& split) {
  std::vector<Sample> out;
  for (const VolumeEntry& v : m.volumes) {
    if (v.split != split) continue;
    for (const SliceEntry& s : v.slices) out.push_back(load_cached_sample(base_dir, v, s));
  }
  return out;
}

inline TrainSet to_train_set(const std::vector<Sample>& samples) {
  TrainSet set;
  set.reserve(samples.size());
  for (const Sample& s : samples) set.push_back(TrainPair{s.image, s.mask});
  return set;
}

}  // namespace mdnet
