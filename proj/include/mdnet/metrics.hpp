#pragma once

#include <optional>

#include "mdnet/tensor.hpp"

namespace mdnet {

// ---------- confusion counts & overlap metrics ----------

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

namespace metrics_detail {

inline void check_binary(const Tensor& m, const char* who) {
  for (real v : m.vec())
    if (v != 0.0 && v != 1.0)
      throw ConfigError(std::string(who) + ": mask must be binary, found " + std::to_string(v));
}

}  // namespace metrics_detail

inline ConfusionCounts confusion_counts(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    shape_fail("confusion_counts",
               shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  metrics_detail::check_binary(pred, "confusion_counts(pred)");
  metrics_detail::check_binary(gt, "confusion_counts(gt)");
  ConfusionCounts c;
  const real* p = pred.data();
  const real* g = gt.data();
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool pv = p[i] != 0.0, gv = g[i] != 0.0;
    c.tp += pv && gv;
    c.fp += pv && !gv;
    c.fn += !pv && gv;
    c.tn += !pv && !gv;
  }
  return c;
}

struct OverlapMetrics {
  real dsc = 0, miou = 0, precision = 0, recall = 0, f2 = 0;
};

// Division conventions: all metrics are 1 when both masks are empty and 0
// when exactly one is empty.
inline OverlapMetrics overlap_metrics(const ConfusionCounts& c) {
  OverlapMetrics m;
  const bool pred_empty = c.tp + c.fp == 0;
  const bool gt_empty = c.tp + c.fn == 0;
  if (pred_empty && gt_empty) {
    m.dsc = m.miou = m.precision = m.recall = m.f2 = 1.0;
    return m;
  }
  if (pred_empty || gt_empty) return m;  // zeros
  m.dsc = 2.0 * real(c.tp) / real(2 * c.tp + c.fp + c.fn);
  m.miou = real(c.tp) / real(c.tp + c.fp + c.fn);
  m.precision = real(c.tp) / real(c.tp + c.fp);
  m.recall = real(c.tp) / real(c.tp + c.fn);
  m.f2 = (m.precision + m.recall) == 0.0
             ? 0.0
             : 5.0 * m.precision * m.recall / (4.0 * m.precision + m.recall);
  return m;
}

// ---------- 95th-percentile Hausdorff distance ----------

namespace metrics_detail {

// Boundary pixels: foreground with at least one background 4-neighbor; the
// image border counts as background.
inline std::vector<uint8_t> boundary_of(const real* m, int64_t H, int64_t W) {
  std::vector<uint8_t> b(size_t(H * W), 0);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      if (m[y * W + x] == 0.0) continue;
      const bool edge = y == 0 || y == H - 1 || x == 0 || x == W - 1 ||
                        m[(y - 1) * W + x] == 0.0 || m[(y + 1) * W + x] == 0.0 ||
                        m[y * W + x - 1] == 0.0 || m[y * W + x + 1] == 0.0;
      if (edge) b[size_t(y * W + x)] = 1;
    }
  return b;
}

// 1-D squared-distance lower envelope over samples at positions i*s
// (Felzenszwalb/Huttenlocher, generalized to scaled grids). Unreached cells
// carry a huge-but-finite value so the envelope stays well-defined; such
// parabolas can never win against a true finite one over any realistic grid.
inline void edt_1d(const real* f_in, real* d, int n, real s, std::vector<int>& v,
                   std::vector<real>& z, std::vector<real>& f) {
  constexpr real kBig = 1e30;
  f.assign(size_t(n), 0.0);
  for (int i = 0; i < n; ++i) f[size_t(i)] = std::min(f_in[i], kBig);
  v.assign(size_t(n), 0);
  z.assign(size_t(n) + 1, 0.0);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<real>::infinity();
  z[1] = std::numeric_limits<real>::infinity();
  auto xpos = [s](int i) { return real(i) * s; };
  for (int q = 1; q < n; ++q) {
    real sx;
    for (;;) {
      const int p = v[size_t(k)];
      // intersection of parabolas rooted at p and q
      sx = ((f[size_t(q)] + xpos(q) * xpos(q)) - (f[size_t(p)] + xpos(p) * xpos(p))) /
           (2.0 * xpos(q) - 2.0 * xpos(p));
      if (sx > z[size_t(k)]) break;
      --k;
    }
    ++k;
    v[size_t(k)] = q;
    z[size_t(k)] = sx;
    z[size_t(k) + 1] = std::numeric_limits<real>::infinity();
  }
  int k2 = 0;
  for (int q = 0; q < n; ++q) {
    while (z[size_t(k2) + 1] < xpos(q)) ++k2;
    const real dx = xpos(q) - xpos(v[size_t(k2)]);
    d[q] = dx * dx + f[size_t(v[size_t(k2)])];
  }
}

// Exact squared Euclidean distance to the nearest seed cell, row/column
// separable, with per-axis spacing.
inline std::vector<real> edt_sq(const std::vector<uint8_t>& seeds, int64_t H, int64_t W, real sy,
                                real sx) {
  constexpr real kInf = std::numeric_limits<real>::infinity();
  std::vector<real> d(size_t(H * W));
  for (size_t i = 0; i < d.size(); ++i) d[i] = seeds[i] ? 0.0 : kInf;
  std::vector<real> buf(size_t(std::max(H, W)));
  std::vector<real> out(size_t(std::max(H, W)));
  std::vector<int> v;
  std::vector<real> z, scratch;
  // rows
  for (int64_t y = 0; y < H; ++y) {
    real* row = d.data() + y * W;
    bool any = false;
    for (int64_t x = 0; x < W; ++x) any |= row[x] == 0.0;
    if (!any) continue;  // stays infinite; clamped during the column pass
    edt_1d(row, out.data(), int(W), sx, v, z, scratch);
    std::copy(out.begin(), out.begin() + W, row);
  }
  // columns
  for (int64_t x = 0; x < W; ++x) {
    for (int64_t y = 0; y < H; ++y) buf[size_t(y)] = d[size_t(y * W + x)];
    edt_1d(buf.data(), out.data(), int(H), sy, v, z, scratch);
    for (int64_t y = 0; y < H; ++y) d[size_t(y * W + x)] = out[size_t(y)];
  }
  return d;
}

inline real percentile_sorted(const std::vector<real>& sorted, real q) {
  const size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const real r = q * real(n - 1);
  const size_t lo = size_t(std::floor(r));
  const size_t hi = std::min(lo + 1, n - 1);
  const real frac = r - real(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline const real* mask_plane(const Tensor& m, int64_t& H, int64_t& W, const char* who) {
  if (m.ndim() == 2) {
    H = m.dim(0);
    W = m.dim(1);
  } else if ((m.ndim() == 3 && m.dim(0) == 1) || (m.ndim() == 4 && m.dim(0) == 1 && m.dim(1) == 1)) {
    H = m.dim(m.ndim() - 2);
    W = m.dim(m.ndim() - 1);
  } else {
    shape_fail(who, "expected a single-plane mask, got " + shape_str(m.shape()));
  }
  return m.data();
}

}  // namespace metrics_detail

// Appends directed boundary distances pred->gt and gt->pred for one slice
// pair. Both masks must be nonempty; spacing is (row, col) scale.
inline bool directed_boundary_distances(const Tensor& pred, const Tensor& gt,
                                        std::optional<std::array<real, 2>> spacing,
                                        std::vector<real>& pred_to_gt,
                                        std::vector<real>& gt_to_pred) {
  using namespace metrics_detail;
  int64_t H = 0, W = 0, H2 = 0, W2 = 0;
  const real* pm = mask_plane(pred, H, W, "hd95(pred)");
  const real* gm = mask_plane(gt, H2, W2, "hd95(gt)");
  if (H != H2 || W != W2)
    shape_fail("hd95", shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  check_binary(pred, "hd95(pred)");
  check_binary(gt, "hd95(gt)");
  bool pe = true, ge = true;
  for (int64_t i = 0; i < H * W; ++i) {
    pe &= pm[i] == 0.0;
    ge &= gm[i] == 0.0;
  }
  if (pe || ge) return false;

  const real sy = spacing ? (*spacing)[0] : 1.0;
  const real sx = spacing ? (*spacing)[1] : 1.0;
  auto pb = boundary_of(pm, H, W);
  auto gb = boundary_of(gm, H, W);
  auto dist_to_g = edt_sq(gb, H, W, sy, sx);
  auto dist_to_p = edt_sq(pb, H, W, sy, sx);
  for (int64_t i = 0; i < H * W; ++i) {
    if (pb[size_t(i)]) pred_to_gt.push_back(std::sqrt(dist_to_g[size_t(i)]));
    if (gb[size_t(i)]) gt_to_pred.push_back(std::sqrt(dist_to_p[size_t(i)]));
  }
  return true;
}

// HD95 of two pooled directed-distance sets: the larger of the two 95th
// percentiles (linear interpolation on the sorted values).
inline real hd95_from_distances(std::vector<real> pred_to_gt, std::vector<real> gt_to_pred) {
  std::sort(pred_to_gt.begin(), pred_to_gt.end());
  std::sort(gt_to_pred.begin(), gt_to_pred.end());
  return std::max(metrics_detail::percentile_sorted(pred_to_gt, 0.95),
                  metrics_detail::percentile_sorted(gt_to_pred, 0.95));
}

// Single-slice HD95; empty masks yield the undefined sentinel (nullopt).
inline std::optional<real> hd95(const Tensor& pred, const Tensor& gt,
                                std::optional<std::array<real, 2>> spacing = std::nullopt) {
  std::vector<real> pg, gp;
  if (!directed_boundary_distances(pred, gt, spacing, pg, gp)) return std::nullopt;
  return hd95_from_distances(std::move(pg), std::move(gp));
}

// ---------- per-case metrics & aggregation ----------

struct CaseMetrics {
  std::string id;
  OverlapMetrics overlap;
  std::optional<real> hd95;  // undefined when either mask side was empty
};

struct AggregateMetrics {
  OverlapMetrics overlap;
  std::optional<real> hd95;
  int64_t hd95_defined = 0;
  int64_t cases = 0;
};

// Arithmetic means with compensated summation; hd95 averaged over defined
// cases only, with the defined count recorded.
inline AggregateMetrics aggregate(const std::vector<CaseMetrics>& cases) {
  if (cases.empty()) throw ConfigError("aggregate: empty case list");
  AggregateMetrics a;
  a.cases = int64_t(cases.size());
  KahanSum dsc, miou, prec, rec, f2, hd;
  for (const CaseMetrics& c : cases) {
    dsc.add(c.overlap.dsc);
    miou.add(c.overlap.miou);
    prec.add(c.overlap.precision);
    rec.add(c.overlap.recall);
    f2.add(c.overlap.f2);
    if (c.hd95) {
      hd.add(*c.hd95);
      ++a.hd95_defined;
    }
  }
  const real n = real(cases.size());
  a.overlap.dsc = dsc.value() / n;
  a.overlap.miou = miou.value() / n;
  a.overlap.precision = prec.value() / n;
  a.overlap.recall = rec.value() / n;
  a.overlap.f2 = f2.value() / n;
  if (a.hd95_defined > 0) a.hd95 = hd.value() / real(a.hd95_defined);
  return a;
}

// Per-head evaluation report: one row of cases per decoder head.
struct MetricsReport {
  std::array<std::vector<CaseMetrics>, 3> cases;
  std::array<AggregateMetrics, 3> agg;
};

}  // namespace mdnet
