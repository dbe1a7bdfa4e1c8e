#pragma once

#include <functional>
#include <iomanip>

#include "mdnet/data.hpp"
#include "mdnet/metrics.hpp"
#include "mdnet/model.hpp"

namespace mdnet {

// Head predictor seam: maps an image batch [N,3,S,S] to three per-head
// probability maps [N,1,S,S]. The production adapter wraps the model; tests
// can substitute oracles (e.g. ground-truth echo) to pin the report path.
using HeadPredictor = std::function<std::array<Tensor, 3>(const Tensor&)>;

inline HeadPredictor model_predictor(const MDNet& model, ParamStore& store) {
  return [&model, &store](const Tensor& batch) {
    NoGrad ng;
    SegOutputs out = model.forward(store, batch, false, false);
    return std::array<Tensor, 3>{ops::sigmoid(out.m1), ops::sigmoid(out.m2),
                                 ops::sigmoid(out.m3)};
  };
}

struct EvalOptions {
  std::string split = "test";
  real threshold = 0.5;
  bool per_slice = false;  // per-slice cases instead of per-volume grouping
  int batch_size = 4;
};

// Runs the predictor over every slice of the split and scores each decoder
// head. Per-volume grouping (default): overlap metrics from confusion counts
// summed over the volume's slices; HD95 from boundary distances pooled
// across slices (slices with an empty side contribute nothing; the case is
// undefined when no slice qualifies).
inline MetricsReport evaluate_split(const std::string& base_dir, const DataManifest& manifest,
                                    const HeadPredictor& predict, const EvalOptions& opt) {
  if (opt.threshold <= 0.0 || opt.threshold >= 1.0)
    throw ConfigError("eval: threshold must lie in (0,1)");
  MetricsReport report;
  bool any = false;
  for (const VolumeEntry& vol : manifest.volumes) {
    if (vol.split != opt.split) continue;
    any = true;
    std::array<ConfusionCounts, 3> vol_counts{};
    std::array<std::vector<real>, 3> vol_pg, vol_gp;

    for (size_t b = 0; b < vol.slices.size(); b += size_t(opt.batch_size)) {
      const size_t e = std::min(vol.slices.size(), b + size_t(opt.batch_size));
      std::vector<Sample> samples;
      for (size_t i = b; i < e; ++i)
        samples.push_back(load_cached_sample(base_dir, vol, vol.slices[i]));
      const int64_t S = samples[0].image.dim(1);
      Tensor batch(Shape{int64_t(samples.size()), 3, S, S});
      for (size_t i = 0; i < samples.size(); ++i)
        std::copy(samples[i].image.vec().begin(), samples[i].image.vec().end(),
                  batch.vec().begin() + int64_t(i) * 3 * S * S);
      std::array<Tensor, 3> probs = predict(batch);

      for (int h = 0; h < 3; ++h) {
        if (probs[size_t(h)].shape() != Shape{int64_t(samples.size()), 1, S, S})
          shape_fail("evaluate_split", "predictor returned " +
                                           shape_str(probs[size_t(h)].shape()) + " for head " +
                                           std::to_string(h + 1));
        for (size_t i = 0; i < samples.size(); ++i) {
          Tensor pred(Shape{S, S});
          const real* pv = probs[size_t(h)].data() + int64_t(i) * S * S;
          for (int64_t j = 0; j < S * S; ++j) pred[j] = pv[j] > opt.threshold ? 1.0 : 0.0;
          Tensor gt(Shape{S, S});
          std::copy(samples[i].mask.vec().begin(), samples[i].mask.vec().end(),
                    gt.vec().begin());
          const ConfusionCounts cc = confusion_counts(pred, gt);
          if (opt.per_slice) {
            CaseMetrics cm;
            cm.id = vol.id + "/" + std::to_string(vol.slices[b + i].index);
            cm.overlap = overlap_metrics(cc);
            cm.hd95 = hd95(pred, gt);
            report.cases[size_t(h)].push_back(std::move(cm));
          } else {
            vol_counts[size_t(h)] += cc;
            directed_boundary_distances(pred, gt, std::nullopt, vol_pg[size_t(h)],
                                        vol_gp[size_t(h)]);
          }
        }
      }
    }

    if (!opt.per_slice) {
      for (int h = 0; h < 3; ++h) {
        CaseMetrics cm;
        cm.id = vol.id;
        cm.overlap = overlap_metrics(vol_counts[size_t(h)]);
        if (!vol_pg[size_t(h)].empty() && !vol_gp[size_t(h)].empty())
          cm.hd95 = hd95_from_distances(vol_pg[size_t(h)], vol_gp[size_t(h)]);
        report.cases[size_t(h)].push_back(std::move(cm));
      }
    }
  }
  if (!any) throw ConfigError("eval: split '" + opt.split + "' has no volumes in the manifest");
  for (int h = 0; h < 3; ++h) report.agg[size_t(h)] = aggregate(report.cases[size_t(h)]);
  return report;
}

// ---------- report rendering ----------

namespace eval_detail {

inline std::string fixed(real v, int prec = 4) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace eval_detail

inline std::string format_report(const MetricsReport& r, const std::string& split,
                                 real threshold, bool per_slice) {
  using eval_detail::fixed;
  std::ostringstream os;
  os << "Evaluation report\n";
  os << "split: " << split << "  cases: " << r.agg[0].cases
     << (per_slice ? " (slices)" : " (volumes)") << "  threshold: " << fixed(threshold, 2)
     << "\n";
  os << "hd95 in pixel units; mean over cases with defined boundaries\n\n";

  os << "Per-decoder aggregate\n";
  os << "Method     mDSC     mIoU     Recall   Precision  F2       HD95\n";
  for (int h = 0; h < 3; ++h) {
    const AggregateMetrics& a = r.agg[size_t(h)];
    os << "Decoder " << (h + 1) << "  " << fixed(a.overlap.dsc) << "   " << fixed(a.overlap.miou)
       << "   " << fixed(a.overlap.recall) << "   " << fixed(a.overlap.precision) << "     "
       << fixed(a.overlap.f2) << "   "
       << (a.hd95 ? fixed(*a.hd95, 2) : std::string("undefined")) << " (defined "
       << a.hd95_defined << "/" << a.cases << ")\n";
  }
  os << "Note: desk-scale run on this manifest's data; absolute values are not\n"
        "comparable to full-scale clinical benchmark results.\n\n";

  for (int h = 0; h < 3; ++h) {
    os << "Per-case metrics, decoder " << (h + 1) << "\n";
    os << "case       DSC      mIoU     Recall   Precision  F2       HD95\n";
    for (const CaseMetrics& c : r.cases[size_t(h)]) {
      os << c.id;
      for (size_t pad = c.id.size(); pad < 11; ++pad) os << ' ';
      os << fixed(c.overlap.dsc) << "   " << fixed(c.overlap.miou) << "   "
         << fixed(c.overlap.recall) << "   " << fixed(c.overlap.precision) << "     "
         << fixed(c.overlap.f2) << "   " << (c.hd95 ? fixed(*c.hd95, 2) : std::string("undef"))
         << "\n";
    }
    os << "\n";
  }
  return os.str();
}

inline json report_json(const MetricsReport& r, const std::string& split, real threshold,
                        bool per_slice) {
  json heads = json::array();
  for (int h = 0; h < 3; ++h) {
    const AggregateMetrics& a = r.agg[size_t(h)];
    json cases = json::array();
    for (const CaseMetrics& c : r.cases[size_t(h)]) {
      json jc{{"id", c.id},           {"dsc", c.overlap.dsc},
              {"miou", c.overlap.miou}, {"recall", c.overlap.recall},
              {"precision", c.overlap.precision}, {"f2", c.overlap.f2}};
      if (c.hd95)
        jc["hd95"] = *c.hd95;
      else
        jc["hd95"] = nullptr;
      cases.push_back(std::move(jc));
    }
    json agg{{"dsc", a.overlap.dsc},
             {"miou", a.overlap.miou},
             {"recall", a.overlap.recall},
             {"precision", a.overlap.precision},
             {"f2", a.overlap.f2},
             {"hd95_defined", a.hd95_defined},
             {"cases", a.cases}};
    if (a.hd95)
      agg["hd95"] = *a.hd95;
    else
      agg["hd95"] = nullptr;
    heads.push_back(json{{"head", h + 1}, {"aggregate", agg}, {"cases", cases}});
  }
  return json{{"split", split},
              {"threshold", threshold},
              {"grouping", per_slice ? "slice" : "volume"},
              {"heads", heads}};
}

}  // namespace mdnet
