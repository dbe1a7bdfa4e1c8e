#pragma once

#include "mdnet/encoder.hpp"
#include "mdnet/msfed.hpp"

namespace mdnet {

// Pre-sigmoid logit maps of the three decoder heads, each at input resolution.
struct SegOutputs {
  Tensor m1, m2, m3;
  Tensor& head(int i) { return i == 0 ? m1 : (i == 1 ? m2 : m3); }
  const Tensor& head(int i) const { return i == 0 ? m1 : (i == 1 ? m2 : m3); }
};

struct Prediction {
  Tensor mask;                   // [N,1,H,W], values in {0,1}, from head 3
  std::array<Tensor, 3> probs;   // per-head sigmoid probability maps
};

namespace net {

template <class B>
struct Heads {
  typename B::T m1, m2, m3;
};

// Decoder stack on processed features. Decoder 1 is one decoder block deep,
// decoder 2 two, decoder 3 three; each later decoder consumes the previous
// decoder's same-scale features in its skips and the previous decoder's mask
// through mask-attention gating.
template <class B>
Heads<B> decode(const typename B::Ctx& c, const std::array<FMap<typename B::T>, 4>& F,
                int64_t in_h, int64_t in_w, const ModelConfig& cfg) {
  auto cas = msfed::run<B>(c.sub("msfed"), F, cfg);
  auto& P = cas.P;
  const int C1 = cfg.width(1), C2 = cfg.width(2), C3 = cfg.width(3);

  auto head = [&](const typename B::Ctx& hc, const FMap<typename B::T>& d) {
    auto u = B::bilinear(hc, d.data, in_h, in_w);  // x4 from stride 4
    return B::conv2d(hc.sub("conv"), u, 1, 1, 1, 0, 1);
  };

  // decoder 1
  auto d1 = blocks::decoder_block<B>(c.sub("dec1.block1"), P[1], P[0], C1);
  auto m1 = head(c.sub("head1"), d1);
  B::log_shape(c, "M1", m1);

  // decoder 2
  auto t = blocks::decoder_block<B>(c.sub("dec2.block1"), P[2], P[1], C2);
  t.data = blocks::mask_attention<B>(c.sub("dec2.ma1"), t.data, m1, cfg.ma_bg_add);
  auto d2_s8 = t;
  FMap<typename B::T> skip22{B::concat(c.sub("dec2.block2"), {P[0].data, d1.data}), d1.stride};
  t = blocks::decoder_block<B>(c.sub("dec2.block2"), t, skip22, C1);
  t.data = blocks::mask_attention<B>(c.sub("dec2.ma2"), t.data, m1, cfg.ma_bg_add);
  auto d2 = t;
  auto m2 = head(c.sub("head2"), d2);
  B::log_shape(c, "M2", m2);

  // decoder 3
  t = blocks::decoder_block<B>(c.sub("dec3.block1"), P[3], P[2], C3);
  t.data = blocks::mask_attention<B>(c.sub("dec3.ma1"), t.data, m2, cfg.ma_bg_add);
  FMap<typename B::T> skip32{B::concat(c.sub("dec3.block2"), {P[1].data, d2_s8.data}),
                             d2_s8.stride};
  t = blocks::decoder_block<B>(c.sub("dec3.block2"), t, skip32, C2);
  t.data = blocks::mask_attention<B>(c.sub("dec3.ma2"), t.data, m2, cfg.ma_bg_add);
  FMap<typename B::T> skip33{
      B::concat(c.sub("dec3.block3"), {P[0].data, d1.data, d2.data}), d1.stride};
  t = blocks::decoder_block<B>(c.sub("dec3.block3"), t, skip33, C1);
  t.data = blocks::mask_attention<B>(c.sub("dec3.ma3"), t.data, m2, cfg.ma_bg_add);
  auto m3 = head(c.sub("head3"), t);
  B::log_shape(c, "M3", m3);
  return {m1, m2, m3};
}

template <class B>
Heads<B> forward(const typename B::Ctx& c, const typename B::T& image, const ModelConfig& cfg) {
  auto F = enc::encode<B>(c.sub("encoder"), image, cfg.encoder);
  return decode<B>(c, F, image.dim(2), image.dim(3), cfg);
}

}  // namespace net

// ---------- public model facade ----------

class MDNet {
 public:
  explicit MDNet(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }

  // Architecture walk with shapes only; declares every parameter and sums
  // analytic per-layer MACs for the given input size.
  static TraceState trace(const ModelConfig& cfg, int64_t h, int64_t w, int64_t n = 1) {
    TraceState ts;
    TraceCtx tc{&ts, ""};
    net::forward<TraceBackend>(tc, ShapeT{{n, 3, h, w}}, cfg);
    return ts;
  }

  ParamStore init(uint64_t seed) const {
    TraceState ts = trace(cfg_, 64, 64);  // parameter shapes do not depend on input size
    return init_params(ts.specs, seed);
  }

  SegOutputs forward(ParamStore& store, const Tensor& image, bool training = false,
                     bool update_bn = false) const {
    EvalState es{&store, training, update_bn};
    RealCtx rc{&es, ""};
    Tensor img = image.ndim() == 3 ? unsqueeze_batch(image) : image;
    auto h = net::forward<RealBackend>(rc, img, cfg_);
    return {h.m1, h.m2, h.m3};
  }

  std::array<FeatureMap, 4> encode(ParamStore& store, const Tensor& image,
                                   bool training = false, bool update_bn = false) const {
    EvalState es{&store, training, update_bn};
    RealCtx rc{&es, ""};
    Tensor img = image.ndim() == 3 ? unsqueeze_batch(image) : image;
    return enc::encode<RealBackend>(rc.sub("encoder"), img, cfg_.encoder);
  }

  SegOutputs forward_from_features(ParamStore& store, const std::array<FeatureMap, 4>& F,
                                   int64_t in_h, int64_t in_w, bool training = false,
                                   bool update_bn = false) const {
    EvalState es{&store, training, update_bn};
    RealCtx rc{&es, ""};
    auto h = net::decode<RealBackend>(rc, F, in_h, in_w, cfg_);
    return {h.m1, h.m2, h.m3};
  }

  // Inference. Mask is the thresholded head-3 probability (strictly greater
  // than `threshold`); all three probability maps are returned.
  Prediction predict(ParamStore& store, const Tensor& image, real threshold = 0.5) const {
    if (threshold <= 0.0 || threshold >= 1.0)
      throw ConfigError("predict: threshold must lie in (0,1)");
    NoGrad ng;
    SegOutputs out = forward(store, image, false, false);
    Prediction p;
    for (int i = 0; i < 3; ++i) p.probs[size_t(i)] = ops::sigmoid(out.head(i));
    p.mask = Tensor(p.probs[2].shape());
    const real* pv = p.probs[2].data();
    real* mv = p.mask.data();
    for (int64_t i = 0; i < p.mask.numel(); ++i) mv[i] = pv[i] > threshold ? 1.0 : 0.0;
    return p;
  }

  // (learnable parameter count, multiply-accumulates) for one forward pass.
  static std::pair<int64_t, double> count_params_and_macs(const ModelConfig& cfg, int64_t h,
                                                          int64_t w) {
    TraceState ts = trace(cfg, h, w);
    int64_t params = 0;
    for (const ParamSpec& s : ts.specs)
      if (!s.buffer) params += numel(s.shape);
    return {params, ts.macs};
  }

 private:
  static Tensor unsqueeze_batch(const Tensor& t) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    Tensor r(s);
    std::copy(t.vec().begin(), t.vec().end(), r.vec().begin());
    return r;
  }

  ModelConfig cfg_;
};

}  // namespace mdnet
