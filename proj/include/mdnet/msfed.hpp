#pragma once

#include "mdnet/blocks.hpp"

namespace mdnet {
namespace msfed {

// Multi-scale feature fusion cascade: F1..F4 -> P1..P4.
//
// Scale 1 goes straight through a dilated-convolution block. Scale 2 fuses a
// conv-series + pooled branch of F1 with F2. Scales 3 and 4 repeat the
// pattern with one branch per finer scale, pooling each branch 2x per stride
// gap. `msfed_reuse` selects what the finer-scale branches consume: the
// fused representation taken just before each preceding dilated block
// (pre_dc, scale 1 contributes P1) or the finished outputs P_i (post_dc).
template <class B>
struct Cascade {
  std::array<FMap<typename B::T>, 4> P;
  // fused[k] = representation immediately before the dilated block of scale
  // k+1 (fused[0] is unused: scale 1 has no fusion stage).
  std::array<FMap<typename B::T>, 4> fused;
};

template <class B>
FMap<typename B::T> process_scale_1(const typename B::Ctx& c, const FMap<typename B::T>& f1,
                                    const ModelConfig& cfg) {
  return {blocks::dc_block<B>(c, f1.data, int(f1.data.dim(1)), cfg.cbam_reduction), f1.stride};
}

// Pools a branch down by repeated 2x2 max-pooling until it reaches `target`
// times the input stride.
template <class B>
typename B::T pool_to(const typename B::Ctx& c, typename B::T x, int from_stride,
                      int to_stride) {
  if (to_stride < from_stride || to_stride % from_stride != 0)
    throw ShapeError(c.path + ": stride " + std::to_string(to_stride) +
                     " not reachable from " + std::to_string(from_stride) + " by 2x2 pooling");
  for (int s = from_stride; s < to_stride; s *= 2) x = B::maxpool2x2(c, x);
  return x;
}

template <class B>
Cascade<B> run(const typename B::Ctx& c, const std::array<FMap<typename B::T>, 4>& F,
               const ModelConfig& cfg) {
  Cascade<B> out;
  const int L = cfg.series_len;

  out.P[0] = process_scale_1<B>(c.sub("dc1"), F[0], cfg);

  for (int k = 2; k <= 4; ++k) {
    const auto ck = c.sub("m" + std::to_string(k));
    const int Ck = cfg.width(k);
    const auto& fk = F[size_t(k - 1)];
    std::vector<typename B::T> members;
    for (int s = 1; s < k; ++s) {
      // branch input from finer scale s
      FMap<typename B::T> src;
      if (k == 2) {
        src = F[0];  // the first cascade consumes the raw encoder feature
      } else if (cfg.msfed_reuse == "post_dc") {
        src = out.P[size_t(s - 1)];
      } else {  // pre_dc
        src = (s == 1) ? out.P[0] : out.fused[size_t(s - 1)];
      }
      auto b = blocks::conv_series<B>(ck.sub("branch" + std::to_string(s)), src.data, Ck, L);
      members.push_back(pool_to<B>(ck, b, src.stride, fk.stride));
    }
    members.push_back(fk.data);
    auto fusedk = blocks::conv_series<B>(ck.sub("fuse"), B::concat(ck, members), Ck, L);
    out.fused[size_t(k - 1)] = {fusedk, fk.stride};
    out.P[size_t(k - 1)] = {blocks::dc_block<B>(ck.sub("dc"), fusedk, Ck, cfg.cbam_reduction),
                            fk.stride};
    B::log_shape(c, "P" + std::to_string(k), out.P[size_t(k - 1)].data);
  }
  return out;
}

}  // namespace msfed
}  // namespace mdnet
