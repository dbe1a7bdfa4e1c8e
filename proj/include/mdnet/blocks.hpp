#pragma once

#include "mdnet/backend.hpp"

namespace mdnet {

// Feature map with its spatial downscale factor relative to the network input.
template <class T>
struct FMap {
  T data;
  int stride = 1;
};

using FeatureMap = FMap<Tensor>;

inline void validate_feature_map(const FeatureMap& f, const std::string& where = "FeatureMap") {
  const Tensor& t = f.data;
  if (t.ndim() != 4 || t.dim(1) < 1 || t.dim(2) < 1 || t.dim(3) < 1)
    shape_fail(where, "expected [N,C,H,W] with positive dims, got " + shape_str(t.shape()));
  static const int valid_strides[] = {1, 2, 4, 8, 16, 32};
  bool ok = false;
  for (int s : valid_strides) ok |= (f.stride == s);
  if (!ok) shape_fail(where, "stride " + std::to_string(f.stride) + " not a power of two <= 32");
  if (!all_finite(t.vec())) shape_fail(where, "non-finite entries");
}

inline void validate_mask_logits(const Tensor& t, const std::string& where = "MaskLogits") {
  if (t.ndim() != 4 || t.dim(1) != 1)
    throw ConfigError(where + ": expected exactly one channel, got " + shape_str(t.shape()));
  if (!all_finite(t.vec())) shape_fail(where, "non-finite entries");
}

namespace blocks {

// 3x3 (or kxk) convolution + batch norm + ReLU; padding keeps spatial dims.
template <class B>
typename B::T conv_bn_relu(const typename B::Ctx& c, const typename B::T& x, int out_c, int k,
                           int dil) {
  if (k % 2 == 0)
    throw ConfigError(c.path + ": conv_bn_relu kernel must be odd, got " + std::to_string(k));
  const int pad = dil * (k - 1) / 2;
  auto y = B::conv2d(c.sub("conv"), x, out_c, k, 1, pad, dil);
  y = B::batchnorm(c.sub("bn"), y);
  return B::relu(c, y);
}

// `series_len` stacked Conv-BN-ReLU layers, first one changing the width.
template <class B>
typename B::T conv_series(const typename B::Ctx& c, typename B::T x, int out_c, int len) {
  for (int i = 0; i < len; ++i)
    x = conv_bn_relu<B>(c.sub("s" + std::to_string(i)), x, out_c, 3, 1);
  return x;
}

// Channel attention (shared bottleneck MLP over avg/max pooled descriptors)
// followed by spatial attention (7x7 conv over channel mean/max planes).
template <class B>
typename B::T cbam(const typename B::Ctx& c, const typename B::T& x, int reduction) {
  const int C = int(x.dim(1));
  const int Cr = std::max(1, C / reduction);
  auto mlp = [&](const typename B::T& v) {
    auto h = B::linear(c.sub("fc1"), v, Cr, Init::HeNormal);
    h = B::relu(c, h);
    return B::linear(c.sub("fc2"), h, C, Init::HeNormal);
  };
  auto gate = B::sigmoid(c, B::add(c, mlp(B::global_avgpool(c, x)), mlp(B::global_maxpool(c, x))));
  auto y = B::scale_channels(c, x, gate);
  auto planes = B::channel_mean_max(c, y);
  auto sgate = B::sigmoid(c, B::conv2d(c.sub("spatial"), planes, 1, 7, 1, 3, 1));
  return B::mul_mask(c, y, sgate);
}

// Four parallel 3x3 branches at dilation {1,3,6,9}, concatenated, fused by a
// 1x1 convolution, refined by CBAM.
template <class B>
typename B::T dc_block(const typename B::Ctx& c, const typename B::T& x, int out_c,
                       int cbam_reduction) {
  static const int rates[4] = {1, 3, 6, 9};
  std::vector<typename B::T> branches;
  branches.reserve(4);
  for (int i = 0; i < 4; ++i)
    branches.push_back(
        conv_bn_relu<B>(c.sub("d" + std::to_string(rates[i])), x, out_c, 3, rates[i]));
  auto cat = B::concat(c, branches);
  auto fused = B::conv2d(c.sub("fuse"), cat, out_c, 1, 1, 0, 1);
  return cbam<B>(c.sub("cbam"), fused, cbam_reduction);
}

// Foreground/background spatial gating from a previous decoder's mask:
//   out = ReLU(C3(cat(C3(x*Mf)+Mf, C3(x*Mb)+Ma)) + C3(x))
// where Ma is Mf (the printed form) or Mb, selected by `bg_add`.
// The mask arrives as logits at any resolution; it is resized bilinearly and
// squashed here. The convolutions are plain (no BN), matching the closed form.
template <class B>
typename B::T mask_attention(const typename B::Ctx& c, const typename B::T& x,
                             const typename B::T& mask_logits, const std::string& bg_add) {
  if (mask_logits.dim(1) != 1)
    throw ConfigError(c.path + ": mask must have exactly one channel, got " +
                      shape_str(mask_logits.shape()));
  const int C = int(x.dim(1));
  auto ml = B::bilinear(c, mask_logits, x.dim(2), x.dim(3));
  auto mf = B::sigmoid(c, ml);
  auto mb = B::affine(c, mf, -1.0, 1.0);
  auto fg = B::add_mask(c, B::conv2d(c.sub("fg"), B::mul_mask(c, x, mf), C, 3, 1, 1, 1), mf);
  const auto& bga = (bg_add == "bg") ? mb : mf;
  auto bg = B::add_mask(c, B::conv2d(c.sub("bg"), B::mul_mask(c, x, mb), C, 3, 1, 1, 1), bga);
  auto fused = B::conv2d(c.sub("fuse"), B::concat(c, {fg, bg}), C, 3, 1, 1, 1);
  auto res = B::conv2d(c.sub("res"), x, C, 3, 1, 1, 1);
  return B::relu(c, B::add(c, fused, res));
}

// Two Conv-BN stages with a shortcut (1x1 projection when widths differ).
template <class B>
typename B::T residual_block(const typename B::Ctx& c, const typename B::T& x, int out_c) {
  auto y = conv_bn_relu<B>(c.sub("cbr1"), x, out_c, 3, 1);
  y = B::conv2d(c.sub("conv2"), y, out_c, 3, 1, 1, 1);
  y = B::batchnorm(c.sub("bn2"), y);
  auto shortcut = (x.dim(1) == out_c) ? x : B::conv2d(c.sub("proj"), x, out_c, 1, 1, 0, 1);
  return B::relu(c, B::add(c, y, shortcut));
}

// 2x2 transpose convolution (doubles H and W), concat with the skip, then two
// residual blocks at the skip's scale.
template <class B>
FMap<typename B::T> decoder_block(const typename B::Ctx& c, const FMap<typename B::T>& x,
                                  const FMap<typename B::T>& skip, int out_c) {
  if (skip.stride * 2 != x.stride)
    throw ShapeError(c.path + ": skip stride " + std::to_string(skip.stride) +
                     " is not half of input stride " + std::to_string(x.stride));
  auto up = B::conv_transpose2x2(c.sub("up"), x.data, out_c);
  if (up.dim(2) != skip.data.dim(2) || up.dim(3) != skip.data.dim(3))
    throw ShapeError(c.path + ": upsampled input " + shape_str(up.shape()) +
                     " does not align with skip " + shape_str(skip.data.shape()));
  auto y = B::concat(c, {up, skip.data});
  y = residual_block<B>(c.sub("res1"), y, out_c);
  y = residual_block<B>(c.sub("res2"), y, out_c);
  return {y, skip.stride};
}

}  // namespace blocks
}  // namespace mdnet
