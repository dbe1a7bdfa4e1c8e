#pragma once

#include "mdnet/blocks.hpp"

namespace mdnet {
namespace enc {

// Spatially-reduced multi-head self-attention over token tensors [N,T,C].
// Keys/values are computed from a strided-conv downsample of the token grid
// when sr > 1.
template <class B>
typename B::T attention(const typename B::Ctx& c, const typename B::T& x, int heads, int sr,
                        int64_t H, int64_t W) {
  const int C = int(x.dim(2));
  const int dh = C / heads;
  auto q = B::linear(c.sub("q"), x, C);
  auto kv_src = x;
  if (sr > 1) {
    auto sp = B::from_tokens(c, x, H, W);
    sp = B::conv2d(c.sub("sr"), sp, C, sr, sr, 0, 1, Init::TruncNormal02);
    kv_src = B::layernorm(c.sub("sr_norm"), B::to_tokens(c, sp));
  }
  auto k = B::linear(c.sub("k"), kv_src, C);
  auto v = B::linear(c.sub("v"), kv_src, C);
  auto qh = B::affine(c, B::split_heads(c, q, heads), 1.0 / std::sqrt(real(dh)), 0.0);
  auto kh = B::split_heads(c, k, heads);
  auto vh = B::split_heads(c, v, heads);
  auto scores = B::matmul_nt(c.sub("qk"), qh, kh);  // [N*h, T, S]
  auto probs = B::softmax(c, scores);
  auto o = B::merge_heads(c, B::matmul_nn(c.sub("av"), probs, vh), heads);
  return B::linear(c.sub("proj"), o, C);
}

// Feed-forward with a depthwise 3x3 between the projections.
template <class B>
typename B::T mixffn(const typename B::Ctx& c, const typename B::T& x, int hidden, int64_t H,
                     int64_t W) {
  const int C = int(x.dim(2));
  auto h = B::linear(c.sub("fc1"), x, hidden);
  auto sp = B::dwconv3x3(c.sub("dw"), B::from_tokens(c, h, H, W));
  h = B::gelu(c, B::to_tokens(c, sp));
  return B::linear(c.sub("fc2"), h, C);
}

template <class B>
typename B::T transformer_layer(const typename B::Ctx& c, typename B::T x, int heads, int sr,
                                int hidden, int64_t H, int64_t W) {
  auto a = attention<B>(c.sub("attn"), B::layernorm(c.sub("norm1"), x), heads, sr, H, W);
  x = B::add(c, x, a);
  auto m = mixffn<B>(c.sub("ffn"), B::layernorm(c.sub("norm2"), x), hidden, H, W);
  return B::add(c, x, m);
}

// One hierarchical stage: overlapped patch embedding (7/4 first stage, 3/2
// after), a stack of transformer layers, a closing layer norm, reshaped back
// to a spatial map.
template <class B>
FMap<typename B::T> encoder_stage(const typename B::Ctx& c, const typename B::T& x, int stage,
                                  const EncoderConfig& ec, int in_stride) {
  const int width = ec.widths[size_t(stage)];
  const int k = stage == 0 ? 7 : 3;
  const int s = stage == 0 ? 4 : 2;
  auto y = B::conv2d(c.sub("embed"), x, width, k, s, k / 2, 1, Init::TruncNormal02);
  const int64_t H = y.dim(2), W = y.dim(3);
  auto t = B::layernorm(c.sub("embed_norm"), B::to_tokens(c, y));
  const int hidden = std::max(1, int(std::lround(real(width) * ec.mlp_ratio)));
  for (int d = 0; d < ec.depths[size_t(stage)]; ++d)
    t = transformer_layer<B>(c.sub("layer" + std::to_string(d)), t, ec.heads[size_t(stage)],
                             ec.sr[size_t(stage)], hidden, H, W);
  t = B::layernorm(c.sub("norm"), t);
  return {B::from_tokens(c, t, H, W), in_stride * s};
}

// image [N,3,H,W] -> four feature maps at strides 4/8/16/32.
template <class B>
std::array<FMap<typename B::T>, 4> encode(const typename B::Ctx& c, const typename B::T& image,
                                          const EncoderConfig& ec) {
  if (image.ndim() != 4 || image.dim(1) != 3)
    shape_fail(c.path, "expected [N,3,H,W] input, got " + shape_str(image.shape()));
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
    shape_fail(c.path, "input " + shape_str(image.shape()) +
                           ": spatial dims must be divisible by 32");
  std::array<FMap<typename B::T>, 4> out;
  auto x = image;
  int stride = 1;
  for (int i = 0; i < 4; ++i) {
    out[size_t(i)] =
        encoder_stage<B>(c.sub("stage" + std::to_string(i + 1)), x, i, ec, stride);
    x = out[size_t(i)].data;
    stride = out[size_t(i)].stride;
    B::log_shape(c, "F" + std::to_string(i + 1), x);
  }
  return out;
}

}  // namespace enc
}  // namespace mdnet
