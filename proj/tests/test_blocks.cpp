#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mdnet/blocks.hpp"
#include "oracle_utils.hpp"

using namespace mdnet;
using oracle::gradcheck_all_params;
using oracle::gradcheck_param;
using oracle::random_tensor;
using oracle::sample_indices;

namespace {

template <class F>
std::pair<ParamStore, TraceState> build_store(F&& trace_fn, uint64_t seed) {
  TraceState ts;
  TraceCtx tc{&ts, ""};
  trace_fn(tc);
  return {init_params(ts.specs, seed), ts};
}

std::vector<Tensor*> all_params(ParamStore& s) {
  std::vector<Tensor*> v;
  for (auto& [k, t] : s.params) v.push_back(&t);
  return v;
}

// identity 3x3 kernel for a C->C conv (center tap 1 on the matching channel)
void set_identity3x3(Tensor& w) {
  std::fill(w.vec().begin(), w.vec().end(), 0.0);
  const int64_t Co = w.dim(0), Ci = w.dim(1);
  for (int64_t c = 0; c < std::min(Co, Ci); ++c) w[((c * Ci + c) * 3 + 1) * 3 + 1] = 1.0;
}

}  // namespace

TEST_CASE("conv_bn_relu: shape-preserving padding and nonnegative output") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::conv_bn_relu<TraceBackend>(tc.sub("cbr"), ShapeT{{1, 4, 16, 16}}, 8, 3, 1);
      },
      1);
  EvalState es{&store};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 4, 16, 16}, 2);
  Tensor y = blocks::conv_bn_relu<RealBackend>(rc.sub("cbr"), x, 8, 3, 1);
  CHECK(y.shape() == Shape{1, 8, 16, 16});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] >= 0.0);

  // dilation 9 keeps dims as well
  auto [store9, ts9] = build_store(
      [](TraceCtx& tc) {
        blocks::conv_bn_relu<TraceBackend>(tc.sub("cbr"), ShapeT{{1, 4, 16, 16}}, 8, 3, 9);
      },
      3);
  EvalState es9{&store9};
  RealCtx rc9{&es9, ""};
  Tensor y9 = blocks::conv_bn_relu<RealBackend>(rc9.sub("cbr"), x, 8, 3, 9);
  CHECK(y9.shape() == Shape{1, 8, 16, 16});

  CHECK_THROWS_AS(blocks::conv_bn_relu<RealBackend>(rc.sub("cbr"), x, 8, 4, 1), ConfigError);
}

TEST_CASE("effective receptive field of a dilated tap measured by impulse probe") {
  // single k=3 d=9 convolution: impulse response must span k_eff = 19 pixels
  Tensor x = Tensor::zeros({1, 1, 41, 41});
  x.at4(0, 0, 20, 20) = 1.0;
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = ops::conv2d(x, w, Tensor(), 1, 9, 9);
  int64_t lo = 41, hi = -1;
  for (int64_t r = 0; r < 41; ++r)
    for (int64_t c = 0; c < 41; ++c)
      if (y.at4(0, 0, r, c) != 0.0) {
        lo = std::min(lo, r);
        hi = std::max(hi, r);
      }
  CHECK(hi - lo + 1 == 19);  // k + (k-1)(d-1)
}

TEST_CASE("dc_block: contract shapes and concat width") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::dc_block<TraceBackend>(tc.sub("dc"), ShapeT{{1, 8, 32, 32}}, 8, 4);
      },
      5);
  EvalState es{&store};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 8, 32, 32}, 6);
  Tensor y = blocks::dc_block<RealBackend>(rc.sub("dc"), x, 8, 4);
  CHECK(y.shape() == Shape{1, 8, 32, 32});

  // four parallel branches -> the 1x1 fusion sees 4x the width
  const Tensor& fuse_w = store.param("dc.fuse.weight");
  CHECK(fuse_w.dim(1) == 32);

  // full-preset width: fusion input is 256 for out=64
  TraceState ts64;
  TraceCtx tc64{&ts64, ""};
  blocks::dc_block<TraceBackend>(tc64.sub("dc"), ShapeT{{1, 64, 8, 8}}, 64, 16);
  for (const ParamSpec& p : ts64.specs)
    if (p.name == "dc.fuse.weight") CHECK(p.shape == Shape{64, 256, 1, 1});
}

TEST_CASE("zero input with zero-initialized convolutions stays zero through Conv-BN-ReLU") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::conv_bn_relu<TraceBackend>(tc.sub("cbr"), ShapeT{{1, 3, 8, 8}}, 4, 3, 1);
      },
      7);
  store.param("cbr.conv.weight").vec().assign(size_t(4 * 3 * 9), 0.0);
  store.param("cbr.conv.bias").vec().assign(4, 0.0);
  EvalState es{&store, true};
  RealCtx rc{&es, ""};
  Tensor y = blocks::conv_bn_relu<RealBackend>(rc.sub("cbr"), Tensor::zeros({1, 3, 8, 8}), 4, 3, 1);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("cbam: shape, gate bound, constant-input symmetry") {
  auto build = [](TraceCtx& tc) {
    blocks::cbam<TraceBackend>(tc.sub("cbam"), ShapeT{{1, 8, 16, 16}}, 4);
  };
  auto [store, ts] = build_store(build, 9);
  EvalState es{&store};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 8, 16, 16}, 10, -2.0, 2.0);
  Tensor y = blocks::cbam<RealBackend>(rc.sub("cbam"), x, 4);
  CHECK(y.shape() == x.shape());
  // both gates lie in (0,1), so magnitudes can only shrink
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i]) <= std::abs(x[i]));

  // channel-uniform constant input: avg- and max-pooled descriptors coincide,
  // so the channel gate equals sigmoid(2 * MLP(c * ones)) evaluated directly.
  // 0.5 sums exactly in binary, keeping the pooled comparison bitwise.
  Tensor cst = Tensor::full({1, 8, 16, 16}, 0.5);
  Tensor yc = blocks::cbam<RealBackend>(rc.sub("cbam"), cst, 4);
  Tensor pooled = Tensor::full({1, 8}, 0.5);
  Tensor h = ops::relu(
      ops::linear(pooled, store.param("cbam.fc1.weight"), store.param("cbam.fc1.bias")));
  Tensor mlp_out = ops::linear(h, store.param("cbam.fc2.weight"), store.param("cbam.fc2.bias"));
  Tensor gate = ops::sigmoid(ops::affine(mlp_out, 2.0, 0.0));
  // spatial stage on a channel-scaled constant map
  Tensor scaled = ops::scale_channels(cst, gate);
  Tensor planes = ops::channel_mean_max(scaled);
  Tensor sg = ops::sigmoid(ops::conv2d(planes, store.param("cbam.spatial.weight"),
                                       store.param("cbam.spatial.bias"), 1, 3, 1));
  Tensor expect = ops::mul_mask(scaled, sg);
  for (int64_t i = 0; i < yc.numel(); ++i) CHECK(yc[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  // with symmetric MLP weights every channel receives the same gate
  store.param("cbam.fc1.weight").vec().assign(size_t(8 * 2), 0.1);
  store.param("cbam.fc1.bias").vec().assign(2, 0.0);
  store.param("cbam.fc2.weight").vec().assign(size_t(2 * 8), 0.2);
  store.param("cbam.fc2.bias").vec().assign(8, 0.0);
  Tensor ap = ops::global_avgpool(cst);
  Tensor mp = ops::global_maxpool(cst);
  for (int64_t c = 0; c < 8; ++c) CHECK(ap[c] == mp[c]);
  Tensor h2 = ops::relu(
      ops::linear(ap, store.param("cbam.fc1.weight"), store.param("cbam.fc1.bias")));
  Tensor g2 = ops::linear(h2, store.param("cbam.fc2.weight"), store.param("cbam.fc2.bias"));
  for (int64_t c = 1; c < 8; ++c) CHECK(g2[c] == doctest::Approx(g2[0]).epsilon(1e-14));
}

TEST_CASE("mask_attention: shape contract with cross-resolution mask") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::mask_attention<TraceBackend>(tc.sub("ma"), ShapeT{{1, 8, 16, 16}},
                                             ShapeT{{1, 1, 64, 64}}, "fg");
      },
      11);
  EvalState es{&store};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 8, 16, 16}, 12);
  Tensor mask = random_tensor({1, 1, 64, 64}, 13, -3.0, 3.0);
  Tensor y = blocks::mask_attention<RealBackend>(rc.sub("ma"), x, mask, "fg");
  CHECK(y.shape() == x.shape());
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] >= 0.0);  // final ReLU

  // deterministic: identical inputs give bitwise-identical outputs
  Tensor y2 = blocks::mask_attention<RealBackend>(rc.sub("ma"), x, mask, "fg");
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == y2[i]);

  // non-single-channel mask rejected
  CHECK_THROWS_AS(blocks::mask_attention<RealBackend>(rc.sub("ma"), x,
                                                      random_tensor({1, 2, 16, 16}, 14), "fg"),
                  ConfigError);
}

TEST_CASE("mask_attention: saturated mask zeroes the background branch") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::mask_attention<TraceBackend>(tc.sub("ma"), ShapeT{{1, 4, 8, 8}},
                                             ShapeT{{1, 1, 8, 8}}, "fg");
      },
      15);
  EvalState es{&store};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 4, 8, 8}, 16);
  Tensor mask = Tensor::full({1, 1, 8, 8}, 1e6);
  Tensor y = blocks::mask_attention<RealBackend>(rc.sub("ma"), x, mask, "fg");

  // hand-composed oracle with the same weights: Mf == 1, Mb == 0 exactly
  Tensor mf = Tensor::full({1, 1, 8, 8}, 1.0);
  Tensor fg = ops::add_mask(ops::conv2d(ops::mul_mask(x, mf), store.param("ma.fg.weight"),
                                        store.param("ma.fg.bias"), 1, 1, 1),
                            mf);
  Tensor bg = ops::add_mask(ops::conv2d(Tensor::zeros({1, 4, 8, 8}), store.param("ma.bg.weight"),
                                        store.param("ma.bg.bias"), 1, 1, 1),
                            mf);
  Tensor fused = ops::conv2d(ops::concat_channels({fg, bg}), store.param("ma.fuse.weight"),
                             store.param("ma.fuse.bias"), 1, 1, 1);
  Tensor res = ops::conv2d(x, store.param("ma.res.weight"), store.param("ma.res.bias"), 1, 1, 1);
  Tensor expect = ops::relu(ops::add(fused, res));
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("mask_attention: hand-derived identity-convolution arithmetic") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::mask_attention<TraceBackend>(tc.sub("ma"), ShapeT{{1, 1, 1, 1}},
                                             ShapeT{{1, 1, 1, 1}}, "fg");
      },
      17);
  set_identity3x3(store.param("ma.fg.weight"));
  set_identity3x3(store.param("ma.bg.weight"));
  set_identity3x3(store.param("ma.res.weight"));
  store.param("ma.fg.bias").vec().assign(1, 0.0);
  store.param("ma.bg.bias").vec().assign(1, 0.0);
  store.param("ma.res.bias").vec().assign(1, 0.0);
  // fusion = average of the two branch channels
  Tensor& fw = store.param("ma.fuse.weight");  // [1,2,3,3]
  std::fill(fw.vec().begin(), fw.vec().end(), 0.0);
  fw[(0 * 3 + 1) * 3 + 1] = 0.5;
  fw[(1 * 3 + 1) * 3 + 1] = 0.5;
  store.param("ma.fuse.bias").vec().assign(1, 0.0);

  EvalState es{&store};
  RealCtx rc{&es, ""};
  Tensor x = Tensor::from({1, 1, 1, 1}, {2.0});
  Tensor mask = Tensor::zeros({1, 1, 1, 1});

  // Mf = 0.5: fg = 2*0.5 + 0.5 = 1.5; bg = 2*0.5 + 0.5 = 1.5; fused = 1.5;
  // + residual 2.0 -> 3.5, exact at double precision
  Tensor y = blocks::mask_attention<RealBackend>(rc.sub("ma"), x, mask, "fg");
  CHECK(y[0] == 3.5);

  // distinguish the two background-add variants with an asymmetric mask:
  // sigmoid(ln 3) = 3/4
  Tensor mask3 = Tensor::full({1, 1, 1, 1}, std::log(3.0));
  Tensor yfg = blocks::mask_attention<RealBackend>(rc.sub("ma"), x, mask3, "fg");
  Tensor ybg = blocks::mask_attention<RealBackend>(rc.sub("ma"), x, mask3, "bg");
  CHECK(yfg[0] == doctest::Approx(3.75).epsilon(1e-12));   // ((2.25 + 1.25)/2) + 2
  CHECK(ybg[0] == doctest::Approx(3.5).epsilon(1e-12));    // ((2.25 + 0.75)/2) + 2
}

TEST_CASE("residual_block: shortcut selection and zero-weight oracle") {
  // same width: identity shortcut, no projection parameter declared
  TraceState ts_same;
  TraceCtx tc_same{&ts_same, ""};
  blocks::residual_block<TraceBackend>(tc_same.sub("rb"), ShapeT{{1, 16, 8, 8}}, 16);
  for (const ParamSpec& p : ts_same.specs) CHECK(p.name.find("proj") == std::string::npos);

  // widened: projection present
  TraceState ts_wide;
  TraceCtx tc_wide{&ts_wide, ""};
  blocks::residual_block<TraceBackend>(tc_wide.sub("rb"), ShapeT{{1, 16, 8, 8}}, 32);
  bool has_proj = false;
  for (const ParamSpec& p : ts_wide.specs) has_proj |= p.name == "rb.proj.weight";
  CHECK(has_proj);

  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::residual_block<TraceBackend>(tc.sub("rb"), ShapeT{{1, 16, 8, 8}}, 16);
      },
      19);
  EvalState es{&store};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 16, 8, 8}, 20);
  Tensor y = blocks::residual_block<RealBackend>(rc.sub("rb"), x, 16);
  CHECK(y.shape() == x.shape());

  auto [store32, ts32] = build_store(
      [](TraceCtx& tc) {
        blocks::residual_block<TraceBackend>(tc.sub("rb"), ShapeT{{1, 16, 8, 8}}, 32);
      },
      21);
  EvalState es32{&store32};
  RealCtx rc32{&es32, ""};
  Tensor y32 = blocks::residual_block<RealBackend>(rc32.sub("rb"), x, 32);
  CHECK(y32.shape() == Shape{1, 32, 8, 8});

  // zero conv weights + identity shortcut -> exactly ReLU(x)
  store.param("rb.cbr1.conv.weight").vec().assign(size_t(16 * 16 * 9), 0.0);
  store.param("rb.cbr1.conv.bias").vec().assign(16, 0.0);
  store.param("rb.conv2.weight").vec().assign(size_t(16 * 16 * 9), 0.0);
  store.param("rb.conv2.bias").vec().assign(16, 0.0);
  Tensor yz = blocks::residual_block<RealBackend>(rc.sub("rb"), x, 16);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(yz[i] == std::max(x[i], 0.0));
}

TEST_CASE("decoder_block: doubling contract and mismatch errors") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::decoder_block<TraceBackend>(tc.sub("db"), {ShapeT{{1, 16, 8, 8}}, 16},
                                            {ShapeT{{1, 8, 16, 16}}, 8}, 8);
      },
      23);
  EvalState es{&store};
  RealCtx rc{&es, ""};
  FeatureMap x{random_tensor({1, 16, 8, 8}, 24), 16};
  FeatureMap skip{random_tensor({1, 8, 16, 16}, 25), 8};
  FeatureMap y = blocks::decoder_block<RealBackend>(rc.sub("db"), x, skip, 8);
  CHECK(y.data.shape() == Shape{1, 8, 16, 16});
  CHECK(y.stride == 8);

  // wrong stride ratio
  FeatureMap bad_stride{skip.data, 4};
  CHECK_THROWS_AS(blocks::decoder_block<RealBackend>(rc.sub("db"), x, bad_stride, 8), ShapeError);

  // mismatched spatial dims: error mentions both shapes
  FeatureMap bad_dims{random_tensor({1, 8, 15, 16}, 26), 8};
  try {
    blocks::decoder_block<RealBackend>(rc.sub("db"), x, bad_dims, 8);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1,8,16,16]") != std::string::npos);  // upsampled input
    CHECK(msg.find("[1,8,15,16]") != std::string::npos);   // skip
  }
}

TEST_CASE("gradcheck: dc_block") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::dc_block<TraceBackend>(tc.sub("dc"), ShapeT{{1, 3, 8, 8}}, 4, 4);
      },
      27);
  EvalState es{&store, true};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 3, 8, 8}, 28);
  x.set_needs_grad(true);
  auto f = [&]() {
    return ops::sum_all(blocks::dc_block<RealBackend>(rc.sub("dc"), x, 4, 4));
  };
  CHECK(gradcheck_all_params(f, all_params(store), 6, 29) < 1e-3);
  CHECK(gradcheck_param(f, x, sample_indices(x.numel(), 12, 30)) < 1e-3);
}

TEST_CASE("gradcheck: cbam") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::cbam<TraceBackend>(tc.sub("cb"), ShapeT{{2, 4, 8, 8}}, 4);
      },
      31);
  EvalState es{&store, true};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({2, 4, 8, 8}, 32);
  x.set_needs_grad(true);
  auto f = [&]() { return ops::sum_all(blocks::cbam<RealBackend>(rc.sub("cb"), x, 4)); };
  CHECK(gradcheck_all_params(f, all_params(store), 8, 33) < 1e-3);
  CHECK(gradcheck_param(f, x, sample_indices(x.numel(), 12, 34)) < 1e-3);
}

TEST_CASE("gradcheck: mask_attention") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::mask_attention<TraceBackend>(tc.sub("ma"), ShapeT{{1, 4, 8, 8}},
                                             ShapeT{{1, 1, 16, 16}}, "fg");
      },
      35);
  EvalState es{&store, true};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 4, 8, 8}, 36);
  Tensor mask = random_tensor({1, 1, 16, 16}, 37, -2.0, 2.0);
  x.set_needs_grad(true);
  mask.set_needs_grad(true);
  auto f = [&]() {
    return ops::sum_all(blocks::mask_attention<RealBackend>(rc.sub("ma"), x, mask, "fg"));
  };
  CHECK(gradcheck_all_params(f, all_params(store), 8, 38) < 1e-3);
  CHECK(gradcheck_param(f, x, sample_indices(x.numel(), 12, 39)) < 1e-3);
  CHECK(gradcheck_param(f, mask, sample_indices(mask.numel(), 12, 40)) < 1e-3);
}

TEST_CASE("gradcheck: residual_block and decoder_block") {
  auto [store, ts] = build_store(
      [](TraceCtx& tc) {
        blocks::residual_block<TraceBackend>(tc.sub("rb"), ShapeT{{1, 3, 8, 8}}, 5);
      },
      41);
  EvalState es{&store, true};
  RealCtx rc{&es, ""};
  Tensor x = random_tensor({1, 3, 8, 8}, 42);
  x.set_needs_grad(true);
  auto f = [&]() {
    return ops::sum_all(blocks::residual_block<RealBackend>(rc.sub("rb"), x, 5));
  };
  CHECK(gradcheck_all_params(f, all_params(store), 6, 43) < 1e-3);
  CHECK(gradcheck_param(f, x, sample_indices(x.numel(), 10, 44)) < 1e-3);

  auto [store2, ts2] = build_store(
      [](TraceCtx& tc) {
        blocks::decoder_block<TraceBackend>(tc.sub("db"), {ShapeT{{1, 6, 4, 4}}, 8},
                                            {ShapeT{{1, 3, 8, 8}}, 4}, 3);
      },
      45);
  EvalState es2{&store2, true};
  RealCtx rc2{&es2, ""};
  FeatureMap fx{random_tensor({1, 6, 4, 4}, 46), 8};
  FeatureMap fskip{random_tensor({1, 3, 8, 8}, 47), 4};
  fx.data.set_needs_grad(true);
  auto f2 = [&]() {
    return ops::sum_all(blocks::decoder_block<RealBackend>(rc2.sub("db"), fx, fskip, 3).data);
  };
  CHECK(gradcheck_all_params(f2, all_params(store2), 6, 48) < 1e-3);
  CHECK(gradcheck_param(f2, fx.data, sample_indices(fx.data.numel(), 10, 49)) < 1e-3);
}

TEST_CASE("feature map validation") {
  FeatureMap good{Tensor::full({1, 2, 4, 4}, 0.5), 8};
  validate_feature_map(good);
  FeatureMap bad_stride{good.data, 3};
  CHECK_THROWS_AS(validate_feature_map(bad_stride), ShapeError);
  FeatureMap nan_map{Tensor::full({1, 1, 2, 2}, std::nan("")), 4};
  CHECK_THROWS_AS(validate_feature_map(nan_map), ShapeError);
  CHECK_THROWS_AS(validate_mask_logits(Tensor::zeros({1, 2, 4, 4})), ConfigError);
}
