#pragma once

#include <set>

#include "mdnet/config.hpp"
#include "mdnet/ops.hpp"
#include "mdnet/params.hpp"

// The architecture is written once as templates over a backend:
//   RealBackend  - runs tensors through the autodiff ops
//   TraceBackend - runs shapes only, declaring parameter specs and summing
//                  multiply-accumulate counts per layer
// Both see identical call sequences, so the parameter registry, the analytic
// parameter/MAC report and the executed network cannot drift apart.

namespace mdnet {

// ---------- real evaluation ----------

struct EvalState {
  ParamStore* store = nullptr;
  bool training = false;
  bool update_bn = false;
  real bn_momentum = 0.1;
  real bn_eps = 1e-5;
};

struct RealCtx {
  EvalState* st = nullptr;
  std::string path;
  RealCtx sub(const std::string& seg) const {
    return {st, path.empty() ? seg : path + "." + seg};
  }
};

// ---------- shape trace ----------

struct ShapeT {
  Shape s;
  int ndim() const { return int(s.size()); }
  int64_t dim(int i) const { return s[size_t(i)]; }
  const Shape& shape() const { return s; }
};

struct TraceState {
  std::vector<ParamSpec> specs;
  std::set<std::string> declared;
  std::map<std::string, double> macs_by_module;  // keyed by first path segment
  std::vector<std::pair<std::string, Shape>> shape_log;
  double macs = 0.0;

  void declare(const std::string& name, Shape shape, Init init, bool buffer = false) {
    if (declared.count(name)) return;  // shared weights are declared once
    declared.insert(name);
    specs.push_back(ParamSpec{name, std::move(shape), init, buffer});
  }
  void add_macs(const std::string& path, double m) {
    macs += m;
    auto dot = path.find('.');
    macs_by_module[path.substr(0, dot)] += m;
  }
};

struct TraceCtx {
  TraceState* st = nullptr;
  std::string path;
  TraceCtx sub(const std::string& seg) const {
    return {st, path.empty() ? seg : path + "." + seg};
  }
};

// ---------- real backend ----------

struct RealBackend {
  using T = Tensor;
  using Ctx = RealCtx;
  static constexpr bool is_trace = false;

  template <class F>
  static auto guard(const Ctx& c, F&& f) -> decltype(f()) {
    try {
      return f();
    } catch (ShapeError& e) {
      throw ShapeError(c.path + ": " + e.what());
    } catch (ConfigError& e) {
      throw ConfigError(c.path + ": " + e.what());
    }
  }

  static T conv2d(const Ctx& c, const T& x, int out_c, int k, int stride, int pad, int dil,
                  Init winit = Init::HeNormal, bool bias = true) {
    (void)winit;
    return guard(c, [&] {
      const Tensor& w = c.st->store->param(c.path + ".weight");
      Tensor b = bias ? c.st->store->param(c.path + ".bias") : Tensor();
      if (w.dim(0) != out_c || w.dim(2) != k)
        throw ConfigError("stored kernel " + shape_str(w.shape()) + " does not match conv spec");
      return ops::conv2d(x, w, b, stride, pad, dil);
    });
  }

  static T conv_transpose2x2(const Ctx& c, const T& x, int out_c) {
    return guard(c, [&] {
      const Tensor& w = c.st->store->param(c.path + ".weight");
      const Tensor& b = c.st->store->param(c.path + ".bias");
      if (w.dim(1) != out_c)
        throw ConfigError("stored kernel " + shape_str(w.shape()) + " does not match deconv spec");
      return ops::conv_transpose2x2(x, w, b);
    });
  }

  static T dwconv3x3(const Ctx& c, const T& x) {
    return guard(c, [&] {
      return ops::dwconv3x3(x, c.st->store->param(c.path + ".weight"),
                            c.st->store->param(c.path + ".bias"));
    });
  }

  static T linear(const Ctx& c, const T& x, int out_f, Init winit = Init::TruncNormal02) {
    (void)winit;
    (void)out_f;
    return guard(c, [&] {
      return ops::linear(x, c.st->store->param(c.path + ".weight"),
                         c.st->store->param(c.path + ".bias"));
    });
  }

  static T batchnorm(const Ctx& c, const T& x) {
    return guard(c, [&] {
      return ops::batchnorm2d(x, c.st->store->param(c.path + ".gamma"),
                              c.st->store->param(c.path + ".beta"),
                              c.st->store->buffer(c.path + ".running_mean"),
                              c.st->store->buffer(c.path + ".running_var"), c.st->training,
                              c.st->update_bn, c.st->bn_momentum, c.st->bn_eps);
    });
  }

  static T layernorm(const Ctx& c, const T& x) {
    return guard(c, [&] {
      return ops::layernorm(x, c.st->store->param(c.path + ".gamma"),
                            c.st->store->param(c.path + ".beta"));
    });
  }

  static T relu(const Ctx&, const T& x) { return ops::relu(x); }
  static T gelu(const Ctx&, const T& x) { return ops::gelu(x); }
  static T sigmoid(const Ctx&, const T& x) { return ops::sigmoid(x); }
  static T add(const Ctx& c, const T& a, const T& b) {
    return guard(c, [&] { return ops::add(a, b); });
  }
  static T affine(const Ctx&, const T& x, real k, real c0) { return ops::affine(x, k, c0); }
  static T mul_mask(const Ctx& c, const T& x, const T& m) {
    return guard(c, [&] { return ops::mul_mask(x, m); });
  }
  static T add_mask(const Ctx& c, const T& x, const T& m) {
    return guard(c, [&] { return ops::add_mask(x, m); });
  }
  static T concat(const Ctx& c, const std::vector<T>& xs) {
    return guard(c, [&] { return ops::concat_channels(xs); });
  }
  static T maxpool2x2(const Ctx& c, const T& x) {
    return guard(c, [&] { return ops::maxpool2x2(x); });
  }
  static T global_avgpool(const Ctx&, const T& x) { return ops::global_avgpool(x); }
  static T global_maxpool(const Ctx&, const T& x) { return ops::global_maxpool(x); }
  static T channel_mean_max(const Ctx&, const T& x) { return ops::channel_mean_max(x); }
  static T scale_channels(const Ctx& c, const T& x, const T& g) {
    return guard(c, [&] { return ops::scale_channels(x, g); });
  }
  static T bilinear(const Ctx&, const T& x, int64_t oh, int64_t ow) {
    return ops::bilinear_resize(x, oh, ow);
  }
  static T to_tokens(const Ctx&, const T& x) { return ops::nchw_to_tokens(x); }
  static T from_tokens(const Ctx& c, const T& x, int64_t h, int64_t w) {
    return guard(c, [&] { return ops::tokens_to_nchw(x, h, w); });
  }
  static T split_heads(const Ctx&, const T& x, int h) {
    const int64_t N = x.dim(0), Tn = x.dim(1), C = x.dim(2);
    Tensor r = ops::reshape(x, {N, Tn, h, C / h});
    r = ops::permute_0213(r);  // [N,h,T,dh]
    return ops::reshape(r, {N * h, Tn, C / h});
  }
  static T merge_heads(const Ctx&, const T& x, int h) {
    const int64_t Nh = x.dim(0), Tn = x.dim(1), dh = x.dim(2);
    Tensor r = ops::reshape(x, {Nh / h, h, Tn, dh});
    r = ops::permute_0213(r);  // [N,T,h,dh]
    return ops::reshape(r, {Nh / h, Tn, h * dh});
  }
  static T matmul_nn(const Ctx& c, const T& a, const T& b) {
    return guard(c, [&] { return ops::matmul_nn(a, b); });
  }
  static T matmul_nt(const Ctx& c, const T& a, const T& b) {
    return guard(c, [&] { return ops::matmul_nt(a, b); });
  }
  static T softmax(const Ctx&, const T& x) { return ops::softmax_lastdim(x); }
  static void log_shape(const Ctx&, const std::string&, const T&) {}
};

// ---------- trace backend ----------

struct TraceBackend {
  using T = ShapeT;
  using Ctx = TraceCtx;
  static constexpr bool is_trace = true;

  static T conv2d(const Ctx& c, const T& x, int out_c, int k, int stride, int pad, int dil,
                  Init winit = Init::HeNormal, bool bias = true) {
    const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t OH = (H + 2 * pad - int64_t(dil) * (k - 1) - 1) / stride + 1;
    const int64_t OW = (W + 2 * pad - int64_t(dil) * (k - 1) - 1) / stride + 1;
    c.st->declare(c.path + ".weight", {out_c, Ci, k, k}, winit);
    if (bias) c.st->declare(c.path + ".bias", {out_c}, Init::Zeros);
    c.st->add_macs(c.path, double(N * out_c * OH * OW) * double(Ci * k * k));
    return T{{N, out_c, OH, OW}};
  }

  static T conv_transpose2x2(const Ctx& c, const T& x, int out_c) {
    const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    c.st->declare(c.path + ".weight", {Ci, out_c, 2, 2}, Init::HeNormal);
    c.st->declare(c.path + ".bias", {out_c}, Init::Zeros);
    c.st->add_macs(c.path, double(N * Ci * out_c) * 4.0 * double(H * W));
    return T{{N, out_c, H * 2, W * 2}};
  }

  static T dwconv3x3(const Ctx& c, const T& x) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    c.st->declare(c.path + ".weight", {C, 3, 3}, Init::TruncNormal02);
    c.st->declare(c.path + ".bias", {C}, Init::Zeros);
    c.st->add_macs(c.path, double(N * C * H * W) * 9.0);
    return x;
  }

  static T linear(const Ctx& c, const T& x, int out_f, Init winit = Init::TruncNormal02) {
    const int64_t Ci = x.dim(x.ndim() - 1);
    const int64_t R = numel(x.s) / Ci;
    c.st->declare(c.path + ".weight", {Ci, out_f}, winit);
    c.st->declare(c.path + ".bias", {out_f}, Init::Zeros);
    c.st->add_macs(c.path, double(R) * double(Ci) * double(out_f));
    Shape os = x.s;
    os.back() = out_f;
    return T{os};
  }

  static T batchnorm(const Ctx& c, const T& x) {
    const int64_t C = x.dim(1);
    c.st->declare(c.path + ".gamma", {C}, Init::Ones);
    c.st->declare(c.path + ".beta", {C}, Init::Zeros);
    c.st->declare(c.path + ".running_mean", {C}, Init::Zeros, true);
    c.st->declare(c.path + ".running_var", {C}, Init::Ones, true);
    return x;
  }

  static T layernorm(const Ctx& c, const T& x) {
    const int64_t C = x.dim(x.ndim() - 1);
    c.st->declare(c.path + ".gamma", {C}, Init::Ones);
    c.st->declare(c.path + ".beta", {C}, Init::Zeros);
    return x;
  }

  static T relu(const Ctx&, const T& x) { return x; }
  static T gelu(const Ctx&, const T& x) { return x; }
  static T sigmoid(const Ctx&, const T& x) { return x; }
  static T add(const Ctx& c, const T& a, const T& b) {
    if (a.s != b.s)
      throw ShapeError(c.path + ": add " + shape_str(a.s) + " vs " + shape_str(b.s));
    return a;
  }
  static T affine(const Ctx&, const T& x, real, real) { return x; }
  static T mul_mask(const Ctx& c, const T& x, const T& m) {
    if (m.dim(1) != 1 || x.dim(2) != m.dim(2) || x.dim(3) != m.dim(3))
      throw ShapeError(c.path + ": mask " + shape_str(m.s) + " vs " + shape_str(x.s));
    return x;
  }
  static T add_mask(const Ctx& c, const T& x, const T& m) { return mul_mask(c, x, m); }
  static T concat(const Ctx& c, const std::vector<T>& xs) {
    int64_t C = 0;
    for (const T& t : xs) {
      if (t.dim(0) != xs[0].dim(0) || t.dim(2) != xs[0].dim(2) || t.dim(3) != xs[0].dim(3))
        throw ShapeError(c.path + ": concat member " + shape_str(t.s) + " vs " +
                         shape_str(xs[0].s));
      C += t.dim(1);
    }
    return T{{xs[0].dim(0), C, xs[0].dim(2), xs[0].dim(3)}};
  }
  static T maxpool2x2(const Ctx& c, const T& x) {
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
      throw ShapeError(c.path + ": odd dims " + shape_str(x.s) + " for 2x2 pooling");
    return T{{x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2}};
  }
  static T global_avgpool(const Ctx&, const T& x) { return T{{x.dim(0), x.dim(1)}}; }
  static T global_maxpool(const Ctx&, const T& x) { return T{{x.dim(0), x.dim(1)}}; }
  static T channel_mean_max(const Ctx&, const T& x) {
    return T{{x.dim(0), 2, x.dim(2), x.dim(3)}};
  }
  static T scale_channels(const Ctx&, const T& x, const T&) { return x; }
  static T bilinear(const Ctx&, const T& x, int64_t oh, int64_t ow) {
    return T{{x.dim(0), x.dim(1), oh, ow}};
  }
  static T to_tokens(const Ctx&, const T& x) {
    return T{{x.dim(0), x.dim(2) * x.dim(3), x.dim(1)}};
  }
  static T from_tokens(const Ctx& c, const T& x, int64_t h, int64_t w) {
    if (x.dim(1) != h * w)
      throw ShapeError(c.path + ": token count " + std::to_string(x.dim(1)) + " != " +
                       std::to_string(h) + "x" + std::to_string(w));
    return T{{x.dim(0), x.dim(2), h, w}};
  }
  static T split_heads(const Ctx&, const T& x, int h) {
    return T{{x.dim(0) * h, x.dim(1), x.dim(2) / h}};
  }
  static T merge_heads(const Ctx&, const T& x, int h) {
    return T{{x.dim(0) / h, x.dim(1), x.dim(2) * h}};
  }
  static T matmul_nn(const Ctx& c, const T& a, const T& b) {
    if (a.dim(2) != b.dim(1))
      throw ShapeError(c.path + ": matmul " + shape_str(a.s) + " vs " + shape_str(b.s));
    c.st->add_macs(c.path, double(a.dim(0)) * double(a.dim(1)) * double(a.dim(2)) *
                               double(b.dim(2)));
    return T{{a.dim(0), a.dim(1), b.dim(2)}};
  }
  static T matmul_nt(const Ctx& c, const T& a, const T& b) {
    if (a.dim(2) != b.dim(2))
      throw ShapeError(c.path + ": matmul_nt " + shape_str(a.s) + " vs " + shape_str(b.s));
    c.st->add_macs(c.path, double(a.dim(0)) * double(a.dim(1)) * double(a.dim(2)) *
                               double(b.dim(1)));
    return T{{a.dim(0), a.dim(1), b.dim(1)}};
  }
  static T softmax(const Ctx&, const T& x) { return x; }
  static void log_shape(const Ctx& c, const std::string& label, const T& x) {
    c.st->shape_log.emplace_back(label, x.s);
  }
};

}  // namespace mdnet
