#pragma once

#include <cmath>
#include <cstring>

#include "mdnet/parallel.hpp"
#include "mdnet/tensor.hpp"

// Differentiable primitives. Conventions used throughout:
//  - dense row-major layout, spatial tensors are [N,C,H,W]
//  - token tensors are [N,T,C]
//  - every backward partitions work so threads write disjoint ranges; results
//    are bitwise reproducible for any thread count.

namespace mdnet::ops {

// ---------- elementwise ----------

inline Tensor relu(const Tensor& x) {
  Tensor out = make_op_result(x.shape(), {x}, [](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const int64_t n = int64_t(self.val.size());
    for (int64_t i = 0; i < n; ++i)
      if (px.val[size_t(i)] > 0.0) px.grad[size_t(i)] += self.grad[size_t(i)];
  });
  const real* in = x.data();
  real* o = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out = make_op_result(x.shape(), {x}, [](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const int64_t n = int64_t(self.val.size());
    for (int64_t i = 0; i < n; ++i) {
      real y = self.val[size_t(i)];
      px.grad[size_t(i)] += self.grad[size_t(i)] * y * (1.0 - y);
    }
  });
  const real* in = x.data();
  real* o = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = 1.0 / (1.0 + std::exp(-in[i]));
  return out;
}

inline Tensor gelu(const Tensor& x) {
  static const real inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const real inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
  Tensor out = make_op_result(x.shape(), {x}, [](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const int64_t n = int64_t(self.val.size());
    for (int64_t i = 0; i < n; ++i) {
      real v = px.val[size_t(i)];
      real cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      real pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      px.grad[size_t(i)] += self.grad[size_t(i)] * (cdf + v * pdf);
    }
  });
  const real* in = x.data();
  real* o = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i)
    o[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] * inv_sqrt2));
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = make_op_result(a.shape(), {a, b}, [](ag::Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *self.parents[size_t(k)];
      if (!p.needs_grad) continue;
      p.ensure_grad();
      const int64_t n = int64_t(self.val.size());
      for (int64_t i = 0; i < n; ++i) p.grad[size_t(i)] += self.grad[size_t(i)];
    }
  });
  const real* pa = a.data();
  const real* pb = b.data();
  real* o = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = make_op_result(a.shape(), {a, b}, [](ag::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const int64_t n = int64_t(self.val.size());
    if (pa.needs_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        pa.grad[size_t(i)] += self.grad[size_t(i)] * pb.val[size_t(i)];
    }
    if (pb.needs_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        pb.grad[size_t(i)] += self.grad[size_t(i)] * pa.val[size_t(i)];
    }
  });
  const real* pa = a.data();
  const real* pb = b.data();
  real* o = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];
  return out;
}

// y = k*x + c
inline Tensor affine(const Tensor& x, real k, real c) {
  Tensor out = make_op_result(x.shape(), {x}, [k](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const int64_t n = int64_t(self.val.size());
    for (int64_t i = 0; i < n; ++i) px.grad[size_t(i)] += k * self.grad[size_t(i)];
  });
  const real* in = x.data();
  real* o = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = k * in[i] + c;
  return out;
}

// ---------- mask broadcasting ([N,1,H,W] against [N,C,H,W]) ----------

inline void check_mask_pair(const char* op, const Tensor& x, const Tensor& m) {
  if (x.ndim() != 4 || m.ndim() != 4 || m.dim(1) != 1 || x.dim(0) != m.dim(0) ||
      x.dim(2) != m.dim(2) || x.dim(3) != m.dim(3))
    shape_fail(op, "feature " + shape_str(x.shape()) + " vs mask " + shape_str(m.shape()));
}

inline Tensor mul_mask(const Tensor& x, const Tensor& m) {
  check_mask_pair("mul_mask", x, m);
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = make_op_result(x.shape(), {x, m}, [N, C, HW](ag::Node& self) {
    auto& px = *self.parents[0];
    auto& pm = *self.parents[1];
    if (px.needs_grad) {
      px.ensure_grad();
      parallel_for(N * C, [&](int64_t nc) {
        const int64_t n = nc / C;
        const real* g = self.grad.data() + nc * HW;
        const real* mv = pm.val.data() + n * HW;
        real* d = px.grad.data() + nc * HW;
        for (int64_t i = 0; i < HW; ++i) d[i] += g[i] * mv[i];
      });
    }
    if (pm.needs_grad) {
      pm.ensure_grad();
      parallel_for(N, [&](int64_t n) {
        real* dm = pm.grad.data() + n * HW;
        for (int64_t c = 0; c < C; ++c) {
          const real* g = self.grad.data() + (n * C + c) * HW;
          const real* xv = px.val.data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) dm[i] += g[i] * xv[i];
        }
      });
    }
  });
  const real* in = x.data();
  const real* mv = m.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const int64_t n = nc / C;
    const real* xr = in + nc * HW;
    const real* mr = mv + n * HW;
    real* orow = o + nc * HW;
    for (int64_t i = 0; i < HW; ++i) orow[i] = xr[i] * mr[i];
  });
  return out;
}

inline Tensor add_mask(const Tensor& x, const Tensor& m) {
  check_mask_pair("add_mask", x, m);
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = make_op_result(x.shape(), {x, m}, [N, C, HW](ag::Node& self) {
    auto& px = *self.parents[0];
    auto& pm = *self.parents[1];
    if (px.needs_grad) {
      px.ensure_grad();
      const int64_t n = int64_t(self.val.size());
      for (int64_t i = 0; i < n; ++i) px.grad[size_t(i)] += self.grad[size_t(i)];
    }
    if (pm.needs_grad) {
      pm.ensure_grad();
      parallel_for(N, [&](int64_t n) {
        real* dm = pm.grad.data() + n * HW;
        for (int64_t c = 0; c < C; ++c) {
          const real* g = self.grad.data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) dm[i] += g[i];
        }
      });
    }
  });
  const real* in = x.data();
  const real* mv = m.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const int64_t n = nc / C;
    const real* xr = in + nc * HW;
    const real* mr = mv + n * HW;
    real* orow = o + nc * HW;
    for (int64_t i = 0; i < HW; ++i) orow[i] = xr[i] + mr[i];
  });
  return out;
}

// ---------- convolution ----------

// x [N,Ci,H,W], w [Co,Ci,kh,kw], optional b [Co].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                     int pad, int dilation) {
  if (x.ndim() != 4 || w.ndim() != 4)
    shape_fail("conv2d", "expected 4-d input/kernel, got " + shape_str(x.shape()) + " and " +
                             shape_str(w.shape()));
  const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Ci)
    throw ConfigError("conv2d: input has " + std::to_string(Ci) + " channels but kernel expects " +
                      std::to_string(w.dim(1)));
  const int64_t OH = (H + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
  const int64_t OW = (W + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
  if (OH < 1 || OW < 1)
    shape_fail("conv2d", "kernel does not fit input " + shape_str(x.shape()));
  const int s = stride, p = pad, d = dilation;
  const bool has_bias = b.defined();

  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(b);

  Tensor out = make_op_result(
      {N, Co, OH, OW}, parents, [=](ag::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const real* xv = px.val.data();
        const real* wv = pw.val.data();
        const real* g = self.grad.data();
        if (px.needs_grad) {
          px.ensure_grad();
          real* dx = px.grad.data();
          parallel_for(N * Ci, [&](int64_t nci) {
            const int64_t n = nci / Ci, ci = nci % Ci;
            real* dxp = dx + (n * Ci + ci) * H * W;
            for (int64_t co = 0; co < Co; ++co) {
              const real* gp = g + (n * Co + co) * OH * OW;
              for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const real wvv = wv[((co * Ci + ci) * kh + ky) * kw + kx];
                  if (wvv == 0.0) continue;
                  for (int64_t oy = 0; oy < OH; ++oy) {
                    const int64_t iy = oy * s - p + ky * d;
                    if (iy < 0 || iy >= H) continue;
                    real* dxrow = dxp + iy * W;
                    const real* grow = gp + oy * OW;
                    if (s == 1) {
                      const int64_t off = kx * d - p;
                      const int64_t x0 = std::max<int64_t>(0, -off);
                      const int64_t x1 = std::min<int64_t>(OW, W - off);
                      for (int64_t ox = x0; ox < x1; ++ox) dxrow[ox + off] += wvv * grow[ox];
                    } else {
                      for (int64_t ox = 0; ox < OW; ++ox) {
                        const int64_t ix = ox * s - p + kx * d;
                        if (ix >= 0 && ix < W) dxrow[ix] += wvv * grow[ox];
                      }
                    }
                  }
                }
            }
          });
        }
        if (pw.needs_grad) {
          pw.ensure_grad();
          real* dw = pw.grad.data();
          parallel_for(Co, [&](int64_t co) {
            for (int64_t n = 0; n < N; ++n) {
              const real* gp = g + (n * Co + co) * OH * OW;
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const real* xp = xv + (n * Ci + ci) * H * W;
                for (int64_t ky = 0; ky < kh; ++ky)
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    real acc = 0.0;
                    for (int64_t oy = 0; oy < OH; ++oy) {
                      const int64_t iy = oy * s - p + ky * d;
                      if (iy < 0 || iy >= H) continue;
                      const real* xrow = xp + iy * W;
                      const real* grow = gp + oy * OW;
                      if (s == 1) {
                        const int64_t off = kx * d - p;
                        const int64_t x0 = std::max<int64_t>(0, -off);
                        const int64_t x1 = std::min<int64_t>(OW, W - off);
                        for (int64_t ox = x0; ox < x1; ++ox) acc += grow[ox] * xrow[ox + off];
                      } else {
                        for (int64_t ox = 0; ox < OW; ++ox) {
                          const int64_t ix = ox * s - p + kx * d;
                          if (ix >= 0 && ix < W) acc += grow[ox] * xrow[ix];
                        }
                      }
                    }
                    dw[((co * Ci + ci) * kh + ky) * kw + kx] += acc;
                  }
              }
            }
          });
        }
        if (has_bias && self.parents[2]->needs_grad) {
          auto& pb = *self.parents[2];
          pb.ensure_grad();
          parallel_for(Co, [&](int64_t co) {
            real acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
              const real* gp = g + (n * Co + co) * OH * OW;
              for (int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
            }
            pb.grad[size_t(co)] += acc;
          });
        }
      });

  const real* xv = x.data();
  const real* wv = w.data();
  const real* bv = has_bias ? b.data() : nullptr;
  real* o = out.data();
  parallel_for(N * Co, [&](int64_t nco) {
    const int64_t n = nco / Co, co = nco % Co;
    real* op = o + (n * Co + co) * OH * OW;
    const real b0 = bv ? bv[co] : 0.0;
    for (int64_t i = 0; i < OH * OW; ++i) op[i] = b0;
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const real* xp = xv + (n * Ci + ci) * H * W;
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          const real wvv = wv[((co * Ci + ci) * kh + ky) * kw + kx];
          if (wvv == 0.0) continue;
          for (int64_t oy = 0; oy < OH; ++oy) {
            const int64_t iy = oy * s - p + ky * d;
            if (iy < 0 || iy >= H) continue;
            const real* xrow = xp + iy * W;
            real* orow = op + oy * OW;
            if (s == 1) {
              const int64_t off = kx * d - p;
              const int64_t x0 = std::max<int64_t>(0, -off);
              const int64_t x1 = std::min<int64_t>(OW, W - off);
              for (int64_t ox = x0; ox < x1; ++ox) orow[ox] += wvv * xrow[ox + off];
            } else {
              for (int64_t ox = 0; ox < OW; ++ox) {
                const int64_t ix = ox * s - p + kx * d;
                if (ix >= 0 && ix < W) orow[ox] += wvv * xrow[ix];
              }
            }
          }
        }
    }
  });
  return out;
}

// Transpose convolution, kernel 2, stride 2: exact spatial doubling.
// x [N,Ci,H,W], w [Ci,Co,2,2], b [Co].
inline Tensor conv_transpose2x2(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.ndim() != 4 || w.dim(0) != Ci || w.dim(2) != 2 || w.dim(3) != 2)
    throw ConfigError("conv_transpose2x2: kernel " + shape_str(w.shape()) +
                      " incompatible with input " + shape_str(x.shape()));
  const int64_t Co = w.dim(1);
  const int64_t OH = H * 2, OW = W * 2;
  const bool has_bias = b.defined();
  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(b);

  Tensor out = make_op_result({N, Co, OH, OW}, parents, [=](ag::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const real* xv = px.val.data();
    const real* wv = pw.val.data();
    const real* g = self.grad.data();
    if (px.needs_grad) {
      px.ensure_grad();
      parallel_for(N * Ci, [&](int64_t nci) {
        const int64_t n = nci / Ci, ci = nci % Ci;
        real* dxp = px.grad.data() + (n * Ci + ci) * H * W;
        for (int64_t co = 0; co < Co; ++co) {
          const real* gp = g + (n * Co + co) * OH * OW;
          for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx2 = 0; dx2 < 2; ++dx2) {
              const real wvv = wv[((ci * Co + co) * 2 + dy) * 2 + dx2];
              for (int64_t y = 0; y < H; ++y) {
                const real* grow = gp + (2 * y + dy) * OW + dx2;
                real* dxrow = dxp + y * W;
                for (int64_t xx = 0; xx < W; ++xx) dxrow[xx] += wvv * grow[2 * xx];
              }
            }
        }
      });
    }
    if (pw.needs_grad) {
      pw.ensure_grad();
      parallel_for(Ci, [&](int64_t ci) {
        for (int64_t co = 0; co < Co; ++co)
          for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx2 = 0; dx2 < 2; ++dx2) {
              real acc = 0.0;
              for (int64_t n = 0; n < N; ++n) {
                const real* xp = xv + (n * Ci + ci) * H * W;
                const real* gp = g + (n * Co + co) * OH * OW;
                for (int64_t y = 0; y < H; ++y) {
                  const real* xrow = xp + y * W;
                  const real* grow = gp + (2 * y + dy) * OW + dx2;
                  for (int64_t xx = 0; xx < W; ++xx) acc += xrow[xx] * grow[2 * xx];
                }
              }
              pw.grad[size_t(((ci * Co + co) * 2 + dy) * 2 + dx2)] += acc;
            }
      });
    }
    if (has_bias && self.parents[2]->needs_grad) {
      auto& pb = *self.parents[2];
      pb.ensure_grad();
      parallel_for(Co, [&](int64_t co) {
        real acc = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const real* gp = g + (n * Co + co) * OH * OW;
          for (int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
        }
        pb.grad[size_t(co)] += acc;
      });
    }
  });

  const real* xv = x.data();
  const real* wv = w.data();
  const real* bv = has_bias ? b.data() : nullptr;
  real* o = out.data();
  parallel_for(N * Co, [&](int64_t nco) {
    const int64_t n = nco / Co, co = nco % Co;
    real* op = o + (n * Co + co) * OH * OW;
    const real b0 = bv ? bv[co] : 0.0;
    for (int64_t i = 0; i < OH * OW; ++i) op[i] = b0;
    for (int64_t ci = 0; ci < Ci; ++ci) {
      const real* xp = xv + (n * Ci + ci) * H * W;
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx2 = 0; dx2 < 2; ++dx2) {
          const real wvv = wv[((ci * Co + co) * 2 + dy) * 2 + dx2];
          for (int64_t y = 0; y < H; ++y) {
            const real* xrow = xp + y * W;
            real* orow = op + (2 * y + dy) * OW + dx2;
            for (int64_t xx = 0; xx < W; ++xx) orow[2 * xx] += wvv * xrow[xx];
          }
        }
    }
  });
  return out;
}

// Depthwise 3x3, stride 1, pad 1. x [N,C,H,W], w [C,3,3], b [C].
inline Tensor dwconv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.ndim() != 3 || w.dim(0) != C || w.dim(1) != 3 || w.dim(2) != 3)
    throw ConfigError("dwconv3x3: kernel " + shape_str(w.shape()) + " incompatible with " +
                      shape_str(x.shape()));
  const bool has_bias = b.defined();
  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(b);

  Tensor out = make_op_result({N, C, H, W}, parents, [=](ag::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const real* xv = px.val.data();
    const real* wv = pw.val.data();
    const real* g = self.grad.data();
    if (px.needs_grad) {
      px.ensure_grad();
      parallel_for(N * C, [&](int64_t nc) {
        const int64_t c = nc % C;
        real* dxp = px.grad.data() + nc * H * W;
        const real* gp = g + nc * H * W;
        for (int64_t ky = 0; ky < 3; ++ky)
          for (int64_t kx = 0; kx < 3; ++kx) {
            const real wvv = wv[(c * 3 + ky) * 3 + kx];
            const int64_t off = kx - 1;
            for (int64_t oy = 0; oy < H; ++oy) {
              const int64_t iy = oy + ky - 1;
              if (iy < 0 || iy >= H) continue;
              const real* grow = gp + oy * W;
              real* dxrow = dxp + iy * W;
              const int64_t x0 = std::max<int64_t>(0, -off);
              const int64_t x1 = std::min<int64_t>(W, W - off);
              for (int64_t ox = x0; ox < x1; ++ox) dxrow[ox + off] += wvv * grow[ox];
            }
          }
      });
    }
    if (pw.needs_grad) {
      pw.ensure_grad();
      parallel_for(C, [&](int64_t c) {
        for (int64_t ky = 0; ky < 3; ++ky)
          for (int64_t kx = 0; kx < 3; ++kx) {
            real acc = 0.0;
            const int64_t off = kx - 1;
            for (int64_t n = 0; n < N; ++n) {
              const real* xp = xv + (n * C + c) * H * W;
              const real* gp = g + (n * C + c) * H * W;
              for (int64_t oy = 0; oy < H; ++oy) {
                const int64_t iy = oy + ky - 1;
                if (iy < 0 || iy >= H) continue;
                const real* xrow = xp + iy * W;
                const real* grow = gp + oy * W;
                const int64_t x0 = std::max<int64_t>(0, -off);
                const int64_t x1 = std::min<int64_t>(W, W - off);
                for (int64_t ox = x0; ox < x1; ++ox) acc += grow[ox] * xrow[ox + off];
              }
            }
            pw.grad[size_t((c * 3 + ky) * 3 + kx)] += acc;
          }
      });
    }
    if (has_bias && self.parents[2]->needs_grad) {
      auto& pb = *self.parents[2];
      pb.ensure_grad();
      parallel_for(C, [&](int64_t c) {
        real acc = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const real* gp = g + (n * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) acc += gp[i];
        }
        pb.grad[size_t(c)] += acc;
      });
    }
  });

  const real* xv = x.data();
  const real* wv = w.data();
  const real* bv = has_bias ? b.data() : nullptr;
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const int64_t c = nc % C;
    const real* xp = xv + nc * H * W;
    real* op = o + nc * H * W;
    const real b0 = bv ? bv[c] : 0.0;
    for (int64_t i = 0; i < H * W; ++i) op[i] = b0;
    for (int64_t ky = 0; ky < 3; ++ky)
      for (int64_t kx = 0; kx < 3; ++kx) {
        const real wvv = wv[(c * 3 + ky) * 3 + kx];
        const int64_t off = kx - 1;
        for (int64_t oy = 0; oy < H; ++oy) {
          const int64_t iy = oy + ky - 1;
          if (iy < 0 || iy >= H) continue;
          const real* xrow = xp + iy * W;
          real* orow = op + oy * W;
          const int64_t x0 = std::max<int64_t>(0, -off);
          const int64_t x1 = std::min<int64_t>(W, W - off);
          for (int64_t ox = x0; ox < x1; ++ox) orow[ox] += wvv * xrow[ox + off];
        }
      }
  });
  return out;
}

// ---------- linear / matmul ----------

// x [..., Ci] -> [..., Co];  w [Ci,Co], b [Co].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t Ci = x.dim(x.ndim() - 1);
  if (w.ndim() != 2 || w.dim(0) != Ci)
    throw ConfigError("linear: input feature dim " + std::to_string(Ci) +
                      " does not match weight " + shape_str(w.shape()));
  const int64_t Co = w.dim(1);
  const int64_t R = x.numel() / Ci;
  Shape os = x.shape();
  os.back() = Co;
  const bool has_bias = b.defined();
  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(b);

  Tensor out = make_op_result(os, parents, [=](ag::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const real* xv = px.val.data();
    const real* wv = pw.val.data();
    const real* g = self.grad.data();
    if (px.needs_grad) {
      px.ensure_grad();
      parallel_for(R, [&](int64_t r) {
        real* dxr = px.grad.data() + r * Ci;
        const real* gr = g + r * Co;
        for (int64_t c = 0; c < Ci; ++c) {
          const real* wr = wv + c * Co;
          real acc = 0.0;
          for (int64_t o2 = 0; o2 < Co; ++o2) acc += gr[o2] * wr[o2];
          dxr[c] += acc;
        }
      });
    }
    if (pw.needs_grad) {
      pw.ensure_grad();
      parallel_for(Ci, [&](int64_t c) {
        real* dwr = pw.grad.data() + c * Co;
        for (int64_t r = 0; r < R; ++r) {
          const real xvv = xv[r * Ci + c];
          if (xvv == 0.0) continue;
          const real* gr = g + r * Co;
          for (int64_t o2 = 0; o2 < Co; ++o2) dwr[o2] += xvv * gr[o2];
        }
      });
    }
    if (has_bias && self.parents[2]->needs_grad) {
      auto& pb = *self.parents[2];
      pb.ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        const real* gr = g + r * Co;
        for (int64_t o2 = 0; o2 < Co; ++o2) pb.grad[size_t(o2)] += gr[o2];
      }
    }
  });

  const real* xv = x.data();
  const real* wv = w.data();
  const real* bv = has_bias ? b.data() : nullptr;
  real* o = out.data();
  parallel_for(R, [&](int64_t r) {
    const real* xr = xv + r * Ci;
    real* orow = o + r * Co;
    if (bv)
      std::memcpy(orow, bv, size_t(Co) * sizeof(real));
    else
      std::fill(orow, orow + Co, 0.0);
    for (int64_t c = 0; c < Ci; ++c) {
      const real xvv = xr[c];
      if (xvv == 0.0) continue;
      const real* wr = wv + c * Co;
      for (int64_t o2 = 0; o2 < Co; ++o2) orow[o2] += xvv * wr[o2];
    }
  });
  return out;
}

// a [B,M,K] @ b [B,K,N] -> [B,M,N]
inline Tensor matmul_nn(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    shape_fail("matmul_nn", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), Nn = b.dim(2);
  Tensor out = make_op_result({B, M, Nn}, {a, b}, [=](ag::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const real* av = pa.val.data();
    const real* bv = pb.val.data();
    const real* g = self.grad.data();
    if (pa.needs_grad) {
      pa.ensure_grad();
      parallel_for(B * M, [&](int64_t bm) {
        const int64_t bb = bm / M;
        real* dar = pa.grad.data() + bm * K;
        const real* gr = g + bm * Nn;
        const real* bp = bv + bb * K * Nn;
        for (int64_t k = 0; k < K; ++k) {
          const real* brow = bp + k * Nn;
          real acc = 0.0;
          for (int64_t n = 0; n < Nn; ++n) acc += gr[n] * brow[n];
          dar[k] += acc;
        }
      });
    }
    if (pb.needs_grad) {
      pb.ensure_grad();
      parallel_for(B, [&](int64_t bb) {
        real* dbp = pb.grad.data() + bb * K * Nn;
        const real* ap = av + bb * M * K;
        const real* gp = g + bb * M * Nn;
        for (int64_t m = 0; m < M; ++m) {
          const real* arow = ap + m * K;
          const real* grow = gp + m * Nn;
          for (int64_t k = 0; k < K; ++k) {
            const real avv = arow[k];
            if (avv == 0.0) continue;
            real* dbrow = dbp + k * Nn;
            for (int64_t n = 0; n < Nn; ++n) dbrow[n] += avv * grow[n];
          }
        }
      });
    }
  });
  const real* av = a.data();
  const real* bv = b.data();
  real* o = out.data();
  parallel_for(B * M, [&](int64_t bm) {
    const int64_t bb = bm / M;
    const real* arow = av + bm * K;
    const real* bp = bv + bb * K * Nn;
    real* orow = o + bm * Nn;
    std::fill(orow, orow + Nn, 0.0);
    for (int64_t k = 0; k < K; ++k) {
      const real avv = arow[k];
      if (avv == 0.0) continue;
      const real* brow = bp + k * Nn;
      for (int64_t n = 0; n < Nn; ++n) orow[n] += avv * brow[n];
    }
  });
  return out;
}

// a [B,M,K] @ b^T where b [B,N,K] -> [B,M,N]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    shape_fail("matmul_nt", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), Nn = b.dim(1);
  Tensor out = make_op_result({B, M, Nn}, {a, b}, [=](ag::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const real* av = pa.val.data();
    const real* bv = pb.val.data();
    const real* g = self.grad.data();
    if (pa.needs_grad) {
      pa.ensure_grad();
      parallel_for(B * M, [&](int64_t bm) {
        const int64_t bb = bm / M;
        real* dar = pa.grad.data() + bm * K;
        const real* gr = g + bm * Nn;
        const real* bp = bv + bb * Nn * K;
        for (int64_t n = 0; n < Nn; ++n) {
          const real gv = gr[n];
          if (gv == 0.0) continue;
          const real* brow = bp + n * K;
          for (int64_t k = 0; k < K; ++k) dar[k] += gv * brow[k];
        }
      });
    }
    if (pb.needs_grad) {
      pb.ensure_grad();
      parallel_for(B, [&](int64_t bb) {
        real* dbp = pb.grad.data() + bb * Nn * K;
        const real* ap = av + bb * M * K;
        const real* gp = g + bb * M * Nn;
        for (int64_t m = 0; m < M; ++m) {
          const real* arow = ap + m * K;
          const real* grow = gp + m * Nn;
          for (int64_t n = 0; n < Nn; ++n) {
            const real gv = grow[n];
            if (gv == 0.0) continue;
            real* dbrow = dbp + n * K;
            for (int64_t k = 0; k < K; ++k) dbrow[k] += gv * arow[k];
          }
        }
      });
    }
  });
  const real* av = a.data();
  const real* bv = b.data();
  real* o = out.data();
  parallel_for(B * M, [&](int64_t bm) {
    const int64_t bb = bm / M;
    const real* arow = av + bm * K;
    const real* bp = bv + bb * Nn * K;
    real* orow = o + bm * Nn;
    for (int64_t n = 0; n < Nn; ++n) {
      const real* brow = bp + n * K;
      real acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      orow[n] = acc;
    }
  });
  return out;
}

// ---------- normalization ----------

// Batch norm over [N,C,H,W] per channel. Running stats are plain buffers the
// op mutates when update_stats is set; they carry no gradient.
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool training,
                          bool update_stats, real momentum = 0.1, real eps = 1e-5) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C)
    throw ConfigError("batchnorm2d: scale/shift size mismatch for C=" + std::to_string(C));
  const int64_t m = N * HW;

  // channel statistics used for normalization
  std::vector<real> mean(static_cast<size_t>(C), 0.0);
  std::vector<real> inv_std(static_cast<size_t>(C), 0.0);
  const real* xv = x.data();
  if (training) {
    parallel_for(C, [&](int64_t c) {
      real s = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const real* xp = xv + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += xp[i];
      }
      const real mu = s / real(m);
      real v = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const real* xp = xv + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const real d = xp[i] - mu;
          v += d * d;
        }
      }
      v /= real(m);
      mean[size_t(c)] = mu;
      inv_std[size_t(c)] = 1.0 / std::sqrt(v + eps);
    });
    if (update_stats) {
      real* rm = running_mean.data();
      real* rv = running_var.data();
      for (int64_t c = 0; c < C; ++c) {
        const real var_b = 1.0 / (inv_std[size_t(c)] * inv_std[size_t(c)]) - eps;
        const real var_u = m > 1 ? var_b * real(m) / real(m - 1) : var_b;
        rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[size_t(c)];
        rv[c] = (1.0 - momentum) * rv[c] + momentum * var_u;
      }
    }
  } else {
    const real* rm = running_mean.data();
    const real* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) {
      mean[size_t(c)] = rm[c];
      inv_std[size_t(c)] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }

  Tensor out = make_op_result(
      x.shape(), {x, gamma, beta},
      [N, C, HW, m, training, mean, inv_std](ag::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pbt = *self.parents[2];
        const real* xv = px.val.data();
        const real* g = self.grad.data();
        const real* gam = pg.val.data();
        // per-channel reductions
        std::vector<real> sum_dy(size_t(C), 0.0), sum_dyxh(size_t(C), 0.0);
        parallel_for(C, [&](int64_t c) {
          real sdy = 0.0, sdyx = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            const real* gp = g + (n * C + c) * HW;
            const real* xp = xv + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
              sdy += gp[i];
              sdyx += gp[i] * (xp[i] - mean[size_t(c)]) * inv_std[size_t(c)];
            }
          }
          sum_dy[size_t(c)] = sdy;
          sum_dyxh[size_t(c)] = sdyx;
        });
        if (pg.needs_grad) {
          pg.ensure_grad();
          for (int64_t c = 0; c < C; ++c) pg.grad[size_t(c)] += sum_dyxh[size_t(c)];
        }
        if (pbt.needs_grad) {
          pbt.ensure_grad();
          for (int64_t c = 0; c < C; ++c) pbt.grad[size_t(c)] += sum_dy[size_t(c)];
        }
        if (px.needs_grad) {
          px.ensure_grad();
          parallel_for(C, [&](int64_t c) {
            const real is = inv_std[size_t(c)];
            const real mu = mean[size_t(c)];
            const real gm = gam[c];
            if (training) {
              const real mdy = sum_dy[size_t(c)] / real(m);
              const real mdyx = sum_dyxh[size_t(c)] / real(m);
              for (int64_t n = 0; n < N; ++n) {
                const real* gp = g + (n * C + c) * HW;
                const real* xp = xv + (n * C + c) * HW;
                real* dp = px.grad.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                  const real xh = (xp[i] - mu) * is;
                  dp[i] += gm * is * (gp[i] - mdy - xh * mdyx);
                }
              }
            } else {
              for (int64_t n = 0; n < N; ++n) {
                const real* gp = g + (n * C + c) * HW;
                real* dp = px.grad.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dp[i] += gm * is * gp[i];
              }
            }
          });
        }
      });

  const real* gam = gamma.data();
  const real* bet = beta.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const int64_t c = nc % C;
    const real mu = mean[size_t(c)], is = inv_std[size_t(c)];
    const real a = gam[c] * is;
    const real b2 = bet[c] - a * mu;
    const real* xp = xv + nc * HW;
    real* op = o + nc * HW;
    for (int64_t i = 0; i < HW; ++i) op[i] = a * xp[i] + b2;
  });
  return out;
}

// Layer norm over the trailing feature dim of [..., C].
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        real eps = 1e-6) {
  const int64_t C = x.dim(x.ndim() - 1);
  if (gamma.numel() != C || beta.numel() != C)
    throw ConfigError("layernorm: scale/shift size mismatch for C=" + std::to_string(C));
  const int64_t R = x.numel() / C;
  std::vector<real> mean(static_cast<size_t>(R), 0.0);
  std::vector<real> inv_std(static_cast<size_t>(R), 0.0);
  const real* xv = x.data();
  parallel_for(R, [&](int64_t r) {
    const real* xr = xv + r * C;
    real s = 0.0;
    for (int64_t c = 0; c < C; ++c) s += xr[c];
    const real mu = s / real(C);
    real v = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const real d = xr[c] - mu;
      v += d * d;
    }
    mean[size_t(r)] = mu;
    inv_std[size_t(r)] = 1.0 / std::sqrt(v / real(C) + eps);
  });

  Tensor out = make_op_result(
      x.shape(), {x, gamma, beta}, [R, C, mean, inv_std](ag::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pbt = *self.parents[2];
        const real* xv = px.val.data();
        const real* g = self.grad.data();
        const real* gam = pg.val.data();
        if (px.needs_grad) {
          px.ensure_grad();
          parallel_for(R, [&](int64_t r) {
            const real* xr = xv + r * C;
            const real* gr = g + r * C;
            real* dr = px.grad.data() + r * C;
            const real mu = mean[size_t(r)], is = inv_std[size_t(r)];
            real mdg = 0.0, mdgx = 0.0;
            for (int64_t c = 0; c < C; ++c) {
              const real dg = gr[c] * gam[c];
              const real xh = (xr[c] - mu) * is;
              mdg += dg;
              mdgx += dg * xh;
            }
            mdg /= real(C);
            mdgx /= real(C);
            for (int64_t c = 0; c < C; ++c) {
              const real dg = gr[c] * gam[c];
              const real xh = (xr[c] - mu) * is;
              dr[c] += is * (dg - mdg - xh * mdgx);
            }
          });
        }
        if (pg.needs_grad || pbt.needs_grad) {
          if (pg.needs_grad) pg.ensure_grad();
          if (pbt.needs_grad) pbt.ensure_grad();
          for (int64_t r = 0; r < R; ++r) {
            const real* xr = xv + r * C;
            const real* gr = g + r * C;
            const real mu = mean[size_t(r)], is = inv_std[size_t(r)];
            for (int64_t c = 0; c < C; ++c) {
              if (pg.needs_grad) pg.grad[size_t(c)] += gr[c] * (xr[c] - mu) * is;
              if (pbt.needs_grad) pbt.grad[size_t(c)] += gr[c];
            }
          }
        }
      });

  const real* gam = gamma.data();
  const real* bet = beta.data();
  real* o = out.data();
  parallel_for(R, [&](int64_t r) {
    const real* xr = xv + r * C;
    real* orow = o + r * C;
    const real mu = mean[size_t(r)], is = inv_std[size_t(r)];
    for (int64_t c = 0; c < C; ++c) orow[c] = gam[c] * (xr[c] - mu) * is + bet[c];
  });
  return out;
}

// ---------- softmax ----------

inline Tensor softmax_lastdim(const Tensor& x) {
  const int64_t S = x.dim(x.ndim() - 1);
  const int64_t R = x.numel() / S;
  Tensor out = make_op_result(x.shape(), {x}, [R, S](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const real* y = self.val.data();
    const real* g = self.grad.data();
    parallel_for(R, [&](int64_t r) {
      const real* yr = y + r * S;
      const real* gr = g + r * S;
      real* dr = px.grad.data() + r * S;
      real dot = 0.0;
      for (int64_t s = 0; s < S; ++s) dot += yr[s] * gr[s];
      for (int64_t s = 0; s < S; ++s) dr[s] += yr[s] * (gr[s] - dot);
    });
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(R, [&](int64_t r) {
    const real* xr = xv + r * S;
    real* orow = o + r * S;
    real mx = xr[0];
    for (int64_t s = 1; s < S; ++s) mx = std::max(mx, xr[s]);
    real sum = 0.0;
    for (int64_t s = 0; s < S; ++s) {
      orow[s] = std::exp(xr[s] - mx);
      sum += orow[s];
    }
    const real inv = 1.0 / sum;
    for (int64_t s = 0; s < S; ++s) orow[s] *= inv;
  });
  return out;
}

// ---------- pooling ----------

inline Tensor maxpool2x2(const Tensor& x) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    shape_fail("maxpool2x2", "odd spatial dims " + shape_str(x.shape()) +
                                 " not reachable by 2x2 pooling");
  const int64_t OH = H / 2, OW = W / 2;
  // argmax in {0,1,2,3}: first maximum wins, fixed scan order
  auto arg = std::make_shared<std::vector<uint8_t>>(size_t(N * C * OH * OW));
  const real* xv = x.data();
  Tensor out = make_op_result({N, C, OH, OW}, {x}, [=](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const real* g = self.grad.data();
    parallel_for(N * C, [&](int64_t nc) {
      const real* gp = g + nc * OH * OW;
      const uint8_t* ap = arg->data() + nc * OH * OW;
      real* dp = px.grad.data() + nc * H * W;
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          const uint8_t a = ap[oy * OW + ox];
          const int64_t iy = 2 * oy + (a >> 1), ix = 2 * ox + (a & 1);
          dp[iy * W + ix] += gp[oy * OW + ox];
        }
    });
  });
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const real* xp = xv + nc * H * W;
    real* op = o + nc * OH * OW;
    uint8_t* ap = arg->data() + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        real best = xp[(2 * oy) * W + 2 * ox];
        uint8_t ab = 0;
        for (uint8_t a = 1; a < 4; ++a) {
          const real v = xp[(2 * oy + (a >> 1)) * W + 2 * ox + (a & 1)];
          if (v > best) {
            best = v;
            ab = a;
          }
        }
        op[oy * OW + ox] = best;
        ap[oy * OW + ox] = ab;
      }
  });
  return out;
}

inline Tensor global_avgpool(const Tensor& x) {  // [N,C,H,W] -> [N,C]
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = make_op_result({N, C}, {x}, [N, C, HW](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const real inv = 1.0 / real(HW);
    parallel_for(N * C, [&](int64_t nc) {
      const real gv = self.grad[size_t(nc)] * inv;
      real* dp = px.grad.data() + nc * HW;
      for (int64_t i = 0; i < HW; ++i) dp[i] += gv;
    });
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const real* xp = xv + nc * HW;
    real s = 0.0;
    for (int64_t i = 0; i < HW; ++i) s += xp[i];
    o[nc] = s / real(HW);
  });
  return out;
}

inline Tensor global_maxpool(const Tensor& x) {  // [N,C,H,W] -> [N,C]
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto arg = std::make_shared<std::vector<int32_t>>(size_t(N * C));
  Tensor out = make_op_result({N, C}, {x}, [=](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc)
      px.grad[size_t(nc * HW + (*arg)[size_t(nc)])] += self.grad[size_t(nc)];
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const real* xp = xv + nc * HW;
    real best = xp[0];
    int32_t ab = 0;
    for (int64_t i = 1; i < HW; ++i)
      if (xp[i] > best) {
        best = xp[i];
        ab = int32_t(i);
      }
    o[nc] = best;
    (*arg)[size_t(nc)] = ab;
  });
  return out;
}

// [N,C,H,W] -> [N,2,H,W]: plane 0 = mean over channels, plane 1 = max.
inline Tensor channel_mean_max(const Tensor& x) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto arg = std::make_shared<std::vector<int32_t>>(size_t(N * HW));
  Tensor out = make_op_result({N, 2, x.dim(2), x.dim(3)}, {x}, [=](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const real inv = 1.0 / real(C);
    parallel_for(N, [&](int64_t n) {
      const real* gm = self.grad.data() + (n * 2 + 0) * HW;
      const real* gx = self.grad.data() + (n * 2 + 1) * HW;
      const int32_t* ap = arg->data() + n * HW;
      for (int64_t i = 0; i < HW; ++i) {
        const real gmean = gm[i] * inv;
        for (int64_t c = 0; c < C; ++c) px.grad[size_t((n * C + c) * HW + i)] += gmean;
        px.grad[size_t((n * C + ap[i]) * HW + i)] += gx[i];
      }
    });
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(N, [&](int64_t n) {
    real* om = o + (n * 2 + 0) * HW;
    real* ox = o + (n * 2 + 1) * HW;
    int32_t* ap = arg->data() + n * HW;
    for (int64_t i = 0; i < HW; ++i) {
      real s = 0.0, best = xv[size_t(n * C * HW + i)];
      int32_t ab = 0;
      for (int64_t c = 0; c < C; ++c) {
        const real v = xv[size_t((n * C + c) * HW + i)];
        s += v;
        if (v > best) {
          best = v;
          ab = int32_t(c);
        }
      }
      om[i] = s / real(C);
      ox[i] = best;
      ap[i] = ab;
    }
  });
  return out;
}

// y[n,c,:,:] = x[n,c,:,:] * gate[n,c]
inline Tensor scale_channels(const Tensor& x, const Tensor& gate) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gate.ndim() != 2 || gate.dim(0) != N || gate.dim(1) != C)
    shape_fail("scale_channels", shape_str(x.shape()) + " vs gate " + shape_str(gate.shape()));
  Tensor out = make_op_result(x.shape(), {x, gate}, [N, C, HW](ag::Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    const real* g = self.grad.data();
    if (px.needs_grad) {
      px.ensure_grad();
      parallel_for(N * C, [&](int64_t nc) {
        const real gv = pg.val[size_t(nc)];
        const real* gp = g + nc * HW;
        real* dp = px.grad.data() + nc * HW;
        for (int64_t i = 0; i < HW; ++i) dp[i] += gp[i] * gv;
      });
    }
    if (pg.needs_grad) {
      pg.ensure_grad();
      parallel_for(N * C, [&](int64_t nc) {
        const real* gp = g + nc * HW;
        const real* xp = px.val.data() + nc * HW;
        real acc = 0.0;
        for (int64_t i = 0; i < HW; ++i) acc += gp[i] * xp[i];
        pg.grad[size_t(nc)] += acc;
      });
    }
  });
  const real* xv = x.data();
  const real* gv = gate.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const real s = gv[nc];
    const real* xp = xv + nc * HW;
    real* op = o + nc * HW;
    for (int64_t i = 0; i < HW; ++i) op[i] = xp[i] * s;
  });
  return out;
}

// ---------- resize ----------

// Bilinear resize with half-pixel centers. Backward scatters the same taps.
inline Tensor bilinear_resize(const Tensor& x, int64_t OH, int64_t OW) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (OH < 1 || OW < 1) shape_fail("bilinear_resize", "bad target size");
  // precompute tap indices/weights per output row & column
  auto ty = std::make_shared<std::vector<int32_t>>(size_t(OH) * 2);
  auto wy = std::make_shared<std::vector<real>>(size_t(OH));
  auto tx = std::make_shared<std::vector<int32_t>>(size_t(OW) * 2);
  auto wx = std::make_shared<std::vector<real>>(size_t(OW));
  auto fill_taps = [](int64_t in, int64_t outn, int32_t* t, real* wgt) {
    const real scale = real(in) / real(outn);
    for (int64_t o = 0; o < outn; ++o) {
      real src = (real(o) + 0.5) * scale - 0.5;
      if (src < 0.0) src = 0.0;
      if (src > real(in - 1)) src = real(in - 1);
      const int64_t i0 = int64_t(std::floor(src));
      const int64_t i1 = std::min(i0 + 1, in - 1);
      t[2 * o] = int32_t(i0);
      t[2 * o + 1] = int32_t(i1);
      wgt[o] = src - real(i0);
    }
  };
  fill_taps(H, OH, ty->data(), wy->data());
  fill_taps(W, OW, tx->data(), wx->data());

  Tensor out = make_op_result({N, C, OH, OW}, {x}, [=](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const real* g = self.grad.data();
    parallel_for(N * C, [&](int64_t nc) {
      real* dp = px.grad.data() + nc * H * W;
      const real* gp = g + nc * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy) {
        const int64_t y0 = (*ty)[size_t(2 * oy)], y1 = (*ty)[size_t(2 * oy + 1)];
        const real fy = (*wy)[size_t(oy)];
        for (int64_t ox = 0; ox < OW; ++ox) {
          const int64_t x0 = (*tx)[size_t(2 * ox)], x1 = (*tx)[size_t(2 * ox + 1)];
          const real fx = (*wx)[size_t(ox)];
          const real gv = gp[oy * OW + ox];
          dp[y0 * W + x0] += gv * (1 - fy) * (1 - fx);
          dp[y0 * W + x1] += gv * (1 - fy) * fx;
          dp[y1 * W + x0] += gv * fy * (1 - fx);
          dp[y1 * W + x1] += gv * fy * fx;
        }
      }
    });
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const real* xp = xv + nc * H * W;
    real* op = o + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      const int64_t y0 = (*ty)[size_t(2 * oy)], y1 = (*ty)[size_t(2 * oy + 1)];
      const real fy = (*wy)[size_t(oy)];
      for (int64_t ox = 0; ox < OW; ++ox) {
        const int64_t x0 = (*tx)[size_t(2 * ox)], x1 = (*tx)[size_t(2 * ox + 1)];
        const real fx = (*wx)[size_t(ox)];
        op[oy * OW + ox] = (1 - fy) * ((1 - fx) * xp[y0 * W + x0] + fx * xp[y0 * W + x1]) +
                           fy * ((1 - fx) * xp[y1 * W + x0] + fx * xp[y1 * W + x1]);
      }
    }
  });
  return out;
}

// ---------- layout ----------

inline Tensor reshape(const Tensor& x, Shape s) {
  if (mdnet::numel(s) != x.numel())
    shape_fail("reshape", shape_str(x.shape()) + " -> " + shape_str(s));
  Tensor out = make_op_result(std::move(s), {x}, [](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const int64_t n = int64_t(self.val.size());
    for (int64_t i = 0; i < n; ++i) px.grad[size_t(i)] += self.grad[size_t(i)];
  });
  std::memcpy(out.data(), x.data(), size_t(x.numel()) * sizeof(real));
  return out;
}

// [A,B,C,D] -> [A,C,B,D]; self-inverse, which makes the backward the same map.
inline Tensor permute_0213(const Tensor& x) {
  const int64_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  Tensor out = make_op_result({A, C, B, D}, {x}, [A, B, C, D](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    parallel_for(A, [&](int64_t a) {
      for (int64_t c = 0; c < C; ++c)
        for (int64_t b = 0; b < B; ++b) {
          const real* g = self.grad.data() + ((a * C + c) * B + b) * D;
          real* d = px.grad.data() + ((a * B + b) * C + c) * D;
          for (int64_t e = 0; e < D; ++e) d[e] += g[e];
        }
    });
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(A, [&](int64_t a) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const real* src = xv + ((a * B + b) * C + c) * D;
        real* dst = o + ((a * C + c) * B + b) * D;
        std::memcpy(dst, src, size_t(D) * sizeof(real));
      }
  });
  return out;
}

// [N,C,H,W] -> [N,H*W,C]
inline Tensor nchw_to_tokens(const Tensor& x) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = make_op_result({N, HW, C}, {x}, [N, C, HW](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    parallel_for(N * C, [&](int64_t nc) {
      const int64_t n = nc / C, c = nc % C;
      real* d = px.grad.data() + nc * HW;
      const real* g = self.grad.data() + n * HW * C + c;
      for (int64_t i = 0; i < HW; ++i) d[i] += g[i * C];
    });
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const int64_t n = nc / C, c = nc % C;
    const real* src = xv + nc * HW;
    real* dst = o + n * HW * C + c;
    for (int64_t i = 0; i < HW; ++i) dst[i * C] = src[i];
  });
  return out;
}

// [N,T,C] -> [N,C,H,W] with T == H*W
inline Tensor tokens_to_nchw(const Tensor& x, int64_t H, int64_t W) {
  const int64_t N = x.dim(0), T = x.dim(1), C = x.dim(2);
  if (T != H * W)
    shape_fail("tokens_to_nchw", "token count " + std::to_string(T) + " != " +
                                     std::to_string(H) + "x" + std::to_string(W));
  Tensor out = make_op_result({N, C, H, W}, {x}, [N, C, T](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    parallel_for(N * C, [&](int64_t nc) {
      const int64_t n = nc / C, c = nc % C;
      const real* g = self.grad.data() + nc * T;
      real* d = px.grad.data() + n * T * C + c;
      for (int64_t i = 0; i < T; ++i) d[i * C] += g[i];
    });
  });
  const real* xv = x.data();
  real* o = out.data();
  parallel_for(N * C, [&](int64_t nc) {
    const int64_t n = nc / C, c = nc % C;
    const real* src = xv + n * T * C + c;
    real* dst = o + nc * T;
    for (int64_t i = 0; i < T; ++i) dst[i] = src[i * C];
  });
  return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) shape_fail("concat_channels", "empty input list");
  const int64_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int64_t Ct = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != 4 || t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
      shape_fail("concat_channels", "mismatched member " + shape_str(t.shape()) +
                                        " vs " + shape_str(xs[0].shape()));
    Ct += t.dim(1);
  }
  std::vector<int64_t> coffs;
  int64_t off = 0;
  for (const Tensor& t : xs) {
    coffs.push_back(off);
    off += t.dim(1);
  }
  Tensor out = make_op_result({N, Ct, H, W}, xs, [N, Ct, H, W, coffs](ag::Node& self) {
    const int64_t HW = H * W;
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.needs_grad) continue;
      p.ensure_grad();
      const int64_t Ck = p.shape[1];
      parallel_for(N * Ck, [&](int64_t nc) {
        const int64_t n = nc / Ck, c = nc % Ck;
        const real* g = self.grad.data() + ((n * Ct + coffs[k] + c) * HW);
        real* d = p.grad.data() + nc * HW;
        for (int64_t i = 0; i < HW; ++i) d[i] += g[i];
      });
    }
  });
  real* o = out.data();
  const int64_t HW = H * W;
  for (size_t k = 0; k < xs.size(); ++k) {
    const int64_t Ck = xs[k].dim(1);
    const real* src = xs[k].data();
    parallel_for(N * Ck, [&](int64_t nc) {
      const int64_t n = nc / Ck, c = nc % Ck;
      std::memcpy(o + (n * Ct + coffs[size_t(k)] + c) * HW, src + nc * HW,
                  size_t(HW) * sizeof(real));
    });
  }
  return out;
}

// ---------- reductions & scalar graph arithmetic ----------

inline Tensor sum_all(const Tensor& x) {
  Tensor out = make_op_result({1}, {x}, [](ag::Node& self) {
    auto& px = *self.parents[0];
    if (!px.needs_grad) return;
    px.ensure_grad();
    const real g = self.grad[0];
    for (auto& d : px.grad) d += g;
  });
  const real* xv = x.data();
  real s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += xv[i];
  out.data()[0] = s;
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  return affine(sum_all(x), 1.0 / real(x.numel()), 0.0);
}

inline Tensor s_add(const Tensor& a, const Tensor& b) { return add(a, b); }

inline Tensor s_div(const Tensor& a, const Tensor& b) {
  if (a.numel() != 1 || b.numel() != 1) shape_fail("s_div", "scalars expected");
  Tensor out = make_op_result({1}, {a, b}, [](ag::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const real av = pa.val[0], bv = pb.val[0], g = self.grad[0];
    if (pa.needs_grad) {
      pa.ensure_grad();
      pa.grad[0] += g / bv;
    }
    if (pb.needs_grad) {
      pb.ensure_grad();
      pb.grad[0] += -g * av / (bv * bv);
    }
  });
  out.data()[0] = a.data()[0] / b.data()[0];
  return out;
}

// weighted sum of scalar tensors
inline Tensor s_wsum(const std::vector<Tensor>& terms, const std::vector<real>& w) {
  if (terms.size() != w.size() || terms.empty()) shape_fail("s_wsum", "bad term list");
  Tensor out = make_op_result({1}, terms, [w](ag::Node& self) {
    const real g = self.grad[0];
    for (size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = *self.parents[i];
      if (!p.needs_grad) continue;
      p.ensure_grad();
      p.grad[0] += g * w[i];
    }
  });
  real s = 0.0;
  for (size_t i = 0; i < terms.size(); ++i) s += w[i] * terms[i].item();
  out.data()[0] = s;
  return out;
}

// Numerically stable mean binary cross-entropy from logits. The target is a
// constant (no gradient path).
inline Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape())
    shape_fail("bce_with_logits", shape_str(logits.shape()) + " vs " + shape_str(target.shape()));
  const int64_t n = logits.numel();
  const real* tv = target.data();
  Tensor tgt = target;  // keep alive as parent (never receives grad)
  Tensor out = make_op_result({1}, {logits, tgt}, [n](ag::Node& self) {
    auto& pz = *self.parents[0];
    auto& pt = *self.parents[1];
    if (!pz.needs_grad) return;
    pz.ensure_grad();
    const real g = self.grad[0] / real(n);
    for (int64_t i = 0; i < n; ++i) {
      const real z = pz.val[size_t(i)];
      const real p = 1.0 / (1.0 + std::exp(-z));
      pz.grad[size_t(i)] += g * (p - pt.val[size_t(i)]);
    }
  });
  const real* zv = logits.data();
  real s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const real z = zv[i];
    // max(z,0) - z*t + log(1 + exp(-|z|))
    s += std::max(z, 0.0) - z * tv[i] + std::log1p(std::exp(-std::abs(z)));
  }
  out.data()[0] = s / real(n);
  return out;
}

}  // namespace mdnet::ops
