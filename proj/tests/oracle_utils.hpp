#pragma once

// Test-only oracles: finite-difference gradient checking and brute-force
// reference implementations kept independent of the library code they verify.

#include <random>
#include <vector>

#include "mdnet/params.hpp"
#include "mdnet/tensor.hpp"

namespace oracle {

using mdnet::real;
using mdnet::Tensor;

// Relative error with an absolute floor: central differences carry rounding
// noise of about ulp(loss)/2h (~1e-9 for loss ~1e2, h=1e-5), so differences
// below 1e-6 are treated as agreement. Real gradients checked here are
// orders of magnitude above that floor.
inline real rel_err(real a, real b) {
  const real diff = std::abs(a - b);
  if (diff < 1e-6) return 0.0;
  return diff / std::max({std::abs(a), std::abs(b), real(1e-9)});
}

// Central finite differences on selected coordinates of `p` against the
// autograd gradient of the scalar fn(). fn rebuilds its graph on every call.
// The step keeps the ReLU/maxpool kink-crossing window per coordinate at
// ~1e-6 while double-precision rounding noise stays two orders below the
// comparison floor.
template <class F>
real gradcheck_param(F&& fn, Tensor& p, const std::vector<int64_t>& idxs, real h = 1e-6) {
  p.zero_grad();
  Tensor loss = fn();
  loss.backward();
  std::vector<real> g = p.grad();
  if (g.empty()) g.assign(size_t(p.numel()), 0.0);
  real worst = 0.0;
  for (int64_t i : idxs) {
    const real save = p[i];
    p[i] = save + h;
    const real f1 = fn().item();
    p[i] = save - h;
    const real f0 = fn().item();
    p[i] = save;
    const real fd = (f1 - f0) / (2.0 * h);
    worst = std::max(worst, rel_err(g[size_t(i)], fd));
  }
  p.zero_grad();
  return worst;
}

// All coordinates when small, otherwise a seeded sample.
inline std::vector<int64_t> sample_indices(int64_t n, int64_t max_count, uint64_t seed) {
  std::vector<int64_t> idxs;
  if (n <= max_count) {
    idxs.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) idxs[size_t(i)] = i;
    return idxs;
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int64_t> d(0, n - 1);
  for (int64_t i = 0; i < max_count; ++i) idxs.push_back(d(rng));
  return idxs;
}

template <class F>
real gradcheck_all_params(F&& fn, std::vector<Tensor*> params, int64_t per_tensor = 12,
                          uint64_t seed = 1234, real h = 1e-6) {
  real worst = 0.0;
  uint64_t s = seed;
  for (Tensor* p : params) {
    auto idxs = sample_indices(p->numel(), per_tensor, s++);
    worst = std::max(worst, gradcheck_param(fn, *p, idxs, h));
  }
  return worst;
}

inline Tensor random_tensor(mdnet::Shape s, uint64_t seed, real lo = -1.0, real hi = 1.0) {
  Tensor t(std::move(s));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<real> d(lo, hi);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

// Moves every parameter off its initialization point. Gradient checks must
// run at a generic point: zero-initialized BN shifts otherwise park ReLU
// inputs exactly on the kink in degenerate (1x1 spatial, batch 1) layers,
// where one-sided and central derivatives legitimately disagree.
inline void jitter_params(mdnet::ParamStore& store, uint64_t seed, real amp = 0.05) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<real> d(amp * 0.2, amp);  // bounded away from zero
  std::uniform_int_distribution<int> sign(0, 1);
  for (auto& [name, p] : store.params)
    for (auto& v : p.vec()) v += (sign(rng) ? 1.0 : -1.0) * d(rng);
}

}  // namespace oracle
