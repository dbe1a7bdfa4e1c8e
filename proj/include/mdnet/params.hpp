#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdnet/tensor.hpp"

namespace mdnet {

enum class Init { Zeros, Ones, HeNormal, TruncNormal02 };

// One learnable tensor (or buffer) as declared by the architecture trace.
struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::Zeros;
  bool buffer = false;  // running stats: saved, never optimized
};

// Named tensor registry. Ordered containers keep iteration (and therefore
// initialization, optimizer stepping and serialization) deterministic.
struct ParamStore {
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;

  Tensor& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing parameter: " + name);
    return it->second;
  }
  const Tensor& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing parameter: " + name);
    return it->second;
  }
  Tensor& buffer(const std::string& name) {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ConfigError("missing buffer: " + name);
    return it->second;
  }

  int64_t learnable_count() const {
    int64_t n = 0;
    for (const auto& [k, v] : params) n += v.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [k, v] : params) v.zero_grad();
  }

  // Deep copy (values only, fresh leaves).
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [k, v] : params) out.params[k] = v.clone_as_leaf(true);
    for (const auto& [k, v] : buffers) out.buffers[k] = v.clone_as_leaf(false);
    return out;
  }
};

inline int64_t he_fan_in(const Shape& s) {
  // conv [Co,Ci,kh,kw] -> Ci*kh*kw; linear [Ci,Co] -> Ci; depthwise [C,3,3] -> 9
  if (s.size() == 4) return s[1] * s[2] * s[3];
  if (s.size() == 3) return s[1] * s[2];
  if (s.size() == 2) return s[0];
  return std::max<int64_t>(1, numel(s));
}

// Materializes a spec list into an initialized store. Specs are filled in
// declaration order from a single seeded stream, so a given (config, seed)
// always produces the same parameters.
inline ParamStore init_params(const std::vector<ParamSpec>& specs, uint64_t seed) {
  ParamStore store;
  std::mt19937_64 rng(seed);
  for (const ParamSpec& ps : specs) {
    Tensor t(ps.shape);
    switch (ps.init) {
      case Init::Zeros:
        break;
      case Init::Ones:
        std::fill(t.vec().begin(), t.vec().end(), 1.0);
        break;
      case Init::HeNormal:
        fill_normal(t, rng, 0.0, std::sqrt(2.0 / real(he_fan_in(ps.shape))));
        break;
      case Init::TruncNormal02:
        fill_trunc_normal(t, rng, 0.02);
        break;
    }
    if (ps.buffer) {
      store.buffers.emplace(ps.name, std::move(t));
    } else {
      t.set_needs_grad(true);
      store.params.emplace(ps.name, std::move(t));
    }
  }
  return store;
}

}  // namespace mdnet
