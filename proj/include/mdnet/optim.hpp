#pragma once

#include <set>

#include "mdnet/params.hpp"

namespace mdnet {

// Adaptive-moment optimizer with bias correction. Parameters are visited in
// registry (name) order; state tensors are exposed for checkpoint/resume.
class Adam {
 public:
  Adam(real lr, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& store, const std::set<std::string>& skip_prefixes = {}) {
    ++t_;
    const real bc1 = 1.0 - std::pow(b1_, real(t_));
    const real bc2 = 1.0 - std::pow(b2_, real(t_));
    for (auto& [name, p] : store.params) {
      if (skipped(name, skip_prefixes)) continue;
      auto& st = state_[name];
      const size_t n = size_t(p.numel());
      if (st.m.size() != n) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
      }
      const std::vector<real>& g = p.grad();
      if (g.empty()) continue;
      real* pv = p.data();
      for (size_t i = 0; i < n; ++i) {
        st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g[i];
        st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g[i] * g[i];
        const real mhat = st.m[i] / bc1;
        const real vhat = st.v[i] / bc2;
        pv[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int64_t step_count() const { return t_; }

  // State round-trip for resumable training.
  std::map<std::string, Tensor> export_state() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, st] : state_) {
      out["optim.m." + name] = Tensor::from({int64_t(st.m.size())}, st.m);
      out["optim.v." + name] = Tensor::from({int64_t(st.v.size())}, st.v);
    }
    out["optim.step"] = Tensor::scalar(real(t_));
    return out;
  }

  void import_state(const std::map<std::string, Tensor>& extra) {
    state_.clear();
    t_ = 0;
    for (const auto& [key, tensor] : extra) {
      if (key == "optim.step") {
        t_ = int64_t(tensor.vec()[0]);
      } else if (key.rfind("optim.m.", 0) == 0) {
        state_[key.substr(8)].m = tensor.vec();
      } else if (key.rfind("optim.v.", 0) == 0) {
        state_[key.substr(8)].v = tensor.vec();
      }
    }
  }

 private:
  static bool skipped(const std::string& name, const std::set<std::string>& prefixes) {
    for (const auto& pre : prefixes)
      if (name.rfind(pre, 0) == 0) return true;
    return false;
  }

  struct State {
    std::vector<real> m, v;
  };
  std::map<std::string, State> state_;
  real lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

}  // namespace mdnet
