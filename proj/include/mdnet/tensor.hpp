#pragma once

#include <algorithm>
#include <cassert>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>

#include "mdnet/common.hpp"

namespace mdnet {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff tape.
//
// Every Tensor wraps a shared Node holding its value, an optional grad buffer
// and a backward closure that scatters this node's grad into its parents.
// Ops only record a closure when grad mode is on and some parent needs grad;
// otherwise intermediates free as soon as the last Tensor handle drops.
// ---------------------------------------------------------------------------

namespace ag {

struct Node {
  Shape shape;
  std::vector<real> val;
  std::vector<real> grad;
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace ag

// RAII guard: disables tape recording in scope (inference / data paths).
struct NoGrad {
  bool prev;
  NoGrad() : prev(ag::grad_mode()) { ag::grad_mode() = false; }
  ~NoGrad() { ag::grad_mode() = prev; }
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : n_(std::make_shared<ag::Node>()) {
    n_->shape = std::move(shape);
    n_->val.assign(size_t(mdnet::numel(n_->shape)), 0.0);
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, real v) {
    Tensor t(std::move(s));
    std::fill(t.n_->val.begin(), t.n_->val.end(), v);
    return t;
  }

  static Tensor from(Shape s, std::vector<real> v) {
    Tensor t;
    t.n_ = std::make_shared<ag::Node>();
    t.n_->shape = std::move(s);
    if (int64_t(v.size()) != mdnet::numel(t.n_->shape))
      shape_fail("Tensor::from", "data size " + std::to_string(v.size()) +
                                     " != numel of " + shape_str(t.n_->shape));
    t.n_->val = std::move(v);
    return t;
  }

  static Tensor scalar(real v) { return full({1}, v); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return int(n_->shape.size()); }
  int64_t dim(int i) const { return n_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(n_->val.size()); }

  real* data() { return n_->val.data(); }
  const real* data() const { return n_->val.data(); }
  std::vector<real>& vec() { return n_->val; }
  const std::vector<real>& vec() const { return n_->val; }

  real item() const {
    if (numel() != 1) shape_fail("item", "tensor " + shape_str(shape()) + " is not scalar");
    return n_->val[0];
  }

  // flat accessors (tests, small code paths)
  real& operator[](int64_t i) { return n_->val[size_t(i)]; }
  real operator[](int64_t i) const { return n_->val[size_t(i)]; }

  // 4-d accessor for [N,C,H,W] tensors; test/helper path, not the hot loops.
  real& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    const Shape& s = n_->shape;
    return n_->val[size_t(((n * s[1] + c) * s[2] + h) * s[3] + w)];
  }
  real at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return const_cast<Tensor*>(this)->at4(n, c, h, w);
  }

  bool needs_grad() const { return n_ && n_->needs_grad; }
  void set_needs_grad(bool b) { n_->needs_grad = b; }

  const std::vector<real>& grad() const { return n_->grad; }
  std::vector<real>& grad_vec() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  std::shared_ptr<ag::Node> node() const { return n_; }

  // Runs reverse-mode accumulation from a scalar root.
  void backward() const {
    if (numel() != 1) shape_fail("backward", "root must be scalar, got " + shape_str(shape()));
    if (!n_->needs_grad) return;
    // iterative post-order topological sort
    std::vector<ag::Node*> order;
    std::unordered_set<ag::Node*> visited;
    std::vector<std::pair<ag::Node*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    visited.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        ag::Node* p = node->parents[idx].get();
        ++idx;
        if (p->needs_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      ag::Node* node = *it;
      if (node->backfn) node->backfn(*node);
    }
  }

  // Detached copy of the value (leaf, no history).
  Tensor detach() const {
    Tensor t;
    t.n_ = std::make_shared<ag::Node>();
    t.n_->shape = n_->shape;
    t.n_->val = n_->val;
    return t;
  }

  Tensor clone_as_leaf(bool needs_grad) const {
    Tensor t = detach();
    t.n_->needs_grad = needs_grad;
    return t;
  }

 private:
  std::shared_ptr<ag::Node> n_;
  friend Tensor make_op_result(Shape, std::vector<Tensor>, std::function<void(ag::Node&)>);
};

// Constructs an op output: links parents and the backward closure only when
// recording is live.
inline Tensor make_op_result(Shape shape, std::vector<Tensor> parents,
                             std::function<void(ag::Node&)> backfn) {
  Tensor out(std::move(shape));
  bool track = ag::grad_mode();
  bool any = false;
  if (track)
    for (const Tensor& p : parents)
      if (p.needs_grad()) any = true;
  if (track && any) {
    out.n_->needs_grad = true;
    out.n_->parents.reserve(parents.size());
    for (Tensor& p : parents) out.n_->parents.push_back(p.node());
    out.n_->backfn = std::move(backfn);
  }
  return out;
}

// ---------- random init helpers ----------

inline void fill_uniform(Tensor& t, std::mt19937_64& rng, real lo, real hi) {
  std::uniform_real_distribution<real> d(lo, hi);
  for (auto& v : t.vec()) v = d(rng);
}

inline void fill_normal(Tensor& t, std::mt19937_64& rng, real mean, real std) {
  std::normal_distribution<real> d(mean, std);
  for (auto& v : t.vec()) v = d(rng);
}

// Truncated normal: resample outside +/- 2 std, the usual transformer init.
inline void fill_trunc_normal(Tensor& t, std::mt19937_64& rng, real std) {
  std::normal_distribution<real> d(0.0, std);
  for (auto& v : t.vec()) {
    real x = d(rng);
    while (std::abs(x) > 2.0 * std) x = d(rng);
    v = x;
  }
}

}  // namespace mdnet
