#pragma once

#include <chrono>
#include <functional>

#include "mdnet/checkpoint.hpp"
#include "mdnet/loss.hpp"
#include "mdnet/optim.hpp"

namespace mdnet {

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& m) : std::runtime_error(m) {}
};

struct TrainPair {
  Tensor image;  // [3,S,S] in [0,1]
  Tensor mask;   // [1,S,S] binary
};
using TrainSet = std::vector<TrainPair>;

struct EpochRecord {
  int epoch = 0;  // 1-based
  real train_loss = 0.0;
  real val_loss = 0.0;
  std::array<real, 3> val_dsc{0, 0, 0};
  std::array<real, 3> train_dsc{0, 0, 0};
  bool has_train_dsc = false;
  double seconds = 0.0;  // wall clock; kept out of the deterministic history file
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  void validate() const {
    for (size_t i = 0; i < epochs.size(); ++i) {
      const EpochRecord& e = epochs[i];
      if (i > 0 && e.epoch != epochs[i - 1].epoch + 1)
        throw ConfigError("history: non-monotone epoch indices");
      if (!std::isfinite(e.train_loss) || !std::isfinite(e.val_loss) || !std::isfinite(e.seconds))
        throw ConfigError("history: non-finite values at epoch " + std::to_string(e.epoch));
    }
  }

  // Deterministic record (everything except wall clock).
  static json record_json(const EpochRecord& e) {
    json j{{"epoch", e.epoch},
           {"train_loss", e.train_loss},
           {"val_loss", e.val_loss},
           {"val_dsc", e.val_dsc}};
    if (e.has_train_dsc) j["train_dsc"] = e.train_dsc;
    return j;
  }
};

// Patience-based stopping on validation loss; strict improvement resets the
// counter and marks the best epoch.
struct EarlyStopper {
  int patience;
  real best = std::numeric_limits<real>::infinity();
  int best_epoch = 0;
  int counter = 0;

  explicit EarlyStopper(int patience_) : patience(patience_) {}

  bool observe(int epoch, real val_loss) {
    if (val_loss < best) {
      best = val_loss;
      best_epoch = epoch;
      counter = 0;
      return true;
    }
    ++counter;
    return false;
  }
  bool should_stop() const { return counter >= patience; }
};

struct TrainResult {
  ParamStore best_params;
  ParamStore last_params;
  TrainHistory history;
  int best_epoch = 0;
  real best_val_loss = 0.0;
  std::string stop_reason;  // early_stop | max_epochs | dsc_target
};

struct ResumeState {
  ParamStore params;
  ParamStore best_params;
  std::map<std::string, Tensor> optim_extra;
  int next_epoch = 1;
  real best_val = std::numeric_limits<real>::infinity();
  int best_epoch = 0;
  int patience_counter = 0;
};

namespace train_detail {

inline uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b * 0x9E3779B97F4A7C15ULL);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline Tensor stack_batch(const TrainSet& set, const std::vector<size_t>& order, size_t begin,
                          size_t end, bool masks, const std::vector<bool>& flip) {
  const Tensor& first = masks ? set[order[begin]].mask : set[order[begin]].image;
  const int64_t C = first.dim(0), H = first.dim(1), W = first.dim(2);
  Tensor out(Shape{int64_t(end - begin), C, H, W});
  for (size_t k = begin; k < end; ++k) {
    const Tensor& src = masks ? set[order[k]].mask : set[order[k]].image;
    real* dst = out.data() + int64_t(k - begin) * C * H * W;
    if (!flip.empty() && flip[k]) {
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            dst[(c * H + y) * W + x] = src[(c * H + y) * W + (W - 1 - x)];
    } else {
      std::copy(src.vec().begin() + 0, src.vec().end(), dst);
    }
  }
  return out;
}

struct EvalSweep {
  real loss = 0.0;
  std::array<real, 3> dsc{0, 0, 0};
};

// One inference sweep computing mean deep-supervision loss and aggregate
// per-head DSC of the thresholded predictions.
inline EvalSweep dataset_eval(const MDNet& model, ParamStore& store, const TrainSet& set,
                              const TrainConfig& tc) {
  NoGrad ng;
  std::array<int64_t, 3> tp{0, 0, 0}, fp{0, 0, 0}, fn{0, 0, 0};
  std::vector<size_t> order(set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  KahanSum total;
  for (size_t b = 0; b < set.size(); b += size_t(tc.batch_size)) {
    const size_t e = std::min(set.size(), b + size_t(tc.batch_size));
    Tensor img = stack_batch(set, order, b, e, false, {});
    Tensor tgt = stack_batch(set, order, b, e, true, {});
    SegOutputs out = model.forward(store, img, false, false);
    Tensor loss = deep_supervision_loss(out, tgt, tc.loss_weights, tc.dice_smooth);
    total.add(loss.item() * real(e - b));
    for (int h = 0; h < 3; ++h) {
      const Tensor& logits = out.head(h);
      for (int64_t i = 0; i < logits.numel(); ++i) {
        const bool p = logits[i] > 0.0;  // sigmoid(z) > 0.5  <=>  z > 0
        const bool g = tgt[i] != 0.0;
        tp[size_t(h)] += p && g;
        fp[size_t(h)] += p && !g;
        fn[size_t(h)] += !p && g;
      }
    }
  }
  EvalSweep sweep;
  sweep.loss = total.value() / real(set.size());
  for (int h = 0; h < 3; ++h) {
    const int64_t denom = 2 * tp[size_t(h)] + fp[size_t(h)] + fn[size_t(h)];
    sweep.dsc[size_t(h)] = denom == 0 ? 1.0 : 2.0 * real(tp[size_t(h)]) / real(denom);
  }
  return sweep;
}

// Sets with identical sample storage evaluate identically; lets the loop
// reuse the validation sweep for training-set metrics in overfit runs.
inline bool same_storage(const TrainSet& a, const TrainSet& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i].image.data() != b[i].image.data() || a[i].mask.data() != b[i].mask.data())
      return false;
  return true;
}

}  // namespace train_detail

// Epoch loop with seeded shuffling, deep supervision, validation-loss early
// stopping and best-checkpoint retention. Deterministic for a fixed seed.
// `on_epoch` (optional) fires after each epoch with the freshest state.
inline TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const TrainSet& train_set,
                         const TrainSet& val_set, const ResumeState* resume = nullptr,
                         const std::function<void(const EpochRecord&, const ParamStore&,
                                                  const Adam&, const EarlyStopper&)>& on_epoch = {}) {
  tc.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  if (val_set.empty()) throw ConfigError("train: empty validation set");

  MDNet model(mc);
  ParamStore store = resume ? resume->params.clone() : model.init(tc.seed);
  Adam adam(tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps);
  std::set<std::string> frozen;
  if (mc.freeze_encoder) {
    frozen.insert("encoder.");
    for (auto& [name, p] : store.params)
      if (name.rfind("encoder.", 0) == 0) p.set_needs_grad(false);
  }

  EarlyStopper stopper(tc.patience);
  TrainResult result;
  int start_epoch = 1;
  if (resume) {
    adam.import_state(resume->optim_extra);
    stopper.best = resume->best_val;
    stopper.best_epoch = resume->best_epoch;
    stopper.counter = resume->patience_counter;
    result.best_params = resume->best_params.clone();
    start_epoch = resume->next_epoch;
  }

  const bool want_dsc_stop = tc.stop_dsc_m3 > 0.0 && tc.stop_dsc_all > 0.0;
  result.stop_reason = "max_epochs";

  for (int epoch = start_epoch; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(train_detail::mix(tc.seed, uint64_t(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> flip(train_set.size(), false);
    if (tc.hflip_augment) {
      std::bernoulli_distribution coin(0.5);
      for (size_t i = 0; i < flip.size(); ++i) flip[i] = coin(rng);
    }

    KahanSum train_loss_sum;
    int batch_index = 0;
    for (size_t b = 0; b < train_set.size(); b += size_t(tc.batch_size), ++batch_index) {
      const size_t e = std::min(train_set.size(), b + size_t(tc.batch_size));
      Tensor img = train_detail::stack_batch(train_set, order, b, e, false, flip);
      Tensor tgt = train_detail::stack_batch(train_set, order, b, e, true, flip);
      SegOutputs out = model.forward(store, img, true, true);
      Tensor loss = deep_supervision_loss(out, tgt, tc.loss_weights, tc.dice_smooth);
      const real lv = loss.item();
      if (!std::isfinite(lv))
        throw TrainError("non-finite training loss at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batch_index));
      store.zero_grads();
      loss.backward();
      adam.step(store, frozen);
      train_loss_sum.add(lv * real(e - b));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss_sum.value() / real(train_set.size());
    const train_detail::EvalSweep vs = train_detail::dataset_eval(model, store, val_set, tc);
    rec.val_loss = vs.loss;
    rec.val_dsc = vs.dsc;
    if (!std::isfinite(rec.val_loss))
      throw TrainError("non-finite validation loss at epoch " + std::to_string(epoch));
    if (want_dsc_stop) {
      rec.train_dsc = train_detail::same_storage(train_set, val_set)
                          ? vs.dsc
                          : train_detail::dataset_eval(model, store, train_set, tc).dsc;
      rec.has_train_dsc = true;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);

    if (stopper.observe(epoch, rec.val_loss)) result.best_params = store.clone();
    if (on_epoch) on_epoch(rec, store, adam, stopper);

    if (want_dsc_stop && rec.train_dsc[2] >= tc.stop_dsc_m3 &&
        rec.train_dsc[0] >= tc.stop_dsc_all && rec.train_dsc[1] >= tc.stop_dsc_all &&
        rec.train_dsc[2] >= tc.stop_dsc_all) {
      result.stop_reason = "dsc_target";
      break;
    }
    if (stopper.should_stop()) {
      result.stop_reason = "early_stop";
      break;
    }
  }

  result.last_params = std::move(store);
  if (result.best_params.params.empty()) result.best_params = result.last_params.clone();
  result.best_epoch = stopper.best_epoch;
  result.best_val_loss = stopper.best;
  result.history.validate();
  return result;
}

}  // namespace mdnet
