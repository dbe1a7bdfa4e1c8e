#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mdnet/train.hpp"
#include "oracle_utils.hpp"

using namespace mdnet;
using oracle::gradcheck_param;
using oracle::random_tensor;
using oracle::sample_indices;

namespace {

namespace fs = std::filesystem;

fs::path tmp_dir() {
  fs::path p = fs::temp_directory_path() / "mdnet_train_test";
  fs::create_directories(p);
  return p;
}

// micro config: full architecture, minimal widths, fast at 32x32
ModelConfig micro_config() {
  ModelConfig c = ModelConfig::tiny();
  c.preset = "tiny";
  c.encoder.widths = {4, 8, 12, 16};
  c.encoder.heads = {1, 2, 3, 4};
  c.encoder.mlp_ratio = 1.0;
  return c;
}

TrainSet random_set(int n, int size, uint64_t seed) {
  TrainSet set;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<real> d(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    TrainPair p{Tensor(Shape{3, size, size}), Tensor(Shape{1, size, size})};
    for (auto& v : p.image.vec()) v = d(rng);
    // centered square target
    for (int y = size / 4; y < 3 * size / 4; ++y)
      for (int x = size / 4; x < 3 * size / 4; ++x) p.mask[y * size + x] = 1.0;
    set.push_back(std::move(p));
  }
  return set;
}

}  // namespace

TEST_CASE("bce_dice_loss: closed-form fixtures") {
  // saturated correct predictions
  Tensor tgt(Shape{1, 4, 4});
  for (int i = 0; i < 8; ++i) tgt[i] = 1.0;
  Tensor logits(Shape{1, 4, 4});
  for (int i = 0; i < 16; ++i) logits[i] = tgt[i] == 1.0 ? 40.0 : -40.0;
  CHECK(bce_dice_loss(logits, tgt).item() < 1e-6);

  // logits all zero, half the pixels foreground: BCE term is ln 2
  Tensor zeros = Tensor::zeros({1, 4, 4});
  Tensor bce = ops::bce_with_logits_mean(zeros, tgt);
  CHECK(bce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // total = ln2 + dice with p = 0.5 everywhere
  const real G = 8.0, P = 8.0;  // sum target, sum sigmoid(0)*16
  const real dice = 1.0 - (2.0 * 0.5 * G + 1.0) / (P + G + 1.0);
  CHECK(bce_dice_loss(zeros, tgt).item() == doctest::Approx(std::log(2.0) + dice).epsilon(1e-12));

  // empty target with confident-negative logits: smoothing keeps dice at 0
  Tensor empty = Tensor::zeros({1, 4, 4});
  Tensor neg = Tensor::full({1, 4, 4}, -40.0);
  CHECK(bce_dice_loss(neg, empty).item() < 1e-6);

  CHECK_THROWS_AS(bce_dice_loss(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 4, 4})), ShapeError);
  CHECK_THROWS_AS(bce_dice_loss(zeros, Tensor::full({1, 4, 4}, 0.5)), ConfigError);
}

TEST_CASE("bce_dice_loss is nonnegative and zero only at a perfect match") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<real> d(-4.0, 4.0);
  std::bernoulli_distribution coin(0.4);
  for (int t = 0; t < 50; ++t) {
    Tensor z(Shape{1, 6, 6});
    Tensor g(Shape{1, 6, 6});
    for (auto& v : z.vec()) v = d(rng);
    for (auto& v : g.vec()) v = coin(rng) ? 1.0 : 0.0;
    const real l = bce_dice_loss(z, g).item();
    CHECK(l >= 0.0);
    CHECK(std::isfinite(l));
    CHECK(l > 1e-4);  // imperfect predictions never reach zero
  }
}

TEST_CASE("gradcheck: bce_dice_loss on an 8x8 mask") {
  Tensor logits = random_tensor({1, 8, 8}, 5, -2.0, 2.0);
  logits.set_needs_grad(true);
  Tensor tgt(Shape{1, 8, 8});
  std::mt19937_64 rng(6);
  std::bernoulli_distribution coin(0.35);
  for (auto& v : tgt.vec()) v = coin(rng) ? 1.0 : 0.0;
  auto f = [&]() { return bce_dice_loss(logits, tgt); };
  CHECK(gradcheck_param(f, logits, sample_indices(logits.numel(), 32, 7)) < 1e-3);
}

TEST_CASE("deep supervision: degenerate weights, linearity, hand-summed oracle") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<real> d(-2.0, 2.0);
  SegOutputs out;
  out.m1 = random_tensor({1, 1, 8, 8}, 9, -2.0, 2.0);
  out.m2 = random_tensor({1, 1, 8, 8}, 10, -2.0, 2.0);
  out.m3 = random_tensor({1, 1, 8, 8}, 11, -2.0, 2.0);
  Tensor tgt(Shape{1, 1, 8, 8});
  std::bernoulli_distribution coin(0.5);
  for (auto& v : tgt.vec()) v = coin(rng) ? 1.0 : 0.0;

  // weights [0,0,1] reduce to the single-head loss
  CHECK(deep_supervision_loss(out, tgt, {0, 0, 1}).item() ==
        doctest::Approx(bce_dice_loss(out.m3, tgt).item()).epsilon(1e-14));

  // identical heads at default weights: three times the single-head loss
  SegOutputs same;
  same.m1 = same.m2 = same.m3 = out.m1;
  CHECK(deep_supervision_loss(same, tgt, {1, 1, 1}).item() ==
        doctest::Approx(3.0 * bce_dice_loss(out.m1, tgt).item()).epsilon(1e-12));

  // hand-summed oracle with distinct weights
  const real expect = 0.3 * bce_dice_loss(out.m1, tgt).item() +
                      1.7 * bce_dice_loss(out.m2, tgt).item() +
                      0.9 * bce_dice_loss(out.m3, tgt).item();
  CHECK(deep_supervision_loss(out, tgt, {0.3, 1.7, 0.9}).item() ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("one small Adam step does not increase the sample loss (statistical)") {
  int non_increase = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    // tiny conv "model": logits = conv(x), loss = bce_dice
    TraceState ts;
    TraceCtx tc{&ts, ""};
    TraceBackend::conv2d(tc.sub("c"), ShapeT{{1, 2, 6, 6}}, 1, 3, 1, 1, 1);
    ParamStore store = init_params(ts.specs, 100 + uint64_t(t));
    Tensor x = random_tensor({1, 2, 6, 6}, 200 + uint64_t(t));
    Tensor tgt(Shape{1, 1, 6, 6});
    std::mt19937_64 rng(300 + uint64_t(t));
    std::bernoulli_distribution coin(0.4);
    for (auto& v : tgt.vec()) v = coin(rng) ? 1.0 : 0.0;

    auto loss_fn = [&]() {
      Tensor z = ops::conv2d(x, store.param("c.weight"), store.param("c.bias"), 1, 1, 1);
      return bce_dice_loss(z, tgt);
    };
    const real before = loss_fn().item();
    store.zero_grads();
    loss_fn().backward();
    Adam adam(1e-6);
    adam.step(store);
    const real after = loss_fn().item();
    if (after <= before + 1e-12) ++non_increase;
  }
  CHECK(non_increase >= 95);
}

TEST_CASE("early stopping semantics") {
  // the printed sequence: patience 2, losses [1.0, 0.9, 0.95, 0.96]
  EarlyStopper st(2);
  CHECK(st.observe(1, 1.0));
  CHECK_FALSE(st.should_stop());
  CHECK(st.observe(2, 0.9));
  CHECK_FALSE(st.should_stop());
  CHECK_FALSE(st.observe(3, 0.95));
  CHECK_FALSE(st.should_stop());
  CHECK_FALSE(st.observe(4, 0.96));
  CHECK(st.should_stop());  // stops after epoch 4
  CHECK(st.best_epoch == 2);
  CHECK(st.best == 0.9);

  // property: the retained best never exceeds any observed loss
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<real> d(0.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    EarlyStopper s2(3);
    real lowest = std::numeric_limits<real>::infinity();
    for (int e = 1; e <= 20 && !s2.should_stop(); ++e) {
      const real v = d(rng);
      lowest = std::min(lowest, v);
      s2.observe(e, v);
      CHECK(s2.best <= lowest + 1e-15);
      CHECK(s2.best == lowest);
    }
  }
}

TEST_CASE("checkpoint: bitwise round trip, manifest, corruption and import errors") {
  const fs::path dir = tmp_dir();
  ModelConfig cfg = micro_config();
  MDNet model(cfg);
  ParamStore store = model.init(13);
  json manifest{{"preset", "tiny"}, {"format", "test"}};
  const std::string path = (dir / "roundtrip.ckpt").string();
  save_checkpoint(path, store, manifest);

  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.manifest.at("preset") == "tiny");
  CHECK(ck.params.size() == store.params.size());
  for (const auto& [name, t] : store.params) {
    REQUIRE(ck.params.count(name));
    const Tensor& u = ck.params.at(name);
    REQUIRE(u.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) CHECK(u[i] == t[i]);
  }

  // import into a fresh architecture-shaped store
  ParamStore fresh = model.init(999);
  import_weights(fresh, ck);
  for (const auto& [name, t] : store.params)
    for (int64_t i = 0; i < t.numel(); ++i) CHECK(fresh.param(name)[i] == t[i]);

  // truncated file -> corrupt-archive error
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out((dir / "trunc.ckpt").string(), std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "trunc.ckpt").string()), IoError);

  // not an archive at all
  {
    std::ofstream out((dir / "junk.ckpt").string(), std::ios::binary);
    out << "definitely not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "junk.ckpt").string()), IoError);

  // archive missing one tensor -> import error naming it
  Checkpoint missing = ck;
  const std::string victim = ck.params.begin()->first;
  missing.params.erase(victim);
  try {
    import_weights(fresh, missing);
    FAIL("expected ImportError");
  } catch (const ImportError& e) {
    CHECK(std::string(e.what()).find(victim) != std::string::npos);
    CHECK(std::string(e.what()).find("missing") != std::string::npos);
  }

  // transposed kernel -> shape-mismatch error naming the tensor
  Checkpoint transposed = ck;
  {
    Tensor& w = transposed.params.at("head3.conv.weight");  // [1,C,1,1]
    Shape s = w.shape();
    std::swap(s[0], s[1]);
    transposed.params.at("head3.conv.weight") = Tensor(Shape{s});
  }
  try {
    import_weights(fresh, transposed);
    FAIL("expected ImportError");
  } catch (const ImportError& e) {
    CHECK(std::string(e.what()).find("head3.conv.weight") != std::string::npos);
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }

  // unknown extra tensor -> import error as well
  Checkpoint extra = ck;
  extra.params["not.a.real.tensor"] = Tensor::zeros({3});
  CHECK_THROWS_AS(import_weights(fresh, extra), ImportError);
}

TEST_CASE("full-preset checkpoint round trip is bitwise") {
  const fs::path dir = tmp_dir();
  MDNet model(ModelConfig::full());
  ParamStore store = model.init(17);
  const std::string path = (dir / "full.ckpt").string();
  save_checkpoint(path, store, json{{"preset", "full"}});
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.manifest.at("preset") == "full");
  int64_t checked = 0;
  for (const auto& [name, t] : store.params) {
    const Tensor& u = ck.params.at(name);
    for (int64_t i = 0; i < t.numel(); i += 97) {  // stride through, bitwise
      CHECK(u[i] == t[i]);
      ++checked;
    }
  }
  CHECK(checked > 500000);
  fs::remove(path);
}

TEST_CASE("train: determinism and history structure on a micro problem") {
  ModelConfig mc = micro_config();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_epochs = 3;
  tc.patience = 2;
  tc.seed = 42;
  tc.learning_rate = 1e-3;
  TrainSet train_set = random_set(4, 32, 50);
  TrainSet val_set = random_set(2, 32, 51);

  TrainResult a = train(mc, tc, train_set, val_set);
  TrainResult b = train(mc, tc, train_set, val_set);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (size_t i = 0; i < a.history.epochs.size(); ++i) {
    CHECK(TrainHistory::record_json(a.history.epochs[i]) ==
          TrainHistory::record_json(b.history.epochs[i]));
  }
  CHECK(a.best_epoch >= 1);
  CHECK(a.stop_reason == "max_epochs");
  a.history.validate();

  // best params reproduce the recorded best validation loss
  real best_recorded = std::numeric_limits<real>::infinity();
  for (const auto& e : a.history.epochs) best_recorded = std::min(best_recorded, e.val_loss);
  CHECK(a.best_val_loss == best_recorded);

  // different seed changes the trajectory
  TrainConfig tc2 = tc;
  tc2.seed = 43;
  TrainResult c = train(mc, tc2, train_set, val_set);
  CHECK(c.history.epochs[0].train_loss != a.history.epochs[0].train_loss);
}

TEST_CASE("train: resume continues the epoch sequence deterministically") {
  ModelConfig mc = micro_config();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_epochs = 4;
  tc.patience = 3;
  tc.seed = 77;
  tc.learning_rate = 1e-3;
  TrainSet train_set = random_set(4, 32, 52);
  TrainSet val_set = random_set(2, 32, 53);

  TrainResult full = train(mc, tc, train_set, val_set);

  // run two epochs, capture state, resume for the remaining two
  TrainConfig tc2 = tc;
  tc2.max_epochs = 2;
  tc2.patience = 1;
  ResumeState rs;
  {
    Adam const* adam_out = nullptr;
    ParamStore snap;
    EarlyStopper snap_stop(tc.patience);
    TrainResult half = train(mc, tc2, train_set, val_set, nullptr,
                             [&](const EpochRecord&, const ParamStore& cur, const Adam& adam,
                                 const EarlyStopper& st) {
                               snap = cur.clone();
                               snap_stop = st;
                               adam_out = &adam;
                               rs.optim_extra = adam.export_state();
                             });
    (void)adam_out;
    rs.params = std::move(snap);
    rs.best_params = half.best_params.clone();
    rs.next_epoch = 3;
    rs.best_val = snap_stop.best;
    rs.best_epoch = snap_stop.best_epoch;
    rs.patience_counter = snap_stop.counter;
  }
  TrainResult resumed = train(mc, tc, train_set, val_set, &rs);
  REQUIRE(resumed.history.epochs.size() == 2);
  CHECK(resumed.history.epochs[0].epoch == 3);
  CHECK(TrainHistory::record_json(resumed.history.epochs[0]).at("train_loss") ==
        TrainHistory::record_json(full.history.epochs[2]).at("train_loss"));
  CHECK(TrainHistory::record_json(resumed.history.epochs[1]).at("val_loss") ==
        TrainHistory::record_json(full.history.epochs[3]).at("val_loss"));
}

TEST_CASE("freeze_encoder: encoder parameters stay at their initial values") {
  ModelConfig mc = micro_config();
  mc.freeze_encoder = true;
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_epochs = 2;
  tc.patience = 1;
  tc.seed = 3;
  tc.learning_rate = 1e-2;
  TrainSet set = random_set(2, 32, 60);
  TrainResult r = train(mc, tc, set, set);
  ParamStore init = MDNet(mc).init(tc.seed);
  bool encoder_same = true, decoder_moved = false;
  for (const auto& [name, p] : r.last_params.params) {
    const Tensor& q = init.param(name);
    bool same = true;
    for (int64_t i = 0; i < p.numel(); ++i) same &= p[i] == q[i];
    if (name.rfind("encoder.", 0) == 0)
      encoder_same &= same;
    else
      decoder_moved |= !same;
  }
  CHECK(encoder_same);
  CHECK(decoder_moved);
}

TEST_CASE("hflip augmentation stays deterministic under the seed") {
  ModelConfig mc = micro_config();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_epochs = 2;
  tc.patience = 1;
  tc.seed = 4;
  tc.hflip_augment = true;
  TrainSet set = random_set(3, 32, 61);
  TrainResult a = train(mc, tc, set, set);
  TrainResult b = train(mc, tc, set, set);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (size_t i = 0; i < a.history.epochs.size(); ++i)
    CHECK(a.history.epochs[i].train_loss == b.history.epochs[i].train_loss);
  // flipping changes the batches relative to the unaugmented run
  TrainConfig tc2 = tc;
  tc2.hflip_augment = false;
  TrainResult c = train(mc, tc2, set, set);
  CHECK(c.history.epochs[0].train_loss != a.history.epochs[0].train_loss);
}

TEST_CASE("non-finite loss aborts with epoch context") {
  ModelConfig mc = micro_config();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_epochs = 2;
  tc.patience = 1;
  tc.seed = 5;
  TrainSet set = random_set(2, 32, 62);
  ResumeState rs;
  rs.params = MDNet(mc).init(tc.seed);
  rs.best_params = rs.params.clone();
  rs.params.param("head3.conv.bias")[0] = std::nan("");
  try {
    train(mc, tc, set, set, &rs);
    FAIL("expected TrainError");
  } catch (const TrainError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.patience = 600;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  TrainConfig tc2;
  tc2.loss_weights = {0, 0, 0};
  CHECK_THROWS_AS(tc2.validate(), ConfigError);
  TrainConfig tc3;
  tc3.batch_size = 0;
  CHECK_THROWS_AS(tc3.validate(), ConfigError);
  ModelConfig mc = micro_config();
  TrainConfig ok;
  CHECK_THROWS_AS(train(mc, ok, {}, random_set(1, 32, 1)), ConfigError);
  CHECK_THROWS_AS(train(mc, ok, random_set(1, 32, 1), {}), ConfigError);
}
