#pragma once

#include <array>
#include <string>

#include <json.hpp>

#include "mdnet/common.hpp"

namespace mdnet {

using json = nlohmann::json;

// ---------- encoder ----------

struct EncoderConfig {
  std::array<int, 4> widths{64, 128, 320, 512};
  std::array<int, 4> depths{3, 4, 6, 3};
  std::array<int, 4> heads{1, 2, 5, 8};
  std::array<int, 4> sr{8, 4, 2, 1};  // key/value spatial reduction per stage
  real mlp_ratio = 4.0;
  // patch strides are fixed at [4,2,2,2]; overall output strides [4,8,16,32]

  void validate() const {
    for (int i = 0; i < 4; ++i) {
      if (widths[size_t(i)] < 1 || depths[size_t(i)] < 1 || heads[size_t(i)] < 1 ||
          sr[size_t(i)] < 1)
        throw ConfigError("encoder: stage " + std::to_string(i + 1) + " has non-positive field");
      if (widths[size_t(i)] % heads[size_t(i)] != 0)
        throw ConfigError("encoder: width " + std::to_string(widths[size_t(i)]) +
                          " not divisible by head count " + std::to_string(heads[size_t(i)]));
    }
    if (mlp_ratio <= 0.0) throw ConfigError("encoder: mlp_ratio must be positive");
  }
};

// ---------- model ----------

struct ModelConfig {
  std::string preset = "full";
  EncoderConfig encoder;
  // Conv-BN-ReLU layers per unnumbered "series" in the feature-fusion cascade.
  int series_len = 1;
  std::string ma_bg_add = "fg";        // mask added in the background branch: fg | bg
  std::string msfed_reuse = "pre_dc";  // lower-scale features reused: pre_dc | post_dc
  int cbam_reduction = 16;
  bool freeze_encoder = false;

  static ModelConfig full() { return ModelConfig{}; }

  static ModelConfig tiny() {
    ModelConfig c;
    c.preset = "tiny";
    c.encoder.widths = {8, 16, 24, 32};
    c.encoder.depths = {1, 1, 1, 1};
    c.encoder.heads = {1, 2, 3, 4};
    c.encoder.sr = {8, 4, 2, 1};
    c.encoder.mlp_ratio = 2.0;
    c.cbam_reduction = 4;
    return c;
  }

  static ModelConfig from_preset(const std::string& name) {
    if (name == "full") return full();
    if (name == "tiny") return tiny();
    throw ConfigError("unknown preset '" + name + "' (expected full or tiny)");
  }

  int width(int stage) const { return encoder.widths[size_t(stage - 1)]; }  // stage in 1..4

  void validate() const {
    encoder.validate();
    if (series_len < 1) throw ConfigError("model: series_len must be >= 1");
    if (ma_bg_add != "fg" && ma_bg_add != "bg")
      throw ConfigError("model: ma_bg_add must be fg or bg, got '" + ma_bg_add + "'");
    if (msfed_reuse != "pre_dc" && msfed_reuse != "post_dc")
      throw ConfigError("model: msfed_reuse must be pre_dc or post_dc, got '" + msfed_reuse + "'");
    if (cbam_reduction < 1) throw ConfigError("model: cbam_reduction must be >= 1");
  }
};

// ---------- training ----------

struct TrainConfig {
  int batch_size = 16;
  real learning_rate = 1e-4;
  int max_epochs = 500;
  int patience = 50;
  real beta1 = 0.9;
  real beta2 = 0.999;
  real adam_eps = 1e-8;
  uint64_t seed = 0;
  std::array<real, 3> loss_weights{1.0, 1.0, 1.0};
  real dice_smooth = 1.0;
  bool hflip_augment = false;
  // Optional targets on the training-set DSC: when both are positive the loop
  // stops as soon as head 3 reaches stop_dsc_m3 and every head reaches
  // stop_dsc_all. Disabled (0) by default.
  real stop_dsc_m3 = 0.0;
  real stop_dsc_all = 0.0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (patience < 1 || patience >= max_epochs)
      throw ConfigError("train: need 1 <= patience < max_epochs");
    if (learning_rate <= 0.0) throw ConfigError("train: learning_rate must be positive");
    real wsum = 0.0;
    for (real w : loss_weights) {
      if (w < 0.0) throw ConfigError("train: loss_weights must be >= 0");
      wsum += w;
    }
    if (wsum == 0.0) throw ConfigError("train: loss_weights must not all be zero");
    if (dice_smooth < 0.0) throw ConfigError("train: dice_smooth must be >= 0");
  }
};

// ---------- preprocessing ----------

struct PreprocessConfig {
  real window_lo = -200.0;  // Hounsfield soft-tissue window
  real window_hi = 250.0;
  int out_size = 512;
  bool foreground_only = false;

  void validate() const {
    if (window_lo >= window_hi)
      throw ConfigError("preprocess: degenerate HU window [" + std::to_string(window_lo) + ", " +
                        std::to_string(window_hi) + "]");
    if (out_size < 32 || out_size % 32 != 0)
      throw ConfigError("preprocess: out_size must be a positive multiple of 32");
  }
};

// ---------- JSON round trip ----------

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) ok = true;
    if (!ok) throw ConfigError("unknown config key '" + where + it.key() + "'");
  }
}

template <class T, size_t N>
void get_array(const json& j, const char* key, std::array<T, N>& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != N)
    throw ConfigError(std::string("config key '") + key + "' must be an array of " +
                      std::to_string(N));
  for (size_t i = 0; i < N; ++i) out[i] = a[i].get<T>();
}

}  // namespace detail

inline json to_json(const EncoderConfig& c) {
  return json{{"widths", c.widths},
              {"depths", c.depths},
              {"heads", c.heads},
              {"sr", c.sr},
              {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json_into(const json& j, EncoderConfig& c) {
  detail::reject_unknown(j, {"widths", "depths", "heads", "sr", "mlp_ratio"}, "model.encoder.");
  detail::get_array(j, "widths", c.widths);
  detail::get_array(j, "depths", c.depths);
  detail::get_array(j, "heads", c.heads);
  detail::get_array(j, "sr", c.sr);
  if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio").get<real>();
}

inline json to_json(const ModelConfig& c) {
  return json{{"preset", c.preset},
              {"encoder", to_json(c.encoder)},
              {"series_len", c.series_len},
              {"ma_bg_add", c.ma_bg_add},
              {"msfed_reuse", c.msfed_reuse},
              {"cbam_reduction", c.cbam_reduction},
              {"freeze_encoder", c.freeze_encoder}};
}

inline void from_json_into(const json& j, ModelConfig& c) {
  detail::reject_unknown(j,
                         {"preset", "encoder", "series_len", "ma_bg_add", "msfed_reuse",
                          "cbam_reduction", "freeze_encoder"},
                         "model.");
  if (j.contains("preset")) c = ModelConfig::from_preset(j.at("preset").get<std::string>());
  if (j.contains("encoder")) from_json_into(j.at("encoder"), c.encoder);
  if (j.contains("series_len")) c.series_len = j.at("series_len").get<int>();
  if (j.contains("ma_bg_add")) c.ma_bg_add = j.at("ma_bg_add").get<std::string>();
  if (j.contains("msfed_reuse")) c.msfed_reuse = j.at("msfed_reuse").get<std::string>();
  if (j.contains("cbam_reduction")) c.cbam_reduction = j.at("cbam_reduction").get<int>();
  if (j.contains("freeze_encoder")) c.freeze_encoder = j.at("freeze_encoder").get<bool>();
}

inline json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"seed", c.seed},
              {"loss_weights", c.loss_weights},
              {"dice_smooth", c.dice_smooth},
              {"hflip_augment", c.hflip_augment},
              {"stop_dsc_m3", c.stop_dsc_m3},
              {"stop_dsc_all", c.stop_dsc_all}};
}

inline void from_json_into(const json& j, TrainConfig& c) {
  detail::reject_unknown(j,
                         {"batch_size", "learning_rate", "max_epochs", "patience", "beta1",
                          "beta2", "adam_eps", "seed", "loss_weights", "dice_smooth",
                          "hflip_augment", "stop_dsc_m3", "stop_dsc_all"},
                         "train.");
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<real>();
  if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<int>();
  if (j.contains("patience")) c.patience = j.at("patience").get<int>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<real>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<real>();
  if (j.contains("adam_eps")) c.adam_eps = j.at("adam_eps").get<real>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  detail::get_array(j, "loss_weights", c.loss_weights);
  if (j.contains("dice_smooth")) c.dice_smooth = j.at("dice_smooth").get<real>();
  if (j.contains("hflip_augment")) c.hflip_augment = j.at("hflip_augment").get<bool>();
  if (j.contains("stop_dsc_m3")) c.stop_dsc_m3 = j.at("stop_dsc_m3").get<real>();
  if (j.contains("stop_dsc_all")) c.stop_dsc_all = j.at("stop_dsc_all").get<real>();
}

inline json to_json(const PreprocessConfig& c) {
  return json{{"window_lo", c.window_lo},
              {"window_hi", c.window_hi},
              {"out_size", c.out_size},
              {"foreground_only", c.foreground_only}};
}

inline void from_json_into(const json& j, PreprocessConfig& c) {
  detail::reject_unknown(j, {"window_lo", "window_hi", "out_size", "foreground_only"},
                         "preprocess.");
  if (j.contains("window_lo")) c.window_lo = j.at("window_lo").get<real>();
  if (j.contains("window_hi")) c.window_hi = j.at("window_hi").get<real>();
  if (j.contains("out_size")) c.out_size = j.at("out_size").get<int>();
  if (j.contains("foreground_only")) c.foreground_only = j.at("foreground_only").get<bool>();
}

// Merged view used by the CLI: defaults < config file < --set overrides.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PreprocessConfig preprocess;

  json to_json_doc() const {
    return json{{"model", to_json(model)},
                {"train", to_json(train)},
                {"preprocess", to_json(preprocess)}};
  }

  void apply_json(const json& j) {
    detail::reject_unknown(j, {"model", "train", "preprocess"}, "");
    if (j.contains("model")) from_json_into(j.at("model"), model);
    if (j.contains("train")) from_json_into(j.at("train"), train);
    if (j.contains("preprocess")) from_json_into(j.at("preprocess"), preprocess);
  }

  // "train.learning_rate=0.001" style dotted-path override.
  void apply_override(const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + kv + "' is not of the form path.key=value");
    std::string path = kv.substr(0, eq);
    std::string value = kv.substr(eq + 1);
    json leaf;
    try {
      leaf = json::parse(value);
    } catch (...) {
      leaf = value;  // unquoted strings
    }
    json doc = json::object();
    json* cur = &doc;
    size_t start = 0;
    for (;;) {
      size_t dot = path.find('.', start);
      std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
      if (key.empty()) throw ConfigError("override '" + kv + "' has an empty path segment");
      if (dot == std::string::npos) {
        (*cur)[key] = leaf;
        break;
      }
      (*cur)[key] = json::object();
      cur = &(*cur)[key];
      start = dot + 1;
    }
    apply_json(doc);
  }

  void validate() const {
    model.validate();
    train.validate();
    preprocess.validate();
  }
};

}  // namespace mdnet
