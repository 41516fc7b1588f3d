#pragma once

// Run configuration: nested model/train/data/loss/eval sections, JSON
// (de)serialization, named presets with a `preset` inheritance key, and a
// config hash that ignores the neck window so ablation rows can prove they
// differ only by that knob.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "swindet/head.hpp"
#include "swindet/model.hpp"
#include "swindet/rng.hpp"
#include "swindet/synth.hpp"

namespace swindet {

struct TrainConfig {
  std::int64_t epochs = 15;
  std::int64_t batch_size = 8;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double grad_clip = 5.0;
  std::uint64_t seed = 0;
};

struct DataConfig {
  SceneConfig scene;
  std::string train_dir = "data/train";
  std::string val_dir = "data/val";
  std::int64_t n_train = 600;
  std::int64_t n_val = 100;
};

struct EvalConfig {
  double score_thresh = 0.3;
  std::int64_t top_k = 100;
};

struct HardNegativeConfig {
  bool enabled = false;
  double rate = 0.3;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  LossWeights loss;
  EvalConfig eval;
  HardNegativeConfig hard_negative;

  void validate() const {
    model.validate();
    data.scene.validate();
    if (train.epochs <= 0 || train.batch_size <= 0)
      throw config_error("config: epochs and batch_size must be positive");
    if (train.lr <= 0) throw config_error("config: lr must be positive");
    if (hard_negative.rate < 0 || hard_negative.rate > 1)
      throw config_error("config: hard_negative.rate must be in [0,1]");
  }
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = model_config_to_json(c.model);
  j["train"] = {{"epochs", c.train.epochs},     {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},             {"weight_decay", c.train.weight_decay},
                {"grad_clip", c.train.grad_clip}, {"seed", c.train.seed}};
  j["data"] = {{"scene",
                {{"image_size", c.data.scene.image_size},
                 {"birds_min", c.data.scene.birds_min},
                 {"birds_max", c.data.scene.birds_max},
                 {"bird_size_min", c.data.scene.bird_size_min},
                 {"bird_size_max", c.data.scene.bird_size_max},
                 {"clutter_density", c.data.scene.clutter_density},
                 {"seed", c.data.scene.seed}}},
               {"train_dir", c.data.train_dir},
               {"val_dir", c.data.val_dir},
               {"n_train", c.data.n_train},
               {"n_val", c.data.n_val}};
  j["loss"] = {{"hm_alpha", c.loss.hm_alpha},
               {"hm_gamma", c.loss.hm_gamma},
               {"wh_weight", c.loss.wh_weight},
               {"off_weight", c.loss.off_weight}};
  j["eval"] = {{"score_thresh", c.eval.score_thresh}, {"top_k", c.eval.top_k}};
  j["hard_negative"] = {{"enabled", c.hard_negative.enabled}, {"rate", c.hard_negative.rate}};
  return j;
}

namespace detail {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = RunConfig{}) {
  RunConfig c = std::move(base);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::maybe(t, "epochs", c.train.epochs);
    detail::maybe(t, "batch_size", c.train.batch_size);
    detail::maybe(t, "lr", c.train.lr);
    detail::maybe(t, "weight_decay", c.train.weight_decay);
    detail::maybe(t, "grad_clip", c.train.grad_clip);
    detail::maybe(t, "seed", c.train.seed);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("scene")) {
      const auto& s = d.at("scene");
      detail::maybe(s, "image_size", c.data.scene.image_size);
      detail::maybe(s, "birds_min", c.data.scene.birds_min);
      detail::maybe(s, "birds_max", c.data.scene.birds_max);
      detail::maybe(s, "bird_size_min", c.data.scene.bird_size_min);
      detail::maybe(s, "bird_size_max", c.data.scene.bird_size_max);
      detail::maybe(s, "clutter_density", c.data.scene.clutter_density);
      detail::maybe(s, "seed", c.data.scene.seed);
    }
    detail::maybe(d, "train_dir", c.data.train_dir);
    detail::maybe(d, "val_dir", c.data.val_dir);
    detail::maybe(d, "n_train", c.data.n_train);
    detail::maybe(d, "n_val", c.data.n_val);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::maybe(l, "hm_alpha", c.loss.hm_alpha);
    detail::maybe(l, "hm_gamma", c.loss.hm_gamma);
    detail::maybe(l, "wh_weight", c.loss.wh_weight);
    detail::maybe(l, "off_weight", c.loss.off_weight);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::maybe(e, "score_thresh", c.eval.score_thresh);
    detail::maybe(e, "top_k", c.eval.top_k);
  }
  if (j.contains("hard_negative")) {
    const auto& h = j.at("hard_negative");
    detail::maybe(h, "enabled", c.hard_negative.enabled);
    detail::maybe(h, "rate", c.hard_negative.rate);
  }
  return c;
}

// Desk preset: everything trainable on a CPU in minutes; this is the default
// RunConfig. The reference preset mirrors the published training recipe
// (Swin-S-sized backbone, window-7 backbone attention, 150 epochs at lr 5e-6)
// and is kept for documentation — it assumes pretrained weights and
// datacenter budgets, and is not expected to run at desk scale.
inline RunConfig preset_config(const std::string& name) {
  if (name == "desk") return RunConfig{};
  if (name == "paper-reference") {
    RunConfig c;
    c.model.backbone.embed_dim = 96;
    c.model.backbone.depths = {2, 2, 18, 2};
    c.model.backbone.num_heads = {3, 6, 12, 24};
    c.model.backbone.window = 7;
    c.model.neck.window = 2;
    c.train.epochs = 150;
    c.train.lr = 5e-6;
    c.data.scene.image_size = 640;
    c.data.n_train = 10000;
    c.data.n_val = 1000;
    return c;
  }
  throw config_error("unknown preset: " + name);
}

// Loads JSON, honoring an optional top-level "preset" string: the named
// preset supplies defaults and the file's own keys override them.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("config: " + path + ": " + e.what());
  }
  RunConfig base;
  if (j.contains("preset")) base = preset_config(j.at("preset").get<std::string>());
  RunConfig cfg = run_config_from_json(j, std::move(base));
  cfg.validate();
  return cfg;
}

// Hash of the canonical config JSON with the neck window removed, so an
// ablation sweep can assert its rows share every other knob.
inline std::string config_hash_excluding_neck_window(const RunConfig& c) {
  nlohmann::json j = run_config_to_json(c);
  j["model"]["neck"].erase("window");
  const std::uint64_t h = fnv1a(j.dump());
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace swindet
