#pragma once

// The full detector: backbone pyramid -> neck ladder -> center-point head,
// with a flat named-parameter registry and checkpoint persistence.

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "swindet/backbone.hpp"
#include "swindet/checkpoint.hpp"
#include "swindet/head.hpp"
#include "swindet/neck.hpp"

namespace swindet {

struct ModelConfig {
  BackboneConfig backbone;
  NeckConfig neck;

  void validate() const {
    backbone.validate();
    neck.validate();
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {{"backbone",
           {{"embed_dim", cfg.backbone.embed_dim},
            {"depths", cfg.backbone.depths},
            {"num_heads", cfg.backbone.num_heads},
            {"window", cfg.backbone.window},
            {"use_rel_bias", cfg.backbone.use_rel_bias},
            {"zero_residual", cfg.backbone.zero_residual}}},
          {"neck",
           {{"window", cfg.neck.window},
            {"blocks_per_stage", cfg.neck.blocks_per_stage},
            {"use_rel_bias", cfg.neck.use_rel_bias}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    if (b.contains("embed_dim")) b.at("embed_dim").get_to(cfg.backbone.embed_dim);
    if (b.contains("depths")) b.at("depths").get_to(cfg.backbone.depths);
    if (b.contains("num_heads")) b.at("num_heads").get_to(cfg.backbone.num_heads);
    if (b.contains("window")) b.at("window").get_to(cfg.backbone.window);
    if (b.contains("use_rel_bias")) b.at("use_rel_bias").get_to(cfg.backbone.use_rel_bias);
    if (b.contains("zero_residual")) b.at("zero_residual").get_to(cfg.backbone.zero_residual);
  }
  if (j.contains("neck")) {
    const auto& n = j.at("neck");
    if (n.contains("window")) n.at("window").get_to(cfg.neck.window);
    if (n.contains("blocks_per_stage")) n.at("blocks_per_stage").get_to(cfg.neck.blocks_per_stage);
    if (n.contains("use_rel_bias")) n.at("use_rel_bias").get_to(cfg.neck.use_rel_bias);
  }
  return cfg;
}

template <typename T>
struct Detector {
  ModelConfig cfg;
  BackboneParams<T> backbone;
  NeckParams<T> neck;
  HeadParams<T> head;

  static Detector init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Detector d;
    d.cfg = cfg;
    Rng rng = Rng::stream(seed, "model-init");
    d.backbone = BackboneParams<T>::init(cfg.backbone, rng);
    d.neck = NeckParams<T>::init(cfg.backbone.embed_dim, cfg.neck, rng);
    d.head = HeadParams<T>::init(cfg.backbone.embed_dim, rng);
    return d;
  }

  // img: [3,H,W] in [0,1], H and W divisible by 32.
  HeadOut<T> forward(const Tensor<T>& img) const {
    PyramidFeatures<T> feats = backbone_forward(img, backbone);
    Tensor<T> f = neck_forward(feats, neck);           // [Hf,Wf,D] tokens
    return head_forward(permute(f, {2, 0, 1}), head);  // head wants [D,Hf,Wf]
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    backbone.for_each_param(fn);
    neck.for_each_param(fn);
    head.for_each_param("head", fn);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for_each_param([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for_each_param([&](const std::string&, Tensor<T>& t) { n += t.size(); });
    return n;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }

  // Shares parameter values with this detector but gives the copy private
  // gradient buffers, for read-only parallel forward passes.
  Detector replicate() {
    Detector copy = *this;
    copy.for_each_param([](const std::string&, Tensor<T>& t) { t = t.alias(t.requires_grad()); });
    return copy;
  }

  void save_into(Checkpoint& ckpt) {
    for_each_param([&](const std::string& n, Tensor<T>& t) {
      ckpt.put(n, t.shape(), t.value());
    });
    ckpt.meta["model_config"] = model_config_to_json(cfg);
  }

  void save_file(const std::string& path) {
    Checkpoint ckpt;
    save_into(ckpt);
    ckpt.save(path);
  }

  static Detector load_from(const Checkpoint& ckpt, std::uint64_t seed = 0) {
    if (!ckpt.meta.contains("model_config"))
      throw io_error("checkpoint is missing model_config metadata");
    Detector d = init(model_config_from_json(ckpt.meta.at("model_config")), seed);
    d.for_each_param([&](const std::string& n, Tensor<T>& t) {
      auto [shape, data] = ckpt.template get<T>(n);
      if (shape != t.shape())
        throw io_error("checkpoint tensor " + n + " has shape " + shape_str(shape) +
                       ", expected " + shape_str(t.shape()));
      t.value() = std::move(data);
    });
    return d;
  }

  static Detector load_file(const std::string& path) {
    Checkpoint ckpt = Checkpoint::load(path);
    return load_from(ckpt);
  }
};

}  // namespace swindet
