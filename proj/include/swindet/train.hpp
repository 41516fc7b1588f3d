#pragma once

// Training pipeline: image cache, target encoding with hard-negative
// suppression, the epoch loop with checkpoint/resume, evaluation over a
// manifest, hard-negative mining with a live model, single-batch overfit,
// and the neck-window ablation sweep.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "swindet/adam.hpp"
#include "swindet/config.hpp"
#include "swindet/head.hpp"
#include "swindet/image_io.hpp"
#include "swindet/metrics.hpp"
#include "swindet/model.hpp"
#include "swindet/plot.hpp"
#include "swindet/synth.hpp"

namespace swindet {

struct training_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Data access

// Loads each PNG once and keeps the decoded bytes; conversion to a planar
// tensor happens per access (cheap next to a forward pass).
class ImageCache {
 public:
  ImageCache(std::string dir, const DatasetManifest& manifest) : dir_(std::move(dir)) {
    for (const auto& im : manifest.images) files_[im.id] = im.file;
  }

  const ImageU8& get(std::int64_t id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    auto fit = files_.find(id);
    if (fit == files_.end())
      throw usage_error("image cache: unknown image id " + std::to_string(id));
    const std::string path = (std::filesystem::path(dir_) / fit->second).string();
    return cache_.emplace(id, read_png(path)).first->second;
  }

 private:
  std::string dir_;
  std::map<std::int64_t, std::string> files_;
  std::map<std::int64_t, ImageU8> cache_;
};

// Generates the train/val splits if their manifests are absent, otherwise
// loads them. Val shares the root seed but draws from a disjoint stream.
inline std::pair<DatasetManifest, DatasetManifest> ensure_datasets(const DataConfig& d) {
  namespace fs = std::filesystem;
  const auto split = [&](const std::string& dir, std::int64_t n, std::string_view tag) {
    const std::string manifest = (fs::path(dir) / "manifest.json").string();
    if (fs::exists(manifest)) return load_manifest(manifest);
    return generate_dataset(d.scene, n, dir, tag);
  };
  return {split(d.train_dir, d.n_train, "train"), split(d.val_dir, d.n_val, "val")};
}

// ---------------------------------------------------------------------------
// Targets with hard negatives

// Mined false-positive boxes force the target heatmap to exactly zero over
// their feature-map footprint, upgrading those cells from Gaussian-tail
// "soft" negatives to full-penalty ones. Ground-truth peaks keep priority.
template <typename T>
TargetMaps<T> encode_with_hard_negatives(const DatasetManifest& manifest, std::int64_t image_id,
                                         std::int64_t Hf, std::int64_t Wf, int stride = 4) {
  TargetMaps<T> t = encode_targets<T>(manifest.boxes_for(image_id), Hf, Wf, stride);
  for (const BBox& b : manifest.hard_negative_boxes_for(image_id)) {
    const std::int64_t c0 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor(b.x1 / stride)), 0, Wf - 1);
    const std::int64_t c1 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::ceil(b.x2 / stride)) - 1, 0, Wf - 1);
    const std::int64_t r0 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor(b.y1 / stride)), 0, Hf - 1);
    const std::int64_t r1 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::ceil(b.y2 / stride)) - 1, 0, Hf - 1);
    for (std::int64_t r = r0; r <= r1; ++r)
      for (std::int64_t c = c0; c <= c1; ++c) {
        const std::size_t at = static_cast<std::size_t>(r * Wf + c);
        if (t.pos_mask[at] == T(0)) t.heatmap[at] = T(0);
      }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
std::vector<Detection> detect_image(const Detector<T>& model, const Tensor<T>& img,
                                    const EvalConfig& ec) {
  HeadOut<T> out = model.forward(img);
  return decode(out.hm, out.wh, out.off, static_cast<int>(ec.top_k), ec.score_thresh);
}

struct ImageDetections {
  std::int64_t image_id = 0;
  std::vector<Detection> dets;
};

inline void save_detections_jsonl(const std::vector<ImageDetections>& all,
                                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path + " for writing");
  for (const auto& [id, dets] : all)
    for (const Detection& d : dets) {
      nlohmann::json j = {{"image_id", id},     {"x1", d.bbox.x1}, {"y1", d.bbox.y1},
                          {"x2", d.bbox.x2},    {"y2", d.bbox.y2}, {"score", d.score}};
      out << j.dump() << "\n";
    }
  if (!out) throw io_error("write failed for " + path);
}

// Runs inference on every manifest image (in manifest order) and scores the
// detections with the COCO-style suite.
template <typename T>
APReport evaluate(const Detector<T>& model, const DatasetManifest& manifest,
                  const std::string& images_dir, const EvalConfig& ec,
                  std::vector<ImageDetections>* dump = nullptr) {
  ImageCache cache(images_dir, manifest);
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<BBox>> gts;
  for (const auto& im : manifest.images) {
    Tensor<T> img = image_to_tensor<T>(cache.get(im.id));
    dets.push_back(detect_image(model, img, ec));
    gts.push_back(manifest.boxes_for(im.id));
    if (dump) dump->push_back({im.id, dets.back()});
  }
  return coco_suite(dets, gts);
}

inline nlohmann::json ap_report_to_json(const APReport& r) {
  nlohmann::json j = {{"ap", r.ap},       {"ap50", r.ap50},       {"ap75", r.ap75},
                      {"ap_s", r.ap_s},   {"n_images", r.n_images}, {"n_gt", r.n_gt}};
  j["per_threshold"] = nlohmann::json::array();
  for (const auto& t : r.per_threshold)
    j["per_threshold"].push_back({{"thresh", t.thresh}, {"ap", t.ap}});
  return j;
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  std::int64_t epoch = 0;
  double loss_total = 0, loss_focal = 0, loss_wh = 0, loss_off = 0;
  double ma50_total = 0;  // moving average of total loss over the last 50 steps
  double val_ap50 = 0;
  double grad_norm = 0;  // pre-clip norm of the final step
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;
  APReport final_val;
  std::string checkpoint_path;
};

namespace detail {

inline nlohmann::json epoch_stats_to_json(const EpochStats& s) {
  return {{"epoch", s.epoch},         {"loss_total", s.loss_total},
          {"loss_focal", s.loss_focal}, {"loss_wh", s.loss_wh},
          {"loss_off", s.loss_off},   {"ma50_total", s.ma50_total},
          {"val_ap50", s.val_ap50},   {"grad_norm", s.grad_norm},
          {"seconds", s.seconds}};
}

inline EpochStats epoch_stats_from_json(const nlohmann::json& j) {
  EpochStats s;
  j.at("epoch").get_to(s.epoch);
  j.at("loss_total").get_to(s.loss_total);
  j.at("loss_focal").get_to(s.loss_focal);
  j.at("loss_wh").get_to(s.loss_wh);
  j.at("loss_off").get_to(s.loss_off);
  j.at("ma50_total").get_to(s.ma50_total);
  j.at("val_ap50").get_to(s.val_ap50);
  if (j.contains("grad_norm")) j.at("grad_norm").get_to(s.grad_norm);
  if (j.contains("seconds")) j.at("seconds").get_to(s.seconds);
  return s;
}

// Image ids for every batch of one epoch. With mined hard negatives the
// sampler biases batch composition; otherwise it is a plain shuffle.
inline std::vector<std::vector<std::int64_t>> epoch_batches(const RunConfig& cfg,
                                                            const DatasetManifest& manifest,
                                                            std::int64_t epoch) {
  const std::int64_t B = cfg.train.batch_size;
  const std::int64_t n = static_cast<std::int64_t>(manifest.images.size());
  std::vector<std::vector<std::int64_t>> batches;
  if (cfg.hard_negative.enabled && !manifest.hard_negatives.empty()) {
    HardNegativeSampler sampler(manifest, cfg.hard_negative.rate,
                                Rng::stream(cfg.train.seed, "sampler", static_cast<std::uint64_t>(epoch)));
    for (std::int64_t done = 0; done < n; done += B) batches.push_back(sampler.next_batch(B));
    return batches;
  }
  std::vector<std::int64_t> order;
  for (const auto& im : manifest.images) order.push_back(im.id);
  Rng rng = Rng::stream(cfg.train.seed, "order", static_cast<std::uint64_t>(epoch));
  rng.shuffle(order.begin(), order.end());
  for (std::int64_t at = 0; at < n; at += B) {
    const std::int64_t end = std::min(n, at + B);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

}  // namespace detail

// Runs the full training loop: per-epoch shuffled batches, loss averaged by
// backpropagating each image's loss scaled by 1/batch, global-norm gradient
// clipping, Adam updates, per-epoch validation AP50, a metrics.jsonl line
// per epoch, and a rolling checkpoint (model + optimizer + epoch counter)
// that supports exact resume. All math is double precision so repeated runs
// produce byte-identical checkpoints.
inline TrainResult train(const RunConfig& cfg, const std::string& out_dir,
                         const std::string& resume_path = "", std::ostream* log = nullptr) {
  using T = double;
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(out_dir);

  auto [train_m, val_m] = ensure_datasets(cfg.data);
  ImageCache train_cache(cfg.data.train_dir, train_m);

  Detector<T> model;
  AdamState<T> opt;
  std::int64_t start_epoch = 0;
  TrainResult result;
  if (!resume_path.empty()) {
    Checkpoint ckpt = Checkpoint::load(resume_path);
    model = Detector<T>::load_from(ckpt);
    if (model_config_to_json(model.cfg) != model_config_to_json(cfg.model))
      throw config_error("resume: checkpoint model config differs from run config");
    opt = adam_state_from_checkpoint<T>(ckpt);
    if (ckpt.meta.contains("epoch")) start_epoch = ckpt.meta.at("epoch").get<std::int64_t>();
    if (ckpt.meta.contains("step_losses"))
      ckpt.meta.at("step_losses").get_to(result.step_losses);
  } else {
    model = Detector<T>::init(cfg.model, cfg.train.seed);
  }

  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.train.lr;
  adam_cfg.weight_decay = cfg.train.weight_decay;
  auto params = model.named_params();

  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw io_error("cannot open " + metrics_path + " for writing");

  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();
  const LossWeights& lw = cfg.loss;
  const std::int64_t B = cfg.train.batch_size;

  for (std::int64_t epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch;
    std::int64_t n_batches = 0;

    for (const auto& batch : detail::epoch_batches(cfg, train_m, epoch)) {
      model.zero_grad();
      double bt = 0, bf = 0, bw = 0, bo = 0;
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (std::int64_t id : batch) {
        Tensor<T> img = image_to_tensor<T>(train_cache.get(id));
        HeadOut<T> out = model.forward(img);
        TargetMaps<T> targets = encode_with_hard_negatives<T>(
            train_m, id, out.hm.dim(1), out.hm.dim(2));
        LossTerms<T> parts;
        Tensor<T> loss = total_loss(out, targets, lw, &parts);
        mul_scalar(loss, static_cast<T>(inv)).backward();
        bt += parts.total.item() * inv;
        bf += parts.focal.item() * inv;
        bw += parts.wh.item() * inv;
        bo += parts.off.item() * inv;
      }
      if (!std::isfinite(bt)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << " step " << n_batches << " (images:";
        for (std::int64_t id : batch) os << " " << id;
        os << ")";
        throw training_error(os.str());
      }
      stats.grad_norm = clip_grad_norm(params, cfg.train.grad_clip);
      adam_step(params, opt, adam_cfg);
      result.step_losses.push_back(bt);
      stats.loss_total += bt;
      stats.loss_focal += bf;
      stats.loss_wh += bw;
      stats.loss_off += bo;
      ++n_batches;
    }

    stats.loss_total /= static_cast<double>(n_batches);
    stats.loss_focal /= static_cast<double>(n_batches);
    stats.loss_wh /= static_cast<double>(n_batches);
    stats.loss_off /= static_cast<double>(n_batches);
    const std::size_t window = std::min<std::size_t>(50, result.step_losses.size());
    stats.ma50_total = std::accumulate(result.step_losses.end() - static_cast<std::ptrdiff_t>(window),
                                       result.step_losses.end(), 0.0) /
                       static_cast<double>(window);

    result.final_val = evaluate(model, val_m, cfg.data.val_dir, cfg.eval);
    stats.val_ap50 = result.final_val.ap50;
    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    metrics << detail::epoch_stats_to_json(stats).dump() << "\n";
    metrics.flush();
    if (log)
      (*log) << "epoch " << epoch << ": loss " << std::setprecision(4) << stats.loss_total
             << " (focal " << stats.loss_focal << ", wh " << stats.loss_wh << ", off "
             << stats.loss_off << ") val AP50 " << stats.val_ap50 << " [" << std::setprecision(3)
             << stats.seconds << "s]\n";
    result.epochs.push_back(stats);

    Checkpoint ckpt;
    model.save_into(ckpt);
    adam_state_to_checkpoint(opt, ckpt);
    ckpt.meta["epoch"] = epoch + 1;
    ckpt.meta["run_config"] = run_config_to_json(cfg);
    ckpt.meta["step_losses"] = result.step_losses;
    ckpt.save(ckpt_path);
  }

  result.checkpoint_path = ckpt_path;

  nlohmann::json report = {{"config_hash", config_hash_excluding_neck_window(cfg)},
                           {"param_count", model.param_count()},
                           {"epochs", cfg.train.epochs},
                           {"val", ap_report_to_json(result.final_val)}};
  std::ofstream rep((fs::path(out_dir) / "report.json").string());
  rep << report.dump(2) << "\n";
  return result;
}

// ---------------------------------------------------------------------------
// Hard-negative mining with a live model

template <typename T>
DatasetManifest mine_with_model(const Detector<T>& model, const DatasetManifest& manifest,
                                const std::string& images_dir, const EvalConfig& ec,
                                double iou_max = 0.3) {
  ImageCache cache(images_dir, manifest);
  const auto infer = [&](const ManifestImage& im) {
    Tensor<T> img = image_to_tensor<T>(cache.get(im.id));
    return detect_image(model, img, ec);
  };
  return mine_hard_negatives(infer, manifest, ec.score_thresh, iou_max);
}

// ---------------------------------------------------------------------------
// Single-batch overfit

struct OverfitResult {
  double initial_focal = 0, final_focal = 0;
  std::vector<double> focal_history;
};

// Trains on the first batch of the train split only, recording the focal
// term per step. A healthy model/optimizer pairing drives the focal loss to
// a small fraction of its starting value within a few hundred steps.
inline OverfitResult overfit_single_batch(const RunConfig& cfg, std::int64_t steps,
                                          std::ostream* log = nullptr) {
  using T = double;
  cfg.validate();
  auto [train_m, val_m] = ensure_datasets(cfg.data);
  (void)val_m;
  ImageCache cache(cfg.data.train_dir, train_m);

  std::vector<std::int64_t> batch;
  for (const auto& im : train_m.images) {
    batch.push_back(im.id);
    if (static_cast<std::int64_t>(batch.size()) == cfg.train.batch_size) break;
  }
  if (batch.empty()) throw usage_error("overfit: empty train split");

  Detector<T> model = Detector<T>::init(cfg.model, cfg.train.seed);
  auto params = model.named_params();
  AdamState<T> opt;
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.train.lr;
  adam_cfg.weight_decay = cfg.train.weight_decay;

  OverfitResult result;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::int64_t step = 0; step < steps; ++step) {
    model.zero_grad();
    double focal = 0;
    for (std::int64_t id : batch) {
      Tensor<T> img = image_to_tensor<T>(cache.get(id));
      HeadOut<T> out = model.forward(img);
      TargetMaps<T> targets =
          encode_with_hard_negatives<T>(train_m, id, out.hm.dim(1), out.hm.dim(2));
      LossTerms<T> parts;
      Tensor<T> loss = total_loss(out, targets, cfg.loss, &parts);
      mul_scalar(loss, static_cast<T>(inv)).backward();
      focal += parts.focal.item() * inv;
    }
    if (!std::isfinite(focal))
      throw training_error("non-finite focal loss at overfit step " + std::to_string(step));
    clip_grad_norm(params, cfg.train.grad_clip);
    adam_step(params, opt, adam_cfg);
    result.focal_history.push_back(focal);
    if (log && (step % 25 == 0 || step + 1 == steps))
      (*log) << "overfit step " << step << ": focal " << focal << "\n";
  }
  result.initial_focal = result.focal_history.front();
  result.final_focal = result.focal_history.back();
  return result;
}

// ---------------------------------------------------------------------------
// Window ablation

struct AblationRow {
  std::int64_t window = 0;
  APReport report;
  std::string config_hash;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "window,ap,ap50,ap75,ap_s,config_hash\n";
  os << std::setprecision(17);
  for (const AblationRow& r : rows)
    os << r.window << "," << r.report.ap << "," << r.report.ap50 << "," << r.report.ap75 << ","
       << r.report.ap_s << "," << r.config_hash << "\n";
  return os.str();
}

inline std::vector<AblationRow> parse_ablation_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    AblationRow r;
    std::string field;
    std::getline(ls, field, ',');
    r.window = std::stoll(field);
    std::getline(ls, field, ',');
    r.report.ap = std::stod(field);
    std::getline(ls, field, ',');
    r.report.ap50 = std::stod(field);
    std::getline(ls, field, ',');
    r.report.ap75 = std::stod(field);
    std::getline(ls, field, ',');
    r.report.ap_s = std::stod(field);
    std::getline(ls, r.config_hash, ',');
    rows.push_back(std::move(r));
  }
  return rows;
}

// Trains one model per neck window size with otherwise-identical config and
// writes ablation.csv, a markdown twin, and a bar chart of AP_S by window.
// Every row must share the window-excluded config hash; that equality is the
// control check proving the sweep varies only the window.
inline std::vector<AblationRow> ablate_window(RunConfig cfg,
                                              const std::vector<std::int64_t>& windows,
                                              const std::string& out_dir,
                                              std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<AblationRow> rows;
  for (std::int64_t w : windows) {
    RunConfig c = cfg;
    c.model.neck.window = w;
    if (log) (*log) << "ablation: training neck window " << w << "\n";
    TrainResult tr = train(c, (fs::path(out_dir) / ("w" + std::to_string(w))).string(),
                           "", log);
    rows.push_back({w, tr.final_val, config_hash_excluding_neck_window(c)});
  }
  for (const AblationRow& r : rows)
    if (r.config_hash != rows.front().config_hash)
      throw usage_error("ablation rows disagree on the window-excluded config hash");

  write_text_file((fs::path(out_dir) / "ablation.csv").string(), ablation_csv(rows));

  std::ostringstream md;
  md << "| window | AP | AP50 | AP75 | AP_S |\n|---|---|---|---|---|\n";
  md << std::setprecision(4);
  for (const AblationRow& r : rows)
    md << "| " << r.window << " | " << r.report.ap << " | " << r.report.ap50 << " | "
       << r.report.ap75 << " | " << r.report.ap_s << " |\n";
  write_text_file((fs::path(out_dir) / "ablation.md").string(), md.str());

  fs::create_directories(fs::path(out_dir) / "plots");
  std::vector<std::string> labels;
  std::vector<double> values;
  for (const AblationRow& r : rows) {
    labels.push_back(std::to_string(r.window));
    values.push_back(r.report.ap_s);
  }
  write_text_file((fs::path(out_dir) / "plots" / "ap_s_by_window.svg").string(),
                  svg_bar_chart(labels, values, "AP_S by neck window", "AP_S"));
  return rows;
}

// ---------------------------------------------------------------------------
// Metrics file helpers (consumed by the plot command)

inline std::vector<EpochStats> load_metrics_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  std::vector<EpochStats> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(detail::epoch_stats_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw io_error("bad metrics line in " + path + ": " + e.what());
    }
  }
  return out;
}

inline void plot_training_curves(const std::vector<EpochStats>& stats,
                                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir));
  Series total{"total", {}}, focal{"focal", {}}, wh{"wh", {}}, off{"off", {}}, ap50{"AP50", {}};
  for (const EpochStats& s : stats) {
    const double e = static_cast<double>(s.epoch);
    total.points.push_back({e, s.loss_total});
    focal.points.push_back({e, s.loss_focal});
    wh.points.push_back({e, s.loss_wh});
    off.points.push_back({e, s.loss_off});
    ap50.points.push_back({e, s.val_ap50});
  }
  write_text_file((fs::path(out_dir) / "loss_curves.svg").string(),
                  svg_line_chart({total, focal, wh, off}, "Training loss", "epoch", "loss"));
  write_text_file((fs::path(out_dir) / "val_ap50.svg").string(),
                  svg_line_chart({ap50}, "Validation AP50", "epoch", "AP50"));
}

}  // namespace swindet
