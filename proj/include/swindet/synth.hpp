#pragma once

// Synthetic small-bird scenes: sky-gradient backgrounds with Gaussian-blob
// cloud clutter and dark bird glyphs (filled ellipses or V chevrons), plus
// the dataset manifest schema, deterministic dataset generation, and
// hard-negative mining/sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swindet/boxes.hpp"
#include "swindet/image_io.hpp"
#include "swindet/rng.hpp"
#include "swindet/tensor.hpp"

namespace swindet {

struct SceneConfig {
  std::int64_t image_size = 128;
  std::int64_t birds_min = 1, birds_max = 6;
  double bird_size_min = 4, bird_size_max = 24;
  double clutter_density = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 32) throw config_error("scene: image_size must be >= 32");
    if (birds_min < 0 || birds_max < birds_min)
      throw config_error("scene: birds range invalid");
    if (bird_size_min < 2 || bird_size_max < bird_size_min)
      throw config_error("scene: bird size range invalid");
    if (bird_size_max >= 32)
      throw config_error("scene: bird_size_max must stay below 32 (small-object regime)");
    if (clutter_density < 0) throw config_error("scene: clutter_density must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Scene rendering

template <typename T>
struct Scene {
  Tensor<T> image;  // [3,H,W] in [0,1]
  std::vector<BBox> boxes;
};

namespace detail {

// Flat double RGB canvas with helpers; planar conversion happens at the end.
struct Canvas {
  std::int64_t size;
  std::vector<double> rgb;  // interleaved, 3 per pixel

  explicit Canvas(std::int64_t n) : size(n), rgb(static_cast<std::size_t>(n * n * 3), 0) {}

  double* px(std::int64_t r, std::int64_t c) {
    return rgb.data() + (r * size + c) * 3;
  }
};

inline void paint_sky(Canvas& cv, Rng& rng) {
  // Light blue fading toward a brighter horizon; all channels stay >= 0.4
  // so dark glyph pixels remain separable by thresholding.
  const double top[3] = {rng.uniform(0.42, 0.55), rng.uniform(0.60, 0.75), rng.uniform(0.82, 0.95)};
  const double bot[3] = {rng.uniform(0.70, 0.85), rng.uniform(0.80, 0.92), rng.uniform(0.90, 0.98)};
  for (std::int64_t r = 0; r < cv.size; ++r) {
    const double f = static_cast<double>(r) / static_cast<double>(cv.size - 1);
    for (std::int64_t c = 0; c < cv.size; ++c) {
      double* p = cv.px(r, c);
      for (int ch = 0; ch < 3; ++ch) p[ch] = top[ch] + f * (bot[ch] - top[ch]);
    }
  }
}

inline void paint_clouds(Canvas& cv, double density, Rng& rng) {
  const double area_scale = static_cast<double>(cv.size * cv.size) / (128.0 * 128.0);
  const std::int64_t n = std::llround(density * 10.0 * area_scale);
  for (std::int64_t i = 0; i < n; ++i) {
    const double cx = rng.uniform(0, static_cast<double>(cv.size));
    const double cy = rng.uniform(0, static_cast<double>(cv.size));
    const double sigma = rng.uniform(6, 18);
    const double amp = rng.uniform(0.10, 0.25);
    const std::int64_t reach = static_cast<std::int64_t>(std::ceil(3 * sigma));
    const std::int64_t r0 = std::max<std::int64_t>(0, std::llround(cy) - reach);
    const std::int64_t r1 = std::min<std::int64_t>(cv.size - 1, std::llround(cy) + reach);
    const std::int64_t c0 = std::max<std::int64_t>(0, std::llround(cx) - reach);
    const std::int64_t c1 = std::min<std::int64_t>(cv.size - 1, std::llround(cx) + reach);
    for (std::int64_t r = r0; r <= r1; ++r)
      for (std::int64_t c = c0; c <= c1; ++c) {
        const double dx = static_cast<double>(c) + 0.5 - cx;
        const double dy = static_cast<double>(r) + 0.5 - cy;
        const double g = amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        double* p = cv.px(r, c);
        for (int ch = 0; ch < 3; ++ch) p[ch] += g * (1.0 - p[ch]);  // blend toward white
      }
  }
}

struct GlyphSpec {
  double cx, cy;        // center, pixel coordinates
  double size;          // circumscribed-circle diameter; bounds never exceed it
  double theta;         // rotation
  bool chevron;         // false: filled ellipse
  double aspect;        // ellipse minor/major ratio
  double open_angle;    // chevron wing half-opening
  double color[3];
};

// True if the pixel center (px, py) lies inside the glyph.
inline bool glyph_covers(const GlyphSpec& g, double px, double py) {
  const double dx = px - g.cx, dy = py - g.cy;
  const double u = dx * std::cos(g.theta) + dy * std::sin(g.theta);
  const double v = -dx * std::sin(g.theta) + dy * std::cos(g.theta);
  if (!g.chevron) {
    const double a = g.size / 2, b = a * g.aspect;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
  // V chevron: two wings from the center, kept inside the circumscribed
  // circle by shortening the wings by the stroke thickness.
  const double t = std::max(0.6, g.size / 12.0);
  const double len = std::max(1.0, g.size / 2 - t);
  for (int wing = -1; wing <= 1; wing += 2) {
    const double ang = wing * g.open_angle;
    const double ex = len * std::cos(ang), ey = len * std::sin(ang);
    const double proj = std::clamp((u * ex + v * ey) / (len * len), 0.0, 1.0);
    const double ddx = u - proj * ex, ddy = v - proj * ey;
    if (ddx * ddx + ddy * ddy <= t * t) return true;
  }
  return false;
}

// Paints the glyph and returns the tight bounds of painted pixels, or an
// empty box (x2 <= x1) if nothing was painted.
inline BBox paint_glyph(Canvas& cv, const GlyphSpec& g) {
  const double reach = g.size / 2 + 1;
  const std::int64_t r0 = std::max<std::int64_t>(0, std::llround(g.cy - reach));
  const std::int64_t r1 = std::min<std::int64_t>(cv.size - 1, std::llround(g.cy + reach));
  const std::int64_t c0 = std::max<std::int64_t>(0, std::llround(g.cx - reach));
  const std::int64_t c1 = std::min<std::int64_t>(cv.size - 1, std::llround(g.cx + reach));
  std::int64_t rmin = cv.size, rmax = -1, cmin = cv.size, cmax = -1;
  for (std::int64_t r = r0; r <= r1; ++r)
    for (std::int64_t c = c0; c <= c1; ++c) {
      if (!glyph_covers(g, static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5)) continue;
      double* p = cv.px(r, c);
      for (int ch = 0; ch < 3; ++ch) p[ch] = g.color[ch];
      rmin = std::min(rmin, r);
      rmax = std::max(rmax, r);
      cmin = std::min(cmin, c);
      cmax = std::max(cmax, c);
    }
  BBox box;
  if (rmax >= rmin) {
    box.x1 = static_cast<double>(cmin);
    box.y1 = static_cast<double>(rmin);
    box.x2 = static_cast<double>(cmax + 1);
    box.y2 = static_cast<double>(rmax + 1);
  }
  return box;
}

}  // namespace detail

template <typename T>
Scene<T> generate_scene(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::int64_t n = cfg.image_size;
  detail::Canvas cv(n);
  detail::paint_sky(cv, rng);
  detail::paint_clouds(cv, cfg.clutter_density, rng);

  Scene<T> scene;
  const std::int64_t birds = rng.uniform_int(cfg.birds_min, cfg.birds_max);
  for (std::int64_t i = 0; i < birds; ++i) {
    detail::GlyphSpec g;
    g.size = rng.uniform(cfg.bird_size_min, cfg.bird_size_max);
    g.theta = rng.uniform(0, 6.283185307179586);
    g.chevron = rng.bernoulli(0.5);
    g.aspect = rng.uniform(0.35, 0.6);
    g.open_angle = rng.uniform(0.45, 0.75);
    const double dark = rng.uniform(0.05, 0.20);
    for (int ch = 0; ch < 3; ++ch)
      g.color[ch] = std::clamp(dark + rng.uniform(-0.04, 0.04), 0.02, 0.25);

    // Keep glyphs fully inside the frame and mostly non-overlapping so every
    // bird stays individually detectable; after a few failed draws the last
    // position stands (still deterministic).
    const double margin = g.size / 2 + 1;
    for (int attempt = 0; attempt < 12; ++attempt) {
      g.cx = rng.uniform(margin, static_cast<double>(n) - margin);
      g.cy = rng.uniform(margin, static_cast<double>(n) - margin);
      bool clear = true;
      for (const BBox& other : scene.boxes) {
        const BBox mine{g.cx - g.size / 2, g.cy - g.size / 2, g.cx + g.size / 2,
                        g.cy + g.size / 2};
        if (iou(mine, other) > 0.05) clear = false;
      }
      if (clear) break;
    }
    const BBox box = detail::paint_glyph(cv, g);
    if (box.x2 > box.x1) scene.boxes.push_back(box);
  }

  // Interleaved double canvas -> planar [3,H,W] tensor.
  std::vector<T> planar(static_cast<std::size_t>(3 * n * n));
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < n; ++c)
      for (int ch = 0; ch < 3; ++ch)
        planar[static_cast<std::size_t>((ch * n + r) * n + c)] =
            static_cast<T>(std::clamp(cv.px(r, c)[ch], 0.0, 1.0));
  scene.image = Tensor<T>::from_data({3, n, n}, std::move(planar));
  return scene;
}

// ---------------------------------------------------------------------------
// Manifest schema

struct ManifestImage {
  std::int64_t id = 0;
  std::string file;
  std::int64_t width = 0, height = 0;
  bool operator==(const ManifestImage&) const = default;
};

struct ManifestAnnotation {
  std::int64_t image_id = 0;
  BBox bbox;
  bool operator==(const ManifestAnnotation& o) const {
    return image_id == o.image_id && bbox.x1 == o.bbox.x1 && bbox.y1 == o.bbox.y1 &&
           bbox.x2 == o.bbox.x2 && bbox.y2 == o.bbox.y2 && bbox.class_id == o.bbox.class_id;
  }
};

struct HardNegative {
  std::int64_t image_id = 0;
  BBox bbox;
  double score = 0;
  bool operator==(const HardNegative& o) const {
    return image_id == o.image_id && bbox.x1 == o.bbox.x1 && bbox.y1 == o.bbox.y1 &&
           bbox.x2 == o.bbox.x2 && bbox.y2 == o.bbox.y2 && score == o.score;
  }
};

struct DatasetManifest {
  std::vector<ManifestImage> images;
  std::vector<ManifestAnnotation> annotations;
  std::vector<HardNegative> hard_negatives;

  bool operator==(const DatasetManifest&) const = default;

  std::vector<BBox> boxes_for(std::int64_t image_id) const {
    std::vector<BBox> out;
    for (const auto& a : annotations)
      if (a.image_id == image_id) out.push_back(a.bbox);
    return out;
  }

  std::vector<BBox> hard_negative_boxes_for(std::int64_t image_id) const {
    std::vector<BBox> out;
    for (const auto& h : hard_negatives)
      if (h.image_id == image_id) out.push_back(h.bbox);
    return out;
  }

  void validate() const {
    std::set<std::int64_t> ids;
    for (const auto& im : images) ids.insert(im.id);
    for (const auto& a : annotations)
      if (!ids.count(a.image_id))
        throw config_error("manifest: annotation references missing image " +
                           std::to_string(a.image_id));
    for (const auto& h : hard_negatives)
      if (!ids.count(h.image_id))
        throw config_error("manifest: hard negative references missing image " +
                           std::to_string(h.image_id));
  }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  for (const auto& im : m.images)
    j["images"].push_back(
        {{"id", im.id}, {"file", im.file}, {"width", im.width}, {"height", im.height}});
  j["annotations"] = nlohmann::json::array();
  for (const auto& a : m.annotations)
    j["annotations"].push_back({{"image_id", a.image_id},
                                {"bbox", {a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2}},
                                {"class_id", a.bbox.class_id}});
  j["hard_negatives"] = nlohmann::json::array();
  for (const auto& h : m.hard_negatives)
    j["hard_negatives"].push_back({{"image_id", h.image_id},
                                   {"bbox", {h.bbox.x1, h.bbox.y1, h.bbox.x2, h.bbox.y2}},
                                   {"score", h.score}});
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  for (const auto& im : j.at("images"))
    m.images.push_back({im.at("id").get<std::int64_t>(), im.at("file").get<std::string>(),
                        im.at("width").get<std::int64_t>(), im.at("height").get<std::int64_t>()});
  for (const auto& a : j.at("annotations")) {
    ManifestAnnotation ann;
    ann.image_id = a.at("image_id").get<std::int64_t>();
    const auto& b = a.at("bbox");
    ann.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                b.at(3).get<double>(), a.at("class_id").get<int>()};
    m.annotations.push_back(ann);
  }
  for (const auto& h : j.at("hard_negatives")) {
    HardNegative hn;
    hn.image_id = h.at("image_id").get<std::int64_t>();
    const auto& b = h.at("bbox");
    hn.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
               b.at(3).get<double>()};
    hn.score = h.at("score").get<double>();
    m.hard_negatives.push_back(hn);
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("save_manifest: cannot open " + path);
  out << manifest_to_json(m).dump(2) << "\n";
  if (!out) throw io_error("save_manifest: write failed for " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("load_manifest: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
    return manifest_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw io_error("load_manifest: " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset generation

// Writes img_{id:06}.png files plus manifest.json into out_dir. The stream
// tag namespaces the random streams, keeping e.g. train and val disjoint
// for the same root seed.
inline DatasetManifest generate_dataset(const SceneConfig& cfg, std::int64_t n_images,
                                        const std::string& out_dir,
                                        std::string_view stream_tag = "train") {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  DatasetManifest m;
  for (std::int64_t id = 0; id < n_images; ++id) {
    Rng rng = Rng::stream(cfg.seed, stream_tag, static_cast<std::uint64_t>(id));
    Scene<float> scene = generate_scene<float>(cfg, rng);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06lld.png", static_cast<long long>(id));
    write_png((std::filesystem::path(out_dir) / name).string(), tensor_to_image(scene.image));
    m.images.push_back({id, name, cfg.image_size, cfg.image_size});
    for (const BBox& b : scene.boxes) m.annotations.push_back({id, b});
  }
  save_manifest(m, (std::filesystem::path(out_dir) / "manifest.json").string());
  return m;
}

// ---------------------------------------------------------------------------
// Hard negatives

// Detections that hit no ground truth become hard negatives. The inference
// callback maps an image id to its decoded detections, keeping this routine
// independent of any specific model.
inline DatasetManifest mine_hard_negatives(
    const std::function<std::vector<Detection>(const ManifestImage&)>& infer,
    DatasetManifest manifest, double score_thresh = 0.3, double iou_max = 0.3) {
  manifest.hard_negatives.clear();
  for (const auto& im : manifest.images) {
    const std::vector<BBox> gts = manifest.boxes_for(im.id);
    for (const Detection& d : infer(im)) {
      if (d.score < score_thresh) continue;
      bool overlaps = false;
      for (const BBox& g : gts)
        if (iou(d.bbox, g) >= iou_max) {
          overlaps = true;
          break;
        }
      if (!overlaps) manifest.hard_negatives.push_back({im.id, d.bbox, d.score});
    }
  }
  return manifest;
}

// Batch composition: ceil(rate * batch) image ids from the hard-negative
// pool, the remainder uniform over all images. Positions are shuffled.
class HardNegativeSampler {
 public:
  HardNegativeSampler(const DatasetManifest& manifest, double rate, Rng rng)
      : rate_(rate), rng_(std::move(rng)) {
    if (rate < 0 || rate > 1) throw config_error("hard_negative_sampler: rate must be in [0,1]");
    for (const auto& im : manifest.images) all_.push_back(im.id);
    if (all_.empty()) throw usage_error("hard_negative_sampler: empty manifest");
    std::set<std::int64_t> pool;
    for (const auto& h : manifest.hard_negatives) pool.insert(h.image_id);
    pool_.assign(pool.begin(), pool.end());
  }

  std::vector<std::int64_t> next_batch(std::int64_t batch_size) {
    std::vector<std::int64_t> ids;
    const std::int64_t want_hn =
        pool_.empty() ? 0
                      : std::min<std::int64_t>(
                            batch_size,
                            static_cast<std::int64_t>(
                                std::ceil(rate_ * static_cast<double>(batch_size) - 1e-12)));
    for (std::int64_t i = 0; i < want_hn; ++i)
      ids.push_back(pool_[static_cast<std::size_t>(
          rng_.uniform_int(0, static_cast<std::int64_t>(pool_.size()) - 1))]);
    while (static_cast<std::int64_t>(ids.size()) < batch_size)
      ids.push_back(all_[static_cast<std::size_t>(
          rng_.uniform_int(0, static_cast<std::int64_t>(all_.size()) - 1))]);
    rng_.shuffle(ids.begin(), ids.end());
    return ids;
  }

  const std::vector<std::int64_t>& pool() const { return pool_; }

 private:
  double rate_;
  Rng rng_;
  std::vector<std::int64_t> all_, pool_;
};

}  // namespace swindet
