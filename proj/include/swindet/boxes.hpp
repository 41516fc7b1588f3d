#pragma once

// Axis-aligned boxes in image-pixel coordinates and scored detections.

#include <algorithm>
#include <cstdint>

namespace swindet {

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int class_id = 0;  // single class: bird

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
};

struct Detection {
  BBox bbox;
  double score = 0;
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace swindet
