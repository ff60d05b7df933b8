// Copyright (c) 2026 the tan authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "tan/common.hpp"

namespace tan {

/// Axis-aligned box in normalized center format: cx, cy, w, h are fractions
/// of the image size. class_id is 0 for craters.
struct BoundingBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  bool valid() const {
    return cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0 && w > 0.0 &&
           w <= 1.0 && h > 0.0 && h <= 1.0;
  }
  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return w * h; }

  /// Clip the extent to the unit square; returns false if nothing remains.
  bool clip() {
    double lx = std::max(0.0, x1()), ly = std::max(0.0, y1());
    double hx = std::min(1.0, x2()), hy = std::min(1.0, y2());
    if (hx - lx <= 0.0 || hy - ly <= 0.0) return false;
    cx = (lx + hx) / 2;
    cy = (ly + hy) / 2;
    w = hx - lx;
    h = hy - ly;
    return true;
  }
};

/// Intersection over union. Zero-area union maps to 0 by convention.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Complete-IoU loss between two boxes: 1 - IoU + center-distance penalty
/// (normalized by the enclosing-box diagonal) + aspect-consistency term.
/// Range [0, 2]; 0 iff the boxes coincide.
template <class T>
T ciou_loss(T pcx, T pcy, T pw, T ph, T gcx, T gcy, T gw, T gh) {
  TAN_CHECK(pw > T(0) && ph > T(0) && gw > T(0) && gh > T(0),
            "ciou_loss: degenerate box");
  T px1 = pcx - pw / 2, py1 = pcy - ph / 2, px2 = pcx + pw / 2, py2 = pcy + ph / 2;
  T gx1 = gcx - gw / 2, gy1 = gcy - gh / 2, gx2 = gcx + gw / 2, gy2 = gcy + gh / 2;
  T iw = std::max(T(0), std::min(px2, gx2) - std::max(px1, gx1));
  T ih = std::max(T(0), std::min(py2, gy2) - std::max(py1, gy1));
  T inter = iw * ih;
  T uni = pw * ph + gw * gh - inter;
  T iou_v = inter / uni;
  T ex1 = std::min(px1, gx1), ey1 = std::min(py1, gy1);
  T ex2 = std::max(px2, gx2), ey2 = std::max(py2, gy2);
  T diag2 = (ex2 - ex1) * (ex2 - ex1) + (ey2 - ey1) * (ey2 - ey1);
  T dist2 = (pcx - gcx) * (pcx - gcx) + (pcy - gcy) * (pcy - gcy);
  T v = T(4.0 / (M_PI * M_PI)) *
        (std::atan(gw / gh) - std::atan(pw / ph)) *
        (std::atan(gw / gh) - std::atan(pw / ph));
  T alpha = v / (T(1) - iou_v + v + T(1e-12));
  return T(1) - iou_v + dist2 / diag2 + alpha * v;
}

inline double ciou_loss(const BoundingBox& pred, const BoundingBox& gt) {
  return ciou_loss<double>(pred.cx, pred.cy, pred.w, pred.h, gt.cx, gt.cy,
                           gt.w, gt.h);
}

}  // namespace tan
