#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "weedvg/errors.hpp"

namespace weedvg {

// Axis-aligned box in centre form (cx, cy, w, h). Coordinates are normally
// fractions of the image size but every routine here is frame-agnostic.
template <typename Scalar>
struct BBox {
  Scalar cx{0}, cy{0}, w{0}, h{0};

  using Vec4 = Eigen::Matrix<Scalar, 4, 1>;

  static BBox from_corners(Scalar x1, Scalar y1, Scalar x2, Scalar y2) {
    return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }
  static BBox from_centre(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }

  Scalar x1() const { return cx - w / 2; }
  Scalar y1() const { return cy - h / 2; }
  Scalar x2() const { return cx + w / 2; }
  Scalar y2() const { return cy + h / 2; }

  Vec4 centre_form() const { return {cx, cy, w, h}; }
  Vec4 corners() const { return {x1(), y1(), x2(), y2()}; }

  Scalar area() const { return w * h; }
  bool valid() const { return w >= 0 && h >= 0 && std::isfinite(cx) && std::isfinite(cy); }

  BBox scaled(Scalar s) const { return {cx * s, cy * s, w * s, h * s}; }

  bool operator==(const BBox&) const = default;
};

using Box = BBox<double>;

struct InterpConfig {
  double alpha = 0.99;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw ConfigError("interpolation alpha must lie in (0, 1), got " + std::to_string(alpha));
    }
  }
};

namespace detail {

// Overlap of [a1, a2] and [b1, b2] along one axis, clamped at zero.
template <typename Scalar>
Scalar overlap_1d(Scalar a1, Scalar a2, Scalar b1, Scalar b2) {
  return std::max(Scalar(0), std::min(a2, b2) - std::max(a1, b1));
}

// Partial derivatives of the clamped overlap with respect to a1 and a2.
// Coincident edges split the derivative evenly between the two boxes; a zero
// overlap (touching edges) takes the derivative from the overlapping side.
template <typename Scalar>
void overlap_1d_grad(Scalar a1, Scalar a2, Scalar b1, Scalar b2, Scalar& d_a1, Scalar& d_a2) {
  const Scalar raw = std::min(a2, b2) - std::max(a1, b1);
  if (raw < 0) {
    d_a1 = d_a2 = 0;
    return;
  }
  const Scalar lo = a1 > b1 ? Scalar(1) : (a1 < b1 ? Scalar(0) : Scalar(0.5));
  const Scalar hi = a2 < b2 ? Scalar(1) : (a2 > b2 ? Scalar(0) : Scalar(0.5));
  d_a1 = -lo;
  d_a2 = hi;
}

// Extent of the enclosing interval and its derivatives with respect to a1, a2.
template <typename Scalar>
Scalar hull_1d(Scalar a1, Scalar a2, Scalar b1, Scalar b2, Scalar& d_a1, Scalar& d_a2) {
  const Scalar lo = a1 < b1 ? Scalar(1) : (a1 > b1 ? Scalar(0) : Scalar(0.5));
  const Scalar hi = a2 > b2 ? Scalar(1) : (a2 < b2 ? Scalar(0) : Scalar(0.5));
  d_a1 = -lo;
  d_a2 = hi;
  return std::max(a2, b2) - std::min(a1, b1);
}

// Converts a gradient over corners (x1, y1, x2, y2) to centre form.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> corners_to_centre_grad(const Eigen::Matrix<Scalar, 4, 1>& g) {
  return {g[0] + g[2], g[1] + g[3], (g[2] - g[0]) / 2, (g[3] - g[1]) / 2};
}

}  // namespace detail

template <typename Scalar>
Scalar intersection_area(const BBox<Scalar>& a, const BBox<Scalar>& b) {
  return detail::overlap_1d(a.x1(), a.x2(), b.x1(), b.x2()) *
         detail::overlap_1d(a.y1(), a.y2(), b.y1(), b.y2());
}

namespace detail {

// Area from corner extents, so that identical boxes give inter == union exactly.
template <typename Scalar>
Scalar corner_area(const BBox<Scalar>& b) {
  return (b.x2() - b.x1()) * (b.y2() - b.y1());
}

}  // namespace detail

template <typename Scalar>
Scalar iou(const BBox<Scalar>& a, const BBox<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = detail::corner_area(a) + detail::corner_area(b) - inter;
  if (uni <= 0) return Scalar(0);
  return std::min(Scalar(1), inter / uni);
}

template <typename Scalar>
Scalar giou(const BBox<Scalar>& a, const BBox<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = detail::corner_area(a) + detail::corner_area(b) - inter;
  const Scalar enclosing = (std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1())) *
                           (std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1()));
  if (enclosing <= 0) return Scalar(0);
  const Scalar overlap = uni > 0 ? std::min(Scalar(1), inter / uni) : Scalar(0);
  return overlap - (enclosing - uni) / enclosing;
}

template <typename Scalar>
BBox<Scalar> interp_box(const BBox<Scalar>& pred, const BBox<Scalar>& gt, double alpha) {
  InterpConfig{alpha}.validate();
  const Scalar a(alpha);
  return BBox<Scalar>::from_centre((Scalar(1) - a) * pred.centre_form() + a * gt.centre_form());
}

// d IoU(pred, gt) / d pred, in centre form.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> grad_iou(const BBox<Scalar>& pred, const BBox<Scalar>& gt) {
  using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
  const Scalar iw = detail::overlap_1d(pred.x1(), pred.x2(), gt.x1(), gt.x2());
  const Scalar ih = detail::overlap_1d(pred.y1(), pred.y2(), gt.y1(), gt.y2());
  const Scalar inter = iw * ih;
  const Scalar uni = pred.area() + gt.area() - inter;
  if (uni <= 0) return Vec4::Zero();

  Scalar dw_x1, dw_x2, dh_y1, dh_y2;
  detail::overlap_1d_grad(pred.x1(), pred.x2(), gt.x1(), gt.x2(), dw_x1, dw_x2);
  detail::overlap_1d_grad(pred.y1(), pred.y2(), gt.y1(), gt.y2(), dh_y1, dh_y2);

  const Vec4 d_inter{ih * dw_x1, iw * dh_y1, ih * dw_x2, iw * dh_y2};
  const Vec4 d_area{-pred.h, -pred.w, pred.h, pred.w};
  const Vec4 d_union = d_area - d_inter;
  const Vec4 d_iou = d_inter / uni - (inter / (uni * uni)) * d_union;
  return detail::corners_to_centre_grad(d_iou);
}

// d GIoU(pred, gt) / d pred, in centre form.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> grad_giou(const BBox<Scalar>& pred, const BBox<Scalar>& gt) {
  using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
  Scalar ex_x1, ex_x2, ey_y1, ey_y2;
  const Scalar ew = detail::hull_1d(pred.x1(), pred.x2(), gt.x1(), gt.x2(), ex_x1, ex_x2);
  const Scalar eh = detail::hull_1d(pred.y1(), pred.y2(), gt.y1(), gt.y2(), ey_y1, ey_y2);
  const Scalar enclosing = ew * eh;
  if (enclosing <= 0) return Vec4::Zero();

  const Scalar iw = detail::overlap_1d(pred.x1(), pred.x2(), gt.x1(), gt.x2());
  const Scalar ih = detail::overlap_1d(pred.y1(), pred.y2(), gt.y1(), gt.y2());
  Scalar dw_x1, dw_x2, dh_y1, dh_y2;
  detail::overlap_1d_grad(pred.x1(), pred.x2(), gt.x1(), gt.x2(), dw_x1, dw_x2);
  detail::overlap_1d_grad(pred.y1(), pred.y2(), gt.y1(), gt.y2(), dh_y1, dh_y2);
  const Scalar inter = iw * ih;
  const Scalar uni = pred.area() + gt.area() - inter;

  const Vec4 d_inter{ih * dw_x1, iw * dh_y1, ih * dw_x2, iw * dh_y2};
  const Vec4 d_union = Vec4{-pred.h, -pred.w, pred.h, pred.w} - d_inter;
  const Vec4 d_enclosing{eh * ex_x1, ew * ey_y1, eh * ex_x2, ew * ey_y2};

  Vec4 d = (d_union * enclosing - uni * d_enclosing) / (enclosing * enclosing);
  if (uni > 0) d += d_inter / uni - (inter / (uni * uni)) * d_union;
  return detail::corners_to_centre_grad(d);
}

// Plain IoU loss, 1 - IoU.
template <typename Scalar>
Scalar loss_iou(const BBox<Scalar>& pred, const BBox<Scalar>& gt) {
  return Scalar(1) - iou(pred, gt);
}

template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> grad_loss_iou(const BBox<Scalar>& pred, const BBox<Scalar>& gt) {
  return -grad_iou(pred, gt);
}

template <typename Scalar>
Scalar loss_giou(const BBox<Scalar>& pred, const BBox<Scalar>& gt) {
  return Scalar(1) - giou(pred, gt);
}

template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> grad_loss_giou(const BBox<Scalar>& pred, const BBox<Scalar>& gt) {
  return -grad_giou(pred, gt);
}

// (1 - IoU(pred, gt)) + (1 - IoU(interp, gt)) with interp = (1-a) pred + a gt.
template <typename Scalar>
Scalar loss_interp_iou(const BBox<Scalar>& pred, const BBox<Scalar>& gt,
                       const InterpConfig& cfg = {}) {
  const BBox<Scalar> mid = interp_box(pred, gt, cfg.alpha);
  return loss_iou(pred, gt) + loss_iou(mid, gt);
}

// Gradient of loss_interp_iou with respect to pred's centre-form components.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> grad_loss_interp_iou(const BBox<Scalar>& pred, const BBox<Scalar>& gt,
                                                 const InterpConfig& cfg = {}) {
  const BBox<Scalar> mid = interp_box(pred, gt, cfg.alpha);
  // d mid / d pred = (1 - alpha) I
  return grad_loss_iou(pred, gt) + Scalar(1.0 - cfg.alpha) * grad_loss_iou(mid, gt);
}

}  // namespace weedvg
