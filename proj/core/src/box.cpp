#include "mcblock/box.hpp"

#include <algorithm>

#include "mcblock/error.hpp"

namespace mcblock {

double intersection_area(const Box& a, const Box& b) noexcept {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

double iou(const Box& a, const Box& b) noexcept {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const Box& a, const Box& b) { return giou_with_grad(a, b).value; }

GiouWithGrad giou_with_grad(const Box& a, const Box& b) {
  if (!(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0))
    throw ContractError("giou requires boxes with positive width and height");

  // Work on corners; d* arrays are derivatives w.r.t. (x1, x2, y1, y2) of a.
  const double ax1 = a.x1(), ax2 = a.x2(), ay1 = a.y1(), ay2 = a.y2();
  const double bx1 = b.x1(), bx2 = b.x2(), by1 = b.y1(), by2 = b.y2();

  double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  double ih = std::min(ay2, by2) - std::max(ay1, by1);
  const bool overlap = iw > 0.0 && ih > 0.0;
  if (!overlap) iw = ih = 0.0;
  const double inter = iw * ih;

  std::array<double, 4> d_inter{};
  if (overlap) {
    const double diw_dx1 = ax1 > bx1 ? -1.0 : 0.0;
    const double diw_dx2 = ax2 < bx2 ? 1.0 : 0.0;
    const double dih_dy1 = ay1 > by1 ? -1.0 : 0.0;
    const double dih_dy2 = ay2 < by2 ? 1.0 : 0.0;
    d_inter = {ih * diw_dx1, ih * diw_dx2, iw * dih_dy1, iw * dih_dy2};
  }

  const double aw = ax2 - ax1, ah = ay2 - ay1;
  const std::array<double, 4> d_area_a{-ah, ah, -aw, aw};
  const double uni = aw * ah + b.area() - inter;

  const double cw = std::max(ax2, bx2) - std::min(ax1, bx1);
  const double ch = std::max(ay2, by2) - std::min(ay1, by1);
  const double enclose = cw * ch;
  const std::array<double, 4> d_enclose{
      ax1 < bx1 ? -ch : 0.0, ax2 > bx2 ? ch : 0.0, ay1 < by1 ? -cw : 0.0, ay2 > by2 ? cw : 0.0};

  GiouWithGrad out;
  out.value = inter / uni - (enclose - uni) / enclose;

  std::array<double, 4> d_corner{};
  for (int k = 0; k < 4; ++k) {
    const double d_uni = d_area_a[k] - d_inter[k];
    d_corner[k] = (d_inter[k] * uni - inter * d_uni) / (uni * uni) +
                  (d_uni * enclose - uni * d_enclose[k]) / (enclose * enclose);
  }
  // x1 = x - w/2, x2 = x + w/2 (same for y).
  out.d_a = {d_corner[0] + d_corner[1], d_corner[2] + d_corner[3],
             0.5 * (d_corner[1] - d_corner[0]), 0.5 * (d_corner[3] - d_corner[2])};
  return out;
}

}  // namespace mcblock
