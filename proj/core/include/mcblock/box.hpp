#pragma once

#include <array>

namespace mcblock {

/// Axis-aligned box in center/size form, image-normalized unless noted.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x1() const noexcept { return x - 0.5 * w; }
  double x2() const noexcept { return x + 0.5 * w; }
  double y1() const noexcept { return y - 0.5 * h; }
  double y2() const noexcept { return y + 0.5 * h; }
  double area() const noexcept { return w * h; }

  static Box from_corners(double x1, double y1, double x2, double y2) noexcept {
    return {0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
  }
  friend bool operator==(const Box&, const Box&) = default;
};

double intersection_area(const Box& a, const Box& b) noexcept;
double iou(const Box& a, const Box& b) noexcept;

/// Generalized IoU in (-1, 1]. Throws ContractError on non-positive sizes.
double giou(const Box& a, const Box& b);

struct GiouWithGrad {
  double value = 0.0;
  /// d giou / d (a.x, a.y, a.w, a.h)
  std::array<double, 4> d_a{};
};

/// GIoU and its (sub)gradient with respect to the first box.
GiouWithGrad giou_with_grad(const Box& a, const Box& b);

}  // namespace mcblock
