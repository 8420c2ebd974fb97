#pragma once

#include <algorithm>
#include <ostream>
#include <stdexcept>

namespace lcanet {

class BoxOutOfImage : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Inclusive pixel rectangle. x runs along columns (width), y along rows (height).
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min + 1; }
  int height() const { return y_max - y_min + 1; }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  static BBox full(int height, int width) { return {0, 0, width - 1, height - 1}; }

  /// Intersection with a height x width image; throws when nothing is left.
  BBox clamped(int height, int width) const {
    BBox b{std::max(x_min, 0), std::max(y_min, 0), std::min(x_max, width - 1), std::min(y_max, height - 1)};
    if (b.x_min > b.x_max || b.y_min > b.y_max) throw BoxOutOfImage("bbox does not intersect the image");
    return b;
  }

  friend bool operator==(const BBox&, const BBox&) = default;
  friend std::ostream& operator<<(std::ostream& os, const BBox& b) {
    return os << '(' << b.x_min << ',' << b.y_min << ',' << b.x_max << ',' << b.y_max << ')';
  }
};

}  // namespace lcanet
