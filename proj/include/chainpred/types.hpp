#pragma once

#include <vector>

namespace chainpred {

// Joint location in image pixel coordinates.
struct Joint {
  double x = 0.0;
  double y = 0.0;
  bool visible = true;
};

using Pose = std::vector<Joint>;

// Heatmap cell coordinate (column, row).
struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

// Heatmap cells sit at image pixel (c + 0.5) * stride.
inline double cell_to_image(int c, int stride) {
  return (c + 0.5) * stride;
}
inline double image_to_cell(double px, int stride) {
  return px / stride - 0.5;
}

}  // namespace chainpred
