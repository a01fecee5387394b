#pragma once

#include <array>

#include "cohff/grid.hpp"
#include "cohff/tensor.hpp"

namespace cohff {

enum class PlaneAxis : uint8_t { XY = 0, XZ = 1, YZ = 2 };

struct FeaturePlane {
  PlaneAxis axis = PlaneAxis::XY;
  Tensor data;  // [H,W,F]
};

// (rows, cols) of a plane over the given grid
inline std::array<size_t, 2> plane_dims(PlaneAxis axis, const GridSpec& grid) {
  const size_t X = grid.dims[0], Y = grid.dims[1], Z = grid.dims[2];
  switch (axis) {
    case PlaneAxis::XY: return {X, Y};
    case PlaneAxis::XZ: return {X, Z};
    default: return {Y, Z};
  }
}

}  // namespace cohff
