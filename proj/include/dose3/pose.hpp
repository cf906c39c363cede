#pragma once

#include <cstddef>
#include <vector>

#include "dose3/lie.hpp"

namespace dose3 {

/// One fixed-length trajectory window: L rotations and L translations.
struct PoseSequence {
  std::vector<RotationMatrix> rotations;
  std::vector<Vec3> translations;

  std::size_t size() const { return rotations.size(); }
};

}  // namespace dose3
