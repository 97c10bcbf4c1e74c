#pragma once

// Synthetic separable scenes for smoke runs and tests.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "hsvlm/error.hpp"
#include "hsvlm/hsio.hpp"
#include "hsvlm/rng.hpp"

namespace hsvlm {

struct SyntheticScene {
  SceneCube cube;
  LabelMap labels;
};

/// The scene is cut into a ⌈√C⌉-wide grid of equal cells and class c
/// (1-based) owns cell c-1. Pixels within `margin` of a cell edge are
/// unlabeled background (label 0, spectrum is noise only). Class pixels get
/// the class mean plus N(0, σ²) per band; means are `separation`·σ apart.
inline SyntheticScene make_separable_scene(std::size_t height, std::size_t width, std::size_t depth,
                                           std::size_t classes, std::uint64_t seed, double separation = 10.0,
                                           double sigma = 1.0, std::size_t margin = 0) {
  if (classes < 2 || classes > depth) fail(ErrorCode::InvalidConfig, "need 2 <= classes <= depth");
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(classes))));
  const std::size_t rows = (classes + grid - 1) / grid;
  if (height < rows * (2 * margin + 1) || width < grid * (2 * margin + 1)) fail(ErrorCode::InvalidConfig, "scene too small for the class grid");

  // one-hot means scaled so that ‖μ_a − μ_b‖ = separation·σ
  const double amplitude = separation * sigma / std::sqrt(2.0);
  Rng rng(seed, streams::kPrototypes + 16);
  std::vector<std::uint16_t> labels(height * width);
  std::vector<float> values(height * width * depth);
  for (std::size_t h = 0; h < height; ++h) {
    for (std::size_t w = 0; w < width; ++w) {
      const std::size_t ch = h * rows / height, cw = w * grid / width;
      const std::size_t c = std::min(ch * grid + cw, classes - 1);
      const std::size_t top = ch * height / rows, bottom = (ch + 1) * height / rows;
      const std::size_t left = cw * width / grid, right = (cw + 1) * width / grid;
      const bool inside = h >= top + margin && h + margin < bottom && w >= left + margin && w + margin < right;
      labels[h * width + w] = inside ? static_cast<std::uint16_t>(c + 1) : 0;
      float* px = values.data() + (h * width + w) * depth;
      for (std::size_t b = 0; b < depth; ++b) {
        px[b] = static_cast<float>((inside && b == c ? amplitude : 0.0) + sigma * rng.normal());
      }
    }
  }
  return {SceneCube(height, width, depth, std::move(values)), LabelMap(height, width, std::move(labels))};
}

}  // namespace hsvlm
