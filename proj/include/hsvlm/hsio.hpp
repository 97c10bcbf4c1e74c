#pragma once

// Scene and label containers plus the spatial preprocessing steps.
//
//   .hsc  "HSC1" | u32 H | u32 W | u32 D | H·W·D f32, (h, w, d) order, d fastest
//   .hsl  "HSL1" | u32 H | u32 W | H·W u16, row-major
//
// All integers and floats are little-endian.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "hsvlm/binary_io.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

inline constexpr std::uint64_t kMaxVoxels = 1ULL << 31;

struct Coord {
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  friend auto operator<=>(const Coord&, const Coord&) = default;
};

class SceneCube {
 public:
  SceneCube() = default;
  SceneCube(std::size_t height, std::size_t width, std::size_t depth, float fill = 0.0f)
      : SceneCube(height, width, depth, std::vector<float>(checked_volume(height, width, depth), fill)) {}
  SceneCube(std::size_t height, std::size_t width, std::size_t depth, std::vector<float> values)
      : height_(height), width_(width), depth_(depth), values_(std::move(values)) {
    if (values_.size() != checked_volume(height, width, depth)) {
      fail(ErrorCode::ShapeMismatch, "cube payload size does not match dimensions");
    }
  }

  [[nodiscard]] std::size_t height() const noexcept { return height_; }
  [[nodiscard]] std::size_t width() const noexcept { return width_; }
  [[nodiscard]] std::size_t depth() const noexcept { return depth_; }
  [[nodiscard]] std::size_t pixels() const noexcept { return height_ * width_; }

  float& at(std::size_t h, std::size_t w, std::size_t d) { return values_[(h * width_ + w) * depth_ + d]; }
  [[nodiscard]] float at(std::size_t h, std::size_t w, std::size_t d) const {
    return values_[(h * width_ + w) * depth_ + d];
  }
  [[nodiscard]] std::span<const float> pixel(std::size_t h, std::size_t w) const {
    return std::span<const float>(values_).subspan((h * width_ + w) * depth_, depth_);
  }
  [[nodiscard]] std::span<float> pixel(std::size_t h, std::size_t w) {
    return std::span<float>(values_).subspan((h * width_ + w) * depth_, depth_);
  }
  [[nodiscard]] const std::vector<float>& values() const noexcept { return values_; }
  [[nodiscard]] std::vector<float>& values() noexcept { return values_; }

  friend bool operator==(const SceneCube&, const SceneCube&) = default;

  static std::size_t checked_volume(std::size_t h, std::size_t w, std::size_t d) {
    if (h == 0 || w == 0 || d == 0) fail(ErrorCode::ShapeMismatch, "cube dimensions must be >= 1");
    const auto volume = static_cast<std::uint64_t>(h) * w * d;
    if (volume > kMaxVoxels) fail(ErrorCode::DimensionOverflow, "cube has more than 2^31 values");
    return static_cast<std::size_t>(volume);
  }

 private:
  std::size_t height_ = 0, width_ = 0, depth_ = 0;
  std::vector<float> values_;
};

class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, std::vector<std::uint16_t> labels)
      : height_(height), width_(width), labels_(std::move(labels)) {
    if (height == 0 || width == 0) fail(ErrorCode::ShapeMismatch, "label map dimensions must be >= 1");
    if (static_cast<std::uint64_t>(height) * width > kMaxVoxels) fail(ErrorCode::DimensionOverflow, "label map too large");
    if (labels_.size() != height * width) fail(ErrorCode::ShapeMismatch, "label payload size does not match dimensions");
  }

  [[nodiscard]] std::size_t height() const noexcept { return height_; }
  [[nodiscard]] std::size_t width() const noexcept { return width_; }
  [[nodiscard]] std::uint16_t at(std::size_t h, std::size_t w) const { return labels_[h * width_ + w]; }
  std::uint16_t& at(std::size_t h, std::size_t w) { return labels_[h * width_ + w]; }
  [[nodiscard]] const std::vector<std::uint16_t>& labels() const noexcept { return labels_; }

  /// Largest label present, i.e. the class count C.
  [[nodiscard]] std::size_t num_classes() const {
    return labels_.empty() ? 0 : *std::max_element(labels_.begin(), labels_.end());
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<std::uint16_t> labels_;
};

inline void save_cube(const SceneCube& cube, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic("HSC1");
  w.u32(static_cast<std::uint32_t>(cube.height()));
  w.u32(static_cast<std::uint32_t>(cube.width()));
  w.u32(static_cast<std::uint32_t>(cube.depth()));
  for (float v : cube.values()) w.f32(v);
  w.save(path);
}

inline SceneCube parse_cube(io::ByteReader r) {
  r.expect_magic("HSC1");
  r.require(12, "header");
  const std::uint32_t h = r.u32(), w = r.u32(), d = r.u32();
  if (h == 0 || w == 0 || d == 0) fail(ErrorCode::TruncatedPayload, r.origin() + ": zero dimension");
  const std::uint64_t count = static_cast<std::uint64_t>(h) * w * d;
  if (count > kMaxVoxels) fail(ErrorCode::DimensionOverflow, r.origin() + ": H·W·D exceeds 2^31");
  r.require(count * 4, "payload");
  if (r.remaining() != count * 4) fail(ErrorCode::TruncatedPayload, r.origin() + ": trailing bytes after payload");
  std::vector<float> values(count);
  for (auto& v : values) v = r.f32();
  return SceneCube(h, w, d, std::move(values));
}

inline SceneCube load_cube(const std::filesystem::path& path) { return parse_cube(io::ByteReader::from_file(path)); }

inline void save_labels(const LabelMap& labels, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic("HSL1");
  w.u32(static_cast<std::uint32_t>(labels.height()));
  w.u32(static_cast<std::uint32_t>(labels.width()));
  for (auto l : labels.labels()) w.u16(l);
  w.save(path);
}

inline LabelMap parse_labels(io::ByteReader r) {
  r.expect_magic("HSL1");
  r.require(8, "header");
  const std::uint32_t h = r.u32(), w = r.u32();
  if (h == 0 || w == 0) fail(ErrorCode::TruncatedPayload, r.origin() + ": zero dimension");
  const std::uint64_t count = static_cast<std::uint64_t>(h) * w;
  if (count > kMaxVoxels) fail(ErrorCode::DimensionOverflow, r.origin() + ": H·W exceeds 2^31");
  r.require(count * 2, "payload");
  if (r.remaining() != count * 2) fail(ErrorCode::TruncatedPayload, r.origin() + ": trailing bytes after payload");
  std::vector<std::uint16_t> labels(count);
  for (auto& l : labels) l = r.u16();
  return LabelMap(h, w, std::move(labels));
}

inline LabelMap load_labels(const std::filesystem::path& path) { return parse_labels(io::ByteReader::from_file(path)); }

/// Maps every band independently onto [0, 1]; constant bands become 0.
inline SceneCube minmax_scale_bands(const SceneCube& cube) {
  const std::size_t D = cube.depth();
  std::vector<double> lo(D, std::numeric_limits<double>::infinity());
  std::vector<double> hi(D, -std::numeric_limits<double>::infinity());
  const auto& v = cube.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t d = i % D;
    lo[d] = std::min(lo[d], static_cast<double>(v[i]));
    hi[d] = std::max(hi[d], static_cast<double>(v[i]));
  }
  SceneCube out = cube;
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const std::size_t d = i % D;
    const double range = hi[d] - lo[d];
    o[i] = range > 0 ? static_cast<float>((static_cast<double>(v[i]) - lo[d]) / range) : 0.0f;
  }
  return out;
}

/// Zero border of `radius` pixels on both spatial axes.
inline SceneCube pad_scene(const SceneCube& cube, std::size_t radius) {
  if (radius == 0) return cube;
  SceneCube out(cube.height() + 2 * radius, cube.width() + 2 * radius, cube.depth());
  for (std::size_t h = 0; h < cube.height(); ++h) {
    for (std::size_t w = 0; w < cube.width(); ++w) {
      const auto src = cube.pixel(h, w);
      std::copy(src.begin(), src.end(), out.pixel(h + radius, w + radius).begin());
    }
  }
  return out;
}

/// A scene padded once for windowed access by original-image coordinates.
struct PaddedScene {
  SceneCube cube;
  std::size_t radius = 0;

  PaddedScene() = default;
  PaddedScene(const SceneCube& original, std::size_t r) : cube(pad_scene(original, r)), radius(r) {}

  [[nodiscard]] std::size_t height() const noexcept { return cube.height() - 2 * radius; }
  [[nodiscard]] std::size_t width() const noexcept { return cube.width() - 2 * radius; }
};

/// Copies the S×S window centred on `center` (original coordinates) into
/// `out`, laid out (h', w', d) with d fastest. The padding radius must be at
/// least (S-1)/2.
inline void extract_patch_into(const PaddedScene& padded, Coord center, std::size_t window, std::span<float> out) {
  if (window % 2 == 0) fail(ErrorCode::InvalidConfig, "window must be odd");
  const std::size_t half = (window - 1) / 2;
  if (half > padded.radius) fail(ErrorCode::OutOfBounds, "padding radius smaller than half-window");
  if (center.h >= padded.height() || center.w >= padded.width()) {
    fail(ErrorCode::OutOfBounds, "patch center (" + std::to_string(center.h) + "," + std::to_string(center.w) +
                                     ") outside the scene");
  }
  const std::size_t D = padded.cube.depth();
  if (out.size() != window * window * D) fail(ErrorCode::ShapeMismatch, "patch buffer size");
  const std::size_t h0 = center.h + padded.radius - half;
  const std::size_t w0 = center.w + padded.radius - half;
  for (std::size_t dh = 0; dh < window; ++dh) {
    for (std::size_t dw = 0; dw < window; ++dw) {
      const auto src = padded.cube.pixel(h0 + dh, w0 + dw);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>((dh * window + dw) * D));
    }
  }
}

inline Tensor extract_patch(const PaddedScene& padded, Coord center, std::size_t window) {
  Tensor patch({window, window, padded.cube.depth()});
  extract_patch_into(padded, center, window, patch.values());
  return patch;
}

}  // namespace hsvlm
