#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsvlm/binary_io.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/hsio.hpp"
#include "hsvlm/rng.hpp"

namespace hsvlm {

struct SplitIndex {
  std::vector<Coord> train;
  std::vector<Coord> test;
  std::vector<std::size_t> train_per_class;  // index c-1 for class c
  std::vector<std::size_t> test_per_class;
  std::uint64_t seed = 0;
  double fraction = 0.0;
};

/// max(1, round-half-up(f·n)). The small epsilon keeps exact halves such as
/// 0.3·5 from rounding down after binary64 representation error.
inline std::size_t train_count_for(std::size_t n, double fraction) {
  const auto rounded = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5 + 1e-9));
  return std::max<std::size_t>(1, std::min(rounded, n));
}

/// Per-class seeded selection of a training subset; background (0) is
/// excluded. Both lists come back sorted in row-major order.
inline SplitIndex stratified_split(const LabelMap& labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) fail(ErrorCode::InvalidConfig, "split fraction must lie in (0, 1)");
  const std::size_t C = labels.num_classes();
  if (C == 0) fail(ErrorCode::EmptyClass, "label map has no labeled pixels");
  std::vector<std::vector<Coord>> by_class(C);
  for (std::uint32_t h = 0; h < labels.height(); ++h)
    for (std::uint32_t w = 0; w < labels.width(); ++w)
      if (const auto l = labels.at(h, w); l > 0) by_class[l - 1].push_back({h, w});

  SplitIndex split;
  split.seed = seed;
  split.fraction = fraction;
  Rng rng(seed, streams::kSplit);
  for (std::size_t c = 0; c < C; ++c) {
    auto& pixels = by_class[c];
    if (pixels.empty()) fail(ErrorCode::EmptyClass, "class " + std::to_string(c + 1) + " has no labeled pixels");
    rng.shuffle(std::span<Coord>(pixels));
    const std::size_t n_train = train_count_for(pixels.size(), fraction);
    split.train.insert(split.train.end(), pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.insert(split.test.end(), pixels.begin() + static_cast<std::ptrdiff_t>(n_train), pixels.end());
    split.train_per_class.push_back(n_train);
    split.test_per_class.push_back(pixels.size() - n_train);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

namespace detail {
inline nlohmann::json coords_to_json(const std::vector<Coord>& coords) {
  auto arr = nlohmann::json::array();
  for (const auto& c : coords) arr.push_back({c.h, c.w});
  return arr;
}
inline std::vector<Coord> coords_from_json(const nlohmann::json& arr) {
  std::vector<Coord> out;
  for (const auto& p : arr) out.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
  return out;
}
}  // namespace detail

inline std::string split_to_json(const SplitIndex& split) {
  nlohmann::json j;
  j["seed"] = split.seed;
  j["fraction"] = split.fraction;
  j["train"] = detail::coords_to_json(split.train);
  j["test"] = detail::coords_to_json(split.test);
  return j.dump() + "\n";
}

inline void save_split(const SplitIndex& split, const std::filesystem::path& path) {
  io::write_text(path, split_to_json(split));
}

/// Reads a split file; per-class counts are recomputed from `labels`.
inline SplitIndex load_split(const std::filesystem::path& path, const LabelMap& labels) {
  const auto bytes = io::read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError, path.string() + ": " + e.what());
  }
  SplitIndex split;
  try {
    split.seed = j.at("seed").get<std::uint64_t>();
    split.fraction = j.at("fraction").get<double>();
    split.train = detail::coords_from_json(j.at("train"));
    split.test = detail::coords_from_json(j.at("test"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError, path.string() + ": malformed split file: " + e.what());
  }
  const std::size_t C = labels.num_classes();
  split.train_per_class.assign(C, 0);
  split.test_per_class.assign(C, 0);
  auto tally = [&](const std::vector<Coord>& coords, std::vector<std::size_t>& counts) {
    for (const auto& c : coords) {
      if (c.h >= labels.height() || c.w >= labels.width()) fail(ErrorCode::OutOfBounds, "split coordinate outside label map");
      const auto l = labels.at(c.h, c.w);
      if (l == 0) fail(ErrorCode::LabelOutOfRange, "split references a background pixel");
      counts[l - 1] += 1;
    }
  };
  tally(split.train, split.train_per_class);
  tally(split.test, split.test_per_class);
  return split;
}

/// Seeded per-epoch order of the training coordinates, chunked into batches
/// of `batch_size`; the final partial batch is kept.
inline std::vector<std::vector<Coord>> epoch_batches(const std::vector<Coord>& train, std::size_t batch_size,
                                                     std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) fail(ErrorCode::InvalidConfig, "batch size must be >= 1");
  std::vector<Coord> order = train;
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + epoch, streams::kBatches);
  rng.shuffle(std::span<Coord>(order));
  std::vector<std::vector<Coord>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

struct PatchBatch {
  Tensor patches;                      // N×S×S×D
  std::vector<std::uint16_t> labels;   // 1..C
  std::vector<Coord> coords;
};

inline PatchBatch make_patch_batch(const PaddedScene& padded, const LabelMap& labels, const std::vector<Coord>& coords,
                                   std::size_t window) {
  if (coords.empty()) fail(ErrorCode::EmptyBatch, "no coordinates");
  const std::size_t D = padded.cube.depth();
  const std::size_t per = window * window * D;
  PatchBatch batch{Tensor({coords.size(), window, window, D}), {}, coords};
  for (std::size_t i = 0; i < coords.size(); ++i) {
    extract_patch_into(padded, coords[i], window, batch.patches.values().subspan(i * per, per));
    batch.labels.push_back(labels.at(coords[i].h, coords[i].w));
  }
  return batch;
}

}  // namespace hsvlm
