#pragma once

// Class prompt rendering and prototype files.
//
//   .hsp  "HSP1" | u32 C | u32 d | C × (u16 n | n UTF-8 bytes | d f32)

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hsvlm/binary_io.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/kernels.hpp"
#include "hsvlm/rng.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

enum class PromptKind { LabelOnly, ShortText, Descriptive };

inline std::string_view to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::LabelOnly: return "label_only";
    case PromptKind::ShortText: return "short_text";
    case PromptKind::Descriptive: return "descriptive";
  }
  return "descriptive";
}

inline PromptKind parse_prompt_kind(std::string_view s) {
  if (s == "label_only" || s == "label-only") return PromptKind::LabelOnly;
  if (s == "short_text" || s == "short-text") return PromptKind::ShortText;
  if (s == "descriptive") return PromptKind::Descriptive;
  fail(ErrorCode::InvalidConfig, "unknown prompt kind '" + std::string(s) + "'");
}

inline std::string render_prompt(std::string_view class_name, PromptKind kind) {
  if (class_name.empty()) fail(ErrorCode::InvalidConfig, "class name must be nonempty");
  const std::string cls(class_name);
  switch (kind) {
    case PromptKind::LabelOnly:
      return cls;
    case PromptKind::ShortText:
      return "an aerial hyperspectral image of " + cls;
    case PromptKind::Descriptive:
      return "This image shows a large cultivated field of " + cls + ", where " + cls +
             " plants are densely grown in rows; the vivid green " + cls +
             " vegetation is clearly visible from an aerial perspective.";
  }
  return cls;
}

/// C unit-norm class anchors of dimension d, row j for class j+1.
struct PrototypeSet {
  std::vector<std::string> names;
  Tensor matrix;  // C×d

  [[nodiscard]] std::size_t classes() const noexcept { return names.size(); }
  [[nodiscard]] std::size_t dim() const { return matrix.cols(); }
};

namespace detail {
inline void validate_prototype_names(const std::vector<std::string>& names) {
  if (names.size() < 2) fail(ErrorCode::InvalidConfig, "a prototype set needs at least 2 classes");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (n.size() > 0xffff) fail(ErrorCode::InvalidConfig, "class name longer than 65535 bytes");
    if (!seen.insert(n).second) fail(ErrorCode::DuplicateName, "duplicate class name '" + n + "'");
  }
}
}  // namespace detail

/// Builds a set from raw rows; every row is ℓ2-normalized.
inline PrototypeSet make_prototypes(std::vector<std::string> names, const Tensor& raw_rows) {
  detail::validate_prototype_names(names);
  if (raw_rows.rank() != 2 || raw_rows.rows() != names.size()) {
    fail(ErrorCode::DimMismatch, "prototype matrix does not have one row per class");
  }
  Tensor unit({raw_rows.rows(), raw_rows.cols()});
  for (std::size_t r = 0; r < raw_rows.rows(); ++r) {
    const auto row = l2_normalize<float>(raw_rows.row(r));
    std::copy(row.begin(), row.end(), unit.row(r).begin());
  }
  return PrototypeSet{std::move(names), std::move(unit)};
}

inline std::vector<char> prototypes_to_bytes(const PrototypeSet& set) {
  io::ByteWriter w;
  w.magic("HSP1");
  w.u32(static_cast<std::uint32_t>(set.classes()));
  w.u32(static_cast<std::uint32_t>(set.dim()));
  for (std::size_t c = 0; c < set.classes(); ++c) {
    w.u16(static_cast<std::uint16_t>(set.names[c].size()));
    w.raw(set.names[c]);
    for (float v : set.matrix.row(c)) w.f32(v);
  }
  return w.bytes();
}

inline void save_prototypes(const PrototypeSet& set, const std::filesystem::path& path) {
  detail::validate_prototype_names(set.names);
  io::ByteWriter w;
  const auto bytes = prototypes_to_bytes(set);
  w.raw(std::string_view(bytes.data(), bytes.size()));
  w.save(path);
}

inline PrototypeSet parse_prototypes(io::ByteReader r) {
  r.expect_magic("HSP1");
  r.require(8, "header");
  const std::uint32_t C = r.u32();
  const std::uint32_t d = r.u32();
  if (d == 0) fail(ErrorCode::DimMismatch, r.origin() + ": zero embedding dimension");
  std::vector<std::string> names;
  std::vector<float> values;
  for (std::uint32_t c = 0; c < C; ++c) {
    if (r.remaining() < 2) fail(ErrorCode::TruncatedPayload, r.origin() + ": missing record " + std::to_string(c));
    const std::uint16_t n = r.u16();
    if (r.remaining() < n) fail(ErrorCode::TruncatedPayload, r.origin() + ": truncated name in record " + std::to_string(c));
    names.push_back(r.raw(n));
    if (r.remaining() < static_cast<std::size_t>(d) * 4) {
      fail(ErrorCode::DimMismatch, r.origin() + ": record " + std::to_string(c) + " holds fewer than d=" +
                                       std::to_string(d) + " values");
    }
    for (std::uint32_t i = 0; i < d; ++i) values.push_back(r.f32());
  }
  if (!r.at_end()) fail(ErrorCode::DimMismatch, r.origin() + ": bytes remain after the last record (record length != d)");
  if (C == 0) fail(ErrorCode::InvalidConfig, r.origin() + ": empty prototype set");
  return make_prototypes(std::move(names), Tensor({C, d}, std::move(values)));
}

inline PrototypeSet load_prototypes(const std::filesystem::path& path) {
  return parse_prototypes(io::ByteReader::from_file(path));
}

/// Seeded isotropic-Gaussian directions, normalized; deterministic per
/// (C, d, seed). Stands in for embedded prompts when no text model is used.
inline PrototypeSet synth_prototypes(std::size_t classes, std::size_t dim, std::uint64_t seed) {
  if (classes < 2) fail(ErrorCode::InvalidConfig, "synth_prototypes needs C >= 2");
  if (dim < 8) fail(ErrorCode::InvalidConfig, "synth_prototypes needs d >= 8");
  Rng rng(seed, streams::kPrototypes);
  std::vector<double> raw(classes * dim);
  for (auto& v : raw) v = rng.normal();
  Tensor unit({classes, dim});
  for (std::size_t c = 0; c < classes; ++c) {
    const auto row = l2_normalize<double>(std::span<const double>(raw).subspan(c * dim, dim));
    for (std::size_t i = 0; i < dim; ++i) unit.at(c, i) = static_cast<float>(row[i]);
  }
  std::vector<std::string> names;
  for (std::size_t c = 0; c < classes; ++c) names.push_back("class_" + std::to_string(c + 1));
  return PrototypeSet{std::move(names), std::move(unit)};
}

}  // namespace hsvlm
