#pragma once

// Model checkpoints.
//
//   .hsm  "HSM1" | u32 version | u32 config-hash | sections...
//   section: u16 name length | name | u32 rank | rank × u32 dims | f32 payload
//
// The first section, "config", carries the VisionConfig fields as f32 so a
// checkpoint can be loaded without a separate config file. The two real
// fields are stored as four 16-bit chunks each so they round-trip exactly.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hsvlm/binary_io.hpp"
#include "hsvlm/encoder.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/hsio.hpp"

namespace hsvlm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void write_section(io::ByteWriter& w, const std::string& name, const Tensor& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.values()) w.f32(v);
}

inline std::pair<std::string, Tensor> read_section(io::ByteReader& r) {
  const std::uint16_t n = r.u16();
  std::string name = r.raw(n);
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) fail(ErrorCode::TruncatedPayload, r.origin() + ": bad rank in section '" + name + "'");
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(r.u32());
    count *= shape.back();
  }
  if (count == 0 || count > kMaxVoxels) fail(ErrorCode::DimensionOverflow, r.origin() + ": section '" + name + "' size");
  r.require(count * 4, "section payload");
  std::vector<float> values(count);
  for (auto& v : values) v = r.f32();
  return {std::move(name), Tensor(std::move(shape), std::move(values))};
}

inline void push_f64(std::vector<float>& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<float>((bits >> (16 * i)) & 0xFFFFu));
}

inline double pull_f64(const Tensor& t, std::size_t at) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint64_t>(t[at + i]) << (16 * i);
  return std::bit_cast<double>(bits);
}

inline constexpr std::size_t kConfigFields = 16;

inline Tensor config_to_tensor(const VisionConfig& c) {
  std::vector<float> v{static_cast<float>(c.window),    static_cast<float>(c.token_edge),
                       static_cast<float>(c.input_depth), static_cast<float>(c.embed_dim),
                       static_cast<float>(c.layers),    static_cast<float>(c.heads),
                       static_cast<float>(c.mlp_dim),   static_cast<float>(c.projection_dim)};
  push_f64(v, c.mask_ratio);
  push_f64(v, c.init_std);
  return Tensor({kConfigFields}, std::move(v));
}

inline VisionConfig config_from_tensor(const Tensor& t) {
  if (t.size() != kConfigFields) fail(ErrorCode::VersionMismatch, "config section has " + std::to_string(t.size()) + " fields");
  for (std::size_t i = 8; i < kConfigFields; ++i) {
    if (!(t[i] >= 0.0f && t[i] <= 65535.0f && t[i] == std::floor(t[i]))) fail(ErrorCode::VersionMismatch, "config section is corrupt");
  }
  VisionConfig c;
  c.window = static_cast<std::size_t>(t[0]);
  c.token_edge = static_cast<std::size_t>(t[1]);
  c.input_depth = static_cast<std::size_t>(t[2]);
  c.embed_dim = static_cast<std::size_t>(t[3]);
  c.layers = static_cast<std::size_t>(t[4]);
  c.heads = static_cast<std::size_t>(t[5]);
  c.mlp_dim = static_cast<std::size_t>(t[6]);
  c.projection_dim = static_cast<std::size_t>(t[7]);
  c.mask_ratio = pull_f64(t, 8);
  c.init_std = pull_f64(t, 12);
  return c;
}
}  // namespace detail

inline std::vector<char> checkpoint_bytes(const VisionModel<float>& model) {
  io::ByteWriter w;
  w.magic("HSM1");
  w.u32(kCheckpointVersion);
  w.u32(model.config.hash());
  detail::write_section(w, "config", detail::config_to_tensor(model.config));
  for (const auto& [name, param] : model.named_parameters()) detail::write_section(w, name, *param);
  return w.bytes();
}

inline void save_checkpoint(const VisionModel<float>& model, const std::filesystem::path& path) {
  io::ByteWriter w;
  const auto bytes = checkpoint_bytes(model);
  w.raw(std::string_view(bytes.data(), bytes.size()));
  w.save(path);
}

/// Loads a checkpoint; when `expected` is given its architecture hash must
/// match the file's.
inline VisionModel<float> parse_checkpoint(io::ByteReader r, const std::optional<VisionConfig>& expected = {}) {
  r.expect_magic("HSM1");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::VersionMismatch, r.origin() + ": checkpoint version " + std::to_string(version));
  }
  const std::uint32_t hash = r.u32();
  if (expected && expected->hash() != hash) {
    fail(ErrorCode::VersionMismatch, r.origin() + ": checkpoint architecture hash does not match the requested config");
  }
  auto [cfg_name, cfg_tensor] = detail::read_section(r);
  if (cfg_name != "config") fail(ErrorCode::VersionMismatch, r.origin() + ": first section must be 'config'");
  const VisionConfig config = detail::config_from_tensor(cfg_tensor);
  if (config.hash() != hash) fail(ErrorCode::VersionMismatch, r.origin() + ": config section disagrees with header hash");

  auto model = allocate_model<float>(config);
  for (auto& [name, param] : model.named_parameters()) {
    if (r.at_end()) fail(ErrorCode::TruncatedPayload, r.origin() + ": missing section '" + name + "'");
    auto [got_name, tensor] = detail::read_section(r);
    if (got_name != name) fail(ErrorCode::VersionMismatch, r.origin() + ": expected section '" + name + "', found '" + got_name + "'");
    if (tensor.shape() != param->shape()) {
      fail(ErrorCode::VersionMismatch, r.origin() + ": section '" + name + "' has shape " + shape_string(tensor.shape()));
    }
    *param = std::move(tensor);
  }
  if (!r.at_end()) fail(ErrorCode::TruncatedPayload, r.origin() + ": trailing bytes after the last section");
  return model;
}

inline VisionModel<float> load_checkpoint(const std::filesystem::path& path,
                                          const std::optional<VisionConfig>& expected = {}) {
  return parse_checkpoint(io::ByteReader::from_file(path), expected);
}

}  // namespace hsvlm
