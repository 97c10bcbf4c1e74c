#pragma once

// JSON run configuration consumed by `hsvlm train` and `hsvlm ablate`:
//
//   {
//     "dataset":    {"cube": ..., "labels": ..., "split": ..., "split_seed": 1,
//                    "preprocess": {"scale": true, "pca": 25}},
//     "model":      {"window": 15, "mask_ratio": 0.0, "seed": 1, ...},
//     "train":      {"epochs": 50, "batch": 32, "lr": 1e-3, "seeds": [1,2,3,4],
//                    "k_h": 4, "k_s": 4, "variant": "full", "fraction": 0.1},
//     "prototypes": {"path": ...} | {"synth": {"C": 16, "d": 1024, "seed": 7}},
//     "out":        {"checkpoint": ..., "history": ..., "report": ...}
//   }
//
// Relative paths resolve against the directory holding the config file.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "hsvlm/binary_io.hpp"
#include "hsvlm/encoder.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/trainer.hpp"

namespace hsvlm {

struct SynthSpec {
  std::size_t classes = 0;
  std::size_t dim = 1024;
  std::uint64_t seed = 7;
};

struct RunConfig {
  std::filesystem::path cube;
  std::filesystem::path labels;
  std::optional<std::filesystem::path> split;  // loaded if present, else written
  std::uint64_t split_seed = 1;
  bool scale = false;
  std::optional<std::size_t> pca;

  VisionConfig vision;
  std::uint64_t model_seed = 1;
  TrainConfig train;

  std::optional<std::filesystem::path> prototypes_path;
  std::optional<SynthSpec> synth;

  std::optional<std::filesystem::path> out_checkpoint;
  std::optional<std::filesystem::path> out_history;
  std::optional<std::filesystem::path> out_report;

  nlohmann::json source;  // the parsed document, for the digest
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

/// Stable digest of a JSON document (keys sorted by the serializer).
inline std::string config_digest(const nlohmann::json& j) { return hex64(io::fnv1a64(j.dump())); }

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  RunConfig rc;
  rc.source = j;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  try {
    const auto& ds = j.at("dataset");
    rc.cube = resolve(ds.at("cube").get<std::string>());
    rc.labels = resolve(ds.at("labels").get<std::string>());
    if (ds.contains("split")) rc.split = resolve(ds.at("split").get<std::string>());
    rc.split_seed = ds.value("split_seed", rc.split_seed);
    if (ds.contains("preprocess")) {
      const auto& pp = ds.at("preprocess");
      rc.scale = pp.value("scale", false);
      if (pp.contains("pca")) rc.pca = pp.at("pca").get<std::size_t>();
    }

    if (j.contains("model")) {
      const auto& m = j.at("model");
      rc.vision.window = m.value("window", rc.vision.window);
      rc.vision.mask_ratio = m.value("mask_ratio", rc.vision.mask_ratio);
      rc.vision.embed_dim = m.value("embed_dim", rc.vision.embed_dim);
      rc.vision.layers = m.value("layers", rc.vision.layers);
      rc.vision.heads = m.value("heads", rc.vision.heads);
      rc.vision.mlp_dim = m.value("mlp_dim", rc.vision.mlp_dim);
      rc.vision.projection_dim = m.value("projection_dim", rc.vision.projection_dim);
      rc.vision.init_std = m.value("init_std", rc.vision.init_std);
      rc.model_seed = m.value("seed", rc.model_seed);
    }

    if (j.contains("train")) {
      const auto& t = j.at("train");
      rc.train.epochs = t.value("epochs", rc.train.epochs);
      rc.train.batch_size = t.value("batch", rc.train.batch_size);
      rc.train.learning_rate = t.value("lr", rc.train.learning_rate);
      if (t.contains("seeds")) {
        rc.train.seeds = t.at("seeds").get<std::vector<std::uint64_t>>();
      } else {
        rc.train.seeds = {rc.model_seed};
      }
      rc.train.negatives.hard = t.value("k_h", rc.train.negatives.hard);
      rc.train.negatives.semi_hard = t.value("k_s", rc.train.negatives.semi_hard);
      rc.train.variant = parse_train_variant(t.value("variant", std::string("full")));
      rc.train.fraction = t.value("fraction", rc.train.fraction);
    } else {
      rc.train.seeds = {rc.model_seed};
    }

    if (j.contains("prototypes")) {
      const auto& p = j.at("prototypes");
      if (p.contains("path")) rc.prototypes_path = resolve(p.at("path").get<std::string>());
      if (p.contains("synth")) {
        const auto& s = p.at("synth");
        rc.synth = SynthSpec{s.at("C").get<std::size_t>(), s.value("d", std::size_t{1024}), s.value("seed", std::uint64_t{7})};
      }
    }

    if (j.contains("out")) {
      const auto& o = j.at("out");
      if (o.contains("checkpoint")) rc.out_checkpoint = resolve(o.at("checkpoint").get<std::string>());
      if (o.contains("history")) rc.out_history = resolve(o.at("history").get<std::string>());
      if (o.contains("report")) rc.out_report = resolve(o.at("report").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("malformed config: ") + e.what());
  }
  if (rc.prototypes_path && rc.synth) fail(ErrorCode::InvalidConfig, "prototypes: give either 'path' or 'synth', not both");
  if (!rc.prototypes_path && !rc.synth && rc.train.variant != TrainVariant::VisionOnly) {
    fail(ErrorCode::InvalidConfig, "prototypes: a 'path' or 'synth' source is required");
  }
  rc.train.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

}  // namespace hsvlm
