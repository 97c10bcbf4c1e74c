#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsvlm/binary_io.hpp"
#include "hsvlm/encoder.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/hsio.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

/// Index of the prototype row with the largest inner product for each
/// embedding row; ties go to the lowest index.
template <class T>
std::vector<std::size_t> nearest_prototype(const BasicTensor<T>& z, const BasicTensor<T>& prototypes) {
  if (z.rank() != 2 || prototypes.rank() != 2 || z.cols() != prototypes.cols()) {
    fail(ErrorCode::DimMismatch, "embedding width " + std::to_string(z.cols()) + " vs prototype width " +
                                     std::to_string(prototypes.cols()));
  }
  std::vector<std::size_t> out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < prototypes.rows(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < z.cols(); ++k) dot += static_cast<double>(z.at(i, k)) * static_cast<double>(prototypes.at(j, k));
      if (dot > best) {
        best = dot;
        out[i] = j;
      }
    }
  }
  return out;
}

/// Eval-mode encoding followed by nearest-prototype retrieval. Returns
/// 0-based prototype indices.
template <class T>
std::vector<std::size_t> predict_batch(const VisionModel<T>& model, const BasicTensor<T>& patches,
                                       const BasicTensor<T>& prototypes) {
  if (prototypes.cols() != model.config.projection_dim) {
    fail(ErrorCode::DimMismatch, "prototype dimension " + std::to_string(prototypes.cols()) +
                                     " does not match model projection dimension " +
                                     std::to_string(model.config.projection_dim));
  }
  return nearest_prototype(encode_batch(model, patches, false), prototypes);
}

/// Rows are truth, columns prediction; classes 1..C map to index c-1.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}

  [[nodiscard]] std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) fail(ErrorCode::ShapeMismatch, "confusion matrix must be square");
      for (std::size_t j = 0; j < rows.size(); ++j) {
        cm.at(i, j) = rows[i][j];
        cm.total += rows[i][j];
      }
    }
    return cm;
  }
};

inline void confusion_accumulate(ConfusionMatrix& cm, std::span<const std::uint16_t> truth,
                                 std::span<const std::uint16_t> predicted) {
  if (truth.size() != predicted.size()) fail(ErrorCode::ShapeMismatch, "truth and prediction counts differ");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 1 || truth[i] > cm.classes || predicted[i] < 1 || predicted[i] > cm.classes) {
      fail(ErrorCode::LabelOutOfRange, "label outside 1.." + std::to_string(cm.classes));
    }
    cm.at(truth[i] - 1, predicted[i] - 1) += 1;
    cm.total += 1;
  }
}

inline ConfusionMatrix confusion_accumulate(std::size_t classes, std::span<const std::uint16_t> truth,
                                            std::span<const std::uint16_t> predicted) {
  ConfusionMatrix cm(classes);
  confusion_accumulate(cm, truth, predicted);
  return cm;
}

namespace detail {
inline void require_nonempty(const ConfusionMatrix& cm) {
  if (cm.total == 0) fail(ErrorCode::EmptyEvaluation, "no evaluated samples");
}
inline std::uint64_t trace(const ConfusionMatrix& cm) {
  std::uint64_t t = 0;
  for (std::size_t k = 0; k < cm.classes; ++k) t += cm.at(k, k);
  return t;
}
}  // namespace detail

/// 100·trace/N
inline double overall_accuracy(const ConfusionMatrix& cm) {
  detail::require_nonempty(cm);
  return 100.0 * static_cast<double>(detail::trace(cm)) / static_cast<double>(cm.total);
}

/// Per-class recall in percent; classes without support report 0.
inline std::vector<double> per_class_accuracy(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.classes, 0.0);
  for (std::size_t k = 0; k < cm.classes; ++k) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < cm.classes; ++j) row += cm.at(k, j);
    if (row > 0) out[k] = 100.0 * static_cast<double>(cm.at(k, k)) / static_cast<double>(row);
  }
  return out;
}

/// Mean recall over classes that have at least one sample.
inline double average_accuracy(const ConfusionMatrix& cm) {
  detail::require_nonempty(cm);
  const auto pc = per_class_accuracy(cm);
  double sum = 0;
  std::size_t supported = 0;
  for (std::size_t k = 0; k < cm.classes; ++k) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < cm.classes; ++j) row += cm.at(k, j);
    if (row > 0) {
      sum += pc[k];
      ++supported;
    }
  }
  return sum / static_cast<double>(supported);
}

/// κ = (p_o − p_e)/(1 − p_e); when p_e = 1, κ is 1 for perfect agreement and 0 otherwise.
inline double cohen_kappa(const ConfusionMatrix& cm) {
  detail::require_nonempty(cm);
  const double n = static_cast<double>(cm.total);
  const double po = static_cast<double>(detail::trace(cm)) / n;
  double pe = 0;
  for (std::size_t k = 0; k < cm.classes; ++k) {
    double row = 0, col = 0;
    for (std::size_t j = 0; j < cm.classes; ++j) {
      row += static_cast<double>(cm.at(k, j));
      col += static_cast<double>(cm.at(j, k));
    }
    pe += row * col;
  }
  pe /= n * n;
  if (pe == 1.0) return po == 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

struct EvalReport {
  double overall_accuracy = 0;
  double average_accuracy = 0;
  double kappa = 0;
  std::vector<double> per_class;
  ConfusionMatrix confusion;
  std::uint64_t seed = 0;
  std::string variant = "full";
  std::string config_digest;
};

inline EvalReport make_report(const ConfusionMatrix& cm, std::uint64_t seed, std::string variant, std::string digest) {
  EvalReport r;
  r.overall_accuracy = overall_accuracy(cm);
  r.average_accuracy = average_accuracy(cm);
  r.kappa = cohen_kappa(cm);
  r.per_class = per_class_accuracy(cm);
  r.confusion = cm;
  r.seed = seed;
  r.variant = std::move(variant);
  r.config_digest = std::move(digest);
  return r;
}

/// Serializes JSON with sorted keys, two-space indentation and every
/// floating-point number printed with six decimals.
inline std::string canonical_json(const nlohmann::json& j, int indent = 0) {
  const std::string pad(static_cast<std::size_t>(indent + 2), ' ');
  const std::string close_pad(static_cast<std::size_t>(indent), ' ');
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) return "{}";
      std::string s = "{\n";
      bool first = true;
      for (const auto& [k, v] : j.items()) {  // nlohmann::json objects iterate in key order
        if (!first) s += ",\n";
        first = false;
        s += pad + nlohmann::json(k).dump() + ": " + canonical_json(v, indent + 2);
      }
      return s + "\n" + close_pad + "}";
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) return "[]";
      bool scalar = true;
      for (const auto& v : j) scalar = scalar && !v.is_structured();
      std::string s = "[";
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) s += scalar ? ", " : ",";
        if (!scalar) s += "\n" + pad;
        s += canonical_json(j[i], indent + 2);
      }
      return s + (scalar ? "]" : "\n" + close_pad + "]");
    }
    case nlohmann::json::value_t::number_float: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6f", j.get<double>());
      return buf;
    }
    default:
      return j.dump();
  }
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["oa"] = r.overall_accuracy;
  j["aa"] = r.average_accuracy;
  j["kappa"] = r.kappa;
  j["per_class_accuracy"] = r.per_class;
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < r.confusion.classes; ++i) {
    auto row = nlohmann::json::array();
    for (std::size_t k = 0; k < r.confusion.classes; ++k) row.push_back(r.confusion.at(i, k));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  j["samples"] = r.confusion.total;
  j["seed"] = r.seed;
  j["variant"] = r.variant;
  j["config_digest"] = r.config_digest;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.overall_accuracy = j.at("oa").get<double>();
  r.average_accuracy = j.at("aa").get<double>();
  r.kappa = j.at("kappa").get<double>();
  r.per_class = j.at("per_class_accuracy").get<std::vector<double>>();
  r.confusion = ConfusionMatrix::from_rows(j.at("confusion").get<std::vector<std::vector<std::uint64_t>>>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.variant = j.at("variant").get<std::string>();
  r.config_digest = j.at("config_digest").get<std::string>();
  return r;
}

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  io::write_text(path, canonical_json(j) + "\n");
}

inline void write_report(const EvalReport& report, const std::filesystem::path& path) {
  write_json_file(report_to_json(report), path);
}

using Rgb = std::array<std::uint8_t, 3>;

/// Entry 0 is the background colour; entries 1..16 are class colours.
inline const std::vector<Rgb>& default_palette() {
  static const std::vector<Rgb> palette = {
      Rgb{0, 0, 0},       Rgb{230, 25, 75},   Rgb{60, 180, 75},   Rgb{255, 225, 25},  Rgb{0, 130, 200},
      Rgb{245, 130, 48},  Rgb{145, 30, 180},  Rgb{70, 240, 240},  Rgb{240, 50, 230},  Rgb{210, 245, 60},
      Rgb{250, 190, 212}, Rgb{0, 128, 128},   Rgb{220, 190, 255}, Rgb{170, 110, 40},  Rgb{255, 250, 200},
      Rgb{128, 0, 0},     Rgb{170, 255, 195},
  };
  return palette;
}

/// Binary PPM of the predicted classes; pixels whose ground truth is
/// background, or that have no prediction (0), are black.
inline std::vector<char> render_map(const LabelMap& labels, const LabelMap& predictions, std::span<const Rgb> palette) {
  if (labels.height() != predictions.height() || labels.width() != predictions.width()) {
    fail(ErrorCode::ShapeMismatch, "prediction map size differs from label map");
  }
  const std::size_t classes = std::max(labels.num_classes(), predictions.num_classes());
  if (palette.size() < classes + 1) {
    fail(ErrorCode::PaletteTooSmall, "palette has " + std::to_string(palette.size()) + " entries, need " +
                                         std::to_string(classes + 1));
  }
  std::string header = "P6\n" + std::to_string(labels.width()) + " " + std::to_string(labels.height()) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  for (std::size_t h = 0; h < labels.height(); ++h) {
    for (std::size_t w = 0; w < labels.width(); ++w) {
      const auto pred = predictions.at(h, w);
      const Rgb c = (labels.at(h, w) == 0 || pred == 0) ? Rgb{0, 0, 0} : palette[pred];
      for (auto b : c) bytes.push_back(static_cast<char>(b));
    }
  }
  return bytes;
}

inline void export_map(const LabelMap& labels, const LabelMap& predictions, std::span<const Rgb> palette,
                       const std::filesystem::path& path) {
  const auto bytes = render_map(labels, predictions, palette);
  io::write_text(path, std::string_view(bytes.data(), bytes.size()));
}

/// Embedding dump for external plotting:
///   "HSE1" | u32 N | u32 d | N·d f32 | N u16 labels
inline void write_embeddings(const Tensor& z, std::span<const std::uint16_t> labels, const std::filesystem::path& path) {
  if (z.rank() != 2 || z.rows() != labels.size()) fail(ErrorCode::ShapeMismatch, "one label per embedding row");
  io::ByteWriter w;
  w.magic("HSE1");
  w.u32(static_cast<std::uint32_t>(z.rows()));
  w.u32(static_cast<std::uint32_t>(z.cols()));
  for (float v : z.values()) w.f32(v);
  for (auto l : labels) w.u16(l);
  w.save(path);
}

}  // namespace hsvlm
