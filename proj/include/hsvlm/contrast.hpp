#pragma once

// Prototype-contrastive objective restricted to the positive, the top-k
// hardest wrong classes and a random draw from the remaining wrong classes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hsvlm/error.hpp"
#include "hsvlm/kernels.hpp"
#include "hsvlm/rng.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

struct NegativeSpec {
  std::size_t hard = 4;
  std::size_t semi_hard = 4;
};

enum class LossVariant { Full, NoHard, NoSemiHard };

inline std::string_view to_string(LossVariant v) {
  switch (v) {
    case LossVariant::Full: return "full";
    case LossVariant::NoHard: return "no_hard";
    case LossVariant::NoSemiHard: return "no_semi_hard";
  }
  return "full";
}

/// Effective per-row negative counts after clamping to the C-1 wrong classes:
/// hard negatives take priority, semi-hard ones get what remains.
struct EffectiveCounts {
  std::size_t hard = 0;
  std::size_t semi_hard = 0;
};

inline EffectiveCounts effective_counts(std::size_t classes, NegativeSpec spec, LossVariant variant) {
  const std::size_t wrong = classes > 0 ? classes - 1 : 0;
  EffectiveCounts e;
  e.hard = variant == LossVariant::NoHard ? 0 : std::min(spec.hard, wrong);
  e.semi_hard = variant == LossVariant::NoSemiHard ? 0 : std::min(spec.semi_hard, wrong - e.hard);
  return e;
}

/// Row `i` holds s_ij = exp(logit_scale)·⟨z_i, p_j⟩, computed in binary64.
template <class T>
BasicTensor<double> similarity_matrix(const BasicTensor<T>& z, const BasicTensor<T>& prototypes, double logit_scale) {
  if (z.rank() != 2 || prototypes.rank() != 2 || z.cols() != prototypes.cols()) {
    fail(ErrorCode::DimMismatch, "embeddings " + shape_string(z.shape()) + " vs prototypes " +
                                     shape_string(prototypes.shape()));
  }
  auto check_unit = [](const BasicTensor<T>& m, const char* what) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double sq = 0;
      for (const T& v : m.row(r)) sq += static_cast<double>(v) * static_cast<double>(v);
      if (std::fabs(std::sqrt(sq) - 1.0) > 1e-4) {
        fail(ErrorCode::InvalidConfig, std::string(what) + " row " + std::to_string(r) + " is not unit-norm");
      }
    }
  };
  check_unit(z, "embedding");
  check_unit(prototypes, "prototype");
  const double tau = std::exp(logit_scale);
  const std::size_t N = z.rows(), C = prototypes.rows(), d = z.cols();
  BasicTensor<double> s({N, C});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(z.at(i, k)) * static_cast<double>(prototypes.at(j, k));
      s.at(i, j) = tau * dot;
    }
  }
  return s;
}

/// The min(k, C-1) wrong classes with the largest similarity, descending;
/// equal similarities resolve to the lower class id.
inline std::vector<std::size_t> select_hard(std::span<const double> row, std::size_t label, std::size_t k) {
  if (label >= row.size()) fail(ErrorCode::IndexOutOfRange, "label outside the class range");
  std::vector<std::size_t> wrong;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (j != label) wrong.push_back(j);
  const std::size_t take = std::min(k, wrong.size());
  std::partial_sort(wrong.begin(), wrong.begin() + static_cast<std::ptrdiff_t>(take), wrong.end(),
                    [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  wrong.resize(take);
  return wrong;
}

/// Uniform sample without replacement from the classes that are neither the
/// label nor hard negatives; size min(k, |pool|), in draw order.
inline std::vector<std::size_t> sample_semihard(std::size_t classes, std::size_t label, std::span<const std::size_t> hard,
                                                std::size_t k, Rng& rng) {
  std::vector<char> excluded(classes, 0);
  if (label < classes) excluded[label] = 1;
  for (std::size_t h : hard) {
    if (h == label) fail(ErrorCode::OverlapError, "hard negatives contain the label");
    if (h < classes) excluded[h] = 1;
  }
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < classes; ++j)
    if (!excluded[j]) pool.push_back(j);
  const std::size_t take = std::min(k, pool.size());
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.below(static_cast<std::uint32_t>(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

/// Combined logits; entry 0 is always the positive.
struct LogitRow {
  std::vector<double> values;
  std::vector<std::size_t> classes;
};

inline LogitRow assemble_logits(std::span<const double> row, std::size_t label, std::span<const std::size_t> hard,
                                std::span<const std::size_t> semi_hard) {
  std::vector<char> used(row.size(), 0);
  LogitRow out;
  auto add = [&](std::size_t c) {
    if (c >= row.size()) fail(ErrorCode::IndexOutOfRange, "class id outside the similarity row");
    if (used[c]) fail(ErrorCode::OverlapError, "class " + std::to_string(c) + " appears twice in the logit row");
    used[c] = 1;
    out.values.push_back(row[c]);
    out.classes.push_back(c);
  };
  add(label);
  for (auto c : hard) add(c);
  for (auto c : semi_hard) add(c);
  return out;
}

template <class T>
struct ContrastiveLoss {
  double loss = 0;
  BasicTensor<T> grad_embeddings;  // ∂L/∂Z, N×d
  double grad_logit_scale = 0;
  BasicTensor<T> grad_prototypes;  // ∂L/∂P, C×d (P is fixed unless learned)
  std::vector<LogitRow> rows;
};

/// Mean softmax cross-entropy over each sample's combined logit row.
/// Labels are 0-based class ids. Semi-hard draws consume `rng` in sample
/// order.
template <class T>
ContrastiveLoss<T> batch_contrastive_loss(const BasicTensor<T>& z, const BasicTensor<T>& prototypes,
                                          std::span<const std::size_t> labels, NegativeSpec spec, double logit_scale,
                                          Rng& rng, LossVariant variant = LossVariant::Full) {
  const std::size_t N = labels.size();
  if (N == 0) fail(ErrorCode::EmptyBatch, "contrastive loss over an empty batch");
  if (z.rank() != 2 || z.rows() != N) fail(ErrorCode::DimMismatch, "one embedding row per label required");
  const std::size_t C = prototypes.rows(), d = z.cols();
  const auto counts = effective_counts(C, spec, variant);
  if (C > 1 && counts.hard == 0 && counts.semi_hard == 0) {
    fail(ErrorCode::DegenerateSpec, "no negatives in the logit row; the loss would be constant");
  }
  const auto s = similarity_matrix(z, prototypes, logit_scale);
  const double tau = std::exp(logit_scale);

  ContrastiveLoss<T> out;
  out.grad_embeddings = BasicTensor<T>(z.shape());
  out.grad_prototypes = BasicTensor<T>(prototypes.shape());
  std::vector<double> gz(N * d, 0.0), gp(C * d, 0.0);
  double total = 0, g_scale = 0;
  const double inv_n = 1.0 / static_cast<double>(N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t y = labels[i];
    if (y >= C) fail(ErrorCode::LabelOutOfRange, "label " + std::to_string(y) + " >= class count");
    const auto row = s.row(i);
    const auto hard = select_hard(row, y, counts.hard);
    const auto semi = sample_semihard(C, y, hard, counts.semi_hard, rng);
    LogitRow lr = assemble_logits(row, y, hard, semi);
    const auto ce = stable_softmax_cross_entropy<double>(lr.values, 0);
    total += ce.loss;
    for (std::size_t k = 0; k < lr.values.size(); ++k) {
      const double g = ce.grad[k] * inv_n;  // ∂L/∂s_ij
      const std::size_t j = lr.classes[k];
      g_scale += g * lr.values[k];
      for (std::size_t c = 0; c < d; ++c) {
        gz[i * d + c] += g * tau * static_cast<double>(prototypes.at(j, c));
        gp[j * d + c] += g * tau * static_cast<double>(z.at(i, c));
      }
    }
    out.rows.push_back(std::move(lr));
  }
  out.loss = total * inv_n;
  out.grad_logit_scale = g_scale;
  for (std::size_t k = 0; k < gz.size(); ++k) out.grad_embeddings[k] = static_cast<T>(gz[k]);
  for (std::size_t k = 0; k < gp.size(); ++k) out.grad_prototypes[k] = static_cast<T>(gp[k]);
  return out;
}

}  // namespace hsvlm
