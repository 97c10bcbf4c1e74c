#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "hsvlm/error.hpp"
#include "hsvlm/hsio.hpp"

namespace hsvlm {

/// Dense symmetric eigendecomposition by cyclic Jacobi rotations.
/// `a` is n×n row-major and is destroyed. Eigenvalues come back in
/// descending order; eigenvector k is row k of `vectors`.
struct SymmetricEigen {
  std::vector<double> values;
  std::vector<double> vectors;  // n×n, row k = eigenvector k
};

inline SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto A = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };

  double total = 0.0;
  for (double x : a) total += x * x;
  const double tolerance = 1e-26 * std::max(total, 1e-300);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
    if (off <= tolerance) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (apq == 0.0) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        // Columns of v accumulate the rotations.
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return A(x, x) > A(y, y); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(n * n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = A(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors[k * n + i] = v[i * n + order[k]];
  }
  return out;
}

struct PcaModel {
  std::vector<double> mean;        // length D
  std::vector<double> components;  // k×D, orthonormal rows
  std::vector<double> eigenvalues; // length k, nonincreasing
  std::size_t k = 0;
  std::size_t bands = 0;

  [[nodiscard]] std::span<const double> component(std::size_t i) const {
    return std::span<const double>(components).subspan(i * bands, bands);
  }
};

/// Band-wise sample covariance (divisor N-1) of all H·W pixels.
inline std::vector<double> band_covariance(const SceneCube& cube, const std::vector<double>& mean) {
  const std::size_t D = cube.depth(), N = cube.pixels();
  std::vector<double> cov(D * D, 0.0);
  std::vector<double> centered(D);
  const auto& v = cube.values();
  for (std::size_t p = 0; p < N; ++p) {
    for (std::size_t d = 0; d < D; ++d) centered[d] = static_cast<double>(v[p * D + d]) - mean[d];
    for (std::size_t a = 0; a < D; ++a) {
      const double ca = centered[a];
      double* row = cov.data() + a * D;
      for (std::size_t b = a; b < D; ++b) row[b] += ca * centered[b];
    }
  }
  const double denom = N > 1 ? static_cast<double>(N - 1) : 1.0;
  for (std::size_t a = 0; a < D; ++a) {
    for (std::size_t b = a; b < D; ++b) {
      cov[a * D + b] /= denom;
      cov[b * D + a] = cov[a * D + b];
    }
  }
  return cov;
}

/// Fits the top-k principal axes of the spectra of every pixel in the scene.
/// Each component's largest-magnitude entry is made positive.
inline PcaModel pca_fit(const SceneCube& cube, std::size_t k) {
  const std::size_t D = cube.depth();
  if (k == 0 || D < k) {
    fail(ErrorCode::RankDeficient, "cannot keep " + std::to_string(k) + " components of " + std::to_string(D) + " bands");
  }
  PcaModel model;
  model.k = k;
  model.bands = D;
  model.mean.assign(D, 0.0);
  const auto& v = cube.values();
  for (std::size_t i = 0; i < v.size(); ++i) model.mean[i % D] += v[i];
  for (auto& m : model.mean) m /= static_cast<double>(cube.pixels());

  auto eig = jacobi_eigen(band_covariance(cube, model.mean), D);
  model.eigenvalues.assign(eig.values.begin(), eig.values.begin() + static_cast<std::ptrdiff_t>(k));
  model.components.assign(eig.vectors.begin(), eig.vectors.begin() + static_cast<std::ptrdiff_t>(k * D));
  for (std::size_t c = 0; c < k; ++c) {
    double* row = model.components.data() + c * D;
    std::size_t arg = 0;
    for (std::size_t d = 1; d < D; ++d) {
      if (std::fabs(row[d]) > std::fabs(row[arg])) arg = d;
    }
    if (row[arg] < 0) {
      for (std::size_t d = 0; d < D; ++d) row[d] = -row[d];
    }
  }
  return model;
}

/// out(h, w, :) = components · (cube(h, w, :) - mean)
inline SceneCube pca_transform(const SceneCube& cube, const PcaModel& model) {
  const std::size_t D = cube.depth();
  if (D != model.bands) {
    fail(ErrorCode::ShapeMismatch, "cube has " + std::to_string(D) + " bands, model expects " + std::to_string(model.bands));
  }
  SceneCube out(cube.height(), cube.width(), model.k);
  std::vector<double> centered(D);
  const auto& v = cube.values();
  auto& o = out.values();
  for (std::size_t p = 0; p < cube.pixels(); ++p) {
    for (std::size_t d = 0; d < D; ++d) centered[d] = static_cast<double>(v[p * D + d]) - model.mean[d];
    for (std::size_t c = 0; c < model.k; ++c) {
      const double* row = model.components.data() + c * D;
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += row[d] * centered[d];
      o[p * model.k + c] = static_cast<float>(s);
    }
  }
  return out;
}

}  // namespace hsvlm
