#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "hsvlm/binary_io.hpp"
#include "hsvlm/hsio.hpp"
#include "hsvlm/pca.hpp"
#include "hsvlm/rng.hpp"
#include "hsvlm/split.hpp"

using namespace hsvlm;
namespace fs = std::filesystem;

namespace {

template <class Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no hsvlm::Error thrown";
  return ErrorCode::IoError;
}

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "hsvlm_test_hsio";
  fs::create_directories(dir);
  return dir;
}

SceneCube random_cube(Rng& rng, std::size_t h, std::size_t w, std::size_t d) {
  SceneCube c(h, w, d);
  for (auto& v : c.values()) v = static_cast<float>(rng.normal());
  return c;
}

std::vector<char> cube_bytes(const SceneCube& c) {
  io::ByteWriter w;
  w.magic("HSC1");
  w.u32(static_cast<std::uint32_t>(c.height()));
  w.u32(static_cast<std::uint32_t>(c.width()));
  w.u32(static_cast<std::uint32_t>(c.depth()));
  for (float v : c.values()) w.f32(v);
  return w.bytes();
}

}  // namespace

TEST(CubeFile, TwoByTwoRoundTrip) {
  const auto path = temp_dir() / "small.hsc";
  save_cube(SceneCube(2, 2, 1, std::vector<float>{1, 2, 3, 4}), path);
  const auto c = load_cube(path);
  EXPECT_EQ(c.height(), 2u);
  EXPECT_EQ(c.width(), 2u);
  EXPECT_EQ(c.depth(), 1u);
  EXPECT_EQ(c.at(0, 0, 0), 1.0f);
  EXPECT_EQ(c.at(0, 1, 0), 2.0f);
  EXPECT_EQ(c.at(1, 0, 0), 3.0f);
  EXPECT_EQ(c.at(1, 1, 0), 4.0f);
  // header layout: magic, then little-endian H, W, D
  const auto bytes = io::read_file_bytes(path);
  ASSERT_EQ(bytes.size(), 4u + 12u + 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HSC1");
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[5], 0);
}

TEST(CubeFile, BadMagic) {
  auto bytes = cube_bytes(SceneCube(1, 1, 1));
  bytes[0] = 'X';
  bytes[1] = 'X';
  bytes[2] = 'X';
  bytes[3] = 'X';
  EXPECT_EQ(code_of([&] { parse_cube(io::ByteReader(bytes, "x")); }), ErrorCode::BadMagic);
}

TEST(CubeFile, TruncatedAndTrailingPayload) {
  auto bytes = cube_bytes(SceneCube(2, 3, 2));
  auto cut = bytes;
  cut.pop_back();
  EXPECT_EQ(code_of([&] { parse_cube(io::ByteReader(cut, "x")); }), ErrorCode::TruncatedPayload);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_EQ(code_of([&] { parse_cube(io::ByteReader(extra, "x")); }), ErrorCode::TruncatedPayload);
  std::vector<char> header_only(bytes.begin(), bytes.begin() + 10);
  EXPECT_EQ(code_of([&] { parse_cube(io::ByteReader(header_only, "x")); }), ErrorCode::TruncatedPayload);
}

TEST(CubeFile, DimensionOverflowRejectedBeforePayload) {
  io::ByteWriter w;
  w.magic("HSC1");
  w.u32(65536);
  w.u32(65536);
  w.u32(2);
  EXPECT_EQ(code_of([&] { parse_cube(io::ByteReader(w.bytes(), "x")); }), ErrorCode::DimensionOverflow);
}

TEST(CubeFile, RandomFilesRoundTripBytewise) {
  Rng rng(1, 0);
  const auto path = temp_dir() / "rt.hsc";
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_cube(rng, 1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(6));
    const auto bytes = cube_bytes(c);
    io::write_text(path, std::string_view(bytes.data(), bytes.size()));
    const auto loaded = load_cube(path);
    EXPECT_EQ(loaded, c);
    save_cube(loaded, path);
    EXPECT_EQ(io::read_file_bytes(path), bytes);
  }
}

TEST(LabelFile, RoundTripAndMagic) {
  Rng rng(2, 0);
  const auto path = temp_dir() / "labels.hsl";
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8);
    std::vector<std::uint16_t> l(h * w);
    for (auto& v : l) v = static_cast<std::uint16_t>(rng.below(17));
    const LabelMap m(h, w, l);
    save_labels(m, path);
    const auto back = load_labels(path);
    EXPECT_EQ(back.labels(), l);
    EXPECT_EQ(back.num_classes(), *std::max_element(l.begin(), l.end()));
  }
  auto bytes = io::read_file_bytes(path);
  bytes[3] = '9';
  EXPECT_EQ(code_of([&] { parse_labels(io::ByteReader(bytes, "x")); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([] { load_cube("/nonexistent/file.hsc"); }), ErrorCode::IoError);
}

TEST(MinMaxScale, Examples) {
  const SceneCube c(3, 1, 2, std::vector<float>{10, 5, 20, 5, 30, 5});
  const auto s = minmax_scale_bands(c);
  EXPECT_EQ(s.at(0, 0, 0), 0.0f);
  EXPECT_EQ(s.at(1, 0, 0), 0.5f);
  EXPECT_EQ(s.at(2, 0, 0), 1.0f);
  for (std::size_t h = 0; h < 3; ++h) EXPECT_EQ(s.at(h, 0, 1), 0.0f);
}

TEST(MinMaxScale, RandomCubePreservesOrderAndSpansUnitRange) {
  Rng rng(3, 0);
  const auto c = random_cube(rng, 7, 6, 4);
  const auto s = minmax_scale_bands(c);
  for (std::size_t d = 0; d < 4; ++d) {
    std::vector<std::pair<float, float>> pairs;
    for (std::size_t h = 0; h < 7; ++h) {
      for (std::size_t w = 0; w < 6; ++w) pairs.emplace_back(c.at(h, w, d), s.at(h, w, d));
    }
    const auto [lo, hi] = std::minmax_element(pairs.begin(), pairs.end(),
                                              [](auto a, auto b) { return a.second < b.second; });
    EXPECT_EQ(lo->second, 0.0f);
    EXPECT_EQ(hi->second, 1.0f);
    std::sort(pairs.begin(), pairs.end());
    for (std::size_t i = 1; i < pairs.size(); ++i) EXPECT_LE(pairs[i - 1].second, pairs[i].second);
  }
}

namespace {

struct EigenOracle {
  Eigen::VectorXd values;   // descending
  Eigen::MatrixXd vectors;  // columns, descending
};

EigenOracle eigen_oracle(const SceneCube& c) {
  const std::size_t D = c.depth(), N = c.pixels();
  Eigen::MatrixXd X(N, D);
  for (std::size_t p = 0; p < N; ++p) {
    for (std::size_t d = 0; d < D; ++d) X(p, d) = c.values()[p * D + d];
  }
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(N - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  return {solver.eigenvalues().reverse(), solver.eigenvectors().rowwise().reverse()};
}

}  // namespace

TEST(Pca, MatchesDenseEigensolver) {
  Rng rng(4, 0);
  for (int trial = 0; trial < 10; ++trial) {
    auto c = random_cube(rng, 40, 40, 8);
    // correlate the bands so the spectrum is not flat
    for (std::size_t p = 0; p < c.pixels(); ++p) {
      auto px = c.pixel(p / 40, p % 40);
      for (std::size_t d = 1; d < 8; ++d) px[d] += 0.5f * px[d - 1] * static_cast<float>(d);
    }
    const auto model = pca_fit(c, 5);
    const auto oracle = eigen_oracle(c);
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_NEAR(model.eigenvalues[k], oracle.values(static_cast<Eigen::Index>(k)), 1e-4 * std::max(1.0, oracle.values(0)));
      Eigen::VectorXd v = oracle.vectors.col(static_cast<Eigen::Index>(k));
      Eigen::Index arg;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;
      for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(model.component(k)[d], v(static_cast<Eigen::Index>(d)), 1e-4);
    }
  }
}

TEST(Pca, ComponentsOrthonormalAndEigenvaluesSorted) {
  Rng rng(5, 0);
  const auto c = random_cube(rng, 30, 20, 12);
  const auto model = pca_fit(c, 12);
  double worst = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 12; ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < 12; ++d) dot += model.component(i)[d] * model.component(j)[d];
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  }
  EXPECT_LT(worst, 1e-5);
  for (std::size_t k = 1; k < 12; ++k) EXPECT_GE(model.eigenvalues[k - 1], model.eigenvalues[k]);
  for (double e : model.eigenvalues) EXPECT_GE(e, -1e-6);
}

TEST(Pca, DegenerateSubspaceHasZeroThirdEigenvalue) {
  Rng rng(6, 0);
  SceneCube c(20, 20, 3);
  for (std::size_t p = 0; p < 400; ++p) {
    const double a = rng.normal(), b = rng.normal();
    auto px = c.pixel(p / 20, p % 20);
    px[0] = static_cast<float>(a);
    px[1] = static_cast<float>(b);
    px[2] = static_cast<float>(a + b);
  }
  const auto model = pca_fit(c, 3);
  EXPECT_LE(std::abs(model.eigenvalues[2]), 1e-6);
}

TEST(Pca, IsotropicDataHasNearlyEqualEigenvalues) {
  Rng rng(7, 0);
  const auto c = random_cube(rng, 100, 100, 4);
  const auto model = pca_fit(c, 4);
  for (double e : model.eigenvalues) EXPECT_NEAR(e, 1.0, 0.05);
}

TEST(Pca, RankDeficientWhenTooFewBands) {
  EXPECT_EQ(code_of([] { pca_fit(SceneCube(2, 2, 3, 1.0f), 4); }), ErrorCode::RankDeficient);
}

TEST(Pca, TransformCentersAndProjects) {
  Rng rng(8, 0);
  auto c = random_cube(rng, 10, 10, 6);
  const auto model = pca_fit(c, 3);
  SceneCube probe(1, 2, 6);
  for (std::size_t d = 0; d < 6; ++d) {
    probe.at(0, 0, d) = static_cast<float>(model.mean[d]);
    probe.at(0, 1, d) = static_cast<float>(model.mean[d] + model.component(0)[d]);
  }
  const auto out = pca_transform(probe, model);
  ASSERT_EQ(out.depth(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(out.at(0, 0, k), 0.0, 1e-5);
    EXPECT_NEAR(out.at(0, 1, k), k == 0 ? 1.0 : 0.0, 1e-5);
  }
  EXPECT_EQ(code_of([&] { pca_transform(SceneCube(1, 1, 5), model); }), ErrorCode::ShapeMismatch);
}

TEST(Pca, ReconstructionResidualEqualsTailEigenvalues) {
  Rng rng(9, 0);
  const auto c = random_cube(rng, 30, 30, 8);
  const auto model = pca_fit(c, 3);
  const auto z = pca_transform(c, model);
  double residual = 0;
  for (std::size_t p = 0; p < c.pixels(); ++p) {
    for (std::size_t d = 0; d < 8; ++d) {
      double rec = model.mean[d];
      for (std::size_t k = 0; k < 3; ++k) rec += model.component(k)[d] * z.values()[p * 3 + k];
      const double e = c.values()[p * 8 + d] - rec;
      residual += e * e;
    }
  }
  const auto oracle = eigen_oracle(c);
  const double tail = oracle.values.tail(5).sum() * static_cast<double>(c.pixels() - 1);
  EXPECT_NEAR(residual / tail, 1.0, 1e-3);
}

TEST(Padding, ZeroRingAndIdentity) {
  const SceneCube c(2, 2, 1, std::vector<float>{1, 2, 3, 4});
  const auto p = pad_scene(c, 1);
  ASSERT_EQ(p.height(), 4u);
  ASSERT_EQ(p.width(), 4u);
  for (std::size_t h = 0; h < 4; ++h) {
    for (std::size_t w = 0; w < 4; ++w) {
      const bool border = h == 0 || w == 0 || h == 3 || w == 3;
      if (border) {
        EXPECT_EQ(p.at(h, w, 0), 0.0f);
      }
    }
  }
  EXPECT_EQ(p.at(1, 1, 0), 1.0f);
  EXPECT_EQ(p.at(2, 2, 0), 4.0f);
  EXPECT_EQ(pad_scene(c, 0), c);
}

TEST(Padding, SumIsConserved) {
  Rng rng(10, 0);
  const auto c = random_cube(rng, 13, 11, 5);
  const auto p = pad_scene(c, 7);
  const double a = std::accumulate(c.values().begin(), c.values().end(), 0.0);
  const double b = std::accumulate(p.values().begin(), p.values().end(), 0.0);
  EXPECT_EQ(a, b);
}

TEST(Patch, CornerWindowContainsBorder) {
  const SceneCube c(4, 4, 2, 1.0f);
  const PaddedScene padded(c, 1);
  const auto patch = extract_patch(padded, {0, 0}, 3);
  EXPECT_EQ(patch.shape(), (Shape{3, 3, 2}));
  int zero_positions = 0;
  for (std::size_t i = 0; i < 9; ++i) {
    if (patch[i * 2] == 0.0f && patch[i * 2 + 1] == 0.0f) ++zero_positions;
  }
  EXPECT_EQ(zero_positions, 5);
}

TEST(Patch, DefaultWindowShape) {
  const SceneCube c(20, 20, 25, 0.5f);
  const PaddedScene padded(c, 7);
  EXPECT_EQ(extract_patch(padded, {10, 3}, 15).shape(), (Shape{15, 15, 25}));
}

TEST(Patch, MatchesBoundsCheckedGather) {
  Rng rng(11, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t H = 1 + rng.below(12), W = 1 + rng.below(12), D = 1 + rng.below(4);
    const std::size_t S = 3 * (1 + 2 * rng.below(3));  // 3, 9, 15
    const auto c = random_cube(rng, H, W, D);
    const PaddedScene padded(c, (S - 1) / 2);
    const Coord center{rng.below(static_cast<std::uint32_t>(H)), rng.below(static_cast<std::uint32_t>(W))};
    const auto patch = extract_patch(padded, center, S);
    const long r = static_cast<long>((S - 1) / 2);
    for (std::size_t a = 0; a < S; ++a) {
      for (std::size_t b = 0; b < S; ++b) {
        const long h = static_cast<long>(center.h) + static_cast<long>(a) - r;
        const long w = static_cast<long>(center.w) + static_cast<long>(b) - r;
        const bool inside = h >= 0 && w >= 0 && h < static_cast<long>(H) && w < static_cast<long>(W);
        for (std::size_t d = 0; d < D; ++d) {
          const float expect = inside ? c.at(static_cast<std::size_t>(h), static_cast<std::size_t>(w), d) : 0.0f;
          ASSERT_EQ(patch[(a * S + b) * D + d], expect);
        }
      }
    }
  }
}

TEST(Patch, Guards) {
  const PaddedScene padded(SceneCube(4, 4, 1), 1);
  EXPECT_EQ(code_of([&] { extract_patch(padded, {4, 0}, 3); }), ErrorCode::OutOfBounds);
  EXPECT_EQ(code_of([&] { extract_patch(padded, {0, 0}, 5); }), ErrorCode::OutOfBounds);
  EXPECT_EQ(code_of([&] { extract_patch(padded, {0, 0}, 4); }), ErrorCode::InvalidConfig);
}

namespace {

LabelMap label_map_from_histogram(const std::vector<std::size_t>& counts, std::size_t width, Rng& rng) {
  std::vector<std::uint16_t> l;
  for (std::size_t c = 0; c < counts.size(); ++c) l.insert(l.end(), counts[c], static_cast<std::uint16_t>(c + 1));
  const std::size_t background = (width - l.size() % width) % width + width;
  l.insert(l.end(), background, 0);
  rng.shuffle(std::span<std::uint16_t>(l));
  return LabelMap(l.size() / width, width, l);
}

}  // namespace

TEST(Split, RoundingRuleExamples) {
  EXPECT_EQ(train_count_for(20, 0.1), 2u);
  EXPECT_EQ(train_count_for(7, 0.1), 1u);
  EXPECT_EQ(train_count_for(15, 0.1), 2u);  // 1.5 rounds half up
  EXPECT_EQ(train_count_for(25, 0.1), 3u);
  EXPECT_EQ(train_count_for(1, 0.9), 1u);
}

TEST(Split, IndianPinesHistogramCount) {
  const std::vector<std::size_t> histogram{46, 1428, 830, 237, 483, 730, 28, 478, 20, 972, 2455, 593, 205, 1265, 386, 93};
  Rng rng(12, 0);
  const auto labels = label_map_from_histogram(histogram, 145, rng);
  const auto split = stratified_split(labels, 0.1, 1);
  EXPECT_EQ(split.train.size() + split.test.size(), 10249u);
  EXPECT_EQ(split.train.size(), 1027u);
  EXPECT_EQ(split.train_per_class,
            (std::vector<std::size_t>{5, 143, 83, 24, 48, 73, 3, 48, 2, 97, 246, 59, 21, 127, 39, 9}));
}

TEST(Split, IsAPartitionOfLabeledPixels) {
  Rng rng(13, 0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> hist;
    for (int c = 0; c < 5; ++c) hist.push_back(1 + rng.below(40));
    const auto labels = label_map_from_histogram(hist, 9, rng);
    const double f = 0.05 + 0.9 * rng.uniform();
    const auto split = stratified_split(labels, f, trial);
    std::set<Coord> train(split.train.begin(), split.train.end()), test(split.test.begin(), split.test.end());
    EXPECT_EQ(train.size(), split.train.size());
    for (const auto& c : split.train) EXPECT_FALSE(test.count(c));
    std::size_t labeled = 0;
    for (std::uint32_t h = 0; h < labels.height(); ++h) {
      for (std::uint32_t w = 0; w < labels.width(); ++w) {
        if (labels.at(h, w) == 0) {
          EXPECT_FALSE(train.count({h, w}) || test.count({h, w}));
        } else {
          ++labeled;
          EXPECT_TRUE(train.count({h, w}) || test.count({h, w}));
        }
      }
    }
    EXPECT_EQ(labeled, train.size() + test.size());
    for (std::size_t c = 0; c < hist.size(); ++c) {
      EXPECT_EQ(split.train_per_class[c], train_count_for(hist[c], f));
      EXPECT_GE(split.train_per_class[c], 1u);
    }
  }
}

TEST(Split, DeterministicAndSeedSensitive) {
  Rng rng(14, 0);
  const auto labels = label_map_from_histogram({50, 60, 70}, 10, rng);
  const auto a = stratified_split(labels, 0.2, 3);
  const auto b = stratified_split(labels, 0.2, 3);
  const auto c = stratified_split(labels, 0.2, 4);
  EXPECT_EQ(split_to_json(a), split_to_json(b));
  EXPECT_NE(split_to_json(a), split_to_json(c));
}

TEST(Split, Guards) {
  const LabelMap gap(1, 3, {1, 3, 0});
  EXPECT_EQ(code_of([&] { stratified_split(gap, 0.1, 1); }), ErrorCode::EmptyClass);
  const LabelMap ok(1, 2, {1, 2});
  EXPECT_EQ(code_of([&] { stratified_split(ok, 0.0, 1); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([&] { stratified_split(ok, 1.0, 1); }), ErrorCode::InvalidConfig);
}

TEST(Split, FileRoundTrip) {
  Rng rng(15, 0);
  const auto labels = label_map_from_histogram({12, 30, 9}, 8, rng);
  const auto split = stratified_split(labels, 0.3, 9);
  const auto path = temp_dir() / "split.json";
  save_split(split, path);
  const auto back = load_split(path, labels);
  EXPECT_EQ(back.train, split.train);
  EXPECT_EQ(back.test, split.test);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_DOUBLE_EQ(back.fraction, 0.3);
  EXPECT_EQ(back.train_per_class, split.train_per_class);
}

TEST(Batches, PartialFinalBatchKept) {
  std::vector<Coord> train;
  for (std::uint32_t i = 0; i < 10; ++i) train.push_back({i, 0});
  const auto batches = epoch_batches(train, 4, 1, 0);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 4u);
  EXPECT_EQ(batches[1].size(), 4u);
  EXPECT_EQ(batches[2].size(), 2u);
}

TEST(Batches, DeterministicPerEpochAndCoverTrainSet) {
  std::vector<Coord> train;
  for (std::uint32_t i = 0; i < 37; ++i) train.push_back({i / 6, i % 6});
  const auto a = epoch_batches(train, 8, 5, 2);
  EXPECT_EQ(a, epoch_batches(train, 8, 5, 2));
  EXPECT_NE(a, epoch_batches(train, 8, 5, 3));
  std::multiset<Coord> seen;
  for (const auto& b : a) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen, std::multiset<Coord>(train.begin(), train.end()));
}

TEST(Batches, PatchBatchCarriesLabels) {
  const SceneCube c(3, 3, 2, 1.0f);
  const LabelMap l(3, 3, {1, 2, 3, 1, 2, 3, 1, 2, 3});
  const PaddedScene padded(c, 1);
  const auto batch = make_patch_batch(padded, l, {{0, 0}, {2, 2}, {1, 1}}, 3);
  EXPECT_EQ(batch.patches.shape(), (Shape{3, 3, 3, 2}));
  EXPECT_EQ(batch.labels, (std::vector<std::uint16_t>{1, 3, 2}));
}
