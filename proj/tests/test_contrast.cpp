#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "hsvlm/contrast.hpp"
#include "hsvlm/rng.hpp"

using namespace hsvlm;

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

template <class T = double>
BasicTensor<T> unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  BasicTensor<T> m({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (auto& v : m.row(i)) {
      v = static_cast<T>(rng.normal());
      s += static_cast<double>(v) * v;
    }
    for (auto& v : m.row(i)) v = static_cast<T>(v / std::sqrt(s));
  }
  return m;
}

struct Instance {
  BasicTensor<double> z, p;
  std::vector<std::size_t> labels;
  NegativeSpec spec;
  double scale = 0;
};

Instance random_instance(Rng& rng) {
  Instance in;
  const std::size_t N = 1 + rng.below(8);
  const std::size_t C = 2 + rng.below(15);
  const std::size_t d = 4 + rng.below(12);
  in.z = unit_rows(N, d, rng);
  in.p = unit_rows(C, d, rng);
  for (std::size_t i = 0; i < N; ++i) in.labels.push_back(rng.below(static_cast<std::uint32_t>(C)));
  do {
    in.spec = {rng.below(6), rng.below(6)};
  } while (in.spec.hard + in.spec.semi_hard == 0);
  in.scale = rng.uniform() * 4.0;
  return in;
}

// Sorts each full similarity row, takes the leading wrong classes as hard
// negatives, draws semi-hard ones from a cloned generator and evaluates the
// cross entropy in long double.
long double oracle_loss(const Instance& in, Rng rng) {
  using LD = long double;
  const std::size_t N = in.labels.size(), C = in.p.rows(), d = in.z.cols();
  const std::size_t kh = std::min(in.spec.hard, C - 1);
  const std::size_t ks = std::min(in.spec.semi_hard, C - 1 - kh);
  const LD tau = std::exp(static_cast<LD>(in.scale));
  LD total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<LD> s(C);
    for (std::size_t j = 0; j < C; ++j) {
      LD dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += static_cast<LD>(in.z.at(i, k)) * in.p.at(j, k);
      s[j] = tau * dot;
    }
    std::vector<std::size_t> order(C);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    std::vector<std::size_t> hard;
    for (std::size_t j : order)
      if (j != in.labels[i] && hard.size() < kh) hard.push_back(j);
    std::vector<std::size_t> pool;
    for (std::size_t j = 0; j < C; ++j)
      if (j != in.labels[i] && std::find(hard.begin(), hard.end(), j) == hard.end()) pool.push_back(j);
    std::vector<std::size_t> picked;
    for (std::size_t t = 0; t < ks; ++t) {
      const std::size_t r = t + rng.below(static_cast<std::uint32_t>(pool.size() - t));
      std::swap(pool[t], pool[r]);
      picked.push_back(pool[t]);
    }
    LD denom = std::exp(s[in.labels[i]] - s[in.labels[i]]);
    LD mx = s[in.labels[i]];
    for (auto j : hard) mx = std::max(mx, s[j]);
    for (auto j : picked) mx = std::max(mx, s[j]);
    denom = std::exp(s[in.labels[i]] - mx);
    for (auto j : hard) denom += std::exp(s[j] - mx);
    for (auto j : picked) denom += std::exp(s[j] - mx);
    total += -(s[in.labels[i]] - mx - std::log(denom));
  }
  return total / static_cast<LD>(N);
}

}  // namespace

TEST(EffectiveCounts, Clamping) {
  EXPECT_EQ(effective_counts(9, {4, 4}, LossVariant::Full).hard, 4u);
  EXPECT_EQ(effective_counts(9, {4, 4}, LossVariant::Full).semi_hard, 4u);
  EXPECT_EQ(effective_counts(4, {4, 4}, LossVariant::Full).hard, 3u);
  EXPECT_EQ(effective_counts(4, {4, 4}, LossVariant::Full).semi_hard, 0u);
  EXPECT_EQ(effective_counts(6, {2, 9}, LossVariant::Full).semi_hard, 3u);
  EXPECT_EQ(effective_counts(16, {4, 4}, LossVariant::NoHard).hard, 0u);
  EXPECT_EQ(effective_counts(16, {4, 4}, LossVariant::NoHard).semi_hard, 4u);
  EXPECT_EQ(effective_counts(16, {4, 4}, LossVariant::NoSemiHard).semi_hard, 0u);
}

TEST(SelectHard, Examples) {
  const std::vector<double> row{0.9, 0.1, 0.8, 0.3};
  EXPECT_EQ(select_hard(row, 0, 2), (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(select_hard(row, 2, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(select_hard(row, 0, 10), (std::vector<std::size_t>{2, 3, 1}));
  EXPECT_TRUE(select_hard(row, 0, 0).empty());
}

TEST(SelectHard, TiesGoToLowerId) {
  const std::vector<double> row{0.5, 0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(select_hard(row, 1, 3), (std::vector<std::size_t>{0, 2, 3}));
  const std::vector<double> mixed{0.2, 0.7, 0.2, 0.7, 0.9};
  EXPECT_EQ(select_hard(mixed, 4, 3), (std::vector<std::size_t>{1, 3, 0}));
}

TEST(SelectHard, LabelOutOfRange) {
  const std::vector<double> row{1, 2};
  EXPECT_EQ(code_of([&] { select_hard(row, 2, 1); }), ErrorCode::IndexOutOfRange);
}

TEST(SampleSemiHard, DisjointAndSized) {
  Rng rng(5, 0);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t C = 2 + rng.below(15);
    std::vector<double> row(C);
    for (auto& v : row) v = rng.normal();
    const std::size_t y = rng.below(static_cast<std::uint32_t>(C));
    const std::size_t kh = rng.below(6), ks = rng.below(6);
    const auto hard = select_hard(row, y, kh);
    const auto semi = sample_semihard(C, y, hard, ks, rng);
    ASSERT_EQ(hard.size(), std::min(kh, C - 1));
    ASSERT_EQ(semi.size(), std::min(ks, C - 1 - hard.size()));
    std::set<std::size_t> seen{y};
    for (auto h : hard) ASSERT_TRUE(seen.insert(h).second);
    for (auto s : semi) ASSERT_TRUE(seen.insert(s).second);
    for (std::size_t j = 0; j < C; ++j) {
      if (j == y || std::find(hard.begin(), hard.end(), j) != hard.end()) continue;
      for (auto h : hard) ASSERT_GE(row[h], row[j]);
    }
  }
}

TEST(SampleSemiHard, UniformOverPool) {
  // C=10, label 0, hard {1,2}: each of the 7 remaining classes has
  // inclusion probability 3/7
  Rng rng(17, 0);
  const std::vector<std::size_t> hard{1, 2};
  std::vector<int> hits(10, 0);
  const int trials = 70000;
  for (int t = 0; t < trials; ++t) {
    for (auto c : sample_semihard(10, 0, hard, 3, rng)) ++hits[c];
  }
  EXPECT_EQ(hits[0] + hits[1] + hits[2], 0);
  const double expected = trials * 3.0 / 7.0;
  const double sd = std::sqrt(trials * (3.0 / 7.0) * (4.0 / 7.0));
  for (std::size_t c = 3; c < 10; ++c) EXPECT_NEAR(hits[c], expected, 5 * sd) << c;
}

TEST(SampleSemiHard, HardContainingLabel) {
  Rng rng(1, 0);
  const std::vector<std::size_t> hard{0, 2};
  EXPECT_EQ(code_of([&] { sample_semihard(5, 2, hard, 1, rng); }), ErrorCode::OverlapError);
}

TEST(AssembleLogits, PositiveOnly) {
  const std::vector<double> row{0.1, 0.4};
  const auto lr = assemble_logits(row, 1, {}, {});
  EXPECT_EQ(lr.values, std::vector<double>{0.4});
}

TEST(AssembleLogits, PaviaShapeCoversAllClasses) {
  Rng rng(3, 0);
  std::vector<double> row(9);
  for (auto& v : row) v = rng.normal();
  const auto hard = select_hard(row, 5, 4);
  const auto semi = sample_semihard(9, 5, hard, 4, rng);
  const auto lr = assemble_logits(row, 5, hard, semi);
  ASSERT_EQ(lr.values.size(), 9u);
  EXPECT_EQ(lr.classes.front(), 5u);
  std::set<std::size_t> all(lr.classes.begin(), lr.classes.end());
  EXPECT_EQ(all.size(), 9u);
}

TEST(AssembleLogits, OrderAndMultiset) {
  Rng rng(8, 0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> row(12);
    for (auto& v : row) v = rng.normal();
    const std::size_t y = rng.below(12);
    const auto hard = select_hard(row, y, 3);
    const auto semi = sample_semihard(12, y, hard, 4, rng);
    const auto lr = assemble_logits(row, y, hard, semi);
    std::vector<double> expect{row[y]};
    for (auto h : hard) expect.push_back(row[h]);
    for (auto s : semi) expect.push_back(row[s]);
    EXPECT_EQ(lr.values, expect);
  }
}

TEST(AssembleLogits, Overlap) {
  const std::vector<double> row{1, 2, 3};
  const std::vector<std::size_t> hard{1}, semi{1};
  EXPECT_EQ(code_of([&] { assemble_logits(row, 0, hard, semi); }), ErrorCode::OverlapError);
  const std::vector<std::size_t> has_label{0};
  EXPECT_EQ(code_of([&] { assemble_logits(row, 0, has_label, {}); }), ErrorCode::OverlapError);
}

TEST(ContrastiveLoss, UniformLogitsGiveLogNine) {
  // every embedding equals every prototype direction's projection: use
  // identical prototypes so all similarities coincide
  BasicTensor<double> p({16, 4});
  for (std::size_t j = 0; j < 16; ++j) p.at(j, 0) = 1.0;
  BasicTensor<double> z({3, 4});
  for (std::size_t i = 0; i < 3; ++i) z.at(i, 0) = 1.0;
  Rng rng(1, 0);
  const std::vector<std::size_t> labels{0, 7, 15};
  const auto out = batch_contrastive_loss(z, p, labels, {4, 4}, 0.7, rng);
  EXPECT_NEAR(out.loss, std::log(9.0), 1e-12);
  for (const auto& r : out.rows) EXPECT_EQ(r.values.size(), 9u);
}

TEST(ContrastiveLoss, Saturation) {
  BasicTensor<double> p({5, 5});
  for (std::size_t j = 0; j < 5; ++j) p.at(j, j) = 1.0;
  BasicTensor<double> z({2, 5});
  z.at(0, 1) = 1.0;
  z.at(1, 3) = 1.0;
  Rng rng(2, 0);
  const std::vector<std::size_t> labels{1, 3};
  // τ = e^{3.5} ≈ 33 so the positive leads every negative by more than 30
  const auto out = batch_contrastive_loss(z, p, labels, {2, 2}, 3.5, rng);
  EXPECT_LT(out.loss, 1e-12);
  EXPECT_GE(out.loss, 0.0);
}

TEST(ContrastiveLoss, MatchesBruteForceOracle) {
  Rng gen(2024, 0);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto in = random_instance(gen);
    Rng rng(static_cast<std::uint64_t>(t), 5);
    const Rng clone = rng;
    const auto out = batch_contrastive_loss(in.z, in.p, in.labels, in.spec, in.scale, rng);
    const double ref = static_cast<double>(oracle_loss(in, clone));
    worst = std::max(worst, std::abs(out.loss - ref));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(ContrastiveLoss, PositiveAndDecreasingInPositive) {
  Rng rng(4, 0);
  std::vector<double> row{0.2, -0.1, 0.5, 0.0, 0.3};
  double previous = INFINITY;
  for (double sp = -2; sp <= 6; sp += 0.5) {
    row[0] = sp;
    const auto lr = assemble_logits(row, 0, select_hard(row, 0, 2), std::vector<std::size_t>{});
    const double loss = stable_softmax_cross_entropy<double>(lr.values, 0).loss;
    EXPECT_GT(loss, 0.0);
    EXPECT_LT(loss, previous);
    previous = loss;
  }
}

TEST(ContrastiveLoss, ArgmaxInvariantToScale) {
  Rng rng(6, 0);
  const auto z = unit_rows(10, 8, rng);
  const auto p = unit_rows(7, 8, rng);
  const auto base = similarity_matrix(z, p, 0.0);
  for (double scale : {0.5, 2.0, 4.6}) {
    const auto s = similarity_matrix(z, p, scale);
    for (std::size_t i = 0; i < 10; ++i) {
      const auto a = std::max_element(base.row(i).begin(), base.row(i).end()) - base.row(i).begin();
      const auto b = std::max_element(s.row(i).begin(), s.row(i).end()) - s.row(i).begin();
      EXPECT_EQ(a, b);
    }
  }
}

TEST(ContrastiveLoss, GradientLocality) {
  // ∂L/∂z_i lies in the span of the prototypes that appear in row i
  Rng gen(31, 0);
  const auto z = unit_rows(6, 20, gen);
  const auto p = unit_rows(12, 20, gen);
  const std::vector<std::size_t> labels{0, 3, 3, 7, 11, 5};
  Rng rng(1, 1);
  const auto out = batch_contrastive_loss(z, p, labels, {2, 3}, 1.0, rng);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& cls = out.rows[i].classes;
    // least squares onto the used prototypes via normal equations
    const std::size_t k = cls.size();
    std::vector<double> G(k * k), b(k);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t c = 0; c < 20; ++c) b[a] += p.at(cls[a], c) * out.grad_embeddings.at(i, c);
      for (std::size_t bb = 0; bb < k; ++bb) {
        for (std::size_t c = 0; c < 20; ++c) G[a * k + bb] += p.at(cls[a], c) * p.at(cls[bb], c);
      }
    }
    // Gaussian elimination
    for (std::size_t col = 0; col < k; ++col) {
      for (std::size_t r = col + 1; r < k; ++r) {
        const double f = G[r * k + col] / G[col * k + col];
        for (std::size_t c = col; c < k; ++c) G[r * k + c] -= f * G[col * k + c];
        b[r] -= f * b[col];
      }
    }
    std::vector<double> coef(k);
    for (std::size_t r = k; r-- > 0;) {
      double s = b[r];
      for (std::size_t c = r + 1; c < k; ++c) s -= G[r * k + c] * coef[c];
      coef[r] = s / G[r * k + r];
    }
    for (std::size_t c = 0; c < 20; ++c) {
      double proj = 0;
      for (std::size_t a = 0; a < k; ++a) proj += coef[a] * p.at(cls[a], c);
      EXPECT_NEAR(out.grad_embeddings.at(i, c), proj, 1e-5);
    }
  }
}

TEST(ContrastiveLoss, ScaleGradientMatchesDifference) {
  Rng gen(12, 0);
  const auto z = unit_rows(5, 9, gen);
  const auto p = unit_rows(8, 9, gen);
  const std::vector<std::size_t> labels{1, 0, 7, 7, 2};
  const double s0 = 1.1, h = 1e-6;
  auto eval = [&](double s) {
    Rng rng(3, 3);
    return batch_contrastive_loss(z, p, labels, {2, 2}, s, rng);
  };
  const double numeric = (eval(s0 + h).loss - eval(s0 - h).loss) / (2 * h);
  EXPECT_NEAR(eval(s0).grad_logit_scale, numeric, 1e-6);
}

TEST(ContrastiveLoss, Variants) {
  Rng gen(9, 0);
  const auto z = unit_rows(4, 8, gen);
  const auto p = unit_rows(16, 8, gen);
  const std::vector<std::size_t> labels{0, 5, 9, 15};
  Rng r1(1, 0), r2(1, 0);
  const auto no_hard = batch_contrastive_loss(z, p, labels, {4, 4}, 1.0, r1, LossVariant::NoHard);
  for (const auto& row : no_hard.rows) EXPECT_EQ(row.values.size(), 5u);
  const auto no_semi = batch_contrastive_loss(z, p, labels, {4, 4}, 1.0, r2, LossVariant::NoSemiHard);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(no_semi.rows[i].values.size(), 5u);
    const auto hard = select_hard(similarity_matrix(z, p, 1.0).row(i), labels[i], 4);
    EXPECT_EQ(std::vector<std::size_t>(no_semi.rows[i].classes.begin() + 1, no_semi.rows[i].classes.end()), hard);
  }
}

TEST(ContrastiveLoss, Guards) {
  Rng gen(1, 0);
  const auto z = unit_rows(2, 8, gen);
  const auto p = unit_rows(4, 8, gen);
  Rng rng(1, 0);
  const std::vector<std::size_t> labels{0, 1};
  EXPECT_EQ(code_of([&] { batch_contrastive_loss(z, p, std::vector<std::size_t>{}, {4, 4}, 1.0, rng); }),
            ErrorCode::EmptyBatch);
  EXPECT_EQ(code_of([&] { batch_contrastive_loss(z, p, labels, {0, 0}, 1.0, rng); }), ErrorCode::DegenerateSpec);
  EXPECT_EQ(code_of([&] { batch_contrastive_loss(z, p, labels, {0, 4}, 1.0, rng, LossVariant::NoSemiHard); }),
            ErrorCode::DegenerateSpec);
  const std::vector<std::size_t> bad{0, 4};
  EXPECT_EQ(code_of([&] { batch_contrastive_loss(z, p, bad, {1, 1}, 1.0, rng); }), ErrorCode::LabelOutOfRange);
  const auto wide = unit_rows(4, 9, gen);
  EXPECT_EQ(code_of([&] { batch_contrastive_loss(z, wide, labels, {1, 1}, 1.0, rng); }), ErrorCode::DimMismatch);
}

TEST(ContrastiveLoss, ConsumesRngInSampleOrder) {
  Rng gen(2, 0);
  const auto z = unit_rows(5, 8, gen);
  const auto p = unit_rows(12, 8, gen);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 4};
  Rng a(7, 0), b(7, 0);
  const auto first = batch_contrastive_loss(z, p, labels, {2, 3}, 1.0, a);
  const auto second = batch_contrastive_loss(z, p, labels, {2, 3}, 1.0, b);
  EXPECT_EQ(first.loss, second.loss);
  EXPECT_EQ(a.next_u32(), b.next_u32());
  // the first sample's semi-hard draw is made before any other sample's
  Rng c(7, 0);
  const auto s = similarity_matrix(z, p, 1.0);
  const auto hard0 = select_hard(s.row(0), 0, 2);
  const auto semi0 = sample_semihard(12, 0, hard0, 3, c);
  EXPECT_EQ(std::vector<std::size_t>(first.rows[0].classes.begin() + 3, first.rows[0].classes.end()), semi0);
}
