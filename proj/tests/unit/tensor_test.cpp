#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mmclip/rng.hpp"
#include "mmclip/tensor.hpp"

using namespace mmclip;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c(Shape{a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

Tensor random_matrix(RngStream& rng, std::size_t r, std::size_t c) {
  Tensor t(Shape{r, c});
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndSize) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 1.5);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::scalar(1.0).reshaped(Shape{2}), ShapeError);
}

TEST(Tensor, MatmulExamples) {
  EXPECT_EQ(matmul(Tensor::identity(2), Tensor::matrix({{1, 2}, {3, 4}})),
            Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(matmul(Tensor::matrix({{2}}), Tensor::matrix({{3}})), Tensor::matrix({{6}}));
  EXPECT_EQ(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5, 6}, {7, 8}})),
            Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(Tensor, MatmulErrorNamesBothShapes) {
  try {
    matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Tensor, MatmulIdentityExactOnIntegers) {
  RngStream rng(5);
  Tensor a(Shape{4, 3});
  for (double& v : a.data()) v = static_cast<double>(rng.below(19)) - 9.0;
  EXPECT_EQ(matmul(a, Tensor::identity(3)), a);
  EXPECT_EQ(matmul(Tensor::identity(4), a), a);
}

TEST(Tensor, GemmVariantsMatchNaive) {
  RngStream rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const auto m = 1 + rng.below(7), k = 1 + rng.below(7), n = 1 + rng.below(7);
    const Tensor a = random_matrix(rng, m, k), b = random_matrix(rng, k, n);
    const Tensor ref = naive_matmul(a, b);
    const Tensor got = matmul(a, b);
    const Tensor got_nt = matmul_nt(a, transpose(b));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(got[i], ref[i], 1e-12);
      EXPECT_NEAR(got_nt[i], ref[i], 1e-12);
    }
  }
}

TEST(Tensor, SoftmaxExamples) {
  const Tensor half = softmax_rows(Tensor::matrix({{0, 0}}), 1.0);
  EXPECT_DOUBLE_EQ(half(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(half(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(softmax_rows(Tensor::matrix({{123.4}}), 1.0)(0, 0), 1.0);
  const Tensor third = softmax_rows(Tensor::matrix({{std::log(2.0), 0}}), 1.0);
  EXPECT_NEAR(third(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(third(0, 1), 1.0 / 3.0, 1e-15);
}

TEST(Tensor, SoftmaxRowsSumToOneOnWideRange) {
  RngStream rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor m(Shape{3, 1 + rng.below(8)});
    for (double& v : m.data()) v = rng.uniform(-50.0, 50.0);
    const Tensor p = softmax_rows(m, 1.0);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Tensor, SoftmaxPermissionMask) {
  const std::vector<unsigned char> allowed{1, 0, 1, 0, 1, 1};
  const Tensor p = softmax_rows(Tensor::matrix({{0, 5, 0}, {9, 0, 0}}), 1.0, allowed);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(1, 0), 0.0);
  const std::vector<unsigned char> none{0, 0};
  EXPECT_THROW(softmax_rows(Tensor::matrix({{1, 2}}), 1.0, none), Error);
}

TEST(Rng, EqualSeedsEqualDraws) {
  RngStream a(99), b(99);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SubStreamsAreIndependentOfSiblings) {
  const RngStream root(7);
  RngStream mask_before = root.derive(Purpose::kMask, 3);
  RngStream data = root.derive(Purpose::kData, 3);
  for (int i = 0; i < 1000; ++i) data.next_u64();
  RngStream mask_after = root.derive(Purpose::kMask, 3);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(mask_before.next_u64(), mask_after.next_u64());
  EXPECT_NE(root.derive(Purpose::kMask, 3).next_u64(), root.derive(Purpose::kInit, 3).next_u64());
}

TEST(Rng, UniformAndBelowRanges) {
  RngStream rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(rng.below(7), 7u);
    EXPECT_LE(std::abs(rng.truncated_normal(0.02)), 0.04);
  }
}

TEST(SampleWithoutReplacement, Examples) {
  RngStream rng(1);
  const std::vector<std::size_t> two{3, 7};
  auto s = sample_without_replacement(rng, two, 2);
  std::sort(s.begin(), s.end());
  EXPECT_EQ(s, two);
  EXPECT_TRUE(sample_without_replacement(rng, two, 0).empty());
  EXPECT_THROW(sample_without_replacement(rng, two, 3), Error);
}

TEST(SampleWithoutReplacement, GoldenSeed42) {
  // Frozen from the first run of the seeded generator.
  std::vector<std::size_t> pop(10);
  for (std::size_t i = 0; i < 10; ++i) pop[i] = i;
  RngStream rng(42);
  const auto s = sample_without_replacement(rng, pop, 4);
  EXPECT_EQ(s, (std::vector<std::size_t>{1, 9, 6, 8}));
}

TEST(SampleWithoutReplacement, DistinctAndFromPopulation) {
  RngStream rng(8);
  const std::vector<std::size_t> pop{10, 20, 30, 40, 50, 60};
  for (std::size_t k = 0; k <= pop.size(); ++k) {
    auto s = sample_without_replacement(rng, pop, k);
    ASSERT_EQ(s.size(), k);
    std::sort(s.begin(), s.end());
    EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
    for (auto v : s) EXPECT_NE(std::find(pop.begin(), pop.end(), v), pop.end());
  }
}
