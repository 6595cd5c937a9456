#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "deepfv/random.hpp"
#include "deepfv/tensor.hpp"

using namespace deepfv;

TEST(Tensor, ShapeAndIndexing) {
  auto m = Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rank(), 2u);
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m.at(1, 2), 6);
  auto v = Tensor<double>::vector({1, 2});
  EXPECT_EQ(v.rows(), 1u);
  EXPECT_EQ(v.cols(), 2u);
  EXPECT_EQ(Tensor<double>::scalar(3.5).item(), 3.5);
}

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), Error);
  EXPECT_THROW(Tensor<double>(Shape{1, 2, 3}), Error);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), Error);
}

TEST(Tensor, ItemRequiresScalar) {
  try {
    (void)Tensor<double>(Shape{2}).item();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotScalar);
  }
}

TEST(Tensor, FiniteCheck) {
  Tensor<double> t(Shape{3});
  EXPECT_TRUE(t.all_finite());
  t[1] = NAN;
  EXPECT_FALSE(t.all_finite());
}

TEST(Rng, DeterministicStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(42);
  EXPECT_EQ(c.normal(), Rng(42).normal());
}

TEST(Rng, UniformRangeAndBelow) {
  Rng r(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7u);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, PermutationIsBijection) {
  Rng r(5);
  auto p = r.permutation(50);
  std::set<std::size_t> seen(p.begin(), p.end());
  EXPECT_EQ(seen.size(), 50u);
  EXPECT_EQ(*seen.rbegin(), 49u);
}
