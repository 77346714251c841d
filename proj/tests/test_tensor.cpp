#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

namespace optin {
namespace {

using test::goldens;
using test::random_tensor;

TEST(Tensor, RejectsBadShapes) {
  EXPECT_CODE(Tensor(Shape{}), ErrorCode::shape_mismatch);
  EXPECT_CODE(Tensor({1, 1, 1, 1, 1}), ErrorCode::shape_mismatch);
  EXPECT_CODE(Tensor({2, 0}), ErrorCode::shape_mismatch);
  EXPECT_CODE(Tensor({2, 2}, std::vector<double>(3)), ErrorCode::shape_mismatch);
  EXPECT_EQ(Tensor({2, 3, 4}).size(), 24u);
}

TEST(Matmul, IdentityAndProjector) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor a({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, a), a);
  EXPECT_EQ(matmul(Tensor({2, 2}, {1, 0, 0, 0}), Tensor({2, 2}, {5, 6, 7, 8})),
            Tensor({2, 2}, {5, 6, 0, 0}));
}

TEST(Matmul, MatchesNaiveLoop) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({7, 5}, rng), b = random_tensor({5, 3}, rng);
  EXPECT_LE(test::max_abs_diff(matmul(a, b), test::naive_matmul(a, b)), 1e-6);
}

TEST(Matmul, InnerDimensionMismatch) {
  EXPECT_CODE(matmul(Tensor({2, 3}), Tensor({2, 3})), ErrorCode::shape_mismatch);
  EXPECT_CODE(matmul(Tensor({2, 3, 1}), Tensor({3, 1})), ErrorCode::shape_mismatch);
}

TEST(Matmul, AssociativeOnSmallTriples) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({4, 3}, rng), b = random_tensor({3, 5}, rng),
                 c = random_tensor({5, 2}, rng);
    EXPECT_LE(test::max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-4);
  }
}

TEST(Softmax, UniformOnZeroRow) {
  const Tensor p = softmax_temp(Tensor({1, 5}), 3.0);
  for (double v : p.data()) EXPECT_NEAR(v, 0.2, 1e-7);
}

TEST(Softmax, AnalyticLogRow) {
  const Tensor p = softmax_temp(
      Tensor({1, 3}, {std::log(1.0), std::log(2.0), std::log(4.0)}), 1.0);
  EXPECT_NEAR(p[0], 1.0 / 7, 1e-6);
  EXPECT_NEAR(p[1], 2.0 / 7, 1e-6);
  EXPECT_NEAR(p[2], 4.0 / 7, 1e-6);
}

TEST(Softmax, MatchesReference) {
  for (const auto& c : goldens().at("softmax")) {
    const Tensor p = softmax_temp(test::tensor_from_json(c.at("logits")), c.at("temperature"));
    EXPECT_LE(test::max_abs_diff(p, c.at("value")), 1e-6);
  }
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({3, 6}, rng, 5.0);
    const double t = 0.5 + trial % 4;
    const Tensor p = softmax_temp(x, t);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 6; ++c) s += p.at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-6);
      for (std::size_t c = 0; c < 6; ++c) x.at(r, c) += 10.0;
    }
    EXPECT_LE(test::max_abs_diff(softmax_temp(x, t), p), 1e-6);
  }
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  EXPECT_CODE(softmax_temp(Tensor({1, 2}), 0.0), ErrorCode::invalid_parameter);
  EXPECT_CODE(softmax_temp(Tensor({1, 2}), -1.0), ErrorCode::invalid_parameter);
}

TEST(LayerNorm, ConstantVectorAndZeroGamma) {
  const Tensor ones({4}, 1.0), zeros({4});
  const Tensor c = layer_norm(Tensor({2, 4}, 3.0), ones, zeros);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  const Tensor beta({4}, {1, 2, 3, 4});
  std::mt19937_64 rng(4);
  const Tensor out = layer_norm(random_tensor({3, 4}, rng), zeros, beta);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(out.at(r, k), beta[k]);
}

TEST(LayerNorm, StandardizesRandomVectors) {
  std::mt19937_64 rng(5);
  const std::size_t d = 32;
  const Tensor x = random_tensor({1, d}, rng, 3.0);
  const Tensor y = layer_norm(x, Tensor({d}, 1.0), Tensor({d}));
  double mean = 0, var = 0;
  for (double v : y.data()) mean += v;
  mean /= d;
  for (double v : y.data()) var += (v - mean) * (v - mean);
  var /= d;
  EXPECT_NEAR(mean, 0.0, 1e-5);
  EXPECT_NEAR(var, 1.0, 1e-5 + 1e-5 / 9);  // eps shrinks the variance slightly
}

TEST(LayerNorm, MismatchedAffine) {
  EXPECT_CODE(layer_norm(Tensor({2, 4}), Tensor({3}), Tensor({4})), ErrorCode::shape_mismatch);
}

TEST(Gram, SingleVectorAndOrthonormalRows) {
  const Tensor g = gram(Tensor({1, 1, 2}, {3, 4}));
  ASSERT_EQ(g.shape(), (Shape{1, 1}));
  EXPECT_EQ(g[0], 25.0);
  const Tensor e = gram(Tensor({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(e.at(i, j), i == j ? 1.0 : 0.0);
}

TEST(Gram, SymmetricPositiveSemidefinite) {
  std::mt19937_64 rng(6);
  const Tensor g = gram(random_tensor({2, 3, 4}, rng));
  const std::size_t n = g.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(g.at(i, j), g.at(j, i));
  // PSD within 1e-5: Cholesky of G + 1e-5 I succeeds.
  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n * n; ++i) a[i] = g[i] + (i % (n + 1) == 0 ? 1e-5 : 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double piv = a[k * n + k];
    for (std::size_t s = 0; s < k; ++s) piv -= a[k * n + s] * a[k * n + s];
    ASSERT_GT(piv, 0.0);
    a[k * n + k] = std::sqrt(piv);
    for (std::size_t i = k + 1; i < n; ++i) {
      double v = a[i * n + k];
      for (std::size_t s = 0; s < k; ++s) v -= a[i * n + s] * a[k * n + s];
      a[i * n + k] = v / a[k * n + k];
    }
  }
}

TEST(GramDiff, IdenticalInputsGiveExactZero) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({2, 4, 3}, rng, 4.0);
    EXPECT_EQ(gram_diff_sq(a, a), 0.0);
  }
}

TEST(GramDiff, SingleVectorAgainstZero) {
  const Tensor v({1, 1, 3}, {1, 2, 2});
  EXPECT_DOUBLE_EQ(gram_diff_sq(v, Tensor({1, 1, 3})), 81.0);  // |v|^4
}

TEST(GramDiff, SymmetricInArguments) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_tensor({2, 3, 5}, rng), b = random_tensor({2, 3, 5}, rng);
    EXPECT_EQ(gram_diff_sq(a, b), gram_diff_sq(b, a));
  }
}

TEST(GramDiff, IdentityPathMatchesMaterialized) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = dim(rng), t = dim(rng), d = dim(rng);
    const Tensor x = random_tensor({b, t, d}, rng), y = random_tensor({b, t, d}, rng);
    const double want = double(test::materialized_gram_diff(x, y));
    EXPECT_LE(test::rel_err(gram_diff_sq(x, y), want), 1e-4);
    EXPECT_LE(test::rel_err(gram_diff_sq(x, y, GramPath::direct), want), 1e-9);
  }
}

TEST(GramDiff, ShapeMismatch) {
  EXPECT_CODE(gram_diff_sq(Tensor({1, 2, 3}), Tensor({1, 3, 2})), ErrorCode::shape_mismatch);
}

}  // namespace
}  // namespace optin
