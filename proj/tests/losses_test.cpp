#include <gtest/gtest.h>

#include <cmath>

#include "deepfv/losses.hpp"
#include "oracles.hpp"

using namespace deepfv;

namespace {

// Parameters for which the encoder outputs mu = 0 and log_var = 0 (all
// mean / log-variance weights and biases zero).
CvaeParameters<double> standard_latent(const CvaeConfig& c) {
  auto p = init_parameters<double>(c);
  for (auto l : {kMean, kLogVar}) {
    for (auto& v : p.layers[l].weight) v = 0;
    for (auto& v : p.layers[l].bias) v = 0;
  }
  return p;
}

}  // namespace

TEST(CvaeLoss, KlVanishesForStandardNormal) {
  const auto c = oracle::tiny_config();
  const auto b = oracle::random_batch(c, 5, 1);
  const auto v = cvae_loss(standard_latent(c), b, oracle::random_noise(5, c.latent_dim, 2), LossWeights{});
  EXPECT_NEAR(v.kl, 0.0, 1e-15);
}

TEST(CvaeLoss, KlOfShiftedMean) {
  // mu = 1 in one of two latent dims, var = 1: -1/2 (1 + 0 - 1 - 1) = 0.5.
  auto c = oracle::tiny_config();
  auto p = standard_latent(c);
  p.layers[kMean].bias[0] = 1.0;
  const auto b = oracle::random_batch(c, 3, 1);
  const auto v = cvae_loss(p, b, oracle::random_noise(3, c.latent_dim, 2), LossWeights{});
  EXPECT_NEAR(v.kl, 0.5, 1e-12);
}

TEST(CvaeLoss, KlIsNonNegative) {
  Rng rng(8);
  const auto c = oracle::tiny_config();
  for (int t = 0; t < 50; ++t) {
    auto p = init_parameters<double>(c);
    for (auto l : {kMean, kLogVar}) {
      for (auto& v : p.layers[l].weight) v = rng.uniform(-3, 3);
      for (auto& v : p.layers[l].bias) v = rng.uniform(-3, 3);
    }
    const auto v = cvae_loss(p, oracle::random_batch(c, 4, t), oracle::random_noise(4, c.latent_dim, t), LossWeights{});
    EXPECT_GE(v.kl, 0.0);
  }
}

TEST(CvaeLoss, NearZeroAtAllMinima) {
  // Identity-like decoder is hard to build by hand; instead reconstruct a
  // batch equal to the decoder's own output and make the classifier certain.
  const auto c = oracle::tiny_config();
  auto p = standard_latent(c);
  for (auto& v : p.layers[kClassifier].weight) v = 0;
  p.layers[kClassifier].bias = Tensor<double>::vector({60.0, 0.0});
  Batch<double> b;
  b.x = Tensor<double>(Shape{1, c.input_dim}, std::vector<double>(c.input_dim, 0.3));
  b.conditions = {0};
  b.classes = {0};
  const Tensor<double> eps(Shape{1, c.latent_dim});
  // x_hat depends only on z_cond = [0, 0, 1, 0, ~1, ~0]; feed it back as x.
  const auto lb = encode(p, Tensor<double>(Shape{c.input_dim}, std::vector<double>(c.input_dim, 0.3)), Tensor<double>(Shape{c.latent_dim}), 0);
  const auto xhat = decode(p, lb.z_cond);
  b.x = Tensor<double>(Shape{1, c.input_dim}, xhat.data());
  const auto v = cvae_loss(p, b, eps, LossWeights{});
  EXPECT_NEAR(v.rec, 0.0, 1e-20);
  EXPECT_NEAR(v.kl, 0.0, 1e-15);
  EXPECT_LT(v.cls, 1e-20);
  EXPECT_LT(v.total, 1e-20);
}

TEST(CvaeLoss, WeightedSumOfComponents) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 6, 3);
  const auto eps = oracle::random_noise(6, c.latent_dim, 4);
  LossWeights w;
  w.reconstruction = 0.7;
  w.kl = 0.2;
  w.classification = 1.3;
  const auto v = cvae_loss(p, b, eps, w);
  EXPECT_NEAR(v.total, 0.7 * v.rec + 0.2 * v.kl + 1.3 * v.cls, 1e-12);
}

TEST(CvaeLoss, Errors) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  Batch<double> empty;
  try {
    (void)cvae_loss(p, empty, Tensor<double>(Shape{1, 2}), LossWeights{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyBatch);
  }
  auto b = oracle::random_batch(c, 2, 1);
  b.classes[1] = 7;
  try {
    (void)cvae_loss(p, b, oracle::random_noise(2, 2, 1), LossWeights{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LabelOutOfRange);
  }
}

TEST(CvaeGradient, MatchesFiniteDifferences) {
  const auto c = oracle::tiny_config(3);
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 5, 7);
  const auto eps = oracle::random_noise(5, c.latent_dim, 8);
  const LossWeights w;
  const auto analytic = oracle::flatten(cvae_gradient(p, b, eps, w));
  const auto numeric = oracle::central_differences(p, [&](const auto& q) { return cvae_loss(q, b, eps, w).total; });
  EXPECT_LT(oracle::max_relative_error(analytic, numeric, 1e-6), 1e-6);
}

TEST(SparsityPenalty, EqualsL1OfIndependentGradient) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 4, 2);
  const auto eps = oracle::random_noise(4, c.latent_dim, 3);
  LossWeights w;
  w.sparsity = 1e-4;
  double l1 = 0;
  for (double v : oracle::flatten(cvae_gradient(p, b, eps, w))) l1 += std::abs(v);
  EXPECT_NEAR(sparsity_penalty(p, b, eps, w), 1e-4 * l1, 1e-15);
  auto w2 = w;
  w2.sparsity = 2e-4;
  EXPECT_DOUBLE_EQ(sparsity_penalty(p, b, eps, w2), 2 * sparsity_penalty(p, b, eps, w));
  w.sparsity = 0;
  EXPECT_THROW((void)sparsity_penalty(p, b, eps, w), Error);
}

TEST(SignUpdate, ZeroMapsToPlusOne) {
  const std::vector<Tensor<double>> g = {Tensor<double>::vector({0.3, -2.0, 0.0})};
  EXPECT_EQ(sign_update(g).tensors[0], Tensor<double>::vector({1, -1, 1}));
}

TEST(SignUpdate, IdempotentOnSignVectors) {
  const std::vector<Tensor<double>> g = {Tensor<double>::vector({1, -1, -1, 1})};
  EXPECT_EQ(sign_update(g).tensors[0], g[0]);
}

TEST(SignUpdate, RejectsNonFinite) {
  const std::vector<Tensor<double>> g = {Tensor<double>::vector({1, NAN})};
  try {
    (void)sign_update(g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFinite);
  }
}

TEST(SignUpdate, MinimisesResidualExhaustively) {
  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    const std::size_t d = 1 + rng.below(10);
    std::vector<double> g(d);
    for (auto& v : g) v = rng.uniform(-2, 2);
    const std::vector<Tensor<double>> gt = {Tensor<double>::vector(g)};
    const auto b = sign_update(gt).tensors[0];
    double residual = 0;
    for (std::size_t j = 0; j < d; ++j) residual += (g[j] - b[j]) * (g[j] - b[j]);
    EXPECT_NEAR(residual, oracle::best_quantization_residual(g), 1e-12);
  }
}

TEST(QuantizationPenalty, Arithmetic) {
  // Direct check through the graph: grad = (0.5, -0.5), B = (1, -1).
  ad::Graph<double> g;
  auto w = g.parameter(Tensor<double>::vector({0, 0}));
  auto loss = ad::sum(w * g.constant(Tensor<double>::vector({0.5, -0.5})));
  auto grad = g.gradients(loss, {w});
  auto q = ad::squared_error(grad[0], g.constant(Tensor<double>::vector({1, -1})));
  EXPECT_DOUBLE_EQ(q.item(), 0.5);
}

TEST(QuantizationPenalty, SignTargetsAreOptimalAndMatchIdentity) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 4, 2);
  const auto eps = oracle::random_noise(4, c.latent_dim, 3);
  LossWeights w;
  w.quantization = 1.0;
  const auto grads = cvae_gradient(p, b, eps, w);
  const auto targets = sign_update(grads);
  const double q = quantization_penalty(p, b, eps, w, targets);
  double identity = 0;
  for (double v : oracle::flatten(grads)) identity += (std::abs(v) - 1) * (std::abs(v) - 1);
  EXPECT_NEAR(q, identity, 1e-10);
  // Any other sign choice is no better.
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    auto other = targets;
    for (auto& tensor : other.tensors)
      for (auto& v : tensor)
        if (rng.uniform() < 0.3) v = -v;
    EXPECT_LE(q, quantization_penalty(p, b, eps, w, other) + 1e-12);
  }
}

TEST(QuantizationPenalty, ShapeMismatch) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 2, 2);
  const auto eps = oracle::random_noise(2, c.latent_dim, 3);
  LossWeights w;
  w.quantization = 1.0;
  BinaryTargets<double> bad;
  bad.tensors.emplace_back(Shape{3});
  try {
    (void)quantization_penalty(p, b, eps, w, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(TotalLoss, ReducesToCvaeLossWithoutPenalties) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 4, 2);
  const auto eps = oracle::random_noise(4, c.latent_dim, 3);
  const LossWeights w;
  EXPECT_EQ(total_loss(p, b, eps, w), cvae_loss(p, b, eps, w).total);
}

TEST(TotalLoss, AdditiveInPenalties) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 4, 2);
  const auto eps = oracle::random_noise(4, c.latent_dim, 3);
  LossWeights w;
  w.sparsity = 1e-4;
  EXPECT_NEAR(total_loss(p, b, eps, w), cvae_loss(p, b, eps, w).total + sparsity_penalty(p, b, eps, w), 1e-14);
  w.quantization = 1e-4;
  const auto targets = sign_update(cvae_gradient(p, b, eps, w));
  EXPECT_NEAR(total_loss(p, b, eps, w, &targets),
              cvae_loss(p, b, eps, w).total + sparsity_penalty(p, b, eps, w) +
                  quantization_penalty(p, b, eps, w, targets),
              1e-14);
}

TEST(TotalLoss, MissingTargets) {
  const auto c = oracle::tiny_config();
  const auto p = init_parameters<double>(c);
  LossWeights w;
  w.quantization = 1e-4;
  try {
    (void)total_loss(p, oracle::random_batch(c, 2, 1), oracle::random_noise(2, 2, 1), w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingTargets);
  }
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  const auto c = oracle::tiny_config(3);
  const auto p = init_parameters<double>(c);
  const auto b = oracle::random_batch(c, 5, 7);
  const auto eps = oracle::random_noise(5, c.latent_dim, 8);
  LossWeights w;
  w.sparsity = 1e-2;
  w.quantization = 1e-2;
  const auto targets = sign_update(cvae_gradient(p, b, eps, w));
  const auto [value, grads] = total_loss_gradient(p, b, eps, w, &targets);
  EXPECT_EQ(value, total_loss(p, b, eps, w, &targets));
  const auto numeric =
      oracle::central_differences(p, [&](const auto& q) { return total_loss(q, b, eps, w, &targets); });
  EXPECT_LT(oracle::max_relative_error(oracle::flatten(grads), numeric, 1e-4), 1e-4);
}

TEST(LossWeights, Modes) {
  LossWeights w;
  EXPECT_EQ(w.mode(), "FV");
  w.sparsity = 1e-4;
  EXPECT_EQ(w.mode(), "SFV");
  w.quantization = 1e-4;
  EXPECT_EQ(w.mode(), "SBFV");
  w.sparsity = 0;
  EXPECT_EQ(w.mode(), "BFV");
  w.kl = -1;
  EXPECT_THROW(w.validate(), Error);
}
