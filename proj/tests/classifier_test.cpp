#include <gtest/gtest.h>

#include "deepfv/classifier.hpp"
#include "oracles.hpp"

using namespace deepfv;

namespace {

FisherEmbedding dense(std::string id, std::vector<double> v) {
  FisherEmbedding e;
  e.bag_id = std::move(id);
  e.dim = v.size();
  e.dense = std::move(v);
  return e;
}

void blobs(Rng& rng, std::size_t per_class, std::vector<FisherEmbedding>& xs, std::vector<std::string>& ys) {
  const std::vector<std::vector<double>> centres = {{3, 0, 0, 1}, {0, 3, 0, -1}, {0, 0, 3, 0}};
  for (std::size_t c = 0; c < centres.size(); ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      auto v = centres[c];
      for (auto& x : v) x += 0.5 * rng.normal();
      xs.push_back(dense("b" + std::to_string(xs.size()), v));
      ys.push_back("class" + std::to_string(c));
    }
  }
}

}  // namespace

TEST(ClassifierHead, SeparableDataGeneralises) {
  Rng rng(1);
  std::vector<FisherEmbedding> train_x, test_x;
  std::vector<std::string> train_y, test_y;
  blobs(rng, 40, train_x, train_y);
  blobs(rng, 40, test_x, test_y);
  const auto head = train_classifier_head(train_x, train_y);
  EXPECT_EQ(head.labels, (std::vector<std::string>{"class0", "class1", "class2"}));
  EXPECT_GT(classify(head, test_x, test_y).accuracy, 0.95);
}

TEST(ClassifierHead, MemorisesSmallTrainingSet) {
  Rng rng(2);
  std::vector<FisherEmbedding> xs;
  std::vector<std::string> ys;
  for (int i = 0; i < 12; ++i) {
    std::vector<double> v(20);
    for (auto& x : v) x = rng.normal();
    xs.push_back(dense("b" + std::to_string(i), v));
    ys.push_back(i % 3 == 0 ? "a" : (i % 3 == 1 ? "b" : "c"));
  }
  HeadConfig cfg;
  cfg.epochs = 500;
  const auto head = train_classifier_head(xs, ys, cfg);
  EXPECT_EQ(classify(head, xs, ys).accuracy, 1.0);
}

TEST(ClassifierHead, AcceptsBinaryCodes) {
  Rng rng(3);
  std::vector<FisherEmbedding> xs;
  std::vector<std::string> ys;
  for (int i = 0; i < 30; ++i) {
    auto e = FisherEmbedding::binary("b" + std::to_string(i), 16);
    const bool cls = i % 2;
    for (std::size_t j = 0; j < 16; ++j)
      if ((j < 8) == cls || rng.uniform() < 0.1) e.set_bit(j);
    xs.push_back(e);
    ys.push_back(cls ? "odd" : "even");
  }
  EXPECT_EQ(embedding_values(xs[1])[0], 1.0);
  const auto head = train_classifier_head(xs, ys);
  EXPECT_GT(classify(head, xs, ys).accuracy, 0.95);
}

TEST(ClassifierHead, DeterministicForSeed) {
  Rng rng(4);
  std::vector<FisherEmbedding> xs;
  std::vector<std::string> ys;
  blobs(rng, 10, xs, ys);
  HeadConfig cfg;
  cfg.epochs = 20;
  const auto a = train_classifier_head(xs, ys, cfg);
  const auto b = train_classifier_head(xs, ys, cfg);
  EXPECT_EQ(a.w1, b.w1);
  EXPECT_EQ(a.w2, b.w2);
}

TEST(ClassifierHead, Errors) {
  HeadConfig bad;
  bad.hidden = 0;
  const std::vector<FisherEmbedding> xs = {dense("a", {1, 2})};
  const std::vector<std::string> ys = {"x"};
  try {
    (void)train_classifier_head(xs, ys, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
  }
  const std::vector<FisherEmbedding> none;
  const std::vector<std::string> no_labels;
  try {
    (void)train_classifier_head(none, no_labels);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyTrainSet);
  }
  const std::vector<std::string> two = {"x", "y"};
  try {
    (void)train_classifier_head(xs, two);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LengthMismatch);
  }
}
