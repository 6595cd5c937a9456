#include <gtest/gtest.h>

#include <sstream>

#include "deepfv/config.hpp"

using namespace deepfv;

TEST(Config, ParsesAssignmentsAndComments) {
  RunConfig c;
  std::istringstream in(
      "# training\n"
      "train.epochs = 12   # short run\n"
      "\n"
      "loss.lambda4=1e-4\n"
      "model.encoder_hidden = 16,8\n"
      "model.activation = relu\n"
      "train.b_refresh = per-batch\n"
      "embed.include_classifier_head = true\n");
  apply_config_text(c, in, "test.cfg");
  EXPECT_EQ(c.train.epochs, 12u);
  EXPECT_EQ(c.train.weights.sparsity, 1e-4);
  EXPECT_EQ(c.model.encoder_hidden, (std::array<std::size_t, 2>{16, 8}));
  EXPECT_EQ(c.model.activation, Activation::Relu);
  EXPECT_EQ(c.train.b_refresh, RefreshMode::PerBatch);
  EXPECT_TRUE(c.embed.include_classifier_head);
  EXPECT_EQ(c.assigned.count("train.epochs"), 1u);
  EXPECT_EQ(c.assigned.count("train.batch_size"), 0u);
}

TEST(Config, UnknownKeyNamesLocation) {
  RunConfig c;
  std::istringstream in("train.epochs = 3\ntrain.epoch = 4\n");
  try {
    apply_config_text(c, in, "x.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnknownKey);
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("train.epoch"), std::string::npos);
  }
}

TEST(Config, BadValues) {
  RunConfig c;
  for (const char* text : {"train.epochs = -1", "train.epochs = many", "loss.lambda4 = x", "model.encoder_hidden = 3",
                           "model.activation = sigmoid", "embed.include_classifier_head = maybe"}) {
    try {
      apply_assignment(c, text, "cli");
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig) << text;
    }
  }
  try {
    apply_assignment(c, "no equals sign", "cli");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
  }
}

TEST(Config, LaterAssignmentsWin) {
  RunConfig c;
  std::istringstream file("train.epochs = 10\ntrain.learning_rate = 0.1\n");
  apply_config_text(c, file, "f");
  apply_assignment(c, "train.epochs=20", "--set");
  EXPECT_EQ(c.train.epochs, 20u);
  EXPECT_EQ(c.train.learning_rate, 0.1);
}

TEST(Config, EchoRoundTrips) {
  RunConfig c;
  apply_assignment(c, "loss.lambda5 = 0.000123456789", "t");
  apply_assignment(c, "synthetic.sigma_between = 7.25", "t");
  apply_assignment(c, "model.decoder_hidden = 5,6", "t");
  std::ostringstream out;
  write_config(out, c);
  RunConfig back;
  std::istringstream in(out.str());
  apply_config_text(back, in, "echo");
  std::ostringstream again;
  write_config(again, back);
  EXPECT_EQ(out.str(), again.str());
  EXPECT_EQ(back.train.weights.quantization, 0.000123456789);
  EXPECT_EQ(back.model.decoder_hidden, (std::array<std::size_t, 2>{5, 6}));
  for (const auto& key : config_keys()) EXPECT_EQ(get_option(back, key), get_option(c, key)) << key;
}

TEST(Config, Validate) {
  RunConfig c;
  EXPECT_NO_THROW(validate(c));
  c.eval.k = 0;
  EXPECT_THROW(validate(c), Error);
  c.eval.k = 3;
  c.eval.test_fraction = 1.0;
  EXPECT_THROW(validate(c), Error);
  c.eval.test_fraction = 0.4;
  c.train.learning_rate = 0;
  EXPECT_THROW(validate(c), Error);
}

TEST(Config, ModelSizesComeFromData) {
  Dataset ds;
  ds.dim = 5;
  ds.conditions = {"a", "b"};
  ds.classes = {"a_1", "a_2", "b_1"};
  RunConfig c;
  const auto m = resolve_model(c, ds);
  EXPECT_EQ(m.input_dim, 5u);
  EXPECT_EQ(m.n_conditions, 2u);
  EXPECT_EQ(m.n_classes, 3u);
  apply_assignment(c, "model.input_dim = 7", "t");
  try {
    (void)resolve_model(c, ds);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimMismatch);
  }
}

TEST(Config, MissingFile) {
  RunConfig c;
  try {
    apply_config_file(c, "/nonexistent/deepfv.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingFile);
  }
}
