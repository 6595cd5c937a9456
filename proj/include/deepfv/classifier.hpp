#pragma once

// Two-layer fully connected classifier on bag embeddings (hidden layer +
// softmax), trained with cross-entropy on the autodiff engine. Inputs are
// standardised with training-set statistics; binary codes enter as +/-1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "deepfv/autodiff.hpp"
#include "deepfv/cvae.hpp"
#include "deepfv/error.hpp"
#include "deepfv/fisher.hpp"
#include "deepfv/index.hpp"
#include "deepfv/random.hpp"
#include "deepfv/tensor.hpp"

namespace deepfv {

struct HeadConfig {
  std::size_t hidden = 64;
  std::size_t epochs = 200;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 5;

  void validate() const {
    if (hidden == 0) throw Error(ErrorKind::InvalidConfig, "head.hidden must be >= 1");
    if (epochs == 0) throw Error(ErrorKind::InvalidConfig, "head.epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::InvalidConfig, "head.learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::InvalidConfig, "head.momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::InvalidConfig, "head.weight_decay must be >= 0");
  }
};

/// Dense values as-is; binary codes as +1 (bit set) / -1.
inline std::vector<double> embedding_values(const FisherEmbedding& e) {
  if (e.kind == EmbeddingKind::Dense) return e.dense;
  std::vector<double> v(e.dim);
  for (std::size_t j = 0; j < e.dim; ++j) v[j] = e.bit(j) ? 1.0 : -1.0;
  return v;
}

struct ClassifierHead {
  std::vector<std::string> labels;  // sorted; output unit i is labels[i]
  std::vector<double> mean;
  std::vector<double> inv_std;
  Tensor<double> w1, b1, w2, b2;

  std::size_t input_dim() const { return mean.size(); }

  Tensor<double> standardize(std::span<const FisherEmbedding> xs) const {
    Tensor<double> x(Shape{xs.size(), input_dim()});
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto v = embedding_values(xs[i]);
      if (v.size() != input_dim()) {
        throw Error(ErrorKind::LengthMismatch, "embedding '" + xs[i].bag_id + "' has length " +
                                                   std::to_string(v.size()) + ", head expects " +
                                                   std::to_string(input_dim()));
      }
      for (std::size_t j = 0; j < v.size(); ++j) x.at(i, j) = (v[j] - mean[j]) * inv_std[j];
    }
    return x;
  }

  std::vector<std::string> predict(std::span<const FisherEmbedding> xs) const {
    if (xs.empty()) return {};
    ad::Graph<double> g;
    auto x = g.constant(standardize(xs));
    auto h = ad::relu(ad::add_bias(ad::matmul(x, g.constant(w1)), g.constant(b1)));
    auto logits = ad::add_bias(ad::matmul(h, g.constant(w2)), g.constant(b2)).value();
    std::vector<std::string> out;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols(); ++c)
        if (logits.at(i, c) > logits.at(i, best)) best = c;
      out.push_back(labels[best]);
    }
    return out;
  }
};

/// Full-batch momentum gradient descent on mean cross-entropy (+ l2 on the
/// weights).
inline ClassifierHead train_classifier_head(std::span<const FisherEmbedding> xs, std::span<const std::string> ys,
                                            const HeadConfig& config = {}) {
  config.validate();
  if (xs.empty()) throw Error(ErrorKind::EmptyTrainSet, "no training embeddings for the classifier head");
  if (xs.size() != ys.size()) throw Error(ErrorKind::LengthMismatch, "embeddings and labels differ in length");

  ClassifierHead head;
  head.labels.assign(ys.begin(), ys.end());
  std::sort(head.labels.begin(), head.labels.end());
  head.labels.erase(std::unique(head.labels.begin(), head.labels.end()), head.labels.end());
  std::map<std::string, std::size_t> label_index;
  for (std::size_t i = 0; i < head.labels.size(); ++i) label_index[head.labels[i]] = i;

  const std::size_t n = xs.size();
  const std::size_t d = embedding_values(xs[0]).size();
  head.mean.assign(d, 0.0);
  head.inv_std.assign(d, 0.0);
  std::vector<std::vector<double>> rows;
  for (const auto& e : xs) {
    rows.push_back(embedding_values(e));
    if (rows.back().size() != d) throw Error(ErrorKind::LengthMismatch, "training embeddings differ in length");
    for (std::size_t j = 0; j < d; ++j) head.mean[j] += rows.back()[j];
  }
  for (auto& m : head.mean) m /= static_cast<double>(n);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < d; ++j) head.inv_std[j] += (r[j] - head.mean[j]) * (r[j] - head.mean[j]);
  for (auto& s : head.inv_std) {
    const double sd = std::sqrt(s / static_cast<double>(n));
    s = sd > 1e-12 ? 1.0 / sd : 0.0;  // constant coordinates carry no signal
  }

  const std::size_t k = head.labels.size();
  const std::size_t hidden = config.hidden;
  Rng rng(config.seed);
  const auto glorot = [&](std::size_t in, std::size_t out) {
    Tensor<double> w(Shape{in, out});
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto& v : w) v = rng.uniform(-bound, bound);
    return w;
  };
  head.w1 = glorot(d, hidden);
  head.b1 = Tensor<double>(Shape{hidden});
  head.w2 = glorot(hidden, k);
  head.b2 = Tensor<double>(Shape{k});

  const auto x_value = head.standardize(xs);
  std::vector<std::size_t> y;
  for (const auto& l : ys) y.push_back(label_index.at(l));
  const auto target_value = one_hot<double>(y, k);

  std::vector<Tensor<double>*> params = {&head.w1, &head.b1, &head.w2, &head.b2};
  std::vector<Tensor<double>> velocity;
  for (auto* p : params) velocity.emplace_back(p->shape());
  const double inv_n = 1.0 / static_cast<double>(n);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    ad::Graph<double> g;
    std::vector<ad::Var<double>> vars;
    for (auto* p : params) vars.push_back(g.parameter(*p));
    auto x = g.constant(x_value);
    auto h = ad::relu(ad::add_bias(ad::matmul(x, vars[0]), vars[1]));
    auto logits = ad::add_bias(ad::matmul(h, vars[2]), vars[3]);
    auto ce = ad::affine(ad::sum(g.constant(target_value) * ad::log_softmax(logits)), -inv_n, 0.0);
    auto l2 = ad::sum(vars[0] * vars[0]) + ad::sum(vars[2] * vars[2]);
    auto loss = ce + ad::affine(l2, 0.5 * config.weight_decay, 0.0);
    if (!std::isfinite(loss.item())) throw Error(ErrorKind::DivergenceDetected, "classifier head loss diverged");
    auto grads = g.backward(loss, std::span<const ad::Var<double>>(vars));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& v = velocity[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = config.momentum * v[j] + grads.grads[i][j];
        p[j] -= config.learning_rate * v[j];
      }
    }
  }
  return head;
}

inline EvalReport classify(const ClassifierHead& head, std::span<const FisherEmbedding> xs,
                           std::span<const std::string> truth) {
  const auto pred = head.predict(xs);
  std::vector<std::string> labels = head.labels;
  labels.insert(labels.end(), truth.begin(), truth.end());
  return compute_report(truth, pred, labels);
}

}  // namespace deepfv
