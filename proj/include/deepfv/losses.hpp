#pragma once

// Training objectives: the conditioned-VAE loss, the l1 penalty on its
// parameter gradient, and the squared distance between that gradient and
// fixed binary targets. Both penalties are built on the differentiable
// gradient nodes produced by ad::Graph::gradients, so the gradient of the
// total objective includes the second-order terms.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepfv/autodiff.hpp"
#include "deepfv/cvae.hpp"
#include "deepfv/error.hpp"
#include "deepfv/tensor.hpp"

namespace deepfv {

struct LossWeights {
  double reconstruction = 1.0;  // lambda1
  double kl = 1e-3;             // lambda2
  double classification = 1.0;  // lambda3
  double sparsity = 0.0;        // lambda4
  double quantization = 0.0;    // lambda5

  void validate() const {
    for (double v : {reconstruction, kl, classification, sparsity, quantization}) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw Error(ErrorKind::InvalidConfig, "loss weights must be finite and >= 0");
    }
  }

  bool uses_sparsity() const { return sparsity > 0.0; }
  bool uses_quantization() const { return quantization > 0.0; }

  /// FV, SFV, BFV or SBFV.
  std::string mode() const {
    if (uses_sparsity() && uses_quantization()) return "SBFV";
    if (uses_sparsity()) return "SFV";
    if (uses_quantization()) return "BFV";
    return "FV";
  }
};

/// One mini-batch of labelled instances: x is [B, d_in].
template <std::floating_point T>
struct Batch {
  Tensor<T> x;
  std::vector<std::size_t> conditions;
  std::vector<std::size_t> classes;

  std::size_t size() const { return conditions.size(); }
};

/// Per-parameter-tensor targets in {-1, +1}, same order and shapes as
/// CvaeParameters::tensors().
template <std::floating_point T>
struct BinaryTargets {
  std::vector<Tensor<T>> tensors;
};

template <std::floating_point T>
struct CvaeTerms {
  ad::Var<T> total;
  ad::Var<T> rec;
  ad::Var<T> kl;
  ad::Var<T> cls;
};

namespace detail {

template <class T>
void check_batch(const CvaeConfig& c, const Batch<T>& batch) {
  if (batch.size() == 0 || batch.x.size() == 0) throw Error(ErrorKind::EmptyBatch, "batch has no instances");
  if (batch.x.rows() != batch.size() || batch.classes.size() != batch.size()) {
    throw Error(ErrorKind::ShapeMismatch, "batch features and labels disagree in length");
  }
  for (auto k : batch.classes) {
    if (k >= c.n_classes) {
      throw Error(ErrorKind::LabelOutOfRange,
                  "class label " + std::to_string(k) + " outside [0," + std::to_string(c.n_classes) + ")");
    }
  }
  for (auto k : batch.conditions) {
    if (k >= c.n_conditions) {
      throw Error(ErrorKind::LabelOutOfRange,
                  "condition label " + std::to_string(k) + " outside [0," + std::to_string(c.n_conditions) + ")");
    }
  }
}

}  // namespace detail

/// lambda1 * L_rec + lambda2 * L_kl + lambda3 * L_cls, each a batch mean.
///
/// L_rec = mean ||x - x_hat||^2 (unit-variance Gaussian decoder up to
/// constants), L_kl = mean of -1/2 sum_j (1 + log s2_j - mu_j^2 - s2_j),
/// L_cls = mean cross-entropy of the classifier softmax against the class.
template <std::floating_point T>
CvaeTerms<T> cvae_terms(const BoundCvae<T>& m, const Batch<T>& batch, const Tensor<T>& noise,
                        const LossWeights& w) {
  detail::check_batch(m.config, batch);
  auto& g = m.graph();
  auto x = g.constant(batch.x);
  auto eps = g.constant(noise);
  auto cond = g.constant(one_hot<T>(batch.conditions, m.config.n_conditions));
  auto target = g.constant(one_hot<T>(batch.classes, m.config.n_classes));
  const auto f = forward(m, x, eps, cond);
  const T inv_b = T(1) / static_cast<T>(batch.size());

  CvaeTerms<T> t;
  t.rec = ad::affine(ad::squared_error(x, f.x_hat), inv_b, T(0));
  auto kl_inner = ad::affine(f.log_var, T(1), T(1)) - f.mu * f.mu - ad::exp(f.log_var);
  t.kl = ad::affine(ad::sum(kl_inner), T(-0.5) * inv_b, T(0));
  t.cls = ad::affine(ad::sum(target * ad::log_softmax(f.logits)), -inv_b, T(0));
  t.total = ad::affine(t.rec, static_cast<T>(w.reconstruction), T(0)) +
            ad::affine(t.kl, static_cast<T>(w.kl), T(0)) + ad::affine(t.cls, static_cast<T>(w.classification), T(0));
  return t;
}

/// Every term of the training objective for one batch, as graph nodes.
template <std::floating_point T>
struct Objective {
  CvaeTerms<T> cvae;
  std::vector<ad::Var<T>> cvae_grads;  // d L_CVAE / d W_i, differentiable
  std::optional<ad::Var<T>> grad_l1;   // sum_i ||grad_i||_1
  std::optional<ad::Var<T>> quant;     // sum_i ||grad_i - B_i||^2
  ad::Var<T> total;
};

/// Builds L_CVAE + lambda4 * grad_l1 + lambda5 * quant. The gradient of
/// L_CVAE is taken with respect to every parameter tensor (encoder, heads,
/// decoder; weights and biases). `targets` is required iff lambda5 > 0.
/// With `always_grad` the first-order gradient nodes are built even when both
/// penalties are off, for monitoring.
template <std::floating_point T>
Objective<T> build_objective(const BoundCvae<T>& m, const Batch<T>& batch, const Tensor<T>& noise,
                             const LossWeights& w, const BinaryTargets<T>* targets, bool always_grad = false) {
  w.validate();
  if (w.uses_quantization() && targets == nullptr) {
    throw Error(ErrorKind::MissingTargets, "lambda5 > 0 requires binary targets");
  }
  Objective<T> o;
  o.cvae = cvae_terms(m, batch, noise, w);
  o.total = o.cvae.total;
  if (!(w.uses_sparsity() || w.uses_quantization() || always_grad)) return o;

  auto& g = m.graph();
  o.cvae_grads = g.gradients(o.cvae.total, std::span<const ad::Var<T>>(m.vars));
  std::vector<ad::Var<T>> l1_terms;
  for (const auto& gr : o.cvae_grads) l1_terms.push_back(ad::abs_sum(gr));
  ad::Var<T> l1 = l1_terms.front();
  for (std::size_t i = 1; i < l1_terms.size(); ++i) l1 = l1 + l1_terms[i];
  o.grad_l1 = l1;
  if (w.uses_sparsity()) o.total = o.total + ad::affine(l1, static_cast<T>(w.sparsity), T(0));

  if (targets != nullptr) {
    if (targets->tensors.size() != o.cvae_grads.size()) {
      throw Error(ErrorKind::ShapeMismatch, "binary targets cover " + std::to_string(targets->tensors.size()) +
                                                " tensors, model has " + std::to_string(o.cvae_grads.size()));
    }
    ad::Var<T> q;
    for (std::size_t i = 0; i < o.cvae_grads.size(); ++i) {
      if (targets->tensors[i].shape() != o.cvae_grads[i].shape()) {
        throw Error(ErrorKind::ShapeMismatch, "binary target " + std::to_string(i) + " has shape " +
                                                  shape_string(targets->tensors[i].shape()) + ", gradient has " +
                                                  shape_string(o.cvae_grads[i].shape()));
      }
      auto term = ad::squared_error(o.cvae_grads[i], g.constant(targets->tensors[i]));
      q = q.valid() ? q + term : term;
    }
    o.quant = q;
    if (w.uses_quantization()) o.total = o.total + ad::affine(q, static_cast<T>(w.quantization), T(0));
  }
  return o;
}

// ---------------------------------------------------------------------------
// Value-level API

template <std::floating_point T>
struct CvaeLossValue {
  T total;
  T rec;
  T kl;
  T cls;
};

template <std::floating_point T>
CvaeLossValue<T> cvae_loss(const CvaeParameters<T>& params, const Batch<T>& batch, const Tensor<T>& noise,
                           const LossWeights& w) {
  ad::Graph<T> g;
  auto m = bind(g, params);
  auto t = cvae_terms(m, batch, noise, w);
  return {t.total.item(), t.rec.item(), t.kl.item(), t.cls.item()};
}

/// Gradient of L_CVAE with respect to every parameter tensor.
template <std::floating_point T>
std::vector<Tensor<T>> cvae_gradient(const CvaeParameters<T>& params, const Batch<T>& batch, const Tensor<T>& noise,
                                     const LossWeights& w) {
  ad::Graph<T> g;
  auto m = bind(g, params);
  auto t = cvae_terms(m, batch, noise, w);
  auto grads = g.backward(t.total, std::span<const ad::Var<T>>(m.vars));
  return grads.grads;
}

/// lambda4 * sum_i ||d L_CVAE / d W_i||_1 on this batch.
template <std::floating_point T>
T sparsity_penalty(const CvaeParameters<T>& params, const Batch<T>& batch, const Tensor<T>& noise,
                   const LossWeights& w) {
  if (!w.uses_sparsity()) throw Error(ErrorKind::InvalidConfig, "sparsity penalty requires lambda4 > 0");
  LossWeights only = w;
  only.quantization = 0;
  ad::Graph<T> g;
  auto m = bind(g, params);
  auto o = build_objective(m, batch, noise, only, static_cast<const BinaryTargets<T>*>(nullptr));
  return static_cast<T>(w.sparsity) * o.grad_l1->item();
}

/// lambda5 * sum_i ||d L_CVAE / d W_i - B_i||^2 on this batch.
template <std::floating_point T>
T quantization_penalty(const CvaeParameters<T>& params, const Batch<T>& batch, const Tensor<T>& noise,
                       const LossWeights& w, const BinaryTargets<T>& targets) {
  if (!w.uses_quantization()) throw Error(ErrorKind::InvalidConfig, "quantization penalty requires lambda5 > 0");
  ad::Graph<T> g;
  auto m = bind(g, params);
  auto o = build_objective(m, batch, noise, w, &targets);
  return static_cast<T>(w.quantization) * o.quant->item();
}

template <std::floating_point T>
T total_loss(const CvaeParameters<T>& params, const Batch<T>& batch, const Tensor<T>& noise, const LossWeights& w,
             const BinaryTargets<T>* targets = nullptr) {
  ad::Graph<T> g;
  auto m = bind(g, params);
  return build_objective(m, batch, noise, w, targets).total.item();
}

/// Value and full gradient (second-order terms included) of the objective.
template <std::floating_point T>
std::pair<T, std::vector<Tensor<T>>> total_loss_gradient(const CvaeParameters<T>& params, const Batch<T>& batch,
                                                         const Tensor<T>& noise, const LossWeights& w,
                                                         const BinaryTargets<T>* targets = nullptr) {
  ad::Graph<T> g;
  auto m = bind(g, params);
  auto o = build_objective(m, batch, noise, w, targets);
  auto grads = g.backward(o.total, std::span<const ad::Var<T>>(m.vars));
  return {o.total.item(), std::move(grads.grads)};
}

/// Closed-form minimiser of ||g - B||^2 over B in {-1,+1}: B = sign(g), with
/// sign(0) taken as +1.
template <std::floating_point T>
BinaryTargets<T> sign_update(std::span<const Tensor<T>> gradients) {
  BinaryTargets<T> b;
  for (const auto& gr : gradients) {
    if (!gr.all_finite()) throw Error(ErrorKind::NonFinite, "non-finite gradient in sign update");
    Tensor<T> s(gr.shape());
    for (std::size_t i = 0; i < gr.size(); ++i) s[i] = gr[i] < T(0) ? T(-1) : T(1);
    b.tensors.push_back(std::move(s));
  }
  return b;
}

template <std::floating_point T>
BinaryTargets<T> sign_update(const std::vector<Tensor<T>>& gradients) {
  return sign_update(std::span<const Tensor<T>>(gradients));
}

}  // namespace deepfv
