#pragma once

// Instance-level training of the conditioned VAE with optional gradient
// sparsity and gradient quantization penalties. Binary targets are refreshed
// by the closed-form sign update, alternating with parameter steps.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "deepfv/autodiff.hpp"
#include "deepfv/cvae.hpp"
#include "deepfv/data.hpp"
#include "deepfv/error.hpp"
#include "deepfv/losses.hpp"
#include "deepfv/random.hpp"

namespace deepfv {

enum class RefreshMode : std::uint8_t { PerEpoch, PerBatch };

inline std::string to_string(RefreshMode m) { return m == RefreshMode::PerEpoch ? "per-epoch" : "per-batch"; }

inline RefreshMode parse_refresh_mode(const std::string& s) {
  if (s == "per-epoch") return RefreshMode::PerEpoch;
  if (s == "per-batch") return RefreshMode::PerBatch;
  throw Error(ErrorKind::InvalidConfig, "unknown b_refresh '" + s + "' (per-epoch | per-batch)");
}

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double momentum = 0.9;  // 0 gives plain gradient descent
  LossWeights weights;
  RefreshMode b_refresh = RefreshMode::PerEpoch;
  double clip_norm = 10.0;  // global l2 norm; 0 disables
  std::uint64_t seed = 7;

  void validate() const {
    if (epochs < 1) throw Error(ErrorKind::InvalidConfig, "train.epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorKind::InvalidConfig, "train.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::InvalidConfig, "train.learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::InvalidConfig, "train.momentum must be in [0,1)");
    if (!(clip_norm >= 0.0)) throw Error(ErrorKind::InvalidConfig, "train.clip_norm must be >= 0");
    weights.validate();
  }
};

/// Epoch means over mini-batches. `grad_l1` is sum_i ||dL_CVAE/dW_i||_1 and
/// `quant` is sum_i ||dL_CVAE/dW_i - B_i||^2, both unweighted; without
/// quantization targets `quant` is measured against sign(gradient).
struct EpochRecord {
  std::size_t epoch = 0;
  double total = 0;
  double rec = 0;
  double kl = 0;
  double cls = 0;
  double grad_l1 = 0;
  double quant = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;

  void write_csv(std::ostream& out) const {
    out << "epoch,total,rec,kl,cls,grad_l1,quant,seconds\n";
    out.precision(17);
    for (const auto& e : epochs) {
      out << e.epoch << ',' << e.total << ',' << e.rec << ',' << e.kl << ',' << e.cls << ',' << e.grad_l1 << ','
          << e.quant << ',' << e.seconds << '\n';
    }
  }
};

template <std::floating_point T>
struct TrainResult {
  CvaeParameters<T> params;
  TrainReport report;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

template <class T>
Batch<T> gather(const InstanceSet<T>& data, std::span<const std::size_t> rows) {
  Batch<T> b;
  const std::size_t d = data.x.cols();
  b.x = Tensor<T>(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) b.x.at(i, j) = data.x.at(rows[i], j);
    b.conditions.push_back(data.conditions[rows[i]]);
    b.classes.push_back(data.classes[rows[i]]);
  }
  return b;
}

template <class T>
Tensor<T> draw_noise(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor<T> eps(Shape{rows, cols});
  for (auto& v : eps) v = static_cast<T>(rng.normal());
  return eps;
}

template <class T>
double quant_distance(const std::vector<Tensor<T>>& grads, const BinaryTargets<T>* targets) {
  double q = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      const double g = grads[i][j];
      const double b = targets ? static_cast<double>(targets->tensors[i][j]) : (g < 0 ? -1.0 : 1.0);
      q += (g - b) * (g - b);
    }
  }
  return q;
}

template <class T>
bool finite(const std::vector<Tensor<T>>& ts) {
  for (const auto& t : ts)
    if (!t.all_finite()) return false;
  return true;
}

}  // namespace detail

/// Mini-batch training with momentum SGD. For each epoch: shuffle, refresh
/// binary targets from the L_CVAE gradient of the epoch's first batch (or of
/// every batch in per-batch mode), then step on the full objective, whose
/// gradient includes the double-backpropagated penalty terms. Deterministic
/// in (params, data, config).
template <std::floating_point T>
TrainResult<T> train(CvaeParameters<T> params, const InstanceSet<T>& data, const TrainConfig& config,
                     const EpochCallback& on_epoch = {}) {
  config.validate();
  if (data.size() == 0) throw Error(ErrorKind::EmptyDataset, "no training instances");
  if (data.x.cols() != params.config.input_dim) {
    throw Error(ErrorKind::ShapeMismatch, "training features have dim " + std::to_string(data.x.cols()) +
                                              ", model expects " + std::to_string(params.config.input_dim));
  }
  const auto& w = config.weights;
  const bool quantize = w.uses_quantization();
  const bool penalized = w.uses_sparsity() || quantize;
  const std::size_t latent = params.config.latent_dim;

  Rng rng(config.seed);
  std::vector<Tensor<T>> velocity;
  for (const auto* t : params.tensors()) velocity.emplace_back(t->shape());

  TrainReport report;
  std::optional<BinaryTargets<T>> targets;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    auto order = rng.permutation(data.size());
    const std::size_t n_batches = (order.size() + config.batch_size - 1) / config.batch_size;
    auto batch_rows = [&](std::size_t b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(order.size(), lo + config.batch_size);
      return std::span<const std::size_t>(order.data() + lo, hi - lo);
    };

    if (quantize && config.b_refresh == RefreshMode::PerEpoch) {
      const auto ref = detail::gather(data, batch_rows(0));
      const auto eps = detail::draw_noise<T>(rng, ref.size(), latent);
      targets = sign_update(cvae_gradient(params, ref, eps, w));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < n_batches; ++b) {
      const auto batch = detail::gather(data, batch_rows(b));
      const auto eps = detail::draw_noise<T>(rng, batch.size(), latent);
      if (quantize && config.b_refresh == RefreshMode::PerBatch) {
        targets = sign_update(cvae_gradient(params, batch, eps, w));
      }

      ad::Graph<T> g;
      auto m = bind(g, params);
      auto obj = build_objective(m, batch, eps, w, quantize ? &*targets : nullptr, /*always_grad=*/true);
      std::vector<Tensor<T>> cvae_grads;
      for (const auto& v : obj.cvae_grads) cvae_grads.push_back(v.value());
      std::vector<Tensor<T>> step =
          penalized ? g.backward(obj.total, std::span<const ad::Var<T>>(m.vars)).grads : cvae_grads;

      const double total = obj.total.item();
      if (!std::isfinite(total) || !detail::finite(step)) {
        throw Error(ErrorKind::DivergenceDetected, "non-finite loss or gradient at epoch " + std::to_string(epoch));
      }
      rec.total += total;
      rec.rec += obj.cvae.rec.item();
      rec.kl += obj.cvae.kl.item();
      rec.cls += obj.cvae.cls.item();
      rec.grad_l1 += obj.grad_l1->item();
      rec.quant += obj.quant ? static_cast<double>(obj.quant->item()) : detail::quant_distance<T>(cvae_grads, nullptr);

      double scale = 1.0;
      if (config.clip_norm > 0.0) {
        double sq = 0;
        for (const auto& s : step)
          for (T v : s) sq += static_cast<double>(v) * v;
        const double norm = std::sqrt(sq);
        if (norm > config.clip_norm) scale = config.clip_norm / norm;
      }
      auto tensors = params.tensors();
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& p = *tensors[i];
        auto& v = velocity[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
          v[j] = static_cast<T>(config.momentum) * v[j] + static_cast<T>(scale) * step[i][j];
          p[j] -= static_cast<T>(config.learning_rate) * v[j];
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(n_batches);
    rec.total *= inv;
    rec.rec *= inv;
    rec.kl *= inv;
    rec.cls *= inv;
    rec.grad_l1 *= inv;
    rec.quant *= inv;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return {std::move(params), std::move(report)};
}

}  // namespace deepfv
