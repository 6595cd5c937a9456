#pragma once

// Independent reference implementations used to check the library: central
// finite differences, exhaustive sign search, bit-by-bit Hamming k-NN and a
// confusion-matrix F1. None of them call into the code they check beyond
// plain value accessors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "deepfv/cvae.hpp"
#include "deepfv/data.hpp"
#include "deepfv/fisher.hpp"
#include "deepfv/index.hpp"
#include "deepfv/losses.hpp"
#include "deepfv/random.hpp"

namespace oracle {

using deepfv::CvaeParameters;
using deepfv::Tensor;

/// d f / d theta_j = (f(theta + h e_j) - f(theta - h e_j)) / 2h for every
/// flattened parameter coordinate.
inline std::vector<double> central_differences(CvaeParameters<double> params,
                                               const std::function<double(const CvaeParameters<double>&)>& f,
                                               double h = 1e-5) {
  std::vector<double> out;
  for (auto* t : params.tensors()) {
    for (std::size_t j = 0; j < t->size(); ++j) {
      const double saved = (*t)[j];
      (*t)[j] = saved + h;
      const double plus = f(params);
      (*t)[j] = saved - h;
      const double minus = f(params);
      (*t)[j] = saved;
      out.push_back((plus - minus) / (2 * h));
    }
  }
  return out;
}

/// max_j |a_j - b_j| / max(|a_j|, |b_j|, floor).
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double worst = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double scale = std::max({std::abs(a[j]), std::abs(b[j]), floor});
    worst = std::max(worst, std::abs(a[j] - b[j]) / scale);
  }
  return worst;
}

inline std::vector<double> flatten(const std::vector<Tensor<double>>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.begin(), t.end());
  return out;
}

/// The maximum of B^T g over all 2^d sign vectors.
inline double best_sign_inner_product(const std::vector<double>& g) {
  const std::size_t d = g.size();
  double best = -INFINITY;
  for (std::uint64_t mask = 0; mask < (1ull << d); ++mask) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += ((mask >> j) & 1u) ? g[j] : -g[j];
    best = std::max(best, s);
  }
  return best;
}

/// The minimum of ||g - B||^2 over all 2^d sign vectors.
inline double best_quantization_residual(const std::vector<double>& g) {
  const std::size_t d = g.size();
  double best = INFINITY;
  for (std::uint64_t mask = 0; mask < (1ull << d); ++mask) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double b = ((mask >> j) & 1u) ? 1.0 : -1.0;
      s += (g[j] - b) * (g[j] - b);
    }
    best = std::min(best, s);
  }
  return best;
}

inline std::size_t hamming_bitwise(const deepfv::FisherEmbedding& a, const deepfv::FisherEmbedding& b) {
  std::size_t d = 0;
  for (std::size_t j = 0; j < a.dim; ++j) {
    const bool x = (a.bits[j / 8] >> (j % 8)) & 1u;
    const bool y = (b.bits[j / 8] >> (j % 8)) & 1u;
    d += x != y;
  }
  return d;
}

/// (entry position, distance) of the k nearest admissible entries; ties by
/// position.
inline std::vector<std::pair<std::size_t, std::size_t>> knn_bitwise(const std::vector<deepfv::IndexEntry>& entries,
                                                                     const deepfv::IndexEntry& query, std::size_t k,
                                                                     bool exclude_patient, bool same_condition) {
  std::vector<std::pair<std::size_t, std::size_t>> all;  // (distance, position)
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (exclude_patient && entries[i].patient_id == query.patient_id) continue;
    if (same_condition && entries[i].condition != query.condition) continue;
    all.emplace_back(hamming_bitwise(entries[i].code, query.code), i);
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  all.resize(std::min(k, all.size()));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& [d, i] : all) out.emplace_back(i, d);
  return out;
}

struct ClassScore {
  double precision, recall, f1;
};

/// Per-label scores from an explicit confusion matrix.
inline std::map<std::string, ClassScore> confusion_scores(const std::vector<std::string>& truth,
                                                          const std::vector<std::string>& pred) {
  std::map<std::string, std::map<std::string, int>> cm;  // cm[truth][pred]
  std::vector<std::string> labels(truth);
  labels.insert(labels.end(), pred.begin(), pred.end());
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  for (std::size_t i = 0; i < truth.size(); ++i) ++cm[truth[i]][pred[i]];
  std::map<std::string, ClassScore> out;
  for (const auto& c : labels) {
    int tp = cm[c][c];
    int predicted = 0, actual = 0;
    for (const auto& r : labels) {
      predicted += cm[r][c];
      actual += cm[c][r];
    }
    const double p = predicted ? double(tp) / predicted : 0.0;
    const double r = actual ? double(tp) / actual : 0.0;
    out[c] = {p, r, (p + r) > 0 ? 2 * p * r / (p + r) : 0.0};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixtures

inline deepfv::CvaeConfig tiny_config(std::uint64_t seed = 1) {
  deepfv::CvaeConfig c;
  c.input_dim = 4;
  c.encoder_hidden = {3, 3};
  c.latent_dim = 2;
  c.decoder_hidden = {3, 3};
  c.n_conditions = 2;
  c.n_classes = 2;
  c.seed = seed;
  return c;
}

inline deepfv::Batch<double> random_batch(const deepfv::CvaeConfig& c, std::size_t n, std::uint64_t seed) {
  deepfv::Rng rng(seed);
  deepfv::Batch<double> b;
  b.x = Tensor<double>(deepfv::Shape{n, c.input_dim});
  for (auto& v : b.x) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    b.conditions.push_back(rng.below(c.n_conditions));
    b.classes.push_back(rng.below(c.n_classes));
  }
  return b;
}

inline Tensor<double> random_noise(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  deepfv::Rng rng(seed);
  Tensor<double> t(deepfv::Shape{rows, cols});
  for (auto& v : t) v = rng.normal();
  return t;
}

inline deepfv::FisherEmbedding random_code(deepfv::Rng& rng, const std::string& id, std::size_t bits) {
  auto e = deepfv::FisherEmbedding::binary(id, bits);
  for (std::size_t j = 0; j < bits; ++j)
    if (rng.next_u64() & 1u) e.set_bit(j);
  return e;
}

}  // namespace oracle
