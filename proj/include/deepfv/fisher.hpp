#pragma once

// Bag-level Fisher embeddings: the reconstruction-loss gradient averaged over
// a bag's instances, power + l2 normalised, optionally binarised and reduced
// to per-condition high-variance coordinates.
//
// Embedding file ("FVE1"): magic, u16 version, u8 flags (0 dense, 1 binary),
// u32 count, u32 dim (values or bits), then per record a u32-length-prefixed
// UTF-8 bag id and the payload: dim little-endian f32 values, or ceil(dim/8)
// bytes with bit j at byte j/8, position j%8 (LSB first).
// Mask file ("FVM1"): magic, u32-length-prefixed condition name, u32 M, then
// M ascending u32 indices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "deepfv/autodiff.hpp"
#include "deepfv/binary_io.hpp"
#include "deepfv/cvae.hpp"
#include "deepfv/data.hpp"
#include "deepfv/error.hpp"
#include "deepfv/parallel.hpp"
#include "deepfv/tensor.hpp"

namespace deepfv {

struct EmbedOptions {
  // The reconstruction gradient is taken w.r.t. encoder and decoder
  // parameters; the classifier head is added only on request.
  bool include_classifier_head = false;
};

inline std::vector<std::size_t> embedding_layers(const EmbedOptions& opt) {
  std::vector<std::size_t> layers = {kEncoder1, kEncoder2, kMean, kLogVar};
  if (opt.include_classifier_head) layers.push_back(kClassifier);
  for (auto l : {kDecoder1, kDecoder2, kDecoder3}) layers.push_back(l);
  return layers;
}

inline std::size_t embedding_dim(const CvaeConfig& config, const EmbedOptions& opt) {
  const auto shapes = layer_shapes(config);
  std::size_t n = 0;
  for (auto l : embedding_layers(opt)) n += shapes[l].count();
  return n;
}

struct FisherScore {
  std::string bag_id;
  std::vector<double> values;
};

enum class EmbeddingKind : std::uint8_t { Dense = 0, Binary = 1 };

struct FisherEmbedding {
  std::string bag_id;
  EmbeddingKind kind = EmbeddingKind::Dense;
  std::size_t dim = 0;             // values or bits
  std::vector<double> dense;       // Dense: dim values
  std::vector<std::uint8_t> bits;  // Binary: ceil(dim / 8) bytes, LSB first
  std::string selection_id;        // condition of the applied mask, if any
  bool zero_vector = false;        // normalisation saw an all-zero score

  bool bit(std::size_t j) const { return (bits[j / 8] >> (j % 8)) & 1u; }

  static FisherEmbedding binary(std::string bag_id, std::size_t dim) {
    FisherEmbedding e;
    e.bag_id = std::move(bag_id);
    e.kind = EmbeddingKind::Binary;
    e.dim = dim;
    e.bits.assign((dim + 7) / 8, 0);
    return e;
  }

  void set_bit(std::size_t j) { bits[j / 8] |= static_cast<std::uint8_t>(1u << (j % 8)); }
};

namespace detail {

/// Instance rows in lexicographic order of their values: the accumulation
/// order of the bag sum, independent of how the bag was listed.
template <class T>
Tensor<T> canonical_rows(const Tensor<double>& instances) {
  const std::size_t n = instances.rows();
  const std::size_t d = instances.cols();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double* ra = instances.begin() + a * d;
    const double* rb = instances.begin() + b * d;
    return std::lexicographical_compare(ra, ra + d, rb, rb + d);
  });
  Tensor<T> x(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x.at(i, j) = static_cast<T>(instances.at(order[i], j));
  return x;
}

}  // namespace detail

/// s_F = (1/T) sum_t d||x_t - x_hat_t||^2 / d(theta, phi), evaluated with
/// z = mu (zero noise), the bag's condition one-hot, and the classifier's
/// own z_pd. Coordinates follow the flattening order restricted to
/// embedding_layers(opt).
template <std::floating_point T>
FisherScore fisher_score(const CvaeParameters<T>& params, const std::string& bag_id, const Tensor<double>& instances,
                         std::size_t condition, const EmbedOptions& opt = {}) {
  if (instances.size() == 0 || instances.rows() == 0) throw Error(ErrorKind::EmptyBag, "bag '" + bag_id + "' is empty");
  const auto& c = params.config;
  if (instances.cols() != c.input_dim) {
    throw Error(ErrorKind::ShapeMismatch, "bag '" + bag_id + "' has feature dim " + std::to_string(instances.cols()) +
                                              ", model expects " + std::to_string(c.input_dim));
  }
  const std::size_t n = instances.rows();
  ad::Graph<T> g;
  auto m = bind(g, params);
  auto x = g.constant(detail::canonical_rows<T>(instances));
  auto eps = g.constant(Tensor<T>(Shape{n, c.latent_dim}));
  std::vector<std::size_t> conds(n, condition);
  auto cond = g.constant(one_hot<T>(conds, c.n_conditions));
  auto f = forward(m, x, eps, cond);
  auto rec = ad::squared_error(x, f.x_hat);
  const auto layers = embedding_layers(opt);
  const auto wrt = m.layer_vars(layers);
  auto grads = g.backward(rec, std::span<const ad::Var<T>>(wrt));

  FisherScore s{bag_id, {}};
  s.values.reserve(grads.element_count());
  const double inv_t = 1.0 / static_cast<double>(n);
  for (const auto& gr : grads.grads)
    for (T v : gr) s.values.push_back(static_cast<double>(v) * inv_t);
  return s;
}

template <std::floating_point T>
FisherScore fisher_score(const CvaeParameters<T>& params, const Bag& bag, const EmbedOptions& opt = {}) {
  return fisher_score(params, bag.bag_id, bag.instances, bag.condition_index, opt);
}

/// Signed square root followed by l2 normalisation. An all-zero score yields
/// an all-zero embedding with `zero_vector` set.
inline FisherEmbedding s_normalize(const FisherScore& score) {
  FisherEmbedding e;
  e.bag_id = score.bag_id;
  e.kind = EmbeddingKind::Dense;
  e.dim = score.values.size();
  e.dense.resize(e.dim);
  double sq = 0;
  for (std::size_t j = 0; j < e.dim; ++j) {
    const double s = score.values[j];
    if (!std::isfinite(s)) throw Error(ErrorKind::NonFinite, "non-finite Fisher score for bag '" + score.bag_id + "'");
    const double v = std::copysign(std::sqrt(std::abs(s)), s);
    e.dense[j] = v;
    sq += v * v;
  }
  if (sq == 0.0) {
    e.zero_vector = true;
    std::fill(e.dense.begin(), e.dense.end(), 0.0);
    return e;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (auto& v : e.dense) v *= inv;
  return e;
}

/// Bit j is set iff v_j > 0.
inline FisherEmbedding binarize(const FisherEmbedding& dense) {
  if (dense.kind != EmbeddingKind::Dense) throw Error(ErrorKind::ShapeMismatch, "binarize expects a dense embedding");
  auto out = FisherEmbedding::binary(dense.bag_id, dense.dim);
  out.selection_id = dense.selection_id;
  out.zero_vector = dense.zero_vector;
  for (std::size_t j = 0; j < dense.dim; ++j)
    if (dense.dense[j] > 0.0) out.set_bit(j);
  return out;
}

/// Dense embeddings for every bag of `ds`, in bag order.
template <std::floating_point T>
std::vector<FisherEmbedding> embed_bags(const CvaeParameters<T>& params, const Dataset& ds, const EmbedOptions& opt = {},
                                        std::size_t threads = 1) {
  std::vector<FisherEmbedding> out(ds.bags.size());
  parallel_for(ds.bags.size(), threads, [&](std::size_t i) { out[i] = s_normalize(fisher_score(params, ds.bags[i], opt)); });
  return out;
}

// ---------------------------------------------------------------------------
// High-variance coordinate selection

struct SelectionMask {
  std::string condition;
  std::vector<std::uint32_t> indices;  // strictly increasing
  std::size_t source_dim = 0;          // 0 when unknown (loaded from file)

  std::size_t size() const { return indices.size(); }
};

/// Per-coordinate population variance over the group's dense embeddings;
/// keeps the M largest, ties to the lower index; indices returned ascending.
inline SelectionMask fit_selection_for(const std::string& condition, std::span<const FisherEmbedding* const> group,
                                       std::size_t m) {
  if (group.size() < 2) {
    throw Error(ErrorKind::TooFewBags, "condition '" + condition + "' has " + std::to_string(group.size()) +
                                           " embeddings; at least 2 are needed");
  }
  const std::size_t p = group.front()->dim;
  for (const auto* e : group) {
    if (e->kind != EmbeddingKind::Dense) throw Error(ErrorKind::ShapeMismatch, "selection is fitted on dense embeddings");
    if (e->dim != p) throw Error(ErrorKind::DimMismatch, "embeddings of differing length in condition '" + condition + "'");
  }
  if (m == 0 || m > p) {
    throw Error(ErrorKind::MOutOfRange, "M=" + std::to_string(m) + " outside [1," + std::to_string(p) + "]");
  }
  const double inv_n = 1.0 / static_cast<double>(group.size());
  std::vector<double> mean(p, 0.0);
  for (const auto* e : group)
    for (std::size_t j = 0; j < p; ++j) mean[j] += e->dense[j];
  for (auto& v : mean) v *= inv_n;
  std::vector<double> var(p, 0.0);
  for (const auto* e : group) {
    for (std::size_t j = 0; j < p; ++j) {
      const double d = e->dense[j] - mean[j];
      var[j] += d * d;
    }
  }
  for (auto& v : var) v *= inv_n;

  std::vector<std::uint32_t> order(p);
  std::iota(order.begin(), order.end(), 0u);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return var[a] > var[b] || (var[a] == var[b] && a < b); });
  order.resize(m);
  std::sort(order.begin(), order.end());
  return {condition, std::move(order), p};
}

/// One mask per condition present in `conditions` (parallel to `embeddings`).
inline std::map<std::string, SelectionMask> fit_selection(std::span<const FisherEmbedding> embeddings,
                                                          std::span<const std::string> conditions, std::size_t m) {
  if (embeddings.size() != conditions.size()) throw Error(ErrorKind::LengthMismatch, "embeddings and conditions differ");
  std::map<std::string, std::vector<const FisherEmbedding*>> groups;
  for (std::size_t i = 0; i < embeddings.size(); ++i) groups[conditions[i]].push_back(&embeddings[i]);
  std::map<std::string, SelectionMask> masks;
  for (const auto& [cond, group] : groups) masks.emplace(cond, fit_selection_for(cond, group, m));
  return masks;
}

inline FisherEmbedding apply_selection(const FisherEmbedding& e, const SelectionMask& mask) {
  if (mask.source_dim != 0 && mask.source_dim != e.dim) {
    throw Error(ErrorKind::MaskMismatch, "mask for " + std::to_string(mask.source_dim) + " coordinates applied to " +
                                             std::to_string(e.dim) + "-long embedding '" + e.bag_id + "'");
  }
  for (auto idx : mask.indices) {
    if (idx >= e.dim) {
      throw Error(ErrorKind::MaskMismatch, "mask index " + std::to_string(idx) + " outside embedding of length " +
                                               std::to_string(e.dim));
    }
  }
  FisherEmbedding out;
  if (e.kind == EmbeddingKind::Dense) {
    out = e;
    out.dim = mask.size();
    out.dense.resize(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) out.dense[i] = e.dense[mask.indices[i]];
  } else {
    out = FisherEmbedding::binary(e.bag_id, mask.size());
    out.zero_vector = e.zero_vector;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (e.bit(mask.indices[i])) out.set_bit(i);
  }
  out.selection_id = mask.condition;
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline constexpr std::uint16_t kEmbeddingFileVersion = 1;

inline void write_embeddings(std::ostream& out, std::span<const FisherEmbedding> embeddings) {
  const auto kind = embeddings.empty() ? EmbeddingKind::Dense : embeddings.front().kind;
  const std::size_t dim = embeddings.empty() ? 0 : embeddings.front().dim;
  for (const auto& e : embeddings) {
    if (e.kind != kind || e.dim != dim) {
      throw Error(ErrorKind::HeterogeneousEntries, "embedding file records must share kind and dimension");
    }
  }
  io::write_magic(out, "FVE1");
  io::write_u16(out, kEmbeddingFileVersion);
  io::write_u8(out, static_cast<std::uint8_t>(kind));
  io::write_u32(out, static_cast<std::uint32_t>(embeddings.size()));
  io::write_u32(out, static_cast<std::uint32_t>(dim));
  for (const auto& e : embeddings) {
    io::write_string(out, e.bag_id);
    if (kind == EmbeddingKind::Dense) {
      for (double v : e.dense) io::write_f32(out, static_cast<float>(v));
    } else {
      out.write(reinterpret_cast<const char*>(e.bits.data()), static_cast<std::streamsize>(e.bits.size()));
    }
  }
}

inline std::vector<FisherEmbedding> read_embeddings(std::istream& in, const std::string& source) {
  io::expect_magic(in, "FVE1", source);
  const auto version = io::read_u16(in, "embedding version");
  if (version != kEmbeddingFileVersion) {
    throw Error(ErrorKind::ParseError, source + ": unsupported embedding file version " + std::to_string(version));
  }
  const auto flags = io::read_u8(in, "embedding flags");
  if (flags > 1) throw Error(ErrorKind::ParseError, source + ": unknown embedding kind " + std::to_string(flags));
  const auto kind = static_cast<EmbeddingKind>(flags);
  const auto count = io::read_u32(in, "embedding count");
  const auto dim = io::read_u32(in, "embedding dim");
  std::vector<FisherEmbedding> out;
  out.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    auto id = io::read_string(in, "bag id");
    if (kind == EmbeddingKind::Dense) {
      FisherEmbedding e;
      e.bag_id = std::move(id);
      e.dim = dim;
      e.dense.resize(dim);
      for (auto& v : e.dense) v = io::read_f32(in, "embedding values");
      out.push_back(std::move(e));
    } else {
      auto e = FisherEmbedding::binary(std::move(id), dim);
      in.read(reinterpret_cast<char*>(e.bits.data()), static_cast<std::streamsize>(e.bits.size()));
      if (!in) throw Error(ErrorKind::ParseError, source + ": truncated binary code");
      out.push_back(std::move(e));
    }
  }
  return out;
}

inline void write_embeddings(const fs::path& path, std::span<const FisherEmbedding> embeddings) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  write_embeddings(out, embeddings);
}

inline std::vector<FisherEmbedding> read_embeddings(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "embedding file not found: " + path.string());
  return read_embeddings(in, path.string());
}

inline void write_mask(std::ostream& out, const SelectionMask& mask) {
  io::write_magic(out, "FVM1");
  io::write_string(out, mask.condition);
  io::write_u32(out, static_cast<std::uint32_t>(mask.indices.size()));
  for (auto idx : mask.indices) io::write_u32(out, idx);
}

inline SelectionMask read_mask(std::istream& in, const std::string& source) {
  io::expect_magic(in, "FVM1", source);
  SelectionMask mask;
  mask.condition = io::read_string(in, "mask condition");
  const auto m = io::read_u32(in, "mask size");
  mask.indices.resize(m);
  for (auto& idx : mask.indices) idx = io::read_u32(in, "mask indices");
  for (std::size_t i = 1; i < m; ++i) {
    if (mask.indices[i] <= mask.indices[i - 1]) {
      throw Error(ErrorKind::ParseError, source + ": mask indices are not strictly increasing");
    }
  }
  return mask;
}

inline void write_mask(const fs::path& path, const SelectionMask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  write_mask(out, mask);
}

inline SelectionMask read_mask(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "mask file not found: " + path.string());
  return read_mask(in, path.string());
}

}  // namespace deepfv
