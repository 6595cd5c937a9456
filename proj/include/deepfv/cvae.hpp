#pragma once

// Conditioned VAE over instance feature vectors.
//
// Encoder: two hidden layers, then three affine heads tapping the last hidden
// layer (mean, log-variance, class logits). The decoder input is
// [z, one_hot(condition), softmax(class logits)] followed by two hidden
// layers and a linear output layer. Weights are stored [fan_in, fan_out] so a
// row batch X maps to X W + b.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "deepfv/autodiff.hpp"
#include "deepfv/binary_io.hpp"
#include "deepfv/error.hpp"
#include "deepfv/random.hpp"
#include "deepfv/tensor.hpp"

namespace deepfv {

enum class Activation : std::uint8_t { Tanh = 0, Relu = 1 };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw Error(ErrorKind::InvalidConfig, "unknown activation '" + s + "'");
}

struct CvaeConfig {
  std::size_t input_dim = 32;
  std::array<std::size_t, 2> encoder_hidden{64, 64};
  std::size_t latent_dim = 8;
  std::array<std::size_t, 2> decoder_hidden{64, 64};
  std::size_t n_conditions = 3;
  std::size_t n_classes = 3;
  Activation activation = Activation::Tanh;
  std::uint64_t seed = 1;

  std::size_t decoder_input_dim() const { return latent_dim + n_conditions + n_classes; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw Error(ErrorKind::InvalidConfig, std::string(name) + " must be >= 1");
    };
    positive(input_dim, "model.input_dim");
    positive(encoder_hidden[0], "model.encoder_hidden[0]");
    positive(encoder_hidden[1], "model.encoder_hidden[1]");
    positive(latent_dim, "model.latent_dim");
    positive(decoder_hidden[0], "model.decoder_hidden[0]");
    positive(decoder_hidden[1], "model.decoder_hidden[1]");
    positive(n_conditions, "model.n_conditions");
    positive(n_classes, "model.n_classes");
  }

  friend bool operator==(const CvaeConfig&, const CvaeConfig&) = default;
};

/// Position of each layer in the parameter list. This order, with row-major
/// weights followed by the bias inside each layer, defines the coordinates of
/// every flattened gradient and therefore of every embedding.
enum LayerIndex : std::size_t {
  kEncoder1 = 0,
  kEncoder2,
  kMean,
  kLogVar,
  kClassifier,
  kDecoder1,
  kDecoder2,
  kDecoder3,
  kLayerCount,
};

struct LayerShape {
  std::string name;
  std::size_t fan_in;
  std::size_t fan_out;

  std::size_t count() const { return fan_in * fan_out + fan_out; }
};

inline std::vector<LayerShape> layer_shapes(const CvaeConfig& c) {
  return {
      {"encoder1", c.input_dim, c.encoder_hidden[0]},
      {"encoder2", c.encoder_hidden[0], c.encoder_hidden[1]},
      {"mean", c.encoder_hidden[1], c.latent_dim},
      {"log_var", c.encoder_hidden[1], c.latent_dim},
      {"classifier", c.encoder_hidden[1], c.n_classes},
      {"decoder1", c.decoder_input_dim(), c.decoder_hidden[0]},
      {"decoder2", c.decoder_hidden[0], c.decoder_hidden[1]},
      {"decoder3", c.decoder_hidden[1], c.input_dim},
  };
}

inline std::size_t parameter_count(const CvaeConfig& c) {
  std::size_t total = 0;
  for (const auto& l : layer_shapes(c)) total += l.count();
  return total;
}

template <std::floating_point T>
struct Layer {
  std::string name;
  Tensor<T> weight;  // [fan_in, fan_out]
  Tensor<T> bias;    // [fan_out]
};

template <std::floating_point T>
struct CvaeParameters {
  CvaeConfig config;
  std::vector<Layer<T>> layers;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Tensors in flattening order: w0, b0, w1, b1, ...
  std::vector<const Tensor<T>*> tensors() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::vector<Tensor<T>*> tensors() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(count());
    for (const auto* t : tensors()) flat.insert(flat.end(), t->begin(), t->end());
    return flat;
  }

  friend bool operator==(const CvaeParameters& a, const CvaeParameters& b) {
    if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      if (!(a.layers[i].weight == b.layers[i].weight) || !(a.layers[i].bias == b.layers[i].bias)) return false;
    }
    return true;
  }
};

/// Glorot-uniform weights, zero biases; deterministic in config.seed.
template <std::floating_point T>
CvaeParameters<T> init_parameters(const CvaeConfig& config) {
  config.validate();
  Rng rng(config.seed);
  CvaeParameters<T> params{config, {}};
  for (const auto& shape : layer_shapes(config)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(shape.fan_in + shape.fan_out));
    Tensor<T> w(Shape{shape.fan_in, shape.fan_out});
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    params.layers.push_back({shape.name, std::move(w), Tensor<T>(Shape{shape.fan_out})});
  }
  return params;
}

// ---------------------------------------------------------------------------
// Graph construction

template <std::floating_point T>
struct BoundCvae {
  CvaeConfig config;
  std::vector<ad::Var<T>> vars;  // w0, b0, w1, b1, ... (flattening order)

  ad::Var<T> weight(std::size_t layer) const { return vars[2 * layer]; }
  ad::Var<T> bias(std::size_t layer) const { return vars[2 * layer + 1]; }
  ad::Graph<T>& graph() const { return vars.front().graph(); }

  /// Parameter vars of the given layers, in flattening order.
  std::vector<ad::Var<T>> layer_vars(std::span<const std::size_t> layers) const {
    std::vector<ad::Var<T>> out;
    for (auto l : layers) {
      out.push_back(weight(l));
      out.push_back(bias(l));
    }
    return out;
  }
};

template <std::floating_point T>
BoundCvae<T> bind(ad::Graph<T>& graph, const CvaeParameters<T>& params) {
  BoundCvae<T> bound{params.config, {}};
  for (const auto* t : params.tensors()) bound.vars.push_back(graph.parameter(*t));
  return bound;
}

template <std::floating_point T>
struct CvaeForward {
  ad::Var<T> hidden;  // last encoder hidden layer
  ad::Var<T> mu;
  ad::Var<T> log_var;
  ad::Var<T> z;
  ad::Var<T> logits;
  ad::Var<T> z_pd;
  ad::Var<T> z_tt;
  ad::Var<T> z_cond;
  ad::Var<T> x_hat;
};

template <std::floating_point T>
Tensor<T> one_hot(std::span<const std::size_t> labels, std::size_t n) {
  Tensor<T> out(Shape{labels.size(), n});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n) {
      throw Error(ErrorKind::LabelOutOfRange,
                  "label " + std::to_string(labels[i]) + " outside [0," + std::to_string(n) + ")");
    }
    out.at(i, labels[i]) = T(1);
  }
  return out;
}

namespace detail {

template <class T>
ad::Var<T> activate(ad::Var<T> x, Activation a) {
  return a == Activation::Tanh ? ad::tanh(x) : ad::relu(x);
}

template <class T>
ad::Var<T> dense(const BoundCvae<T>& m, std::size_t layer, ad::Var<T> x) {
  return ad::add_bias(ad::matmul(x, m.weight(layer)), m.bias(layer));
}

template <class T>
ad::Var<T> decode_graph(const BoundCvae<T>& m, ad::Var<T> z_cond) {
  const auto act = m.config.activation;
  auto d1 = activate(dense(m, kDecoder1, z_cond), act);
  auto d2 = activate(dense(m, kDecoder2, d1), act);
  return dense(m, kDecoder3, d2);
}

}  // namespace detail

/// Full forward pass on a batch: x [B, d_in], noise [B, d], condition one-hot
/// [B, c]. All three are graph inputs, never drawn inside the graph.
template <std::floating_point T>
CvaeForward<T> forward(const BoundCvae<T>& m, ad::Var<T> x, ad::Var<T> noise, ad::Var<T> condition_one_hot) {
  const auto& c = m.config;
  if (x.value().cols() != c.input_dim) {
    throw Error(ErrorKind::ShapeMismatch, "input has " + std::to_string(x.value().cols()) + " features, model expects " +
                                              std::to_string(c.input_dim));
  }
  if (noise.value().cols() != c.latent_dim || noise.value().rows() != x.value().rows()) {
    throw Error(ErrorKind::ShapeMismatch, "noise shape " + shape_string(noise.shape()) + " does not match batch");
  }
  if (condition_one_hot.value().cols() != c.n_conditions || condition_one_hot.value().rows() != x.value().rows()) {
    throw Error(ErrorKind::ShapeMismatch, "condition shape " + shape_string(condition_one_hot.shape()) +
                                              " does not match batch");
  }
  CvaeForward<T> f;
  auto h1 = detail::activate(detail::dense(m, kEncoder1, x), c.activation);
  f.hidden = detail::activate(detail::dense(m, kEncoder2, h1), c.activation);
  f.mu = detail::dense(m, kMean, f.hidden);
  f.log_var = detail::dense(m, kLogVar, f.hidden);
  f.logits = detail::dense(m, kClassifier, f.hidden);
  f.z_pd = ad::softmax(f.logits);
  f.z = ad::reparameterize(f.mu, f.log_var, noise);
  f.z_tt = condition_one_hot;
  f.z_cond = ad::concat({f.z, f.z_tt, f.z_pd});
  f.x_hat = detail::decode_graph(m, f.z_cond);
  return f;
}

// ---------------------------------------------------------------------------
// Value-level API

template <std::floating_point T>
struct LatentBundle {
  Tensor<T> mu;
  Tensor<T> log_var;
  Tensor<T> z;
  Tensor<T> z_tt;
  Tensor<T> z_pd;
  Tensor<T> z_cond;
};

namespace detail {

template <class T>
Tensor<T> as_row(const Tensor<T>& v) {
  return Tensor<T>(Shape{1, v.size()}, v.data());
}

template <class T>
Tensor<T> as_vector(const Tensor<T>& v) {
  return Tensor<T>(Shape{v.size()}, v.data());
}

}  // namespace detail

/// Encodes one instance. `noise` has latent_dim entries; z = mu + sigma * noise.
template <std::floating_point T>
LatentBundle<T> encode(const CvaeParameters<T>& params, const Tensor<T>& x, const Tensor<T>& noise,
                       std::size_t condition) {
  if (x.size() != params.config.input_dim) {
    throw Error(ErrorKind::ShapeMismatch, "instance has " + std::to_string(x.size()) + " features, model expects " +
                                              std::to_string(params.config.input_dim));
  }
  if (noise.size() != params.config.latent_dim) {
    throw Error(ErrorKind::ShapeMismatch, "noise has " + std::to_string(noise.size()) + " entries, latent_dim is " +
                                              std::to_string(params.config.latent_dim));
  }
  ad::Graph<T> g;
  auto m = bind(g, params);
  const std::size_t labels[] = {condition};
  auto f = forward(m, g.constant(detail::as_row(x)), g.constant(detail::as_row(noise)),
                   g.constant(one_hot<T>(labels, params.config.n_conditions)));
  return {detail::as_vector(f.mu.value()),  detail::as_vector(f.log_var.value()), detail::as_vector(f.z.value()),
          detail::as_vector(f.z_tt.value()), detail::as_vector(f.z_pd.value()),   detail::as_vector(f.z_cond.value())};
}

/// Decoder mean for one conditioned latent code of length d + c + k.
template <std::floating_point T>
Tensor<T> decode(const CvaeParameters<T>& params, const Tensor<T>& z_cond) {
  if (z_cond.size() != params.config.decoder_input_dim()) {
    throw Error(ErrorKind::ShapeMismatch, "conditioned latent has " + std::to_string(z_cond.size()) +
                                              " entries, decoder expects " +
                                              std::to_string(params.config.decoder_input_dim()));
  }
  ad::Graph<T> g;
  auto m = bind(g, params);
  return detail::as_vector(detail::decode_graph(m, g.constant(detail::as_row(z_cond))).value());
}

// ---------------------------------------------------------------------------
// Checkpoint: "CVAE", u16 version, config block, then every parameter as a
// little-endian f64 in flattening order.

inline constexpr std::uint16_t kCheckpointVersion = 1;

template <std::floating_point T>
void save_checkpoint(std::ostream& out, const CvaeParameters<T>& params) {
  const auto& c = params.config;
  io::write_magic(out, "CVAE");
  io::write_u16(out, kCheckpointVersion);
  io::write_u32(out, static_cast<std::uint32_t>(c.input_dim));
  io::write_u32(out, static_cast<std::uint32_t>(c.encoder_hidden[0]));
  io::write_u32(out, static_cast<std::uint32_t>(c.encoder_hidden[1]));
  io::write_u32(out, static_cast<std::uint32_t>(c.latent_dim));
  io::write_u32(out, static_cast<std::uint32_t>(c.decoder_hidden[0]));
  io::write_u32(out, static_cast<std::uint32_t>(c.decoder_hidden[1]));
  io::write_u32(out, static_cast<std::uint32_t>(c.n_conditions));
  io::write_u32(out, static_cast<std::uint32_t>(c.n_classes));
  io::write_u8(out, static_cast<std::uint8_t>(c.activation));
  io::write_u64(out, c.seed);
  io::write_u64(out, params.count());
  for (const auto* t : params.tensors())
    for (T v : *t) io::write_f64(out, static_cast<double>(v));
}

template <std::floating_point T>
CvaeParameters<T> load_checkpoint(std::istream& in, const std::string& source = "checkpoint") {
  io::expect_magic(in, "CVAE", source);
  const auto version = io::read_u16(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::ParseError, source + ": unsupported checkpoint version " + std::to_string(version));
  }
  CvaeConfig c;
  c.input_dim = io::read_u32(in, "config");
  c.encoder_hidden[0] = io::read_u32(in, "config");
  c.encoder_hidden[1] = io::read_u32(in, "config");
  c.latent_dim = io::read_u32(in, "config");
  c.decoder_hidden[0] = io::read_u32(in, "config");
  c.decoder_hidden[1] = io::read_u32(in, "config");
  c.n_conditions = io::read_u32(in, "config");
  c.n_classes = io::read_u32(in, "config");
  const auto act = io::read_u8(in, "config");
  if (act > 1) throw Error(ErrorKind::ParseError, source + ": unknown activation code");
  c.activation = static_cast<Activation>(act);
  c.seed = io::read_u64(in, "config");
  c.validate();
  const auto count = io::read_u64(in, "parameter count");
  if (count != parameter_count(c)) {
    throw Error(ErrorKind::ParseError, source + ": parameter count " + std::to_string(count) +
                                           " does not match config (" + std::to_string(parameter_count(c)) + ")");
  }
  CvaeParameters<T> params{c, {}};
  for (const auto& shape : layer_shapes(c)) {
    params.layers.push_back({shape.name, Tensor<T>(Shape{shape.fan_in, shape.fan_out}), Tensor<T>(Shape{shape.fan_out})});
  }
  for (auto* t : params.tensors())
    for (T& v : *t) v = static_cast<T>(io::read_f64(in, "parameters"));
  return params;
}

template <std::floating_point T>
void save_checkpoint(const std::string& path, const CvaeParameters<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path);
  save_checkpoint(out, params);
}

template <std::floating_point T>
CvaeParameters<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + path);
  return load_checkpoint<T>(in, path);
}

}  // namespace deepfv
