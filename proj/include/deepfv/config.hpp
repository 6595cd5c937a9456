#pragma once

// Flat key=value run configuration. Lines are `section.key = value`; `#`
// starts a comment; blank lines are ignored. Unknown keys are rejected.
// Later assignments (e.g. command-line overrides) replace earlier ones.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deepfv/classifier.hpp"
#include "deepfv/cvae.hpp"
#include "deepfv/data.hpp"
#include "deepfv/error.hpp"
#include "deepfv/fisher.hpp"
#include "deepfv/trainer.hpp"

namespace deepfv {

struct EvalConfig {
  std::size_t k = 3;
  double test_fraction = 0.4;
  std::uint64_t split_seed = 3;
  double bit_fraction = 0.1;  // selection budget when no explicit M is given
};

struct RunConfig {
  SyntheticSpec synthetic;
  CvaeConfig model;
  TrainConfig train;
  EmbedOptions embed;
  HeadConfig head;
  EvalConfig eval;
  std::set<std::string> assigned;  // keys set explicitly
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw Error(ErrorKind::InvalidConfig, key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw Error(ErrorKind::InvalidConfig, key + ": expected a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorKind::InvalidConfig, key + ": expected true or false, got '" + v + "'");
}

inline std::array<std::size_t, 2> parse_widths(const std::string& key, const std::string& v) {
  const auto comma = v.find(',');
  if (comma == std::string::npos) throw Error(ErrorKind::InvalidConfig, key + ": expected two widths 'a,b'");
  return {parse_uint(key, trim(v.substr(0, comma))), parse_uint(key, trim(v.substr(comma + 1)))};
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DEEPFV_UINT(key, member) \
  {key, {[](RunConfig& c, const std::string& v) { c.member = parse_uint(key, v); }, \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define DEEPFV_DOUBLE(key, member) \
  {key, {[](RunConfig& c, const std::string& v) { c.member = parse_double(key, v); }, \
         [](const RunConfig& c) { return fmt(c.member); }}}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      DEEPFV_UINT("synthetic.n_conditions", synthetic.n_conditions),
      DEEPFV_UINT("synthetic.n_classes_per_condition", synthetic.n_classes_per_condition),
      DEEPFV_UINT("synthetic.bags_per_class", synthetic.bags_per_class),
      DEEPFV_UINT("synthetic.instances_min", synthetic.instances_min),
      DEEPFV_UINT("synthetic.instances_max", synthetic.instances_max),
      DEEPFV_UINT("synthetic.feature_dim", synthetic.feature_dim),
      DEEPFV_DOUBLE("synthetic.sigma_between", synthetic.sigma_between),
      DEEPFV_DOUBLE("synthetic.sigma_within", synthetic.sigma_within),
      DEEPFV_UINT("synthetic.patients_per_class", synthetic.patients_per_class),
      DEEPFV_UINT("synthetic.seed", synthetic.seed),

      DEEPFV_UINT("model.input_dim", model.input_dim),
      {"model.encoder_hidden",
       {[](RunConfig& c, const std::string& v) { c.model.encoder_hidden = parse_widths("model.encoder_hidden", v); },
        [](const RunConfig& c) {
          return std::to_string(c.model.encoder_hidden[0]) + "," + std::to_string(c.model.encoder_hidden[1]);
        }}},
      DEEPFV_UINT("model.latent_dim", model.latent_dim),
      {"model.decoder_hidden",
       {[](RunConfig& c, const std::string& v) { c.model.decoder_hidden = parse_widths("model.decoder_hidden", v); },
        [](const RunConfig& c) {
          return std::to_string(c.model.decoder_hidden[0]) + "," + std::to_string(c.model.decoder_hidden[1]);
        }}},
      DEEPFV_UINT("model.n_conditions", model.n_conditions),
      DEEPFV_UINT("model.n_classes", model.n_classes),
      {"model.activation",
       {[](RunConfig& c, const std::string& v) { c.model.activation = parse_activation(v); },
        [](const RunConfig& c) { return to_string(c.model.activation); }}},
      DEEPFV_UINT("model.seed", model.seed),

      DEEPFV_UINT("train.epochs", train.epochs),
      DEEPFV_UINT("train.batch_size", train.batch_size),
      DEEPFV_DOUBLE("train.learning_rate", train.learning_rate),
      DEEPFV_DOUBLE("train.momentum", train.momentum),
      {"train.b_refresh",
       {[](RunConfig& c, const std::string& v) { c.train.b_refresh = parse_refresh_mode(v); },
        [](const RunConfig& c) { return to_string(c.train.b_refresh); }}},
      DEEPFV_DOUBLE("train.clip_norm", train.clip_norm),
      DEEPFV_UINT("train.seed", train.seed),

      DEEPFV_DOUBLE("loss.lambda1", train.weights.reconstruction),
      DEEPFV_DOUBLE("loss.lambda2", train.weights.kl),
      DEEPFV_DOUBLE("loss.lambda3", train.weights.classification),
      DEEPFV_DOUBLE("loss.lambda4", train.weights.sparsity),
      DEEPFV_DOUBLE("loss.lambda5", train.weights.quantization),

      {"embed.include_classifier_head",
       {[](RunConfig& c, const std::string& v) {
          c.embed.include_classifier_head = parse_bool("embed.include_classifier_head", v);
        },
        [](const RunConfig& c) { return std::string(c.embed.include_classifier_head ? "true" : "false"); }}},

      DEEPFV_UINT("head.hidden", head.hidden),
      DEEPFV_UINT("head.epochs", head.epochs),
      DEEPFV_DOUBLE("head.learning_rate", head.learning_rate),
      DEEPFV_DOUBLE("head.momentum", head.momentum),
      DEEPFV_DOUBLE("head.weight_decay", head.weight_decay),
      DEEPFV_UINT("head.seed", head.seed),

      DEEPFV_UINT("eval.k", eval.k),
      DEEPFV_DOUBLE("eval.test_fraction", eval.test_fraction),
      DEEPFV_UINT("eval.split_seed", eval.split_seed),
      DEEPFV_DOUBLE("eval.bit_fraction", eval.bit_fraction),
  };
  return table;
}

#undef DEEPFV_UINT
#undef DEEPFV_DOUBLE

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : detail::fields()) keys.push_back(k);
  return keys;
}

inline void set_option(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& table = detail::fields();
  auto it = table.find(key);
  if (it == table.end()) throw Error(ErrorKind::UnknownKey, "unknown configuration key '" + key + "'");
  it->second.set(config, value);
  config.assigned.insert(key);
}

inline std::string get_option(const RunConfig& config, const std::string& key) {
  const auto& table = detail::fields();
  auto it = table.find(key);
  if (it == table.end()) throw Error(ErrorKind::UnknownKey, "unknown configuration key '" + key + "'");
  return it->second.get(config);
}

/// Applies one `key=value` assignment.
inline void apply_assignment(RunConfig& config, const std::string& text, const std::string& where) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw Error(ErrorKind::ParseError, where + ": expected key = value");
  const auto key = detail::trim(text.substr(0, eq));
  const auto value = detail::trim(text.substr(eq + 1));
  try {
    set_option(config, key, value);
  } catch (const Error& e) {
    throw Error(e.kind(), where + ": " + std::string(e.what()).substr(to_string(e.kind()).size() + 2));
  }
}

inline void apply_config_text(RunConfig& config, std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    apply_assignment(config, line, source + ":" + std::to_string(lineno));
  }
}

inline void apply_config_file(RunConfig& config, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, "config file not found: " + path.string());
  apply_config_text(config, in, path.string());
}

/// Every key with its effective value, one `key = value` per line; feeding
/// the output back reproduces the configuration.
inline void write_config(std::ostream& out, const RunConfig& config) {
  for (const auto& [key, field] : detail::fields()) out << key << " = " << field.get(config) << '\n';
}

inline void validate(const RunConfig& c) {
  c.synthetic.validate();
  c.train.validate();
  c.head.validate();
  if (c.eval.k == 0) throw Error(ErrorKind::InvalidConfig, "eval.k must be >= 1");
  if (!(c.eval.test_fraction > 0.0 && c.eval.test_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "eval.test_fraction must lie in (0, 1)");
  }
  if (!(c.eval.bit_fraction > 0.0 && c.eval.bit_fraction <= 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "eval.bit_fraction must lie in (0, 1]");
  }
}

/// The model configuration for `ds`: data-dependent sizes are taken from the
/// dataset; explicitly configured values must agree with it.
inline CvaeConfig resolve_model(const RunConfig& config, const Dataset& ds) {
  auto m = config.model;
  const auto take = [&](std::size_t& field, std::size_t actual, const char* key) {
    if (config.assigned.count(key) && field != actual) {
      throw Error(ErrorKind::DimMismatch,
                  std::string(key) + " = " + std::to_string(field) + " but the data has " + std::to_string(actual));
    }
    field = actual;
  };
  take(m.input_dim, ds.dim, "model.input_dim");
  take(m.n_conditions, ds.conditions.size(), "model.n_conditions");
  take(m.n_classes, ds.classes.size(), "model.n_classes");
  m.validate();
  return m;
}

}  // namespace deepfv
