#pragma once

// Bags of instance features, the manifest/feature-file formats, the synthetic
// generator used for desk-scale experiments, and patient-level splitting.
//
// Feature file ("FVF1"): magic, u16 version, u32 instance count n, u32 dim d,
// then n*d little-endian f32 values, row-major.
// Manifest: CSV with header bag_id,patient_id,condition,class,feature_path;
// relative feature paths resolve against the manifest's directory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "deepfv/binary_io.hpp"
#include "deepfv/error.hpp"
#include "deepfv/random.hpp"
#include "deepfv/tensor.hpp"

namespace deepfv {

namespace fs = std::filesystem;

struct Bag {
  std::string bag_id;
  std::string patient_id;
  std::string condition;
  std::string label;
  std::size_t condition_index = 0;
  std::size_t class_index = 0;
  Tensor<double> instances;  // [n, dim]

  std::size_t size() const { return instances.rows(); }
};

struct Dataset {
  std::vector<Bag> bags;
  std::vector<std::string> conditions;  // sorted vocabulary
  std::vector<std::string> classes;     // sorted vocabulary
  std::size_t dim = 0;

  std::size_t instance_count() const {
    std::size_t n = 0;
    for (const auto& b : bags) n += b.size();
    return n;
  }

  const Bag& find(const std::string& bag_id) const {
    for (const auto& b : bags)
      if (b.bag_id == bag_id) return b;
    throw Error(ErrorKind::UnknownBagId, "unknown bag id '" + bag_id + "'");
  }
};

// ---------------------------------------------------------------------------
// Feature files

inline constexpr std::uint16_t kFeatureFileVersion = 1;

inline void write_features(std::ostream& out, const Tensor<double>& instances) {
  io::write_magic(out, "FVF1");
  io::write_u16(out, kFeatureFileVersion);
  io::write_u32(out, static_cast<std::uint32_t>(instances.rows()));
  io::write_u32(out, static_cast<std::uint32_t>(instances.cols()));
  for (double v : instances) io::write_f32(out, static_cast<float>(v));
}

inline void write_features(const fs::path& path, const Tensor<double>& instances) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  write_features(out, instances);
}

inline Tensor<double> read_features(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "feature file not found: " + path.string());
  const std::string name = path.string();
  try {
    io::expect_magic(in, "FVF1", name);
    const auto version = io::read_u16(in, "version");
    if (version != kFeatureFileVersion) {
      throw Error(ErrorKind::ParseError, name + ": unsupported version " + std::to_string(version));
    }
    const auto n = io::read_u32(in, "instance count");
    const auto d = io::read_u32(in, "dimension");
    if (d == 0) throw Error(ErrorKind::ParseError, name + ": zero feature dimension");
    Tensor<double> x(Shape{n, d});
    for (auto& v : x) v = io::read_f32(in, "feature values");
    return x;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ParseError && std::string(e.what()).find(name) == std::string::npos) {
      throw Error(ErrorKind::ParseError, name + ": " + e.what());
    }
    throw;
  }
}

// ---------------------------------------------------------------------------
// CSV

namespace csv {

/// Splits one line; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  return out + "\"";
}

}  // namespace csv

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRow {
  std::string bag_id;
  std::string patient_id;
  std::string condition;
  std::string label;
  std::string feature_path;
};

inline constexpr const char* kManifestHeader = "bag_id,patient_id,condition,class,feature_path";

inline std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, "manifest not found: " + path.string());
  const std::string name = path.string();
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::ParseError, name + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = csv::split_line(line);
  const std::vector<std::string> expected = {"bag_id", "patient_id", "condition", "class", "feature_path"};
  if (header != expected) {
    throw Error(ErrorKind::ParseError, name + ":1: header must be '" + std::string(kManifestHeader) + "'");
  }
  std::vector<ManifestRow> rows;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = csv::split_line(line);
    if (f.size() != 5) {
      throw Error(ErrorKind::ParseError, name + ":" + std::to_string(line_no) + ": expected 5 columns, found " +
                                             std::to_string(f.size()));
    }
    for (std::size_t c = 0; c < 5; ++c) {
      if (f[c].empty()) {
        throw Error(ErrorKind::ParseError,
                    name + ":" + std::to_string(line_no) + ": empty value in column '" + expected[c] + "'");
      }
    }
    if (!seen.insert(f[0]).second) {
      throw Error(ErrorKind::ParseError, name + ":" + std::to_string(line_no) + ": duplicate bag_id '" + f[0] + "'");
    }
    rows.push_back({f[0], f[1], f[2], f[3], f[4]});
  }
  return rows;
}

inline void write_manifest(const fs::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& r : rows) {
    out << csv::quote(r.bag_id) << ',' << csv::quote(r.patient_id) << ',' << csv::quote(r.condition) << ','
        << csv::quote(r.label) << ',' << csv::quote(r.feature_path) << '\n';
  }
}

/// Sorted vocabularies and label indices for already-populated bags.
inline void encode_labels(Dataset& ds) {
  std::set<std::string> conds;
  std::set<std::string> classes;
  for (const auto& b : ds.bags) {
    conds.insert(b.condition);
    classes.insert(b.label);
  }
  ds.conditions.assign(conds.begin(), conds.end());
  ds.classes.assign(classes.begin(), classes.end());
  for (auto& b : ds.bags) {
    b.condition_index = static_cast<std::size_t>(
        std::lower_bound(ds.conditions.begin(), ds.conditions.end(), b.condition) - ds.conditions.begin());
    b.class_index = static_cast<std::size_t>(
        std::lower_bound(ds.classes.begin(), ds.classes.end(), b.label) - ds.classes.begin());
  }
}

inline Dataset load_dataset(const fs::path& manifest_path) {
  const auto rows = read_manifest(manifest_path);
  if (rows.empty()) throw Error(ErrorKind::EmptyDataset, manifest_path.string() + ": no bags");
  const fs::path base = manifest_path.parent_path();
  Dataset ds;
  for (const auto& r : rows) {
    fs::path fp(r.feature_path);
    if (fp.is_relative()) fp = base / fp;
    Bag bag{r.bag_id, r.patient_id, r.condition, r.label, 0, 0, read_features(fp)};
    if (ds.dim == 0) ds.dim = bag.instances.cols();
    if (bag.instances.cols() != ds.dim) {
      throw Error(ErrorKind::DimMismatch, fp.string() + ": feature dim " + std::to_string(bag.instances.cols()) +
                                              " differs from " + std::to_string(ds.dim));
    }
    ds.bags.push_back(std::move(bag));
  }
  encode_labels(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic bags

struct SyntheticSpec {
  std::size_t n_conditions = 3;
  std::size_t n_classes_per_condition = 3;
  std::size_t bags_per_class = 20;
  std::size_t instances_min = 8;
  std::size_t instances_max = 16;
  std::size_t feature_dim = 32;
  double sigma_between = 10.0;
  double sigma_within = 1.0;
  std::size_t patients_per_class = 10;
  std::uint64_t seed = 11;

  void validate() const {
    if (n_conditions == 0 || n_classes_per_condition == 0 || bags_per_class == 0 || instances_min == 0 ||
        feature_dim == 0 || patients_per_class == 0) {
      throw Error(ErrorKind::InvalidSpec, "synthetic counts must be >= 1");
    }
    if (instances_max < instances_min) throw Error(ErrorKind::InvalidSpec, "instances_max < instances_min");
    if (!(sigma_between > 0.0) || !(sigma_within > 0.0)) {
      throw Error(ErrorKind::InvalidSpec, "cluster separations must be > 0");
    }
  }
};

struct SyntheticResult {
  Dataset dataset;
  std::vector<ManifestRow> manifest;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string numbered(const std::string& prefix, std::size_t i, int width) {
  std::ostringstream s;
  s << prefix;
  s.width(width);
  s.fill('0');
  s << i;
  return s.str();
}

}  // namespace detail

/// Class centroids ~ N(0, sigma_between^2 I); instances ~ centroid +
/// N(0, sigma_within^2 I). Bags of a class are assigned to its patients
/// round-robin. Values are rounded to f32 so the in-memory dataset equals
/// what a reload of the written files yields.
inline SyntheticResult make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticResult out;
  if (spec.patients_per_class == 1) {
    out.warnings.push_back(
        "patients_per_class=1: leave-one-patient-out search will exclude every same-class candidate");
  }
  if (spec.patients_per_class > spec.bags_per_class) {
    out.warnings.push_back("patients_per_class exceeds bags_per_class; some patients have no bags");
  }
  std::size_t bag_counter = 0;
  for (std::size_t c = 0; c < spec.n_conditions; ++c) {
    const std::string condition = detail::numbered("site", c, 2);
    for (std::size_t k = 0; k < spec.n_classes_per_condition; ++k) {
      const std::string label = condition + "_type" + detail::numbered("", k, 2);
      std::vector<double> centroid(spec.feature_dim);
      for (auto& v : centroid) v = spec.sigma_between * rng.normal();
      for (std::size_t b = 0; b < spec.bags_per_class; ++b) {
        const std::size_t n = spec.instances_min + rng.below(spec.instances_max - spec.instances_min + 1);
        Tensor<double> x(Shape{n, spec.feature_dim});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < spec.feature_dim; ++j)
            x.at(i, j) = static_cast<double>(static_cast<float>(centroid[j] + spec.sigma_within * rng.normal()));
        const std::string bag_id = detail::numbered("bag", bag_counter++, 5);
        const std::string patient = label + "_p" + detail::numbered("", b % spec.patients_per_class, 3);
        out.manifest.push_back({bag_id, patient, condition, label, "features/" + bag_id + ".fvf"});
        out.dataset.bags.push_back({bag_id, patient, condition, label, 0, 0, std::move(x)});
      }
    }
  }
  out.dataset.dim = spec.feature_dim;
  encode_labels(out.dataset);
  return out;
}

/// Writes manifest.csv and features/*.fvf under `dir` and returns the
/// in-memory dataset.
inline SyntheticResult generate_synthetic(const SyntheticSpec& spec, const fs::path& dir) {
  auto result = make_synthetic(spec);
  fs::create_directories(dir / "features");
  for (std::size_t i = 0; i < result.manifest.size(); ++i) {
    write_features(dir / result.manifest[i].feature_path, result.dataset.bags[i].instances);
  }
  write_manifest(dir / "manifest.csv", result.manifest);
  return result;
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
  Dataset train;
  Dataset test;
};

/// Patient-level split: no patient appears on both sides. Patients are
/// stratified by the class of their first bag; within each class
/// round(fraction * n) patients (at least one, and at least one left for
/// training when the class has two or more) go to the test side.
inline Split split_by_patient(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "test fraction must lie in (0, 1)");
  }
  std::map<std::string, std::string> patient_class;
  for (const auto& b : ds.bags) patient_class.emplace(b.patient_id, b.label);
  if (patient_class.size() < 2) {
    throw Error(ErrorKind::TooFewPatients, "need at least 2 patients to split, found " +
                                               std::to_string(patient_class.size()));
  }
  std::map<std::string, std::vector<std::string>> by_class;
  for (const auto& [patient, label] : patient_class) by_class[label].push_back(patient);

  Rng rng(seed);
  std::set<std::string> test_patients;
  for (auto& [label, patients] : by_class) {
    rng.shuffle(std::span<std::string>(patients));
    const std::size_t n = patients.size();
    auto take = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    if (n >= 2) take = std::clamp<std::size_t>(take, 1, n - 1);
    else take = std::min<std::size_t>(take, n);
    for (std::size_t i = 0; i < take; ++i) test_patients.insert(patients[i]);
  }
  if (test_patients.empty() || test_patients.size() == patient_class.size()) {
    throw Error(ErrorKind::TooFewPatients, "split leaves one side without patients");
  }

  Split s;
  for (auto* side : {&s.train, &s.test}) {
    side->conditions = ds.conditions;
    side->classes = ds.classes;
    side->dim = ds.dim;
  }
  for (const auto& b : ds.bags) (test_patients.count(b.patient_id) ? s.test : s.train).bags.push_back(b);
  return s;
}

// ---------------------------------------------------------------------------
// Instance view used for training

/// All instances of the given bags, each carrying its bag's condition and
/// class label.
template <std::floating_point T>
struct InstanceSet {
  Tensor<T> x;  // [N, dim]
  std::vector<std::size_t> conditions;
  std::vector<std::size_t> classes;
  std::vector<std::size_t> bag_of;  // index into the source dataset's bags

  std::size_t size() const { return conditions.size(); }
};

template <std::floating_point T>
InstanceSet<T> make_instances(const Dataset& ds) {
  const std::size_t n = ds.instance_count();
  if (n == 0) throw Error(ErrorKind::EmptyDataset, "dataset has no instances");
  InstanceSet<T> set;
  set.x = Tensor<T>(Shape{n, ds.dim});
  std::size_t row = 0;
  for (std::size_t b = 0; b < ds.bags.size(); ++b) {
    const auto& bag = ds.bags[b];
    for (std::size_t i = 0; i < bag.size(); ++i, ++row) {
      for (std::size_t j = 0; j < ds.dim; ++j) set.x.at(row, j) = static_cast<T>(bag.instances.at(i, j));
      set.conditions.push_back(bag.condition_index);
      set.classes.push_back(bag.class_index);
      set.bag_of.push_back(b);
    }
  }
  return set;
}

}  // namespace deepfv
