#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "deepfv/data.hpp"

using namespace deepfv;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

Dataset patients_dataset(std::size_t patients) {
  Dataset ds;
  ds.dim = 1;
  for (std::size_t p = 0; p < patients; ++p) {
    ds.bags.push_back({"b" + std::to_string(p), "p" + std::to_string(p), "c", "l", 0, 0,
                       Tensor<double>(Shape{1, 1})});
  }
  encode_labels(ds);
  return ds;
}

std::set<std::string> patients_of(const Dataset& ds) {
  std::set<std::string> out;
  for (const auto& b : ds.bags) out.insert(b.patient_id);
  return out;
}

}  // namespace

TEST(Csv, SplitAndQuote) {
  EXPECT_EQ(csv::split_line("a,\"b,c\",\"d\"\"e\""), (std::vector<std::string>{"a", "b,c", "d\"e"}));
  EXPECT_EQ(csv::quote("plain"), "plain");
  EXPECT_EQ(csv::split_line(csv::quote("x,\"y\"")), (std::vector<std::string>{"x,\"y\""}));
}

TEST(Features, RoundTripAndBadMagic) {
  TempDir dir("deepfv_data_features");
  const auto x = Tensor<double>::matrix(2, 3, {1.5, -2, 0.25, 4, 5, 6});
  write_features(dir.path() / "x.fvf", x);
  EXPECT_EQ(read_features(dir.path() / "x.fvf"), x);
  write_text(dir.path() / "bad.fvf", "NOPE0000000000");
  try {
    (void)read_features(dir.path() / "bad.fvf");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
  }
  try {
    (void)read_features(dir.path() / "missing.fvf");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingFile);
  }
}

TEST(Manifest, ParsesValidFile) {
  TempDir dir("deepfv_data_manifest");
  write_features(dir.path() / "a.fvf", Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  write_features(dir.path() / "b.fvf", Tensor<double>::matrix(1, 2, {5, 6}));
  write_text(dir.path() / "m.csv",
             "bag_id,patient_id,condition,class,feature_path\n"
             "a,p1,lung,lung_a,a.fvf\n"
             "b,p2,breast,\"breast, ductal\",b.fvf\n");
  const auto ds = load_dataset(dir.path() / "m.csv");
  ASSERT_EQ(ds.bags.size(), 2u);
  EXPECT_EQ(ds.dim, 2u);
  EXPECT_EQ(ds.conditions, (std::vector<std::string>{"breast", "lung"}));
  EXPECT_EQ(ds.find("b").label, "breast, ductal");
  EXPECT_EQ(ds.find("a").condition_index, 1u);
  EXPECT_EQ(ds.instance_count(), 3u);
}

TEST(Manifest, Errors) {
  TempDir dir("deepfv_data_manifest_errors");
  const auto expect_kind = [&](const std::string& text, ErrorKind kind) {
    write_text(dir.path() / "m.csv", text);
    try {
      (void)load_dataset(dir.path() / "m.csv");
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), kind) << text;
    }
  };
  write_features(dir.path() / "a.fvf", Tensor<double>::matrix(1, 2, {1, 2}));
  write_features(dir.path() / "c.fvf", Tensor<double>::matrix(1, 3, {1, 2, 3}));
  expect_kind("bag,patient\n", ErrorKind::ParseError);
  expect_kind("bag_id,patient_id,condition,class,feature_path\na,p,c,l,a.fvf\na,p,c,l,a.fvf\n", ErrorKind::ParseError);
  expect_kind("bag_id,patient_id,condition,class,feature_path\na,p,c,l\n", ErrorKind::ParseError);
  expect_kind("bag_id,patient_id,condition,class,feature_path\na,p,c,,a.fvf\n", ErrorKind::ParseError);
  expect_kind("bag_id,patient_id,condition,class,feature_path\na,p,c,l,nope.fvf\n", ErrorKind::MissingFile);
  expect_kind("bag_id,patient_id,condition,class,feature_path\na,p,c,l,a.fvf\nb,p,c,l,c.fvf\n", ErrorKind::DimMismatch);
  expect_kind("bag_id,patient_id,condition,class,feature_path\n", ErrorKind::EmptyDataset);
  try {
    (void)load_dataset(dir.path() / "absent.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingFile);
  }
}

TEST(Synthetic, ShapeOfDefaultCorpus) {
  const auto r = make_synthetic(SyntheticSpec{});
  EXPECT_EQ(r.dataset.bags.size(), 180u);
  EXPECT_EQ(r.dataset.conditions.size(), 3u);
  EXPECT_EQ(r.dataset.classes.size(), 9u);
  EXPECT_EQ(r.dataset.dim, 32u);
  EXPECT_TRUE(r.warnings.empty());
  for (const auto& b : r.dataset.bags) {
    EXPECT_GE(b.size(), 8u);
    EXPECT_LE(b.size(), 16u);
    EXPECT_EQ(b.label.rfind(b.condition, 0), 0u);
  }
}

TEST(Synthetic, WrittenCorpusReloadsIdentically) {
  TempDir a("deepfv_data_synth_a"), b("deepfv_data_synth_b");
  SyntheticSpec spec;
  spec.bags_per_class = 3;
  const auto mem = generate_synthetic(spec, a.path());
  generate_synthetic(spec, b.path());
  EXPECT_EQ(slurp(a.path() / "manifest.csv"), slurp(b.path() / "manifest.csv"));
  for (const auto& row : mem.manifest) EXPECT_EQ(slurp(a.path() / row.feature_path), slurp(b.path() / row.feature_path));
  const auto loaded = load_dataset(a.path() / "manifest.csv");
  ASSERT_EQ(loaded.bags.size(), mem.dataset.bags.size());
  for (std::size_t i = 0; i < loaded.bags.size(); ++i) {
    EXPECT_EQ(loaded.bags[i].bag_id, mem.dataset.bags[i].bag_id);
    EXPECT_EQ(loaded.bags[i].instances, mem.dataset.bags[i].instances);
  }
}

TEST(Synthetic, SeparationFollowsSigmas) {
  // Mean within-class spread ~ sigma_within * sqrt(2 d); between-class
  // centroid distance ~ sigma_between * sqrt(2 d).
  SyntheticSpec spec;
  spec.sigma_between = 10;
  spec.sigma_within = 1;
  const auto ds = make_synthetic(spec).dataset;
  std::map<std::string, std::vector<double>> centroid;
  std::map<std::string, std::size_t> count;
  for (const auto& b : ds.bags) {
    auto& c = centroid[b.label];
    c.resize(ds.dim);
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = 0; j < ds.dim; ++j) c[j] += b.instances.at(i, j);
    count[b.label] += b.size();
  }
  for (auto& [l, c] : centroid)
    for (auto& v : c) v /= static_cast<double>(count[l]);
  double within = 0;
  std::size_t n = 0;
  for (const auto& b : ds.bags) {
    for (std::size_t i = 0; i < b.size(); ++i, ++n) {
      double d = 0;
      for (std::size_t j = 0; j < ds.dim; ++j) d += std::pow(b.instances.at(i, j) - centroid[b.label][j], 2);
      within += d;
    }
  }
  within = std::sqrt(within / static_cast<double>(n));
  EXPECT_NEAR(within, std::sqrt(double(ds.dim)), 0.2 * std::sqrt(double(ds.dim)));
  double min_between = INFINITY;
  for (const auto& [a, ca] : centroid)
    for (const auto& [b, cb] : centroid) {
      if (a >= b) continue;
      double d = 0;
      for (std::size_t j = 0; j < ds.dim; ++j) d += std::pow(ca[j] - cb[j], 2);
      min_between = std::min(min_between, std::sqrt(d));
    }
  EXPECT_GT(min_between, 5 * within);
}

TEST(Synthetic, WarningsAndInvalidSpecs) {
  SyntheticSpec spec;
  spec.patients_per_class = 1;
  EXPECT_EQ(make_synthetic(spec).warnings.size(), 1u);
  spec.patients_per_class = 30;
  EXPECT_EQ(make_synthetic(spec).warnings.size(), 1u);
  spec.patients_per_class = 10;
  spec.instances_max = 2;
  try {
    (void)make_synthetic(spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidSpec);
  }
  spec.instances_max = 16;
  spec.sigma_within = 0;
  EXPECT_THROW((void)make_synthetic(spec), Error);
}

TEST(Split, ExampleSizes) {
  const auto s = split_by_patient(patients_dataset(10), 0.4, 1);
  EXPECT_EQ(patients_of(s.test).size(), 4u);
  EXPECT_EQ(patients_of(s.train).size(), 6u);
  const auto two = split_by_patient(patients_dataset(2), 0.5, 1);
  EXPECT_EQ(patients_of(two.test).size(), 1u);
  EXPECT_EQ(patients_of(two.train).size(), 1u);
}

TEST(Split, PatientsAreDisjointAndBagsPreserved) {
  const auto ds = make_synthetic(SyntheticSpec{}).dataset;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto s = split_by_patient(ds, 0.4, seed);
    const auto tr = patients_of(s.train);
    for (const auto& p : patients_of(s.test)) EXPECT_EQ(tr.count(p), 0u);
    EXPECT_EQ(s.train.bags.size() + s.test.bags.size(), ds.bags.size());
    EXPECT_EQ(s.train.classes, ds.classes);
    std::set<std::string> test_classes;
    for (const auto& b : s.test.bags) test_classes.insert(b.label);
    EXPECT_EQ(test_classes.size(), ds.classes.size());
  }
  const auto a = split_by_patient(ds, 0.4, 9), b = split_by_patient(ds, 0.4, 9);
  EXPECT_EQ(patients_of(a.test), patients_of(b.test));
}

TEST(Split, Errors) {
  try {
    (void)split_by_patient(patients_dataset(1), 0.5, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooFewPatients);
  }
  try {
    (void)split_by_patient(patients_dataset(4), 1.0, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
  }
}
