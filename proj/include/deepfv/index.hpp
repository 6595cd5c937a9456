#pragma once

// Exact nearest-neighbour retrieval over bag embeddings: popcount Hamming
// distance on packed codes, Euclidean on dense vectors, with leave-one-
// patient-out and same-condition filters, majority voting, and per-class
// precision / recall / F1 reporting.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "deepfv/data.hpp"
#include "deepfv/error.hpp"
#include "deepfv/fisher.hpp"
#include "deepfv/parallel.hpp"

namespace deepfv {

struct IndexEntry {
  std::string bag_id;
  std::string patient_id;
  std::string condition;
  std::string label;
  FisherEmbedding code;
};

/// Popcount of a XOR b. Padding bits are zero by construction.
inline std::size_t hamming(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::LengthMismatch,
                "codes of " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " bytes");
  }
  std::size_t d = 0;
  std::size_t i = 0;
  for (; i + 8 <= a.size(); i += 8) {
    std::uint64_t x, y;
    std::memcpy(&x, a.data() + i, 8);
    std::memcpy(&y, b.data() + i, 8);
    d += static_cast<std::size_t>(std::popcount(x ^ y));
  }
  for (; i < a.size(); ++i) d += static_cast<std::size_t>(std::popcount(static_cast<unsigned>(a[i] ^ b[i])));
  return d;
}

inline std::size_t hamming(const FisherEmbedding& a, const FisherEmbedding& b) {
  if (a.kind != EmbeddingKind::Binary || b.kind != EmbeddingKind::Binary) {
    throw Error(ErrorKind::HeterogeneousEntries, "hamming distance needs binary codes");
  }
  if (a.dim != b.dim) {
    throw Error(ErrorKind::LengthMismatch,
                "codes of " + std::to_string(a.dim) + " and " + std::to_string(b.dim) + " bits");
  }
  return hamming(std::span<const std::uint8_t>(a.bits), std::span<const std::uint8_t>(b.bits));
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::LengthMismatch, "dense embeddings differ in length");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

struct SearchFilters {
  bool exclude_same_patient = true;
  bool restrict_to_condition = true;
};

struct Neighbor {
  std::size_t entry = 0;  // insertion position in the index
  std::string bag_id;
  std::string label;
  double distance = 0;
};

struct SearchResult {
  std::vector<Neighbor> neighbors;  // nondecreasing distance
  std::string predicted;
  std::vector<std::pair<std::string, std::size_t>> votes;  // label, count; in order of first appearance
};

/// Majority label; ties go to the tied label seen first, i.e. nearest.
inline std::string majority_vote(std::span<const Neighbor> neighbors,
                                 std::vector<std::pair<std::string, std::size_t>>* votes = nullptr) {
  std::vector<std::pair<std::string, std::size_t>> counts;
  for (const auto& n : neighbors) {
    auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == n.label; });
    if (it == counts.end()) {
      counts.emplace_back(n.label, 1);
    } else {
      ++it->second;
    }
  }
  std::string best;
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  if (votes) *votes = std::move(counts);
  return best;
}

class RetrievalIndex {
 public:
  static RetrievalIndex build(std::vector<IndexEntry> entries) {
    if (entries.empty()) throw Error(ErrorKind::Empty, "cannot build an index from zero entries");
    RetrievalIndex idx;
    const auto& first = entries.front().code;
    idx.kind_ = first.kind;
    idx.dim_ = first.dim;
    idx.selection_id_ = first.selection_id;
    for (const auto& e : entries) {
      if (e.code.kind != idx.kind_ || e.code.dim != idx.dim_ || e.code.selection_id != idx.selection_id_) {
        throw Error(ErrorKind::HeterogeneousEntries, "entry '" + e.bag_id + "' differs in kind, length or selection");
      }
    }
    if (idx.kind_ == EmbeddingKind::Binary) {
      // Query and codes share the same byte layout, so XOR + popcount per
      // word is independent of host endianness.
      idx.stride_ = (idx.dim_ + 63) / 64;
      idx.words_.assign(idx.stride_ * entries.size(), 0);
      for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& bits = entries[i].code.bits;
        std::memcpy(idx.words_.data() + i * idx.stride_, bits.data(), bits.size());
      }
    } else {
      idx.stride_ = idx.dim_;
      idx.dense_.reserve(idx.dim_ * entries.size());
      for (const auto& e : entries) idx.dense_.insert(idx.dense_.end(), e.code.dense.begin(), e.code.dense.end());
    }
    idx.entries_ = std::move(entries);
    return idx;
  }

  std::size_t size() const { return entries_.size(); }
  EmbeddingKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  const std::string& selection_id() const { return selection_id_; }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  const IndexEntry& entry(std::size_t i) const { return entries_.at(i); }

  const IndexEntry& find(const std::string& bag_id) const {
    for (const auto& e : entries_)
      if (e.bag_id == bag_id) return e;
    throw Error(ErrorKind::UnknownBagId, "unknown bag id '" + bag_id + "'");
  }

  /// Distance from `query` to entry i.
  double distance(const FisherEmbedding& query, std::size_t i) const {
    check_query(query);
    if (kind_ == EmbeddingKind::Binary) {
      const auto q = pack(query);
      return static_cast<double>(word_distance(q.data(), i));
    }
    return euclidean(query.dense, std::span<const double>(dense_.data() + i * stride_, stride_));
  }

  SearchResult knn(const IndexEntry& query, std::size_t k = 3, const SearchFilters& filters = {}) const {
    check_query(query.code);
    if (k == 0) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
    std::vector<std::uint64_t> q;
    if (kind_ == EmbeddingKind::Binary) q = pack(query.code);

    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (filters.exclude_same_patient && e.patient_id == query.patient_id) continue;
      if (filters.restrict_to_condition && e.condition != query.condition) continue;
      const double d = kind_ == EmbeddingKind::Binary
                           ? static_cast<double>(word_distance(q.data(), i))
                           : euclidean(query.code.dense, std::span<const double>(dense_.data() + i * stride_, stride_));
      cand.emplace_back(d, i);
    }
    if (cand.empty()) throw Error(ErrorKind::NoCandidates, "no candidates left for query '" + query.bag_id + "'");
    const std::size_t n = std::min(k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end());
    SearchResult r;
    for (std::size_t j = 0; j < n; ++j) {
      const auto& e = entries_[cand[j].second];
      r.neighbors.push_back({cand[j].second, e.bag_id, e.label, cand[j].first});
    }
    r.predicted = majority_vote(r.neighbors, &r.votes);
    return r;
  }

 private:
  void check_query(const FisherEmbedding& q) const {
    if (q.kind != kind_) throw Error(ErrorKind::HeterogeneousEntries, "query kind differs from index kind");
    if (q.dim != dim_) {
      throw Error(ErrorKind::LengthMismatch,
                  "query has length " + std::to_string(q.dim) + ", index has " + std::to_string(dim_));
    }
  }

  std::vector<std::uint64_t> pack(const FisherEmbedding& code) const {
    std::vector<std::uint64_t> w(stride_, 0);
    std::memcpy(w.data(), code.bits.data(), code.bits.size());
    return w;
  }

  std::size_t word_distance(const std::uint64_t* q, std::size_t i) const {
    const std::uint64_t* c = words_.data() + i * stride_;
    std::size_t d = 0;
    for (std::size_t j = 0; j < stride_; ++j) d += static_cast<std::size_t>(std::popcount(q[j] ^ c[j]));
    return d;
  }

  EmbeddingKind kind_ = EmbeddingKind::Dense;
  std::size_t dim_ = 0;
  std::size_t stride_ = 0;
  std::string selection_id_;
  std::vector<IndexEntry> entries_;
  std::vector<std::uint64_t> words_;
  std::vector<double> dense_;
};

// ---------------------------------------------------------------------------
// Metrics

struct ClassMetrics {
  std::string label;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

struct EvalReport {
  std::vector<ClassMetrics> classes;  // sorted by label
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  double accuracy = 0;
  std::size_t queries = 0;                // evaluated queries
  std::vector<std::string> excluded;      // queries without candidates
  double wall_seconds = 0;

  const ClassMetrics& at(const std::string& label) const {
    for (const auto& c : classes)
      if (c.label == label) return c;
    throw Error(ErrorKind::UnknownKey, "no class '" + label + "' in report");
  }

  /// Metrics only; wall time is left out so that the file is reproducible.
  void write_csv(std::ostream& out) const {
    out << "class,precision,recall,f1,support\n";
    out << std::setprecision(10);
    for (const auto& c : classes) {
      out << csv::quote(c.label) << ',' << c.precision << ',' << c.recall << ',' << c.f1 << ',' << c.support << '\n';
    }
    out << "macro," << macro_precision << ',' << macro_recall << ',' << macro_f1 << ',' << queries << '\n';
    out << "accuracy,,," << accuracy << ',' << queries << '\n';
  }

  void write_table(std::ostream& out) const {
    std::size_t w = 5;
    for (const auto& c : classes) w = std::max(w, c.label.size());
    const auto row = [&](const std::string& name, double p, double r, double f, std::size_t n) {
      out << std::left << std::setw(static_cast<int>(w) + 2) << name << std::right << std::fixed << std::setprecision(4)
          << std::setw(10) << p << std::setw(10) << r << std::setw(10) << f << std::setw(9) << n << '\n';
    };
    out << std::left << std::setw(static_cast<int>(w) + 2) << "class" << std::right << std::setw(10) << "precision"
        << std::setw(10) << "recall" << std::setw(10) << "f1" << std::setw(9) << "support" << '\n';
    for (const auto& c : classes) row(c.label, c.precision, c.recall, c.f1, c.support);
    row("macro", macro_precision, macro_recall, macro_f1, queries);
    out << "accuracy " << std::fixed << std::setprecision(4) << accuracy << " over " << queries << " queries";
    if (!excluded.empty()) out << " (" << excluded.size() << " excluded: no candidates)";
    out << ", " << std::setprecision(3) << wall_seconds << " s\n";
    out.unsetf(std::ios::fixed);
  }
};

/// One-vs-rest precision, recall and F1 per label in `labels` (every truth
/// and prediction must be one of them); 0/0 is taken as 0.
inline EvalReport compute_report(std::span<const std::string> truth, std::span<const std::string> predicted,
                                 std::vector<std::string> labels = {}) {
  if (truth.size() != predicted.size()) throw Error(ErrorKind::LengthMismatch, "truth and predictions differ in length");
  if (labels.empty()) {
    labels.assign(truth.begin(), truth.end());
    labels.insert(labels.end(), predicted.begin(), predicted.end());
  }
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < labels.size(); ++i) pos[labels[i]] = i;
  const auto index_of = [&](const std::string& l) {
    auto it = pos.find(l);
    if (it == pos.end()) throw Error(ErrorKind::UnknownKey, "label '" + l + "' not in the label set");
    return it->second;
  };
  std::vector<std::size_t> tp(labels.size()), fp(labels.size()), fn(labels.size()), support(labels.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = index_of(truth[i]);
    const auto p = index_of(predicted[i]);
    ++support[t];
    if (t == p) {
      ++tp[t];
      ++correct;
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  const auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / b; };
  EvalReport r;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    ClassMetrics m;
    m.label = labels[c];
    m.precision = ratio(tp[c], tp[c] + fp[c]);
    m.recall = ratio(tp[c], tp[c] + fn[c]);
    m.f1 = m.precision + m.recall == 0.0 ? 0.0 : 2 * m.precision * m.recall / (m.precision + m.recall);
    m.support = support[c];
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
    r.classes.push_back(std::move(m));
  }
  if (!labels.empty()) {
    r.macro_precision /= static_cast<double>(labels.size());
    r.macro_recall /= static_cast<double>(labels.size());
    r.macro_f1 /= static_cast<double>(labels.size());
  }
  r.accuracy = ratio(correct, truth.size());
  r.queries = truth.size();
  return r;
}

/// Every entry queries the rest of its index (same condition, other
/// patients); queries left without candidates are reported as excluded.
/// Several indices (e.g. one per condition, each under its own selection
/// mask) are pooled into a single report.
inline EvalReport eval_retrieval(std::span<const RetrievalIndex* const> indices, std::size_t k = 3,
                                 const SearchFilters& filters = {}, std::size_t threads = 1) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::pair<const RetrievalIndex*, std::size_t>> queries;
  for (const auto* index : indices)
    for (std::size_t i = 0; i < index->size(); ++i) queries.emplace_back(index, i);
  std::vector<std::string> predicted(queries.size());
  std::vector<char> ok(queries.size(), 0);
  parallel_for(queries.size(), threads, [&](std::size_t q) {
    const auto& [index, i] = queries[q];
    try {
      predicted[q] = index->knn(index->entry(i), k, filters).predicted;
      ok[q] = 1;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoCandidates) throw;
    }
  });
  std::vector<std::string> labels, truth, pred, excluded;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& e = queries[q].first->entry(queries[q].second);
    labels.push_back(e.label);
    if (ok[q]) {
      truth.push_back(e.label);
      pred.push_back(predicted[q]);
    } else {
      excluded.push_back(e.bag_id);
    }
  }
  auto r = compute_report(truth, pred, labels);
  r.excluded = std::move(excluded);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline EvalReport eval_retrieval(const RetrievalIndex& index, std::size_t k = 3, const SearchFilters& filters = {},
                                 std::size_t threads = 1) {
  const RetrievalIndex* one[] = {&index};
  return eval_retrieval(std::span<const RetrievalIndex* const>(one), k, filters, threads);
}

// ---------------------------------------------------------------------------
// Persistence: embedding file plus a sidecar CSV with the metadata.

inline constexpr const char* kSidecarHeader = "bag_id,patient_id,condition,class";

inline std::vector<IndexEntry> make_entries(const Dataset& ds, std::span<const FisherEmbedding> codes) {
  std::vector<IndexEntry> out;
  out.reserve(codes.size());
  for (const auto& c : codes) {
    const auto& b = ds.find(c.bag_id);
    out.push_back({b.bag_id, b.patient_id, b.condition, b.label, c});
  }
  return out;
}

inline void write_index(const RetrievalIndex& index, const fs::path& codes_path, const fs::path& sidecar_path) {
  std::vector<FisherEmbedding> codes;
  for (const auto& e : index.entries()) codes.push_back(e.code);
  write_embeddings(codes_path, codes);
  std::ofstream out(sidecar_path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + sidecar_path.string());
  out << kSidecarHeader << '\n';
  for (const auto& e : index.entries()) {
    out << csv::quote(e.bag_id) << ',' << csv::quote(e.patient_id) << ',' << csv::quote(e.condition) << ','
        << csv::quote(e.label) << '\n';
  }
}

inline RetrievalIndex read_index(const fs::path& codes_path, const fs::path& sidecar_path) {
  auto codes = read_embeddings(codes_path);
  std::ifstream in(sidecar_path);
  if (!in) throw Error(ErrorKind::MissingFile, "index sidecar not found: " + sidecar_path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kSidecarHeader) {
    throw Error(ErrorKind::ParseError, sidecar_path.string() + ":1: expected header '" + kSidecarHeader + "'");
  }
  std::map<std::string, std::vector<std::string>> meta;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = csv::split_line(line);
    if (f.size() != 4) {
      throw Error(ErrorKind::ParseError, sidecar_path.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
    }
    meta[f[0]] = f;
  }
  std::vector<IndexEntry> entries;
  for (auto& c : codes) {
    auto it = meta.find(c.bag_id);
    if (it == meta.end()) {
      throw Error(ErrorKind::ParseError, sidecar_path.string() + ": no metadata for bag '" + c.bag_id + "'");
    }
    entries.push_back({it->second[0], it->second[1], it->second[2], it->second[3], std::move(c)});
  }
  return RetrievalIndex::build(std::move(entries));
}

}  // namespace deepfv
