#pragma once

// End-to-end helpers shared by the command-line tool, the acceptance suite
// and the ablation sweep: fit a model to a dataset, embed bags, build
// retrieval indices (optionally per-condition under selection masks) and
// evaluate.

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "deepfv/classifier.hpp"
#include "deepfv/cvae.hpp"
#include "deepfv/data.hpp"
#include "deepfv/error.hpp"
#include "deepfv/fisher.hpp"
#include "deepfv/index.hpp"
#include "deepfv/parallel.hpp"
#include "deepfv/trainer.hpp"

namespace deepfv {

/// Copies `base` with the data-dependent sizes taken from `ds`.
inline CvaeConfig model_for(const Dataset& ds, CvaeConfig base) {
  base.input_dim = ds.dim;
  base.n_conditions = ds.conditions.size();
  base.n_classes = ds.classes.size();
  base.validate();
  return base;
}

inline TrainResult<double> fit(const Dataset& train_set, const CvaeConfig& model, const TrainConfig& config,
                               const EpochCallback& on_epoch = {}) {
  auto params = init_parameters<double>(model_for(train_set, model));
  return train(std::move(params), make_instances<double>(train_set), config, on_epoch);
}

inline std::vector<FisherEmbedding> binarize_all(std::span<const FisherEmbedding> dense) {
  std::vector<FisherEmbedding> out;
  out.reserve(dense.size());
  for (const auto& e : dense) out.push_back(binarize(e));
  return out;
}

/// Embeddings of the bags in `subset` picked out of `all` (matched by id).
inline std::vector<FisherEmbedding> pick(std::span<const FisherEmbedding> all, const Dataset& subset) {
  std::map<std::string, const FisherEmbedding*> by_id;
  for (const auto& e : all) by_id[e.bag_id] = &e;
  std::vector<FisherEmbedding> out;
  for (const auto& b : subset.bags) {
    auto it = by_id.find(b.bag_id);
    if (it == by_id.end()) throw Error(ErrorKind::UnknownBagId, "unknown bag id '" + b.bag_id + "' in embeddings");
    out.push_back(*it->second);
  }
  return out;
}

/// Number of kept coordinates for a fraction of the full length (>= 1).
inline std::size_t budget(std::size_t dim, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::InvalidConfig, "bit fraction must lie in (0, 1]");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(dim))));
}

/// Per-condition masks fitted on the dense embeddings of `train_set`.
inline std::map<std::string, SelectionMask> fit_masks(const Dataset& train_set,
                                                      std::span<const FisherEmbedding> train_dense, std::size_t m) {
  std::vector<std::string> conditions;
  for (const auto& e : train_dense) conditions.push_back(train_set.find(e.bag_id).condition);
  return fit_selection(train_dense, conditions, m);
}

/// One index over `codes`, or, with masks, one index per condition holding
/// that condition's codes reduced by its mask.
inline std::vector<RetrievalIndex> build_indices(const Dataset& ds, std::span<const FisherEmbedding> codes,
                                                 const std::map<std::string, SelectionMask>* masks = nullptr) {
  auto entries = make_entries(ds, codes);
  std::vector<RetrievalIndex> out;
  if (masks == nullptr) {
    out.push_back(RetrievalIndex::build(std::move(entries)));
    return out;
  }
  std::map<std::string, std::vector<IndexEntry>> groups;
  for (auto& e : entries) {
    auto it = masks->find(e.condition);
    if (it == masks->end()) throw Error(ErrorKind::MaskMismatch, "no selection mask for condition '" + e.condition + "'");
    e.code = apply_selection(e.code, it->second);
    groups[e.condition].push_back(std::move(e));
  }
  for (auto& [cond, group] : groups) out.push_back(RetrievalIndex::build(std::move(group)));
  return out;
}

inline EvalReport evaluate(std::span<const RetrievalIndex> indices, std::size_t k = 3, std::size_t threads = 1) {
  std::vector<const RetrievalIndex*> ptrs;
  for (const auto& i : indices) ptrs.push_back(&i);
  return eval_retrieval(std::span<const RetrievalIndex* const>(ptrs), k, SearchFilters{}, threads);
}

// ---------------------------------------------------------------------------
// Ablation over the sparsity and quantization weights

struct SweepRow {
  double lambda4 = 0;
  double lambda5 = 0;
  EpochRecord final_epoch;
  EvalReport dense;   // retrieval on dense embeddings
  EvalReport binary;  // retrieval on sign codes
};

struct SweepTable {
  std::vector<SweepRow> rows;

  void write_csv(std::ostream& out) const {
    out << "lambda4,lambda5,mode,epochs,total,rec,kl,cls,grad_l1,quant,dense_macro_f1,dense_accuracy,"
           "binary_macro_f1,binary_accuracy\n";
    out.precision(10);
    for (const auto& r : rows) {
      LossWeights w;
      w.sparsity = r.lambda4;
      w.quantization = r.lambda5;
      const auto& e = r.final_epoch;
      out << r.lambda4 << ',' << r.lambda5 << ',' << w.mode() << ',' << e.epoch << ',' << e.total << ',' << e.rec << ','
          << e.kl << ',' << e.cls << ',' << e.grad_l1 << ',' << e.quant << ',' << r.dense.macro_f1 << ','
          << r.dense.accuracy << ',' << r.binary.macro_f1 << ',' << r.binary.accuracy << '\n';
    }
  }
};

struct SweepSetup {
  CvaeConfig model;
  TrainConfig train;
  EmbedOptions embed;
  std::size_t k = 3;
};

/// Trains one model per (lambda4, lambda5) pair on `train_set` with shared
/// seeds and scores leave-one-patient-out retrieval on `test_set`. Cells run
/// in parallel; each cell is itself deterministic.
inline SweepTable ablation_sweep(const Dataset& train_set, const Dataset& test_set, const SweepSetup& setup,
                                 std::span<const double> lambda4, std::span<const double> lambda5,
                                 std::size_t threads = 1) {
  if (lambda4.empty() || lambda5.empty()) throw Error(ErrorKind::InvalidConfig, "sweep needs non-empty lambda lists");
  SweepTable table;
  for (double l4 : lambda4)
    for (double l5 : lambda5) table.rows.push_back({l4, l5, {}, {}, {}});
  parallel_for(table.rows.size(), threads, [&](std::size_t i) {
    auto& row = table.rows[i];
    auto config = setup.train;
    config.weights.sparsity = row.lambda4;
    config.weights.quantization = row.lambda5;
    auto result = fit(train_set, setup.model, config);
    row.final_epoch = result.report.epochs.back();
    const auto dense = embed_bags(result.params, test_set, setup.embed);
    const auto binary = binarize_all(dense);
    row.dense = evaluate(build_indices(test_set, dense), setup.k);
    row.binary = evaluate(build_indices(test_set, binary), setup.k);
  });
  return table;
}

}  // namespace deepfv
