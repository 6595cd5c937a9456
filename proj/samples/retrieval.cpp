// Minimal library walk-through: synthetic bags -> binary Fisher codes ->
// leave-one-patient-out retrieval, all in memory.

#include <iostream>

#include "deepfv/pipeline.hpp"

int main() {
  using namespace deepfv;

  SyntheticSpec spec;
  spec.bags_per_class = 10;
  spec.patients_per_class = 5;
  const auto data = make_synthetic(spec).dataset;
  const auto split = split_by_patient(data, 0.4, 3);

  TrainConfig train;
  train.epochs = 10;
  train.weights.quantization = 1e-4;
  const auto model = fit(split.train, CvaeConfig{}, train);

  const auto codes = binarize_all(embed_bags(model.params, split.test, EmbedOptions{}, default_threads()));
  std::cout << codes.size() << " codes of " << codes.front().dim << " bits\n";

  const auto indices = build_indices(split.test, codes);
  const auto& query = indices.front().entry(0);
  const auto hit = indices.front().knn(query);
  std::cout << "query " << query.bag_id << " (" << query.label << ") -> " << hit.predicted << '\n';

  evaluate(indices).write_table(std::cout);
}
