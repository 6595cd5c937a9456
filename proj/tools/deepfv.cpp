// deepfv: command-line front end for the compact Fisher-vector pipeline.
//
//   gen-synthetic -> train -> embed [--binary] -> [select-bits] -> index
//   -> eval-retrieval / search;  embed -> eval-classify;  sweep.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numerical divergence.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deepfv/config.hpp"
#include "deepfv/pipeline.hpp"

namespace {

using namespace deepfv;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::UnknownKey:
    case ErrorKind::InvalidSpec:
      return kExitUsage;
    case ErrorKind::DivergenceDetected:
      return kExitDivergence;
    default:
      return kExitData;
  }
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t threads = default_threads();
  std::string out;
  std::string command_line;

  RunConfig load() const {
    RunConfig c;
    if (!config_path.empty()) apply_config_file(c, config_path);
    for (const auto& o : overrides) apply_assignment(c, o, "--set " + o);
    validate(c);
    return c;
  }

  fs::path out_dir() const {
    if (out.empty()) throw Error(ErrorKind::InvalidConfig, "--out is required");
    fs::create_directories(out);
    return out;
  }

  /// The effective configuration, written to <out>/<name>.log.
  void log_run(const std::string& name, const RunConfig& c) const {
    std::ofstream log(out_dir() / (name + ".log"));
    log << "# " << command_line << '\n';
    write_config(log, c);
  }
};

void add_common(CLI::App* sub, Common& common, bool with_out = true) {
  sub->add_option("--config", common.config_path, "Configuration file (key = value lines)")->check(CLI::ExistingFile);
  sub->add_option("--set", common.overrides, "Override a configuration key, e.g. --set train.epochs=10");
  sub->add_option("--threads", common.threads, "Worker threads (default: available cores)")->check(CLI::PositiveNumber);
  if (with_out) sub->add_option("--out", common.out, "Output directory")->required();
}

std::vector<double> parse_list(const std::string& flag, const std::string& text) {
  std::vector<double> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) out.push_back(detail::parse_double(flag, detail::trim(item)));
  if (out.empty()) throw Error(ErrorKind::InvalidConfig, flag + " needs at least one value");
  return out;
}

std::string file_safe(const std::string& name) {
  std::string s = name;
  for (auto& ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  return s;
}

fs::path sidecar_of(const fs::path& codes) { return fs::path(codes).replace_extension(".csv"); }

Dataset subset(const Dataset& ds, const RunConfig& c, const std::string& which) {
  if (which == "all") return ds;
  auto split = split_by_patient(ds, c.eval.test_fraction, c.eval.split_seed);
  if (which == "train") return split.train;
  if (which == "test") return split.test;
  throw Error(ErrorKind::InvalidConfig, "--subset must be all, train or test");
}

void print_search(std::ostream& out, const IndexEntry& q, const SearchResult& r) {
  out << "query " << q.bag_id << " (patient " << q.patient_id << ", condition " << q.condition << ", class " << q.label
      << ")\n";
  out << "rank  bag_id  distance  class\n";
  for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
    const auto& n = r.neighbors[i];
    out << (i + 1) << "  " << n.bag_id << "  " << n.distance << "  " << n.label << '\n';
  }
  out << "votes:";
  for (const auto& [label, count] : r.votes) out << ' ' << label << '=' << count;
  out << "\npredicted " << r.predicted << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compact deep Fisher-vector embeddings for bags of feature vectors, with Hamming retrieval"};
  app.require_subcommand(1);
  Common common;
  for (int i = 0; i < argc; ++i) common.command_line += (i ? " " : "") + std::string(argv[i]);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic dataset (manifest.csv + features/)");
  add_common(gen, common);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the conditioned VAE; writes model.cvae and train_report.csv");
  add_common(train_cmd, common);
  std::string manifest;
  bool all_bags = false;
  train_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  train_cmd->add_flag("--all-bags", all_bags, "Train on every bag instead of the training split");

  // embed
  auto* embed_cmd = app.add_subcommand("embed", "Extract Fisher embeddings (mean reconstruction-loss gradient per bag); writes embeddings.fve");
  add_common(embed_cmd, common);
  std::string model_path, which = "all";
  bool binary = false;
  embed_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  embed_cmd->add_option("--model", model_path, "Model checkpoint")->required();
  embed_cmd->add_flag("--binary", binary, "Write sign codes instead of dense vectors");
  embed_cmd->add_option("--subset", which, "Bags to embed: all | train | test")->capture_default_str();

  // select-bits
  auto* select_cmd = app.add_subcommand("select-bits", "Fit per-condition high-variance masks; writes mask_<condition>.fvm");
  add_common(select_cmd, common);
  std::string embeddings_path;
  std::size_t m_bits = 0;
  select_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  select_cmd->add_option("--embeddings", embeddings_path, "Dense embeddings (fitted on the training split)")->required();
  select_cmd->add_option("--M", m_bits, "Coordinates to keep (default: eval.bit_fraction of the length)");

  // index
  auto* index_cmd = app.add_subcommand("index", "Build a retrieval index; writes index*.fve + sidecar CSV");
  add_common(index_cmd, common);
  std::string masks_dir;
  std::string index_subset = "test";
  index_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  index_cmd->add_option("--embeddings", embeddings_path, "Embedding file")->required();
  index_cmd->add_option("--masks", masks_dir, "Directory of mask_*.fvm files; builds one index per condition");
  index_cmd->add_flag("--binary", binary, "Binarise dense embeddings first");
  index_cmd->add_option("--subset", index_subset, "Bags to index: all | train | test")->capture_default_str();

  // search
  auto* search_cmd = app.add_subcommand("search", "Print the nearest neighbours of an indexed bag");
  add_common(search_cmd, common, /*with_out=*/false);
  std::vector<std::string> index_paths;
  std::string bag_id;
  std::size_t k_override = 0;
  bool keep_patient = false, all_conditions = false;
  search_cmd->add_option("--index", index_paths, "Index file(s) (.fve with .csv sidecar)")->required();
  search_cmd->add_option("--bag", bag_id, "Query bag id")->required();
  search_cmd->add_option("-k", k_override, "Neighbours (default: eval.k)");
  search_cmd->add_flag("--keep-patient", keep_patient, "Do not exclude bags of the query's patient");
  search_cmd->add_flag("--all-conditions", all_conditions, "Do not restrict to the query's condition");

  // eval-retrieval
  auto* evalr_cmd = app.add_subcommand("eval-retrieval", "Leave-one-patient-out majority vote search over index(es)");
  add_common(evalr_cmd, common);
  evalr_cmd->add_option("--index", index_paths, "Index file(s) (.fve with .csv sidecar)")->required();
  evalr_cmd->add_option("-k", k_override, "Neighbours (default: eval.k)");

  // eval-classify
  auto* evalc_cmd = app.add_subcommand("eval-classify", "Train a two-layer head on train-split embeddings, test on the rest");
  add_common(evalc_cmd, common);
  evalc_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  evalc_cmd->add_option("--embeddings", embeddings_path, "Embedding file")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Train one model per (lambda4, lambda5) pair; writes sweep.csv");
  add_common(sweep_cmd, common);
  std::string lambda4_text, lambda5_text;
  sweep_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  sweep_cmd->add_option("--lambda4", lambda4_text, "Comma-separated sparsity weights")->required();
  sweep_cmd->add_option("--lambda5", lambda5_text, "Comma-separated quantization weights")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    auto config = common.load();

    if (gen->parsed()) {
      const auto dir = common.out_dir();
      auto result = generate_synthetic(config.synthetic, dir);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
      common.log_run("gen-synthetic", config);
      std::cout << "wrote " << result.dataset.bags.size() << " bags (" << result.dataset.instance_count()
                << " instances) to " << (dir / "manifest.csv").string() << '\n';
    } else if (train_cmd->parsed()) {
      const auto ds = load_dataset(manifest);
      config.model = resolve_model(config, ds);
      const auto& model = config.model;
      const auto dir = common.out_dir();
      common.log_run("train", config);
      Dataset train_set = ds;
      std::ofstream split_out(dir / "split.csv");
      split_out << "bag_id,side\n";
      if (all_bags) {
        for (const auto& b : ds.bags) split_out << csv::quote(b.bag_id) << ",train\n";
      } else {
        auto split = split_by_patient(ds, config.eval.test_fraction, config.eval.split_seed);
        for (const auto& b : split.train.bags) split_out << csv::quote(b.bag_id) << ",train\n";
        for (const auto& b : split.test.bags) split_out << csv::quote(b.bag_id) << ",test\n";
        train_set = std::move(split.train);
      }
      std::cerr << config.train.weights.mode() << ": " << parameter_count(model) << " parameters, "
                << train_set.bags.size() << " bags, " << train_set.instance_count() << " instances\n";
      auto result = train(init_parameters<double>(model), make_instances<double>(train_set), config.train,
                          [](const EpochRecord& e) {
                            std::cerr << "epoch " << e.epoch << " total " << e.total << " grad_l1 " << e.grad_l1
                                      << " quant " << e.quant << '\n';
                          });
      save_checkpoint((dir / "model.cvae").string(), result.params);
      std::ofstream report(dir / "train_report.csv");
      result.report.write_csv(report);
      std::cout << "wrote " << (dir / "model.cvae").string() << " and train_report.csv\n";
    } else if (embed_cmd->parsed()) {
      const auto ds = subset(load_dataset(manifest), config, which);
      const auto params = load_checkpoint<double>(model_path);
      if (params.config.input_dim != ds.dim) {
        throw Error(ErrorKind::DimMismatch, model_path + ": model expects dim " +
                                                std::to_string(params.config.input_dim) + ", data has " +
                                                std::to_string(ds.dim));
      }
      config.model = params.config;
      const auto dir = common.out_dir();
      common.log_run("embed", config);
      auto codes = embed_bags(params, ds, config.embed, common.threads);
      if (binary) codes = binarize_all(codes);
      write_embeddings(dir / "embeddings.fve", codes);
      std::cout << "wrote " << codes.size() << (binary ? " binary" : " dense") << " embeddings of length "
                << codes.front().dim << '\n';
    } else if (select_cmd->parsed()) {
      const auto ds = load_dataset(manifest);
      const auto train_set = subset(ds, config, "train");
      const auto all = read_embeddings(embeddings_path);
      if (!all.empty() && all.front().kind != EmbeddingKind::Dense) {
        throw Error(ErrorKind::InvalidConfig, embeddings_path + ": masks are fitted on dense embeddings");
      }
      const auto train_codes = pick(all, train_set);
      const std::size_t m = m_bits ? m_bits : budget(train_codes.front().dim, config.eval.bit_fraction);
      const auto dir = common.out_dir();
      common.log_run("select-bits", config);
      for (const auto& [cond, mask] : fit_masks(train_set, train_codes, m)) {
        write_mask(dir / ("mask_" + file_safe(cond) + ".fvm"), mask);
      }
      std::cout << "wrote masks of " << m << " coordinates\n";
    } else if (index_cmd->parsed()) {
      const auto ds = subset(load_dataset(manifest), config, index_subset);
      auto codes = pick(read_embeddings(embeddings_path), ds);
      if (binary && !codes.empty() && codes.front().kind == EmbeddingKind::Dense) codes = binarize_all(codes);
      const auto dir = common.out_dir();
      common.log_run("index", config);
      if (masks_dir.empty()) {
        auto idx = build_indices(ds, codes);
        write_index(idx.front(), dir / "index.fve", dir / "index.csv");
        std::cout << "indexed " << idx.front().size() << " bags\n";
      } else {
        std::map<std::string, SelectionMask> masks;
        if (!fs::is_directory(masks_dir)) throw Error(ErrorKind::MissingFile, "mask directory not found: " + masks_dir);
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(masks_dir))
          if (f.path().extension() == ".fvm") files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          auto mask = read_mask(f);
          masks[mask.condition] = std::move(mask);
        }
        for (const auto& idx : build_indices(ds, codes, &masks)) {
          const auto stem = "index_" + file_safe(idx.selection_id());
          write_index(idx, dir / (stem + ".fve"), dir / (stem + ".csv"));
          std::cout << "indexed " << idx.size() << " bags of " << idx.selection_id() << '\n';
        }
      }
    } else if (search_cmd->parsed()) {
      const std::size_t k = k_override ? k_override : config.eval.k;
      for (const auto& p : index_paths) {
        const auto idx = read_index(p, sidecar_of(p));
        const IndexEntry* query = nullptr;
        for (const auto& e : idx.entries())
          if (e.bag_id == bag_id) query = &e;
        if (query == nullptr) continue;
        SearchFilters filters{!keep_patient, !all_conditions};
        print_search(std::cout, *query, idx.knn(*query, k, filters));
        return kExitOk;
      }
      throw Error(ErrorKind::UnknownBagId, "unknown bag id '" + bag_id + "'");
    } else if (evalr_cmd->parsed()) {
      std::vector<RetrievalIndex> indices;
      for (const auto& p : index_paths) indices.push_back(read_index(p, sidecar_of(p)));
      const auto dir = common.out_dir();
      common.log_run("eval-retrieval", config);
      const auto report = evaluate(indices, k_override ? k_override : config.eval.k, common.threads);
      std::ofstream out(dir / "retrieval_report.csv");
      report.write_csv(out);
      report.write_table(std::cout);
    } else if (evalc_cmd->parsed()) {
      const auto ds = load_dataset(manifest);
      const auto split = split_by_patient(ds, config.eval.test_fraction, config.eval.split_seed);
      const auto all = read_embeddings(embeddings_path);
      const auto train_codes = pick(all, split.train);
      const auto test_codes = pick(all, split.test);
      std::vector<std::string> y_train, y_test;
      for (const auto& b : split.train.bags) y_train.push_back(b.label);
      for (const auto& b : split.test.bags) y_test.push_back(b.label);
      const auto dir = common.out_dir();
      common.log_run("eval-classify", config);
      const auto head = train_classifier_head(train_codes, y_train, config.head);
      const auto report = classify(head, test_codes, y_test);
      std::ofstream out(dir / "classify_report.csv");
      report.write_csv(out);
      report.write_table(std::cout);
    } else if (sweep_cmd->parsed()) {
      const auto l4 = parse_list("--lambda4", lambda4_text);
      const auto l5 = parse_list("--lambda5", lambda5_text);
      const auto ds = load_dataset(manifest);
      const auto split = split_by_patient(ds, config.eval.test_fraction, config.eval.split_seed);
      config.model = resolve_model(config, ds);
      const auto dir = common.out_dir();
      common.log_run("sweep", config);
      SweepSetup setup{config.model, config.train, config.embed, config.eval.k};
      const auto table = ablation_sweep(split.train, split.test, setup, l4, l5, common.threads);
      std::ofstream out(dir / "sweep.csv");
      table.write_csv(out);
      table.write_csv(std::cout);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}
