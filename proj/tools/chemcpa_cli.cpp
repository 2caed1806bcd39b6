// chemcpa command-line tool. Every subcommand reads an optional JSON config
// file (--config); flags given on the command line take precedence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chemcpa.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct Failure {
  int code;
  std::string message;
};

[[noreturn]] void UsageError(const std::string& message) { throw Failure{kExitUsage, message}; }

void Check(cpa_status status) {
  if (status == CPA_OK) return;
  const int code = status == CPA_ERR_INVALID_ARGUMENT ? kExitUsage : kExitData;
  throw Failure{code, cpa_last_error()};
}

// Owning wrappers around C handles and strings.
struct Text {
  char* p = nullptr;
  ~Text() { cpa_string_free(p); }
  std::string str() const { return p ? p : ""; }
};
struct Dataset {
  cpa_dataset_t* p = nullptr;
  ~Dataset() { cpa_dataset_free(p); }
};
struct Model {
  cpa_model_t* p = nullptr;
  ~Model() { cpa_model_free(p); }
};

json ReadJson(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Failure{kExitData, "cannot open config " + path};
  try {
    json j = json::parse(in);
    if (!j.is_object()) UsageError("config " + path + " must hold a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw Failure{kExitUsage, "config " + path + ": " + e.what()};
  }
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure{kExitData, "cannot write " + path.string()};
  out << text;
}

// Command-line flags shared by the subcommands; unset flags fall back to the
// config file, then to built-in defaults.
struct Flags {
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> gene_map;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> threads;
  std::optional<std::string> split;
  std::optional<std::string> target;
  std::optional<double> valid_fraction;
  std::vector<std::string> holdout_drugs;
  std::optional<int> max_steps;
  std::optional<int> eval_every;

  // synth
  std::optional<int> n_genes, n_drugs, n_covariates, cells_per_combo, latent_dim, fingerprint_dim;
  std::optional<double> noise_sigma;

  // fingerprint
  std::vector<std::string> smiles;
  std::optional<std::string> input;
  std::optional<int> dim;
  std::optional<int> max_path_len;
};

class Resolved {
 public:
  Resolved(const Flags& f, std::string command) : flags_(f), command_(std::move(command)) {
    if (f.config) config_ = ReadJson(*f.config);
  }

  template <typename T>
  std::optional<T> Get(const std::optional<T>& flag, const char* key) const {
    if (flag) return flag;
    if (config_.contains(key)) {
      try {
        return config_.at(key).get<T>();
      } catch (const json::exception& e) {
        UsageError(std::string("config key '") + key + "': " + e.what());
      }
    }
    return std::nullopt;
  }
  template <typename T>
  T Get(const std::optional<T>& flag, const char* key, T fallback) const {
    return Get(flag, key).value_or(fallback);
  }
  json Section(const char* key) const {
    if (!config_.contains(key)) return json::object();
    const json& s = config_.at(key);
    if (!s.is_object()) UsageError(std::string("config key '") + key + "' must be an object");
    return s;
  }

  fs::path OutputDir() const {
    if (auto out = Get(flags_.out, "output_dir")) return *out;
    const char* root = std::getenv("CHEMCPA_OUTPUT_ROOT");
    return fs::path(root && *root ? root : ".") / (command_ + "-run");
  }
  std::uint64_t Seed() const {
    auto s = Get(flags_.seed, "seed");
    if (!s) UsageError("a seed is required (--seed or \"seed\" in the config)");
    return *s;
  }

  // Writes run_config.json: the effective settings of this invocation.
  void Record(const fs::path& dir, json effective) const {
    effective["command"] = command_;
    effective["version"] = cpa_version();
    if (flags_.config) effective["config_file"] = *flags_.config;
    WriteText(dir / "run_config.json", effective.dump(2) + "\n");
  }

  const Flags& flags() const { return flags_; }

 private:
  const Flags& flags_;
  std::string command_;
  json config_ = json::object();
};

fs::path PrepareDir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{kExitData, "cannot create " + dir.string() + ": " + ec.message()};
  return dir;
}

std::string RequirePath(const Resolved& r, const std::optional<std::string>& flag, const char* key,
                        const char* option, const CLI::App& app) {
  auto v = r.Get(flag, key);
  if (!v) throw Failure{kExitUsage, std::string(option) + " is required\n" + app.help()};
  return *v;
}

// Loads a dataset and log1p-normalizes it when it still holds raw counts.
void LoadPreprocessed(const std::string& path, Dataset& out) {
  Dataset raw;
  Check(cpa_dataset_load(path.c_str(), &raw.p));
  Text info;
  Check(cpa_dataset_info(raw.p, &info.p));
  if (json::parse(info.str()).at("state") == "raw") {
    Check(cpa_dataset_preprocess(raw.p, &out.p));
  } else {
    std::swap(out.p, raw.p);
  }
}

json FitOptions(const Resolved& r, std::uint64_t seed) {
  const Flags& f = r.flags();
  json o;
  o["epochs"] = r.Get(f.epochs, "epochs", 0);
  o["seed"] = seed;
  o["threads"] = r.Get(f.threads, "threads", 1);
  o["eval_every"] = r.Get(f.eval_every, "eval_every", 1);
  if (auto m = r.Get(f.max_steps, "max_steps")) o["max_steps"] = *m;
  return o;
}

json SplitOptions(const Resolved& r, std::uint64_t seed) {
  json s = r.Section("split");
  const Flags& f = r.flags();
  if (!f.holdout_drugs.empty()) s["holdout_drugs"] = f.holdout_drugs;
  if (f.valid_fraction) s["valid_fraction"] = *f.valid_fraction;
  if (!s.contains("seed")) s["seed"] = seed;
  return s;
}

int RunSynth(const Resolved& r) {
  const Flags& f = r.flags();
  json cfg = r.Section("synth");
  cfg["seed"] = r.Seed();
  auto set = [&](const std::optional<int>& v, const char* key) {
    if (v) cfg[key] = *v;
  };
  set(f.n_genes, "n_genes");
  set(f.n_drugs, "n_drugs");
  set(f.n_covariates, "n_covariates");
  set(f.cells_per_combo, "cells_per_combo");
  set(f.latent_dim, "latent_dim");
  set(f.fingerprint_dim, "fingerprint_dim");
  if (f.noise_sigma) cfg["noise_sigma"] = *f.noise_sigma;

  Dataset ds;
  Text truth;
  Check(cpa_synth_generate(cfg.dump().c_str(), &ds.p, &truth.p));
  const fs::path dir = PrepareDir(r.OutputDir());
  Check(cpa_dataset_save(ds.p, (dir / "dataset.csv").string().c_str()));
  WriteText(dir / "ground_truth.json", json::parse(truth.str()).dump(1) + "\n");
  r.Record(dir, {{"synth", cfg}, {"seed", cfg["seed"]}});
  std::cout << "wrote " << (dir / "dataset.csv").string() << "\n";
  return kExitOk;
}

int RunTrain(const Resolved& r, const CLI::App& app) {
  const std::string data = RequirePath(r, r.flags().data, "dataset", "--data", app);
  const std::uint64_t seed = r.Seed();
  Dataset pre;
  LoadPreprocessed(data, pre);
  const json split = SplitOptions(r, seed);
  Dataset ds;
  Check(cpa_dataset_split(pre.p, split.dump().c_str(), &ds.p));

  const json hp = r.Section("hparams");
  Model model;
  Check(cpa_model_create(hp.dump().c_str(), ds.p, seed, &model.p));
  const json fit = FitOptions(r, seed);
  Text log;
  Check(cpa_model_fit(model.p, ds.p, fit.dump().c_str(), &log.p, nullptr));

  const fs::path dir = PrepareDir(r.OutputDir());
  const json effective = {{"dataset", data}, {"seed", seed}, {"split", split}, {"hparams", hp}, {"fit", fit}};
  Check(cpa_model_save(model.p, (dir / "model.ckpt").string().c_str(), effective.dump().c_str()));
  Check(cpa_dataset_save(ds.p, (dir / "dataset.csv").string().c_str()));
  WriteText(dir / "training_log.csv", log.str());
  r.Record(dir, effective);
  std::cout << "wrote " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int RunFinetune(const Resolved& r, const CLI::App& app) {
  const std::string ckpt = RequirePath(r, r.flags().checkpoint, "checkpoint", "--checkpoint", app);
  const std::string data = RequirePath(r, r.flags().data, "dataset", "--data", app);
  const auto gene_map = r.Get(r.flags().gene_map, "gene_map");
  const std::uint64_t seed = r.Seed();

  Model pretrained;
  Check(cpa_model_load(ckpt.c_str(), &pretrained.p));
  Dataset pre;
  LoadPreprocessed(data, pre);
  const json split = SplitOptions(r, seed);
  Dataset ds;
  Check(cpa_dataset_split(pre.p, split.dump().c_str(), &ds.p));
  const json fit = FitOptions(r, seed);
  Model tuned;
  Text log;
  Check(cpa_finetune(pretrained.p, ds.p, gene_map ? gene_map->c_str() : nullptr, fit.dump().c_str(), &tuned.p,
                     &log.p));

  const fs::path dir = PrepareDir(r.OutputDir());
  json effective = {{"checkpoint", ckpt}, {"dataset", data}, {"seed", seed}, {"split", split}, {"fit", fit}};
  if (gene_map) effective["gene_map"] = *gene_map;
  Check(cpa_model_save(tuned.p, (dir / "model.ckpt").string().c_str(), effective.dump().c_str()));
  Check(cpa_dataset_save(ds.p, (dir / "dataset.csv").string().c_str()));
  WriteText(dir / "training_log.csv", log.str());
  r.Record(dir, effective);
  std::cout << "wrote " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int RunEval(const Resolved& r, const CLI::App& app) {
  const std::string ckpt = RequirePath(r, r.flags().checkpoint, "checkpoint", "--checkpoint", app);
  const std::string data = RequirePath(r, r.flags().data, "dataset", "--data", app);
  Model model;
  Check(cpa_model_load(ckpt.c_str(), &model.p));
  Dataset ds;
  LoadPreprocessed(data, ds);
  const json opts = {{"split", r.Get(r.flags().split, "split_name", std::string("test"))},
                     {"threads", r.Get(r.flags().threads, "threads", 1)}};
  Text scores, summary;
  Check(cpa_evaluate(model.p, ds.p, opts.dump().c_str(), &scores.p, &summary.p));

  const fs::path dir = PrepareDir(r.OutputDir());
  json sum = json::parse(summary.str());
  const json effective = {{"checkpoint", ckpt}, {"dataset", data}, {"eval", opts}};
  sum["provenance"] = effective;
  WriteText(dir / "scores.csv", scores.str());
  WriteText(dir / "summary.json", sum.dump(2) + "\n");
  r.Record(dir, effective);
  std::cout << "wrote " << (dir / "summary.json").string() << "\n";
  return kExitOk;
}

int RunProbe(const Resolved& r, const CLI::App& app) {
  const std::string ckpt = RequirePath(r, r.flags().checkpoint, "checkpoint", "--checkpoint", app);
  const std::string data = RequirePath(r, r.flags().data, "dataset", "--data", app);
  const std::uint64_t seed = r.Seed();
  Model model;
  Check(cpa_model_load(ckpt.c_str(), &model.p));
  Dataset ds;
  LoadPreprocessed(data, ds);
  json opts = r.Section("probe");
  opts["target"] = r.Get(r.flags().target, "target", std::string("drug"));
  opts["seed"] = seed;
  if (r.flags().epochs) opts["epochs"] = *r.flags().epochs;
  Text report;
  Check(cpa_probe(model.p, ds.p, opts.dump().c_str(), &report.p));

  const fs::path dir = PrepareDir(r.OutputDir());
  json rep = json::parse(report.str());
  const json effective = {{"checkpoint", ckpt}, {"dataset", data}, {"seed", seed}, {"probe", opts}};
  rep["provenance"] = effective;
  const std::string name = "probe_" + opts["target"].get<std::string>() + ".json";
  WriteText(dir / name, rep.dump(2) + "\n");
  r.Record(dir, effective);
  std::cout << rep.dump(2) << "\n";
  return kExitOk;
}

int RunFingerprint(const Resolved& r, const CLI::App& app) {
  const Flags& f = r.flags();
  std::vector<std::string> smiles = f.smiles;
  if (auto in = r.Get(f.input, "input")) {
    std::ifstream file(*in);
    if (!file) throw Failure{kExitData, "cannot open " + *in};
    std::string line;
    while (std::getline(file, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) smiles.push_back(line);
    }
  }
  if (smiles.empty()) throw Failure{kExitUsage, "give --smiles or --input\n" + app.help()};
  const int dim = r.Get(f.dim, "dim", 200);
  const int max_len = r.Get(f.max_path_len, "max_path_len", 7);

  std::ostringstream csv;
  csv << "smiles";
  for (int i = 0; i < dim; ++i) csv << ",bit_" << i;
  csv << '\n';
  std::vector<double> bits(static_cast<std::size_t>(std::max(dim, 0)));
  for (const std::string& s : smiles) {
    Check(cpa_fingerprint(s.c_str(), dim, max_len, bits.data()));
    csv << s;
    for (double b : bits) csv << ',' << (b != 0.0 ? 1 : 0);
    csv << '\n';
  }
  if (auto out = r.Get(f.out, "output")) {
    const fs::path path(*out);
    if (path.has_parent_path()) PrepareDir(path.parent_path());
    WriteText(path, csv.str());
  } else {
    std::cout << csv.str();
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chemcpa: counterfactual drug-response modelling with hashed molecular fingerprints"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cpa_version()));
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON config file; flags override its keys")->check(CLI::ExistingFile);
    sub->add_option("--threads", f.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  };
  auto seeded = [&](CLI::App* sub) { sub->add_option("--seed", f.seed, "Random seed (required here or in config)"); };
  auto outdir = [&](CLI::App* sub) {
    sub->add_option("--out", f.out, "Output directory (default $CHEMCPA_OUTPUT_ROOT/<command>-run)");
  };
  auto training = [&](CLI::App* sub) {
    sub->add_option("--data", f.data, "Dataset CSV");
    sub->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
    sub->add_option("--holdout-drugs", f.holdout_drugs, "Drugs (SMILES) routed entirely to the test split");
    sub->add_option("--valid-fraction", f.valid_fraction, "Share of non-holdout rows used for validation");
    sub->add_option("--max-steps", f.max_steps, "Stop after this many optimizer steps");
    sub->add_option("--eval-every", f.eval_every, "Validation cadence in epochs (0 disables)");
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic count dataset with planted ground truth");
  common(synth);
  seeded(synth);
  outdir(synth);
  synth->add_option("--n-genes", f.n_genes);
  synth->add_option("--n-drugs", f.n_drugs);
  synth->add_option("--n-covariates", f.n_covariates);
  synth->add_option("--cells-per-combo", f.cells_per_combo);
  synth->add_option("--latent-dim", f.latent_dim);
  synth->add_option("--fingerprint-dim", f.fingerprint_dim);
  synth->add_option("--noise-sigma", f.noise_sigma);

  CLI::App* train = app.add_subcommand("train", "Train a model from scratch");
  common(train);
  seeded(train);
  outdir(train);
  training(train);

  CLI::App* finetune = app.add_subcommand("finetune", "Adapt a pretrained checkpoint to a new dataset");
  common(finetune);
  seeded(finetune);
  outdir(finetune);
  training(finetune);
  finetune->add_option("--checkpoint", f.checkpoint, "Pretrained .ckpt");
  finetune->add_option("--gene-map", f.gene_map, "genes.map CSV (target_name,source_name); default: match by name");

  CLI::App* eval = app.add_subcommand("eval", "Score counterfactual predictions (scores.csv, summary.json)");
  common(eval);
  outdir(eval);
  eval->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  eval->add_option("--data", f.data, "Dataset CSV with split labels");
  eval->add_option("--split", f.split, "Split to score")->check(CLI::IsMember({"train", "valid", "test"}));

  CLI::App* probe = app.add_subcommand("probe", "Classifier probe of basal-state disentanglement");
  common(probe);
  seeded(probe);
  outdir(probe);
  probe->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  probe->add_option("--data", f.data, "Dataset CSV");
  probe->add_option("--target", f.target, "Label to predict")->check(CLI::IsMember({"drug", "covariate"}));
  probe->add_option("--epochs", f.epochs, "Probe training epochs");

  CLI::App* fingerprint = app.add_subcommand("fingerprint", "Hashed path fingerprints as CSV");
  common(fingerprint);
  fingerprint->add_option("--smiles", f.smiles, "SMILES string (repeatable)");
  fingerprint->add_option("--input", f.input, "File with one SMILES per line");
  fingerprint->add_option("--dim", f.dim, "Fingerprint width");
  fingerprint->add_option("--max-path-len", f.max_path_len, "Longest path in bonds");
  fingerprint->add_option("--out", f.out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    Resolved r(f, sub->get_name());
    if (sub == synth) return RunSynth(r);
    if (sub == train) return RunTrain(r, *train);
    if (sub == finetune) return RunFinetune(r, *finetune);
    if (sub == eval) return RunEval(r, *eval);
    if (sub == probe) return RunProbe(r, *probe);
    return RunFingerprint(r, *fingerprint);
  } catch (const Failure& e) {
    std::cerr << "chemcpa " << sub->get_name() << ": " << e.message << "\n";
    return e.code;
  }
}
