#include "chemcpa.h"

#include <cstdlib>
#include <cstring>
#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "chemcpa/data.hpp"
#include "chemcpa/eval.hpp"
#include "chemcpa/fingerprint.hpp"
#include "chemcpa/model.hpp"
#include "chemcpa/synth.hpp"
#include "chemcpa/training.hpp"
#include "chemcpa/transfer.hpp"

struct cpa_dataset {
  chemcpa::ExpressionDataset value;
};

struct cpa_model {
  chemcpa::ChemCpaModel value;
};

namespace {

using chemcpa::Error;
using chemcpa::ErrorKind;
using nlohmann::json;

thread_local std::string g_last_error;
thread_local std::string g_last_code;

cpa_status StatusOf(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument:
      return CPA_ERR_INVALID_ARGUMENT;
    case ErrorKind::kDimensionMismatch:
      return CPA_ERR_DIMENSION;
    case ErrorKind::kNonFinite:
      return CPA_ERR_NON_FINITE;
    case ErrorKind::kStaleTape:
    case ErrorKind::kState:
      return CPA_ERR_STATE;
    case ErrorKind::kParse:
      return CPA_ERR_PARSE;
    case ErrorKind::kData:
      return CPA_ERR_DATA;
    case ErrorKind::kIo:
      return CPA_ERR_IO;
  }
  return CPA_ERR_INTERNAL;
}

cpa_status Fail(cpa_status status, std::string code, std::string message) {
  g_last_code = std::move(code);
  g_last_error = std::move(message);
  return status;
}

template <typename F>
cpa_status Guard(F&& body) {
  try {
    body();
    g_last_code.clear();
    g_last_error.clear();
    return CPA_OK;
  } catch (const Error& e) {
    return Fail(StatusOf(e.kind()), e.code(), e.what());
  } catch (const json::exception& e) {
    return Fail(CPA_ERR_INVALID_ARGUMENT, "InvalidOptions", e.what());
  } catch (const std::bad_alloc&) {
    return Fail(CPA_ERR_INTERNAL, "OutOfMemory", "out of memory");
  } catch (const std::exception& e) {
    return Fail(CPA_ERR_INTERNAL, "Internal", e.what());
  } catch (...) {
    return Fail(CPA_ERR_INTERNAL, "Internal", "unknown failure");
  }
}

void Require(const void* p, const char* name) {
  if (!p) throw chemcpa::InvalidArgument("NullArgument", std::string(name) + " must not be NULL");
}

json Options(const char* text, std::initializer_list<const char*> allowed) {
  if (!text || !*text) return json::object();
  json j = json::parse(text);
  if (!j.is_object()) throw chemcpa::InvalidArgument("InvalidOptions", "options must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw chemcpa::InvalidArgument("InvalidOptions", "unknown option '" + key + "'");
  }
  return j;
}

char* Dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void Emit(char** out, const std::string& s) {
  if (out) *out = Dup(s);
}

chemcpa::FitOptions FitOptionsFrom(const json& o) {
  chemcpa::FitOptions f;
  f.epochs = o.value("epochs", 0);
  f.seed = o.value("seed", std::uint64_t{0});
  f.eval_every = o.value("eval_every", 1);
  f.threads = o.value("threads", 1);
  f.max_steps = o.value("max_steps", std::int64_t{-1});
  f.record_steps = o.value("record_steps", false);
  return f;
}

constexpr std::initializer_list<const char*> kFitKeys = {"epochs",    "seed",     "eval_every",
                                                         "threads",   "max_steps", "record_steps"};

}  // namespace

extern "C" {

const char* cpa_version(void) { return "1.0.0"; }
const char* cpa_last_error(void) { return g_last_error.c_str(); }
const char* cpa_last_error_code(void) { return g_last_code.c_str(); }
void cpa_string_free(char* s) { std::free(s); }

cpa_status cpa_fingerprint(const char* smiles, int dim, int max_path_len, double* out) {
  return Guard([&] {
    Require(smiles, "smiles");
    Require(out, "out");
    const auto fp = chemcpa::ComputeFingerprint(std::string_view(smiles), dim, max_path_len);
    std::copy(fp.values.begin(), fp.values.end(), out);
  });
}

cpa_status cpa_dataset_load(const char* path, cpa_dataset_t** out) {
  return Guard([&] {
    Require(path, "path");
    Require(out, "out");
    *out = new cpa_dataset{chemcpa::LoadDataset(path)};
  });
}

cpa_status cpa_dataset_save(const cpa_dataset_t* dataset, const char* path) {
  return Guard([&] {
    Require(dataset, "dataset");
    Require(path, "path");
    chemcpa::SaveDataset(dataset->value, path);
  });
}

void cpa_dataset_free(cpa_dataset_t* dataset) { delete dataset; }

cpa_status cpa_dataset_info(const cpa_dataset_t* dataset, char** json_out) {
  return Guard([&] {
    Require(dataset, "dataset");
    Require(json_out, "json_out");
    const auto& ds = dataset->value;
    json j;
    j["rows"] = ds.size();
    j["genes"] = ds.num_genes();
    j["state"] = ds.state == chemcpa::PreprocessState::kRaw ? "raw" : "log1p";
    j["drugs"] = ds.Drugs();
    j["covariates"] = ds.Covariates();
    j["splits"] = {{"train", ds.RowsInSplit(chemcpa::Split::kTrain).size()},
                   {"valid", ds.RowsInSplit(chemcpa::Split::kValid).size()},
                   {"test", ds.RowsInSplit(chemcpa::Split::kTest).size()}};
    j["provenance"] = ds.provenance;
    *json_out = Dup(j.dump());
  });
}

cpa_status cpa_dataset_preprocess(const cpa_dataset_t* dataset, cpa_dataset_t** out) {
  return Guard([&] {
    Require(dataset, "dataset");
    Require(out, "out");
    *out = new cpa_dataset{chemcpa::Preprocess(dataset->value)};
  });
}

cpa_status cpa_dataset_split(const cpa_dataset_t* dataset, const char* options_json, cpa_dataset_t** out) {
  return Guard([&] {
    Require(dataset, "dataset");
    Require(out, "out");
    const json o = Options(options_json, {"holdout_drugs", "holdout_combos", "valid_fraction",
                                          "control_test_fraction", "seed"});
    chemcpa::SplitConfig c;
    c.holdout_drugs = o.value("holdout_drugs", std::vector<std::string>{});
    for (const auto& pair : o.value("holdout_combos", json::array())) {
      c.holdout_combos.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
    }
    c.valid_fraction = o.value("valid_fraction", c.valid_fraction);
    c.control_test_fraction = o.value("control_test_fraction", c.control_test_fraction);
    c.seed = o.value("seed", std::uint64_t{0});
    *out = new cpa_dataset{chemcpa::MakeSplit(dataset->value, c)};
  });
}

cpa_status cpa_synth_generate(const char* config_json, cpa_dataset_t** out, char** ground_truth_json_out) {
  return Guard([&] {
    Require(out, "out");
    const json j = config_json && *config_json ? json::parse(config_json) : json::object();
    auto [ds, truth] = chemcpa::SynthGenerate(chemcpa::SynthConfig::FromJson(j));
    std::string truth_text;
    if (ground_truth_json_out) truth_text = truth.ToJson().dump();
    *out = new cpa_dataset{std::move(ds)};
    Emit(ground_truth_json_out, truth_text);
  });
}

cpa_status cpa_model_create(const char* hparams_json, const cpa_dataset_t* dataset, uint64_t seed,
                            cpa_model_t** out) {
  return Guard([&] {
    Require(dataset, "dataset");
    Require(out, "out");
    const json j = hparams_json && *hparams_json ? json::parse(hparams_json) : json::object();
    const auto& ds = dataset->value;
    *out = new cpa_model{chemcpa::ChemCpaModel(chemcpa::HyperParams::FromJson(j), ds.genes, ds.Drugs(),
                                               ds.Covariates(), seed)};
  });
}

void cpa_model_free(cpa_model_t* model) { delete model; }

cpa_status cpa_model_info(const cpa_model_t* model, char** json_out) {
  return Guard([&] {
    Require(model, "model");
    Require(json_out, "json_out");
    const auto& m = model->value;
    json j;
    j["hparams"] = m.hparams().ToJson();
    j["genes"] = m.genes();
    j["core_genes"] = m.core_genes();
    j["drugs"] = m.drugs();
    j["covariates"] = m.covariates();
    j["adapters"] = m.adapters.has_value();
    *json_out = Dup(j.dump());
  });
}

cpa_status cpa_model_fit(cpa_model_t* model, const cpa_dataset_t* dataset, const char* options_json,
                         char** epoch_csv_out, char** step_csv_out) {
  return Guard([&] {
    Require(model, "model");
    Require(dataset, "dataset");
    chemcpa::FitOptions f = FitOptionsFrom(Options(options_json, kFitKeys));
    if (step_csv_out) f.record_steps = true;
    const chemcpa::TrainingLog log = chemcpa::Fit(model->value, dataset->value, f);
    const std::string epochs = log.EpochCsv();
    const std::string steps = step_csv_out ? log.StepCsv() : std::string();
    Emit(epoch_csv_out, epochs);
    Emit(step_csv_out, steps);
  });
}

cpa_status cpa_model_save(const cpa_model_t* model, const char* path, const char* provenance_json) {
  return Guard([&] {
    Require(model, "model");
    Require(path, "path");
    const json prov = provenance_json && *provenance_json ? json::parse(provenance_json) : json::object();
    chemcpa::SaveCheckpoint(model->value, path, prov);
  });
}

cpa_status cpa_model_load(const char* path, cpa_model_t** out) {
  return Guard([&] {
    Require(path, "path");
    Require(out, "out");
    *out = new cpa_model{chemcpa::LoadCheckpoint(path)};
  });
}

cpa_status cpa_finetune(const cpa_model_t* pretrained, const cpa_dataset_t* target, const char* gene_map_path,
                        const char* options_json, cpa_model_t** out, char** epoch_csv_out) {
  return Guard([&] {
    Require(pretrained, "pretrained");
    Require(target, "target");
    Require(out, "out");
    const chemcpa::FitOptions f = FitOptionsFrom(Options(options_json, kFitKeys));
    std::optional<chemcpa::GeneMapping> mapping;
    if (gene_map_path) {
      mapping = chemcpa::LoadGeneMap(gene_map_path, pretrained->value.genes(), target->value.genes);
    }
    auto result = chemcpa::Finetune(pretrained->value, target->value, mapping ? &*mapping : nullptr, f);
    const std::string epochs = result.log.EpochCsv();
    *out = new cpa_model{std::move(result.model)};
    Emit(epoch_csv_out, epochs);
  });
}

cpa_status cpa_predict(const cpa_model_t* model, const cpa_dataset_t* dataset, const char* drug, double dose,
                       const char* covariate, const char* split, double* out, size_t n) {
  return Guard([&] {
    Require(model, "model");
    Require(dataset, "dataset");
    Require(drug, "drug");
    Require(covariate, "covariate");
    Require(out, "out");
    const chemcpa::Split s = split ? chemcpa::ParseSplit(split) : chemcpa::Split::kTest;
    if (n != static_cast<size_t>(model->value.num_genes())) {
      throw chemcpa::DimensionMismatch("output buffer holds " + std::to_string(n) + " values, model has " +
                                       std::to_string(model->value.num_genes()) + " genes");
    }
    const chemcpa::Vector mu = chemcpa::CounterfactualPredict(model->value, dataset->value, drug, dose, covariate, s);
    std::copy(mu.data(), mu.data() + mu.size(), out);
  });
}

cpa_status cpa_evaluate(const cpa_model_t* model, const cpa_dataset_t* dataset, const char* options_json,
                        char** scores_csv_out, char** summary_json_out) {
  return Guard([&] {
    Require(model, "model");
    Require(dataset, "dataset");
    const json o = Options(options_json, {"split", "threads", "k", "min_cells"});
    chemcpa::EvalOptions eo;
    eo.split = chemcpa::ParseSplit(o.value("split", std::string("test")));
    eo.threads = o.value("threads", 1);
    const chemcpa::DegTable degs = chemcpa::ComputeDegs(dataset->value, o.value("k", 50), o.value("min_cells", 5));
    const chemcpa::EvaluationReport report = chemcpa::Evaluate(model->value, dataset->value, degs, eo);
    const std::string scores = report.ScoresCsv();
    const std::string summary = report.SummaryJson().dump(2);
    Emit(scores_csv_out, scores);
    Emit(summary_json_out, summary);
  });
}

cpa_status cpa_probe(const cpa_model_t* model, const cpa_dataset_t* dataset, const char* options_json,
                     char** report_json_out) {
  return Guard([&] {
    Require(model, "model");
    Require(dataset, "dataset");
    Require(report_json_out, "report_json_out");
    const json o = Options(options_json, {"target", "seed", "epochs", "width", "layers", "learning_rate",
                                          "batch_size", "train_fraction"});
    const std::string target = o.value("target", std::string("drug"));
    chemcpa::ProbeTarget t;
    if (target == "drug") {
      t = chemcpa::ProbeTarget::kDrug;
    } else if (target == "covariate") {
      t = chemcpa::ProbeTarget::kCovariate;
    } else {
      throw chemcpa::InvalidArgument("InvalidOptions", "probe target must be 'drug' or 'covariate'");
    }
    chemcpa::ProbeOptions po;
    po.epochs = o.value("epochs", po.epochs);
    po.width = o.value("width", po.width);
    po.layers = o.value("layers", po.layers);
    po.learning_rate = o.value("learning_rate", po.learning_rate);
    po.batch_size = o.value("batch_size", po.batch_size);
    po.train_fraction = o.value("train_fraction", po.train_fraction);
    const auto report = chemcpa::DisentanglementProbe(model->value, dataset->value, t,
                                                      o.value("seed", std::uint64_t{0}), po);
    *report_json_out = Dup(report.ToJson().dump(2));
  });
}

}  // extern "C"
