#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chemcpa/data.hpp"
#include "chemcpa/model.hpp"

namespace chemcpa {

// 1 - SS_res / SS_tot. Returns nullopt when the truth is constant.
std::optional<double> R2Score(std::span<const double> pred, std::span<const double> truth);

// Mean decoded expression when the basal states of every control row in
// `split` are combined with the drug/dose/covariate attribute latent.
Vector CounterfactualPredict(const ChemCpaModel& model, const ExpressionDataset& dataset,
                             const std::string& drug, double dose, const std::string& covariate,
                             Split split = Split::kTest);

// Per-gene mean of the covariate's control rows in `split`.
Vector BaselinePredict(const ExpressionDataset& dataset, const std::string& covariate,
                       Split split = Split::kTest);

struct ComboScore {
  std::string drug;
  double dose = 0.0;
  std::string covariate;
  std::optional<double> r2_all;
  std::optional<double> r2_degs;
  std::optional<double> baseline_r2_all;
  std::optional<double> baseline_r2_degs;
  int n_controls = 0;
  int n_true = 0;
  int n_degs = 0;  // number of DEG indices the DEG score was computed on
};

struct Aggregate {
  std::string type;                // "model" or "baseline"
  std::optional<double> dose;      // nullopt: all doses pooled
  int count = 0;
  double mean_r2_all = 0.0;
  double mean_r2_degs = 0.0;
  double median_r2_all = 0.0;
  double median_r2_degs = 0.0;
};

struct EvaluationReport {
  std::vector<ComboScore> scores;
  std::vector<Aggregate> aggregates;

  std::string ScoresCsv() const;
  nlohmann::json SummaryJson() const;
  const Aggregate* Find(const std::string& type, std::optional<double> dose) const;
};

struct EvalOptions {
  Split split = Split::kTest;
  int threads = 1;
};

// One score per (drug, dose, covariate) treated combination in the split.
// Combos with constant truth are kept in `scores` but left out of aggregates.
EvaluationReport Evaluate(const ChemCpaModel& model, const ExpressionDataset& dataset,
                          const DegTable& degs, const EvalOptions& options = {});

std::vector<Aggregate> Aggregates(const std::vector<ComboScore>& scores);

enum class ProbeTarget { kDrug, kCovariate };

struct ProbeOptions {
  int epochs = 400;
  int width = 128;
  int layers = 4;
  double learning_rate = 1e-3;
  int batch_size = 256;
  double train_fraction = 0.8;
  // Accuracy thresholds below which the basal state counts as disentangled.
  double drug_gate = 0.07;
  double covariate_gate = 0.70;
};

struct ProbeReport {
  ProbeTarget target = ProbeTarget::kDrug;
  double accuracy = 0.0;
  double majority_rate = 0.0;  // frequency of the most abundant class
  double gate = 0.0;
  bool passes_gate = false;
  bool degenerate = false;  // only one class present
  int num_classes = 0;
  int train_rows = 0;
  int eval_rows = 0;

  nlohmann::json ToJson() const;
};

// Trains a fresh MLP classifier on basal states of every dataset row and
// reports held-out accuracy. The evaluated model is never modified.
ProbeReport DisentanglementProbe(const ChemCpaModel& model, const ExpressionDataset& dataset,
                                 ProbeTarget target, std::uint64_t seed, const ProbeOptions& options = {});

// Joins two score lists on (drug, dose, covariate) for paired testing.
struct PairedComparison {
  struct Row {
    std::string drug;
    double dose = 0.0;
    std::string covariate;
    double a_all = 0.0, b_all = 0.0, a_degs = 0.0, b_degs = 0.0;
  };
  std::vector<Row> rows;
  double t_all = 0.0, p_all = 1.0;
  double t_degs = 0.0, p_degs = 1.0;
  int df = 0;

  std::string Csv() const;
};

PairedComparison ComparePaired(const std::vector<ComboScore>& a, const std::vector<ComboScore>& b);

}  // namespace chemcpa
