#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chemcpa/nn.hpp"

namespace chemcpa {

inline constexpr std::string_view kControl = "CONTROL";

enum class Split { kTrain, kValid, kTest };
enum class PreprocessState { kRaw, kLog1p };

std::string_view ToString(Split split);
Split ParseSplit(std::string_view text);

struct ObservationMeta {
  std::string drug;  // SMILES, or kControl
  double dose = 0.0;  // molar; 0 for controls
  std::string covariate;
  Split split = Split::kTrain;

  bool is_control() const { return drug == kControl; }
};

struct ExpressionDataset {
  Matrix matrix;  // observations x genes
  std::vector<std::string> genes;
  std::vector<ObservationMeta> rows;
  PreprocessState state = PreprocessState::kRaw;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return rows.size(); }
  std::size_t num_genes() const { return genes.size(); }

  // Checks shape agreement, unique gene names and the control/dose pairing.
  void Validate() const;

  // Distinct drugs in first-seen order, kControl always first.
  std::vector<std::string> Drugs() const;
  // Distinct covariates in first-seen order.
  std::vector<std::string> Covariates() const;
  std::vector<std::size_t> RowsInSplit(Split split) const;
};

// CSV with header drug,dose,covariate,<genes...> plus "<path>.meta.json"
// holding preprocessing state, per-row split labels and provenance.
ExpressionDataset LoadDataset(const std::string& path);
void SaveDataset(const ExpressionDataset& dataset, const std::string& path);

// Scales every row to the median raw row-sum, then applies ln(1 + x).
ExpressionDataset Preprocess(const ExpressionDataset& dataset);

struct SplitConfig {
  std::vector<std::string> holdout_drugs;
  // (drug, covariate) pairs whose treated rows all go to test.
  std::vector<std::pair<std::string, std::string>> holdout_combos;
  double valid_fraction = 0.04;
  // Share of control rows routed to the test split.
  double control_test_fraction = 0.2;
  std::uint64_t seed = 0;
};

ExpressionDataset MakeSplit(const ExpressionDataset& dataset, const SplitConfig& config);

struct DegTable {
  int k = 50;
  std::map<std::pair<std::string, std::string>, std::vector<int>> per_combo;
  std::map<std::string, std::vector<int>> per_drug;
  std::vector<std::string> warnings;

  // Per-combination entry, falling back to the pooled per-drug entry.
  const std::vector<int>* Lookup(const std::string& drug, const std::string& covariate) const;
};

// Welch t-statistic per gene between treated rows and same-covariate control
// rows; keeps the top-k genes by |t| (ties: ascending gene index). Combinations
// with fewer than min_cells treated rows are skipped and use the pooled table.
DegTable ComputeDegs(const ExpressionDataset& dataset, int k = 50, int min_cells = 5);

// Formatting helpers shared with the other CSV writers.
std::string FormatDouble(double v);
std::string FormatScientific(double v);
double ParseDouble(std::string_view text, std::size_t line, const std::string& what);
std::vector<std::string_view> SplitCsvLine(std::string_view line);

}  // namespace chemcpa
