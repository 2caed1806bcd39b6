#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chemcpa/data.hpp"

namespace chemcpa {

struct SynthConfig {
  int n_genes = 60;
  int n_drugs = 12;
  int n_covariates = 3;
  int cells_per_combo = 200;        // per (drug, covariate); spread evenly over `doses`
  int controls_per_covariate = -1;  // -1: same as cells_per_combo
  int latent_dim = 16;
  int fingerprint_dim = 200;
  int fingerprint_max_len = 7;
  double noise_sigma = 0.05;  // Gaussian noise on log expression
  std::uint64_t seed = 0;
  std::vector<double> doses = {1e-8, 1e-7, 1e-6, 1e-5};

  double basal_sd = 0.5;
  double effect_scale = 1.5;  // typical per-gene drug shift at the top dose
  double covariate_scale = 0.5;
  double base_log_min = 2.5;
  double base_log_max = 4.5;
  int drug_offset = 0;  // first molecule taken from the shuffled family
  int drug_rank = 0;    // rank of the drug map; 0 = full rank

  void Validate() const;
  nlohmann::json ToJson() const;
  static SynthConfig FromJson(const nlohmann::json& j, SynthConfig base);
  static SynthConfig FromJson(const nlohmann::json& j);
};

// Planted generative model. Log expression of a cell is
//   base + decoder * (z + drug_map * fp(drug) * dose_scale + covariate_offset) + noise,
// with z ~ N(0, basal_sd^2 I) and dose_scale = TransformDose(dose).
struct SynthGroundTruth {
  std::vector<std::string> gene_names;  // full gene universe
  Vector gene_base;                     // universe
  Matrix decoder;                       // universe x latent
  Matrix encoder;                       // latent x universe, pseudo-inverse of decoder
  Matrix drug_map;                      // latent x fingerprint_dim
  Matrix covariate_offsets;             // covariates x latent
  std::vector<std::string> covariates;
  double basal_sd = 0.5;
  double noise_sigma = 0.05;
  int fingerprint_dim = 200;
  int fingerprint_max_len = 7;

  Vector DrugLatent(const std::string& smiles, double dose) const;
  // Expected log expression over the listed genes for latent state z'.
  Vector MeanLogExpression(const Vector& latent, const std::vector<int>& genes) const;
  nlohmann::json ToJson() const;
};

struct SampleSpec {
  std::vector<std::string> drugs;
  std::vector<int> genes;  // indices into the ground-truth gene universe
  int cells_per_combo = 200;
  int controls_per_covariate = 200;
  std::vector<double> doses = {1e-8, 1e-7, 1e-6, 1e-5};
  std::uint64_t seed = 0;
  bool counts = true;  // exponentiate and round to counts; else emit log expression
};

// Distinct-fingerprint alkane/alcohol family, shuffled by `seed`.
std::vector<std::string> MoleculeFamily(std::uint64_t seed, int fingerprint_dim = 200, int max_len = 7);

SynthGroundTruth MakeGroundTruth(const SynthConfig& config, int gene_universe = -1);
ExpressionDataset SampleDataset(const SynthGroundTruth& truth, const SampleSpec& spec);

// Ground truth over config.n_genes genes plus one raw-count dataset drawn from it.
std::pair<ExpressionDataset, SynthGroundTruth> SynthGenerate(const SynthConfig& config);

struct TransferPairConfig {
  SynthConfig base;  // latent model, covariates, noise and seed
  int source_drugs = 20;
  int source_cells = 8000;
  int target_drugs = 6;
  int target_cells = 1200;
  double gene_overlap = 0.6;  // fraction of target genes also measured in the source
};

struct TransferPair {
  ExpressionDataset source;
  ExpressionDataset target;
  SynthGroundTruth truth;
  std::vector<std::string> source_drugs;
  std::vector<std::string> target_drugs;
};

// Source and target share the latent model but have disjoint drug lists and
// partially overlapping gene sets (both with base.n_genes genes).
TransferPair MakeTransferPair(const TransferPairConfig& config);

}  // namespace chemcpa
