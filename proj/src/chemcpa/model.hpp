#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chemcpa/fingerprint.hpp"
#include "chemcpa/nn.hpp"

namespace chemcpa {

// Defaults follow the best configuration of the hashed-fingerprint sweep.
struct HyperParams {
  int latent_dim = 32;
  int embedding_dim = kDefaultFingerprintDim;
  int fingerprint_max_len = kDefaultMaxPathLength;

  int autoencoder_width = 256;
  int autoencoder_depth = 4;
  int adversary_width = 128;
  int adversary_depth = 3;
  int dosers_width = 64;
  int dosers_depth = 1;
  int embedding_encoder_width = 128;
  int embedding_encoder_depth = 3;

  double autoencoder_lr = 1.12e-3;
  double autoencoder_wd = 3.75e-7;
  double dosers_lr = 5.61e-4;
  double dosers_wd = 1.33e-7;
  double adversary_lr = 8.06e-4;
  double adversary_wd = 4.0e-6;

  int adversary_steps = 2;
  double reg_adversary = 24.1;     // weight of the sign-reversed classifier loss
  double penalty_adversary = 3.35;  // weight of the adversary gradient penalty
  int batch_size = 128;
  int step_size_lr = 100;
  double lr_decay = 0.5;
  double variance_eps = 1e-6;
  OptimizerKind optimizer = OptimizerKind::kAdam;

  void Validate() const;
  nlohmann::json ToJson() const;
  // Keys absent from `j` keep their defaults; unknown keys are rejected.
  static HyperParams FromJson(const nlohmann::json& j, HyperParams base);
  static HyperParams FromJson(const nlohmann::json& j);
};

// Dose in molar mapped to [0, 1]: (log10(dose) + 9) / 4, clamped.
double TransformDose(double dose_molar);

double Softplus(double x);
double Sigmoid(double x);

struct Decoded {
  Matrix mean;
  Matrix variance;
  Matrix raw_variance;
};

struct DrugLatent {
  Vector latent;
  double scale = 0.0;  // output of the dosage scaler
};

// Linear layers translating between a target gene set and the gene set the
// core network was trained on.
struct GeneAdapters {
  Mlp input;     // n_target -> n_core
  Mlp mean;      // n_core -> n_target
  Mlp variance;  // n_core -> n_target (acts on the raw variance head)
};

class ChemCpaModel {
 public:
  ChemCpaModel() = default;
  // `drugs` lists SMILES; kControl is inserted at index 0 when missing.
  ChemCpaModel(const HyperParams& hp, std::vector<std::string> genes, std::vector<std::string> drugs,
               std::vector<std::string> covariates, std::uint64_t seed);

  const HyperParams& hparams() const { return hp_; }
  HyperParams& mutable_hparams() { return hp_; }
  const std::vector<std::string>& genes() const { return genes_; }
  const std::vector<std::string>& drugs() const { return drugs_; }
  const std::vector<std::string>& covariates() const { return covariates_; }
  int num_genes() const { return static_cast<int>(genes_.size()); }
  int core_genes() const { return encoder.input_dim(); }
  int latent_dim() const { return hp_.latent_dim; }

  std::optional<int> DrugIndex(const std::string& smiles) const;
  std::optional<int> CovariateIndex(const std::string& name) const;
  // Appends unseen drugs (returns their indices); the drug adversary gains a
  // freshly initialized output row per new drug.
  void AddDrugs(const std::vector<std::string>& smiles, std::uint64_t seed);
  void AddCovariates(const std::vector<std::string>& names, std::uint64_t seed);
  void SetGenes(std::vector<std::string> genes) { genes_ = std::move(genes); }

  const MoleculeEncoder& molecule_encoder() const { return *molecule_encoder_; }
  std::vector<double> EmbedMolecule(const std::string& smiles) const;
  // Cached embedding of vocabulary entry `drug` (all zeros for kControl).
  std::span<const double> DrugEmbedding(int drug) const;

  Matrix EncodeBasal(const Matrix& x) const;
  DrugLatent ComputeDrugLatent(std::span<const double> embedding, double dose) const;
  Vector CovariateLatent(int covariate) const;
  Decoded Decode(const Matrix& latent) const;

  // Drug and covariate adversary logits for basal states.
  Matrix DrugLogits(const Matrix& basal) const { return adversary_drug.Predict(basal); }
  Matrix CovariateLogits(const Matrix& basal) const { return adversary_cov.Predict(basal); }

  // XXH64 over the raw bytes of the given parameter group.
  std::uint64_t AutoencoderHash() const;
  std::uint64_t AdversaryHash() const;
  std::uint64_t DoserHash() const;

  Mlp encoder;
  Mlp decoder;
  Mlp perturbation_encoder;  // M: scaled embedding -> latent
  Mlp dosage_scaler;         // S: [embedding, dose] -> scalar
  Mlp adversary_drug;
  Mlp adversary_cov;
  Matrix covariate_embeddings;  // covariates x latent
  std::optional<GeneAdapters> adapters;

 private:
  void RebuildEmbeddings();

  HyperParams hp_;
  std::vector<std::string> genes_;
  std::vector<std::string> drugs_;
  std::vector<std::string> covariates_;
  std::shared_ptr<const MoleculeEncoder> molecule_encoder_;
  Matrix drug_embeddings_;  // drugs x m, row-major access via DrugEmbedding
};

// Mean over batch and genes of 0.5 [ln v + (mu - x)^2 / v], v = max(var, eps).
double ReconstructionLoss(const Matrix& mean, const Matrix& variance, const Matrix& x, double eps = 1e-6);

struct ReconstructionGrad {
  double loss = 0.0;
  Matrix d_mean;
  Matrix d_variance;
};
ReconstructionGrad ReconstructionLossGrad(const Matrix& mean, const Matrix& variance, const Matrix& x,
                                          double eps = 1e-6);

// Mean softmax cross-entropy; d_logits is its gradient.
struct CrossEntropyResult {
  double loss = 0.0;
  Matrix d_logits;
};
CrossEntropyResult CrossEntropy(const Matrix& logits, std::span<const int> labels);

struct AdversaryLosses {
  double drug = 0.0;
  double covariate = 0.0;
};
AdversaryLosses ComputeAdversaryLosses(const ChemCpaModel& model, const Matrix& basal,
                                       std::span<const int> drug_labels, std::span<const int> cov_labels);

struct Batch {
  Matrix x;
  std::vector<int> drug;  // model vocabulary index, 0 = control
  std::vector<double> dose;
  std::vector<int> covariate;
};

enum class Branch { kAutoencoder, kAdversary };

struct StepReport {
  std::int64_t step = 0;
  Branch branch = Branch::kAutoencoder;
  double reconstruction = 0.0;  // autoencoder branch only
  double drug_ce = 0.0;
  double cov_ce = 0.0;
  double penalty = 0.0;  // adversary branch only
};

// Owns the three optimizers (autoencoder, dosage scaler, adversaries) and
// runs the alternating updates. The model must outlive the trainer.
class Trainer {
 public:
  explicit Trainer(ChemCpaModel& model);

  // step % adversary_steps == 0 -> adversary update, otherwise autoencoder.
  StepReport TrainStep(const Batch& batch, std::int64_t step);
  StepReport AutoencoderStep(const Batch& batch);
  StepReport AdversaryStep(const Batch& batch);
  void ScheduleStep(int epoch);

  const Optimizer& autoencoder_optimizer() const { return ae_opt_; }

 private:
  std::vector<std::span<double>> AutoencoderParams();
  std::vector<std::span<double>> AdversaryParams();

  ChemCpaModel& model_;
  Optimizer ae_opt_;
  Optimizer doser_opt_;
  Optimizer adv_opt_;
};

void CheckBatch(const ChemCpaModel& model, const Batch& batch);

}  // namespace chemcpa
