#include "chemcpa/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "chemcpa/data.hpp"
#include "chemcpa/hash.hpp"

namespace chemcpa {

// ---------------------------------------------------------------------------
// Hyperparameters

void HyperParams::Validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw InvalidArgument("InvalidHyperParameter", std::string(name) + " must be >= 1");
  };
  positive(latent_dim, "latent_dim");
  positive(embedding_dim, "embedding_dim");
  positive(autoencoder_width, "autoencoder_width");
  positive(adversary_width, "adversary_width");
  positive(dosers_width, "dosers_width");
  positive(embedding_encoder_width, "embedding_encoder_width");
  positive(adversary_steps, "adversary_steps");
  positive(batch_size, "batch_size");
  positive(step_size_lr, "step_size_lr");
  if (autoencoder_depth < 0 || adversary_depth < 0 || dosers_depth < 0 || embedding_encoder_depth < 0) {
    throw InvalidArgument("InvalidHyperParameter", "depths must be >= 0");
  }
  if (!(variance_eps > 0.0)) throw InvalidArgument("InvalidHyperParameter", "variance_eps must be > 0");
  if (!(reg_adversary >= 0.0)) throw InvalidArgument("InvalidHyperParameter", "reg_adversary must be >= 0");
  if (!(penalty_adversary >= 0.0)) throw InvalidArgument("InvalidHyperParameter", "penalty_adversary must be >= 0");
  for (double lr : {autoencoder_lr, dosers_lr, adversary_lr}) {
    if (!(lr > 0.0)) throw InvalidArgument("InvalidHyperParameter", "learning rates must be > 0");
  }
  for (double wd : {autoencoder_wd, dosers_wd, adversary_wd}) {
    if (!(wd >= 0.0)) throw InvalidArgument("InvalidHyperParameter", "weight decays must be >= 0");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw InvalidArgument("InvalidHyperParameter", "lr_decay must lie in (0, 1]");
}

#define CHEMCPA_HPARAM_FIELDS(X)                                                               \
  X(latent_dim) X(embedding_dim) X(fingerprint_max_len) X(autoencoder_width) X(autoencoder_depth) \
  X(adversary_width) X(adversary_depth) X(dosers_width) X(dosers_depth)                         \
  X(embedding_encoder_width) X(embedding_encoder_depth) X(autoencoder_lr) X(autoencoder_wd)     \
  X(dosers_lr) X(dosers_wd) X(adversary_lr) X(adversary_wd) X(adversary_steps) X(reg_adversary)  \
  X(penalty_adversary) X(batch_size) X(step_size_lr) X(lr_decay) X(variance_eps)

nlohmann::json HyperParams::ToJson() const {
  nlohmann::json j;
#define X(name) j[#name] = name;
  CHEMCPA_HPARAM_FIELDS(X)
#undef X
  j["optimizer"] = optimizer == OptimizerKind::kAdam ? "adam" : "sgd";
  return j;
}

HyperParams HyperParams::FromJson(const nlohmann::json& j) { return FromJson(j, HyperParams{}); }

HyperParams HyperParams::FromJson(const nlohmann::json& j, HyperParams base) {
  if (!j.is_object()) throw InvalidArgument("InvalidConfig", "hyperparameters must be a JSON object");
  HyperParams hp = base;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    try {
#define X(name)                      \
  if (key == #name) {                \
    hp.name = value.get<decltype(hp.name)>(); \
    known = true;                    \
  }
      CHEMCPA_HPARAM_FIELDS(X)
#undef X
      if (key == "optimizer") {
        const auto kind = value.get<std::string>();
        if (kind == "adam") {
          hp.optimizer = OptimizerKind::kAdam;
        } else if (kind == "sgd") {
          hp.optimizer = OptimizerKind::kSgd;
        } else {
          throw InvalidArgument("InvalidConfig", "optimizer must be 'adam' or 'sgd'");
        }
        known = true;
      }
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument("InvalidConfig", "hyperparameter '" + key + "': " + e.what());
    }
    if (!known) throw InvalidArgument("InvalidConfig", "unknown hyperparameter '" + key + "'");
  }
  hp.Validate();
  return hp;
}

#undef CHEMCPA_HPARAM_FIELDS

// ---------------------------------------------------------------------------
// Scalar helpers

double TransformDose(double dose_molar) {
  const double t = (std::log10(dose_molar) + 9.0) / 4.0;
  return std::clamp(t, 0.0, 1.0);
}

double Softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double Sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

Matrix SoftplusOf(const Matrix& m) { return m.unaryExpr([](double v) { return Softplus(v); }); }
Matrix SigmoidOf(const Matrix& m) { return m.unaryExpr([](double v) { return Sigmoid(v); }); }

void HashMlp(std::string& buf, const Mlp& mlp) {
  for (const Layer& l : mlp.layers()) {
    buf.append(reinterpret_cast<const char*>(l.weight.data()), sizeof(double) * l.weight.size());
    buf.append(reinterpret_cast<const char*>(l.bias.data()), sizeof(double) * l.bias.size());
  }
}

Matrix NormalMatrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return m;
}

enum SeedStream : std::uint64_t {
  kEncoderStream = 1,
  kDecoderStream,
  kPerturbationStream,
  kDoserStream,
  kAdvDrugStream,
  kAdvCovStream,
  kCovariateStream,
};

}  // namespace

// ---------------------------------------------------------------------------
// Model

ChemCpaModel::ChemCpaModel(const HyperParams& hp, std::vector<std::string> genes,
                           std::vector<std::string> drugs, std::vector<std::string> covariates,
                           std::uint64_t seed)
    : hp_(hp), genes_(std::move(genes)), covariates_(std::move(covariates)) {
  hp_.Validate();
  if (genes_.empty()) throw InvalidArgument("InvalidModel", "model needs at least one gene");
  if (covariates_.empty()) throw InvalidArgument("InvalidModel", "model needs at least one covariate");
  drugs_.push_back(std::string(kControl));
  for (std::string& d : drugs) {
    if (d != kControl && std::find(drugs_.begin(), drugs_.end(), d) == drugs_.end()) drugs_.push_back(std::move(d));
  }
  molecule_encoder_ = std::make_shared<HashedPathEncoder>(hp_.embedding_dim, hp_.fingerprint_max_len);

  const int n = num_genes();
  const int l = hp_.latent_dim;
  const int m = hp_.embedding_dim;
  encoder = Mlp(Mlp::Sizes(n, hp_.autoencoder_width, hp_.autoencoder_depth, l), DeriveSeed(seed, kEncoderStream));
  decoder = Mlp(Mlp::Sizes(l, hp_.autoencoder_width, hp_.autoencoder_depth, 2 * n), DeriveSeed(seed, kDecoderStream));
  perturbation_encoder = Mlp(Mlp::Sizes(m, hp_.embedding_encoder_width, hp_.embedding_encoder_depth, l),
                             DeriveSeed(seed, kPerturbationStream));
  dosage_scaler = Mlp(Mlp::Sizes(m + 1, hp_.dosers_width, hp_.dosers_depth, 1), DeriveSeed(seed, kDoserStream));
  adversary_drug = Mlp(Mlp::Sizes(l, hp_.adversary_width, hp_.adversary_depth, static_cast<int>(drugs_.size())),
                       DeriveSeed(seed, kAdvDrugStream));
  adversary_cov = Mlp(Mlp::Sizes(l, hp_.adversary_width, hp_.adversary_depth, static_cast<int>(covariates_.size())),
                      DeriveSeed(seed, kAdvCovStream));
  covariate_embeddings = NormalMatrix(static_cast<Eigen::Index>(covariates_.size()), l, DeriveSeed(seed, kCovariateStream));
  RebuildEmbeddings();
}

void ChemCpaModel::RebuildEmbeddings() {
  const int m = hp_.embedding_dim;
  drug_embeddings_ = Matrix::Zero(m, static_cast<Eigen::Index>(drugs_.size()));
  for (std::size_t i = 1; i < drugs_.size(); ++i) {
    const auto h = molecule_encoder_->Encode(drugs_[i]);
    drug_embeddings_.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Vector>(h.data(), m);
  }
}

std::optional<int> ChemCpaModel::DrugIndex(const std::string& smiles) const {
  auto it = std::find(drugs_.begin(), drugs_.end(), smiles);
  if (it == drugs_.end()) return std::nullopt;
  return static_cast<int>(it - drugs_.begin());
}

std::optional<int> ChemCpaModel::CovariateIndex(const std::string& name) const {
  auto it = std::find(covariates_.begin(), covariates_.end(), name);
  if (it == covariates_.end()) return std::nullopt;
  return static_cast<int>(it - covariates_.begin());
}

void ChemCpaModel::AddDrugs(const std::vector<std::string>& smiles, std::uint64_t seed) {
  std::vector<std::string> fresh;
  for (const std::string& s : smiles) {
    if (s == kControl || DrugIndex(s) || std::find(fresh.begin(), fresh.end(), s) != fresh.end()) continue;
    molecule_encoder_->Encode(s);  // reject unparseable SMILES before mutating anything
    fresh.push_back(s);
  }
  if (fresh.empty()) return;
  Layer& last = adversary_drug.mutable_layers().back();
  const Eigen::Index old_rows = last.weight.rows();
  const Eigen::Index add = static_cast<Eigen::Index>(fresh.size());
  std::mt19937_64 rng(DeriveSeed(seed, kAdvDrugStream));
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(last.weight.cols()));
  Matrix w(old_rows + add, last.weight.cols());
  Vector b(old_rows + add);
  w.topRows(old_rows) = last.weight;
  b.head(old_rows) = last.bias;
  for (Eigen::Index i = old_rows; i < old_rows + add; ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = bound * dist(rng);
    b[i] = bound * dist(rng);
  }
  last.weight = std::move(w);
  last.bias = std::move(b);
  for (std::string& s : fresh) drugs_.push_back(std::move(s));
  RebuildEmbeddings();
}

void ChemCpaModel::AddCovariates(const std::vector<std::string>& names, std::uint64_t seed) {
  std::vector<std::string> fresh;
  for (const std::string& s : names) {
    if (!CovariateIndex(s) && std::find(fresh.begin(), fresh.end(), s) == fresh.end()) fresh.push_back(s);
  }
  if (fresh.empty()) return;
  const Eigen::Index old_rows = covariate_embeddings.rows();
  const Eigen::Index add = static_cast<Eigen::Index>(fresh.size());
  Matrix table(old_rows + add, covariate_embeddings.cols());
  table.topRows(old_rows) = covariate_embeddings;
  table.bottomRows(add) = NormalMatrix(add, covariate_embeddings.cols(), DeriveSeed(seed, kCovariateStream));
  covariate_embeddings = std::move(table);

  Layer& last = adversary_cov.mutable_layers().back();
  std::mt19937_64 rng(DeriveSeed(seed, kAdvCovStream));
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(last.weight.cols()));
  Matrix w(old_rows + add, last.weight.cols());
  Vector b(old_rows + add);
  w.topRows(old_rows) = last.weight;
  b.head(old_rows) = last.bias;
  for (Eigen::Index i = old_rows; i < old_rows + add; ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = bound * dist(rng);
    b[i] = bound * dist(rng);
  }
  last.weight = std::move(w);
  last.bias = std::move(b);
  for (std::string& s : fresh) covariates_.push_back(std::move(s));
}

std::vector<double> ChemCpaModel::EmbedMolecule(const std::string& smiles) const {
  if (auto idx = DrugIndex(smiles)) {
    auto span = DrugEmbedding(*idx);
    return {span.begin(), span.end()};
  }
  return molecule_encoder_->Encode(smiles);
}

std::span<const double> ChemCpaModel::DrugEmbedding(int drug) const {
  if (drug < 0 || drug >= drug_embeddings_.cols()) {
    throw DataError("UnknownDrug", "drug index " + std::to_string(drug) + " out of range");
  }
  return {drug_embeddings_.col(drug).data(), static_cast<std::size_t>(drug_embeddings_.rows())};
}

Matrix ChemCpaModel::EncodeBasal(const Matrix& x) const {
  if (x.cols() != num_genes()) {
    throw DimensionMismatch("expression width " + std::to_string(x.cols()) + " != model genes " +
                            std::to_string(num_genes()));
  }
  if (adapters) return encoder.Predict(adapters->input.Predict(x));
  return encoder.Predict(x);
}

DrugLatent ChemCpaModel::ComputeDrugLatent(std::span<const double> embedding, double dose) const {
  if (static_cast<int>(embedding.size()) != hp_.embedding_dim) {
    throw DimensionMismatch("molecule embedding has length " + std::to_string(embedding.size()));
  }
  if (!(dose >= 0.0) || !std::isfinite(dose)) throw InvalidArgument("NegativeDose", "dose must be finite and >= 0");
  DrugLatent out;
  out.latent = Vector::Zero(hp_.latent_dim);
  if (dose == 0.0) return out;
  Matrix s_in(1, hp_.embedding_dim + 1);
  for (int j = 0; j < hp_.embedding_dim; ++j) s_in(0, j) = embedding[j];
  s_in(0, hp_.embedding_dim) = TransformDose(dose);
  out.scale = dosage_scaler.Predict(s_in)(0, 0);
  Matrix m_in = out.scale * s_in.leftCols(hp_.embedding_dim);
  out.latent = perturbation_encoder.Predict(m_in).row(0).transpose();
  return out;
}

Vector ChemCpaModel::CovariateLatent(int covariate) const {
  if (covariate < 0 || covariate >= covariate_embeddings.rows()) {
    throw DataError("UnknownCovariate", "covariate index " + std::to_string(covariate) + " out of range");
  }
  return covariate_embeddings.row(covariate).transpose();
}

Decoded ChemCpaModel::Decode(const Matrix& latent) const {
  if (latent.cols() != hp_.latent_dim) throw DimensionMismatch("latent width does not match the model");
  const Matrix out = decoder.Predict(latent);
  const Eigen::Index nc = out.cols() / 2;
  Decoded d;
  if (adapters) {
    d.mean = adapters->mean.Predict(out.leftCols(nc));
    d.raw_variance = adapters->variance.Predict(out.rightCols(nc));
  } else {
    d.mean = out.leftCols(nc);
    d.raw_variance = out.rightCols(nc);
  }
  d.variance = SoftplusOf(d.raw_variance);
  return d;
}

std::uint64_t ChemCpaModel::AutoencoderHash() const {
  std::string buf;
  HashMlp(buf, encoder);
  HashMlp(buf, decoder);
  HashMlp(buf, perturbation_encoder);
  buf.append(reinterpret_cast<const char*>(covariate_embeddings.data()),
             sizeof(double) * covariate_embeddings.size());
  if (adapters) {
    HashMlp(buf, adapters->input);
    HashMlp(buf, adapters->mean);
    HashMlp(buf, adapters->variance);
  }
  return Xxh64(buf);
}

std::uint64_t ChemCpaModel::AdversaryHash() const {
  std::string buf;
  HashMlp(buf, adversary_drug);
  HashMlp(buf, adversary_cov);
  return Xxh64(buf);
}

std::uint64_t ChemCpaModel::DoserHash() const {
  std::string buf;
  HashMlp(buf, dosage_scaler);
  return Xxh64(buf);
}

// ---------------------------------------------------------------------------
// Losses

double ReconstructionLoss(const Matrix& mean, const Matrix& variance, const Matrix& x, double eps) {
  return ReconstructionLossGrad(mean, variance, x, eps).loss;
}

ReconstructionGrad ReconstructionLossGrad(const Matrix& mean, const Matrix& variance, const Matrix& x,
                                          double eps) {
  if (mean.rows() != x.rows() || mean.cols() != x.cols() || variance.rows() != x.rows() ||
      variance.cols() != x.cols()) {
    throw DimensionMismatch("reconstruction loss operands differ in shape");
  }
  if (x.size() == 0) throw DimensionMismatch("reconstruction loss on an empty batch");
  const double scale = 1.0 / static_cast<double>(x.size());
  ReconstructionGrad out;
  out.d_mean.resize(x.rows(), x.cols());
  out.d_variance.resize(x.rows(), x.cols());
  double total = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double var = variance(i, j);
      const bool clamped = !(var > eps);
      const double v = clamped ? eps : var;
      const double r = mean(i, j) - x(i, j);
      total += 0.5 * (std::log(v) + r * r / v);
      out.d_mean(i, j) = scale * r / v;
      out.d_variance(i, j) = clamped ? 0.0 : scale * 0.5 * (1.0 / v - r * r / (v * v));
    }
  }
  out.loss = total * scale;
  return out;
}

CrossEntropyResult CrossEntropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw DimensionMismatch("label count does not match logits");
  }
  CrossEntropyResult out;
  out.d_logits.resize(logits.rows(), logits.cols());
  const double inv = logits.rows() > 0 ? 1.0 / static_cast<double>(logits.rows()) : 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) {
      throw DataError("LabelOutOfRange", "label " + std::to_string(y) + " outside [0, " +
                                             std::to_string(logits.cols()) + ")");
    }
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    total += std::log(z) + mx - logits(i, y);
    out.d_logits.row(i) = e / z;
    out.d_logits(i, y) -= 1.0;
  }
  out.d_logits *= inv;
  out.loss = total * inv;
  return out;
}

AdversaryLosses ComputeAdversaryLosses(const ChemCpaModel& model, const Matrix& basal,
                                       std::span<const int> drug_labels, std::span<const int> cov_labels) {
  if (basal.cols() != model.latent_dim()) throw DimensionMismatch("basal width does not match the model");
  return {CrossEntropy(model.DrugLogits(basal), drug_labels).loss,
          CrossEntropy(model.CovariateLogits(basal), cov_labels).loss};
}

// ---------------------------------------------------------------------------
// Training

void CheckBatch(const ChemCpaModel& model, const Batch& batch) {
  const std::size_t b = static_cast<std::size_t>(batch.x.rows());
  if (b == 0) throw DimensionMismatch("empty batch");
  if (batch.drug.size() != b || batch.dose.size() != b || batch.covariate.size() != b) {
    throw DimensionMismatch("batch annotation lengths differ from the row count");
  }
  if (batch.x.cols() != model.num_genes()) throw DimensionMismatch("batch gene width does not match the model");
  for (std::size_t i = 0; i < b; ++i) {
    if (batch.drug[i] < 0 || batch.drug[i] >= static_cast<int>(model.drugs().size())) {
      throw DataError("LabelOutOfRange", "drug label out of range");
    }
    if (batch.covariate[i] < 0 || batch.covariate[i] >= static_cast<int>(model.covariates().size())) {
      throw DataError("UnknownCovariate", "covariate label out of range");
    }
    if (!(batch.dose[i] >= 0.0)) throw InvalidArgument("NegativeDose", "dose must be >= 0");
    if ((batch.drug[i] == 0) != (batch.dose[i] == 0.0)) {
      throw DataError("InvalidDose", "control rows need dose 0 and treated rows dose > 0");
    }
  }
}

Trainer::Trainer(ChemCpaModel& model) : model_(model) {
  const HyperParams& hp = model.hparams();
  auto make = [&](double lr, double wd) {
    OptimizerConfig c;
    c.kind = hp.optimizer;
    c.learning_rate = lr;
    c.weight_decay = wd;
    c.step_size = hp.step_size_lr;
    c.decay_factor = hp.lr_decay;
    return Optimizer(c);
  };
  ae_opt_ = make(hp.autoencoder_lr, hp.autoencoder_wd);
  doser_opt_ = make(hp.dosers_lr, hp.dosers_wd);
  adv_opt_ = make(hp.adversary_lr, hp.adversary_wd);
}

std::vector<std::span<double>> Trainer::AutoencoderParams() {
  std::vector<std::span<double>> p;
  auto add = [&](Mlp& mlp) {
    auto s = mlp.ParameterSpans();
    p.insert(p.end(), s.begin(), s.end());
  };
  add(model_.encoder);
  add(model_.decoder);
  add(model_.perturbation_encoder);
  p.emplace_back(model_.covariate_embeddings.data(), static_cast<std::size_t>(model_.covariate_embeddings.size()));
  if (model_.adapters) {
    add(model_.adapters->input);
    add(model_.adapters->mean);
    add(model_.adapters->variance);
  }
  return p;
}

std::vector<std::span<double>> Trainer::AdversaryParams() {
  auto p = model_.adversary_drug.ParameterSpans();
  auto q = model_.adversary_cov.ParameterSpans();
  p.insert(p.end(), q.begin(), q.end());
  return p;
}

void Trainer::ScheduleStep(int epoch) {
  ae_opt_.ScheduleStep(epoch);
  doser_opt_.ScheduleStep(epoch);
  adv_opt_.ScheduleStep(epoch);
}

StepReport Trainer::TrainStep(const Batch& batch, std::int64_t step) {
  StepReport r = step % model_.hparams().adversary_steps == 0 ? AdversaryStep(batch) : AutoencoderStep(batch);
  r.step = step;
  return r;
}

StepReport Trainer::AdversaryStep(const Batch& batch) {
  CheckBatch(model_, batch);
  const double lambda_pen = model_.hparams().penalty_adversary;
  const Matrix z = model_.EncodeBasal(batch.x);

  StepReport report;
  report.branch = Branch::kAdversary;

  auto adversary_grads = [&](const Mlp& adv, std::span<const int> labels, double& ce, double& pen) {
    ForwardPass pass = adv.Forward(z);
    CrossEntropyResult ce_res = CrossEntropy(pass.output, labels);
    ce = ce_res.loss;
    MlpGradients g = Backward(adv, pass.tape, ce_res.d_logits).params;
    pen = InputGradientNorm(adv, z).mean();
    if (lambda_pen > 0.0) {
      MlpGradients pg = PenaltyParameterGrads(adv, z);
      pg *= lambda_pen;
      g += pg;
    }
    return g;
  };
  double pen_drug = 0.0;
  double pen_cov = 0.0;
  const MlpGradients g_drug = adversary_grads(model_.adversary_drug, batch.drug, report.drug_ce, pen_drug);
  const MlpGradients g_cov = adversary_grads(model_.adversary_cov, batch.covariate, report.cov_ce, pen_cov);
  report.penalty = pen_drug + pen_cov;

  auto grads = g_drug.Spans();
  auto cov_spans = g_cov.Spans();
  grads.insert(grads.end(), cov_spans.begin(), cov_spans.end());
  const auto params = AdversaryParams();
  adv_opt_.Step(params, grads);
  return report;
}

StepReport Trainer::AutoencoderStep(const Batch& batch) {
  CheckBatch(model_, batch);
  const HyperParams& hp = model_.hparams();
  const Eigen::Index B = batch.x.rows();
  const int l = hp.latent_dim;
  const int m = hp.embedding_dim;

  // Encoder (through the input adapter when present).
  std::optional<ForwardPass> in_pass;
  if (model_.adapters) in_pass = model_.adapters->input.Forward(batch.x);
  const ForwardPass enc_pass = model_.encoder.Forward(in_pass ? in_pass->output : batch.x);
  const Matrix& z = enc_pass.output;

  // Drug latents for treated rows only; controls contribute zero.
  std::vector<Eigen::Index> treated;
  for (Eigen::Index i = 0; i < B; ++i) {
    if (batch.dose[static_cast<std::size_t>(i)] > 0.0) treated.push_back(i);
  }
  const Eigen::Index T = static_cast<Eigen::Index>(treated.size());
  Matrix embed(T, m);
  Matrix s_in(T, m + 1);
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto h = model_.DrugEmbedding(batch.drug[static_cast<std::size_t>(treated[t])]);
    for (int j = 0; j < m; ++j) embed(t, j) = h[j];
    s_in.row(t).head(m) = embed.row(t);
    s_in(t, m) = TransformDose(batch.dose[static_cast<std::size_t>(treated[t])]);
  }
  std::optional<ForwardPass> s_pass;
  std::optional<ForwardPass> m_pass;
  Matrix z_prime = z;
  if (T > 0) {
    s_pass = model_.dosage_scaler.Forward(s_in);
    const Matrix m_in = embed.array().colwise() * s_pass->output.col(0).array();
    m_pass = model_.perturbation_encoder.Forward(m_in);
    for (Eigen::Index t = 0; t < T; ++t) z_prime.row(treated[t]) += m_pass->output.row(t);
  }
  for (Eigen::Index i = 0; i < B; ++i) {
    z_prime.row(i) += model_.covariate_embeddings.row(batch.covariate[static_cast<std::size_t>(i)]);
  }

  // Decoder and its output heads.
  const ForwardPass dec_pass = model_.decoder.Forward(z_prime);
  const Eigen::Index nc = dec_pass.output.cols() / 2;
  std::optional<ForwardPass> mean_pass;
  std::optional<ForwardPass> var_pass;
  Matrix mean;
  Matrix raw;
  if (model_.adapters) {
    mean_pass = model_.adapters->mean.Forward(dec_pass.output.leftCols(nc));
    var_pass = model_.adapters->variance.Forward(dec_pass.output.rightCols(nc));
    mean = mean_pass->output;
    raw = var_pass->output;
  } else {
    mean = dec_pass.output.leftCols(nc);
    raw = dec_pass.output.rightCols(nc);
  }
  const Matrix variance = SoftplusOf(raw);
  ReconstructionGrad rec = ReconstructionLossGrad(mean, variance, batch.x, hp.variance_eps);
  Matrix d_raw = rec.d_variance.cwiseProduct(SigmoidOf(raw));

  MlpGradients g_mean_adapter;
  MlpGradients g_var_adapter;
  Matrix d_dec_out(B, 2 * nc);
  if (model_.adapters) {
    BackwardResult bm = Backward(model_.adapters->mean, mean_pass->tape, rec.d_mean);
    BackwardResult bv = Backward(model_.adapters->variance, var_pass->tape, d_raw);
    g_mean_adapter = std::move(bm.params);
    g_var_adapter = std::move(bv.params);
    d_dec_out << bm.input_grad, bv.input_grad;
  } else {
    d_dec_out << rec.d_mean, d_raw;
  }
  BackwardResult dec_back = Backward(model_.decoder, dec_pass.tape, d_dec_out);
  const Matrix& d_zprime = dec_back.input_grad;

  // Sign-reversed classifier terms reach the encoder through z only.
  const ForwardPass adv_d = model_.adversary_drug.Forward(z);
  const ForwardPass adv_c = model_.adversary_cov.Forward(z);
  const CrossEntropyResult ce_d = CrossEntropy(adv_d.output, batch.drug);
  const CrossEntropyResult ce_c = CrossEntropy(adv_c.output, batch.covariate);
  Matrix d_z = d_zprime;
  if (hp.reg_adversary > 0.0) {
    d_z -= hp.reg_adversary * Backward(model_.adversary_drug, adv_d.tape, ce_d.d_logits).input_grad;
    d_z -= hp.reg_adversary * Backward(model_.adversary_cov, adv_c.tape, ce_c.d_logits).input_grad;
  }
  BackwardResult enc_back = Backward(model_.encoder, enc_pass.tape, d_z);
  MlpGradients g_in_adapter;
  if (model_.adapters) g_in_adapter = Backward(model_.adapters->input, in_pass->tape, enc_back.input_grad).params;

  // Perturbation encoder and dosage scaler.
  MlpGradients g_pert = model_.perturbation_encoder.ZeroGradients();
  MlpGradients g_doser = model_.dosage_scaler.ZeroGradients();
  if (T > 0) {
    Matrix d_zd(T, l);
    for (Eigen::Index t = 0; t < T; ++t) d_zd.row(t) = d_zprime.row(treated[t]);
    BackwardResult m_back = Backward(model_.perturbation_encoder, m_pass->tape, d_zd);
    g_pert = std::move(m_back.params);
    const Matrix d_scale = m_back.input_grad.cwiseProduct(embed).rowwise().sum();
    g_doser = Backward(model_.dosage_scaler, s_pass->tape, d_scale).params;
  }

  Matrix g_cov = Matrix::Zero(model_.covariate_embeddings.rows(), model_.covariate_embeddings.cols());
  for (Eigen::Index i = 0; i < B; ++i) g_cov.row(batch.covariate[static_cast<std::size_t>(i)]) += d_zprime.row(i);

  std::vector<std::span<const double>> grads;
  auto add = [&](const MlpGradients& g) {
    auto s = g.Spans();
    grads.insert(grads.end(), s.begin(), s.end());
  };
  add(enc_back.params);
  add(dec_back.params);
  add(g_pert);
  grads.emplace_back(g_cov.data(), static_cast<std::size_t>(g_cov.size()));
  if (model_.adapters) {
    add(g_in_adapter);
    add(g_mean_adapter);
    add(g_var_adapter);
  }
  const auto params = AutoencoderParams();
  ae_opt_.Step(params, grads);
  const auto doser_params = model_.dosage_scaler.ParameterSpans();
  doser_opt_.Step(doser_params, g_doser.Spans());

  StepReport report;
  report.branch = Branch::kAutoencoder;
  report.reconstruction = rec.loss;
  report.drug_ce = ce_d.loss;
  report.cov_ce = ce_c.loss;
  return report;
}

}  // namespace chemcpa
