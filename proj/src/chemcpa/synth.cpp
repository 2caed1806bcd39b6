#include "chemcpa/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <unordered_set>

#include "chemcpa/fingerprint.hpp"
#include "chemcpa/model.hpp"

namespace chemcpa {
namespace {

#define CHEMCPA_SYNTH_FIELDS(X) \
  X(n_genes)                    \
  X(n_drugs)                    \
  X(n_covariates)               \
  X(cells_per_combo)            \
  X(controls_per_covariate)     \
  X(latent_dim)                 \
  X(fingerprint_dim)            \
  X(fingerprint_max_len)        \
  X(noise_sigma)                \
  X(seed)                       \
  X(doses)                      \
  X(basal_sd)                   \
  X(effect_scale)               \
  X(covariate_scale)            \
  X(base_log_min)               \
  X(base_log_max)               \
  X(drug_offset)                \
  X(drug_rank)

Error ConfigInvalid(const std::string& what) { return InvalidArgument("ConfigInvalid", what); }

std::string GeneName(int i) {
  std::string digits = std::to_string(i);
  return "G" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

// Straight chain of `length` carbons with optional hydroxyl and methyl
// substituents at 1-based positions.
std::string Chain(int length, const std::set<int>& hydroxyl, const std::set<int>& methyl) {
  std::string s;
  for (int i = 1; i <= length; ++i) {
    s += 'C';
    if (hydroxyl.count(i)) s += "(O)";
    if (methyl.count(i)) s += "(C)";
  }
  return s;
}

std::vector<std::string> FamilyCandidates() {
  std::vector<std::string> out;
  for (int length = 1; length <= 10; ++length) {
    std::vector<std::set<int>> oh = {{}, {1}, {length}, {1, length}};
    if (length >= 3) oh.push_back({2});
    if (length >= 4) oh.push_back({2, length});
    std::vector<std::set<int>> me = {{}};
    if (length >= 3) me.push_back({2});
    if (length >= 5) me.push_back({3});
    if (length >= 6) me.push_back({2, length - 1});
    for (const auto& h : oh) {
      for (const auto& m : me) out.push_back(Chain(length, h, m));
    }
    // Ethers: C...C-O-C...C
    for (int left = 1; left < length; ++left) {
      out.push_back(std::string(static_cast<std::size_t>(left), 'C') + "O" +
                    std::string(static_cast<std::size_t>(length - left), 'C'));
    }
  }
  return out;
}

}  // namespace

void SynthConfig::Validate() const {
  if (n_genes < 2) throw ConfigInvalid("n_genes must be >= 2");
  if (n_drugs < 0) throw ConfigInvalid("n_drugs must be >= 0");
  if (n_covariates < 1) throw ConfigInvalid("n_covariates must be >= 1");
  if (cells_per_combo < 1) throw ConfigInvalid("cells_per_combo must be >= 1");
  if (controls_per_covariate == 0 || controls_per_covariate < -1) {
    throw ConfigInvalid("controls_per_covariate must be >= 1 (or -1)");
  }
  if (latent_dim < 1) throw ConfigInvalid("latent_dim must be >= 1");
  if (fingerprint_dim < 8) throw ConfigInvalid("fingerprint_dim must be >= 8");
  if (fingerprint_max_len < 1 || fingerprint_max_len > 10) throw ConfigInvalid("fingerprint_max_len must be in [1, 10]");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigInvalid("noise_sigma must be >= 0");
  if (!(basal_sd >= 0.0) || !std::isfinite(basal_sd)) throw ConfigInvalid("basal_sd must be >= 0");
  if (!std::isfinite(effect_scale) || !std::isfinite(covariate_scale)) throw ConfigInvalid("scales must be finite");
  if (!(base_log_min <= base_log_max)) throw ConfigInvalid("base_log_min must be <= base_log_max");
  if (doses.empty()) throw ConfigInvalid("doses must not be empty");
  for (double d : doses) {
    if (!(d > 0.0) || !std::isfinite(d)) throw ConfigInvalid("doses must be positive");
  }
  if (drug_offset < 0) throw ConfigInvalid("drug_offset must be >= 0");
  if (drug_rank < 0) throw ConfigInvalid("drug_rank must be >= 0");
}

nlohmann::json SynthConfig::ToJson() const {
  nlohmann::json j;
#define X(name) j[#name] = name;
  CHEMCPA_SYNTH_FIELDS(X)
#undef X
  return j;
}

SynthConfig SynthConfig::FromJson(const nlohmann::json& j) { return FromJson(j, SynthConfig{}); }

SynthConfig SynthConfig::FromJson(const nlohmann::json& j, SynthConfig base) {
  if (!j.is_object()) throw ConfigInvalid("synth config must be a JSON object");
  SynthConfig c = base;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    try {
#define X(name)                               \
  if (key == #name) {                         \
    c.name = value.get<decltype(c.name)>();   \
    known = true;                             \
  }
      CHEMCPA_SYNTH_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception& e) {
      throw ConfigInvalid("synth field '" + key + "': " + e.what());
    }
    if (!known) throw ConfigInvalid("unknown synth field '" + key + "'");
  }
  c.Validate();
  return c;
}

#undef CHEMCPA_SYNTH_FIELDS

std::vector<std::string> MoleculeFamily(std::uint64_t seed, int fingerprint_dim, int max_len) {
  std::vector<std::string> family;
  std::set<std::vector<double>> seen;
  for (const std::string& s : FamilyCandidates()) {
    if (seen.insert(ComputeFingerprint(s, fingerprint_dim, max_len).values).second) family.push_back(s);
  }
  std::mt19937_64 rng(DeriveSeed(seed, 0xFA11));
  std::shuffle(family.begin(), family.end(), rng);
  return family;
}

Vector SynthGroundTruth::DrugLatent(const std::string& smiles, double dose) const {
  if (smiles == kControl) return Vector::Zero(drug_map.rows());
  const Fingerprint fp = ComputeFingerprint(smiles, fingerprint_dim, fingerprint_max_len);
  const Vector f = Eigen::Map<const Vector>(fp.values.data(), static_cast<Eigen::Index>(fp.values.size()));
  return drug_map * f * TransformDose(dose);
}

Vector SynthGroundTruth::MeanLogExpression(const Vector& latent, const std::vector<int>& genes) const {
  Vector out(static_cast<Eigen::Index>(genes.size()));
  for (std::size_t g = 0; g < genes.size(); ++g) {
    const Eigen::Index i = genes[g];
    out(static_cast<Eigen::Index>(g)) = gene_base(i) + decoder.row(i).dot(latent);
  }
  return out;
}

nlohmann::json SynthGroundTruth::ToJson() const {
  auto rows = [](const Matrix& m) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
      a.push_back(row);
    }
    return a;
  };
  nlohmann::json j;
  j["genes"] = gene_names;
  j["covariates"] = covariates;
  j["gene_base"] = std::vector<double>(gene_base.data(), gene_base.data() + gene_base.size());
  j["decoder"] = rows(decoder);
  j["encoder"] = rows(encoder);
  j["drug_map"] = rows(drug_map);
  j["covariate_offsets"] = rows(covariate_offsets);
  j["basal_sd"] = basal_sd;
  j["noise_sigma"] = noise_sigma;
  j["fingerprint_dim"] = fingerprint_dim;
  j["fingerprint_max_len"] = fingerprint_max_len;
  return j;
}

SynthGroundTruth MakeGroundTruth(const SynthConfig& config, int gene_universe) {
  config.Validate();
  const int n = gene_universe < 0 ? config.n_genes : gene_universe;
  if (n < 1) throw ConfigInvalid("gene universe must be non-empty");
  const int l = config.latent_dim;
  const int m = config.fingerprint_dim;

  SynthGroundTruth t;
  t.basal_sd = config.basal_sd;
  t.noise_sigma = config.noise_sigma;
  t.fingerprint_dim = m;
  t.fingerprint_max_len = config.fingerprint_max_len;
  for (int i = 0; i < n; ++i) t.gene_names.push_back(GeneName(i));
  for (int c = 0; c < config.n_covariates; ++c) t.covariates.push_back("cell_line_" + std::to_string(c));

  std::mt19937_64 rng(DeriveSeed(config.seed, 0x7207));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> base(config.base_log_min, config.base_log_max);

  t.gene_base.resize(n);
  for (int i = 0; i < n; ++i) t.gene_base(i) = base(rng);
  // Unit-variance gene responses to a unit-variance latent.
  t.decoder.resize(n, l);
  const double dec_sd = 1.0 / std::sqrt(static_cast<double>(l));
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < l; ++k) t.decoder(i, k) = normal(rng) * dec_sd;
  }
  t.encoder = t.decoder.completeOrthogonalDecomposition().pseudoInverse();

  // Scale the drug map so a typical molecule of the family moves each latent
  // coordinate by about effect_scale at the top dose.
  const std::vector<std::string> family = MoleculeFamily(config.seed, m, config.fingerprint_max_len);
  double bits = 0.0;
  for (const std::string& s : family) {
    for (double v : ComputeFingerprint(s, m, config.fingerprint_max_len).values) bits += v;
  }
  const double mean_bits = std::max(1.0, bits / static_cast<double>(family.size()));
  const double map_sd = config.effect_scale / std::sqrt(mean_bits);
  t.drug_map.resize(l, m);
  if (config.drug_rank == 0 || config.drug_rank >= l) {
    for (int k = 0; k < l; ++k) {
      for (int j = 0; j < m; ++j) t.drug_map(k, j) = normal(rng) * map_sd;
    }
  } else {
    // Responses confined to a random orthonormal r-dimensional latent subspace.
    const int r = config.drug_rank;
    Matrix g(l, r);
    for (int i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    const Matrix basis = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(l, r);
    Matrix coef(r, m);
    for (int i = 0; i < coef.size(); ++i) coef.data()[i] = normal(rng) * map_sd;
    // Rescale so the per-coordinate response size matches the full-rank case.
    t.drug_map = basis * coef * std::sqrt(static_cast<double>(l) / r);
  }

  t.covariate_offsets.resize(config.n_covariates, l);
  for (int c = 0; c < config.n_covariates; ++c) {
    for (int k = 0; k < l; ++k) t.covariate_offsets(c, k) = normal(rng) * config.covariate_scale;
  }
  return t;
}

ExpressionDataset SampleDataset(const SynthGroundTruth& truth, const SampleSpec& spec) {
  if (spec.genes.empty()) throw ConfigInvalid("sample needs at least one gene");
  for (int g : spec.genes) {
    if (g < 0 || g >= static_cast<int>(truth.gene_names.size())) throw ConfigInvalid("gene index out of range");
  }
  if (spec.cells_per_combo < 1 || spec.controls_per_covariate < 1) throw ConfigInvalid("cell counts must be >= 1");
  if (spec.doses.empty()) throw ConfigInvalid("doses must not be empty");
  std::unordered_set<std::string> unique(spec.drugs.begin(), spec.drugs.end());
  if (unique.size() != spec.drugs.size() || unique.count(std::string(kControl))) {
    throw ConfigInvalid("drug list must be distinct and must not contain CONTROL");
  }

  const int l = static_cast<int>(truth.decoder.cols());
  const auto n_cov = static_cast<int>(truth.covariates.size());
  const auto n_genes = static_cast<Eigen::Index>(spec.genes.size());

  std::vector<Vector> drug_unit;  // latent response at dose_scale 1
  for (const std::string& d : spec.drugs) drug_unit.push_back(truth.DrugLatent(d, 1e-5));

  const std::size_t total =
      static_cast<std::size_t>(n_cov) *
      (static_cast<std::size_t>(spec.controls_per_covariate) +
       spec.drugs.size() * static_cast<std::size_t>(spec.cells_per_combo));

  ExpressionDataset ds;
  for (int g : spec.genes) ds.genes.push_back(truth.gene_names[static_cast<std::size_t>(g)]);
  ds.matrix.resize(static_cast<Eigen::Index>(total), n_genes);
  ds.rows.reserve(total);

  std::mt19937_64 rng(DeriveSeed(spec.seed, 0x5A3B));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix sub_decoder(n_genes, l);
  Vector sub_base(n_genes);
  for (Eigen::Index g = 0; g < n_genes; ++g) {
    sub_decoder.row(g) = truth.decoder.row(spec.genes[static_cast<std::size_t>(g)]);
    sub_base(g) = truth.gene_base(spec.genes[static_cast<std::size_t>(g)]);
  }

  Vector z(l);
  auto emit = [&](const std::string& drug, double dose, int cov, const Vector& drug_latent) {
    for (int k = 0; k < l; ++k) z(k) = normal(rng) * truth.basal_sd;
    const Vector latent = z + drug_latent + truth.covariate_offsets.row(cov).transpose();
    Vector x = sub_base + sub_decoder * latent;
    for (Eigen::Index g = 0; g < n_genes; ++g) {
      const double noisy = x(g) + normal(rng) * truth.noise_sigma;
      x(g) = spec.counts ? std::max(1.0, std::round(std::exp(noisy))) : noisy;
    }
    ds.matrix.row(static_cast<Eigen::Index>(ds.rows.size())) = x.transpose();
    ds.rows.push_back({drug, dose, truth.covariates[static_cast<std::size_t>(cov)], Split::kTrain});
  };

  for (int c = 0; c < n_cov; ++c) {
    const Vector zero = Vector::Zero(l);
    for (int i = 0; i < spec.controls_per_covariate; ++i) emit(std::string(kControl), 0.0, c, zero);
    for (std::size_t d = 0; d < spec.drugs.size(); ++d) {
      for (int i = 0; i < spec.cells_per_combo; ++i) {
        const double dose = spec.doses[static_cast<std::size_t>(i) % spec.doses.size()];
        emit(spec.drugs[d], dose, c, drug_unit[d] * TransformDose(dose));
      }
    }
  }
  ds.state = spec.counts ? PreprocessState::kRaw : PreprocessState::kLog1p;
  ds.Validate();
  return ds;
}

std::pair<ExpressionDataset, SynthGroundTruth> SynthGenerate(const SynthConfig& config) {
  config.Validate();
  SynthGroundTruth truth = MakeGroundTruth(config);
  const std::vector<std::string> family =
      MoleculeFamily(config.seed, config.fingerprint_dim, config.fingerprint_max_len);
  if (config.drug_offset + config.n_drugs > static_cast<int>(family.size())) {
    throw ConfigInvalid("molecule family has only " + std::to_string(family.size()) + " members");
  }
  SampleSpec spec;
  spec.drugs.assign(family.begin() + config.drug_offset, family.begin() + config.drug_offset + config.n_drugs);
  for (int g = 0; g < config.n_genes; ++g) spec.genes.push_back(g);
  spec.cells_per_combo = config.cells_per_combo;
  spec.controls_per_covariate =
      config.controls_per_covariate < 0 ? config.cells_per_combo : config.controls_per_covariate;
  spec.doses = config.doses;
  spec.seed = config.seed;
  ExpressionDataset ds = SampleDataset(truth, spec);
  ds.provenance = {{"generator", "synth"}, {"config", config.ToJson()}};
  return {std::move(ds), std::move(truth)};
}

TransferPair MakeTransferPair(const TransferPairConfig& config) {
  const SynthConfig& base = config.base;
  base.Validate();
  if (!(config.gene_overlap > 0.0 && config.gene_overlap <= 1.0)) throw ConfigInvalid("gene_overlap must be in (0, 1]");
  if (config.source_drugs < 1 || config.target_drugs < 1) throw ConfigInvalid("drug counts must be >= 1");

  const int n = base.n_genes;
  const int shared = static_cast<int>(std::lround(config.gene_overlap * n));
  const int target_only = n - shared;
  TransferPair pair;
  pair.truth = MakeGroundTruth(base, n + target_only);

  const std::vector<std::string> family = MoleculeFamily(base.seed, base.fingerprint_dim, base.fingerprint_max_len);
  if (config.source_drugs + config.target_drugs > static_cast<int>(family.size())) {
    throw ConfigInvalid("molecule family has only " + std::to_string(family.size()) + " members");
  }
  pair.source_drugs.assign(family.begin(), family.begin() + config.source_drugs);
  pair.target_drugs.assign(family.begin() + config.source_drugs,
                           family.begin() + config.source_drugs + config.target_drugs);

  // Source measures genes [0, n). Target measures a random `shared` subset of
  // those plus the `target_only` genes [n, n + target_only), interleaved.
  std::vector<int> source_genes(static_cast<std::size_t>(n));
  for (int g = 0; g < n; ++g) source_genes[static_cast<std::size_t>(g)] = g;
  std::mt19937_64 rng(DeriveSeed(base.seed, 0x6E7E));
  std::vector<int> pick = source_genes;
  std::shuffle(pick.begin(), pick.end(), rng);
  std::vector<int> target_genes(pick.begin(), pick.begin() + shared);
  for (int g = 0; g < target_only; ++g) target_genes.push_back(n + g);
  std::shuffle(target_genes.begin(), target_genes.end(), rng);

  const auto n_cov = static_cast<double>(base.n_covariates);
  auto per_group = [&](int cells, int drugs) {
    return std::max(1, static_cast<int>(cells / (n_cov * (drugs + 1))));
  };

  SampleSpec src;
  src.drugs = pair.source_drugs;
  src.genes = source_genes;
  src.cells_per_combo = src.controls_per_covariate = per_group(config.source_cells, config.source_drugs);
  src.doses = base.doses;
  src.seed = DeriveSeed(base.seed, 1);
  pair.source = SampleDataset(pair.truth, src);

  SampleSpec tgt;
  tgt.drugs = pair.target_drugs;
  tgt.genes = target_genes;
  tgt.cells_per_combo = tgt.controls_per_covariate = per_group(config.target_cells, config.target_drugs);
  tgt.doses = base.doses;
  tgt.seed = DeriveSeed(base.seed, 2);
  pair.target = SampleDataset(pair.truth, tgt);

  const nlohmann::json prov = {{"generator", "synth-transfer"},
                               {"config", base.ToJson()},
                               {"source_cells", config.source_cells},
                               {"target_cells", config.target_cells},
                               {"gene_overlap", config.gene_overlap}};
  pair.source.provenance = prov;
  pair.source.provenance["role"] = "source";
  pair.target.provenance = prov;
  pair.target.provenance["role"] = "target";
  return pair;
}

}  // namespace chemcpa
