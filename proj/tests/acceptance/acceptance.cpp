// Acceptance suite. Prints one PASS/FAIL line per criterion; exits non-zero
// when any selected criterion fails.
//
//   acceptance            run all criteria
//   acceptance 3 5        run a subset

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chemcpa/eval.hpp"
#include "chemcpa/fingerprint.hpp"
#include "chemcpa/nn.hpp"
#include "chemcpa/smiles.hpp"
#include "chemcpa/synth.hpp"
#include "chemcpa/training.hpp"
#include "chemcpa/transfer.hpp"
#include "finite_diff.hpp"
#include "respell.hpp"

using namespace chemcpa;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-5;
constexpr double kPenaltyTol = 1e-4;
constexpr double kKinkMargin = 1e-3;
constexpr double kLossTol = 1e-12;
constexpr double kCeTol = 1e-6;
constexpr double kSeenR2 = 0.90;
constexpr double kUnseenGap = 0.10;
constexpr double kProbeSlack = 0.10;
constexpr double kFinetuneLrScale = 0.2;
constexpr int kTransferWins = 4;
constexpr double kSurgeryTol = 1e-8;
constexpr int kDeterminismSteps = 200;
constexpr int kFuzzInputs = 1000000;
constexpr int kRespellings = 1000;
constexpr double kBudget1 = 60, kBudget3 = 600, kBudget4 = 1800, kBudget6 = 2700;

struct Result {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double Seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double Median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Reduced widths for single-core runtime budgets. The adversary learning rate
// is raised and lambda lowered so the adversary keeps up on this data.
HyperParams TrainingHp() {
  HyperParams hp;
  hp.latent_dim = 16;
  hp.autoencoder_width = 128;
  hp.autoencoder_depth = 2;
  hp.adversary_width = 64;
  hp.adversary_depth = 2;
  hp.embedding_encoder_width = 64;
  hp.embedding_encoder_depth = 2;
  hp.adversary_lr = 3e-3;
  hp.reg_adversary = 1.0;
  return hp;
}

// Probe runs: linear adversaries, which a ReLU encoder cannot silence by
// driving their hidden units dead.
HyperParams ProbeHp(double reg) {
  HyperParams hp = TrainingHp();
  hp.adversary_depth = 0;
  hp.reg_adversary = reg;
  return hp;
}

// 1 -------------------------------------------------------------------------

Result GradientFidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  double worst_grad = 0, worst_pen = 0;
  int params = 0;
  constexpr int kNets = 24;
  for (int n = 0; n < kNets; ++n) {
    const int layers = 1 + static_cast<int>(rng() % 4);
    std::vector<int> sizes = {1 + static_cast<int>(rng() % 16)};
    for (int k = 1; k < layers; ++k) sizes.push_back(1 + static_cast<int>(rng() % 64));
    sizes.push_back(1 + static_cast<int>(rng() % 16));
    Mlp mlp(sizes, rng());
    const int batch = 1 + static_cast<int>(rng() % 6);
    Matrix x = oracle::RandomMatrix(batch, sizes.front(), rng);
    while (oracle::KinkMargin(mlp, x) < kKinkMargin) x = oracle::RandomMatrix(batch, sizes.front(), rng);
    const Matrix r = oracle::RandomMatrix(batch, sizes.back(), rng);

    const auto g = Backward(mlp, mlp.Forward(x).tape, r);
    const auto check = oracle::CompareWithFd(
        mlp, g.params, [&](const Mlp& m) { return m.Predict(x).cwiseProduct(r).sum(); });
    worst_grad = std::max(worst_grad, check.max_rel_error);
    params += check.checked;

    const auto pg = PenaltyParameterGrads(mlp, x);
    const auto pcheck =
        oracle::CompareWithFd(mlp, pg, [&](const Mlp& m) { return InputGradientNorm(m, x).mean(); });
    worst_pen = std::max(worst_pen, pcheck.max_rel_error);
  }
  const double s = Seconds(t0);
  return {worst_grad < kGradTol && worst_pen < kPenaltyTol && s < kBudget1,
          Fmt("%d nets, %d params: max rel err backward %.2e (tol %.0e), penalty %.2e (tol %.0e)", kNets, params,
              worst_grad, kGradTol, worst_pen, kPenaltyTol)};
}

// 2 -------------------------------------------------------------------------

Result LossValues() {
  Matrix x(2, 3), zero = Matrix::Zero(2, 3), one = Matrix::Ones(2, 3);
  x << 0.3, -1.0, 2.5, 4.0, 0.0, -7.0;
  const double a = ReconstructionLoss(x, one, x);
  const double b = ReconstructionLoss(zero, one, Matrix::Constant(2, 3, 2.0));
  const double c = ReconstructionLoss(x, zero, x);
  const double err_rec = std::max({std::abs(a), std::abs(b - 2.0), std::abs(c - 0.5 * std::log(1e-6))});

  double err_ce = 0;
  for (int k : {2, 3, 10, 977}) {
    const Matrix logits = Matrix::Constant(4, k, 0.37);
    const std::vector<int> labels = {0, k - 1, k / 2, 1 % k};
    err_ce = std::max(err_ce, std::abs(CrossEntropy(logits, labels).loss - std::log(k)));
  }
  Matrix two(1, 2);
  two << 2.0, 0.0;
  const std::vector<int> label0 = {0};
  err_ce = std::max(err_ce, std::abs(CrossEntropy(two, label0).loss - std::log1p(std::exp(-2.0))));
  Matrix sure(1, 3);
  sure << 60.0, 0.0, 0.0;
  err_ce = std::max(err_ce, std::abs(CrossEntropy(sure, label0).loss));
  return {err_rec <= kLossTol && err_ce <= kCeTol,
          Fmt("reconstruction max err %.1e (tol %.0e); cross-entropy max err %.1e (tol %.0e)", err_rec, kLossTol,
              err_ce, kCeTol)};
}

// 3 -------------------------------------------------------------------------

Result SeenDrugRecovery() {
  const auto t0 = std::chrono::steady_clock::now();
  SynthConfig sc;  // 60 genes, 12 drugs, 3 covariates, 200 cells, l=16, sigma 0.05, seed 0
  auto [raw, truth] = SynthGenerate(sc);
  ExpressionDataset ds = Preprocess(raw);
  const auto drugs = ds.Drugs();
  const auto covs = ds.Covariates();
  SplitConfig split;
  for (std::size_t i = 1; i < drugs.size(); ++i) split.holdout_combos.push_back({drugs[i], covs[i % covs.size()]});
  ds = MakeSplit(ds, split);
  ChemCpaModel model(TrainingHp(), ds.genes, ds.Drugs(), ds.Covariates(), 0);
  FitOptions fo;
  fo.epochs = 150;
  fo.eval_every = 0;
  Fit(model, ds, fo);
  const auto report = Evaluate(model, ds, ComputeDegs(ds));
  const Aggregate* m = report.Find("model", std::nullopt);
  const Aggregate* b = report.Find("baseline", std::nullopt);
  const double s = Seconds(t0);
  return {m->mean_r2_all >= kSeenR2 && s < kBudget3,
          Fmt("mean r2 (all genes) over %d held-out combos %.4f (need >= %.2f; baseline %.4f), %d epochs", m->count,
              m->mean_r2_all, kSeenR2, b->mean_r2_all, fo.epochs)};
}

// 4 -------------------------------------------------------------------------

Result UnseenDrugGeneralization() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> gaps, models, bases;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthConfig sc;
    sc.seed = seed;
    auto [raw, truth] = SynthGenerate(sc);
    ExpressionDataset ds = Preprocess(raw);
    const auto drugs = ds.Drugs();
    SplitConfig split;
    split.seed = seed;
    split.holdout_drugs = {drugs[1], drugs[2], drugs[3]};
    ds = MakeSplit(ds, split);
    ChemCpaModel model(TrainingHp(), ds.genes, ds.Drugs(), ds.Covariates(), seed);
    FitOptions fo;
    fo.epochs = 150;
    fo.seed = seed;
    fo.eval_every = 0;
    Fit(model, ds, fo);
    const auto report = Evaluate(model, ds, ComputeDegs(ds));
    const double m = report.Find("model", std::nullopt)->median_r2_all;
    const double b = report.Find("baseline", std::nullopt)->median_r2_all;
    models.push_back(m);
    bases.push_back(b);
    gaps.push_back(m - b);
    per_seed += Fmt(" %.3f/%.3f", m, b);
  }
  const double gap = Median(gaps);
  const double s = Seconds(t0);
  return {gap >= kUnseenGap && s < kBudget4,
          Fmt("5-seed median of (model - baseline) median r2 = %.4f (need >= %.2f); model %.4f, baseline %.4f; "
              "per seed model/baseline:%s",
              gap, kUnseenGap, Median(models), Median(bases), per_seed.c_str())};
}

// 5 -------------------------------------------------------------------------

Result Disentanglement() {
  bool paired = true, near_majority = true;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthConfig sc;
    sc.seed = seed;
    sc.drug_rank = 3;
    auto [raw, truth] = SynthGenerate(sc);
    SplitConfig split;
    split.seed = seed;
    const ExpressionDataset ds = MakeSplit(Preprocess(raw), split);
    double acc[2];
    double majority = 0;
    for (int i = 0; i < 2; ++i) {
      ChemCpaModel model(ProbeHp(i == 0 ? 0.0 : 24.1), ds.genes, ds.Drugs(), ds.Covariates(), seed);
      FitOptions fo;
      fo.epochs = 100;
      fo.seed = seed;
      fo.eval_every = 0;
      Fit(model, ds, fo);
      const auto rep = DisentanglementProbe(model, ds, ProbeTarget::kDrug, 7);
      acc[i] = rep.accuracy;
      majority = rep.majority_rate;
    }
    paired = paired && acc[1] < acc[0];
    near_majority = near_majority && acc[1] - majority <= kProbeSlack;
    per_seed += Fmt(" [%.3f vs %.3f, majority %.3f]", acc[1], acc[0], majority);
  }
  return {paired && near_majority,
          Fmt("drug probe accuracy lambda 24.1 vs 0:%s; lower in every seed: %s; within %.2f of majority: %s",
              per_seed.c_str(), paired ? "yes" : "no", kProbeSlack, near_majority ? "yes" : "no")};
}

// 6 -------------------------------------------------------------------------

Result TransferBenefit() {
  const auto t0 = std::chrono::steady_clock::now();
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TransferPairConfig tc;  // 20 source drugs / 8000 cells, 6 target drugs / 1200 cells, 60% overlap
    tc.base.seed = seed;
    const auto pair = MakeTransferPair(tc);
    SplitConfig ss;
    ss.seed = seed;
    const auto source = MakeSplit(Preprocess(pair.source), ss);
    SplitConfig ts;
    ts.seed = seed;
    ts.holdout_drugs = {pair.target_drugs[0], pair.target_drugs[1]};
    const auto target = MakeSplit(Preprocess(pair.target), ts);
    const auto degs = ComputeDegs(target);

    ChemCpaModel pretrained(TrainingHp(), source.genes, source.Drugs(), source.Covariates(), seed);
    FitOptions fo;
    fo.epochs = 100;
    fo.seed = seed;
    fo.eval_every = 0;
    Fit(pretrained, source, fo);
    fo.epochs = 200;
    pretrained.mutable_hparams().autoencoder_lr *= kFinetuneLrScale;
    pretrained.mutable_hparams().dosers_lr *= kFinetuneLrScale;
    const auto tuned = Finetune(pretrained, target, nullptr, fo).model;
    ChemCpaModel scratch(TrainingHp(), target.genes, target.Drugs(), target.Covariates(), seed);
    Fit(scratch, target, fo);

    const double a = Evaluate(tuned, target, degs).Find("model", std::nullopt)->median_r2_degs;
    const double b = Evaluate(scratch, target, degs).Find("model", std::nullopt)->median_r2_degs;
    wins += a > b;
    per_seed += Fmt(" %.3f/%.3f", a, b);
  }
  const double s = Seconds(t0);
  return {wins >= kTransferWins && s < kBudget6,
          Fmt("fine-tuned beats scratch in %d/5 seeds (need >= %d); median r2 DEGs fine-tuned/scratch:%s", wins,
              kTransferWins, per_seed.c_str())};
}

// 7 -------------------------------------------------------------------------

Result SurgeryIdentity() {
  TransferPairConfig tc;
  tc.source_cells = 2000;
  const auto pair = MakeTransferPair(tc);
  const auto source = MakeSplit(Preprocess(pair.source), SplitConfig{});
  const auto target = Preprocess(pair.target);
  ChemCpaModel model(TrainingHp(), source.genes, source.Drugs(), source.Covariates(), 0);
  FitOptions fo;
  fo.epochs = 5;
  fo.eval_every = 0;
  Fit(model, source, fo);
  const GeneMapping mapping = MapGenesByName(source.genes, target.genes);
  const ChemCpaModel moved = Surgery(model, mapping, target.genes, 1);

  // Target cells with target-only genes zeroed, and the same cells in source coordinates.
  const Eigen::Index n = std::min<Eigen::Index>(target.matrix.rows(), 256);
  Matrix xt = Matrix::Zero(n, target.matrix.cols());
  Matrix xs = Matrix::Zero(n, source.matrix.cols());
  for (const auto& [t, s] : mapping.shared) {
    xt.col(t) = target.matrix.col(t).head(n);
    xs.col(s) = target.matrix.col(t).head(n);
  }
  double worst = 0;
  for (int drug = 0; drug < static_cast<int>(model.drugs().size()); drug += 5) {
    for (int cov = 0; cov < static_cast<int>(model.covariates().size()); ++cov) {
      const auto dl = model.ComputeDrugLatent(model.DrugEmbedding(drug), drug == 0 ? 0.0 : 1e-6);
      const Vector shift = dl.latent + model.CovariateLatent(cov);
      const auto before = model.Decode(model.EncodeBasal(xs).rowwise() + shift.transpose());
      const auto after = moved.Decode(moved.EncodeBasal(xt).rowwise() + shift.transpose());
      for (const auto& [t, s] : mapping.shared) {
        worst = std::max(worst, (before.mean.col(s) - after.mean.col(t)).cwiseAbs().maxCoeff());
        worst = std::max(worst, (before.variance.col(s) - after.variance.col(t)).cwiseAbs().maxCoeff());
      }
    }
  }
  return {worst < kSurgeryTol, Fmt("%zu shared genes, max |delta| %.2e (tol %.0e)", mapping.shared.size(), worst,
                                   kSurgeryTol)};
}

// 8 -------------------------------------------------------------------------

std::vector<std::uint64_t> ScoreBits(const EvaluationReport& r) {
  std::vector<std::uint64_t> bits;
  auto put = [&](const std::optional<double>& v) { bits.push_back(v ? std::bit_cast<std::uint64_t>(*v) : 1); };
  for (const auto& s : r.scores) {
    put(s.r2_all);
    put(s.r2_degs);
    put(s.baseline_r2_all);
    put(s.baseline_r2_degs);
  }
  return bits;
}

Result DeterminismAndRoundTrip() {
  SynthConfig sc;
  sc.cells_per_combo = 60;
  auto [raw, truth] = SynthGenerate(sc);
  const ExpressionDataset pre = Preprocess(raw);
  SplitConfig split;
  for (int i = 1; i <= 4; ++i) split.holdout_combos.push_back({pre.Drugs()[i], pre.Covariates()[i % 3]});
  const auto ds = MakeSplit(pre, split);
  auto run = [&](ChemCpaModel& model) {
    FitOptions fo;
    fo.epochs = 1000;
    fo.max_steps = kDeterminismSteps;
    fo.record_steps = true;
    fo.eval_every = 1;
    const auto log = Fit(model, ds, fo);
    return std::pair{log.StepCsv(), log.EpochCsv()};
  };
  ChemCpaModel a(TrainingHp(), ds.genes, ds.Drugs(), ds.Covariates(), 0);
  ChemCpaModel b(TrainingHp(), ds.genes, ds.Drugs(), ds.Covariates(), 0);
  const auto la = run(a), lb = run(b);
  const auto lines = std::count(la.first.begin(), la.first.end(), '\n') - 1;
  const bool logs_equal = la == lb && lines == kDeterminismSteps;

  const auto path = std::filesystem::temp_directory_path() / "chemcpa_acceptance_8.ckpt";
  SaveCheckpoint(a, path.string());
  const ChemCpaModel back = LoadCheckpoint(path.string());
  std::filesystem::remove(path);
  const auto degs = ComputeDegs(ds);
  const auto before = Evaluate(a, ds, degs), after = Evaluate(back, ds, degs);
  const bool scores_equal = !before.scores.empty() && ScoreBits(before) == ScoreBits(after) &&
                            before.SummaryJson() == after.SummaryJson();
  return {logs_equal && scores_equal,
          Fmt("%ld logged steps byte-identical across reruns: %s; %zu combo scores bit-identical after reload: %s",
              static_cast<long>(lines), logs_equal ? "yes" : "no", before.scores.size(), scores_equal ? "yes" : "no")};
}

// 9 -------------------------------------------------------------------------

const std::vector<std::string> kMolecules = {
    "CCO", "c1ccccc1", "CC(=O)Oc1ccccc1C(=O)O", "Cn1cnc2c1c(=O)n(C)c(=O)n2C", "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "C1CCC2CCCCC2C1", "c1ccc2ccccc2c1", "O=C(O)CC(O)(CC(=O)O)C(=O)O", "C[N+](C)(C)CC(=O)[O-]", "ClC(Cl)(Cl)Br",
    "C#CC=CC", "c1ccc(cc1)-c1ccccc1", "CC.O", "c1cc[nH]c1", "C12CC3CC(C1)CC(C3)C2", "OC[C@H]1OC(O)[C@H](O)[C@@H]1O",
    "[13CH4]", "N#Cc1ccc(Br)cc1", "CC(C)(C)OC(=O)N[C@@H](Cc1ccccc1)C(=O)O", "S=C=S",
};

std::string RandomInput(std::mt19937_64& rng) {
  static const std::string alphabet = "CNOSPFIBrlcnos()[]=#-+:.%0123456789@/\\H*";
  const int mode = static_cast<int>(rng() % 3);
  if (mode == 0) {  // raw bytes
    std::string s(rng() % 32, '\0');
    for (char& c : s) c = static_cast<char>(rng() % 256);
    return s;
  }
  if (mode == 1) {  // SMILES alphabet
    std::string s(rng() % 40, ' ');
    for (char& c : s) c = alphabet[rng() % alphabet.size()];
    return s;
  }
  std::string s = kMolecules[rng() % kMolecules.size()];  // mutated valid SMILES
  const int edits = 1 + static_cast<int>(rng() % 4);
  for (int e = 0; e < edits; ++e) {
    const std::size_t at = s.empty() ? 0 : rng() % (s.size() + 1);
    const char c = alphabet[rng() % alphabet.size()];
    switch (rng() % 3) {
      case 0: s.insert(s.begin() + static_cast<std::ptrdiff_t>(at), c); break;
      case 1: if (at < s.size()) s.erase(at, 1); break;
      default: if (at < s.size()) s[at] = c; break;
    }
  }
  return s;
}

Result ParserRobustness() {
  std::mt19937_64 rng(9);
  int parsed = 0, rejected = 0, unexpected = 0, malformed = 0;
  for (int i = 0; i < kFuzzInputs; ++i) {
    const std::string s = RandomInput(rng);
    try {
      const auto g = ParseSmiles(s);
      for (const auto& b : g.bonds) {
        const int n = static_cast<int>(g.atoms.size());
        if (b.a < 0 || b.b < 0 || b.a >= n || b.b >= n || b.a == b.b) ++malformed;
      }
      ComputeFingerprint(g, 200, 7);
      ++parsed;
    } catch (const SmilesError& e) {
      if (e.offset() > s.size()) ++malformed;
      ++rejected;
    } catch (...) {
      ++unexpected;
    }
  }

  int mismatches = 0;
  std::mt19937_64 spell_rng(10);
  for (int i = 0; i < kRespellings; ++i) {
    const auto& smi = kMolecules[static_cast<std::size_t>(i) % kMolecules.size()];
    const auto g = ParseSmiles(smi);
    const std::string spelled = oracle::RandomSpelling(g, spell_rng);
    if (ComputeFingerprint(ParseSmiles(spelled), 200, 7).values != ComputeFingerprint(g, 200, 7).values) {
      ++mismatches;
    }
  }
  return {unexpected == 0 && malformed == 0 && mismatches == 0,
          Fmt("%d fuzz inputs: %d parsed, %d rejected with SmilesError, %d other exceptions, %d malformed graphs; "
              "%d re-spellings, %d fingerprint mismatches",
              kFuzzInputs, parsed, rejected, unexpected, malformed, kRespellings, mismatches)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<const char*, std::function<Result()>>> criteria = {
      {1, {"gradient fidelity", GradientFidelity}},
      {2, {"loss unit values", LossValues}},
      {3, {"seen-drug recovery", SeenDrugRecovery}},
      {4, {"unseen-drug generalization", UnseenDrugGeneralization}},
      {5, {"disentanglement", Disentanglement}},
      {6, {"transfer benefit", TransferBenefit}},
      {7, {"surgery identity", SurgeryIdentity}},
      {8, {"determinism and round-trip", DeterminismAndRoundTrip}},
      {9, {"parser robustness", ParserRobustness}},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  if (selected.empty()) {
    for (const auto& [id, c] : criteria) selected.push_back(id);
  }
  int failures = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::fprintf(stderr, "unknown criterion %d\n", id);
      return 2;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    try {
      r = it->second.second();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failures += !r.pass;
    std::printf("criterion %d %s: %s (%.1fs) %s\n", id, r.pass ? "PASS" : "FAIL", it->second.first, Seconds(t0),
                r.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
