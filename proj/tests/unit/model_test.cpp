#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "chemcpa/model.hpp"
#include "chemcpa/synth.hpp"
#include "chemcpa/training.hpp"
#include "finite_diff.hpp"

using namespace chemcpa;

namespace {

HyperParams Tiny() {
  HyperParams hp;
  hp.latent_dim = 4;
  hp.embedding_dim = 16;
  hp.autoencoder_width = 8;
  hp.autoencoder_depth = 1;
  hp.adversary_width = 6;
  hp.adversary_depth = 1;
  hp.dosers_width = 5;
  hp.dosers_depth = 1;
  hp.embedding_encoder_width = 6;
  hp.embedding_encoder_depth = 1;
  return hp;
}

const std::vector<std::string> kGenes = {"g0", "g1", "g2", "g3", "g4"};
const std::vector<std::string> kDrugs = {"CCO", "CCN", "CCCC"};
const std::vector<std::string> kCovs = {"a", "b"};

Batch SmallBatch(std::mt19937_64& rng) {
  Batch b;
  b.x = oracle::RandomMatrix(6, 5, rng);
  b.drug = {0, 1, 2, 3, 1, 0};
  b.dose = {0.0, 1e-6, 1e-7, 1e-5, 1e-8, 0.0};
  b.covariate = {0, 1, 0, 1, 1, 0};
  return b;
}

// L = L_rec - lambda * (CE_drug + CE_cov), assembled from public model pieces.
double AutoencoderObjective(const ChemCpaModel& m, const Batch& b) {
  const Matrix z = m.EncodeBasal(b.x);
  Matrix zp = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const auto d = m.ComputeDrugLatent(m.DrugEmbedding(b.drug[i]), b.dose[i]);
    zp.row(i) += d.latent.transpose() + m.CovariateLatent(b.covariate[i]).transpose();
  }
  const Decoded dec = m.Decode(zp);
  const auto adv = ComputeAdversaryLosses(m, z, b.drug, b.covariate);
  return ReconstructionLoss(dec.mean, dec.variance, b.x, m.hparams().variance_eps) -
         m.hparams().reg_adversary * (adv.drug + adv.covariate);
}

}  // namespace

TEST(HyperParams, DefaultsAndJson) {
  const HyperParams hp;
  EXPECT_EQ(hp.latent_dim, 32);
  EXPECT_EQ(hp.autoencoder_width, 256);
  EXPECT_EQ(hp.autoencoder_depth, 4);
  EXPECT_DOUBLE_EQ(hp.reg_adversary, 24.1);
  EXPECT_DOUBLE_EQ(hp.penalty_adversary, 3.35);
  const HyperParams back = HyperParams::FromJson(hp.ToJson());
  EXPECT_EQ(back.ToJson(), hp.ToJson());
  EXPECT_EQ(HyperParams::FromJson({{"latent_dim", 7}}).latent_dim, 7);
  EXPECT_THROW(HyperParams::FromJson({{"latent_dims", 7}}), Error);
  EXPECT_THROW(HyperParams::FromJson({{"latent_dim", 0}}), Error);
  EXPECT_THROW(HyperParams::FromJson({{"latent_dim", "x"}}), Error);
}

TEST(Dose, Transform) {
  EXPECT_DOUBLE_EQ(TransformDose(1e-5), 1.0);
  EXPECT_DOUBLE_EQ(TransformDose(1e-8), 0.25);
  EXPECT_DOUBLE_EQ(TransformDose(1e-3), 1.0);
  EXPECT_DOUBLE_EQ(TransformDose(1e-12), 0.0);
}

TEST(Model, ControlIsFirstDrug) {
  const ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  ASSERT_EQ(m.drugs().size(), 4u);
  EXPECT_EQ(m.drugs()[0], kControl);
  EXPECT_EQ(m.DrugIndex("CCN"), 2);
  for (double v : m.DrugEmbedding(0)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(m.EmbedMolecule("CCO"), ComputeFingerprint("CCO", 16, 7).values);
}

TEST(Model, ZeroEncoderGivesZeroBasal) {
  ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  m.encoder = Mlp::Zeros(m.encoder.sizes());
  std::mt19937_64 rng(1);
  EXPECT_TRUE(m.EncodeBasal(oracle::RandomMatrix(3, 5, rng)).isZero(0.0));
}

TEST(Model, IdenticalRowsIdenticalBasal) {
  const ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  Matrix x(2, 5);
  x.row(0) << 1, 2, 3, 4, 5;
  x.row(1) = x.row(0);
  const Matrix z = m.EncodeBasal(x);
  EXPECT_EQ(z.row(0), z.row(1));
  EXPECT_THROW(m.EncodeBasal(Matrix::Zero(1, 4)), Error);
}

TEST(Model, HandComputedBasal) {
  HyperParams hp = Tiny();
  hp.latent_dim = 1;
  hp.autoencoder_depth = 0;
  ChemCpaModel m(hp, {"a", "b"}, kDrugs, kCovs, 1);
  m.encoder.mutable_layers()[0].weight << 2, -1;
  m.encoder.mutable_layers()[0].bias << 0.5;
  Matrix x(1, 2);
  x << 3, 4;
  EXPECT_DOUBLE_EQ(m.EncodeBasal(x)(0, 0), 2.5);
}

TEST(Model, DrugLatentControlIsZero) {
  const ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  const auto d = m.ComputeDrugLatent(m.DrugEmbedding(1), 0.0);
  EXPECT_TRUE(d.latent.isZero(0.0));
  EXPECT_THROW(m.ComputeDrugLatent(m.DrugEmbedding(1), -1.0), Error);
}

TEST(Model, HandComputedDrugLatent) {
  HyperParams hp = Tiny();
  hp.embedding_dim = 8;
  hp.latent_dim = 2;
  hp.dosers_depth = 0;
  hp.embedding_encoder_depth = 0;
  ChemCpaModel m(hp, kGenes, kDrugs, kCovs, 1);
  // S(h, d) = 0.5 * sum(h[0..3]) + 2 d - 1;  M(u) = [u0 + u1, u2 - u3] + [0.1, 0]
  auto& s = m.dosage_scaler.mutable_layers()[0];
  s.weight.setZero();
  s.weight.leftCols(4).setConstant(0.5);
  s.weight(0, 8) = 2.0;
  s.bias << -1.0;
  auto& mm = m.perturbation_encoder.mutable_layers()[0];
  mm.weight.setZero();
  mm.weight(0, 0) = 1;
  mm.weight(0, 1) = 1;
  mm.weight(1, 2) = 1;
  mm.weight(1, 3) = -1;
  mm.bias << 0.1, 0.0;
  const std::vector<double> h = {1, 1, 0, 1, 0, 0, 0, 0};
  // d~ = 0.75 at 1 uM: scale = 1.5 + 1.5 - 1 = 2, u = 2h -> M = [4.1, -2]
  const auto d = m.ComputeDrugLatent(h, 1e-6);
  EXPECT_DOUBLE_EQ(d.scale, 2.0);
  EXPECT_DOUBLE_EQ(d.latent[0], 4.1);
  EXPECT_DOUBLE_EQ(d.latent[1], -2.0);
}

TEST(Model, CovariateTableRows) {
  const ChemCpaModel m(Tiny(), kGenes, kDrugs, {"a", "b", "c"}, 3);
  EXPECT_EQ(m.CovariateLatent(1), Vector(m.covariate_embeddings.row(1).transpose()));
  EXPECT_NE(m.CovariateLatent(0), m.CovariateLatent(1));
  EXPECT_THROW(m.CovariateLatent(3), Error);
}

TEST(Model, CovariateUpdateTouchesOnlyItsRow) {
  ChemCpaModel m(Tiny(), kGenes, kDrugs, {"a", "b", "c"}, 3);
  const Matrix before = m.covariate_embeddings;
  Matrix g = Matrix::Zero(3, 4);
  g.row(2).setConstant(0.3);
  Optimizer opt(OptimizerConfig{});
  std::vector<std::span<double>> p = {{m.covariate_embeddings.data(), 12}};
  std::vector<std::span<const double>> gs = {{g.data(), 12}};
  opt.Step(p, gs);
  EXPECT_EQ(m.covariate_embeddings.topRows(2), before.topRows(2));
  EXPECT_NE(m.covariate_embeddings.row(2), before.row(2));
}

TEST(Model, ZeroDecoderGivesLn2Variance) {
  ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  m.decoder = Mlp::Zeros(m.decoder.sizes());
  const Decoded d = m.Decode(Matrix::Ones(2, 4));
  EXPECT_TRUE(d.mean.isZero(0.0));
  EXPECT_EQ(d.variance.rows(), 2);
  EXPECT_EQ(d.variance.cols(), 5);
  for (Eigen::Index i = 0; i < d.variance.size(); ++i) EXPECT_NEAR(d.variance.data()[i], std::log(2.0), 1e-15);
}

TEST(Model, HandComputedDecoder) {
  HyperParams hp = Tiny();
  hp.latent_dim = 1;
  hp.autoencoder_depth = 0;
  ChemCpaModel m(hp, {"a"}, kDrugs, kCovs, 1);
  m.decoder.mutable_layers()[0].weight << 2, -3;
  m.decoder.mutable_layers()[0].bias << 1, 0;
  Matrix z(1, 1);
  z << 1.5;
  const Decoded d = m.Decode(z);
  EXPECT_DOUBLE_EQ(d.mean(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(d.raw_variance(0, 0), -4.5);
  EXPECT_NEAR(d.variance(0, 0), std::log1p(std::exp(-4.5)), 1e-15);
}

TEST(Model, SoftplusMonotone) {
  double prev = Softplus(-50.0);
  for (double x = -49.0; x <= 50.0; x += 0.5) {
    EXPECT_GT(Softplus(x), prev);
    prev = Softplus(x);
  }
  EXPECT_NEAR(Softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(Sigmoid(0.0), 0.5, 1e-15);
}

TEST(Model, AddDrugsKeepsExistingLogits) {
  ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  std::mt19937_64 rng(4);
  const Matrix z = oracle::RandomMatrix(3, 4, rng);
  const Matrix before = m.DrugLogits(z);
  m.AddDrugs({"CCO", "OCCO", "OCCO"}, 9);
  ASSERT_EQ(m.drugs().size(), 5u);
  EXPECT_EQ(m.drugs()[4], "OCCO");
  EXPECT_EQ(m.DrugLogits(z).leftCols(4), before);
  EXPECT_THROW(m.AddDrugs({"C("}, 1), Error);
  EXPECT_EQ(m.drugs().size(), 5u);
  m.AddCovariates({"b", "z"}, 2);
  EXPECT_EQ(m.covariates().size(), 3u);
  EXPECT_EQ(m.CovariateLogits(z).cols(), 3);
}

TEST(Losses, ReconstructionClosedForms) {
  Matrix x(1, 1), mu(1, 1), var(1, 1);
  x << 1.7;
  mu << 1.7;
  var << 1.0;
  EXPECT_NEAR(ReconstructionLoss(mu, var, x), 0.0, 1e-12);
  x << 2.0;
  mu << 0.0;
  EXPECT_NEAR(ReconstructionLoss(mu, var, x), 2.0, 1e-12);
  x << 0.3;
  mu << 0.3;
  var << 0.0;
  EXPECT_NEAR(ReconstructionLoss(mu, var, x), 0.5 * std::log(1e-6), 1e-12);
  EXPECT_NEAR(ReconstructionLoss(mu, var, x), -6.9078, 1e-4);
}

TEST(Losses, ReconstructionLowerBound) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 200; ++t) {
    const Matrix x = oracle::RandomMatrix(3, 4, rng);
    const Matrix mu = oracle::RandomMatrix(3, 4, rng);
    const Matrix var = oracle::RandomMatrix(3, 4, rng).cwiseAbs() * 0.01;
    EXPECT_GE(ReconstructionLoss(mu, var, x), 0.5 * std::log(1e-6));
  }
}

TEST(Losses, ReconstructionGradMatchesFd) {
  std::mt19937_64 rng(9);
  const Matrix x = oracle::RandomMatrix(2, 3, rng);
  const Matrix mu = oracle::RandomMatrix(2, 3, rng);
  const Matrix var = oracle::RandomMatrix(2, 3, rng).cwiseAbs() + Matrix::Constant(2, 3, 0.1);
  const auto g = ReconstructionLossGrad(mu, var, x);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix a = mu, b = mu;
    a.data()[i] += 1e-6;
    b.data()[i] -= 1e-6;
    EXPECT_NEAR((ReconstructionLoss(a, var, x) - ReconstructionLoss(b, var, x)) / 2e-6, g.d_mean.data()[i], 1e-7);
    Matrix c = var, d = var;
    c.data()[i] += 1e-6;
    d.data()[i] -= 1e-6;
    EXPECT_NEAR((ReconstructionLoss(mu, c, x) - ReconstructionLoss(mu, d, x)) / 2e-6, g.d_variance.data()[i], 1e-7);
  }
}

TEST(Losses, CrossEntropyClosedForms) {
  const std::vector<int> label0 = {0};
  EXPECT_NEAR(CrossEntropy(Matrix::Zero(1, 7), label0).loss, std::log(7.0), 1e-6);
  Matrix big(1, 3);
  big << 100, 0, 0;
  EXPECT_NEAR(CrossEntropy(big, label0).loss, 0.0, 1e-6);
  Matrix two(1, 2);
  two << 2, 0;
  EXPECT_NEAR(CrossEntropy(two, label0).loss, 0.1269, 1e-4);
  EXPECT_NEAR(CrossEntropy(two, label0).loss, std::log1p(std::exp(-2.0)), 1e-12);
  const std::vector<int> bad = {2};
  EXPECT_THROW(CrossEntropy(two, bad), Error);
}

TEST(Trainer, BranchesTouchOnlyTheirParameters) {
  ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  Trainer t(m);
  std::mt19937_64 rng(10);
  const Batch b = SmallBatch(rng);
  const auto ae = m.AutoencoderHash(), adv = m.AdversaryHash(), dos = m.DoserHash();
  const StepReport r0 = t.TrainStep(b, 0);
  EXPECT_EQ(r0.branch, Branch::kAdversary);
  EXPECT_EQ(m.AutoencoderHash(), ae);
  EXPECT_EQ(m.DoserHash(), dos);
  EXPECT_NE(m.AdversaryHash(), adv);
  const auto adv1 = m.AdversaryHash();
  const StepReport r1 = t.TrainStep(b, 1);
  EXPECT_EQ(r1.branch, Branch::kAutoencoder);
  EXPECT_EQ(m.AdversaryHash(), adv1);
  EXPECT_NE(m.AutoencoderHash(), ae);
  EXPECT_NE(m.DoserHash(), dos);
}

TEST(Trainer, AutoencoderGradientMatchesFd) {
  HyperParams hp = Tiny();
  hp.optimizer = OptimizerKind::kSgd;
  hp.autoencoder_wd = hp.dosers_wd = 0.0;
  hp.autoencoder_lr = hp.dosers_lr = 1e-3;
  hp.reg_adversary = 2.0;
  ChemCpaModel m(hp, kGenes, kDrugs, kCovs, 3);
  std::mt19937_64 rng(11);
  const Batch b = SmallBatch(rng);
  const ChemCpaModel before = m;
  Trainer t(m);
  t.AutoencoderStep(b);

  // SGD without decay moves every parameter by -lr * grad.
  auto check = [&](Mlp ChemCpaModel::*net) {
    ChemCpaModel probe = before;
    auto& layers = (probe.*net).mutable_layers();
    const auto& after = (m.*net).layers();
    double worst = 0.0;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      for (Eigen::Index i = 0; i < layers[k].weight.size(); i += 3) {
        double& p = layers[k].weight.data()[i];
        const double keep = p;
        const double analytic = (keep - after[k].weight.data()[i]) / 1e-3;
        p = keep + 1e-6;
        const double up = AutoencoderObjective(probe, b);
        p = keep - 1e-6;
        const double down = AutoencoderObjective(probe, b);
        p = keep;
        const double fd = (up - down) / 2e-6;
        worst = std::max(worst, std::abs(fd - analytic) / std::max(std::abs(fd), 1e-3));
      }
    }
    return worst;
  };
  EXPECT_LT(check(&ChemCpaModel::encoder), 1e-4);
  EXPECT_LT(check(&ChemCpaModel::decoder), 1e-4);
  EXPECT_LT(check(&ChemCpaModel::perturbation_encoder), 1e-4);
  EXPECT_LT(check(&ChemCpaModel::dosage_scaler), 1e-4);
}

TEST(Trainer, PureAutoencoderTrainingReducesLoss) {
  SynthConfig sc;
  sc.n_genes = 20;
  sc.n_drugs = 4;
  sc.cells_per_combo = 40;
  auto [raw, truth] = SynthGenerate(sc);
  const ExpressionDataset ds = Preprocess(raw);
  HyperParams hp = Tiny();
  hp.reg_adversary = 0.0;
  hp.adversary_steps = 1000000;
  ChemCpaModel m(hp, ds.genes, ds.Drugs(), ds.Covariates(), 2);
  Trainer t(m);
  std::vector<std::size_t> rows(ds.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const Batch all = MakeBatch(m, ds, rows);
  double first = 0.0, last = 0.0;
  for (int step = 1; step <= 150; ++step) {
    const StepReport r = t.TrainStep(all, step);
    ASSERT_EQ(r.branch, Branch::kAutoencoder);
    if (step == 1) first = r.reconstruction;
    last = r.reconstruction;
  }
  EXPECT_LT(last, first - 0.5);
}

TEST(Trainer, RejectsInconsistentBatch) {
  ChemCpaModel m(Tiny(), kGenes, kDrugs, kCovs, 1);
  std::mt19937_64 rng(12);
  Batch b = SmallBatch(rng);
  b.dose[0] = 1e-6;  // control with a dose
  EXPECT_THROW(CheckBatch(m, b), Error);
  b = SmallBatch(rng);
  b.drug[1] = 9;
  EXPECT_THROW(CheckBatch(m, b), Error);
  b = SmallBatch(rng);
  b.covariate.pop_back();
  EXPECT_THROW(CheckBatch(m, b), Error);
}
