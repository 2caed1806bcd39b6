#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "chemcpa/data.hpp"
#include "chemcpa/model.hpp"

namespace chemcpa {

struct EpochRecord {
  int epoch = 0;
  double reconstruction = 0.0;  // mean over autoencoder steps
  double drug_ce = 0.0;         // mean over adversary steps
  double cov_ce = 0.0;
  double penalty = 0.0;
  double val_r2_all = 0.0;  // NaN when the validation split has nothing to score
  double val_r2_degs = 0.0;
};

struct TrainingLog {
  std::string tag = "scratch";
  std::vector<EpochRecord> epochs;
  std::vector<StepReport> steps;  // filled when FitOptions::record_steps

  std::string EpochCsv() const;
  std::string StepCsv() const;
};

struct FitOptions {
  int epochs = 0;
  std::uint64_t seed = 0;
  int eval_every = 1;  // validation scoring cadence in epochs; 0 disables it
  int threads = 1;
  bool record_steps = false;
  std::int64_t max_steps = -1;  // stop early after this many steps when >= 0
  std::string tag = "scratch";
  std::function<void(const EpochRecord&)> on_epoch;
};

// Seeded mini-batch training on the dataset's train split. The learning-rate
// schedule advances once per epoch; validation r2 is computed on the valid
// split using DEGs from the whole dataset.
TrainingLog Fit(ChemCpaModel& model, const ExpressionDataset& dataset, const FitOptions& options);

// Builds a batch from dataset rows, mapping labels into the model vocabulary.
Batch MakeBatch(const ChemCpaModel& model, const ExpressionDataset& dataset, std::span<const std::size_t> rows);

}  // namespace chemcpa
