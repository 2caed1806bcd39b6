#include "chemcpa/training.hpp"

#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "chemcpa/eval.hpp"

namespace chemcpa {

Batch MakeBatch(const ChemCpaModel& model, const ExpressionDataset& dataset, std::span<const std::size_t> rows) {
  Batch b;
  b.x.resize(static_cast<Eigen::Index>(rows.size()), dataset.matrix.cols());
  b.drug.reserve(rows.size());
  b.dose.reserve(rows.size());
  b.covariate.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const ObservationMeta& r = dataset.rows[rows[i]];
    b.x.row(static_cast<Eigen::Index>(i)) = dataset.matrix.row(static_cast<Eigen::Index>(rows[i]));
    const auto d = model.DrugIndex(r.drug);
    if (!d) throw DataError("UnknownDrug", "drug '" + r.drug + "' is not in the model vocabulary");
    const auto c = model.CovariateIndex(r.covariate);
    if (!c) throw DataError("UnknownCovariate", "covariate '" + r.covariate + "' is not in the model vocabulary");
    b.drug.push_back(*d);
    b.dose.push_back(r.dose);
    b.covariate.push_back(*c);
  }
  return b;
}

TrainingLog Fit(ChemCpaModel& model, const ExpressionDataset& dataset, const FitOptions& options) {
  TrainingLog log;
  log.tag = options.tag;
  if (options.epochs < 0) throw InvalidArgument("InvalidEpochs", "epochs must be >= 0");
  if (options.epochs == 0) return log;
  if (dataset.state != PreprocessState::kLog1p) {
    throw Error(ErrorKind::kState, "NotPreprocessed", "training expects a preprocessed dataset");
  }
  std::vector<std::size_t> train = dataset.RowsInSplit(Split::kTrain);
  if (train.empty()) throw DataError("EmptySplit", "the train split is empty");

  // Resolve every label up front so vocabulary errors surface before training.
  MakeBatch(model, dataset, train);

  const bool has_valid = [&] {
    bool control = false;
    bool treated = false;
    for (const ObservationMeta& r : dataset.rows) {
      if (r.split != Split::kValid) continue;
      (r.is_control() ? control : treated) = true;
    }
    return control && treated && options.eval_every > 0;
  }();
  std::optional<DegTable> degs;
  if (has_valid) degs = ComputeDegs(dataset);

  Trainer trainer(model);
  std::mt19937_64 rng(DeriveSeed(options.seed, 0xF17));
  const std::size_t batch_size = static_cast<std::size_t>(model.hparams().batch_size);
  std::int64_t step = 0;
  const double nan = std::nan("");

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    trainer.ScheduleStep(epoch);
    std::shuffle(train.begin(), train.end(), rng);
    double rec = 0.0, dce = 0.0, cce = 0.0, pen = 0.0;
    int ae_steps = 0, adv_steps = 0;
    bool stop = false;
    for (std::size_t start = 0; start < train.size(); start += batch_size) {
      if (options.max_steps >= 0 && step >= options.max_steps) {
        stop = true;
        break;
      }
      const std::size_t end = std::min(train.size(), start + batch_size);
      const Batch batch = MakeBatch(model, dataset, std::span(train).subspan(start, end - start));
      const StepReport r = trainer.TrainStep(batch, step);
      if (r.branch == Branch::kAutoencoder) {
        rec += r.reconstruction;
        ++ae_steps;
      } else {
        dce += r.drug_ce;
        cce += r.cov_ce;
        pen += r.penalty;
        ++adv_steps;
      }
      if (options.record_steps) log.steps.push_back(r);
      ++step;
    }

    EpochRecord rec_row;
    rec_row.epoch = epoch;
    rec_row.reconstruction = ae_steps ? rec / ae_steps : nan;
    rec_row.drug_ce = adv_steps ? dce / adv_steps : nan;
    rec_row.cov_ce = adv_steps ? cce / adv_steps : nan;
    rec_row.penalty = adv_steps ? pen / adv_steps : nan;
    rec_row.val_r2_all = nan;
    rec_row.val_r2_degs = nan;
    const bool last = epoch + 1 == options.epochs || stop;
    if (has_valid && (last || (epoch + 1) % options.eval_every == 0)) {
      EvalOptions eo;
      eo.split = Split::kValid;
      eo.threads = options.threads;
      const EvaluationReport report = Evaluate(model, dataset, *degs, eo);
      if (const Aggregate* a = report.Find("model", std::nullopt)) {
        rec_row.val_r2_all = a->mean_r2_all;
        rec_row.val_r2_degs = a->mean_r2_degs;
      }
    }
    log.epochs.push_back(rec_row);
    if (options.on_epoch) options.on_epoch(rec_row);
    if (stop) break;
  }
  return log;
}

std::string TrainingLog::EpochCsv() const {
  std::ostringstream out;
  out << "tag,epoch,loss_rec,loss_class_drugs,loss_class_cov,loss_pen,val_r2_all,val_r2_degs\n";
  for (const EpochRecord& e : epochs) {
    out << tag << ',' << e.epoch << ',' << FormatDouble(e.reconstruction) << ',' << FormatDouble(e.drug_ce) << ','
        << FormatDouble(e.cov_ce) << ',' << FormatDouble(e.penalty) << ',' << FormatDouble(e.val_r2_all) << ','
        << FormatDouble(e.val_r2_degs) << '\n';
  }
  return out.str();
}

std::string TrainingLog::StepCsv() const {
  std::ostringstream out;
  out << "step,branch,loss_rec,loss_class_drugs,loss_class_cov,loss_pen\n";
  for (const StepReport& s : steps) {
    out << s.step << ',' << (s.branch == Branch::kAutoencoder ? "autoencoder" : "adversary") << ','
        << FormatDouble(s.reconstruction) << ',' << FormatDouble(s.drug_ce) << ',' << FormatDouble(s.cov_ce) << ','
        << FormatDouble(s.penalty) << '\n';
  }
  return out.str();
}

}  // namespace chemcpa
