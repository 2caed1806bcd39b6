#include "chemcpa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>
#include <tuple>

#include <boost/math/distributions/students_t.hpp>

namespace chemcpa {

std::optional<double> R2Score(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || truth.size() < 2) {
    throw DimensionMismatch("r2 needs two vectors of equal length >= 2");
  }
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

namespace {

std::vector<std::size_t> ControlRows(const ExpressionDataset& dataset, Split split,
                                     const std::string* covariate = nullptr) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
    const ObservationMeta& r = dataset.rows[i];
    if (r.split == split && r.is_control() && (!covariate || r.covariate == *covariate)) out.push_back(i);
  }
  return out;
}

Matrix GatherRows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

Vector MeanRows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Vector v = Vector::Zero(m.cols());
  for (std::size_t i : idx) v += m.row(static_cast<Eigen::Index>(i)).transpose();
  return v / static_cast<double>(idx.size());
}

Vector PredictFromBasal(const ChemCpaModel& model, const Matrix& basal, const std::string& drug,
                        double dose, const std::string& covariate) {
  const auto cov = model.CovariateIndex(covariate);
  if (!cov) throw DataError("UnknownCovariate", "covariate '" + covariate + "' is not in the model vocabulary");
  Vector attribute = model.CovariateLatent(*cov);
  if (dose > 0.0) {
    if (drug == kControl) throw DataError("InvalidDose", "CONTROL cannot carry a dose");
    attribute += model.ComputeDrugLatent(model.EmbedMolecule(drug), dose).latent;
  } else if (dose < 0.0) {
    throw InvalidArgument("NegativeDose", "dose must be >= 0");
  }
  Matrix latent = basal;
  latent.rowwise() += attribute.transpose();
  return model.Decode(latent).mean.colwise().mean().transpose();
}

Vector Subset(const Vector& v, const std::vector<int>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[idx[i]];
  return out;
}

std::optional<double> R2(const Vector& pred, const Vector& truth) {
  if (truth.size() < 2) return std::nullopt;
  return R2Score({pred.data(), static_cast<std::size_t>(pred.size())},
                 {truth.data(), static_cast<std::size_t>(truth.size())});
}

double Median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double Mean(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string Opt(const std::optional<double>& v) { return v ? FormatDouble(*v) : std::string("nan"); }

nlohmann::json OptJson(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

Vector CounterfactualPredict(const ChemCpaModel& model, const ExpressionDataset& dataset,
                             const std::string& drug, double dose, const std::string& covariate, Split split) {
  const auto controls = ControlRows(dataset, split);
  if (controls.empty()) {
    throw DataError("NoControls", "no control rows in split '" + std::string(ToString(split)) + "'");
  }
  const Matrix basal = model.EncodeBasal(GatherRows(dataset.matrix, controls));
  return PredictFromBasal(model, basal, drug, dose, covariate);
}

Vector BaselinePredict(const ExpressionDataset& dataset, const std::string& covariate, Split split) {
  const auto controls = ControlRows(dataset, split, &covariate);
  if (controls.empty()) {
    throw DataError("NoControls", "no control rows for covariate '" + covariate + "' in split '" +
                                      std::string(ToString(split)) + "'");
  }
  return MeanRows(dataset.matrix, controls);
}

std::vector<Aggregate> Aggregates(const std::vector<ComboScore>& scores) {
  std::vector<std::optional<double>> doses{std::nullopt};
  {
    std::vector<double> d;
    for (const ComboScore& s : scores) d.push_back(s.dose);
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    for (double v : d) doses.emplace_back(v);
  }
  std::vector<Aggregate> out;
  for (const char* type : {"model", "baseline"}) {
    const bool model = std::string_view(type) == "model";
    for (const auto& dose : doses) {
      std::vector<double> all;
      std::vector<double> degs;
      for (const ComboScore& s : scores) {
        if (dose && s.dose != *dose) continue;
        const auto& a = model ? s.r2_all : s.baseline_r2_all;
        const auto& d = model ? s.r2_degs : s.baseline_r2_degs;
        if (a) all.push_back(*a);
        if (d) degs.push_back(*d);
      }
      Aggregate agg;
      agg.type = type;
      agg.dose = dose;
      agg.count = static_cast<int>(all.size());
      agg.mean_r2_all = Mean(all);
      agg.median_r2_all = Median(all);
      agg.mean_r2_degs = Mean(degs);
      agg.median_r2_degs = Median(degs);
      out.push_back(agg);
    }
  }
  return out;
}

EvaluationReport Evaluate(const ChemCpaModel& model, const ExpressionDataset& dataset, const DegTable& degs,
                          const EvalOptions& options) {
  const auto controls = ControlRows(dataset, options.split);
  if (controls.empty()) {
    throw DataError("NoControls", "no control rows in split '" + std::string(ToString(options.split)) + "'");
  }
  std::map<std::tuple<std::string, double, std::string>, std::vector<std::size_t>> combos;
  for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
    const ObservationMeta& r = dataset.rows[i];
    if (r.split == options.split && !r.is_control()) combos[{r.drug, r.dose, r.covariate}].push_back(i);
  }
  const Matrix basal = model.EncodeBasal(GatherRows(dataset.matrix, controls));

  std::vector<const std::pair<const std::tuple<std::string, double, std::string>, std::vector<std::size_t>>*> work;
  for (const auto& entry : combos) work.push_back(&entry);

  EvaluationReport report;
  report.scores.resize(work.size());
  auto score_one = [&](std::size_t w) {
    const auto& [key, rows] = *work[w];
    const auto& [drug, dose, cov] = key;
    ComboScore s;
    s.drug = drug;
    s.dose = dose;
    s.covariate = cov;
    s.n_controls = static_cast<int>(controls.size());
    s.n_true = static_cast<int>(rows.size());
    const Vector truth = MeanRows(dataset.matrix, rows);
    const Vector pred = PredictFromBasal(model, basal, drug, dose, cov);
    s.r2_all = R2(pred, truth);
    const auto cov_controls = ControlRows(dataset, options.split, &cov);
    std::optional<Vector> base;
    if (!cov_controls.empty()) {
      base = MeanRows(dataset.matrix, cov_controls);
      s.baseline_r2_all = R2(*base, truth);
    }
    if (const std::vector<int>* deg = degs.Lookup(drug, cov)) {
      s.n_degs = static_cast<int>(deg->size());
      const Vector truth_degs = Subset(truth, *deg);
      s.r2_degs = R2(Subset(pred, *deg), truth_degs);
      if (base) s.baseline_r2_degs = R2(Subset(*base, *deg), truth_degs);
    }
    report.scores[w] = std::move(s);
  };

  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(options.threads, 1)), 1, work.size() ? work.size() : 1);
  if (threads <= 1) {
    for (std::size_t w = 0; w < work.size(); ++w) score_one(w);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t w = t; w < work.size(); w += threads) score_one(w);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  report.aggregates = Aggregates(report.scores);
  return report;
}

std::string EvaluationReport::ScoresCsv() const {
  std::ostringstream out;
  out << "drug,dose,covariate,r2_all,r2_degs,baseline_r2_all,baseline_r2_degs,n_controls,n_true,n_degs\n";
  for (const ComboScore& s : scores) {
    out << s.drug << ',' << FormatScientific(s.dose) << ',' << s.covariate << ',' << Opt(s.r2_all) << ','
        << Opt(s.r2_degs) << ',' << Opt(s.baseline_r2_all) << ',' << Opt(s.baseline_r2_degs) << ','
        << s.n_controls << ',' << s.n_true << ',' << s.n_degs << '\n';
  }
  return out.str();
}

nlohmann::json EvaluationReport::SummaryJson() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const Aggregate& a : aggregates) {
    nlohmann::json j;
    j["type"] = a.type;
    j["dose"] = a.dose ? nlohmann::json(*a.dose) : nlohmann::json("all");
    j["count"] = a.count;
    j["mean_r2_all"] = OptJson(a.mean_r2_all);
    j["mean_r2_degs"] = OptJson(a.mean_r2_degs);
    j["median_r2_all"] = OptJson(a.median_r2_all);
    j["median_r2_degs"] = OptJson(a.median_r2_degs);
    rows.push_back(std::move(j));
  }
  nlohmann::json out;
  out["combinations"] = scores.size();
  out["aggregates"] = std::move(rows);
  return out;
}

const Aggregate* EvaluationReport::Find(const std::string& type, std::optional<double> dose) const {
  for (const Aggregate& a : aggregates) {
    if (a.type == type && a.dose == dose) return &a;
  }
  return nullptr;
}

nlohmann::json ProbeReport::ToJson() const {
  nlohmann::json j;
  j["target"] = target == ProbeTarget::kDrug ? "drug" : "covariate";
  j["accuracy"] = accuracy;
  j["majority_rate"] = majority_rate;
  j["gate"] = gate;
  j["passes_gate"] = passes_gate;
  j["degenerate"] = degenerate;
  j["num_classes"] = num_classes;
  j["train_rows"] = train_rows;
  j["eval_rows"] = eval_rows;
  return j;
}

ProbeReport DisentanglementProbe(const ChemCpaModel& model, const ExpressionDataset& dataset, ProbeTarget target,
                                 std::uint64_t seed, const ProbeOptions& options) {
  if (options.layers < 1 || options.epochs < 0 || options.batch_size < 1) {
    throw InvalidArgument("InvalidProbe", "probe needs >= 1 layer, >= 0 epochs and batch >= 1");
  }
  const std::vector<std::string> vocab = target == ProbeTarget::kDrug ? dataset.Drugs() : dataset.Covariates();
  std::vector<int> labels;
  labels.reserve(dataset.rows.size());
  for (const ObservationMeta& r : dataset.rows) {
    const std::string& key = target == ProbeTarget::kDrug ? r.drug : r.covariate;
    labels.push_back(static_cast<int>(std::find(vocab.begin(), vocab.end(), key) - vocab.begin()));
  }
  const int k = static_cast<int>(vocab.size());

  ProbeReport report;
  report.target = target;
  report.gate = target == ProbeTarget::kDrug ? options.drug_gate : options.covariate_gate;
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  const int present = static_cast<int>(std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }));
  report.num_classes = present;
  if (labels.empty()) throw DataError("TooFewClasses", "probe dataset is empty");
  report.majority_rate =
      static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(labels.size());
  if (present < 2) {
    report.degenerate = true;
    report.accuracy = 1.0;
    report.passes_gate = report.accuracy <= report.gate;
    return report;
  }

  Matrix basal = model.EncodeBasal(dataset.matrix);
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = std::max<std::size_t>(
      1, std::min(order.size() - 1, static_cast<std::size_t>(options.train_fraction * static_cast<double>(order.size()))));
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<std::size_t> held(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  // Standardize with train-row statistics so the probe sees unit-scale inputs.
  {
    const Matrix t = GatherRows(basal, train);
    const Eigen::RowVectorXd mean = t.colwise().mean();
    Eigen::RowVectorXd sd = ((t.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(t.rows())).sqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j) {
      if (!(sd(j) > 1e-12)) sd(j) = 1.0;
    }
    basal = ((basal.rowwise() - mean).array().rowwise() / sd.array()).matrix();
  }
  report.train_rows = static_cast<int>(train.size());
  report.eval_rows = static_cast<int>(held.size());

  std::vector<int> sizes{model.latent_dim()};
  for (int i = 0; i + 1 < options.layers; ++i) sizes.push_back(options.width);
  sizes.push_back(k);
  Mlp probe(sizes, DeriveSeed(seed, 0xB0BE));
  OptimizerConfig oc;
  oc.learning_rate = options.learning_rate;
  oc.step_size = std::max(options.epochs, 1);
  oc.decay_factor = 1.0;
  Optimizer opt(oc);

  Matrix xb;
  std::vector<int> yb;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(train.size(), start + static_cast<std::size_t>(options.batch_size));
      xb.resize(static_cast<Eigen::Index>(end - start), basal.cols());
      yb.resize(end - start);
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<Eigen::Index>(i - start)) = basal.row(static_cast<Eigen::Index>(train[i]));
        yb[i - start] = labels[train[i]];
      }
      ForwardPass pass = probe.Forward(xb);
      const CrossEntropyResult ce = CrossEntropy(pass.output, yb);
      const MlpGradients g = Backward(probe, pass.tape, ce.d_logits).params;
      const auto params = probe.ParameterSpans();
      opt.Step(params, g.Spans());
    }
  }

  const Matrix logits = probe.Predict(GatherRows(basal, held));
  int correct = 0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    Eigen::Index arg = 0;
    logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    if (arg == labels[held[i]]) ++correct;
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(held.size());
  report.passes_gate = report.accuracy <= report.gate;
  return report;
}

PairedComparison ComparePaired(const std::vector<ComboScore>& a, const std::vector<ComboScore>& b) {
  std::map<std::tuple<std::string, double, std::string>, const ComboScore*> index;
  for (const ComboScore& s : b) index[{s.drug, s.dose, s.covariate}] = &s;
  PairedComparison out;
  std::vector<double> d_all;
  std::vector<double> d_degs;
  for (const ComboScore& s : a) {
    auto it = index.find({s.drug, s.dose, s.covariate});
    if (it == index.end()) continue;
    const ComboScore& o = *it->second;
    if (!s.r2_all || !o.r2_all || !s.r2_degs || !o.r2_degs) continue;
    out.rows.push_back({s.drug, s.dose, s.covariate, *s.r2_all, *o.r2_all, *s.r2_degs, *o.r2_degs});
    d_all.push_back(*s.r2_all - *o.r2_all);
    d_degs.push_back(*s.r2_degs - *o.r2_degs);
  }
  const int n = static_cast<int>(d_all.size());
  out.df = n - 1;
  auto paired_t = [&](const std::vector<double>& d, double& t, double& p) {
    if (n < 2) return;
    const double mean = Mean(d);
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n - 1);
    if (var == 0.0) {
      t = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
      p = mean == 0.0 ? 1.0 : 0.0;
      return;
    }
    t = mean / std::sqrt(var / static_cast<double>(n));
    boost::math::students_t dist(static_cast<double>(n - 1));
    p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  };
  paired_t(d_all, out.t_all, out.p_all);
  paired_t(d_degs, out.t_degs, out.p_degs);
  return out;
}

std::string PairedComparison::Csv() const {
  std::ostringstream out;
  out << "drug,dose,covariate,a_r2_all,b_r2_all,a_r2_degs,b_r2_degs\n";
  for (const Row& r : rows) {
    out << r.drug << ',' << FormatScientific(r.dose) << ',' << r.covariate << ',' << FormatDouble(r.a_all) << ','
        << FormatDouble(r.b_all) << ',' << FormatDouble(r.a_degs) << ',' << FormatDouble(r.b_degs) << '\n';
  }
  return out.str();
}

}  // namespace chemcpa
