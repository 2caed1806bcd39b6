#include "chemcpa/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <system_error>

namespace chemcpa {

std::string_view ToString(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split ParseSplit(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "valid") return Split::kValid;
  if (text == "test") return Split::kTest;
  throw DataError("CorruptMetadata", "unknown split label '" + std::string(text) + "'");
}

void ExpressionDataset::Validate() const {
  if (matrix.rows() != static_cast<Eigen::Index>(rows.size()) ||
      matrix.cols() != static_cast<Eigen::Index>(genes.size())) {
    throw DimensionMismatch("dataset matrix shape does not match metadata");
  }
  std::set<std::string_view> seen;
  for (const std::string& g : genes) {
    if (g.empty() || !seen.insert(g).second) {
      throw DataError("MalformedHeader", "gene names must be unique and non-empty: '" + g + "'");
    }
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const ObservationMeta& r = rows[i];
    if (r.is_control() != (r.dose == 0.0) || r.dose < 0.0 || !std::isfinite(r.dose)) {
      throw DataError("InvalidDose", "row " + std::to_string(i) +
                                         ": CONTROL rows need dose 0 and treated rows dose > 0");
    }
    if (r.covariate.empty()) throw DataError("InvalidCovariate", "row " + std::to_string(i) + " has no covariate");
  }
}

std::vector<std::string> ExpressionDataset::Drugs() const {
  std::vector<std::string> out{std::string(kControl)};
  std::set<std::string_view> seen{kControl};
  for (const ObservationMeta& r : rows) {
    if (seen.insert(r.drug).second) out.push_back(r.drug);
  }
  return out;
}

std::vector<std::string> ExpressionDataset::Covariates() const {
  std::vector<std::string> out;
  std::set<std::string_view> seen;
  for (const ObservationMeta& r : rows) {
    if (seen.insert(r.covariate).second) out.push_back(r.covariate);
  }
  return out;
}

std::vector<std::size_t> ExpressionDataset::RowsInSplit(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].split == split) out.push_back(i);
  }
  return out;
}

std::string FormatDouble(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string FormatScientific(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::scientific);
  return std::string(buf, res.ptr);
}

double ParseDouble(std::string_view text, std::size_t line, const std::string& what) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && *first == '+') ++first;
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last || text.empty() || !std::isfinite(v)) {
    throw DataError("UnparseableNumber", "line " + std::to_string(line) + ": cannot parse " + what +
                                             " '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::string_view> SplitCsvLine(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

namespace {

std::string MetaPath(const std::string& path) { return path + ".meta.json"; }

std::string_view StripCr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

}  // namespace

ExpressionDataset LoadDataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "FileNotFound", "cannot open dataset '" + path + "'");

  ExpressionDataset ds;
  std::string line;
  if (!std::getline(in, line)) throw DataError("MalformedHeader", "line 1: dataset file is empty");
  const auto header = SplitCsvLine(StripCr(line));
  if (header.size() < 4 || header[0] != "drug" || header[1] != "dose" || header[2] != "covariate") {
    throw DataError("MalformedHeader", "line 1: header must start with drug,dose,covariate and list >= 1 gene");
  }
  std::set<std::string_view> seen;
  for (std::size_t i = 3; i < header.size(); ++i) {
    if (header[i].empty() || !seen.insert(header[i]).second) {
      throw DataError("MalformedHeader", "line 1: duplicate or empty gene column '" +
                                             std::string(header[i]) + "'");
    }
    ds.genes.emplace_back(header[i]);
  }

  const std::size_t n = ds.genes.size();
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view view = StripCr(line);
    if (view.empty()) continue;
    const auto fields = SplitCsvLine(view);
    if (fields.size() != n + 3) {
      throw DataError("RowWidthMismatch", "line " + std::to_string(line_no) + ": expected " +
                                              std::to_string(n + 3) + " fields, found " +
                                              std::to_string(fields.size()));
    }
    ObservationMeta meta;
    meta.drug = std::string(fields[0]);
    meta.dose = ParseDouble(fields[1], line_no, "dose");
    meta.covariate = std::string(fields[2]);
    if (meta.drug.empty()) throw DataError("MissingDrug", "line " + std::to_string(line_no) + ": empty drug");
    for (std::size_t j = 0; j < n; ++j) values.push_back(ParseDouble(fields[j + 3], line_no, "expression value"));
    ds.rows.push_back(std::move(meta));
  }

  ds.matrix.resize(static_cast<Eigen::Index>(ds.rows.size()), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    for (std::size_t j = 0; j < n; ++j) ds.matrix(i, j) = values[i * n + j];
  }

  std::ifstream meta_in(MetaPath(path));
  if (meta_in) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("CorruptMetadata", MetaPath(path) + ": " + e.what());
    }
    const std::string state = meta.value("state", "raw");
    if (state == "raw") {
      ds.state = PreprocessState::kRaw;
    } else if (state == "log1p") {
      ds.state = PreprocessState::kLog1p;
    } else {
      throw DataError("CorruptMetadata", "unknown preprocessing state '" + state + "'");
    }
    if (meta.contains("splits")) {
      const auto& splits = meta.at("splits");
      if (!splits.is_array() || splits.size() != ds.rows.size()) {
        throw DataError("CorruptMetadata", "split list length does not match the row count");
      }
      for (std::size_t i = 0; i < ds.rows.size(); ++i) ds.rows[i].split = ParseSplit(splits[i].get<std::string>());
    }
    if (meta.contains("provenance")) ds.provenance = meta.at("provenance");
  }
  ds.Validate();
  return ds;
}

void SaveDataset(const ExpressionDataset& dataset, const std::string& path) {
  dataset.Validate();
  for (const ObservationMeta& r : dataset.rows) {
    if (r.drug.find(',') != std::string::npos || r.covariate.find(',') != std::string::npos) {
      throw InvalidArgument("UnsupportedField", "drug and covariate fields may not contain ','");
    }
  }
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::kIo, "WriteFailed", "cannot write '" + path + "'");
    out << "drug,dose,covariate";
    for (const std::string& g : dataset.genes) out << ',' << g;
    out << '\n';
    std::string row;
    for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
      const ObservationMeta& r = dataset.rows[i];
      row = r.drug;
      row += ',';
      row += FormatScientific(r.dose);
      row += ',';
      row += r.covariate;
      for (Eigen::Index j = 0; j < dataset.matrix.cols(); ++j) {
        row += ',';
        row += FormatDouble(dataset.matrix(static_cast<Eigen::Index>(i), j));
      }
      row += '\n';
      out << row;
    }
    if (!out) throw Error(ErrorKind::kIo, "WriteFailed", "error while writing '" + path + "'");
  }
  nlohmann::json meta;
  meta["format"] = "chemcpa-dataset";
  meta["version"] = 1;
  meta["state"] = dataset.state == PreprocessState::kRaw ? "raw" : "log1p";
  nlohmann::json splits = nlohmann::json::array();
  for (const ObservationMeta& r : dataset.rows) splits.push_back(std::string(ToString(r.split)));
  meta["splits"] = std::move(splits);
  meta["provenance"] = dataset.provenance;
  std::ofstream out(MetaPath(path), std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "WriteFailed", "cannot write '" + MetaPath(path) + "'");
  out << meta.dump(2) << '\n';
}

ExpressionDataset Preprocess(const ExpressionDataset& dataset) {
  if (dataset.state != PreprocessState::kRaw) {
    throw Error(ErrorKind::kState, "AlreadyPreprocessed", "dataset is already normalized and log1p-transformed");
  }
  if ((dataset.matrix.array() < 0.0).any()) {
    throw DataError("NegativeCount", "raw counts must be >= 0");
  }
  ExpressionDataset out = dataset;
  if (out.matrix.rows() == 0) {
    out.state = PreprocessState::kLog1p;
    return out;
  }
  Vector sums = dataset.matrix.rowwise().sum();
  std::vector<double> sorted(sums.data(), sums.data() + sums.size());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  const double median = m % 2 == 1 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  for (Eigen::Index i = 0; i < out.matrix.rows(); ++i) {
    if (sums[i] > 0.0) out.matrix.row(i) *= median / sums[i];
  }
  out.matrix = out.matrix.array().log1p().matrix();
  out.state = PreprocessState::kLog1p;
  return out;
}

ExpressionDataset MakeSplit(const ExpressionDataset& dataset, const SplitConfig& config) {
  if (!(config.valid_fraction > 0.0 && config.valid_fraction < 1.0)) {
    throw InvalidArgument("InvalidFraction", "valid_fraction must lie in (0, 1)");
  }
  if (!(config.control_test_fraction > 0.0 && config.control_test_fraction < 1.0)) {
    throw InvalidArgument("InvalidFraction", "control_test_fraction must lie in (0, 1)");
  }
  const auto drugs = dataset.Drugs();
  const std::set<std::string> known(drugs.begin(), drugs.end());
  for (const std::string& d : config.holdout_drugs) {
    if (!known.contains(d) || d == kControl) throw DataError("UnknownDrug", "holdout drug '" + d + "' is not in the dataset");
  }
  for (const auto& [d, c] : config.holdout_combos) {
    if (!known.contains(d) || d == kControl) throw DataError("UnknownDrug", "holdout combination drug '" + d + "' is not in the dataset");
  }
  const std::set<std::string> holdout(config.holdout_drugs.begin(), config.holdout_drugs.end());
  const std::set<std::pair<std::string, std::string>> combos(config.holdout_combos.begin(),
                                                             config.holdout_combos.end());

  ExpressionDataset out = dataset;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Control rows per covariate, so every split can be given at least one.
  std::map<std::string, std::vector<std::size_t>> controls;
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    ObservationMeta& r = out.rows[i];
    const double u = unit(rng);  // one draw per row keeps the stream aligned
    if (r.is_control()) {
      controls[r.covariate].push_back(i);
      r.split = u < config.control_test_fraction                           ? Split::kTest
                : u < config.control_test_fraction + config.valid_fraction ? Split::kValid
                                                                            : Split::kTrain;
    } else if (holdout.contains(r.drug) || combos.contains({r.drug, r.covariate})) {
      r.split = Split::kTest;
    } else {
      r.split = u < config.valid_fraction ? Split::kValid : Split::kTrain;
    }
  }
  if (controls.empty()) throw DataError("NoControls", "dataset has no CONTROL rows");

  for (auto& [cov, idx] : controls) {
    for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
      const bool present = std::any_of(idx.begin(), idx.end(), [&](std::size_t i) { return out.rows[i].split == s; });
      if (present) continue;
      // Take a row from the most populated split for this covariate.
      std::map<Split, int> counts;
      for (std::size_t i : idx) ++counts[out.rows[i].split];
      auto donor = std::max_element(counts.begin(), counts.end(),
                                    [](const auto& a, const auto& b) { return a.second < b.second; });
      if (donor->second <= 1) continue;
      for (auto it = idx.rbegin(); it != idx.rend(); ++it) {
        if (out.rows[*it].split == donor->first) {
          out.rows[*it].split = s;
          break;
        }
      }
    }
  }
  return out;
}

const std::vector<int>* DegTable::Lookup(const std::string& drug, const std::string& covariate) const {
  if (auto it = per_combo.find({drug, covariate}); it != per_combo.end()) return &it->second;
  if (auto it = per_drug.find(drug); it != per_drug.end()) return &it->second;
  return nullptr;
}

namespace {

struct Moments {
  Vector mean;
  Vector var;  // unbiased
  double count = 0;
};

Moments ComputeMoments(const Matrix& m, const std::vector<std::size_t>& idx) {
  Moments out;
  out.count = static_cast<double>(idx.size());
  out.mean = Vector::Zero(m.cols());
  out.var = Vector::Zero(m.cols());
  if (idx.empty()) return out;
  for (std::size_t i : idx) out.mean += m.row(static_cast<Eigen::Index>(i)).transpose();
  out.mean /= out.count;
  if (idx.size() < 2) return out;
  for (std::size_t i : idx) {
    out.var += (m.row(static_cast<Eigen::Index>(i)).transpose() - out.mean).array().square().matrix();
  }
  out.var /= (out.count - 1.0);
  return out;
}

std::vector<int> TopK(const Moments& treated, const Moments& control, int k) {
  const Eigen::Index n = treated.mean.size();
  std::vector<double> score(static_cast<std::size_t>(n));
  for (Eigen::Index g = 0; g < n; ++g) {
    const double diff = treated.mean[g] - control.mean[g];
    const double se2 = treated.var[g] / treated.count + control.var[g] / control.count;
    double t = 0.0;
    if (se2 > 0.0) {
      t = diff / std::sqrt(se2);
    } else if (diff != 0.0) {
      t = diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    }
    score[static_cast<std::size_t>(g)] = std::abs(t);
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(k)));
  return order;
}

}  // namespace

DegTable ComputeDegs(const ExpressionDataset& dataset, int k, int min_cells) {
  if (k < 1) throw InvalidArgument("InvalidK", "k must be >= 1");
  if (dataset.state != PreprocessState::kLog1p) {
    throw Error(ErrorKind::kState, "NotPreprocessed", "DEGs are computed on preprocessed data");
  }
  DegTable table;
  table.k = k;

  std::map<std::string, std::vector<std::size_t>> controls;
  std::vector<std::size_t> all_controls;
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> treated;
  std::map<std::string, std::vector<std::size_t>> treated_by_drug;
  for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
    const ObservationMeta& r = dataset.rows[i];
    if (r.is_control()) {
      controls[r.covariate].push_back(i);
      all_controls.push_back(i);
    } else {
      treated[{r.drug, r.covariate}].push_back(i);
      treated_by_drug[r.drug].push_back(i);
    }
  }
  if (all_controls.empty()) throw DataError("NoControls", "dataset has no CONTROL rows");

  std::map<std::string, Moments> control_moments;
  for (const auto& [cov, idx] : controls) control_moments.emplace(cov, ComputeMoments(dataset.matrix, idx));
  const Moments pooled_controls = ComputeMoments(dataset.matrix, all_controls);

  for (const auto& [key, idx] : treated) {
    const auto cm = control_moments.find(key.second);
    if (cm == control_moments.end()) {
      table.warnings.push_back("NoControls: covariate '" + key.second + "' has no control rows; using pooled table");
      continue;
    }
    if (static_cast<int>(idx.size()) < min_cells) {
      table.warnings.push_back("TooFewCells: (" + key.first + ", " + key.second + ") has " +
                               std::to_string(idx.size()) + " cells; using pooled table");
      continue;
    }
    table.per_combo.emplace(key, TopK(ComputeMoments(dataset.matrix, idx), cm->second, k));
  }
  for (const auto& [drug, idx] : treated_by_drug) {
    table.per_drug.emplace(drug, TopK(ComputeMoments(dataset.matrix, idx), pooled_controls, k));
  }
  return table;
}

}  // namespace chemcpa
