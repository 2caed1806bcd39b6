#include "chemcpa/transfer.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "chemcpa/hash.hpp"

namespace chemcpa {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'H', 'E', 'M', 'C', 'P', 'A', '\0'};

Error CorruptFile(const std::string& what) { return Error(ErrorKind::kData, "CorruptFile", what); }
Error ShapeMismatch(const std::string& what) { return Error(ErrorKind::kData, "ShapeMismatch", what); }
Error MappingInvalid(const std::string& what) { return Error(ErrorKind::kData, "MappingInvalid", what); }

template <typename T>
void Put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T Get() {
    Need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view Bytes(std::uint64_t n) {
    Need(n);
    std::string_view s = bytes_.substr(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void Need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CorruptFile("checkpoint is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

// Row-major named views over every parameter tensor, in file order.
void CollectMlp(std::vector<std::pair<std::string, Matrix>>& out, const std::string& prefix, const Mlp& mlp) {
  for (std::size_t i = 0; i < mlp.layers().size(); ++i) {
    const Layer& layer = mlp.layers()[i];
    out.emplace_back(prefix + "." + std::to_string(i) + ".weight", layer.weight);
    out.emplace_back(prefix + "." + std::to_string(i) + ".bias", Matrix(layer.bias));
  }
}

std::vector<std::pair<std::string, Matrix>> CollectSections(const ChemCpaModel& model) {
  std::vector<std::pair<std::string, Matrix>> out;
  CollectMlp(out, "encoder", model.encoder);
  CollectMlp(out, "decoder", model.decoder);
  CollectMlp(out, "perturbation_encoder", model.perturbation_encoder);
  CollectMlp(out, "dosage_scaler", model.dosage_scaler);
  CollectMlp(out, "adversary_drug", model.adversary_drug);
  CollectMlp(out, "adversary_cov", model.adversary_cov);
  out.emplace_back("covariate_embeddings", model.covariate_embeddings);
  if (model.adapters) {
    CollectMlp(out, "adapter_input", model.adapters->input);
    CollectMlp(out, "adapter_mean", model.adapters->mean);
    CollectMlp(out, "adapter_variance", model.adapters->variance);
  }
  return out;
}

// Linear single-layer adapter from a dense map.
Mlp LinearMlp(const Matrix& weight, const Vector& bias) {
  Mlp m = Mlp::Zeros({static_cast<int>(weight.cols()), static_cast<int>(weight.rows())});
  m.mutable_layers()[0].weight = weight;
  m.mutable_layers()[0].bias = bias;
  return m;
}

}  // namespace

std::string EncodeCheckpoint(const ChemCpaModel& model, const nlohmann::json& provenance) {
  nlohmann::json header;
  header["format"] = "chemcpa-checkpoint";
  header["version"] = kCheckpointVersion;
  header["hparams"] = model.hparams().ToJson();
  header["genes"] = model.genes();
  header["core_genes"] = model.core_genes();
  header["drugs"] = model.drugs();
  header["covariates"] = model.covariates();
  header["adapters"] = model.adapters.has_value();
  header["molecule_encoder"] = model.molecule_encoder().name();
  header["provenance"] = provenance;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  Put<std::uint32_t>(out, kCheckpointVersion);
  Put<std::uint64_t>(out, text.size());
  out += text;
  const auto sections = CollectSections(model);
  Put<std::uint32_t>(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, m] : sections) {
    Put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    Put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    Put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) Put<double>(out, m(r, c));
    }
  }
  Put<std::uint64_t>(out, Xxh64(out));
  return out;
}

ChemCpaModel DecodeCheckpoint(const std::string& bytes, nlohmann::json* header_out) {
  Reader in(bytes);
  if (in.Bytes(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw CorruptFile("not a checkpoint (bad magic)");
  }
  const auto version = in.Get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kData, "VersionMismatch",
                "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < sizeof(std::uint64_t)) throw CorruptFile("checkpoint is truncated");
  {
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, sizeof(stored));
    if (Xxh64(std::string_view(bytes).substr(0, body)) != stored) throw CorruptFile("checksum mismatch");
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.Bytes(in.Get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("header is not valid JSON: ") + e.what());
  }

  ChemCpaModel model;
  try {
    const HyperParams hp = HyperParams::FromJson(header.at("hparams"));
    auto genes = header.at("genes").get<std::vector<std::string>>();
    const int core = header.at("core_genes").get<int>();
    const bool adapters = header.at("adapters").get<bool>();
    auto drugs = header.at("drugs").get<std::vector<std::string>>();
    auto covariates = header.at("covariates").get<std::vector<std::string>>();
    if (drugs.empty() || drugs.front() != kControl) throw ShapeMismatch("drug vocabulary must start with CONTROL");
    if (core < 1) throw ShapeMismatch("core gene count must be >= 1");
    if (!adapters && core != static_cast<int>(genes.size())) throw ShapeMismatch("core gene count differs from gene list");
    std::vector<std::string> core_names = genes;
    if (adapters) {
      core_names.clear();
      for (int i = 0; i < core; ++i) core_names.push_back("core_" + std::to_string(i));
    }
    model = ChemCpaModel(hp, core_names, drugs, covariates, 0);
    if (model.drugs() != drugs) throw ShapeMismatch("drug vocabulary contains duplicates");
    if (adapters) {
      const int n = static_cast<int>(genes.size());
      model.adapters = GeneAdapters{Mlp::Zeros({n, core}), Mlp::Zeros({core, n}), Mlp::Zeros({core, n})};
      model.SetGenes(genes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("malformed header: ") + e.what());
  }

  // Destination tensors in the same order CollectSections writes them.
  std::vector<std::pair<std::string, std::pair<Matrix*, Vector*>>> dest;
  auto add_mlp = [&](const std::string& prefix, Mlp& mlp) {
    auto& layers = mlp.mutable_layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      dest.push_back({prefix + "." + std::to_string(i) + ".weight", {&layers[i].weight, nullptr}});
      dest.push_back({prefix + "." + std::to_string(i) + ".bias", {nullptr, &layers[i].bias}});
    }
  };
  add_mlp("encoder", model.encoder);
  add_mlp("decoder", model.decoder);
  add_mlp("perturbation_encoder", model.perturbation_encoder);
  add_mlp("dosage_scaler", model.dosage_scaler);
  add_mlp("adversary_drug", model.adversary_drug);
  add_mlp("adversary_cov", model.adversary_cov);
  dest.push_back({"covariate_embeddings", {&model.covariate_embeddings, nullptr}});
  if (model.adapters) {
    add_mlp("adapter_input", model.adapters->input);
    add_mlp("adapter_mean", model.adapters->mean);
    add_mlp("adapter_variance", model.adapters->variance);
  }

  const auto count = in.Get<std::uint32_t>();
  if (count != dest.size()) {
    throw ShapeMismatch("checkpoint has " + std::to_string(count) + " sections, architecture needs " +
                        std::to_string(dest.size()));
  }
  for (auto& [name, target] : dest) {
    const std::string_view got = in.Bytes(in.Get<std::uint32_t>());
    if (got != name) throw ShapeMismatch("expected section '" + name + "', found '" + std::string(got) + "'");
    const auto rows = in.Get<std::uint64_t>();
    const auto cols = in.Get<std::uint64_t>();
    const Eigen::Index want_rows = target.first ? target.first->rows() : target.second->size();
    const Eigen::Index want_cols = target.first ? target.first->cols() : 1;
    if (rows != static_cast<std::uint64_t>(want_rows) || cols != static_cast<std::uint64_t>(want_cols)) {
      throw ShapeMismatch("section '" + name + "' is " + std::to_string(rows) + "x" + std::to_string(cols) +
                          ", expected " + std::to_string(want_rows) + "x" + std::to_string(want_cols));
    }
    for (Eigen::Index r = 0; r < want_rows; ++r) {
      for (Eigen::Index c = 0; c < want_cols; ++c) {
        const double v = in.Get<double>();
        if (target.first) {
          (*target.first)(r, c) = v;
        } else {
          (*target.second)(r) = v;
        }
      }
    }
  }
  if (in.pos() + sizeof(std::uint64_t) != bytes.size()) throw CorruptFile("trailing bytes after the last section");
  if (header_out) *header_out = std::move(header);
  return model;
}

void SaveCheckpoint(const ChemCpaModel& model, const std::string& path, const nlohmann::json& provenance) {
  const std::string bytes = EncodeCheckpoint(model, provenance);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "IoError", "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "IoError", "write failed for " + path);
}

ChemCpaModel LoadCheckpoint(const std::string& path, nlohmann::json* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "FileNotFound", "cannot open checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return DecodeCheckpoint(buf.str(), header);
}

// ---------------------------------------------------------------------------
// Gene mapping and surgery

void GeneMapping::Validate() const {
  if (n_source < 1 || n_target < 1) throw MappingInvalid("gene counts must be >= 1");
  std::vector<char> seen_t(static_cast<std::size_t>(n_target), 0);
  std::vector<char> seen_s(static_cast<std::size_t>(n_source), 0);
  auto mark = [](std::vector<char>& seen, int i, const char* side) {
    if (i < 0 || i >= static_cast<int>(seen.size())) {
      throw MappingInvalid(std::string(side) + " index " + std::to_string(i) + " out of range");
    }
    if (seen[static_cast<std::size_t>(i)]++) {
      throw MappingInvalid(std::string(side) + " index " + std::to_string(i) + " mapped twice");
    }
  };
  for (const auto& [t, s] : shared) {
    mark(seen_t, t, "target");
    mark(seen_s, s, "source");
  }
  for (int t : target_only) mark(seen_t, t, "target");
  for (int s : source_only) mark(seen_s, s, "source");
  for (char c : seen_t) {
    if (!c) throw MappingInvalid("a target gene is neither shared nor target-only");
  }
  for (char c : seen_s) {
    if (!c) throw MappingInvalid("a source gene is neither shared nor source-only");
  }
}

namespace {

GeneMapping BuildMapping(const std::vector<std::string>& source, const std::vector<std::string>& target,
                         const std::map<std::string, std::string>& target_to_source) {
  std::map<std::string, int> src_index;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!src_index.emplace(source[i], static_cast<int>(i)).second) {
      throw MappingInvalid("duplicate source gene '" + source[i] + "'");
    }
  }
  GeneMapping m;
  m.n_source = static_cast<int>(source.size());
  m.n_target = static_cast<int>(target.size());
  std::set<int> used;
  std::set<std::string> target_seen;
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (!target_seen.insert(target[t]).second) throw MappingInvalid("duplicate target gene '" + target[t] + "'");
    auto it = target_to_source.find(target[t]);
    if (it == target_to_source.end()) {
      m.target_only.push_back(static_cast<int>(t));
      continue;
    }
    auto s = src_index.find(it->second);
    if (s == src_index.end()) throw MappingInvalid("unknown source gene '" + it->second + "'");
    if (!used.insert(s->second).second) throw MappingInvalid("source gene '" + it->second + "' mapped twice");
    m.shared.emplace_back(static_cast<int>(t), s->second);
  }
  for (int s = 0; s < m.n_source; ++s) {
    if (!used.count(s)) m.source_only.push_back(s);
  }
  m.Validate();
  return m;
}

}  // namespace

GeneMapping MapGenesByName(const std::vector<std::string>& source, const std::vector<std::string>& target) {
  std::set<std::string> src(source.begin(), source.end());
  std::map<std::string, std::string> pairs;
  for (const std::string& g : target) {
    if (src.count(g)) pairs[g] = g;
  }
  return BuildMapping(source, target, pairs);
}

GeneMapping LoadGeneMap(const std::string& path, const std::vector<std::string>& source,
                        const std::vector<std::string>& target) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "IoError", "cannot open " + path);
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::string> pairs;
  std::set<std::string> known(target.begin(), target.end());
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = SplitCsvLine(line);
    if (line_no == 1) {
      if (cells.size() != 2 || cells[0] != "target_name" || cells[1] != "source_name") {
        throw MappingInvalid(path + ":1: header must be target_name,source_name");
      }
      continue;
    }
    if (cells.size() != 2) throw MappingInvalid(path + ":" + std::to_string(line_no) + ": expected 2 columns");
    const std::string t(cells[0]);
    if (!known.count(t)) throw MappingInvalid(path + ":" + std::to_string(line_no) + ": unknown target gene '" + t + "'");
    if (!pairs.emplace(t, std::string(cells[1])).second) {
      throw MappingInvalid(path + ":" + std::to_string(line_no) + ": target gene '" + t + "' listed twice");
    }
  }
  return BuildMapping(source, target, pairs);
}

ChemCpaModel Surgery(const ChemCpaModel& model, const GeneMapping& mapping,
                     const std::vector<std::string>& target_genes, std::uint64_t seed) {
  mapping.Validate();
  if (mapping.n_source != model.num_genes()) {
    throw MappingInvalid("mapping has " + std::to_string(mapping.n_source) + " source genes, model has " +
                         std::to_string(model.num_genes()));
  }
  if (mapping.n_target != static_cast<int>(target_genes.size())) {
    throw MappingInvalid("mapping target size differs from the new gene list");
  }
  const Eigen::Index ns = mapping.n_source;
  const Eigen::Index nt = mapping.n_target;
  std::mt19937_64 rng(DeriveSeed(seed, 0x5E6));
  std::normal_distribution<double> small(0.0, 1e-2);

  Matrix in_map = Matrix::Zero(ns, nt);      // current genes <- target genes
  Matrix out_map = Matrix::Zero(nt, ns);     // target genes <- current genes
  Matrix var_map = Matrix::Zero(nt, ns);
  for (const auto& [t, s] : mapping.shared) {
    in_map(s, t) = 1.0;
    out_map(t, s) = 1.0;
    var_map(t, s) = 1.0;
  }
  for (int t : mapping.target_only) {
    for (Eigen::Index s = 0; s < ns; ++s) in_map(s, t) = small(rng);
  }
  for (int t : mapping.target_only) {
    for (Eigen::Index s = 0; s < ns; ++s) out_map(t, s) = small(rng);
  }
  for (int t : mapping.target_only) {
    for (Eigen::Index s = 0; s < ns; ++s) var_map(t, s) = small(rng);
  }

  ChemCpaModel out = model;
  if (model.adapters) {
    // Compose with the existing adapters so the core network stays untouched.
    const Layer& in = model.adapters->input.layers()[0];
    const Layer& mu = model.adapters->mean.layers()[0];
    const Layer& var = model.adapters->variance.layers()[0];
    out.adapters = GeneAdapters{
        LinearMlp(in.weight * in_map, in.bias),
        LinearMlp(out_map * mu.weight, out_map * mu.bias),
        LinearMlp(var_map * var.weight, var_map * var.bias),
    };
  } else {
    out.adapters = GeneAdapters{
        LinearMlp(in_map, Vector::Zero(ns)),
        LinearMlp(out_map, Vector::Zero(nt)),
        LinearMlp(var_map, Vector::Zero(nt)),
    };
  }
  out.SetGenes(target_genes);
  return out;
}

FinetuneResult Finetune(const ChemCpaModel& pretrained, const ExpressionDataset& target,
                        const GeneMapping* mapping, FitOptions options) {
  if (target.state != PreprocessState::kLog1p) {
    throw Error(ErrorKind::kState, "NotPreprocessed", "fine-tuning expects a preprocessed dataset");
  }
  FinetuneResult result{pretrained, {}};
  if (mapping || target.genes != pretrained.genes()) {
    const GeneMapping by_name = mapping ? GeneMapping{} : MapGenesByName(pretrained.genes(), target.genes);
    result.model = Surgery(pretrained, mapping ? *mapping : by_name, target.genes, options.seed);
  }
  std::vector<std::string> drugs = target.Drugs();
  result.model.AddDrugs(drugs, DeriveSeed(options.seed, 0xD7));
  result.model.AddCovariates(target.Covariates(), DeriveSeed(options.seed, 0xC0));
  options.tag = "pretrained";
  result.log = Fit(result.model, target, options);
  return result;
}

}  // namespace chemcpa
