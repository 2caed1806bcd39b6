#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chemcpa/data.hpp"
#include "chemcpa/model.hpp"
#include "chemcpa/training.hpp"

namespace chemcpa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout, all integers little-endian:
//   "CHEMCPA\0"                 8-byte magic
//   u32 version
//   u64 n, n bytes              JSON header (hparams, genes, drugs, covariates, ...)
//   u32 section count, then per section:
//     u32 n, n bytes name; u64 rows; u64 cols; rows*cols f64 values, row-major
//   u64 XXH64 of every preceding byte
void SaveCheckpoint(const ChemCpaModel& model, const std::string& path,
                    const nlohmann::json& provenance = nlohmann::json::object());
// Throws VersionMismatch, CorruptFile (truncation, bad magic, checksum) or
// ShapeMismatch (sections disagree with the recorded architecture).
ChemCpaModel LoadCheckpoint(const std::string& path, nlohmann::json* header = nullptr);

// Serializes to / from an in-memory byte string with the same layout.
std::string EncodeCheckpoint(const ChemCpaModel& model, const nlohmann::json& provenance = nlohmann::json::object());
ChemCpaModel DecodeCheckpoint(const std::string& bytes, nlohmann::json* header = nullptr);

struct GeneMapping {
  int n_source = 0;
  int n_target = 0;
  std::vector<std::pair<int, int>> shared;  // (target index, source index)
  std::vector<int> target_only;
  std::vector<int> source_only;

  // Injective on both sides with every index in range; throws MappingInvalid.
  void Validate() const;
};

GeneMapping MapGenesByName(const std::vector<std::string>& source, const std::vector<std::string>& target);
// `genes.map` CSV with header target_name,source_name. Target genes without a
// row are target-only.
GeneMapping LoadGeneMap(const std::string& path, const std::vector<std::string>& source,
                        const std::vector<std::string>& target);

// Adds (or re-composes) linear gene adapters so the model reads and predicts
// `target_genes`. Shared genes are routed with weight 1, target-only genes get
// N(0, 1e-2^2) weights, biases start at zero.
ChemCpaModel Surgery(const ChemCpaModel& model, const GeneMapping& mapping,
                     const std::vector<std::string>& target_genes, std::uint64_t seed);

struct FinetuneResult {
  ChemCpaModel model;
  TrainingLog log;
};

// Surgery when the gene lists differ (by name unless `mapping` is given),
// vocabulary merge, then Fit tagged "pretrained".
FinetuneResult Finetune(const ChemCpaModel& pretrained, const ExpressionDataset& target,
                        const GeneMapping* mapping, FitOptions options);

}  // namespace chemcpa
