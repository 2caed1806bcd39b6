#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "chemcpa/smiles.hpp"

namespace chemcpa {

inline constexpr int kDefaultFingerprintDim = 200;
inline constexpr int kDefaultMaxPathLength = 7;

struct Fingerprint {
  std::vector<double> values;  // entries are exactly 0.0 or 1.0
  std::string source;
};

// Atom label used inside path strings: element symbol, lowercased when
// aromatic, followed by a signed charge when non-zero ("n", "N+", "O-2").
std::string AtomLabel(const Atom& atom);
char BondLabel(BondOrder order);

// All simple paths with 0..max_len bonds, each rendered as
// atom,bond,atom,... labels. A path is reported once, using the
// lexicographically smaller of its two directional renderings.
// The result is sorted, so equal multisets compare equal.
std::vector<std::string> EnumeratePaths(const MolecularGraph& graph, int max_len);

// Folded binary path fingerprint: bit Xxh64(path, seed 0) mod dim is set for
// every enumerated path.
Fingerprint ComputeFingerprint(const MolecularGraph& graph, int dim = kDefaultFingerprintDim,
                               int max_len = kDefaultMaxPathLength);
Fingerprint ComputeFingerprint(std::string_view smiles, int dim = kDefaultFingerprintDim,
                               int max_len = kDefaultMaxPathLength);

// Maps a molecule (as SMILES) onto a fixed-width embedding h_drug. The model
// only depends on this interface, so learned or pretrained encoders can be
// dropped in next to the hashed fingerprint.
class MoleculeEncoder {
 public:
  virtual ~MoleculeEncoder() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> Encode(std::string_view smiles) const = 0;
  virtual std::string name() const = 0;
};

class HashedPathEncoder final : public MoleculeEncoder {
 public:
  explicit HashedPathEncoder(int dim = kDefaultFingerprintDim, int max_len = kDefaultMaxPathLength);

  int dim() const override { return dim_; }
  int max_len() const { return max_len_; }
  std::vector<double> Encode(std::string_view smiles) const override;
  std::string name() const override { return "hashed-path"; }

 private:
  int dim_;
  int max_len_;
};

}  // namespace chemcpa
