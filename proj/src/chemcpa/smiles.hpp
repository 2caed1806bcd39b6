#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chemcpa/error.hpp"

namespace chemcpa {

enum class BondOrder { kSingle, kDouble, kTriple, kAromatic };

struct Atom {
  std::string element;  // canonical capitalization, e.g. "C", "Cl"
  bool aromatic = false;
  int charge = 0;
  std::optional<int> hydrogens;  // bracket atoms only
  std::optional<int> isotope;
};

struct Bond {
  int a = 0;
  int b = 0;
  BondOrder order = BondOrder::kSingle;
};

struct MolecularGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  // Non-fatal notes from parsing, e.g. discarded stereo markers.
  std::vector<std::string> warnings;

  // Neighbor lists (atom index, bond index), built on demand.
  std::vector<std::vector<std::pair<int, int>>> Adjacency() const;
};

enum class SmilesErrorKind {
  kEmptyInput,
  kUnbalancedBranch,
  kUnclosedRing,
  kUnknownAtomToken,
  kTrailingInput,
  kInvalidBond,
};

class SmilesError : public Error {
 public:
  SmilesError(SmilesErrorKind kind, std::size_t offset, const std::string& detail);

  SmilesErrorKind smiles_kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  SmilesErrorKind kind_;
  std::size_t offset_;
};

std::string_view ToString(SmilesErrorKind kind);

// Parses the organic-subset / bracket-atom dialect used for drug-like
// molecules: bonds - = # :, branches, ring closures (digits and %nn), and
// '.' component separators. Stereo markers (/ \ @) are accepted and dropped
// with a warning. Implicit hydrogens stay implicit.
MolecularGraph ParseSmiles(std::string_view text);

}  // namespace chemcpa
