#include "chemcpa/fingerprint.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>

#include "chemcpa/hash.hpp"

namespace chemcpa {
namespace {

struct PathWalker {
  const MolecularGraph& graph;
  const std::vector<std::vector<std::pair<int, int>>>& adj;
  int max_len;
  std::vector<std::string>& out;

  std::vector<int> atoms;
  std::vector<int> bonds;
  std::vector<char> visited;

  void Walk(int atom) {
    if (static_cast<int>(bonds.size()) == max_len) return;
    for (const auto& [next, bond] : adj[atom]) {
      if (visited[next]) continue;
      visited[next] = 1;
      atoms.push_back(next);
      bonds.push_back(bond);
      // Each undirected path is seen from both ends; keep the start < end copy.
      if (atoms.front() < next) out.push_back(Render());
      Walk(next);
      atoms.pop_back();
      bonds.pop_back();
      visited[next] = 0;
    }
  }

  std::string Render() const {
    std::string forward = AtomLabel(graph.atoms[atoms[0]]);
    for (std::size_t i = 0; i < bonds.size(); ++i) {
      forward += BondLabel(graph.bonds[bonds[i]].order);
      forward += AtomLabel(graph.atoms[atoms[i + 1]]);
    }
    std::string backward = AtomLabel(graph.atoms[atoms.back()]);
    for (std::size_t i = bonds.size(); i-- > 0;) {
      backward += BondLabel(graph.bonds[bonds[i]].order);
      backward += AtomLabel(graph.atoms[atoms[i]]);
    }
    return std::min(forward, backward);
  }
};

}  // namespace

std::string AtomLabel(const Atom& atom) {
  std::string label = atom.element;
  if (atom.aromatic) {
    std::transform(label.begin(), label.end(), label.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  }
  if (atom.charge > 0) label += '+';
  if (atom.charge < 0) label += '-';
  if (atom.charge > 1 || atom.charge < -1) label += std::to_string(std::abs(atom.charge));
  return label;
}

char BondLabel(BondOrder order) {
  switch (order) {
    case BondOrder::kSingle: return '-';
    case BondOrder::kDouble: return '=';
    case BondOrder::kTriple: return '#';
    case BondOrder::kAromatic: return ':';
  }
  return '?';
}

std::vector<std::string> EnumeratePaths(const MolecularGraph& graph, int max_len) {
  if (max_len < 1 || max_len > 10) {
    throw InvalidArgument("InvalidPathLength", "max path length must lie in [1, 10]");
  }
  const auto adj = graph.Adjacency();
  std::vector<std::string> out;
  PathWalker walker{graph, adj, max_len, out, {}, {}, std::vector<char>(graph.atoms.size(), 0)};
  for (int start = 0; start < static_cast<int>(graph.atoms.size()); ++start) {
    out.push_back(AtomLabel(graph.atoms[start]));
    walker.atoms = {start};
    walker.visited[start] = 1;
    walker.Walk(start);
    walker.visited[start] = 0;
  }
  std::sort(out.begin(), out.end());
  return out;
}

Fingerprint ComputeFingerprint(const MolecularGraph& graph, int dim, int max_len) {
  if (dim < 8) throw InvalidArgument("InvalidFingerprintDim", "fingerprint dim must be >= 8");
  Fingerprint fp;
  fp.values.assign(static_cast<std::size_t>(dim), 0.0);
  for (const std::string& path : EnumeratePaths(graph, max_len)) {
    fp.values[Xxh64(path) % static_cast<std::uint64_t>(dim)] = 1.0;
  }
  return fp;
}

Fingerprint ComputeFingerprint(std::string_view smiles, int dim, int max_len) {
  Fingerprint fp = ComputeFingerprint(ParseSmiles(smiles), dim, max_len);
  fp.source = std::string(smiles);
  return fp;
}

HashedPathEncoder::HashedPathEncoder(int dim, int max_len) : dim_(dim), max_len_(max_len) {
  if (dim < 8) throw InvalidArgument("InvalidFingerprintDim", "fingerprint dim must be >= 8");
  if (max_len < 1 || max_len > 10) {
    throw InvalidArgument("InvalidPathLength", "max path length must lie in [1, 10]");
  }
}

std::vector<double> HashedPathEncoder::Encode(std::string_view smiles) const {
  return ComputeFingerprint(smiles, dim_, max_len_).values;
}

}  // namespace chemcpa
