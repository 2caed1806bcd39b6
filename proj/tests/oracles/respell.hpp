#pragma once

// Writes a parsed graph back out as SMILES from a random root with a random
// neighbor order, so one molecule yields many spellings.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "chemcpa/smiles.hpp"

namespace oracle {

inline std::string AtomToken(const chemcpa::Atom& a) {
  static const std::vector<std::string> organic = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"};
  std::string sym = a.element;
  if (a.aromatic) sym[0] = static_cast<char>(sym[0] - 'A' + 'a');
  const bool plain = a.charge == 0 && !a.hydrogens && !a.isotope &&
                     std::find(organic.begin(), organic.end(), a.element) != organic.end();
  if (plain) return sym;
  std::string s = "[";
  if (a.isotope) s += std::to_string(*a.isotope);
  s += sym;
  if (a.hydrogens && *a.hydrogens > 0) {
    s += "H";
    if (*a.hydrogens > 1) s += std::to_string(*a.hydrogens);
  }
  if (a.charge != 0) {
    s += a.charge > 0 ? "+" : "-";
    if (std::abs(a.charge) > 1) s += std::to_string(std::abs(a.charge));
  }
  return s + "]";
}

inline std::string RandomSpelling(const chemcpa::MolecularGraph& g, std::mt19937_64& rng) {
  const int n = static_cast<int>(g.atoms.size());
  auto adj = g.Adjacency();
  for (auto& nb : adj) std::shuffle(nb.begin(), nb.end(), rng);

  std::vector<char> visited(n, 0);
  std::vector<std::vector<std::pair<int, int>>> children(n);  // (atom, bond)
  std::vector<std::vector<int>> ring_bonds(n);                // bonds closed at this atom, in order
  std::vector<char> is_ring(g.bonds.size(), 0);
  auto plan = [&](auto&& self, int u, int parent_bond) -> void {
    visited[u] = 1;
    for (const auto& [v, b] : adj[u]) {
      if (b == parent_bond || is_ring[b]) continue;
      if (visited[v]) {
        is_ring[b] = 1;
        ring_bonds[v].push_back(b);
        ring_bonds[u].push_back(b);
      } else {
        children[u].emplace_back(v, b);
        self(self, v, b);
      }
    }
  };

  auto bond_token = [&](int b) -> std::string {
    const auto& bond = g.bonds[b];
    const bool both_aromatic = g.atoms[bond.a].aromatic && g.atoms[bond.b].aromatic;
    switch (bond.order) {
      case chemcpa::BondOrder::kSingle: return both_aromatic ? "-" : "";
      case chemcpa::BondOrder::kDouble: return "=";
      case chemcpa::BondOrder::kTriple: return "#";
      case chemcpa::BondOrder::kAromatic: return both_aromatic ? "" : ":";
    }
    return "";
  };

  std::string out;
  std::vector<int> ring_label(g.bonds.size(), 0);
  std::vector<char> label_used(100, 0);
  auto emit = [&](auto&& self, int u) -> void {
    out += AtomToken(g.atoms[u]);
    for (int b : ring_bonds[u]) {
      int label = ring_label[b];
      if (label == 0) {
        label = 1;
        while (label_used[label]) ++label;
        label_used[label] = 1;
        ring_label[b] = label;
        out += bond_token(b);
      } else {
        label_used[label] = 0;
      }
      out += label < 10 ? std::to_string(label) : "%" + std::to_string(label);
    }
    for (std::size_t i = 0; i < children[u].size(); ++i) {
      const auto [v, b] = children[u][i];
      const bool last = i + 1 == children[u].size();
      if (!last) out += "(";
      out += bond_token(b);
      self(self, v);
      if (!last) out += ")";
    }
  };

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  bool first = true;
  for (int root : order) {
    if (visited[root]) continue;
    plan(plan, root, -1);
    if (!first) out += ".";
    first = false;
    emit(emit, root);
  }
  return out;
}

}  // namespace oracle
