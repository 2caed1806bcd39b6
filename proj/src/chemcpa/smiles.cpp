#include "chemcpa/smiles.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <map>

namespace chemcpa {
namespace {

constexpr std::array<std::string_view, 118> kElements = {
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",
    "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh",
    "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re",
    "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db",
    "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

// Lowercase spellings allowed for aromatic bracket atoms.
constexpr std::array<std::string_view, 9> kAromaticBracket = {"b",  "c",  "n",  "o", "p",
                                                              "s",  "se", "as", "te"};

bool IsElement(std::string_view s) {
  return std::find(kElements.begin(), kElements.end(), s) != kElements.end();
}

std::string Capitalize(std::string_view s) {
  std::string out(s);
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

bool IsDigit(char c) { return c >= '0' && c <= '9'; }

struct RingOpening {
  int atom;
  std::optional<BondOrder> order;
  std::size_t offset;
};

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  MolecularGraph Run() {
    if (text_.empty()) throw SmilesError(SmilesErrorKind::kEmptyInput, 0, "empty SMILES");
    while (pos_ < text_.size()) Step();
    if (pending_) {
      throw SmilesError(SmilesErrorKind::kTrailingInput, pending_offset_,
                        "bond symbol is not followed by an atom");
    }
    if (!branches_.empty()) {
      throw SmilesError(SmilesErrorKind::kUnbalancedBranch, branches_.back().second,
                        "branch opened here is never closed");
    }
    if (!rings_.empty()) {
      const auto& [label, opening] = *rings_.begin();
      throw SmilesError(SmilesErrorKind::kUnclosedRing, opening.offset,
                        "ring bond " + std::to_string(label) + " is never closed");
    }
    if (graph_.atoms.empty()) {
      throw SmilesError(SmilesErrorKind::kEmptyInput, 0, "no atoms");
    }
    return std::move(graph_);
  }

 private:
  void Step() {
    const char c = text_[pos_];
    switch (c) {
      case '(':
        if (prev_ < 0) Fail(SmilesErrorKind::kUnbalancedBranch, "branch without a preceding atom");
        if (pending_) Fail(SmilesErrorKind::kInvalidBond, "bond symbol before '('");
        branches_.emplace_back(prev_, pos_);
        ++pos_;
        return;
      case ')':
        if (branches_.empty()) Fail(SmilesErrorKind::kUnbalancedBranch, "unmatched ')'");
        if (pending_) Fail(SmilesErrorKind::kInvalidBond, "bond symbol before ')'");
        prev_ = branches_.back().first;
        branches_.pop_back();
        ++pos_;
        return;
      case '-':
        return SetPending(BondOrder::kSingle);
      case '=':
        return SetPending(BondOrder::kDouble);
      case '#':
        return SetPending(BondOrder::kTriple);
      case ':':
        return SetPending(BondOrder::kAromatic);
      case '/':
      case '\\':
        Warn("directional bond marker discarded");
        return SetPending(BondOrder::kSingle);
      case '.':
        if (prev_ < 0 || pending_) Fail(SmilesErrorKind::kInvalidBond, "misplaced '.'");
        prev_ = -1;
        ++pos_;
        return;
      case '%':
        return RingClosure();
      case '[':
        return BracketAtom();
      case ' ':
      case '\t':
      case '\r':
      case '\n':
        Fail(SmilesErrorKind::kTrailingInput, "unexpected whitespace");
      default:
        break;
    }
    if (IsDigit(c)) return RingClosure();
    OrganicAtom();
  }

  [[noreturn]] void Fail(SmilesErrorKind kind, const std::string& detail) const {
    throw SmilesError(kind, pos_, detail);
  }

  void Warn(const std::string& what) {
    graph_.warnings.push_back(what + " at offset " + std::to_string(pos_));
  }

  void SetPending(BondOrder order) {
    if (prev_ < 0) Fail(SmilesErrorKind::kInvalidBond, "bond symbol without a preceding atom");
    if (pending_) Fail(SmilesErrorKind::kInvalidBond, "two consecutive bond symbols");
    pending_ = order;
    pending_offset_ = pos_;
    ++pos_;
  }

  void AddBond(int a, int b, BondOrder order) {
    if (a == b) Fail(SmilesErrorKind::kInvalidBond, "bond from an atom to itself");
    for (const Bond& bond : graph_.bonds) {
      if ((bond.a == a && bond.b == b) || (bond.a == b && bond.b == a)) {
        Fail(SmilesErrorKind::kInvalidBond, "duplicate bond between the same atoms");
      }
    }
    graph_.bonds.push_back(Bond{a, b, order});
  }

  BondOrder DefaultOrder(int a, int b) const {
    return graph_.atoms[a].aromatic && graph_.atoms[b].aromatic ? BondOrder::kAromatic
                                                                : BondOrder::kSingle;
  }

  void PushAtom(Atom atom) {
    graph_.atoms.push_back(std::move(atom));
    const int idx = static_cast<int>(graph_.atoms.size()) - 1;
    if (prev_ >= 0) AddBond(prev_, idx, pending_.value_or(DefaultOrder(prev_, idx)));
    pending_.reset();
    prev_ = idx;
  }

  void OrganicAtom() {
    const std::string_view rest = text_.substr(pos_);
    Atom atom;
    std::size_t len = 1;
    if (rest.starts_with("Cl") || rest.starts_with("Br")) {
      atom.element = std::string(rest.substr(0, 2));
      len = 2;
    } else {
      switch (rest[0]) {
        case 'B': case 'C': case 'N': case 'O': case 'P': case 'S': case 'F': case 'I':
          atom.element = std::string(1, rest[0]);
          break;
        case 'b': case 'c': case 'n': case 'o': case 'p': case 's':
          atom.element = Capitalize(rest.substr(0, 1));
          atom.aromatic = true;
          break;
        case '*':
          Fail(SmilesErrorKind::kUnknownAtomToken, "wildcard atoms are not supported");
        default:
          Fail(SmilesErrorKind::kUnknownAtomToken,
               std::string("unexpected character '") + rest[0] + "'");
      }
    }
    PushAtom(std::move(atom));
    pos_ += len;
  }

  void BracketAtom() {
    const std::size_t open = pos_;
    const std::size_t close = text_.find(']', open);
    if (close == std::string_view::npos) {
      Fail(SmilesErrorKind::kUnknownAtomToken, "bracket atom is not terminated");
    }
    const std::string_view body = text_.substr(open + 1, close - open - 1);
    std::size_t i = 0;
    auto fail_at = [&](const std::string& detail) {
      throw SmilesError(SmilesErrorKind::kUnknownAtomToken, open + 1 + i, detail);
    };
    auto read_int = [&]() -> std::optional<int> {
      const std::size_t start = i;
      int value = 0;
      while (i < body.size() && IsDigit(body[i]) && i - start < 4) value = value * 10 + (body[i++] - '0');
      if (i == start) return std::nullopt;
      return value;
    };

    Atom atom;
    atom.isotope = read_int();

    if (i < body.size() && body[i] == '*') fail_at("wildcard atoms are not supported");
    // Longest match first: two-letter symbols, then one-letter.
    bool matched = false;
    for (std::size_t len : {2u, 1u}) {
      if (i + len > body.size()) continue;
      const std::string_view sym = body.substr(i, len);
      if (IsElement(sym)) {
        atom.element = std::string(sym);
      } else if (std::find(kAromaticBracket.begin(), kAromaticBracket.end(), sym) !=
                 kAromaticBracket.end()) {
        atom.element = Capitalize(sym);
        atom.aromatic = true;
      } else {
        continue;
      }
      i += len;
      matched = true;
      break;
    }
    if (!matched) fail_at("unknown element symbol");

    if (i < body.size() && body[i] == '@') {
      Warn("chirality marker discarded");
      while (i < body.size() && body[i] == '@') ++i;
      if (i + 1 < body.size() && std::isupper(static_cast<unsigned char>(body[i])) &&
          std::isupper(static_cast<unsigned char>(body[i + 1]))) {
        i += 2;
        read_int();
      }
    }
    if (i < body.size() && body[i] == 'H') {
      ++i;
      atom.hydrogens = read_int().value_or(1);
    } else {
      atom.hydrogens = 0;
    }
    if (i < body.size() && (body[i] == '+' || body[i] == '-')) {
      const char sign = body[i++];
      int magnitude = 1;
      if (auto n = read_int()) {
        magnitude = *n;
      } else {
        while (i < body.size() && body[i] == sign) {
          ++magnitude;
          ++i;
        }
      }
      atom.charge = sign == '+' ? magnitude : -magnitude;
    }
    if (i < body.size() && body[i] == ':') {
      ++i;
      if (!read_int()) fail_at("atom class requires a number");
    }
    if (i != body.size()) fail_at("unexpected text inside bracket atom");

    PushAtom(std::move(atom));
    pos_ = close + 1;
  }

  void RingClosure() {
    if (prev_ < 0) Fail(SmilesErrorKind::kInvalidBond, "ring bond without a preceding atom");
    const std::size_t at = pos_;
    int label = 0;
    if (text_[pos_] == '%') {
      if (pos_ + 2 >= text_.size() || !IsDigit(text_[pos_ + 1]) || !IsDigit(text_[pos_ + 2])) {
        Fail(SmilesErrorKind::kUnknownAtomToken, "'%' must be followed by two digits");
      }
      label = (text_[pos_ + 1] - '0') * 10 + (text_[pos_ + 2] - '0');
      pos_ += 3;
    } else {
      label = text_[pos_] - '0';
      ++pos_;
    }

    auto it = rings_.find(label);
    if (it == rings_.end()) {
      rings_.emplace(label, RingOpening{prev_, pending_, at});
      pending_.reset();
      return;
    }
    const RingOpening opening = it->second;
    rings_.erase(it);
    if (pending_ && opening.order && *pending_ != *opening.order) {
      throw SmilesError(SmilesErrorKind::kInvalidBond, at, "conflicting ring bond orders");
    }
    const BondOrder order =
        pending_.value_or(opening.order.value_or(DefaultOrder(opening.atom, prev_)));
    pending_.reset();
    const std::size_t saved = pos_;
    pos_ = at;
    AddBond(opening.atom, prev_, order);
    pos_ = saved;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  MolecularGraph graph_;
  int prev_ = -1;
  std::optional<BondOrder> pending_;
  std::size_t pending_offset_ = 0;
  std::vector<std::pair<int, std::size_t>> branches_;
  std::map<int, RingOpening> rings_;
};

}  // namespace

std::string_view ToString(SmilesErrorKind kind) {
  switch (kind) {
    case SmilesErrorKind::kEmptyInput: return "EmptyInput";
    case SmilesErrorKind::kUnbalancedBranch: return "UnbalancedBranch";
    case SmilesErrorKind::kUnclosedRing: return "UnclosedRing";
    case SmilesErrorKind::kUnknownAtomToken: return "UnknownAtomToken";
    case SmilesErrorKind::kTrailingInput: return "TrailingInput";
    case SmilesErrorKind::kInvalidBond: return "InvalidBond";
  }
  return "Unknown";
}

SmilesError::SmilesError(SmilesErrorKind kind, std::size_t offset, const std::string& detail)
    : Error(ErrorKind::kParse, std::string(ToString(kind)),
            detail + " (offset " + std::to_string(offset) + ")"),
      kind_(kind),
      offset_(offset) {}

std::vector<std::vector<std::pair<int, int>>> MolecularGraph::Adjacency() const {
  std::vector<std::vector<std::pair<int, int>>> adj(atoms.size());
  for (std::size_t i = 0; i < bonds.size(); ++i) {
    adj[bonds[i].a].emplace_back(bonds[i].b, static_cast<int>(i));
    adj[bonds[i].b].emplace_back(bonds[i].a, static_cast<int>(i));
  }
  return adj;
}

MolecularGraph ParseSmiles(std::string_view text) { return Parser(text).Run(); }

}  // namespace chemcpa
