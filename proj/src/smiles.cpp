#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedmol/error.hpp"
#include "fedmol/molgraph.hpp"

namespace fedmol {

namespace {

constexpr int kAromaticBond = -1;

struct ParsedAtom {
    AtomKind kind = AtomKind::C;
    bool aromatic = false;
    bool hydrogen = false;
};

struct ParsedBond {
    int a = 0;
    int b = 0;
    int order = 1; // 1/2/3, or kAromaticBond before kekulization
};

struct Parser {
    const std::string& text;
    std::size_t pos = 0;

    std::vector<ParsedAtom> atoms;
    std::vector<ParsedBond> bonds;

    int prev = -1;                       // atom awaiting the next bond
    std::optional<int> pending_bond;     // explicit bond symbol seen
    std::vector<int> branch_stack;
    // ring number -> (atom index, explicit bond order or nullopt)
    std::map<int, std::pair<int, std::optional<int>>> open_rings;

    explicit Parser(const std::string& t) : text(t) {}

    void add_bond(int a, int b, std::optional<int> explicit_order) {
        if (a == b) fail(ErrorKind::UnmatchedRingBond, "ring bond closes onto the same atom");
        for (const ParsedBond& bond : bonds)
            if ((bond.a == a && bond.b == b) || (bond.a == b && bond.b == a))
                fail(ErrorKind::UnmatchedRingBond, "duplicate bond between atoms");
        int order;
        if (explicit_order) {
            order = *explicit_order;
        } else if (atoms[static_cast<std::size_t>(a)].aromatic && atoms[static_cast<std::size_t>(b)].aromatic) {
            order = kAromaticBond;
        } else {
            order = 1;
        }
        bonds.push_back({a, b, order});
    }

    void on_atom(AtomKind kind, bool aromatic, bool hydrogen) {
        atoms.push_back({kind, aromatic, hydrogen});
        int idx = static_cast<int>(atoms.size()) - 1;
        if (prev >= 0) {
            add_bond(prev, idx, pending_bond);
        } else if (pending_bond) {
            fail(ErrorKind::UnknownAtom, "bond symbol with no preceding atom");
        }
        pending_bond.reset();
        prev = idx;
    }

    void on_ring_digit(int number) {
        if (prev < 0) fail(ErrorKind::UnmatchedRingBond, "ring closure digit with no preceding atom");
        auto it = open_rings.find(number);
        if (it == open_rings.end()) {
            open_rings.emplace(number, std::make_pair(prev, pending_bond));
        } else {
            auto [other, open_order] = it->second;
            open_rings.erase(it);
            std::optional<int> order = pending_bond;
            if (open_order && order && *open_order != *order)
                fail(ErrorKind::UnmatchedRingBond, "ring closure bond orders disagree");
            if (!order) order = open_order;
            add_bond(other, prev, order);
        }
        pending_bond.reset();
    }

    void run() {
        while (pos < text.size()) {
            char c = text[pos];
            switch (c) {
            case 'C': on_atom(AtomKind::C, false, false); ++pos; break;
            case 'N': on_atom(AtomKind::N, false, false); ++pos; break;
            case 'O': on_atom(AtomKind::O, false, false); ++pos; break;
            case 'F': on_atom(AtomKind::F, false, false); ++pos; break;
            case 'H': on_atom(AtomKind::C, false, true); ++pos; break;
            case 'c': on_atom(AtomKind::C, true, false); ++pos; break;
            case 'n': on_atom(AtomKind::N, true, false); ++pos; break;
            case 'o': on_atom(AtomKind::O, true, false); ++pos; break;
            case 'f': on_atom(AtomKind::F, true, false); ++pos; break;
            case '-': set_bond(1); ++pos; break;
            case '=': set_bond(2); ++pos; break;
            case '#': set_bond(3); ++pos; break;
            case '(':
                if (prev < 0) fail(ErrorKind::UnbalancedParenthesis, "branch with no preceding atom");
                if (pending_bond) fail(ErrorKind::UnknownAtom, "bond symbol before branch open");
                branch_stack.push_back(prev);
                ++pos;
                break;
            case ')':
                if (branch_stack.empty()) fail(ErrorKind::UnbalancedParenthesis, "unmatched ')'");
                if (pending_bond) fail(ErrorKind::UnknownAtom, "bond symbol before branch close");
                prev = branch_stack.back();
                branch_stack.pop_back();
                ++pos;
                break;
            case '.':
                if (pending_bond) fail(ErrorKind::UnknownAtom, "bond symbol before fragment separator");
                if (!branch_stack.empty()) fail(ErrorKind::UnbalancedParenthesis, "fragment separator inside branch");
                prev = -1;
                ++pos;
                break;
            case '%': {
                if (pos + 2 >= text.size() || !isdigit2(text[pos + 1]) || !isdigit2(text[pos + 2]))
                    fail(ErrorKind::UnmatchedRingBond, "'%' needs two digits");
                int number = (text[pos + 1] - '0') * 10 + (text[pos + 2] - '0');
                on_ring_digit(number);
                pos += 3;
                break;
            }
            default:
                if (c >= '1' && c <= '9') {
                    on_ring_digit(c - '0');
                    ++pos;
                } else {
                    fail(ErrorKind::UnknownAtom, std::string("unexpected character '") + c + "'");
                }
            }
        }
        if (pending_bond) fail(ErrorKind::UnknownAtom, "dangling bond symbol at end of input");
        if (!branch_stack.empty()) fail(ErrorKind::UnbalancedParenthesis, "unclosed '('");
        if (!open_rings.empty()) fail(ErrorKind::UnmatchedRingBond, "ring closure " + std::to_string(open_rings.begin()->first) + " never closed");
    }

    void set_bond(int order) {
        if (pending_bond) fail(ErrorKind::UnknownAtom, "two consecutive bond symbols");
        pending_bond = order;
    }

    static bool isdigit2(char c) { return c >= '0' && c <= '9'; }
};

// Maximum number of double bonds an aromatic atom may carry in a Kekule
// assignment; carbons additionally require exactly one.
int max_aromatic_doubles(AtomKind kind) {
    switch (kind) {
    case AtomKind::C: return 1;
    case AtomKind::N: return 1; // pyridine-type 1, pyrrole-type 0
    case AtomKind::O: return 0;
    case AtomKind::F: return 0;
    }
    return 0;
}

// Assigns single/double orders to aromatic bonds by exhaustive search with
// per-atom constraints. Deterministic: bonds tried in input order, single
// before double, first full assignment wins.
void kekulize(std::vector<ParsedAtom>& atoms, std::vector<ParsedBond>& bonds) {
    std::vector<int> aromatic_bond_ids;
    std::vector<int> aromatic_degree(atoms.size(), 0);
    for (std::size_t i = 0; i < bonds.size(); ++i) {
        if (bonds[i].order != kAromaticBond) continue;
        aromatic_bond_ids.push_back(static_cast<int>(i));
        ++aromatic_degree[static_cast<std::size_t>(bonds[i].a)];
        ++aromatic_degree[static_cast<std::size_t>(bonds[i].b)];
    }
    for (std::size_t i = 0; i < atoms.size(); ++i) {
        if (atoms[i].aromatic && aromatic_degree[i] < 2)
            fail(ErrorKind::KekulizationFailure, "aromatic atom is not part of an aromatic ring");
    }
    if (aromatic_bond_ids.empty()) return;

    std::vector<int> doubles(atoms.size(), 0);    // assigned double bonds per atom
    std::vector<int> remaining = aromatic_degree; // unassigned aromatic bonds per atom

    auto atom_ok_final = [&](int a) {
        const ParsedAtom& atom = atoms[static_cast<std::size_t>(a)];
        if (atom.kind == AtomKind::C && doubles[static_cast<std::size_t>(a)] != 1) return false;
        return doubles[static_cast<std::size_t>(a)] <= max_aromatic_doubles(atom.kind);
    };

    std::vector<int> assignment(aromatic_bond_ids.size(), 0);
    auto search = [&](auto&& self, std::size_t k) -> bool {
        if (k == aromatic_bond_ids.size()) return true;
        const ParsedBond& bond = bonds[static_cast<std::size_t>(aromatic_bond_ids[k])];
        for (int order : {1, 2}) {
            bool feasible = true;
            for (int a : {bond.a, bond.b}) {
                int d = doubles[static_cast<std::size_t>(a)] + (order == 2 ? 1 : 0);
                if (d > max_aromatic_doubles(atoms[static_cast<std::size_t>(a)].kind)) feasible = false;
                // If this was the atom's last aromatic bond, its count is final.
                if (remaining[static_cast<std::size_t>(a)] == 1) {
                    const ParsedAtom& atom = atoms[static_cast<std::size_t>(a)];
                    if (atom.kind == AtomKind::C && d != 1) feasible = false;
                }
            }
            if (!feasible) continue;
            assignment[k] = order;
            for (int a : {bond.a, bond.b}) {
                if (order == 2) ++doubles[static_cast<std::size_t>(a)];
                --remaining[static_cast<std::size_t>(a)];
            }
            if (self(self, k + 1)) return true;
            for (int a : {bond.a, bond.b}) {
                if (order == 2) --doubles[static_cast<std::size_t>(a)];
                ++remaining[static_cast<std::size_t>(a)];
            }
        }
        return false;
    };
    if (!search(search, 0)) fail(ErrorKind::KekulizationFailure, "no alternating single/double assignment exists");
    for (std::size_t k = 0; k < aromatic_bond_ids.size(); ++k)
        bonds[static_cast<std::size_t>(aromatic_bond_ids[k])].order = assignment[k];
    for (std::size_t a = 0; a < atoms.size(); ++a) {
        if (atoms[a].aromatic && !atom_ok_final(static_cast<int>(a)))
            fail(ErrorKind::KekulizationFailure, "aromatic atom left without a consistent bond assignment");
    }
}

} // namespace

MolGraph parse_smiles(const std::string& text) {
    bool blank = true;
    for (char c : text)
        if (c != ' ' && c != '\t') blank = false;
    if (text.empty() || blank) fail(ErrorKind::EmptyInput, "empty SMILES string");

    Parser parser(text);
    parser.run();
    kekulize(parser.atoms, parser.bonds);

    // Drop explicit hydrogens; their bonds become implicit.
    std::vector<int> heavy_index(parser.atoms.size(), -1);
    int n = 0;
    for (std::size_t i = 0; i < parser.atoms.size(); ++i)
        if (!parser.atoms[i].hydrogen) heavy_index[i] = n++;
    if (n == 0) fail(ErrorKind::EmptyInput, "no heavy atoms");

    MolGraph g(n);
    for (std::size_t i = 0; i < parser.atoms.size(); ++i)
        if (heavy_index[i] >= 0) g.set_node(heavy_index[i], parser.atoms[i].kind);
    for (const ParsedBond& bond : parser.bonds) {
        int a = heavy_index[static_cast<std::size_t>(bond.a)];
        int b = heavy_index[static_cast<std::size_t>(bond.b)];
        if (a < 0 || b < 0) continue;
        g.set_edge(a, b, static_cast<BondKind>(bond.order));
    }
    return g;
}

std::string write_smiles(const MolGraph& g) {
    int n = g.size();
    std::vector<bool> visited(static_cast<std::size_t>(n), false);
    std::vector<int> preorder(static_cast<std::size_t>(n), -1);
    std::vector<std::vector<int>> children(static_cast<std::size_t>(n));
    std::vector<std::vector<int>> open_at(static_cast<std::size_t>(n));
    std::vector<std::vector<int>> close_at(static_cast<std::size_t>(n));
    std::vector<BondKind> ring_bond;
    std::vector<int> parent(static_cast<std::size_t>(n), -1);
    std::vector<bool> recorded(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), false);
    int clock = 0;

    auto dfs = [&](auto&& self, int u) -> void {
        visited[static_cast<std::size_t>(u)] = true;
        preorder[static_cast<std::size_t>(u)] = clock++;
        for (int v = 0; v < n; ++v) {
            if (g.edge(u, v) == BondKind::NoBond) continue;
            if (!visited[static_cast<std::size_t>(v)]) {
                parent[static_cast<std::size_t>(v)] = u;
                children[static_cast<std::size_t>(u)].push_back(v);
                self(self, v);
            } else if (v != parent[static_cast<std::size_t>(u)]) {
                std::size_t pair = static_cast<std::size_t>(std::min(u, v)) * static_cast<std::size_t>(n) + static_cast<std::size_t>(std::max(u, v));
                if (recorded[pair]) continue;
                recorded[pair] = true;
                // Ring bond: the digit opens at whichever endpoint the
                // emission walk reaches first.
                int earlier = preorder[static_cast<std::size_t>(v)] < preorder[static_cast<std::size_t>(u)] ? v : u;
                int later = earlier == v ? u : v;
                int id = static_cast<int>(ring_bond.size());
                ring_bond.push_back(g.edge(u, v));
                open_at[static_cast<std::size_t>(earlier)].push_back(id);
                close_at[static_cast<std::size_t>(later)].push_back(id);
            }
        }
    };

    auto bond_text = [](BondKind kind) -> std::string {
        switch (kind) {
        case BondKind::Single: return "";
        case BondKind::Double: return "=";
        case BondKind::Triple: return "#";
        case BondKind::NoBond: break;
        }
        return "";
    };

    std::vector<int> ring_digit(0);
    std::vector<bool> digit_used(100, false);
    auto digit_text = [&](int digit) -> std::string {
        if (digit <= 9) return std::to_string(digit);
        return "%" + std::to_string(digit);
    };

    std::string out;
    auto emit = [&](auto&& self, int u) -> void {
        out += atom_symbol(g.node(u));
        for (int id : close_at[static_cast<std::size_t>(u)]) {
            out += bond_text(ring_bond[static_cast<std::size_t>(id)]);
            out += digit_text(ring_digit[static_cast<std::size_t>(id)]);
            digit_used[static_cast<std::size_t>(ring_digit[static_cast<std::size_t>(id)])] = false;
        }
        for (int id : open_at[static_cast<std::size_t>(u)]) {
            int digit = 1;
            while (digit < 100 && digit_used[static_cast<std::size_t>(digit)]) ++digit;
            digit_used[static_cast<std::size_t>(digit)] = true;
            if (static_cast<std::size_t>(id) >= ring_digit.size()) ring_digit.resize(static_cast<std::size_t>(id) + 1, 0);
            ring_digit[static_cast<std::size_t>(id)] = digit;
            out += digit_text(digit);
        }
        const auto& kids = children[static_cast<std::size_t>(u)];
        for (std::size_t k = 0; k < kids.size(); ++k) {
            bool last = (k + 1 == kids.size());
            if (!last) out += "(";
            out += bond_text(g.edge(u, kids[k]));
            self(self, kids[k]);
            if (!last) out += ")";
        }
    };

    bool first = true;
    for (int root = 0; root < n; ++root) {
        if (visited[static_cast<std::size_t>(root)]) continue;
        dfs(dfs, root);
        if (!first) out += ".";
        first = false;
        emit(emit, root);
    }
    return out;
}

} // namespace fedmol
