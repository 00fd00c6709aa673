#include "fedmol/molgraph.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "fedmol/error.hpp"

namespace fedmol {

char atom_symbol(AtomKind kind) {
    switch (kind) {
    case AtomKind::C: return 'C';
    case AtomKind::N: return 'N';
    case AtomKind::O: return 'O';
    case AtomKind::F: return 'F';
    }
    return '?';
}

int max_valence(AtomKind kind) {
    switch (kind) {
    case AtomKind::C: return 4;
    case AtomKind::N: return 3;
    case AtomKind::O: return 2;
    case AtomKind::F: return 1;
    }
    return 0;
}

int bond_order(BondKind kind) {
    return static_cast<int>(kind);
}

MolGraph::MolGraph(int n)
    : n_(n),
      nodes_(static_cast<std::size_t>(n), AtomKind::C),
      edges_(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), BondKind::NoBond) {}

void MolGraph::set_edge(int i, int j, BondKind kind) {
    if (i == j) {
        if (kind != BondKind::NoBond) fail(ErrorKind::Internal, "self-bond on node " + std::to_string(i));
        return;
    }
    edges_[static_cast<std::size_t>(i * n_ + j)] = kind;
    edges_[static_cast<std::size_t>(j * n_ + i)] = kind;
}

int MolGraph::valence(int i) const {
    int total = 0;
    for (int j = 0; j < n_; ++j) total += bond_order(edge(i, j));
    return total;
}

int MolGraph::bond_count() const {
    int count = 0;
    for (int i = 0; i < n_; ++i)
        for (int j = i + 1; j < n_; ++j)
            if (edge(i, j) != BondKind::NoBond) ++count;
    return count;
}

MolGraph MolGraph::permuted(std::span<const int> perm) const {
    MolGraph out(n_);
    for (int i = 0; i < n_; ++i) out.set_node(i, node(perm[static_cast<std::size_t>(i)]));
    for (int i = 0; i < n_; ++i)
        for (int j = i + 1; j < n_; ++j)
            out.set_edge(i, j, edge(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]));
    return out;
}

ValidityResult check_valid(const MolGraph& g) {
    for (int i = 0; i < g.size(); ++i) {
        int v = g.valence(i);
        int cap = max_valence(g.node(i));
        if (v > cap) {
            std::ostringstream reason;
            reason << "valence " << v << " > " << cap << " for " << atom_symbol(g.node(i));
            return {false, reason.str()};
        }
    }
    return {true, std::nullopt};
}

double validity_fraction(std::span<const MolGraph> samples) {
    if (samples.empty()) fail(ErrorKind::EmptySampleSet, "validity_fraction over empty sample set");
    std::size_t valid = 0;
    for (const MolGraph& g : samples)
        if (check_valid(g).valid) ++valid;
    return static_cast<double>(valid) / static_cast<double>(samples.size());
}

double uniqueness_fraction(std::span<const MolGraph> samples) {
    if (samples.empty()) fail(ErrorKind::EmptySampleSet, "uniqueness_fraction over empty sample set");
    std::set<CanonicalKey> keys;
    std::size_t valid = 0;
    for (const MolGraph& g : samples) {
        if (!check_valid(g).valid) continue;
        ++valid;
        keys.insert(canonical_key(g));
    }
    if (valid == 0) return 0.0;
    return static_cast<double>(keys.size()) / static_cast<double>(valid);
}

std::vector<std::string> read_smiles_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::UnreadableFile, path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        if (line[start] == '#') continue;
        std::size_t end = line.find_last_not_of(" \t");
        lines.push_back(line.substr(start, end - start + 1));
    }
    return lines;
}

} // namespace fedmol
