#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedmol {

/// QM9 heavy atoms. Hydrogens are implicit everywhere; the category index is
/// part of the wire/tensor contract and must not change.
enum class AtomKind : std::uint8_t { C = 0, N = 1, O = 2, F = 3 };

/// Edge categories. NoBond is a real category so diffusion can act on the
/// complete edge grid.
enum class BondKind : std::uint8_t { NoBond = 0, Single = 1, Double = 2, Triple = 3 };

inline constexpr int kNodeCategories = 4;
inline constexpr int kEdgeCategories = 4;
inline constexpr int kMaxAtoms = 9;

char atom_symbol(AtomKind kind);
int max_valence(AtomKind kind);
int bond_order(BondKind kind);

/// Undirected molecular graph over categorical nodes and edges.
/// Invariants: edges symmetric, zero diagonal (NoBond).
class MolGraph {
  public:
    MolGraph() = default;
    explicit MolGraph(int n);

    int size() const { return n_; }
    AtomKind node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    BondKind edge(int i, int j) const { return edges_[static_cast<std::size_t>(i * n_ + j)]; }

    void set_node(int i, AtomKind kind) { nodes_[static_cast<std::size_t>(i)] = kind; }
    /// Sets both (i, j) and (j, i). Setting a diagonal entry to anything but
    /// NoBond is rejected.
    void set_edge(int i, int j, BondKind kind);

    const std::vector<AtomKind>& nodes() const { return nodes_; }

    /// Total bond order incident to node i (NoBond counts 0).
    int valence(int i) const;
    int bond_count() const;

    /// Relabels nodes: node i of the result is node perm[i] of *this.
    MolGraph permuted(std::span<const int> perm) const;

    bool operator==(const MolGraph& other) const = default;

  private:
    int n_ = 0;
    std::vector<AtomKind> nodes_;
    std::vector<BondKind> edges_;
};

/// Permutation-invariant identifier: equal for isomorphic graphs, distinct
/// otherwise (full canonical form, not a hash).
struct CanonicalKey {
    std::string bytes;
    auto operator<=>(const CanonicalKey&) const = default;
};

struct ValidityResult {
    bool valid = false;
    std::optional<std::string> reason;
};

/// Parses the reduced SMILES grammar: atoms C/N/O/F (aromatic lowercase
/// accepted and kekulized), explicit H (dropped), bonds -/=/#, branches,
/// ring closures 1-9 and %nn, '.' fragment separator.
MolGraph parse_smiles(const std::string& text);

/// Emits a SMILES string in the accepted subset; disconnected graphs come out
/// as dot-separated fragments. parse(write(g)) is isomorphic to g.
std::string write_smiles(const MolGraph& g);

CanonicalKey canonical_key(const MolGraph& g);

/// Isomorphic copy with nodes in canonical order: isomorphic graphs map to
/// the same MolGraph, so write_smiles of the result is a canonical string.
MolGraph canonical_form(const MolGraph& g);

/// Valence sanitizer: every atom's total bond order must not exceed its
/// maximum valence; implicit hydrogens fill the remainder.
ValidityResult check_valid(const MolGraph& g);

double validity_fraction(std::span<const MolGraph> samples);

/// Distinct canonical keys among valid samples over the number of valid
/// samples; 0 when nothing is valid.
double uniqueness_fraction(std::span<const MolGraph> samples);

/// Reads one molecule per line; '#' comment lines and blank lines ignored.
std::vector<std::string> read_smiles_lines(const std::string& path);

} // namespace fedmol
