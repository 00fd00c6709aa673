#include <algorithm>
#include <map>
#include <vector>

#include "fedmol/molgraph.hpp"

namespace fedmol {

namespace {

// One round of neighborhood refinement: the new color of a node is determined
// by its old color plus the multiset of (bond, neighbor color) pairs. New ids
// are assigned by sorted signature, never by node index, so the partition is
// permutation-invariant.
std::vector<int> refine(const MolGraph& g, std::vector<int> colors) {
    int n = g.size();
    for (int round = 0; round < n; ++round) {
        std::vector<std::pair<std::vector<int>, int>> signatures(static_cast<std::size_t>(n));
        for (int u = 0; u < n; ++u) {
            std::vector<int> sig;
            sig.push_back(colors[static_cast<std::size_t>(u)]);
            std::vector<int> neigh;
            for (int v = 0; v < n; ++v) {
                BondKind b = g.edge(u, v);
                if (b == BondKind::NoBond) continue;
                neigh.push_back(static_cast<int>(b) * (n + 1) + colors[static_cast<std::size_t>(v)]);
            }
            std::sort(neigh.begin(), neigh.end());
            sig.insert(sig.end(), neigh.begin(), neigh.end());
            signatures[static_cast<std::size_t>(u)] = {std::move(sig), u};
        }
        std::map<std::vector<int>, int> ids;
        for (const auto& [sig, u] : signatures) ids.emplace(sig, 0);
        int next = 0;
        for (auto& [sig, id] : ids) id = next++;
        std::vector<int> fresh(static_cast<std::size_t>(n));
        for (const auto& [sig, u] : signatures) fresh[static_cast<std::size_t>(u)] = ids[sig];
        if (fresh == colors) break;
        colors = std::move(fresh);
    }
    return colors;
}

std::string encode(const MolGraph& g, const std::vector<int>& label_of_node) {
    int n = g.size();
    std::vector<int> node_at(static_cast<std::size_t>(n));
    for (int u = 0; u < n; ++u) node_at[static_cast<std::size_t>(label_of_node[static_cast<std::size_t>(u)])] = u;
    std::string out;
    out.reserve(static_cast<std::size_t>(1 + n + n * (n - 1) / 2));
    out.push_back(static_cast<char>(n));
    for (int i = 0; i < n; ++i) out.push_back(static_cast<char>(g.node(node_at[static_cast<std::size_t>(i)])));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            out.push_back(static_cast<char>(g.edge(node_at[static_cast<std::size_t>(i)], node_at[static_cast<std::size_t>(j)])));
    return out;
}

struct Search {
    const MolGraph& g;
    int n;
    std::string best;
    std::vector<int> best_labels;
    bool have_best = false;

    explicit Search(const MolGraph& graph) : g(graph), n(graph.size()) {}

    // True when u and v are interchangeable by the swap automorphism: same
    // kind and identical bonds to every other node. Exploring one of them is
    // enough.
    bool twins(int u, int v) const {
        if (g.node(u) != g.node(v)) return false;
        for (int w = 0; w < n; ++w) {
            if (w == u || w == v) continue;
            if (g.edge(u, w) != g.edge(v, w)) return false;
        }
        return true;
    }

    void run(std::vector<int> colors) {
        colors = refine(g, colors);
        // Find the first non-singleton cell (smallest color value).
        int target_color = -1;
        std::vector<int> cell;
        for (int c = 0; c < n && target_color < 0; ++c) {
            cell.clear();
            for (int u = 0; u < n; ++u)
                if (colors[static_cast<std::size_t>(u)] == c) cell.push_back(u);
            if (cell.size() > 1) target_color = c;
        }
        if (target_color < 0) {
            // Discrete partition: colors are a labeling.
            std::string enc = encode(g, colors);
            if (!have_best || enc < best) {
                best = std::move(enc);
                best_labels = colors;
                have_best = true;
            }
            return;
        }
        std::vector<int> candidates;
        for (int u : cell) {
            bool duplicate = false;
            for (int v : candidates)
                if (twins(u, v)) duplicate = true;
            if (!duplicate) candidates.push_back(u);
        }
        for (int u : candidates) {
            // Individualize u: pull it in front of its cell, shift the rest.
            std::vector<int> next(static_cast<std::size_t>(n));
            for (int v = 0; v < n; ++v) {
                int c = colors[static_cast<std::size_t>(v)];
                if (c > target_color || (c == target_color && v != u)) c += 1;
                next[static_cast<std::size_t>(v)] = c;
            }
            run(std::move(next));
        }
    }
};

} // namespace

CanonicalKey canonical_key(const MolGraph& g) {
    Search search(g);
    std::vector<int> initial(static_cast<std::size_t>(g.size()));
    for (int u = 0; u < g.size(); ++u) initial[static_cast<std::size_t>(u)] = static_cast<int>(g.node(u));
    search.run(std::move(initial));
    return CanonicalKey{search.best};
}

MolGraph canonical_form(const MolGraph& g) {
    if (g.size() == 0) return g;
    Search search(g);
    std::vector<int> initial(static_cast<std::size_t>(g.size()));
    for (int u = 0; u < g.size(); ++u) initial[static_cast<std::size_t>(u)] = static_cast<int>(g.node(u));
    search.run(std::move(initial));
    std::vector<int> node_at(static_cast<std::size_t>(g.size()));
    for (int u = 0; u < g.size(); ++u) node_at[static_cast<std::size_t>(search.best_labels[static_cast<std::size_t>(u)])] = u;
    return g.permuted(node_at);
}

} // namespace fedmol
