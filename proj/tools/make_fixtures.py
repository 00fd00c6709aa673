#!/usr/bin/env python3
"""Generates the fixture CSVs (smiles,mu,homo) used by tests and examples.

Molecules are random trees and single-ring graphs over C/N/O/F with valence
bookkeeping, so every row parses and sanitizes. Properties are synthetic but
correlated with composition so the regressor has signal to learn.
"""

import argparse
import random

MAX_VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1}
ATOMS = ["C", "N", "O", "F"]
ATOM_WEIGHTS = [0.68, 0.12, 0.16, 0.04]
SIZE_WEIGHTS = {1: 0.01, 2: 0.02, 3: 0.03, 4: 0.06, 5: 0.10, 6: 0.14, 7: 0.20, 8: 0.22, 9: 0.22}
BOND_SYMBOL = {1: "", 2: "=", 3: "#"}


class Mol:
    def __init__(self):
        self.atoms = []
        self.edges = {}  # (i, j) i<j -> order

    def add_atom(self, sym):
        self.atoms.append(sym)
        return len(self.atoms) - 1

    def add_edge(self, i, j, order):
        self.edges[(min(i, j), max(i, j))] = order

    def used_valence(self, i):
        return sum(o for (a, b), o in self.edges.items() if a == i or b == i)

    def free_valence(self, i):
        return MAX_VALENCE[self.atoms[i]] - self.used_valence(i)


def pick_atom(rng, min_valence=1):
    while True:
        sym = rng.choices(ATOMS, ATOM_WEIGHTS)[0]
        if MAX_VALENCE[sym] >= min_valence:
            return sym


def random_tree(rng, n):
    mol = Mol()
    mol.add_atom(pick_atom(rng))
    while len(mol.atoms) < n:
        candidates = [i for i in range(len(mol.atoms)) if mol.free_valence(i) >= 1]
        if not candidates:
            break
        parent = rng.choice(candidates)
        child_sym = pick_atom(rng)
        max_order = min(mol.free_valence(parent), MAX_VALENCE[child_sym], 3)
        order = 1
        if max_order >= 2 and rng.random() < 0.25:
            order = 2
        if max_order >= 3 and rng.random() < 0.06:
            order = 3
        child = mol.add_atom(child_sym)
        mol.add_edge(parent, child, order)
    return mol


def random_ring(rng, n):
    k = rng.choice([3, 4, 5, 6])
    k = min(k, n)
    if k < 3:
        return random_tree(rng, n)
    mol = Mol()
    for _ in range(k):
        mol.add_atom(pick_atom(rng, min_valence=2))
    for i in range(k):
        mol.add_edge(i, (i + 1) % k, 1)
    while len(mol.atoms) < n:
        candidates = [i for i in range(len(mol.atoms)) if mol.free_valence(i) >= 1]
        if not candidates:
            break
        parent = rng.choice(candidates)
        child_sym = pick_atom(rng)
        max_order = min(mol.free_valence(parent), MAX_VALENCE[child_sym], 3)
        order = 2 if (max_order >= 2 and rng.random() < 0.2) else 1
        child = mol.add_atom(child_sym)
        mol.add_edge(parent, child, order)
    return mol


def to_smiles(mol):
    n = len(mol.atoms)
    adj = {i: [] for i in range(n)}
    for (a, b), order in mol.edges.items():
        adj[a].append((b, order))
        adj[b].append((a, order))

    visited = [False] * n
    ring_digit = {}
    digit_counter = [0]

    # One DFS; non-tree edges become ring closures.
    closure_of = {i: [] for i in range(n)}
    tree_children = {i: [] for i in range(n)}

    def explore(i, parent):
        visited[i] = True
        for j, order in sorted(adj[i]):
            if j == parent:
                continue
            if visited[j]:
                key = (min(i, j), max(i, j))
                if key not in ring_digit:
                    digit_counter[0] += 1
                    ring_digit[key] = (digit_counter[0], order)
                    closure_of[i].append(key)
                    closure_of[j].append(key)
            else:
                tree_children[i].append((j, order))
                explore(j, i)

    def render(i, incoming):
        out = BOND_SYMBOL[incoming] + mol.atoms[i]
        for key in closure_of[i]:
            digit, order = ring_digit[key]
            out += BOND_SYMBOL[order] + str(digit)
        kids = tree_children[i]
        for idx, (j, order) in enumerate(kids):
            sub = render(j, order)
            out += sub if idx == len(kids) - 1 else "(" + sub + ")"
        return out

    parts = []
    for i in range(n):
        if not visited[i]:
            explore(i, -1)
            parts.append(render(i, 1))
    return ".".join(parts)


def properties(rng, mol):
    n = len(mol.atoms)
    n_o = sum(1 for a in mol.atoms if a == "O")
    n_n = sum(1 for a in mol.atoms if a == "N")
    n_f = sum(1 for a in mol.atoms if a == "F")
    doubles = sum(1 for o in mol.edges.values() if o == 2)
    triples = sum(1 for o in mol.edges.values() if o == 3)
    rings = len(mol.edges) - (n - 1)
    mu = 0.4 + 0.9 * n_o + 0.7 * n_n + 0.5 * n_f + 0.25 * doubles + 0.4 * triples + 0.05 * n + rng.gauss(0.0, 0.25)
    homo = -0.32 + 0.012 * n - 0.018 * n_o - 0.011 * n_n - 0.02 * n_f + 0.004 * rings + rng.gauss(0.0, 0.008)
    return max(mu, 0.0), homo


def generate(rng, count):
    rows = []
    seen = set()
    sizes = list(SIZE_WEIGHTS.keys())
    weights = list(SIZE_WEIGHTS.values())
    while len(rows) < count:
        n = rng.choices(sizes, weights)[0]
        mol = random_ring(rng, n) if (n >= 3 and rng.random() < 0.3) else random_tree(rng, n)
        smiles = to_smiles(mol)
        if smiles in seen:
            continue
        seen.add(smiles)
        mu, homo = properties(rng, mol)
        rows.append((smiles, mu, homo))
    return rows


def write_csv(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write("smiles,mu,homo\n")
        for smiles, mu, homo in rows:
            f.write(f"{smiles},{mu:.6f},{homo:.6f}\n")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--outdir", default="fixtures")
    args = parser.parse_args()

    rng = random.Random(20240801)
    small = generate(rng, 2000)
    write_csv(f"{args.outdir}/qm9_small.csv", small)
    write_csv(f"{args.outdir}/qm9_tiny.csv", small[:100])

    single = [("CCO", 1.69, -0.387)] * 256
    write_csv(f"{args.outdir}/single_molecule.csv", single)
    print(f"wrote {len(small)} + 100 + 256 rows to {args.outdir}/")


if __name__ == "__main__":
    main()
