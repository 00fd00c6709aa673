"""Federated discrete-diffusion molecule generation (QM9 scale)."""

from fedmol._core import (
    FedmolError,
    canonical_smiles,
    compare,
    dataset_stats,
    is_valid,
    percent_diff,
    run_experiment,
    selftest,
)

__all__ = [
    "FedmolError",
    "canonical_smiles",
    "compare",
    "dataset_stats",
    "is_valid",
    "percent_diff",
    "run_experiment",
    "selftest",
]
