"""Circuit-emergence analysis for small transformers."""

import json

from ._core import (
    Error,
    InvalidArgument,
    MissingInput,
    ParseError,
    UndefinedMetric,
    VersionMismatch,
    __version__,
    consolidation_step,
    coverage_k,
    fit_changepoint,
    gini,
    laplacian_spectrum,
    run_cli,
    spectral_distance,
    topk_mass,
)
from . import _core


def sparsity_report(graph_path):
    """Sparsity of the circuit stored in a graph file."""
    return json.loads(_core._sparsity_json(str(graph_path)))


def structural_report(graph_path):
    """Structure of the circuit stored in a graph file."""
    return json.loads(_core._structural_json(str(graph_path)))


def compare_graphs(a, b, k_nodes=30, k_edges=30, spectral_edges=50, n_eigs=20):
    return json.loads(_core._compare_json(str(a), str(b), k_nodes, k_edges, spectral_edges, n_eigs))


__all__ = [
    "Error",
    "InvalidArgument",
    "MissingInput",
    "ParseError",
    "UndefinedMetric",
    "VersionMismatch",
    "__version__",
    "compare_graphs",
    "consolidation_step",
    "coverage_k",
    "fit_changepoint",
    "gini",
    "laplacian_spectrum",
    "run_cli",
    "sparsity_report",
    "spectral_distance",
    "structural_report",
    "topk_mass",
]
