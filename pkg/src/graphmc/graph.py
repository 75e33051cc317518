"""Weighted graphs over vector components and their Laplacians."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from graphmc.errors import DimensionError, GraphValidationError

EIG_REL_TOL = 1e-10


def _validate_weights(W: np.ndarray) -> None:
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise GraphValidationError(f"weights must be square, got shape {W.shape}")
    if W.shape[0] == 0:
        raise GraphValidationError("graph needs at least one node")
    if not np.all(np.isfinite(W)):
        i, j = np.argwhere(~np.isfinite(W))[0]
        raise GraphValidationError(f"non-finite weight at ({i}, {j})")
    diag = np.flatnonzero(np.diag(W) != 0)
    if diag.size:
        i = diag[0]
        raise GraphValidationError(f"nonzero diagonal weight at ({i}, {i})")
    neg = np.argwhere(W < 0)
    if neg.size:
        i, j = neg[0]
        raise GraphValidationError(f"negative weight {W[i, j]} at ({i}, {j})")
    asym = np.argwhere(W != W.T)
    if asym.size:
        i, j = asym[0]
        raise GraphValidationError(
            f"asymmetric weights at ({i}, {j}): {W[i, j]} != {W[j, i]}"
        )


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected graph with non-negative edge weights and no self loops.

    ``weights`` may be given as a dense array or a scipy sparse matrix; it is
    densified and validated strictly (no silent symmetrization).
    """

    weights: np.ndarray

    def __post_init__(self):
        W = self.weights
        if sp.issparse(W):
            W = W.toarray()
        W = np.array(W, dtype=float)
        _validate_weights(W)
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)

    @property
    def node_count(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def empty(cls, m: int) -> "WeightedGraph":
        return cls(np.zeros((m, m)))

    @classmethod
    def from_edges(cls, m: int, edges) -> "WeightedGraph":
        """Build from an iterable of ``(i, j, w)`` triples (each edge listed once)."""
        W = np.zeros((m, m))
        seen = set()
        for i, j, w in edges:
            i, j, w = int(i), int(j), float(w)
            if not (0 <= i < m and 0 <= j < m):
                raise GraphValidationError(f"edge ({i}, {j}) out of range for {m} nodes")
            if i == j:
                raise GraphValidationError(f"self loop at node {i}")
            if not w > 0:
                raise GraphValidationError(f"edge ({i}, {j}) has non-positive weight {w}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphValidationError(f"duplicate edge ({i}, {j})")
            seen.add(key)
            W[i, j] = W[j, i] = w
        return cls(W)

    def edges(self):
        """Upper-triangular edge list ``[(i, j, w), ...]`` in row-major order."""
        iu, ju = np.nonzero(np.triu(self.weights, k=1))
        return [(int(i), int(j), float(self.weights[i, j])) for i, j in zip(iu, ju)]


@dataclass(frozen=True)
class GraphLaplacian:
    """L = D - W with a lazily computed PSD square root.

    Immutable once built; the cached root and eigendecomposition are pure
    functions of ``laplacian``.
    """

    laplacian: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def m(self) -> int:
        return self.laplacian.shape[0]

    def eigh(self):
        """Cached symmetric eigendecomposition ``(w, V)`` of the Laplacian."""
        if "eigh" not in self._cache:
            w, V = np.linalg.eigh(self.laplacian)
            w.setflags(write=False)
            V.setflags(write=False)
            self._cache["eigh"] = (w, V)
        return self._cache["eigh"]

    @property
    def sqrt_laplacian(self) -> np.ndarray:
        if "sqrt" not in self._cache:
            S = laplacian_sqrt(self)
            S.setflags(write=False)
            self._cache["sqrt"] = S
        return self._cache["sqrt"]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.laplacian)


def build_laplacian(graph: WeightedGraph) -> GraphLaplacian:
    W = graph.weights
    L = np.diag(W.sum(axis=1)) - W
    L.setflags(write=False)
    return GraphLaplacian(L)


def laplacian_sqrt(L: GraphLaplacian) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in ``[-eps*||L||, 0)`` are clamped to zero; anything more
    negative means the input was not a Laplacian and raises ValueError.
    """
    w, V = L.eigh()
    scale = max(np.abs(w).max(initial=0.0), 1.0)
    if w.size and w.min() < -EIG_REL_TOL * scale:
        raise ValueError(f"matrix is not PSD: smallest eigenvalue {w.min():.3e}")
    S = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return 0.5 * (S + S.T)


def smoothness(L: GraphLaplacian, A: np.ndarray) -> float:
    """Graph smoothness tr(A^T L A).

    Equals the sum of W_ij * ||a_i - a_j||^2 over unordered pairs i < j
    (each edge counted once).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[0] != L.m:
        raise DimensionError(f"A has {A.shape[0]} rows, Laplacian has {L.m} nodes")
    return float(np.sum(A * (L.laplacian @ A)))


def read_graph(path) -> WeightedGraph:
    """Parse the edge-list format: ``nodes m`` header then ``i j w`` lines."""
    lines = Path(path).read_text().splitlines()
    m = None
    edges = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if m is None:
            if len(parts) != 2 or parts[0] != "nodes":
                raise GraphValidationError(f"{path}:{lineno}: expected header 'nodes m'")
            m = int(parts[1])
            continue
        if len(parts) != 3:
            raise GraphValidationError(f"{path}:{lineno}: expected 'i j w', got {raw!r}")
        try:
            edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise GraphValidationError(f"{path}:{lineno}: {exc}") from None
    if m is None:
        raise GraphValidationError(f"{path}: missing 'nodes m' header")
    return WeightedGraph.from_edges(m, edges)


def write_graph(graph: WeightedGraph, path) -> None:
    rows = [f"nodes {graph.node_count}"]
    rows += [f"{i} {j} {w!r}" for i, j, w in graph.edges()]
    Path(path).write_text("\n".join(rows) + "\n")
