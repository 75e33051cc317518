"""Synthetic and file-based data streams.

All randomness comes from numpy's PCG64 generator (``np.random.default_rng``)
seeded with the integer in each config, so streams are bit-reproducible.
Data matrices are m x n with one column per time step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from graphmc.errors import GraphValidationError
from graphmc.graph import WeightedGraph, read_graph
from graphmc.tracker import StreamSample


class TrafficFormatError(ValueError):
    """Malformed traffic stream or companion graph file."""


def community_labels(size: int, communities: int) -> np.ndarray:
    """Contiguous labels with group sizes differing by at most one."""
    if not 1 <= communities <= size:
        raise ValueError(f"need 1 <= communities <= size, got {communities} for {size}")
    return (np.arange(size) * communities) // size


def community_graph(labels: np.ndarray) -> WeightedGraph:
    """Unit-weight edge between i != j iff they share a label (disjoint cliques)."""
    W = (labels[:, None] == labels[None, :]).astype(float)
    np.fill_diagonal(W, 0.0)
    return WeightedGraph(W)


@dataclass(frozen=True)
class NetflixConfig:
    user_communities: int = 10
    movie_communities: int = 20
    users: int = 100
    movies: int = 200
    noise_prob: float = 0.3
    noise_level: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.user_communities <= self.users:
            raise ValueError("user_communities must lie in [1, users]")
        if not 1 <= self.movie_communities <= self.movies:
            raise ValueError("movie_communities must lie in [1, movies]")
        if not 0 <= self.noise_prob <= 1:
            raise ValueError("noise_prob must lie in [0, 1]")
        if self.noise_level not in range(1, 6):
            raise ValueError("noise_level must be an integer in 1..5")

    @property
    def rank(self) -> int:
        return min(self.user_communities, self.movie_communities)


@dataclass(frozen=True)
class NetflixData:
    clean: np.ndarray
    graph: WeightedGraph
    permutation: np.ndarray
    user_labels: np.ndarray
    movie_labels: np.ndarray


def gen_netflix(cfg: NetflixConfig) -> NetflixData:
    """Block-constant rating matrix with a user-community graph.

    Each (user community, movie community) pair gets a rating drawn
    uniformly from 1..5.  ``permutation`` is the order in which columns
    should be streamed.  Draw order: block ratings, then permutation.
    """
    rng = np.random.default_rng(cfg.seed)
    users = community_labels(cfg.users, cfg.user_communities)
    movies = community_labels(cfg.movies, cfg.movie_communities)
    blocks = rng.integers(1, 6, size=(cfg.user_communities, cfg.movie_communities))
    clean = blocks[users][:, movies].astype(float)
    perm = rng.permutation(cfg.movies)
    return NetflixData(clean, community_graph(users), perm, users, movies)


def inject_rating_noise(X: np.ndarray, noise_prob: float, noise_level: int, seed=0) -> np.ndarray:
    """X~ = clip(X + a b, 1, 5) with a ~ Bernoulli(p), b ~ U{-level..level}.

    b = 0 has probability 1/(2 level + 1), so the fraction of entries that
    actually change is at most p * 2 level / (2 level + 1).
    """
    X = np.asarray(X, dtype=float)
    if np.any((X < 1) | (X > 5) | (X != np.round(X))):
        raise ValueError("ratings must be integers in 1..5")
    rng = np.random.default_rng(seed)
    a = rng.random(X.shape) < noise_prob
    b = rng.integers(-noise_level, noise_level + 1, size=X.shape)
    return np.clip(X + a * b, 1.0, 5.0)


@dataclass(frozen=True)
class ContinuousConfig:
    """Continuous-valued analogue of the rating model.

    Rows form ``rank`` communities and columns ``column_communities``
    (default 2 * rank); block values are standard normal.
    """

    m: int = 100
    n: int = 500
    rank: int = 5
    noise_sigma: float = 0.2
    outlier_density: float = 0.01
    outlier_magnitude_factor: float = 10.0
    column_communities: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1 or self.rank > self.m:
            raise ValueError("rank must lie in [1, m]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.outlier_density <= 1:
            raise ValueError("outlier_density must lie in [0, 1]")
        if self.outlier_magnitude_factor < 1:
            raise ValueError("outlier_magnitude_factor must be >= 1")
        if self.n_col_communities < self.rank or self.n_col_communities > self.n:
            raise ValueError("column_communities must lie in [rank, n]")

    @property
    def n_col_communities(self) -> int:
        return self.column_communities or 2 * self.rank


@dataclass(frozen=True)
class ContinuousData:
    clean: np.ndarray
    noisy: np.ndarray
    outliers: np.ndarray
    graph: WeightedGraph
    permutation: np.ndarray
    magnitude_floor: float

    @property
    def observed(self) -> np.ndarray:
        return self.noisy + self.outliers


def gen_continuous(cfg: ContinuousConfig) -> ContinuousData:
    """Low-rank block matrix + Gaussian noise + sparse large outliers.

    Outliers sit on round(density * m * n) entries chosen without
    replacement; magnitudes are floor * (1 + U[0, 1)) with random sign, where
    floor = factor * max(|clean|, |noisy|).
    Draw order: blocks, noise, support, magnitudes, signs, permutation.
    """
    rng = np.random.default_rng(cfg.seed)
    rows = community_labels(cfg.m, cfg.rank)
    cols = community_labels(cfg.n, cfg.n_col_communities)
    blocks = rng.standard_normal((cfg.rank, cfg.n_col_communities))
    clean = blocks[rows][:, cols]
    noisy = clean + cfg.noise_sigma * rng.standard_normal(clean.shape)

    floor = cfg.outlier_magnitude_factor * max(np.abs(clean).max(), np.abs(noisy).max())
    k = int(round(cfg.outlier_density * cfg.m * cfg.n))
    support = rng.choice(cfg.m * cfg.n, size=k, replace=False)
    mags = floor * (1.0 + rng.random(k))
    signs = np.where(rng.random(k) < 0.5, -1.0, 1.0)
    S = np.zeros(cfg.m * cfg.n)
    S[support] = signs * mags
    S = S.reshape(cfg.m, cfg.n)
    perm = rng.permutation(cfg.n)
    return ContinuousData(clean, noisy, S, community_graph(rows), perm, float(floor))


@dataclass(frozen=True)
class MaskConfig:
    missing_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.missing_fraction < 1:
            raise ValueError("missing_fraction must lie in [0, 1)")


def gen_mask_stream(m: int, n: int, cfg: MaskConfig) -> np.ndarray:
    """m x n boolean observation mask, i.i.d. Bernoulli(1 - missing) per entry.

    Generated step by step (row t of the draw is column t of the result).
    """
    rng = np.random.default_rng(cfg.seed)
    return (rng.random((n, m)) >= cfg.missing_fraction).T.copy()


def stream_samples(X: np.ndarray, mask: np.ndarray | None = None):
    """Yield one StreamSample per column of X."""
    if mask is None:
        mask = np.ones(X.shape, dtype=bool)
    for t in range(X.shape[1]):
        yield StreamSample(X[:, t], mask[:, t])


def line_graph(links) -> WeightedGraph:
    """Link adjacency from a node-level topology.

    ``links`` is a sequence of ``(u, v)`` node pairs; two links are adjacent
    (unit weight) when they share an endpoint.
    """
    links = [tuple(l) for l in links]
    k = len(links)
    W = np.zeros((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            if set(links[a]) & set(links[b]):
                W[a, b] = W[b, a] = 1.0
    return WeightedGraph(W)


def write_traffic_stream(path, X: np.ndarray, times=None) -> None:
    """Write a k x T matrix as the traffic CSV (NaN marks a missing reading)."""
    X = np.asarray(X, dtype=float)
    k, T = X.shape
    times = range(T) if times is None else times
    lines = [f"links {k}"]
    for t, col in zip(times, X.T):
        lines.append(", ".join([str(t)] + [repr(float(v)) for v in col]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_traffic_values(path):
    """Parse the traffic CSV into ``(times, X)`` with X of shape k x T."""
    path = Path(path)
    k = None
    times, cols = [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if k is None:
            parts = line.split()
            if len(parts) != 2 or parts[0] != "links":
                raise TrafficFormatError(f"{path}:{lineno}: expected header 'links k'")
            k = int(parts[1])
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != k + 1:
            raise TrafficFormatError(
                f"{path}:{lineno}: expected {k + 1} fields (t + {k} links), got {len(fields)}"
            )
        try:
            times.append(float(fields[0]))
            cols.append([float(f) if f else math.nan for f in fields[1:]])
        except ValueError as exc:
            raise TrafficFormatError(f"{path}:{lineno}: {exc}") from None
    if k is None:
        raise TrafficFormatError(f"{path}: empty file")
    X = np.array(cols, dtype=float).reshape(len(cols), k).T
    return times, X


def load_traffic_stream(path, graph_path=None):
    """Load link loads and the link graph.

    The graph defaults to ``<path>.graph`` (suffix replaced).  Returns
    ``(graph, samples)``; readings that are NaN or empty are unobserved.
    """
    path = Path(path)
    graph_path = Path(graph_path) if graph_path else path.with_suffix(".graph")
    _, X = read_traffic_values(path)
    k = X.shape[0]
    try:
        graph = read_graph(graph_path)
    except GraphValidationError as exc:
        if "out of range" in str(exc):
            raise TrafficFormatError(f"{graph_path}: unknown link id ({exc})") from None
        raise
    if graph.node_count != k:
        raise TrafficFormatError(
            f"{graph_path}: graph has {graph.node_count} links, stream has {k}"
        )
    observed = np.isfinite(X)
    samples = [StreamSample(np.nan_to_num(X[:, t]), observed[:, t]) for t in range(X.shape[1])]
    return graph, samples
