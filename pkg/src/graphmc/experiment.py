"""Experiment configuration, dataset preparation and run/compare/sweep drivers.

Seeds: every experiment has one integer ``seed``; component streams use
``derive_seed(seed, k)`` (numpy SeedSequence of ``[seed, k]``) with
k = 0 data, 1 rating noise, 2 mask, 3 subspace init.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from graphmc.datagen import (
    ContinuousConfig,
    MaskConfig,
    NetflixConfig,
    gen_continuous,
    gen_mask_stream,
    gen_netflix,
    inject_rating_noise,
    read_traffic_values,
    write_traffic_stream,
)
from graphmc.diagnostics import (
    err_metric,
    stationarity_residual,
    surrogate_and_true_cost,
    true_cost_gradient,
    write_diagnostics_csv,
)
from graphmc.errors import ConvergenceError
from graphmc.graph import WeightedGraph, build_laplacian, read_graph, write_graph
from graphmc.robust import RobustTracker
from graphmc.solvers import SolverConfig
from graphmc.tracker import Hyperparameters, OnlineTracker, StreamSample

logger = logging.getLogger(__name__)

DATASETS = ("netflix", "continuous", "traffic-file")
TRACKERS = ("online", "robust", "baseline-nograph")
SOLVER_ALIASES = {"auto": "auto", "dense": "dense_direct", "cg": "conjugate_gradient"}
RESULT_COLUMNS = ("t", "rel_error", "err_db")

SEED_DATA, SEED_NOISE, SEED_MASK, SEED_INIT = range(4)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class RunFailure(RuntimeError):
    """Numerical failure during a run; ``step`` is the 1-based step index."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


def derive_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), k]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    dataset: str = "netflix"
    netflix: dict = field(default_factory=dict)
    continuous: dict = field(default_factory=dict)
    data_path: str | None = None
    graph_path: str | None = None
    tracker: str = "online"
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 0.0
    rank: int | None = None
    missing: float = 0.2
    solver: str = "auto"
    cg_rel_tolerance: float = 1e-8
    diagnostics: bool = False
    diagnostics_every: int = 1
    predict_after_update: bool = False
    truth: str = "clean"
    steps: int | None = None
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.tracker not in TRACKERS:
            raise ConfigError(f"tracker must be one of {TRACKERS}, got {self.tracker!r}")
        if self.solver not in SOLVER_ALIASES:
            raise ConfigError(f"solver must be one of {tuple(SOLVER_ALIASES)}, got {self.solver!r}")
        if self.truth not in ("clean", "observed"):
            raise ConfigError("truth must be 'clean' or 'observed'")
        if self.dataset == "traffic-file" and not self.data_path:
            raise ConfigError("traffic-file dataset needs data_path")
        if not 0 <= self.missing < 1:
            raise ConfigError("missing must lie in [0, 1)")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.diagnostics_every < 1:
            raise ConfigError("diagnostics_every must be >= 1")
        try:
            self.hyperparameters(rank=self.rank or 1)
            self.solver_config()
            if self.dataset == "netflix":
                NetflixConfig(**self.netflix)
            elif self.dataset == "continuous":
                ContinuousConfig(**self.continuous)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def hyperparameters(self, rank: int) -> Hyperparameters:
        lambda2 = 0.0 if self.tracker == "baseline-nograph" else self.lambda2
        lambda3 = self.lambda3 if self.tracker == "robust" else 0.0
        return Hyperparameters(self.lambda1, lambda2, lambda3, rank)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(SOLVER_ALIASES[self.solver], cg_rel_tolerance=self.cg_rel_tolerance)


@dataclass
class Dataset:
    graph: WeightedGraph
    observed: np.ndarray
    truth: np.ndarray
    mask: np.ndarray
    rank: int | None = None
    outliers: np.ndarray | None = None
    info: dict = field(default_factory=dict)
    known: np.ndarray | None = None

    def __post_init__(self):
        if self.known is None:
            self.known = np.ones(self.observed.shape, dtype=bool)

    @property
    def shape(self):
        return self.observed.shape

    def samples(self):
        for t in range(self.observed.shape[1]):
            yield StreamSample(self.observed[:, t], self.mask[:, t])


def generate_dataset(cfg: ExperimentConfig) -> Dataset:
    """Synthetic data, columns already in streaming order, no mask applied."""
    seed_data = derive_seed(cfg.seed, SEED_DATA)
    if cfg.dataset == "netflix":
        ncfg = NetflixConfig(**{**cfg.netflix, "seed": seed_data})
        data = gen_netflix(ncfg)
        noisy = inject_rating_noise(
            data.clean, ncfg.noise_prob, ncfg.noise_level, seed=derive_seed(cfg.seed, SEED_NOISE)
        )
        perm = data.permutation
        observed, clean = noisy[:, perm], data.clean[:, perm]
        info = {"rank": ncfg.rank}
        ones = np.ones(observed.shape, dtype=bool)
        return Dataset(data.graph, observed, clean, ones, ncfg.rank, None, info)
    if cfg.dataset == "continuous":
        ccfg = ContinuousConfig(**{**cfg.continuous, "seed": seed_data})
        data = gen_continuous(ccfg)
        perm = data.permutation
        S = data.outliers[:, perm]
        info = {
            "rank": ccfg.rank,
            "planted_outliers": int(np.count_nonzero(S)),
            "magnitude_floor": data.magnitude_floor,
        }
        ones = np.ones(S.shape, dtype=bool)
        return Dataset(data.graph, data.observed[:, perm], data.clean[:, perm], ones, ccfg.rank, S, info)
    raise ConfigError(f"dataset {cfg.dataset!r} is not synthetic")


def _sibling(path: Path, name: str) -> Path:
    return path.with_name(name)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """Traffic-format dataset from disk.

    Companion files next to ``data_path``: the graph (``graph_path`` or
    ``<stem>.graph``), optional ``truth.csv`` and ``outliers.csv`` in the same
    format, and optional ``manifest.json`` (rank hint).
    """
    path = Path(cfg.data_path)
    graph_path = Path(cfg.graph_path) if cfg.graph_path else path.with_suffix(".graph")
    if not path.exists():
        raise ConfigError(f"data file {path} does not exist")
    if not graph_path.exists():
        raise ConfigError(f"graph file {graph_path} does not exist")
    _, X = read_traffic_values(path)
    graph = read_graph(graph_path)
    if graph.node_count != X.shape[0]:
        raise ConfigError(f"graph has {graph.node_count} nodes, data has {X.shape[0]} rows")
    file_mask = np.isfinite(X)
    observed = np.where(file_mask, X, 0.0)
    truth = observed
    truth_path = _sibling(path, "truth.csv")
    if cfg.truth == "clean" and truth_path.exists():
        _, truth = read_traffic_values(truth_path)
        if truth.shape != X.shape:
            raise ConfigError(f"{truth_path} shape {truth.shape} != data shape {X.shape}")
    outliers = None
    if _sibling(path, "outliers.csv").exists():
        _, outliers = read_traffic_values(_sibling(path, "outliers.csv"))
    rank = None
    manifest = _sibling(path, "manifest.json")
    if manifest.exists():
        rank = json.loads(manifest.read_text()).get("dataset", {}).get("rank")
    truth = np.where(file_mask, np.nan_to_num(truth), 0.0)
    return Dataset(graph, observed, truth, file_mask, rank, outliers, {"source": str(path)}, file_mask)


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = load_dataset(cfg) if cfg.data_path else generate_dataset(cfg)
    if cfg.truth == "observed" and cfg.data_path is None:
        ds.truth = ds.observed
    m, n = ds.shape
    mask = gen_mask_stream(m, n, MaskConfig(cfg.missing, seed=derive_seed(cfg.seed, SEED_MASK)))
    ds.mask = ds.mask & mask
    if cfg.steps is not None:
        n = min(n, cfg.steps)
        ds.observed, ds.truth, ds.mask = ds.observed[:, :n], ds.truth[:, :n], ds.mask[:, :n]
        ds.known = ds.known[:, :n]
        if ds.outliers is not None:
            ds.outliers = ds.outliers[:, :n]
    return ds


@dataclass
class RunResult:
    rel_error: np.ndarray
    err_db: np.ndarray
    diagnostics: list
    manifest: dict
    U: np.ndarray
    outlier_estimates: list | None = None

    @property
    def final_err_db(self) -> float:
        return float(self.err_db[-1])


def make_tracker(cfg: ExperimentConfig, ds: Dataset):
    rank = cfg.rank or ds.rank
    if rank is None:
        raise ConfigError("rank must be given for this dataset")
    L = build_laplacian(ds.graph)
    cls = RobustTracker if cfg.tracker == "robust" else OnlineTracker
    return cls(
        L,
        cfg.hyperparameters(rank),
        cfg.solver_config(),
        seed=derive_seed(cfg.seed, SEED_INIT),
        retain_history=cfg.diagnostics,
        predict_after_update=cfg.predict_after_update,
    )


def run_experiment(cfg: ExperimentConfig, ds: Dataset | None = None, keep_outliers: bool = False) -> RunResult:
    ds = ds or prepare_dataset(cfg)
    tracker = make_tracker(cfg, ds)
    robust = cfg.tracker == "robust"
    preds, diag, outliers = [], [], []
    t0 = time.perf_counter()
    for t, sample in enumerate(ds.samples(), start=1):
        try:
            out = tracker.step(sample)
        except (ConvergenceError, np.linalg.LinAlgError) as exc:
            raise RunFailure(f"step {t}: {exc}", t) from exc
        # readings absent from the source file are not scored
        preds.append(np.where(ds.known[:, t - 1], out.prediction, 0.0))
        if robust and keep_outliers:
            outliers.append(out.result.s_t)
        if cfg.diagnostics and (t % cfg.diagnostics_every == 0 or t == ds.shape[1]):
            snap = surrogate_and_true_cost(tracker.history, tracker.U, tracker.laplacian, tracker.hp, robust)
            grad = true_cost_gradient(tracker.history, tracker.U, tracker.laplacian, tracker.hp, robust)
            diag.append({
                "t": t,
                "c_hat": snap.c_hat,
                "c_true": snap.c_true,
                "grad_norm": float(np.linalg.norm(grad)),
                "stat_residual": stationarity_residual(tracker.acc, tracker.laplacian, tracker.hp, tracker.U),
            })
    wall = time.perf_counter() - t0
    series = err_metric(list(ds.truth.T), preds)
    for row in diag:
        row["err_db"] = float(series.err_db[row["t"] - 1])
    m, n = ds.shape
    manifest = {
        "config": cfg.to_dict(),
        "resolved": {
            "hyperparameters": dataclasses.asdict(tracker.hp),
            "solver": dataclasses.asdict(tracker.cfg),
            "seeds": {
                "data": derive_seed(cfg.seed, SEED_DATA),
                "noise": derive_seed(cfg.seed, SEED_NOISE),
                "mask": derive_seed(cfg.seed, SEED_MASK),
                "init": derive_seed(cfg.seed, SEED_INIT),
            },
            "m": m,
            "steps": n,
            "observed_fraction": float(ds.mask.mean()),
        },
        "dataset": ds.info,
        "final_err_db": series.final,
        "wall_time_s": wall,
    }
    return RunResult(series.per_step_relative_error, series.err_db, diag, manifest, tracker.U,
                     outliers if keep_outliers else None)


def write_results_csv(path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for t, (rel, db) in enumerate(zip(result.rel_error, result.err_db), start=1):
            w.writerow([t, repr(float(rel)), repr(float(db))])


def manifest_path(results_path) -> Path:
    p = Path(results_path)
    return p.with_name(p.stem + ".manifest.json")


def diagnostics_path(results_path) -> Path:
    p = Path(results_path)
    return p.with_name(p.stem + ".diagnostics.csv")


def cmd_run(cfg: ExperimentConfig) -> RunResult:
    if not cfg.out:
        raise ConfigError("run needs an output path")
    result = run_experiment(cfg)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(out, result)
    manifest_path(out).write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    if cfg.diagnostics:
        write_diagnostics_csv(diagnostics_path(out), result.diagnostics)
    return result


def cmd_gen(cfg: ExperimentConfig) -> Path:
    """Write data.csv, data.graph, truth.csv (and outliers.csv) plus manifest.json."""
    if not cfg.out:
        raise ConfigError("gen needs an output directory")
    ds = generate_dataset(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_traffic_stream(out / "data.csv", ds.observed)
    write_traffic_stream(out / "truth.csv", ds.truth)
    write_graph(ds.graph, out / "data.graph")
    if ds.outliers is not None:
        write_traffic_stream(out / "outliers.csv", ds.outliers)
    manifest = {"config": cfg.to_dict(), "dataset": {**ds.info, "m": ds.shape[0], "n": ds.shape[1]}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_results_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "err_db" not in rows[0]:
        raise ConfigError(f"{path}: not a results CSV")
    return np.array([float(r["err_db"]) for r in rows])


def steps_to_within(err_db: np.ndarray, db: float = 1.0) -> int:
    """First step from which err_db stays within ``db`` of its final value."""
    final = err_db[-1]
    outside = np.flatnonzero(~(np.abs(err_db - final) <= db))
    return int(outside[-1] + 2) if outside.size else 1


def cmd_compare(paths) -> list[dict]:
    """Summary rows sorted by final err_db (best first)."""
    series = {str(p): read_results_csv(p) for p in paths}
    lengths = {len(v) for v in series.values()}
    if len(lengths) > 1:
        raise ConfigError(f"results have different step counts: {sorted(lengths)}")
    rows = []
    for p, db in series.items():
        mpath = manifest_path(p)
        wall = math.nan
        if mpath.exists():
            wall = json.loads(mpath.read_text()).get("wall_time_s", math.nan)
        rows.append({"run": p, "final_err_db": float(db[-1]), "steps_within_1db": steps_to_within(db),
                     "wall_time_s": wall})
    rows.sort(key=lambda r: (r["final_err_db"], r["run"]))
    best = rows[0]["final_err_db"] if rows else math.nan
    for r in rows:
        r["delta_db"] = r["final_err_db"] - best
    return rows


def format_table(rows) -> str:
    head = f"{'run':<40} {'final_err_db':>12} {'delta_db':>9} {'steps<=1dB':>10} {'wall_s':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['run'][-40:]:<40} {r['final_err_db']:>12.3f} {r['delta_db']:>9.3f} "
            f"{r['steps_within_1db']:>10d} {r['wall_time_s']:>8.2f}"
        )
    return "\n".join(lines)


def _sweep_one(cfg_dict):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return run_experiment(cfg).final_err_db
    except RunFailure:
        return math.inf


def cmd_sweep(cfg: ExperimentConfig, lambda1s, lambda2s, lambda3s, holdout_seed=None, jobs=1):
    """Grid search over (lambda1, lambda2, lambda3) scored by final err_db on a held-out seed.

    Returns ``(rows, best_config)``; the best config keeps the original seed.
    """
    seed = cfg.seed + 1 if holdout_seed is None else holdout_seed
    grid = list(itertools.product(lambda1s, lambda2s, lambda3s))
    cfgs = [cfg.replace(lambda1=a, lambda2=b, lambda3=c, seed=seed, diagnostics=False).to_dict()
            for a, b, c in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_sweep_one, cfgs))
    else:
        scores = [_sweep_one(c) for c in cfgs]
    rows = [{"lambda1": a, "lambda2": b, "lambda3": c, "final_err_db": s}
            for (a, b, c), s in zip(grid, scores)]
    best = min(rows, key=lambda r: r["final_err_db"])
    best_cfg = cfg.replace(lambda1=best["lambda1"], lambda2=best["lambda2"], lambda3=best["lambda3"])
    return rows, best_cfg
