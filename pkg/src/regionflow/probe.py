"""Frozen-embedding evaluation with a closed-form ridge probe.

Protocol per target: for each of several split seeds, shuffle the joined
regions, hold out 25% as test, pick the ridge penalty by cross-validated R²
on the training portion, refit on the full training portion, and score the
held-out regions. Reported as mean ± std across the runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EvalError(ValueError):
    """Evaluation protocol misuse (too few regions, degenerate targets)."""


@dataclass
class TargetTable:
    """Per-region scalar indicator keyed by region id."""

    region_ids: tuple[str, ...]
    values: np.ndarray
    name: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.region_ids),):
            raise ValueError("values must align with region_ids")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"target {self.name!r} contains non-finite values")


@dataclass(frozen=True)
class ProbeConfig:
    alphas: tuple[float, ...] = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
    train_fraction: float = 0.75
    runs: int = 5
    cv_folds: int = 3
    split_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # Selecting the penalty on the test split leaks; only for fidelity studies.
    unsafe_select_on_test: bool = False

    def __post_init__(self):
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise ValueError("alphas must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if len(self.split_seeds) != self.runs:
            raise ValueError("need one split seed per run")

    def to_json(self) -> dict:
        return {
            "alphas": list(self.alphas),
            "train_fraction": self.train_fraction,
            "runs": self.runs,
            "cv_folds": self.cv_folds,
            "split_seeds": list(self.split_seeds),
            "unsafe_select_on_test": self.unsafe_select_on_test,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProbeConfig":
        obj = dict(obj)
        for key in ("alphas", "split_seeds"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


# ---------------------------------------------------------------------------
# Ridge regression and scoring
# ---------------------------------------------------------------------------

def ridge_fit(X: np.ndarray, y: np.ndarray, alpha: float) -> tuple[np.ndarray, float]:
    """Closed-form ridge with centering; returns (weights, intercept)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, d) and y (n,)")
    if X.shape[0] < 2:
        raise EvalError("ridge_fit needs at least 2 rows")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    gram = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    weights = np.linalg.solve(gram, Xc.T @ yc)
    intercept = y_mean - x_mean @ weights
    return weights, float(intercept)


def ridge_predict(X: np.ndarray, weights: np.ndarray, intercept: float) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ weights + intercept


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination; can be arbitrarily negative."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or y_true.size < 2:
        raise ValueError("need two aligned vectors of length >= 2")
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise EvalError("R^2 is undefined for a constant target")
    ss_res = float(((y_true - y_pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle 0..n-1 with the seed; first train_fraction of the order trains."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * train_fraction)
    return perm[:n_train], perm[n_train:]


def _cv_mean_r2(X: np.ndarray, y: np.ndarray, alpha: float, folds: int) -> float:
    n = X.shape[0]
    fold_ids = np.arange(n) % folds
    scores = []
    for fold in range(folds):
        held = fold_ids == fold
        weights, intercept = ridge_fit(X[~held], y[~held], alpha)
        scores.append(r2_score(y[held], ridge_predict(X[held], weights, intercept)))
    return float(np.mean(scores))


def select_alpha(X: np.ndarray, y: np.ndarray, alphas: tuple[float, ...],
                 folds: int) -> float:
    """Grid-search the penalty by cross-validated R² on (X, y); ties keep grid order."""
    if X.shape[0] < 2 * folds:
        raise EvalError(f"too few regions ({X.shape[0]}) for {folds}-fold selection")
    best_alpha = alphas[0]
    best_score = -np.inf
    for alpha in alphas:
        score = _cv_mean_r2(X, y, alpha, folds)
        if score > best_score:
            best_score = score
            best_alpha = alpha
    return best_alpha


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------

@dataclass
class TargetResult:
    name: str
    r2_mean: float
    r2_std: float
    r2_runs: tuple[float, ...]
    alphas_chosen: tuple[float, ...]
    n_used: int
    n_dropped: int

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "r2_mean": self.r2_mean,
            "r2_std": self.r2_std,
            "r2_runs": list(self.r2_runs),
            "alphas_chosen": list(self.alphas_chosen),
            "n_used": self.n_used,
            "n_dropped": self.n_dropped,
        }


@dataclass
class EvalReport:
    targets: dict[str, TargetResult]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "targets": {name: res.to_json() for name, res in self.targets.items()},
            "metadata": self.metadata,
        }


def _join(embedding_ids: tuple[str, ...], table: TargetTable) -> tuple[np.ndarray, np.ndarray, int]:
    """Indices into the embedding rows with a target, the joined y, drop count."""
    lookup = {rid: i for i, rid in enumerate(table.region_ids)}
    kept = [i for i, rid in enumerate(embedding_ids) if rid in lookup]
    y = np.array([table.values[lookup[embedding_ids[i]]] for i in kept])
    dropped = (len(embedding_ids) - len(kept)) + (len(table.region_ids) - len(kept))
    return np.asarray(kept, dtype=np.int64), y, dropped


def evaluate(embeddings, targets, config: ProbeConfig,
             metadata: dict | None = None) -> EvalReport:
    """Run the split/score protocol for every target table.

    `embeddings` is a train.RegionEmbeddings (anything with .matrix and
    .region_ids); `targets` is one TargetTable or a sequence of them.
    """
    if isinstance(targets, TargetTable):
        targets = [targets]
    matrix = np.asarray(embeddings.matrix, dtype=np.float64)
    region_ids = tuple(embeddings.region_ids)
    results: dict[str, TargetResult] = {}
    for table in targets:
        kept, y, dropped = _join(region_ids, table)
        if kept.size < 8:
            raise EvalError(
                f"target {table.name!r}: only {kept.size} regions after join (need >= 8)"
            )
        X = matrix[kept]
        scores = []
        alphas = []
        for seed in config.split_seeds:
            train_idx, test_idx = split_indices(kept.size, config.train_fraction, seed)
            if test_idx.size < 2:
                raise EvalError("test split too small; lower train_fraction")
            X_train, y_train = X[train_idx], y[train_idx]
            X_test, y_test = X[test_idx], y[test_idx]
            if config.unsafe_select_on_test:
                alpha = _select_on_test(X_train, y_train, X_test, y_test, config.alphas)
            else:
                alpha = select_alpha(X_train, y_train, config.alphas, config.cv_folds)
            weights, intercept = ridge_fit(X_train, y_train, alpha)
            scores.append(r2_score(y_test, ridge_predict(X_test, weights, intercept)))
            alphas.append(alpha)
        scores_arr = np.asarray(scores)
        results[table.name] = TargetResult(
            name=table.name,
            r2_mean=float(scores_arr.mean()),
            r2_std=float(scores_arr.std()),
            r2_runs=tuple(float(s) for s in scores),
            alphas_chosen=tuple(alphas),
            n_used=int(kept.size),
            n_dropped=int(dropped),
        )
    return EvalReport(targets=results, metadata=metadata or {})


def _select_on_test(X_train, y_train, X_test, y_test, alphas) -> float:
    best_alpha, best = alphas[0], -np.inf
    for alpha in alphas:
        weights, intercept = ridge_fit(X_train, y_train, alpha)
        score = r2_score(y_test, ridge_predict(X_test, weights, intercept))
        if score > best:
            best, best_alpha = score, alpha
    return best_alpha


# ---------------------------------------------------------------------------
# Raw-series baseline features
# ---------------------------------------------------------------------------

def raw_feature_matrix(normalized, flow: str = "joint") -> np.ndarray:
    """Flatten a NormalizedSeries into per-region feature rows for baseline probes."""
    values = normalized.values
    if flow == "joint":
        return values.reshape(values.shape[0], -1)
    if flow == "inbound":
        return values[:, :, 0]
    if flow == "outbound":
        return values[:, :, 1]
    raise ValueError(f"unknown flow {flow!r}")


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def read_targets_csv(path: str | Path, name: str | None = None) -> TargetTable:
    """Read a (region_id, value) delimited file; name defaults to the file stem."""
    path = Path(path)
    ids: list[str] = []
    values: list[float] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("region_id", "value"):
            if col not in header:
                raise EvalError(f"{path}: missing required column {col!r}")
        for row in reader:
            ids.append(row["region_id"])
            values.append(float(row["value"]))
    return TargetTable(region_ids=tuple(ids), values=np.asarray(values), name=name or path.stem)


def write_targets_csv(path: str | Path, table: TargetTable) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "value"])
        for rid, value in zip(table.region_ids, table.values):
            writer.writerow([rid, repr(float(value))])


def write_report_json(path: str | Path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def write_report_matrix_csv(path: str | Path, reports: dict[str, EvalReport]) -> None:
    """Targets as rows, one mean/std column pair per method."""
    methods = list(reports)
    target_names: list[str] = []
    for report in reports.values():
        for name in report.targets:
            if name not in target_names:
                target_names.append(name)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["target"]
        for method in methods:
            header += [f"{method}_mean", f"{method}_std"]
        writer.writerow(header)
        for name in target_names:
            row = [name]
            for method in methods:
                result = reports[method].targets.get(name)
                row += ["", ""] if result is None else [repr(result.r2_mean), repr(result.r2_std)]
            writer.writerow(row)
