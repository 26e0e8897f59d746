"""Aggregation and analysis over per-image evaluation rows.

Consumes the per-image CSV contract (one row per image x method x stage)
and produces method summaries, pairwise win/tie/loss fractions, eps_plus
difference histograms, and Spearman rank correlations with a seeded
permutation test for significance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

CSV_COLUMNS = [
    "image_id",
    "method",
    "stage",
    "eps_minus",
    "eps_plus",
    "gap",
    "capped_minus",
    "capped_plus",
    "predicted_class",
    "true_class",
    "confidence",
    "loss",
]


@dataclass(frozen=True)
class MethodSummary:
    method: str
    stage: int
    n_images: int
    n_defined: int
    mean_gap: float | None
    median_gap: float | None
    q1: float | None
    q3: float | None
    capped_count: int
    undefined_count: int


@dataclass(frozen=True)
class CorrelationResult:
    var_x: str
    var_y: str
    rho: float | None
    p_value: float | None
    n: int
    reason: str | None = None


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        missing = [c for c in CSV_COLUMNS if c not in row]
        if missing:
            raise DataError(f"{path}: rows missing columns {missing}")
    return rows


def row_is_defined(row: dict) -> bool:
    return row["gap"] != ""


def row_is_measured(row: dict) -> bool:
    """Defined and not capped: capped searches are flagged, not measurements."""
    return (
        row_is_defined(row)
        and row["capped_minus"] != "True"
        and row["capped_plus"] != "True"
    )


def summarize(rows, split_by_correct: bool = False) -> list[MethodSummary]:
    """Per (method, stage) statistics; optionally split correct/misclassified
    into separate summaries keyed by a method suffix."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["method"], int(row["stage"]))
        if split_by_correct:
            correct = row["predicted_class"] == row["true_class"]
            key = (row["method"] + ("/correct" if correct else "/misclassified"), int(row["stage"]))
        groups.setdefault(key, []).append(row)

    out = []
    for (method, stage), grp in sorted(groups.items()):
        # capped rows are excluded from the statistics and counted separately
        defined = [float(r["gap"]) for r in grp if row_is_measured(r)]
        capped = sum(
            1 for r in grp if r["capped_minus"] == "True" or r["capped_plus"] == "True"
        )
        undefined = sum(1 for r in grp if not row_is_defined(r))
        if defined:
            q1, med, q3 = np.percentile(defined, [25, 50, 75])
            summary = MethodSummary(
                method=method,
                stage=stage,
                n_images=len(grp),
                n_defined=len(defined),
                mean_gap=float(np.mean(defined)),
                median_gap=float(med),
                q1=float(q1),
                q3=float(q3),
                capped_count=capped,
                undefined_count=undefined,
            )
        else:
            summary = MethodSummary(
                method=method,
                stage=stage,
                n_images=len(grp),
                n_defined=0,
                mean_gap=None,
                median_gap=None,
                q1=None,
                q3=None,
                capped_count=capped,
                undefined_count=undefined,
            )
        out.append(summary)
    return out


@dataclass(frozen=True)
class PairwiseResult:
    better: float
    equal: float
    worse: float
    n_compared: int
    n_excluded: int


def pairwise(gaps_a: dict, gaps_b: dict) -> PairwiseResult:
    """Fractions of shared images where method A's gap beats/ties/loses to B's.

    Images missing or undefined for either method are excluded and counted.
    """
    shared = sorted(set(gaps_a) & set(gaps_b))
    excluded = len(set(gaps_a) | set(gaps_b)) - len(shared)
    if not shared:
        raise DataError("pairwise comparison needs at least one shared image")
    better = sum(1 for k in shared if gaps_a[k] > gaps_b[k])
    equal = sum(1 for k in shared if gaps_a[k] == gaps_b[k])
    worse = len(shared) - better - equal
    n = len(shared)
    return PairwiseResult(better / n, equal / n, worse / n, n, excluded)


def epsilon_plus_diff(eps_a: dict, eps_b: dict, bin_width: float = 1.0):
    """Per-image eps_plus(A) - eps_plus(B) and binned counts."""
    shared = sorted(set(eps_a) & set(eps_b))
    if not shared:
        raise DataError("epsilon_plus_diff needs at least one shared image")
    diffs = np.array([eps_a[k] - eps_b[k] for k in shared], dtype=np.float64)
    lo = np.floor(diffs.min() / bin_width) * bin_width
    hi = np.ceil(diffs.max() / bin_width) * bin_width
    if hi == lo:
        hi = lo + bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, edges = np.histogram(diffs, bins=edges)
    return diffs, counts, edges


def spearman(
    x, y, n_permutations: int = 10_000, seed: int = 0
) -> CorrelationResult:
    """Spearman rho with average-rank ties; two-sided seeded permutation p."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("spearman needs two equal-length 1-D samples")
    n = len(x)
    if n < 3:
        raise DataError(f"spearman needs at least 3 observations, got {n}")
    rx = rankdata(x)
    ry = rankdata(y)
    sx = rx.std()
    sy = ry.std()
    if sx == 0 or sy == 0:
        which = "x" if sx == 0 else "y"
        return CorrelationResult("x", "y", None, None, n, reason=f"zero rank variance in {which}")
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        # tie-free: the classical formula over integer rank differences is
        # exact, so perfectly (anti)monotone data yields rho of exactly +/-1
        d2 = int(np.sum((rx.astype(np.int64) - ry.astype(np.int64)) ** 2))
        rho = 1.0 - 6.0 * d2 / (n * (n * n - 1))
    elif np.array_equal(rx, ry):
        # identical average-rank vectors: Pearson on ranks is exactly +1
        rho = 1.0
    elif np.array_equal(rx + ry, np.full(n, n + 1.0)):
        # mirrored average-rank vectors (ry = (n+1) - rx, ties matching):
        # Pearson on ranks is exactly -1
        rho = -1.0
    else:
        rho = float(np.dot((rx - rx.mean()) / sx, (ry - ry.mean()) / sy) / n)
    rx = (rx - rx.mean()) / sx
    ry = (ry - ry.mean()) / sy

    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        perm_rho = np.dot(rx, rng.permutation(ry)) / n
        if abs(perm_rho) >= abs(rho) - 1e-12:
            hits += 1
    p = (hits + 1) / (n_permutations + 1)
    return CorrelationResult("x", "y", rho, p, n)
