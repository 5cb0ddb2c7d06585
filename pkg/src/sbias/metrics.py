"""Standard, robust and randomized evaluation of scalar scorers.

A scorer is any callable mapping an (n, d) array to n scores.  Attack-based
quantities additionally need ``scorer.input_grad``.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import ks_2samp, rankdata

from .datagen import Dataset, randomize_group

Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass
class MetricsReport:
    standard_accuracy: float
    standard_auc: float
    randomized: dict[str, dict[str, float]] = field(default_factory=dict)
    robust: dict[str, float] = field(default_factory=dict)
    n_eval: int = 0
    seeds: dict[str, int] = field(default_factory=dict)
    standard_pr_auc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class LinearScorer:
    """``s(x) = x @ w + b``; handy as a reference classifier."""

    def __init__(self, w, b: float = 0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.d = self.w.size

    def __call__(self, X):
        return np.atleast_2d(X) @ self.w + self.b

    def input_grad(self, X):
        X = np.atleast_2d(X)
        return np.broadcast_to(self.w, X.shape).copy()


def _pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise ValueError("need at least one example")
    return s, y


def accuracy(scores, labels) -> float:
    s, y = _pair(scores, labels)
    return float(np.mean(np.where(s >= 0, 1, -1) == y))


def auc(scores, labels) -> float:
    """Rank AUC: P(s+ > s-) + P(s+ = s-)/2 via the Mann-Whitney statistic."""
    s, y = _pair(scores, labels)
    pos = y > 0
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision (area under the step precision-recall curve)."""
    s, y = _pair(scores, labels)
    pos = y > 0
    if pos.all() or not pos.any():
        raise ValueError("PR-AUC needs both classes")
    order = np.argsort(-s, kind="stable")
    s_sorted, hits = s[order], pos[order]
    # group tied scores so the curve only steps at distinct thresholds
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tp = np.cumsum(hits)[last]
    precision = tp / (last + 1)
    recall = tp / pos.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def logit_shift(orig_scores, new_scores, labels) -> float:
    """KS distance between score distributions on the original true positives."""
    s0, y = _pair(orig_scores, labels)
    s1 = np.asarray(new_scores, dtype=np.float64).ravel()
    tp = (y > 0) & (s0 >= 0)
    if not tp.any():
        return 0.0
    with warnings.catch_warnings():
        # large samples fall back from the exact to the asymptotic p-value; only the statistic is used
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(ks_2samp(s0[tp], s1[tp]).statistic)


def standard_metrics(model: Scorer, data: Dataset) -> tuple[float, float]:
    s = model(data.features)
    return accuracy(s, data.labels), auc(s, data.labels)


def randomized_metrics(model: Scorer, data: Dataset, group, repeats: int = 5,
                       seed: int = 0) -> tuple[float, float, float]:
    """Mean (accuracy, auc, logit_shift) over ``repeats`` randomizations of ``group``."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    s0 = model(data.features)
    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    accs, aucs, shifts = [], [], []
    for r in seeds:
        rd = randomize_group(data, group, int(r))
        s = model(rd.features)
        accs.append(accuracy(s, data.labels))
        aucs.append(auc(s, data.labels))
        shifts.append(logit_shift(s0, s, data.labels))
    return float(np.mean(accs)), float(np.mean(aucs)), float(np.mean(shifts))


def robust_accuracy(model, data: Dataset, delta: float, norm: str = "l2", attack=None) -> float:
    """Accuracy under the PGD attack (a lower bound on the true robust accuracy)."""
    from .attacks import AttackConfig, pgd

    if delta < 0:
        raise ValueError("budget must be non-negative")
    cfg = attack if attack is not None else AttackConfig(norm=norm, budget=delta)
    cfg = cfg.with_budget(delta, norm)
    X_adv = pgd(model, data.features, data.labels, cfg)
    return accuracy(model(X_adv), data.labels)


def evaluate(model, data: Dataset, groups: Sequence[str] = ("S", "Sc"), repeats: int = 5,
             seed: int = 0, robust: Iterable[tuple[str, float]] = (), attack=None) -> MetricsReport:
    s = model(data.features)
    report = MetricsReport(accuracy(s, data.labels), auc(s, data.labels), n_eval=data.n,
                           seeds={"randomize": seed}, standard_pr_auc=pr_auc(s, data.labels))
    for g in groups:
        a, u, k = randomized_metrics(model, data, g, repeats, seed)
        report.randomized[g] = {"accuracy": a, "auc": u, "logit_shift": k}
    for norm, delta in robust:
        report.robust[f"{norm}:{delta:g}"] = robust_accuracy(model, data, delta, norm, attack)
    return report


def decision_boundary_grid(model: Scorer, data: Dataset, coord_a: int, coord_b: int,
                           resolution: int = 50, row: int = 0, extent: float = 1.0):
    """Scores over a grid in two latent coordinates, the others fixed at a reference row.

    Returns (axis values, score matrix) with ``scores[i, j]`` at
    ``(coord_a = axis[i], coord_b = axis[j])``.
    """
    for c in (coord_a, coord_b):
        if not 0 <= c < data.d:
            raise ValueError(f"coordinate {c} out of range")
    axis = np.linspace(-extent, extent, resolution)
    base = data.latent[row]
    A, Bm = np.meshgrid(axis, axis, indexing="ij")
    lat = np.tile(base, (resolution * resolution, 1))
    lat[:, coord_a] = A.ravel()
    lat[:, coord_b] = Bm.ravel()
    scores = np.asarray(model(data.from_latent(lat))).reshape(resolution, resolution)
    return axis, scores


def boundary_csv(axis: np.ndarray, scores: np.ndarray) -> str:
    lines = ["x,y,score"]
    for i, a in enumerate(axis):
        for j, b in enumerate(axis):
            lines.append(f"{a:.6g},{b:.6g},{scores[i, j]:.6g}")
    return "\n".join(lines) + "\n"


def influence_ranking(model: Scorer, data: Dataset, repeats: int = 1, seed: int = 0) -> list[tuple[int, float]]:
    """Latent coordinates sorted by AUC drop when that coordinate alone is randomized."""
    base = auc(model(data.features), data.labels)
    drops = []
    for i in range(data.d):
        _, a, _ = randomized_metrics(model, data, [i], repeats, seed + i)
        drops.append((i, base - a))
    return sorted(drops, key=lambda t: (-t[1], t[0]))
