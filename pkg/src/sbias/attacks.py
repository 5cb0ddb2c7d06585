"""PGD attacks, universal perturbations and PGD adversarial training.

Attacks ascend the margin loss ``-y * s(x)``.  Every monotone decreasing loss
of ``y * s`` gives the same ascent direction, and both step rules below
(normalized L2 step, sign step for Linf) depend only on that direction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .datagen import Dataset
from .metrics import accuracy

NORMS = ("l2", "linf")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "l2"
    budget: float = 0.0
    steps: int = 40
    step_size: float = 0.1
    restarts: int = 1
    seed: int = 0
    monotone: bool = False

    def __post_init__(self):
        object.__setattr__(self, "norm", self.norm.lower())
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")

    def with_budget(self, budget: float, norm: str | None = None) -> "AttackConfig":
        return replace(self, budget=float(budget), norm=norm or self.norm)


@dataclass
class UapResult:
    delta: np.ndarray
    norm_used: float
    fooled_fraction: float
    energy_by_group: dict[str, float]
    class_deltas: dict[int, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"delta": self.delta.tolist(), "norm_used": self.norm_used,
               "fooled_fraction": self.fooled_fraction, "energy_by_group": self.energy_by_group}
        if self.class_deltas:
            out["class_deltas"] = {str(k): v.tolist() for k, v in self.class_deltas.items()}
        return out


def _scores(model, X) -> np.ndarray:
    s = np.asarray(model(X), dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("model produced non-finite scores")
    return s


def _norm(v: np.ndarray, norm: str) -> np.ndarray:
    return np.linalg.norm(v, axis=-1) if norm == "l2" else np.abs(v).max(axis=-1)


def project(delta: np.ndarray, budget: float, norm: str) -> np.ndarray:
    """Project rows of ``delta`` onto the norm ball of radius ``budget``."""
    if norm == "linf":
        return np.clip(delta, -budget, budget)
    n = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.where(n > budget, budget / np.maximum(n, 1e-300), 1.0)
    return delta * scale


def _ascent_step(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    n = np.linalg.norm(grad, axis=-1, keepdims=True)
    return np.where(n > 0, grad / np.where(n > 0, n, 1.0), 0.0)


def _random_start(shape, budget, norm, rng) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-budget, budget, shape)
    g = rng.standard_normal(shape)
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    r = budget * rng.random((shape[0], 1)) ** (1.0 / shape[1])
    return g * r


def pgd(model, X: np.ndarray, y: np.ndarray, cfg: AttackConfig, trace: list | None = None) -> np.ndarray:
    """Per-example projected gradient ascent; returns perturbed inputs.

    The first restart starts at ``X``; further restarts start uniformly in
    the ball.  The worst-case (highest-loss) restart is kept per example.
    ``trace``, if given, receives the per-step mean loss of the best restart.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if cfg.budget == 0:
        return X[0].copy() if single else X.copy()
    rng = np.random.default_rng(cfg.seed)
    best = X.copy()
    best_loss = -y * _scores(model, X)
    best_trace = None
    for r in range(cfg.restarts):
        delta = np.zeros_like(X) if r == 0 else _random_start(X.shape, cfg.budget, cfg.norm, rng)
        step = np.full((X.shape[0], 1), cfg.step_size)
        loss = -y * _scores(model, X + delta)
        run_trace = [float(loss.mean())]
        for _ in range(cfg.steps):
            g = -y[:, None] * model.input_grad(X + delta)
            cand = project(delta + step * _ascent_step(g, cfg.norm), cfg.budget, cfg.norm)
            cand_loss = -y * _scores(model, X + cand)
            if cfg.monotone:
                ok = cand_loss >= loss
                delta = np.where(ok[:, None], cand, delta)
                loss = np.where(ok, cand_loss, loss)
                step = np.where(ok[:, None], step, step / 2)
            else:
                delta, loss = cand, cand_loss
            run_trace.append(float(loss.mean()))
        better = loss > best_loss if r else np.ones_like(loss, dtype=bool)
        best = np.where(better[:, None], X + delta, best)
        best_loss = np.where(better, loss, best_loss)
        if best_trace is None or r == 0:
            best_trace = run_trace
    if trace is not None:
        trace.extend(best_trace)
    return best[0] if single else best


# ---------------------------------------------------------------------------
# universal perturbations
# ---------------------------------------------------------------------------

def group_energy(delta: np.ndarray, data: Dataset, groups=("S", "Sc")) -> dict[str, float]:
    """Fraction of ``|delta|^2`` carried by each latent coordinate group."""
    lat = delta @ data.rotation if data.rotation is not None else np.asarray(delta)
    return _energy_from_sq(lat ** 2, data, groups)


def _shared_delta(model, X, y, cfg: AttackConfig) -> np.ndarray:
    delta = np.zeros(X.shape[1])
    if cfg.budget == 0:
        return delta
    for _ in range(cfg.steps):
        Xp = X + delta
        w = expit(y * _scores(model, Xp))  # logistic weights: unfooled points dominate
        g = -(w * y) @ model.input_grad(Xp) / X.shape[0]
        delta = project(delta + cfg.step_size * _ascent_step(g, cfg.norm), cfg.budget, cfg.norm)
    return delta


def _minimal_flip(f: float, g: np.ndarray, norm: str, overshoot: float) -> np.ndarray:
    """Smallest step that moves a linearized score f + g.r across zero."""
    if norm == "linf":
        scale = np.abs(g).sum()
        return -(1 + overshoot) * f / scale * np.sign(g) if scale > 0 else np.zeros_like(g)
    sq = g @ g
    return -(1 + overshoot) * f / sq * g if sq > 0 else np.zeros_like(g)


def _deepfool_delta(model, X, y, cfg: AttackConfig, max_passes: int, overshoot: float = 0.02,
                    target_rate: float = 0.8) -> np.ndarray:
    """Classic universal perturbation: sweep the data and, for every point the
    current perturbation does not yet fool, add its minimal flipping step and
    project back onto the budget ball."""
    delta = np.zeros(X.shape[1])
    if cfg.budget == 0:
        return delta
    rng = np.random.default_rng(cfg.seed)
    clean = np.where(_scores(model, X) >= 0, 1.0, -1.0)
    for _ in range(max_passes):
        for i in rng.permutation(X.shape[0]):
            x = (X[i] + delta)[None]
            f = float(_scores(model, x)[0])
            if np.where(f >= 0, 1.0, -1.0) != clean[i]:
                continue
            step = _minimal_flip(f, model.input_grad(x)[0], cfg.norm, overshoot)
            delta = project(delta + step, cfg.budget, cfg.norm)
        if np.mean(np.where(_scores(model, X + delta) >= 0, 1.0, -1.0) != clean) >= target_rate:
            break
    return delta


def uap(model, data: Dataset, cfg: AttackConfig, per_class: bool = False, method: str = "ascent",
        max_passes: int = 5) -> UapResult:
    """Universal perturbation under the budget in ``cfg``.

    ``method="ascent"`` runs ``cfg.steps`` steps of projected ascent on the
    mean logistic loss.  ``method="deepfool"`` runs the sweep-and-project
    algorithm: up to ``max_passes`` passes over the data, each adding the
    minimal flipping step for every point not yet fooled, stopping once 80%
    of points are fooled.  With ``per_class`` one universal perturbation is
    fitted per label and applied to every example of that label.
    """
    if data.n == 0:
        raise ValueError("empty dataset")
    if method not in ("deepfool", "ascent"):
        raise ValueError(f"unknown UAP method {method!r}")
    X, y = data.features, data.labels.astype(np.float64)

    def fit(Xs, ys):
        if method == "ascent":
            return _shared_delta(model, Xs, ys, cfg)
        return _deepfool_delta(model, Xs, ys, cfg, max_passes)

    if not per_class:
        delta = fit(X, y)
        fooled = 1.0 - accuracy(_scores(model, X + delta), y)
        return UapResult(delta, float(_norm(delta, cfg.norm)), fooled, group_energy(delta, data))
    class_deltas = {}
    for label in (-1, 1):
        mask = y == label
        class_deltas[label] = fit(X[mask], y[mask]) if mask.any() else np.zeros(data.d)
    Xp = X + np.where((y > 0)[:, None], class_deltas[1], class_deltas[-1])
    fooled = 1.0 - accuracy(_scores(model, Xp), y)
    lat_sq = sum((v @ data.rotation if data.rotation is not None else v) ** 2 for v in class_deltas.values())
    energy = _energy_from_sq(lat_sq, data)
    return UapResult(class_deltas[1], float(max(_norm(v, cfg.norm) for v in class_deltas.values())),
                     fooled, energy, class_deltas)


def _energy_from_sq(sq: np.ndarray, data: Dataset, groups=("S", "Sc")) -> dict[str, float]:
    total = sq.sum()
    return {g: float(sq[list(data.resolve_group(g))].sum() / total) if total > 0
            else len(data.resolve_group(g)) / data.d for g in groups}


def uap_transfer(delta, other_model, data: Dataset) -> float:
    """Error rate of ``other_model`` on perturbed data.

    ``delta`` is a vector, a :class:`UapResult`, or a ``{label: vector}`` map.
    """
    if isinstance(delta, UapResult):
        delta = delta.class_deltas or delta.delta
    y = data.labels
    if isinstance(delta, dict):
        shift = np.where((y > 0)[:, None], np.asarray(delta[1]), np.asarray(delta[-1]))
    else:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (data.d,):
            raise ValueError(f"perturbation dimension {delta.shape} does not match data dimension {data.d}")
        shift = delta
    return 1.0 - accuracy(_scores(other_model, data.features + shift), y)


# ---------------------------------------------------------------------------
# adversarial training
# ---------------------------------------------------------------------------

def adversarial_train(model, data, cfg_attack: AttackConfig, cfg_train):
    """Standard training with every batch replaced by its PGD perturbation."""
    from .mlp import train

    if cfg_attack.budget == 0:
        return train(model, data, cfg_train)
    return train(model, data, cfg_train, batch_transform=lambda m, Xb, yb: pgd(m, Xb, yb, cfg_attack))
