"""Population gradients and weight-trajectory bands for one-hidden-layer ReLU
networks trained with hinge loss on the LSN distribution.

Notation: a hidden unit has weights ``w = (w1, w2, wbar)`` over the linear,
3-slab and noise coordinates and output weight ``v``.  With
``a = (w1 + w2)/|wbar|``, ``b = (w1 - w2)/|wbar|`` and ``c = w1/|wbar|``,
when every example is hinge-active the expected gradients are

    d/dw1   = -(v/4) [2 + Phi(a) + Phi(b) - 2 Phi(c)]
    d/dw2   = -(v/4) [Phi(a) - Phi(b)]
    d/dwbar ~ G * wbar,   G = -(v / (4 |wbar|)) [phi(a) + phi(b) - 2 phi(c)]
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erfc

from .datagen import generate_dataset, preset
from .mlp import InitSpec, init_model, loss_and_grad

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class OutOfRangeError(ValueError):
    pass


def gauss_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    out = INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return float(out) if out.ndim == 0 else out


def gauss_cdf(z):
    # erfc keeps full relative precision in the lower tail
    z = np.asarray(z, dtype=np.float64)
    out = 0.5 * erfc(-z / SQRT2)
    return float(out) if out.ndim == 0 else out


def _ratios(w1, w2, noise_norm, limit):
    if noise_norm < 0:
        raise ValueError("noise norm must be non-negative")
    nums = np.array([w1 + w2, w1 - w2, w1], dtype=np.float64)
    if noise_norm == 0:
        if not limit:
            raise ValueError("closed forms are undefined at |wbar| = 0; pass limit=True for the Phi limit")
        return np.where(nums == 0, 0.0, np.sign(nums) * np.inf)
    return nums / noise_norm


def pop_grad_linear(w1: float, w2: float, noise_norm: float, v: float, limit: bool = False) -> float:
    a, b, c = _ratios(w1, w2, noise_norm, limit)
    return -(v / 4.0) * (2.0 + gauss_cdf(a) + gauss_cdf(b) - 2.0 * gauss_cdf(c))


def pop_grad_slab(w1: float, w2: float, noise_norm: float, v: float, limit: bool = False) -> float:
    a, b, _ = _ratios(w1, w2, noise_norm, limit)
    return -(v / 4.0) * (gauss_cdf(a) - gauss_cdf(b))


@dataclass(frozen=True)
class NoiseGradient:
    """``coeff * wbar`` approximates the noise gradient; the bounds cap the residual
    along ``wbar/|wbar|`` and orthogonal to it (``None`` when ``d`` is not given)."""

    coeff: float
    along_bound: float | None = None
    orth_bound: float | None = None

    def __float__(self) -> float:
        return self.coeff


def pop_grad_noise_coeff(w1: float, w2: float, noise_norm: float, v: float, d: int | None = None,
                         c: float = 2.0, limit: bool = False) -> NoiseGradient:
    a, b, cc = _ratios(w1, w2, noise_norm, limit)
    bracket = gauss_pdf(a) + gauss_pdf(b) - 2.0 * gauss_pdf(cc)
    if noise_norm == 0:
        if bracket != 0:
            raise ValueError("noise coefficient diverges at |wbar| = 0 when w1 or w1 +- w2 vanishes")
        coeff = 0.0
    else:
        coeff = -(v / (4.0 * noise_norm)) * bracket
    if d is None:
        return NoiseGradient(float(coeff))
    along, orth = noise_residual_bounds(v, d, c)
    return NoiseGradient(float(coeff), along, orth)


def noise_residual_bounds(v: float, d: int, c: float = 2.0) -> tuple[float, float]:
    """Residual bounds of the noise gradient: along wbar and orthogonal to it."""
    along = 3.0 * abs(v) * math.log(math.sqrt(c) * d) / (math.sqrt(c) * d)
    orth = 6.0 * abs(v) / math.sqrt(c * d)
    return along, orth


def coordinate_residual_bound(v: float, d: int, c: float = 2.0) -> float:
    """Sampling slack of the linear and slab gradients at n = c d^2."""
    return 5.0 * abs(v) / d * math.sqrt(math.log(c * d * d) / c)


# ---------------------------------------------------------------------------
# Monte-Carlo gradients
# ---------------------------------------------------------------------------

def sample_lsn(n: int, d: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    data = generate_dataset(preset("lsn", d), n, seed)
    return data.features, data.labels.astype(np.float64)


def mc_unit_gradient(w: np.ndarray, v: float, X: np.ndarray, y: np.ndarray,
                     scores: np.ndarray | None = None) -> np.ndarray:
    """Empirical hinge gradient of one hidden unit, asserting every example is hinge-active.

    ``scores`` are the network outputs used for the activity check; by default
    the unit is treated as the whole network.
    """
    pre = X @ w
    if scores is None:
        scores = v * np.maximum(pre, 0.0)
    if not np.all(y * scores <= 1.0):
        raise AssertionError("hinge is inactive on part of the sample; closed forms do not apply")
    gate = (pre >= 0).astype(np.float64)
    return -v * ((gate * y) @ X) / X.shape[0]


def mc_check(w: np.ndarray, v: float, X: np.ndarray, y: np.ndarray, c: float = 2.0) -> dict[str, float]:
    """Absolute errors of the closed forms against one Monte-Carlo gradient."""
    g = mc_unit_gradient(w, v, X, y)
    w1, w2, wbar = w[0], w[1], w[2:]
    nn = float(np.linalg.norm(wbar))
    u = wbar / nn
    noise = g[2:]
    along = float(noise @ u)
    orth = float(np.linalg.norm(noise - along * u))
    ng = pop_grad_noise_coeff(w1, w2, nn, v, d=X.shape[1], c=c)
    return {
        "linear": abs(g[0] - pop_grad_linear(w1, w2, nn, v)),
        "slab": abs(g[1] - pop_grad_slab(w1, w2, nn, v)),
        "noise_along": abs(along - ng.coeff * nn),
        "noise_orth": orth,
        "noise_along_bound": ng.along_bound,
        "noise_orth_bound": ng.orth_bound,
    }


# ---------------------------------------------------------------------------
# trajectory bands
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoremParams:
    d: int = 400
    k: int = 16
    eta: float = 0.4
    m: int | None = None
    c: float = 2.0
    alpha: float | None = None
    c0: float = 2.0

    def __post_init__(self):
        if self.d < 3 or self.k < 2 or self.k % 2:
            raise ValueError("need d >= 3 and an even k >= 2")
        if not self.eta > 0 or not self.c > 0:
            raise ValueError("eta and c must be positive")
        if self.m is not None and self.m < self.c * self.d ** 2:
            raise ValueError(f"sample size {self.m} is below c*d^2 = {self.c * self.d ** 2:g}")

    @property
    def sample_size(self) -> int:
        return int(self.m) if self.m is not None else int(math.ceil(self.c * self.d ** 2))

    @property
    def alpha_eff(self) -> float:
        """The given exponent, or the smallest one (> 2) with m <= d^alpha / c."""
        if self.alpha is not None:
            return self.alpha
        return max(2.0 + 1e-9, math.log(self.c * self.sample_size) / math.log(self.d))

    @property
    def c_hat(self) -> float:
        return self.eta / 4.0

    def growth(self, t: int) -> float:
        return self.c0 * (1.0 + self.c_hat) ** t

    def c_n(self, t: int) -> float:
        return 5.0 * math.sqrt(self.alpha_eff) * self.growth(t)

    def step_limit(self, t: int) -> float:
        """Right-hand side of the range condition t <= (4/eta)(1 - c_n/sqrt(log d))."""
        return (4.0 / self.eta) * (1.0 - self.c_n(t) / math.sqrt(math.log(self.d)))

    def in_range(self, t: int) -> bool:
        return t <= self.step_limit(t)


@dataclass(frozen=True)
class TrajectoryPrediction:
    t: int
    expected_w1_abs: float
    w1_band: float
    w2_bound: float
    noise_norm_bound: float
    score_center: float
    score_halfwidth: float
    in_range: bool

    @property
    def score_band(self) -> tuple[float, float]:
        return (self.score_center, self.score_halfwidth)


def predict_trajectory(params: TheoremParams, t: int, strict: bool = True) -> TrajectoryPrediction:
    """Bands on w1, w2, |wbar| and y f(x) after ``t`` steps.

    With ``strict`` the step must satisfy the range condition; at practical
    dimensions that condition is never met, so desk-scale checks use
    ``strict=False`` and carry the ``in_range`` flag instead.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    ok = params.in_range(t)
    if strict and not ok:
        raise OutOfRangeError(f"t={t} exceeds the admissible range t <= (4/eta)(1 - c_n/sqrt(log d)) "
                              f"= {params.step_limit(t):.4g}")
    d, k = params.d, params.k
    log_d = math.log(d)
    band = params.growth(t) / (math.sqrt(d * k) * log_d)
    return TrajectoryPrediction(
        t=t,
        expected_w1_abs=t * params.eta / (2.0 * math.sqrt(k)),
        w1_band=band,
        w2_bound=band,
        noise_norm_bound=params.growth(t) / (math.sqrt(k) * log_d),
        score_center=t * params.eta / 4.0,
        score_halfwidth=params.c_n(t) / math.sqrt(log_d),
        in_range=ok,
    )


# ---------------------------------------------------------------------------
# end-to-end verification
# ---------------------------------------------------------------------------

@dataclass
class TheoremReport:
    params: dict
    seed: int
    steps: list[dict] = field(default_factory=list)
    final_ratio: float = float("nan")
    test_error: float = float("nan")
    hinge_all_active: bool = False
    w1_all_in_band: bool = False
    w2_all_in_band: bool = False
    noise_all_in_band: bool = False
    any_step_in_range: bool = False

    @property
    def violations(self) -> list[str]:
        out = []
        for name in ("hinge_all_active", "w1_all_in_band", "w2_all_in_band", "noise_all_in_band"):
            if not getattr(self, name):
                out.append(name)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"] = self.violations
        return d


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def _scores_and_error(model, d: int, n: int, seed: int, chunk: int) -> tuple[float, float]:
    """(test error, hinge-active fraction) on ``n`` fresh samples generated in chunks."""
    wrong = active = 0
    ss = np.random.SeedSequence(seed).generate_state(max(1, -(-n // chunk)))
    for (lo, hi), s in zip(_chunks(n, chunk), ss):
        X, y = sample_lsn(hi - lo, d, int(s))
        f = model(X)
        wrong += int(np.sum(np.where(f >= 0, 1, -1) != y))
        active += int(np.sum(y * f <= 1.0))
    return wrong / n, active / n


def verify_theorem(d: int = 400, k: int = 16, eta: float = 0.4, m: int | None = None, t_steps: int = 4,
                   seed: int = 1, c: float = 2.0, n_test: int = 100_000, log_power: int = 2,
                   chunk: int = 20_000) -> TheoremReport:
    """Train the theorem's network with fresh hinge-loss batches and compare against the bands.

    Each of the ``t_steps`` steps uses its own batch of ``m / t_steps`` LSN
    samples.  States t = 0..t_steps are recorded; the hinge-active fraction at
    state t is measured on the batch consumed by step t+1 (the test set for
    the final state).
    """
    params = TheoremParams(d=d, k=k, eta=eta, m=m, c=c)
    m_total = params.sample_size
    batch = m_total // t_steps if t_steps else 0
    init = InitSpec("theorem" if log_power == 2 else "theorem_log4")
    model = init_model(d, (k, 1), init, freeze_output=True, seed=seed, use_bias=False)
    v = model.params["Wout"]
    batch_seeds, test_seed = np.random.SeedSequence(seed).spawn(2)
    batch_states = batch_seeds.generate_state(max(1, t_steps))
    report = TheoremReport(params=asdict(params), seed=seed)

    for t in range(t_steps + 1):
        pred = predict_trajectory(params, t, strict=False)
        W = model.params["W1"]
        w1, w2 = W[0], W[1]
        noise = np.linalg.norm(W[2:], axis=0)
        dev = np.abs(w1 - t * eta * v / 2.0)
        row = {
            "t": t,
            "in_range": pred.in_range,
            "max_w1_dev": float(dev.max()),
            "w1_band": pred.w1_band,
            "max_w2": float(np.abs(w2).max()),
            "w2_bound": pred.w2_bound,
            "max_noise_norm": float(noise.max()),
            "noise_bound": pred.noise_norm_bound,
            "score_center": pred.score_center,
            "score_halfwidth": pred.score_halfwidth,
        }
        if t < t_steps:
            total = None
            active = 0
            sub = np.random.SeedSequence(int(batch_states[t])).generate_state(max(1, -(-batch // chunk)))
            for (lo, hi), s in zip(_chunks(batch, chunk), sub):
                X, y = sample_lsn(hi - lo, d, int(s))
                f = model(X)
                active += int(np.sum(y * f <= 1.0))
                _, g = loss_and_grad(model, X, y, loss="hinge")
                weight = (hi - lo) / batch
                total = {n: weight * a for n, a in g.items()} if total is None else \
                    {n: total[n] + weight * g[n] for n in g}
            row["hinge_active"] = active / batch
            row["test_error"], _ = _scores_and_error(model, d, n_test, int(test_seed.generate_state(1)[0]), chunk)
            # plain gradient descent on the trainable layer
            model.params["W1"] = model.params["W1"] - eta * total["W1"]
        else:
            err, act = _scores_and_error(model, d, n_test, int(test_seed.generate_state(1)[0]), chunk)
            row["hinge_active"] = act
            row["test_error"] = err
        row["w1_ok"] = row["max_w1_dev"] <= row["w1_band"]
        row["w2_ok"] = row["max_w2"] <= row["w2_bound"]
        row["noise_ok"] = row["max_noise_norm"] <= row["noise_bound"]
        report.steps.append(row)

    W = model.params["W1"]
    report.final_ratio = float(np.abs(W[1]).max() / np.abs(W[0]).min())
    report.test_error = report.steps[-1]["test_error"]
    report.hinge_all_active = all(r["hinge_active"] == 1.0 for r in report.steps)
    report.w1_all_in_band = all(r["w1_ok"] for r in report.steps)
    report.w2_all_in_band = all(r["w2_ok"] for r in report.steps)
    report.noise_all_in_band = all(r["noise_ok"] for r in report.steps)
    report.any_step_in_range = any(r["in_range"] for r in report.steps)
    return report
