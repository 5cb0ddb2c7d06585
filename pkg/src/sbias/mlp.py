"""Fully-connected scalar-output networks with hand-written backprop.

Parameters live in an ordered dict:

    W1..WL   hidden weights, shape (fan_in, width)
    b1..bL   hidden biases (absent when ``use_bias`` is False)
    a1..aL   PReLU slopes, one per unit (PReLU only)
    Wout     output weights, shape (width,)
    bout     output bias, shape (1,)

The predicted label is ``sign(score)`` with ties going to +1.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "leaky_relu", "prelu", "tanh")
LOSSES = ("hinge", "logistic")
INIT_SCHEMES = ("kaiming", "xavier", "theorem", "theorem_log4", "custom")
PRELU_INIT = 0.25
LEAK = 0.01
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InitSpec:
    """``theorem`` uses variance 1/(d k log^2 d); ``theorem_log4`` uses log^4 d."""

    scheme: str = "kaiming"
    scale: float = 1.0
    variance: float | None = None

    def __post_init__(self):
        if self.scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        if self.scale < 0:
            raise ValueError("init scale must be non-negative")
        if self.scheme == "custom" and (self.variance is None or self.variance < 0):
            raise ValueError("custom init needs a non-negative variance")


def theorem_variance(d: int, k: int, log_power: int = 2) -> float:
    return 1.0 / (d * k * math.log(d) ** log_power)


@dataclass
class MlpModel:
    params: dict[str, np.ndarray]
    d: int
    width: int
    depth: int
    activation: str = "relu"
    v_frozen: bool = False
    use_bias: bool = True
    seed: int = 0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return forward(self, X)

    def input_grad(self, X: np.ndarray) -> np.ndarray:
        """d score / d x for each row of ``X``."""
        return score_input_grad(self, X)

    @property
    def arch(self) -> tuple[int, int]:
        return (self.width, self.depth)

    @property
    def frozen(self) -> frozenset[str]:
        if self.v_frozen:
            return frozenset(k for k in ("Wout", "bout") if k in self.params)
        return frozenset()

    def copy(self) -> "MlpModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def same_params(self, other: "MlpModel") -> bool:
        return (self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def init_model(d: int, arch: tuple[int, int], init: InitSpec | None = None, freeze_output: bool = False,
               seed: int = 0, activation: str = "relu", use_bias: bool = True) -> MlpModel:
    width, depth = arch
    init = init or InitSpec()
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if width < 1 or depth < 1:
        raise ValueError("width and depth must be positive")
    if freeze_output and width % 2:
        raise ValueError("frozen output layer needs an even width to split +-1/sqrt(k) evenly")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    fan_in = d
    for layer in range(1, depth + 1):
        std = _hidden_std(init, fan_in, width, d)
        params[f"W{layer}"] = rng.standard_normal((fan_in, width)) * std
        if use_bias:
            params[f"b{layer}"] = np.zeros(width)
        if activation == "prelu":
            params[f"a{layer}"] = np.full(width, PRELU_INIT)
        fan_in = width
    if freeze_output:
        v = np.concatenate([np.full(width // 2, 1.0), np.full(width // 2, -1.0)]) / math.sqrt(width)
        params["Wout"] = rng.permutation(v)
    else:
        if init.scheme == "xavier":
            std = math.sqrt(2.0 / (width + 1))
        else:
            std = math.sqrt(1.0 / width)
        params["Wout"] = rng.standard_normal(width) * std * init.scale
    if use_bias:
        params["bout"] = np.zeros(1)
    return MlpModel(params, d, width, depth, activation, freeze_output, use_bias, seed)


def _hidden_std(init: InitSpec, fan_in: int, fan_out: int, d: int) -> float:
    if init.scheme == "kaiming":
        base = math.sqrt(2.0 / fan_in)
    elif init.scheme == "xavier":
        base = math.sqrt(2.0 / (fan_in + fan_out))
    elif init.scheme == "theorem":
        base = math.sqrt(theorem_variance(d, fan_out, 2))
    elif init.scheme == "theorem_log4":
        base = math.sqrt(theorem_variance(d, fan_out, 4))
    else:
        base = math.sqrt(init.variance)
    return base * init.scale


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _act(model: MlpModel, z: np.ndarray, layer: int) -> np.ndarray:
    a = model.activation
    if a == "relu":
        return np.maximum(z, 0.0)
    if a == "leaky_relu":
        return np.where(z >= 0, z, LEAK * z)
    if a == "prelu":
        return np.where(z >= 0, z, model.params[f"a{layer}"] * z)
    return np.tanh(z)


def _act_grad(model: MlpModel, z: np.ndarray, h: np.ndarray, layer: int) -> np.ndarray:
    # subgradient at 0 taken as the active branch
    a = model.activation
    if a == "relu":
        return (z >= 0).astype(z.dtype)
    if a == "leaky_relu":
        return np.where(z >= 0, 1.0, LEAK)
    if a == "prelu":
        return np.where(z >= 0, 1.0, model.params[f"a{layer}"])
    return 1.0 - h * h


def _check_input(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.d:
        raise ValueError(f"input dimension {X.shape[1]} does not match model dimension {model.d}")
    return X


def _forward_cache(model: MlpModel, X: np.ndarray, masks: Sequence[np.ndarray] | None = None):
    p = model.params
    zs, hs = [], [X]
    h = X
    for layer in range(1, model.depth + 1):
        z = h @ p[f"W{layer}"]
        if model.use_bias:
            z = z + p[f"b{layer}"]
        h = _act(model, z, layer)
        if masks is not None:
            h = h * masks[layer - 1]
        zs.append(z)
        hs.append(h)
    s = h @ p["Wout"]
    if model.use_bias:
        s = s + p["bout"][0]
    return s, zs, hs


def forward(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Scores for a batch (n, d) or a single d-vector (returns shape (n,) or (1,))."""
    X = _check_input(model, X)
    return _forward_cache(model, X)[0]


def predict(scores: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(scores) >= 0, 1, -1)


def loss_value(scores: np.ndarray, y: np.ndarray, loss: str) -> float:
    margin = y * scores
    if loss == "hinge":
        return float(np.mean(np.maximum(0.0, 1.0 - margin)))
    if loss == "logistic":
        return float(np.mean(np.logaddexp(0.0, -margin)))
    raise ValueError(f"unknown loss {loss!r}")


def _dloss_dscore(scores: np.ndarray, y: np.ndarray, loss: str) -> np.ndarray:
    margin = y * scores
    if loss == "hinge":
        return -y * (margin <= 1.0)
    if loss == "logistic":
        return -y * expit(-margin)
    raise ValueError(f"unknown loss {loss!r}")


def _backward(model, g, zs, hs, masks, need_input: bool = False):
    """Propagate per-example dL/ds (already divided by batch size) to parameters and, on request, input."""
    p = model.params
    grads: dict[str, np.ndarray] = {}
    grads["Wout"] = hs[-1].T @ g
    if model.use_bias:
        grads["bout"] = np.array([g.sum()])
    dh = np.outer(g, p["Wout"])
    for layer in range(model.depth, 0, -1):
        z = zs[layer - 1]
        if masks is not None:
            dh = dh * masks[layer - 1]
        if model.activation == "relu":
            dz = np.where(z >= 0, dh, 0.0)
        else:
            h_act = _act(model, z, layer) if model.activation == "tanh" else None
            dz = dh * _act_grad(model, z, h_act, layer)
        if model.activation == "prelu":
            grads[f"a{layer}"] = (dh * np.where(z < 0, z, 0.0)).sum(axis=0)
        grads[f"W{layer}"] = hs[layer - 1].T @ dz
        if model.use_bias:
            grads[f"b{layer}"] = dz.sum(axis=0)
        if layer > 1 or need_input:
            dh = dz @ p[f"W{layer}"].T
    for name in model.frozen:
        grads[name] = np.zeros_like(p[name])
    return {k: grads[k] for k in p}, dh


def loss_and_grad(model: MlpModel, X: np.ndarray, y: np.ndarray, loss: str = "logistic",
                  dropout_masks: Sequence[np.ndarray] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and its gradient for every parameter (frozen ones are zero)."""
    X = _check_input(model, X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in batch")
    s, zs, hs = _forward_cache(model, X, dropout_masks)
    g = _dloss_dscore(s, y, loss) / X.shape[0]
    grads, _ = _backward(model, g, zs, hs, dropout_masks)
    return loss_value(s, y, loss), grads


def score_input_grad(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = _check_input(model, X)
    s, zs, hs = _forward_cache(model, X)
    _, dx = _backward(model, np.ones_like(s), zs, hs, None, need_input=True)
    return dx


def dropout_masks(model: MlpModel, n: int, p: float, rng: np.random.Generator) -> list[np.ndarray] | None:
    """Inverted-dropout masks: entries are 0 or 1/(1-p)."""
    if p <= 0:
        return None
    keep = 1.0 - p
    return [(rng.random((n, model.width)) < keep) / keep for _ in range(model.depth)]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSpec:
    name: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 5e-7
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    alpha: float = 0.99

    def __post_init__(self):
        if self.name not in ("sgd", "adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def parse(cls, text: str, **kw) -> "OptimizerSpec":
        """``"sgd:0.1"`` -> SGD with lr 0.1."""
        name, _, lr = text.partition(":")
        if lr:
            kw["lr"] = float(lr)
        return cls(name=name.lower(), **kw)


class Optimizer:
    """SGD (torch-style momentum), Adam and RMSProp with coupled weight decay."""

    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             frozen: frozenset[str] = frozenset(), lr: float | None = None) -> None:
        sp = self.spec
        lr = sp.lr if lr is None else lr
        self.t += 1
        for name, p in params.items():
            if name in frozen:
                continue
            g = grads[name]
            if sp.weight_decay:
                g = g + sp.weight_decay * p
            st = self.state.setdefault(name, {})
            if sp.name == "sgd":
                if sp.momentum:
                    buf = st.get("buf")
                    buf = g.copy() if buf is None else sp.momentum * buf + g
                    st["buf"] = buf
                    g = buf
                p -= lr * g
            elif sp.name == "adam":
                b1, b2 = sp.betas
                m = st.get("m", np.zeros_like(p))
                v = st.get("v", np.zeros_like(p))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                st["m"], st["v"] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                p -= lr * mhat / (np.sqrt(vhat) + sp.eps)
            else:
                v = st.get("v", np.zeros_like(p))
                v = sp.alpha * v + (1 - sp.alpha) * g * g
                st["v"] = v
                p -= lr * g / (np.sqrt(v) + sp.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss: str = "logistic"
    optimizer: OptimizerSpec = OptimizerSpec()
    batch_size: int = 256
    epochs: int = 500
    max_steps: int | None = None
    dropout: float = 0.0
    seed: int = 0
    early_stop_loss: float | None = 1e-2
    lr_decay: tuple[float, int] | None = None  # (factor, every n epochs)
    divergence_loss: float = 1e6
    record_group_norms: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ValueError("epochs/steps must be non-negative")


@dataclass
class TrainHistory:
    step_loss: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    group_norms: dict[str, list[float]] = field(default_factory=dict)
    diverged: bool = False
    stopped_early: bool = False
    steps: int = 0
    epochs: int = 0

    def to_dict(self) -> dict:
        return {"steps": self.steps, "epochs": self.epochs, "diverged": self.diverged,
                "stopped_early": self.stopped_early, "final_epoch_loss": self.epoch_loss[-1] if self.epoch_loss else None}


BatchTransform = Callable[[MlpModel, np.ndarray, np.ndarray], np.ndarray]


def _unpack(data) -> tuple[np.ndarray, np.ndarray, object]:
    if hasattr(data, "features"):
        return data.features, np.asarray(data.labels, dtype=np.float64), data
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64), None


def _group_norms(model: MlpModel, dataset) -> dict[str, float]:
    W = model.params["W1"]
    if dataset.rotation is not None:
        W = dataset.rotation.T @ W
    return {g: float(np.linalg.norm(W[list(dataset.group_map[g])])) for g in ("S", "Sc")
            if dataset.group_map.get(g)}


def train(model: MlpModel, data, cfg: TrainConfig,
          batch_transform: BatchTransform | None = None) -> tuple[MlpModel, TrainHistory]:
    """Minibatch training; ``data`` is a Dataset or an ``(X, y)`` pair.

    ``batch_transform(model, Xb, yb)`` may replace each batch's inputs (used
    for adversarial training).  Shuffling and dropout draw from independent
    streams derived from ``cfg.seed``.
    """
    X, y, dataset = _unpack(data)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    model = model.copy()
    hist = TrainHistory()
    shuffle_ss, dropout_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    opt = Optimizer(cfg.optimizer)
    track = cfg.record_group_norms and model.depth == 1 and dataset is not None
    frozen = model.frozen
    bs = min(cfg.batch_size, n)

    for epoch in range(cfg.epochs):
        if cfg.max_steps is not None and hist.steps >= cfg.max_steps:
            break
        lr = cfg.optimizer.lr
        if cfg.lr_decay is not None:
            factor, every = cfg.lr_decay
            lr *= factor ** (epoch // every)
        perm = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            if cfg.max_steps is not None and hist.steps >= cfg.max_steps:
                break
            idx = perm[start:start + bs]
            Xb, yb = X[idx], y[idx]
            if batch_transform is not None:
                Xb = batch_transform(model, Xb, yb)
            masks = dropout_masks(model, len(idx), cfg.dropout, dropout_rng)
            loss, grads = loss_and_grad(model, Xb, yb, cfg.loss, masks)
            if not math.isfinite(loss) or loss > cfg.divergence_loss:
                hist.diverged = True
                hist.step_loss.append(loss)
                return model, hist
            opt.step(model.params, grads, frozen, lr)
            hist.step_loss.append(loss)
            hist.steps += 1
            total += loss * len(idx)
            count += len(idx)
            if track:
                for g, v in _group_norms(model, dataset).items():
                    hist.group_norms.setdefault(g, []).append(v)
        if count == 0:
            break
        hist.epochs += 1
        hist.epoch_loss.append(total / count)
        if cfg.early_stop_loss is not None and hist.epoch_loss[-1] < cfg.early_stop_loss:
            hist.stopped_early = True
            break
    return model, hist


# ---------------------------------------------------------------------------
# ensembles, interpolation, checkpoints
# ---------------------------------------------------------------------------

def ensemble_score(models: Sequence[Callable[[np.ndarray], np.ndarray]], X: np.ndarray) -> np.ndarray:
    if not models:
        raise ValueError("ensemble needs at least one model")
    dims = {getattr(m, "d", None) for m in models} - {None}
    if len(dims) > 1:
        raise ValueError("ensemble members disagree on input dimension")
    return np.mean([np.asarray(m(X)) for m in models], axis=0)


class Ensemble:
    def __init__(self, models: Sequence[MlpModel]):
        if not models:
            raise ValueError("ensemble needs at least one model")
        self.models = list(models)
        self.d = models[0].d

    def __call__(self, X):
        return ensemble_score(self.models, X)

    def input_grad(self, X):
        return np.mean([m.input_grad(X) for m in self.models], axis=0)


def interpolate(model_a: MlpModel, model_b: MlpModel, alpha: float) -> MlpModel:
    """Parameter-wise ``alpha * a + (1 - alpha) * b``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if (model_a.params.keys() != model_b.params.keys()
            or any(model_a.params[k].shape != model_b.params[k].shape for k in model_a.params)
            or model_a.activation != model_b.activation):
        raise ValueError("interpolation needs identical architectures")
    if alpha == 1.0:
        return model_a.copy()
    if alpha == 0.0:
        return model_b.copy()
    params = {k: alpha * model_a.params[k] + (1.0 - alpha) * model_b.params[k] for k in model_a.params}
    return replace(model_a, params=params)


def save_model(model: MlpModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION, "d": model.d, "width": model.width, "depth": model.depth,
        "activation": model.activation, "v_frozen": model.v_frozen, "use_bias": model.use_bias,
        "seed": model.seed, "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values())
    path.write_bytes(struct.pack("<Q", len(hb)) + hb + body)
    return path


def load_model(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IOError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise IOError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    off = 8 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(raw):
            raise IOError(f"{path}: truncated checkpoint")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    return MlpModel(params, header["d"], header["width"], header["depth"], header["activation"],
                    header["v_frozen"], header["use_bias"], header["seed"])
