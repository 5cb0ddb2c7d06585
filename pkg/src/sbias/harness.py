"""Experiment orchestration, manifests and report emission.

Every experiment takes an :class:`ExperimentConfig`, returns a
:class:`RunManifest` whose ``runs`` are flat rows, and can be replayed from
that manifest.  Per-run seeds are derived by hashing (base seed, cell key),
so results do not depend on the order in which cells or repeats execute.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .attacks import AttackConfig, adversarial_train, uap, uap_transfer
from .datagen import Dataset, DatasetSpec, generate_dataset, preset
from .lsn_theory import verify_theorem
from .metrics import (accuracy, auc, boundary_csv, decision_boundary_grid, influence_ranking,
                      randomized_metrics, robust_accuracy)
from .mlp import Ensemble, InitSpec, OptimizerSpec, TrainConfig, init_model, interpolate, train

EXPERIMENTS = ("extreme-sb", "generalization", "ensemble", "adv-sweep", "interpolation", "theory", "uap")
GAMMA_S = 0.30
GAMMA_DATA = 0.62


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {"loss", "optimizer", "lr", "momentum", "weight_decay", "batch_size", "epochs", "max_steps",
               "dropout", "early_stop_loss", "lr_decay"}
_DATASET_KEYS = {"preset", "d", "gamma", "noise", "width", "rotation_seed", "gamma5", "gamma7", "drop"}
_ATTACK_KEYS = {"norm", "steps", "step_size", "step_scale", "restarts", "monotone"}
_GRID_KEYS = {"lr", "batch_size", "weight_decay", "momentum"}
_THEORY_KEYS = {"d", "k", "eta", "c", "t_steps", "n_test", "log_power", "m"}


@dataclass
class ExperimentConfig:
    experiment: str
    datasets: list[dict] = field(default_factory=list)
    archs: list[list[int]] = field(default_factory=list)
    n_train: int = 50_000
    n_test: int = 10_000
    train: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    grid_size: int | None = None
    val_fraction: float = 0.2
    attack: dict = field(default_factory=dict)
    eval_attack: dict = field(default_factory=dict)
    eps: list[float] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)
    ensemble_sizes: list[int] = field(default_factory=list)
    theory: dict = field(default_factory=dict)
    uap_budget: float = 1.0
    uap_steps: int = 400
    uap_method: str = "ascent"
    uap_passes: int = 5
    repeats: int = 1
    eval_repeats: int = 5
    boundary: bool = False
    boundary_resolution: int = 41
    seed: int = 0
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.repeats < 1 or self.eval_repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.uap_method not in ("deepfool", "ascent"):
            raise ConfigError(f"unknown UAP method {self.uap_method!r}")
        if self.uap_passes < 1:
            raise ConfigError("uap_passes must be >= 1")
        if self.experiment not in ("theory",) and not self.datasets:
            raise ConfigError("at least one dataset is required")
        if self.experiment not in ("theory",) and not self.archs:
            raise ConfigError("at least one architecture is required")
        for ds in self.datasets:
            _check_keys(ds, _DATASET_KEYS, "dataset")
            if "preset" not in ds:
                raise ConfigError("dataset entries need a 'preset'")
        for a in self.archs:
            if len(a) != 2 or min(a) < 1:
                raise ConfigError(f"architecture must be [width, depth], got {a}")
        _check_keys(self.train, _TRAIN_KEYS, "train")
        _check_keys(self.grid, _GRID_KEYS, "grid")
        _check_keys(self.attack, _ATTACK_KEYS, "attack")
        _check_keys(self.eval_attack, _ATTACK_KEYS, "eval_attack")
        _check_keys(self.theory, _THEORY_KEYS, "theory")
        if self.experiment == "generalization":
            if not self.grid or any(not v for v in self.grid.values()):
                raise ConfigError("grid must be non-empty")
        if self.grid_size is not None and self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if any(not 0 <= a <= 1 for a in self.alphas):
            raise ConfigError("alphas must lie in [0, 1]")
        if any(e < 0 for e in self.eps):
            raise ConfigError("eps must be non-negative")
        try:
            _train_config(self.train, 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train settings: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in d:
            raise ConfigError("config needs an 'experiment'")
        base = default_config(d["experiment"]).to_dict()
        base.update(d)
        return cls(**base).validate()

    @property
    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_config(experiment: str) -> ExperimentConfig:
    """Desk-scale defaults for each experiment."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    if experiment == "extreme-sb":
        return ExperimentConfig(experiment, datasets=[{"preset": "lms-5", "d": 50}, {"preset": "lms-5", "d": 250},
                                                      {"preset": "ms-5-7", "d": 50}],
                                archs=[[2000, 1]], n_train=50_000, train={"epochs": 100}, boundary=True)
    if experiment == "generalization":
        return ExperimentConfig(experiment, datasets=[{"preset": "nlms-7", "d": 50, "noise": 0.1}],
                                archs=[[100, 1]], n_train=40_000,
                                grid={"lr": [0.001, 0.01, 0.05, 0.1, 0.3], "batch_size": [4, 16, 64, 256],
                                      "weight_decay": [0.0, 5e-5, 5e-4], "momentum": [0.0, 0.9, 0.95]},
                                grid_size=24, train={"epochs": 40, "max_steps": 20_000})
    if experiment == "ensemble":
        return ExperimentConfig(experiment, datasets=[{"preset": "ms-5", "d": 50},
                                                      {"preset": "nlms-7", "d": 50, "noise": 0.5}],
                                archs=[[100, 2]], n_train=5000, ensemble_sizes=[1, 3, 5, 10],
                                train={"lr": 0.1, "batch_size": 32, "momentum": 0.9, "epochs": 300})
    if experiment == "adv-sweep":
        return ExperimentConfig(experiment, datasets=[{"preset": "advms-5-7", "d": 20}], archs=[[1000, 2]],
                                n_train=6000, n_test=2000, eps=[0.0, 0.1, 0.25, 0.35],
                                attack={"norm": "l2", "steps": 5, "step_scale": 2.5},
                                eval_attack={"norm": "l2", "steps": 40, "step_scale": 2.5},
                                train={"optimizer": "adam", "lr": 0.001, "epochs": 40})
    if experiment == "interpolation":
        return ExperimentConfig(experiment, datasets=[{"preset": "lms-7", "d": 50}], archs=[[100, 1]],
                                n_train=20_000, alphas=[0.0, 0.25, 0.5, 0.75, 1.0], train={"epochs": 100})
    if experiment == "theory":
        return ExperimentConfig(experiment, theory={"d": 400, "k": 16, "eta": 0.4, "c": 2.0, "t_steps": 4}, seed=1)
    return ExperimentConfig(experiment, datasets=[{"preset": "lms-5", "d": 50}, {"preset": "ms-5-7", "d": 50}],
                            archs=[[100, 1]], n_train=50_000, n_test=5000, train={"lr": 0.3, "epochs": 100})


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def derive_seed(base: int, *keys: Any) -> int:
    blob = json.dumps([base, *keys], sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


def dataset_spec(desc: dict) -> DatasetSpec:
    kw = {k: v for k, v in desc.items() if k not in ("preset", "d", "drop")}
    spec = preset(desc["preset"], desc.get("d", 50), **kw)
    if desc.get("drop"):
        spec = spec.drop(desc["drop"])
    return spec


def dataset_label(desc: dict) -> str:
    parts = [desc["preset"], f"d{desc.get('d', 50)}"]
    if "noise" in desc:
        parts.append(f"p{desc['noise']:g}")
    if desc.get("drop"):
        parts.append("drop" + "-".join(map(str, desc["drop"])))
    return "_".join(parts)


def _train_config(over: dict, seed: int) -> TrainConfig:
    over = dict(over)
    opt_kw = {k: over.pop(k) for k in ("lr", "momentum", "weight_decay") if k in over}
    opt_name = over.pop("optimizer", "sgd")
    if "lr_decay" in over and over["lr_decay"] is not None:
        over["lr_decay"] = tuple(over["lr_decay"])
    return TrainConfig(optimizer=OptimizerSpec(opt_name, **opt_kw), seed=seed, **over)


def _attack_config(over: dict, eps: float, seed: int) -> AttackConfig:
    over = dict(over)
    scale = over.pop("step_scale", None)
    steps = over.get("steps", 40)
    if scale is not None and eps > 0:
        over["step_size"] = scale * eps / steps
    return AttackConfig(budget=eps, seed=seed, **over)


def _split(data: Dataset, frac: float, seed: int) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(data.n)
    n_val = int(round(frac * data.n))
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


def _rand_row(model, data: Dataset, repeats: int, seed: int, prefix: str = "") -> dict:
    row = {}
    for g, tag in (("S", "s"), ("Sc", "sc")):
        a, u, k = randomized_metrics(model, data, g, repeats, derive_seed(seed, g))
        row[f"{prefix}{tag}_rand_acc"] = a
        row[f"{prefix}{tag}_rand_auc"] = u
        row[f"{prefix}{tag}_logit_shift"] = k
    return row


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    experiment: str
    config: dict
    config_hash: str
    seeds: dict
    runs: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run_extreme_sb(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    rows, extras = [], {"boundaries": {}}
    for desc, arch, rep in itertools.product(cfg.datasets, cfg.archs, range(cfg.repeats)):
        label = dataset_label(desc)
        key = (label, arch, rep)
        spec = dataset_spec(desc)
        tr = generate_dataset(spec, cfg.n_train, derive_seed(cfg.seed, "train", *key))
        te = generate_dataset(spec, cfg.n_test, derive_seed(cfg.seed, "test", *key))
        model = init_model(spec.d, tuple(arch), seed=derive_seed(cfg.seed, "init", *key))
        model, hist = train(model, tr, _train_config(cfg.train, derive_seed(cfg.seed, "sgd", *key)))
        s = model(te.features)
        row = {"dataset": label, "arch": f"{arch[0]}x{arch[1]}", "repeat": rep,
               "sc_size": len(te.group_map["Sc"]), "std_acc": accuracy(s, te.labels),
               "std_auc": auc(s, te.labels), "epochs": hist.epochs, "diverged": int(hist.diverged)}
        row.update(_rand_row(model, te, cfg.eval_repeats, derive_seed(cfg.seed, "rand", *key)))
        rows.append(row)
        if cfg.boundary:
            probe = te.subset(np.arange(min(te.n, 2000)))
            ranking = influence_ranking(model, probe, seed=derive_seed(cfg.seed, "infl", *key))
            simple = te.group_map["S"][0]
            other = next(i for i, _ in ranking if i != simple)
            axis, grid = decision_boundary_grid(model, te, simple, other, cfg.boundary_resolution)
            extras["boundaries"][f"{label}_{arch[0]}x{arch[1]}_r{rep}_x{simple}_y{other}"] = boundary_csv(axis, grid)
    return rows, extras


def _grid_cells(cfg: ExperimentConfig) -> list[dict]:
    g = cfg.grid
    lrs, bss = g.get("lr", [0.1]), g.get("batch_size", [256])
    rest = list(itertools.product(g.get("weight_decay", [5e-7]), g.get("momentum", [0.0])))
    full = [dict(lr=lr, batch_size=bs, weight_decay=wd, momentum=mo)
            for lr, bs in itertools.product(lrs, bss) for wd, mo in rest]
    if cfg.grid_size is None or cfg.grid_size >= len(full):
        return full
    # stratified over (lr, batch): every cell gets a (wd, momentum) pair in turn
    rng = np.random.default_rng(derive_seed(cfg.seed, "grid"))
    strata = list(itertools.product(lrs, bss))
    order = [rest[i] for i in rng.permutation(len(rest))]
    cells, used = [], set()
    j = 0
    while len(cells) < cfg.grid_size:
        for lr, bs in strata:
            if len(cells) >= cfg.grid_size:
                break
            for off in range(len(order)):
                wd, mo = order[(j + off) % len(order)]
                if (lr, bs, wd, mo) not in used:
                    used.add((lr, bs, wd, mo))
                    cells.append(dict(lr=lr, batch_size=bs, weight_decay=wd, momentum=mo))
                    break
            j += 1
    return cells


def run_generalization(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    rows, extras = [], {"selected": {}}
    cells = _grid_cells(cfg)
    for desc, arch in itertools.product(cfg.datasets, cfg.archs):
        label = dataset_label(desc)
        arch_tag = f"{arch[0]}x{arch[1]}"
        spec = dataset_spec(desc)
        full = generate_dataset(spec, cfg.n_train, derive_seed(cfg.seed, "train", label))
        tr, val = _split(full, cfg.val_fraction, derive_seed(cfg.seed, "split", label))
        te = generate_dataset(spec, cfg.n_test, derive_seed(cfg.seed, "test", label))
        best = None
        for cell in cells:
            key = (label, arch, sorted(cell.items()))
            tcfg = _train_config({**cfg.train, **cell}, derive_seed(cfg.seed, "sgd", *key))
            model = init_model(spec.d, tuple(arch), seed=derive_seed(cfg.seed, "init", label, arch))
            model, hist = train(model, tr, tcfg)
            val_acc = accuracy(model(val.features), val.labels) if not hist.diverged else float("nan")
            row = {"kind": "cell", "dataset": label, "arch": arch_tag, **cell, "diverged": int(hist.diverged),
                   "steps": hist.steps, "val_acc": val_acc}
            rows.append(row)
            if not hist.diverged and (best is None or val_acc > best[0]):
                best = (val_acc, cell, model)
        if best is None:
            continue
        _, cell, model = best
        sel = {"kind": "selected", "dataset": label, "arch": arch_tag, **cell,
               "train_acc": accuracy(model(tr.features), tr.labels),
               "val_acc": best[0], "test_acc": accuracy(model(te.features), te.labels)}
        sel.update(_rand_row(model, te, cfg.eval_repeats, derive_seed(cfg.seed, "rand", label, arch)))
        rows.append(sel)
        extras["selected"][f"{label}_{arch_tag}"] = cell
        # same architecture without the simple coordinate(s)
        sc_spec = spec.drop(spec.simple)
        sc_tr = generate_dataset(sc_spec, cfg.n_train, derive_seed(cfg.seed, "sc-train", label))
        sc_te = generate_dataset(sc_spec, cfg.n_test, derive_seed(cfg.seed, "sc-test", label))
        sc_cell = dict(lr=0.1, batch_size=64, weight_decay=5e-4, momentum=0.9, epochs=300)
        over = {**cfg.train, **sc_cell}
        over.pop("max_steps", None)
        # escaping the initial plateau takes a seed-dependent number of epochs, so a few
        # restarts are run and the best on the validation split is kept
        fit, val = _split(sc_tr, cfg.val_fraction, derive_seed(cfg.seed, "sc-split", label))
        best = None
        for restart in range(3):
            key = (label, arch, restart)
            model = init_model(sc_spec.d, tuple(arch), seed=derive_seed(cfg.seed, "sc-init", *key))
            model, hist = train(model, fit, _train_config(over, derive_seed(cfg.seed, "sc-sgd", *key)))
            val_acc = accuracy(model(val.features), val.labels)
            if best is None or val_acc > best[0]:
                best = (val_acc, restart, model, hist)
        val_acc, restart, model, hist = best
        rows.append({"kind": "no-simple", "dataset": label, "arch": arch_tag, **sc_cell, "restart": restart,
                     "train_acc": accuracy(model(fit.features), fit.labels), "val_acc": val_acc,
                     "test_acc": accuracy(model(sc_te.features), sc_te.labels), "diverged": int(hist.diverged)})
    return rows, extras


def run_ensemble(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    rows = []
    sizes = sorted(cfg.ensemble_sizes or [1])
    for desc, arch in itertools.product(cfg.datasets, cfg.archs):
        label = dataset_label(desc)
        spec = dataset_spec(desc)
        tr = generate_dataset(spec, cfg.n_train, derive_seed(cfg.seed, "train", label))
        te = generate_dataset(spec, cfg.n_test, derive_seed(cfg.seed, "test", label))
        members = []
        for i in range(max(sizes)):
            key = (label, arch, i)
            m = init_model(spec.d, tuple(arch), seed=derive_seed(cfg.seed, "init", *key))
            m, _ = train(m, tr, _train_config(cfg.train, derive_seed(cfg.seed, "sgd", *key)))
            members.append(m)
        member_acc = [accuracy(m(te.features), te.labels) for m in members]
        for size in sizes:
            ens = Ensemble(members[:size])
            acc = accuracy(ens(te.features), te.labels)
            single = float(np.mean(member_acc[:size]))
            rows.append({"dataset": label, "arch": f"{arch[0]}x{arch[1]}", "size": size, "ensemble_acc": acc,
                         "mean_member_acc": single, "gain": acc - single,
                         "train_acc": accuracy(ens(tr.features), tr.labels)})
    return rows, {}


def run_adv_sweep(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    rows = []
    for desc, arch, eps, rep in itertools.product(cfg.datasets, cfg.archs, cfg.eps, range(cfg.repeats)):
        label = dataset_label(desc)
        key = (label, arch, rep)
        spec = dataset_spec(desc)
        tr = generate_dataset(spec, cfg.n_train, derive_seed(cfg.seed, "train", label, rep))
        te = generate_dataset(spec, cfg.n_test, derive_seed(cfg.seed, "test", label, rep))
        model = init_model(spec.d, tuple(arch), seed=derive_seed(cfg.seed, "init", *key))
        atk = _attack_config(cfg.attack, eps, derive_seed(cfg.seed, "atk", *key, eps))
        tcfg = _train_config(cfg.train, derive_seed(cfg.seed, "sgd", *key))
        model, hist = adversarial_train(model, tr, atk, tcfg)
        s = model(te.features)
        ev = _attack_config(cfg.eval_attack or cfg.attack, eps, derive_seed(cfg.seed, "eval", *key, eps))
        row = {"dataset": label, "arch": f"{arch[0]}x{arch[1]}", "eps": eps, "repeat": rep,
               "std_acc": accuracy(s, te.labels), "robust_acc": robust_accuracy(model, te, eps, ev.norm, ev),
               "epochs": hist.epochs, "diverged": int(hist.diverged)}
        r = _rand_row(model, te, cfg.eval_repeats, derive_seed(cfg.seed, "rand", *key, eps))
        row.update({k: v for k, v in r.items() if k.endswith("_acc")})
        rows.append(row)
    return rows, {"gamma_S": GAMMA_S, "gamma_data": GAMMA_DATA}


def run_interpolation(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    rows = []
    for desc, arch in itertools.product(cfg.datasets, cfg.archs):
        label = dataset_label(desc)
        spec = dataset_spec(desc)
        d = spec.d
        k = int(desc["preset"].split("-")[-1])
        slab_spec = preset(f"ms-{k}", d, **{x: desc[x] for x in ("gamma", "width") if x in desc})
        s_tr = generate_dataset(slab_spec, cfg.n_train, derive_seed(cfg.seed, "slab-train", label))
        s_te = generate_dataset(slab_spec, cfg.n_test, derive_seed(cfg.seed, "slab-test", label))
        m_slab = init_model(d, tuple(arch), seed=derive_seed(cfg.seed, "slab-init", label))
        m_slab, _ = train(m_slab, s_tr, _train_config(cfg.train, derive_seed(cfg.seed, "slab-sgd", label)))
        m_rand = init_model(d, tuple(arch), seed=derive_seed(cfg.seed, "rand-init", label))
        tr = generate_dataset(spec, cfg.n_train, derive_seed(cfg.seed, "train", label))
        te = generate_dataset(spec, cfg.n_test, derive_seed(cfg.seed, "test", label))
        for alpha in cfg.alphas:
            m_a = interpolate(m_slab, m_rand, alpha)
            row = {"dataset": label, "arch": f"{arch[0]}x{arch[1]}", "alpha": alpha,
                   "pre_slab_acc": accuracy(m_a(s_te.features), s_te.labels)}
            m_post, _ = train(m_a, tr, _train_config(cfg.train, derive_seed(cfg.seed, "post-sgd", label, alpha)))
            s = m_post(te.features)
            row["post_std_acc"] = accuracy(s, te.labels)
            row["post_std_auc"] = auc(s, te.labels)
            r = _rand_row(m_post, te, cfg.eval_repeats, derive_seed(cfg.seed, "rand", label, alpha), "post_")
            row.update({k2: v for k2, v in r.items() if not k2.endswith("logit_shift")})
            rows.append(row)
    return rows, {}


def run_theory(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    th = {"d": 400, "k": 16, "eta": 0.4, "c": 2.0, "t_steps": 4, **cfg.theory}
    rows, extras = [], {"reports": []}
    for rep in range(cfg.repeats):
        seed = cfg.seed + rep
        rep_ = verify_theorem(seed=seed, **th)
        for r in rep_.steps:
            rows.append({"repeat": rep, "seed": seed, **{k: (int(v) if isinstance(v, bool) else v)
                                                         for k, v in r.items()}})
        extras["reports"].append({"seed": seed, "final_ratio": rep_.final_ratio, "test_error": rep_.test_error,
                                  "violations": rep_.violations, "any_step_in_range": rep_.any_step_in_range})
    return rows, extras


def run_uap(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    rows = []
    acfg = AttackConfig(norm=cfg.attack.get("norm", "l2"), budget=cfg.uap_budget, steps=cfg.uap_steps,
                        step_size=cfg.attack.get("step_size", 0.05))
    for desc, arch in itertools.product(cfg.datasets, cfg.archs):
        label = dataset_label(desc)
        spec = dataset_spec(desc)
        te = generate_dataset(spec, cfg.n_test, derive_seed(cfg.seed, "test", label))
        models = []
        for member in range(2):
            key = (label, arch, member)
            tr = generate_dataset(spec, cfg.n_train, derive_seed(cfg.seed, "train", *key))
            m = init_model(spec.d, tuple(arch), seed=derive_seed(cfg.seed, "init", *key))
            m, _ = train(m, tr, _train_config(cfg.train, derive_seed(cfg.seed, "sgd", *key)))
            models.append(m)
        for mode, per_class in (("shared", False), ("per-class", True)):
            res = uap(models[0], te, acfg, per_class=per_class, method=cfg.uap_method,
                      max_passes=cfg.uap_passes)
            rows.append({"dataset": label, "arch": f"{arch[0]}x{arch[1]}", "mode": mode,
                         "clean_acc": accuracy(models[0](te.features), te.labels), "energy_S": res.energy_by_group["S"], "energy_Sc": res.energy_by_group["Sc"],
                         "fooled": res.fooled_fraction, "transfer_error": uap_transfer(res, models[1], te),
                         "norm": res.norm_used})
    return rows, {}


RUNNERS: dict[str, Callable[[ExperimentConfig], tuple[list[dict], dict]]] = {
    "extreme-sb": run_extreme_sb,
    "generalization": run_generalization,
    "ensemble": run_ensemble,
    "adv-sweep": run_adv_sweep,
    "interpolation": run_interpolation,
    "theory": run_theory,
    "uap": run_uap,
}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    cfg.validate()
    t0 = time.perf_counter()
    rows, extras = RUNNERS[cfg.experiment](cfg)
    return RunManifest(cfg.experiment, cfg.to_dict(), cfg.config_hash, {"base": cfg.seed},
                       [_jsonable(r) for r in rows], _jsonable(extras), time.perf_counter() - t0)


def replay(manifest: RunManifest) -> tuple[RunManifest, bool]:
    """Re-run a manifest's config; the flag says whether every reported number matched exactly."""
    again = run_experiment(ExperimentConfig.from_dict(manifest.config))
    same = _rows_equal(again.runs, manifest.runs) and again.extras == manifest.extras
    return again, same


def _rows_equal(a: list[dict], b: list[dict]) -> bool:
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        if ra.keys() != rb.keys():
            return False
        for k in ra:
            x, y = ra[k], rb[k]
            if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
                continue
            if x != y:
                return False
    return True


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in r.items():
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        out.append(row)
    return out


def emit_report(manifest: RunManifest, out_dir) -> list[Path]:
    """Write ``<experiment>.csv``, ``manifest.json`` and any boundary grids; idempotent."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        table = out / f"{manifest.experiment}.csv"
        table.write_text(rows_to_csv(manifest.runs))
        paths.append(table)
        paths.append(manifest.save(out / "manifest.json"))
        for name, text in sorted(manifest.extras.get("boundaries", {}).items()):
            p = out / f"boundary_{name}.csv"
            p.write_text(text)
            paths.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths
