"""Synthetic block datasets: samplers, presets, randomization, margins and file I/O.

Every coordinate of a dataset is drawn from a one-dimensional "block"
conditioned on the label.  Datasets may be rotated by a seeded orthogonal
matrix; the pre-rotation ("latent") coordinates are always recoverable, and
feature groups (``S``, ``Sc``, ...) refer to latent coordinates.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 2

LINEAR = "linear"
NOISY_LINEAR = "noisy_linear"
SLAB = "slab"
NOISY_SLAB = "noisy_slab"
GAUSSIAN = "gaussian"
SINGLETON_LINEAR = "singleton_linear"
SINGLETON_SLAB3 = "singleton_slab3"

BLOCK_KINDS = (LINEAR, NOISY_LINEAR, SLAB, NOISY_SLAB, GAUSSIAN, SINGLETON_LINEAR, SINGLETON_SLAB3)
_SLAB_KINDS = (SLAB, NOISY_SLAB)
_NOISY_KINDS = (NOISY_LINEAR, NOISY_SLAB)

# mass of the outermost slab pair within its class, k -> mass
_OUTER_PAIR_MASS = {5: 0.25, 7: 0.125}


class SpecificationError(ValueError):
    """Invalid block or dataset specification."""


class DatasetFormatError(IOError):
    code = "format"


class VersionMismatchError(DatasetFormatError):
    code = "version"


class TruncatedFileError(DatasetFormatError):
    code = "truncated"


class ChecksumError(DatasetFormatError):
    code = "checksum"


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    gamma: float = 0.1
    width: float = 1.0
    slabs: int | None = None
    noise: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in BLOCK_KINDS:
            raise SpecificationError(f"unknown block kind {self.kind!r}")
        if self.kind in (GAUSSIAN, SINGLETON_LINEAR, SINGLETON_SLAB3):
            return
        if not 0.0 < self.gamma < 1.0:
            raise SpecificationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.width > 0:
            raise SpecificationError(f"width must be positive, got {self.width}")
        if self.kind in _NOISY_KINDS and not 0.0 <= self.noise <= 1.0:
            raise SpecificationError(f"noise must lie in [0, 1], got {self.noise}")
        if self.kind in _SLAB_KINDS:
            k = self.slabs
            if k is None or k < 3 or k % 2 == 0:
                raise SpecificationError(f"slab count must be odd and >= 3, got {k}")
            if slab_width(self) <= 0:
                raise SpecificationError(
                    f"slab width is not positive: gamma={self.gamma} needs to be < 1/(k-1)={1 / (k - 1):.4f}"
                )

    @property
    def label(self) -> str:
        if self.kind in _SLAB_KINDS:
            return f"slab{self.slabs}"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "width": self.width,
                "slabs": self.slabs, "noise": self.noise}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BlockSpec":
        return cls(kind=d["kind"], gamma=d["gamma"], width=d["width"],
                   slabs=d.get("slabs"), noise=d.get("noise", 0.0))


def linear(gamma=0.1, width=1.0) -> BlockSpec:
    return BlockSpec(LINEAR, gamma, width)


def noisy_linear(noise=0.1, gamma=0.1, width=1.0) -> BlockSpec:
    return BlockSpec(NOISY_LINEAR, gamma, width, noise=noise)


def slab(k: int, gamma=0.1, width=1.0) -> BlockSpec:
    return BlockSpec(SLAB, gamma, width, slabs=k)


def noisy_slab(k: int, noise=0.1, gamma=0.1, width=1.0) -> BlockSpec:
    return BlockSpec(NOISY_SLAB, gamma, width, slabs=k, noise=noise)


# ---------------------------------------------------------------------------
# slab geometry
# ---------------------------------------------------------------------------

def slab_width(spec: BlockSpec) -> float:
    k = spec.slabs
    return 2.0 * spec.width * (1.0 - (k - 1) * spec.gamma) / k


def slab_intervals(spec: BlockSpec) -> list[tuple[float, float, int]]:
    """All k slabs as ``(lo, hi, label)`` from left to right.

    The center slab carries label -1 and labels alternate outward.
    """
    w = slab_width(spec)
    step = w + 2.0 * spec.width * spec.gamma
    half = (spec.slabs - 1) // 2
    out = []
    for j in range(-half, half + 1):
        c = j * step
        out.append((c - w / 2, c + w / 2, -1 if abs(j) % 2 == 0 else 1))
    return out


def _unit_second_moment(spec: BlockSpec, u: int) -> float:
    w = slab_width(spec)
    if u == 0:
        return (w / 2) ** 2 / 3.0
    c = u * (w + 2.0 * spec.width * spec.gamma)
    a, b = c - w / 2, c + w / 2
    return (b ** 3 - a ** 3) / (3.0 * w)


def slab_unit_masses(spec: BlockSpec) -> dict[int, dict[int, float]]:
    """Per-class probability of each slab unit (0 = center, u = the pair at +-u).

    The class holding the outermost pair gives that pair a fixed mass
    (1/4 for k=5, 1/8 for k=7, 2^-u beyond); the single remaining degree of
    freedom is set so both class-conditional variances are equal.
    """
    k = spec.slabs
    top = (k - 1) // 2
    lab = lambda u: -1 if u % 2 == 0 else 1  # noqa: E731
    units = {-1: [u for u in range(top + 1) if lab(u) == -1],
             1: [u for u in range(top + 1) if lab(u) == 1]}
    outer_cls = lab(top)
    other_cls = -outer_cls
    m2 = {u: _unit_second_moment(spec, u) for u in range(top + 1)}
    masses: dict[int, dict[int, float]] = {-1: {}, 1: {}}

    def spread(cls, fixed: dict[int, float]):
        rest = [u for u in units[cls] if u not in fixed]
        left = 1.0 - sum(fixed.values())
        out = dict(fixed)
        for u in rest:
            out[u] = left / len(rest)
        return out

    def var(m):
        return sum(p * m2[u] for u, p in m.items())

    if len(units[other_cls]) >= 2:
        q = _OUTER_PAIR_MASS.get(k, 2.0 ** -top)
        masses[outer_cls] = spread(outer_cls, {top: q})
        target = var(masses[outer_cls])
        inner = units[other_cls][0]
        # variance is affine in the inner-unit mass theta
        lo = var(spread(other_cls, {inner: 0.0}))
        hi = var(spread(other_cls, {inner: 1.0}))
        theta = (target - lo) / (hi - lo)
        if not -1e-12 <= theta <= 1 + 1e-12:
            raise SpecificationError(f"no variance-matching slab masses for k={k}, gamma={spec.gamma}")
        masses[other_cls] = spread(other_cls, {inner: min(max(theta, 0.0), 1.0)})
    else:
        masses[other_cls] = spread(other_cls, {})
        if len(units[outer_cls]) >= 2:
            target = var(masses[other_cls])
            lo = var(spread(outer_cls, {top: 0.0}))
            hi = var(spread(outer_cls, {top: 1.0}))
            q = (target - lo) / (hi - lo)
            if not -1e-12 <= q <= 1 + 1e-12:
                raise SpecificationError(f"no variance-matching slab masses for k={k}, gamma={spec.gamma}")
            masses[outer_cls] = spread(outer_cls, {top: min(max(q, 0.0), 1.0)})
        else:
            masses[outer_cls] = spread(outer_cls, {})
    return masses


# ---------------------------------------------------------------------------
# block sampling
# ---------------------------------------------------------------------------

def _linear_values(spec: BlockSpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo = spec.width * spec.gamma
    return y * (lo + (spec.width - lo) * rng.random(y.shape[0]))


def _slab_values(spec: BlockSpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = y.shape[0]
    w = slab_width(spec)
    step = w + 2.0 * spec.width * spec.gamma
    masses = slab_unit_masses(spec)
    u_draw = rng.random(n)
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    off = rng.random(n)
    unit = np.zeros(n, dtype=np.int64)
    for cls in (-1, 1):
        sel = y == cls
        us = sorted(masses[cls])
        cum = np.cumsum([masses[cls][u] for u in us])
        cum[-1] = 1.0
        idx = np.searchsorted(cum, u_draw[sel], side="right")
        unit[sel] = np.asarray(us)[np.minimum(idx, len(us) - 1)]
    center = unit * step
    # center slab straddles the origin; pairs sit at +-center
    return np.where(unit == 0, (off - 0.5) * w, side * (center - w / 2 + off * w))


def _gap_noise(spec: BlockSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over the union of the k-1 inter-slab gaps."""
    iv = slab_intervals(spec)
    gaps = [(iv[i][1], iv[i + 1][0]) for i in range(len(iv) - 1)]
    g = rng.integers(0, len(gaps), size=n)
    lo = np.array([a for a, _ in gaps])[g]
    hi = np.array([b for _, b in gaps])[g]
    return lo + (hi - lo) * rng.random(n)


def sample_block_column(spec: BlockSpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one value per label in ``y`` from the block's class-conditional law."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    kind = spec.kind
    if kind == LINEAR:
        return _linear_values(spec, y, rng)
    if kind == NOISY_LINEAR:
        clean = _linear_values(spec, y, rng)
        noisy = rng.random(n) < spec.noise
        lim = spec.width * spec.gamma
        return np.where(noisy, rng.uniform(-lim, lim, size=n), clean)
    if kind == SLAB:
        return _slab_values(spec, y, rng)
    if kind == NOISY_SLAB:
        clean = _slab_values(spec, y, rng)
        noisy = rng.random(n) < spec.noise
        return np.where(noisy, _gap_noise(spec, n, rng), clean)
    if kind == GAUSSIAN:
        return rng.standard_normal(n)
    if kind == SINGLETON_LINEAR:
        return y.copy()
    if kind == SINGLETON_SLAB3:
        eps = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return (y + 1.0) / 2.0 * eps
    raise SpecificationError(f"unknown block kind {kind!r}")


def sample_block(spec: BlockSpec, y: int, rng: np.random.Generator) -> float:
    if y not in (-1, 1):
        raise SpecificationError(f"label must be -1 or +1, got {y}")
    return float(sample_block_column(spec, np.array([y]), rng)[0])


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    blocks: tuple[BlockSpec, ...]
    simple: tuple[int, ...] = (0,)
    rotation_seed: int | None = None
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "simple", tuple(int(i) for i in self.simple))
        if not self.blocks:
            raise SpecificationError("dataset needs at least one block")
        for b in self.blocks:
            b.validate()
        if any(not 0 <= i < len(self.blocks) for i in self.simple):
            raise SpecificationError("simple-feature indices out of range")

    @property
    def d(self) -> int:
        return len(self.blocks)

    def group_map(self) -> dict[str, tuple[int, ...]]:
        d = self.d
        simple = set(self.simple)
        groups = {
            "S": tuple(sorted(simple)),
            "Sc": tuple(i for i in range(d) if i not in simple),
            "all": tuple(range(d)),
        }
        for i, b in enumerate(self.blocks):
            groups.setdefault(b.label, ())
            groups[b.label] = groups[b.label] + (i,)
        return groups

    def drop(self, coords: Iterable[int], name: str | None = None) -> "DatasetSpec":
        """Spec with the given latent coordinates removed."""
        coords = set(coords)
        keep = [i for i in range(self.d) if i not in coords]
        remap = {old: new for new, old in enumerate(keep)}
        simple = tuple(remap[i] for i in self.simple if i in remap)
        return DatasetSpec(tuple(self.blocks[i] for i in keep), simple or (0,),
                           self.rotation_seed, name or f"{self.name}-drop")

    def with_rotation(self, seed: int | None) -> "DatasetSpec":
        return DatasetSpec(self.blocks, self.simple, seed, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "simple": list(self.simple), "rotation_seed": self.rotation_seed,
                "blocks": [b.to_dict() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSpec":
        return cls(tuple(BlockSpec.from_dict(b) for b in d["blocks"]), tuple(d["simple"]),
                   d.get("rotation_seed"), d.get("name", "custom"))


def preset(name: str, d: int = 50, *, gamma: float = 0.1, width: float = 1.0, noise: float = 0.1,
           rotation_seed: int | None = None, gamma5: float = 0.05, gamma7: float = 0.15) -> DatasetSpec:
    """Canonical dataset layouts.

    ``lms-k``: linear + (d-1) k-slabs; ``nlms-k``: noisy linear + (d-1) k-slabs;
    ``ms-5-7``: one 5-slab + (d-1) 7-slabs; ``ms-k``: d k-slabs;
    ``advms-5-7``: d/2 5-slabs (gamma5) then d/2 7-slabs (gamma7);
    ``lsn``: singleton linear, singleton 3-slab, d-2 standard gaussians.
    """
    key = name.lower().replace("^", "n").replace("(", "").replace(")", "").replace(",", "-").replace("_", "-")
    if key.startswith("lms-"):
        k = int(key[4:])
        blocks = [linear(gamma, width)] + [slab(k, gamma, width)] * (d - 1)
        simple = (0,)
        label = f"LMS-{k}"
    elif key.startswith("nlms-"):
        k = int(key[5:])
        blocks = [noisy_linear(noise, gamma, width)] + [slab(k, gamma, width)] * (d - 1)
        simple = (0,)
        label = f"^LMS-{k}"
    elif key == "ms-5-7":
        blocks = [slab(5, gamma, width)] + [slab(7, gamma, width)] * (d - 1)
        simple = (0,)
        label = "MS-(5,7)"
    elif key.startswith("advms"):
        if d % 2:
            raise SpecificationError("AdvMS-(5,7) needs an even dimension")
        blocks = [slab(5, gamma5, width)] * (d // 2) + [slab(7, gamma7, width)] * (d // 2)
        simple = tuple(range(d // 2))
        label = "AdvMS-(5,7)"
    elif key.startswith("ms-"):
        k = int(key[3:])
        blocks = [slab(k, gamma, width)] * d
        simple = (0,)
        label = f"MS-{k}"
    elif key == "lsn":
        if d < 3:
            raise SpecificationError("LSN needs d >= 3")
        blocks = [BlockSpec(SINGLETON_LINEAR), BlockSpec(SINGLETON_SLAB3)] + [BlockSpec(GAUSSIAN)] * (d - 2)
        simple = (0,)
        label = "LSN"
    else:
        raise SpecificationError(f"unknown preset {name!r}")
    return DatasetSpec(tuple(blocks), simple, rotation_seed, label)


def random_rotation(d: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix: Q factor of a seeded gaussian matrix, sign-fixed."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return q * s


@dataclass(eq=False)
class Dataset:
    """Features are model-facing (rotated); ``latent`` gives pre-rotation coordinates."""

    features: np.ndarray
    labels: np.ndarray
    spec: DatasetSpec
    seed: int
    rotation: np.ndarray | None = None
    group_map: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.group_map:
            self.group_map = self.spec.group_map()

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def latent(self) -> np.ndarray:
        if self.rotation is None:
            return self.features
        return self.features @ self.rotation

    def from_latent(self, latent: np.ndarray) -> np.ndarray:
        if self.rotation is None:
            return latent
        return latent @ self.rotation.T

    def resolve_group(self, group: str | Iterable[int]) -> tuple[int, ...]:
        if isinstance(group, str):
            if group not in self.group_map:
                raise KeyError(f"unknown group {group!r}; known: {sorted(self.group_map)}")
            return self.group_map[group]
        idx = tuple(int(i) for i in group)
        if any(not 0 <= i < self.d for i in idx):
            raise KeyError(f"group coordinates out of range: {idx}")
        return idx

    def subset(self, rows) -> "Dataset":
        return Dataset(self.features[rows], self.labels[rows], self.spec, self.seed, self.rotation,
                       dict(self.group_map))

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.labels, self.spec, self.seed, self.rotation, dict(self.group_map))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        rot_eq = (self.rotation is None and other.rotation is None) or (
            self.rotation is not None and other.rotation is not None
            and np.array_equal(self.rotation, other.rotation))
        return (np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)
                and rot_eq and self.spec == other.spec and self.seed == other.seed
                and self.group_map == other.group_map)


def generate_dataset(spec: DatasetSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise SpecificationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, -1, 1).astype(np.int8)
    yf = y.astype(np.float64)
    X = np.empty((n, spec.d))
    for j, block in enumerate(spec.blocks):
        X[:, j] = sample_block_column(block, yf, rng)
    rot = None
    if spec.rotation_seed is not None:
        rot = random_rotation(spec.d, spec.rotation_seed)
        X = X @ rot.T
    return Dataset(X, y, spec, int(seed), rot)


def randomize_group(data: Dataset, group: str | Iterable[int], seed: int) -> Dataset:
    """Decouple a coordinate group from the label by a single joint row permutation.

    The permutation acts on latent coordinates; rotation is re-applied after.
    """
    if data.n == 0:
        raise ValueError("cannot randomize an empty dataset")
    idx = list(data.resolve_group(group))
    if not idx:
        return data.with_features(data.features.copy())
    if data.n < 2:
        raise ValueError("randomization needs at least two rows")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    lat = data.latent.copy()
    lat[:, idx] = lat[perm][:, idx]
    return data.with_features(data.from_latent(lat))


def estimate_margin(spec: DatasetSpec | Dataset, n: int = 100_000, seed: int = 0,
                    coords: Sequence[int] | None = None) -> float:
    """Half the smallest distance between opposite-label samples (latent basis)."""
    data = spec if isinstance(spec, Dataset) else generate_dataset(spec, n, seed)
    if data.n < 2:
        raise ValueError("need at least two samples")
    X = data.latent
    if coords is not None:
        X = X[:, list(coords)]
    pos, neg = X[data.labels > 0], X[data.labels < 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("margin needs samples from both classes")
    return _min_cross_distance(pos, neg) / 2.0


def _min_cross_distance(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    """Exact minimum Euclidean distance between rows of ``a`` and rows of ``b``."""
    bb = np.einsum("ij,ij->i", b, b)
    best = np.inf
    best_pair = (0, 0)
    for start in range(0, len(a), chunk):
        blk = a[start:start + chunk]
        d2 = np.einsum("ij,ij->i", blk, blk)[:, None] + bb[None, :] - 2.0 * blk @ b.T
        i, j = np.unravel_index(np.argmin(d2), d2.shape)
        if d2[i, j] < best:
            best, best_pair = d2[i, j], (start + i, j)
    # recompute the winning pair directly; the expanded form loses digits
    i, j = best_pair
    return float(np.linalg.norm(a[i] - b[j]))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".bin", ".json") else p
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_dataset(data: Dataset, path) -> tuple[Path, Path]:
    bin_path, json_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    payload = (np.ascontiguousarray(data.features, dtype="<f8").tobytes()
               + np.ascontiguousarray(data.labels, dtype="i1").tobytes())
    if data.rotation is not None:
        payload += np.ascontiguousarray(data.rotation, dtype="<f8").tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "n": data.n,
        "d": data.d,
        "seed": data.seed,
        "has_rotation": data.rotation is not None,
        "spec": data.spec.to_dict(),
        "group_map": {k: list(v) for k, v in data.group_map.items()},
        "sha256": hashlib.sha256(payload).hexdigest(),
        "nbytes": len(payload),
    }
    bin_path.write_bytes(payload)
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return bin_path, json_path


def load_dataset(path) -> Dataset:
    bin_path, json_path = _paths(path)
    header = json.loads(json_path.read_text())
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset file has format version {version}, reader expects {FORMAT_VERSION}")
    payload = bin_path.read_bytes()
    n, d = header["n"], header["d"]
    expected = n * d * 8 + n + (d * d * 8 if header["has_rotation"] else 0)
    if len(payload) < expected or len(payload) != header["nbytes"]:
        raise TruncatedFileError(f"{bin_path}: expected {expected} bytes, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumError(f"{bin_path}: checksum mismatch")
    X = np.frombuffer(payload, dtype="<f8", count=n * d).reshape(n, d).astype(np.float64)
    y = np.frombuffer(payload, dtype="i1", count=n, offset=n * d * 8).copy()
    rot = None
    if header["has_rotation"]:
        rot = np.frombuffer(payload, dtype="<f8", count=d * d, offset=n * d * 8 + n).reshape(d, d).astype(np.float64)
    groups = {k: tuple(v) for k, v in header["group_map"].items()}
    return Dataset(X, y, DatasetSpec.from_dict(header["spec"]), header["seed"], rot, groups)

