"""Synthetic meta-datasets, the mini-batch sampler, and the ``DPMD`` file format.

``DPMD`` layout (all integers and floats little-endian):

    magic    4 bytes   b"DPMD"
    version  u16       FORMAT_VERSION
    hlen     u32       length of the JSON header that follows
    header   hlen      UTF-8 JSON: kind, split, seed, n_tasks, config
    then n_tasks records:
        task_id i64, n_j u32, d_x u32, n_eval u32,
        x f64[n_j*d_x], y f64[n_j], x_eval f64[n_eval*d_x], y_eval f64[n_eval],
        meta_len u32, meta (UTF-8 JSON, meta_len bytes; 0 when meta is stripped)

Classification labels are stored as exact small integers in the f64 arrays.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError
from .rng import make_rng

MAGIC = b"DPMD"
FORMAT_VERSION = 1
SPLITS = ("meta-train", "meta-valid", "meta-test")
HARMONICS_NOISE = 0.05


@dataclass
class Task:
    """One supervised dataset. ``x``/``y`` train the posterior; ``x_eval``/``y_eval`` are held out."""

    task_id: int
    x: np.ndarray
    y: np.ndarray
    x_eval: np.ndarray = None
    y_eval: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.y), -1)
        self.y = np.asarray(self.y, dtype=float)
        d_x = self.x.shape[1]
        self.x_eval = np.zeros((0, d_x)) if self.x_eval is None else np.asarray(self.x_eval, float).reshape(-1, d_x)
        self.y_eval = np.zeros(0) if self.y_eval is None else np.asarray(self.y_eval, float)
        if len(self.y) < 1:
            raise ContractError("a task needs at least one sample")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def subset(self, n: int) -> "Task":
        """The first ``n`` training samples, keeping the held-out split."""
        return Task(self.task_id, self.x[:n], self.y[:n], self.x_eval, self.y_eval, self.meta)

    def without_meta(self) -> "Task":
        return Task(self.task_id, self.x, self.y, self.x_eval, self.y_eval, {})


@dataclass(frozen=True)
class TrainingArrays:
    """Concatenated view of all training samples; carries no generator metadata."""

    x: np.ndarray
    y: np.ndarray
    task_index: np.ndarray
    offsets: np.ndarray
    sizes: np.ndarray


@dataclass(frozen=True)
class Minibatch:
    x: np.ndarray
    y: np.ndarray
    j: np.ndarray
    n_j: np.ndarray

    def __len__(self):
        return len(self.j)

    def __iter__(self):
        return iter(zip(self.x, self.y, self.j))


@dataclass
class MetaDataset:
    tasks: list
    split: str = "meta-train"
    seed: int = 0
    kind: str = "regression"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ContractError("task ids must be unique")
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split '{self.split}'")

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, j):
        return self.tasks[j]

    @property
    def d_x(self) -> int:
        return self.tasks[0].d_x

    @cached_property
    def arrays(self) -> TrainingArrays:
        sizes = np.array([t.n for t in self.tasks], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        return TrainingArrays(
            x=np.concatenate([t.x for t in self.tasks]),
            y=np.concatenate([t.y for t in self.tasks]),
            task_index=np.repeat(np.arange(len(self.tasks)), sizes),
            offsets=offsets,
            sizes=sizes,
        )

    def strip_meta(self) -> "MetaDataset":
        return MetaDataset([t.without_meta() for t in self.tasks], self.split, self.seed, self.kind, dict(self.config))


# ---------------------------------------------------------------- generators


def harmonic_function(x, omega, a1, a2, b1, b2):
    return a1 * np.sin(omega * x + b1) + a2 * np.sin(2.0 * omega * x + b2)


def gen_harmonics(n_tasks: int = 5000, samples_range=(4, 50), seed: int = 0, split: str = "meta-train",
                  noise_std: float = HARMONICS_NOISE, n_eval: int = 0, amplitudes=None) -> MetaDataset:
    """Tasks ``y = a1 sin(w x + b1) + a2 sin(2 w x + b2) + noise`` with per-task domains.

    ``w ~ U(5, 7)``, ``b1, b2 ~ U(0, 2 pi)``, ``a1, a2 ~ N(0, 1)``, ``x ~ N(mu_x, 1)``
    with ``mu_x ~ U(-4, 4)``; each task has ``n_j ~ U{min..max}`` training points
    plus ``n_eval`` held-out points. ``amplitudes`` forces ``(a1, a2)``.
    """
    lo, hi = samples_range
    if n_tasks < 1 or lo < 1 or hi < lo or n_eval < 0 or noise_std < 0:
        raise ConfigurationError(f"invalid harmonics configuration: n_tasks={n_tasks}, range={samples_range}")
    tasks = []
    for j in range(n_tasks):
        rng = make_rng(seed, "harmonics", split, j)
        omega = rng.uniform(5.0, 7.0)
        b1, b2 = rng.uniform(0.0, 2.0 * math.pi, size=2)
        a1, a2 = rng.standard_normal(2)
        if amplitudes is not None:
            a1, a2 = amplitudes
        mu_x = rng.uniform(-4.0, 4.0)
        n_j = int(rng.integers(lo, hi + 1))
        x = rng.normal(mu_x, 1.0, size=n_j + n_eval)
        y = harmonic_function(x, omega, a1, a2, b1, b2) + noise_std * rng.standard_normal(n_j + n_eval)
        meta = {"omega": omega, "a1": float(a1), "a2": float(a2), "b1": b1, "b2": b2, "mu_x": mu_x}
        tasks.append(Task(j, x[:n_j], y[:n_j], x[n_j:], y[n_j:], {k: float(v) for k, v in meta.items()}))
    config = {"generator": "harmonics", "samples_range": [lo, hi], "noise_std": noise_std, "n_eval": n_eval}
    return MetaDataset(tasks, split, seed, "regression", config)


def sine_function(x, omega, b):
    return np.sin(5.0 * (omega * x + b))


def gen_single_sine(seed: int = 0, x=(1.5, 3.0), noise_std: float = 0.1):
    """Single task ``y = sin(5 (w x + b)) + noise`` with ``w, b ~ N(0, 1)``."""
    rng = make_rng(seed, "sine")
    omega, b = rng.standard_normal(2)
    x = np.asarray(x, dtype=float)
    y = sine_function(x, omega, b) + noise_std * rng.standard_normal(x.shape)
    task = Task(0, x, y, meta={"omega": float(omega), "b": float(b), "noise_std": noise_std})
    return task, (float(omega), float(b))


def hetero_points(rng, centers, angles, radius, noise):
    """Points ``[symbol coordinates + noise, radius (cos, sin)(angle) + noise]``."""
    sym = centers + noise * rng.standard_normal(centers.shape)
    rot = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.concatenate([sym, rot + noise * rng.standard_normal(rot.shape)], axis=1)


def gen_hetero_classification(n_tasks: int, seed: int = 0, split: str = "meta-train", n_way: int = 4,
                              n_shot: int = 4, n_query: int = 4, n_rotations: int = 8, d_symbol: int = 6,
                              center_scale: float = 1.0, radius: float = 2.5, noise: float = 0.35) -> MetaDataset:
    """Blend of two episode families over one input space.

    Every point has a *symbol* part (``d_symbol`` coordinates) and a
    *rotation* part (an angle on a circle of radius ``radius``). Family A
    (even ids) labels by mixture component: each class owns a center drawn
    from ``N(0, center_scale^2)`` for the episode, and angles are uniform
    nuisance. Family B (odd ids) labels by an element of the cyclic group of
    order ``n_rotations``, offset by a random episode phase, and symbol
    coordinates are nuisance draws from the same center distribution. The
    coordinates that carry the label in one family are noise in the other.
    Support sets hold exactly ``n_shot`` examples per class, sorted by class;
    queries hold ``n_query`` per class.
    """
    if n_tasks < 2 or n_tasks % 2:
        raise ConfigurationError("n_tasks must be a positive even number")
    if n_way < 2 or n_way > n_rotations or n_shot < 1 or n_query < 1:
        raise ConfigurationError("invalid episode shape")
    tasks = []
    for j in range(n_tasks):
        rng = make_rng(seed, "hetero", split, j)
        family = "A" if j % 2 == 0 else "B"
        class_centers = center_scale * rng.standard_normal((n_way, d_symbol))
        group = rng.choice(n_rotations, size=n_way, replace=False)
        phase = rng.uniform(0.0, 2.0 * math.pi)

        def draw(per_class):
            labels = np.repeat(np.arange(n_way), per_class)
            if family == "A":
                centers = class_centers[labels]
                angles = rng.uniform(0.0, 2.0 * math.pi, size=labels.size)
            else:
                centers = center_scale * rng.standard_normal((labels.size, d_symbol))
                angles = phase + 2.0 * math.pi * group[labels] / n_rotations
            return hetero_points(rng, centers, angles, radius, noise), labels

        xs, ys = draw(n_shot)
        xq, yq = draw(n_query)
        meta = {"family": family}
        if family == "A":
            meta["centers"] = class_centers.tolist()
        else:
            meta.update(rotations=group.tolist(), phase=phase)
        tasks.append(Task(j, xs, ys, xq, yq, meta))
    config = {"generator": "hetero", "n_way": n_way, "n_shot": n_shot, "n_query": n_query,
              "n_rotations": n_rotations, "d_symbol": d_symbol, "center_scale": center_scale,
              "radius": radius, "noise": noise}
    return MetaDataset(tasks, split, seed, "classification", config)


def linear_probe_accuracy(ds: MetaDataset, features, family: str, ridge: float = 1e-3) -> float:
    """Mean query accuracy of a ridge one-hot linear probe fitted per episode on ``features(x)``."""
    accs = []
    for task in ds.tasks:
        if task.meta.get("family") != family:
            continue
        k = int(task.y.max()) + 1
        fs = np.column_stack([features(task.x), np.ones(task.n)])
        fq = np.column_stack([features(task.x_eval), np.ones(len(task.y_eval))])
        onehot = np.eye(k)[task.y.astype(int)]
        w = np.linalg.solve(fs.T @ fs + ridge * np.eye(fs.shape[1]), fs.T @ onehot)
        accs.append(np.mean(np.argmax(fq @ w, axis=1) == task.y_eval.astype(int)))
    if not accs:
        raise ContractError(f"no episodes of family {family}")
    return float(np.mean(accs))


# ---------------------------------------------------------------- sampling


def sample_minibatch(ds: MetaDataset, n_mb: int, rng: np.random.Generator, mode: str = "task") -> Minibatch:
    """Draw ``n_mb`` samples with replacement.

    ``mode="task"`` picks a task uniformly and then one of its samples
    uniformly; ``mode="datum"`` draws uniformly over the concatenated samples.
    """
    if len(ds) == 0:
        raise ContractError("empty meta-dataset")
    arr = ds.arrays
    if mode == "task":
        j = rng.integers(0, len(ds), size=n_mb)
        rows = arr.offsets[j] + np.floor(rng.random(n_mb) * arr.sizes[j]).astype(np.int64)
    elif mode == "datum":
        rows = rng.integers(0, len(arr.y), size=n_mb)
        j = arr.task_index[rows]
    else:
        raise ConfigurationError(f"unknown sampling mode '{mode}'")
    return Minibatch(arr.x[rows], arr.y[rows], j, arr.sizes[j])


# ---------------------------------------------------------------- serialization


def _pack_array(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def dataset_bytes(ds: MetaDataset, include_meta: bool = False) -> bytes:
    header = json.dumps({"kind": ds.kind, "split": ds.split, "seed": ds.seed, "n_tasks": len(ds),
                         "config": ds.config}, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    for t in ds.tasks:
        out.append(struct.pack("<qIII", t.task_id, t.n, t.d_x, len(t.y_eval)))
        out += [_pack_array(t.x), _pack_array(t.y), _pack_array(t.x_eval), _pack_array(t.y_eval)]
        meta = json.dumps(t.meta, sort_keys=True).encode("utf-8") if include_meta else b""
        out += [struct.pack("<I", len(meta)), meta]
    return b"".join(out)


def save_dataset(ds: MetaDataset, path, include_meta: bool = False) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds, include_meta))
    return path


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated dataset file")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(float)


def parse_dataset(buf: bytes) -> MetaDataset:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a DPMD dataset file (bad magic)")
    version, hlen = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupted dataset header: {exc}") from exc
    tasks = []
    for _ in range(header["n_tasks"]):
        task_id, n, d_x, n_eval = r.unpack("<qIII")
        x = r.floats(n * d_x).reshape(n, d_x)
        y = r.floats(n)
        x_eval = r.floats(n_eval * d_x).reshape(n_eval, d_x)
        y_eval = r.floats(n_eval)
        (mlen,) = r.unpack("<I")
        meta = json.loads(r.take(mlen).decode("utf-8")) if mlen else {}
        tasks.append(Task(task_id, x, y, x_eval, y_eval, meta))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last task record")
    return MetaDataset(tasks, header["split"], header["seed"], header["kind"], header["config"])


def load_dataset(path) -> MetaDataset:
    return parse_dataset(Path(path).read_bytes())


def export_json(ds: MetaDataset, path, include_meta: bool = True) -> Path:
    """Human-readable dump for inspection (not used by training)."""
    doc = {
        "kind": ds.kind, "split": ds.split, "seed": ds.seed, "config": ds.config,
        "tasks": [{"task_id": t.task_id, "x": t.x.tolist(), "y": t.y.tolist(),
                   "x_eval": t.x_eval.tolist(), "y_eval": t.y_eval.tolist(),
                   **({"meta": t.meta} if include_meta else {})} for t in ds.tasks],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1))
    return path
