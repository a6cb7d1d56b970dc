"""Synthetic datasets and the GDAT container shared by datasets and adversarial batches."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GDAT_MAGIC = b"GDAT"
GDAT_VERSION = 1
TASKS = ("spirals-2d", "blobs-kd", "digits-8x8")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int
    splits: dict = field(default_factory=dict)  # name -> index array
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def split(self, name: str) -> "Dataset":
        idx = self.splits.get(name)
        if idx is None:
            raise KeyError(f"dataset has no split {name!r}")
        return self.subset(idx, {**self.meta, "split": name})

    def subset(self, idx, meta=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.class_count, {}, dict(self.meta if meta is None else meta))


def _assign_splits(n, rng, fractions):
    order = rng.permutation(n)
    splits, start = {}, 0
    names = list(fractions)
    for i, name in enumerate(names):
        stop = n if i == len(names) - 1 else start + int(round(fractions[name] * n))
        splits[name] = np.sort(order[start:stop])
        start = stop
    return splits


def _balanced_labels(count, classes, rng):
    return rng.permutation(np.arange(count) % classes)


def _spirals(count, noise, rng, turns=0.75, radius=0.42, inner=0.15, gap=0.05):
    """Two spiral arms, class 1 running ``gap`` outside class 0.

    Arm pairs are separated by a wide empty band, so the decision function
    is smooth while every sample sits close to the class boundary.
    """
    y = _balanced_labels(count, 2, rng)
    # uniform along arc length so the inner part is not oversampled
    u = rng.random(count)
    t = np.sqrt(inner ** 2 + u * (1 - inner ** 2))
    theta = 2 * np.pi * turns * (t - inner) / (1 - inner)
    r = (radius - gap) * t + gap * y
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1) + 0.5
    pts += rng.normal(0.0, noise, size=pts.shape)
    return np.clip(pts, 0.0, 1.0), y, 2


def _blobs(count, noise, rng, dims=8, classes=4):
    y = _balanced_labels(count, classes, rng)
    centers = rng.uniform(0.25, 0.75, size=(classes, dims))
    x = centers[y] + rng.normal(0.0, noise, size=(count, dims))
    return np.clip(x, 0.0, 1.0), y, classes


# 5x7 bitmap glyphs for 0-9
_FONT = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]
GLYPHS = np.array([[[c == "1" for c in row] for row in g] for g in _FONT], dtype=np.float64)


def _digits(count, noise, rng):
    y = _balanced_labels(count, 10, rng)
    x = np.zeros((count, 1, 8, 8))
    dx = rng.integers(0, 4, size=count)
    dy = rng.integers(0, 2, size=count)
    ink = rng.uniform(0.6, 1.0, size=count)
    for i in range(count):
        x[i, 0, dy[i]:dy[i] + 7, dx[i]:dx[i] + 5] = GLYPHS[y[i]] * ink[i]
    x += rng.normal(0.0, noise, size=x.shape)
    return np.clip(x, 0.0, 1.0), y, 10


DEFAULT_SPLITS = {"train": 0.6, "val": 0.2, "attack": 0.2}


def gen_synthetic(task: str, count: int, noise: float, seed: int, splits: dict | None = None, **kw) -> Dataset:
    """Generate a deterministic synthetic classification task with balanced classes."""
    if count < 100:
        raise ValueError("count must be at least 100")
    rng = np.random.default_rng(seed)
    if task == "spirals-2d":
        x, y, c = _spirals(count, noise, rng, **kw)
    elif task == "blobs-kd":
        x, y, c = _blobs(count, noise, rng, **kw)
    elif task == "digits-8x8":
        x, y, c = _digits(count, noise, rng, **kw)
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    meta = {"task": task, "count": count, "noise": noise, "seed": seed, **kw}
    return Dataset(x, y, c, _assign_splits(count, rng, splits or DEFAULT_SPLITS), meta)


# ---------------------------------------------------------------- GDAT I/O


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def to_bytes(ds: Dataset, provenance: dict | None = None) -> bytes:
    header = {
        "shape": list(ds.x.shape),
        "class_count": int(ds.class_count),
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
        "meta": ds.meta,
    }
    if provenance is not None:
        header["provenance"] = provenance
    head = _canonical(header)
    body = b"".join([
        GDAT_MAGIC, struct.pack("<H", GDAT_VERSION), struct.pack("<I", len(head)), head,
        ds.x.astype("<f8").tobytes(), ds.y.astype("<i8").tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes, source: str = "<bytes>") -> Dataset:
    if len(blob) < 14 or blob[:4] != GDAT_MAGIC:
        raise DatasetFormatError(f"{source}: not a GDAT file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetFormatError(f"{source}: checksum mismatch")
    (version,) = struct.unpack("<H", body[4:6])
    if version != GDAT_VERSION:
        raise DatasetFormatError(f"{source}: unsupported GDAT version {version}")
    (hlen,) = struct.unpack("<I", body[6:10])
    header = json.loads(body[10:10 + hlen])
    shape = tuple(header["shape"])
    n, size = shape[0], int(np.prod(shape))
    off = 10 + hlen
    if len(body) != off + 8 * size + 8 * n:
        raise DatasetFormatError(f"{source}: payload length mismatch")
    x = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
    y = np.frombuffer(body, dtype="<i8", count=n, offset=off + 8 * size)
    bad = np.flatnonzero(((x < 0) | (x > 1) | ~np.isfinite(x)).reshape(n, -1).any(axis=1)) if n else []
    if len(bad):
        raise DatasetFormatError(f"{source}: sample {int(bad[0])} has values outside [0, 1]")
    c = header["class_count"]
    bad = np.flatnonzero((y < 0) | (y >= c))
    if len(bad):
        raise DatasetFormatError(f"{source}: sample {int(bad[0])} has label {int(y[bad[0]])} outside [0, {c})")
    meta = dict(header.get("meta", {}))
    ds = Dataset(x.copy(), y.copy(), c, header.get("splits", {}), meta)
    if "provenance" in header:
        ds.meta["provenance"] = header["provenance"]
    return ds


def save_dataset(ds: Dataset, path, provenance: dict | None = None) -> None:
    # a loaded adversarial batch keeps its provenance in meta; write it back to the header
    if "provenance" in ds.meta:
        meta = {k: v for k, v in ds.meta.items() if k != "provenance"}
        if provenance is None:
            provenance = ds.meta["provenance"]
        ds = Dataset(ds.x, ds.y, ds.class_count, ds.splits, meta)
    Path(path).write_bytes(to_bytes(ds, provenance))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return from_bytes(path.read_bytes(), str(path))


def export_csv(ds: Dataset, path) -> None:
    """CSV export for flat (e.g. 2-D) tasks: feature columns then label."""
    if ds.x.ndim != 2:
        raise ValueError("CSV export only supports flat feature vectors")
    cols = [f"x{i}" for i in range(ds.x.shape[1])] + ["label"]
    rows = [",".join(cols)]
    rows += [",".join(repr(float(v)) for v in xi) + f",{int(yi)}" for xi, yi in zip(ds.x, ds.y)]
    Path(path).write_text("\n".join(rows) + "\n")
