"""Attack rates, dataset filtering, Jensen-Shannon diversity and report output."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as nw
from .dataio import Dataset
from .erosion import GhostNetwork

LN2 = float(np.log(2.0))


class EmptyFilterError(ValueError):
    pass


def _predict(model, x) -> np.ndarray:
    if isinstance(model, GhostNetwork):
        return nw.predict(model.base, x, erosion=model)
    return nw.predict(model, x)


def _probs(model, x, chunk: int = 4096) -> np.ndarray:
    if isinstance(model, GhostNetwork):
        net, erosion = model.base, model
    else:
        net, erosion = model, None
    out = [ad.softmax(nw.forward(net, x[i:i + chunk], erosion)).data for i in range(0, len(x), chunk)]
    return np.concatenate(out)


def filter_dataset(dataset: Dataset, models) -> Dataset:
    """Keep the samples every model classifies correctly."""
    keep = np.ones(len(dataset), dtype=bool)
    for m in models:
        keep &= _predict(m, dataset.x) == dataset.y
    if not keep.any():
        raise EmptyFilterError("no sample is classified correctly by every model; filter against fewer models")
    out = dataset.subset(np.flatnonzero(keep))
    out.meta["filter"] = {"kept": int(keep.sum()), "total": int(len(dataset))}
    return out


def attack_rate(adv_x, labels, target) -> float:
    """Fraction of adversarial inputs the target does not assign their true label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(_predict(target, adv_x) != labels))


def _check_dist(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum(axis=-1) - 1.0).max() > 1e-9:
        raise ValueError(f"{name} is not a probability distribution")
    return p


def _kl(p, q):
    # 0 * log 0 := 0; q > 0 wherever p > 0 when q is a midpoint mixture
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return terms.sum(axis=-1)


def jsd(p, q) -> float | np.ndarray:
    """Jensen-Shannon divergence in nats; rows of 2-D inputs are treated independently."""
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    z = 0.5 * (p + q)
    out = 0.5 * _kl(p, z) + 0.5 * _kl(q, z)
    out = np.clip(out, 0.0, LN2)
    return float(out) if out.ndim == 0 else out


def diversity_matrix(models, x) -> np.ndarray:
    """Symmetric matrix of dataset-averaged JSD between model softmax outputs."""
    if len(models) < 2:
        raise ValueError("diversity needs at least two models")
    x = x.x if isinstance(x, Dataset) else np.asarray(x, dtype=np.float64)
    probs = [_probs(m, x) for m in models]
    k = len(models)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = float(np.mean(jsd(probs[i], probs[j])))
    return out


def mean_offdiag(mat: np.ndarray) -> float:
    k = len(mat)
    return float(mat[~np.eye(k, dtype=bool)].mean())


@dataclass
class EvalReport:
    sources: list = field(default_factory=list)  # row ids
    targets: list = field(default_factory=list)  # column ids
    rates: list = field(default_factory=list)  # rows x cols, NaN where not evaluated
    counts: dict = field(default_factory=dict)  # per target
    summary: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    diversity: dict = field(default_factory=dict)  # name -> {"ids": [...], "matrix": [[...]]}
    config: dict = field(default_factory=dict)
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "sources": self.sources,
            "targets": self.targets,
            "rates": [[None if r is None or np.isnan(r) else r for r in row] for row in self.rates],
            "counts": self.counts,
            "summary": self.summary,
            "curves": self.curves,
            "diversity": self.diversity,
            "config": self.config,
            "fingerprint": self.fingerprint,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def write_csv(self, directory) -> list:
        """One CSV per matrix; header row holds the column model ids."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        if self.rates:
            p = directory / "attack_rates.csv"
            _write_matrix(p, self.sources, self.targets, self.rates)
            written.append(p)
        for name, block in sorted(self.diversity.items()):
            p = directory / f"jsd_{name}.csv"
            _write_matrix(p, block["ids"], block["ids"], block["matrix"])
            written.append(p)
        return written


def _write_matrix(path, rows, cols, mat):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["source", *cols])
        for rid, row in zip(rows, mat):
            w.writerow([rid, *("" if v is None or np.isnan(v) else repr(float(v)) for v in row)])
