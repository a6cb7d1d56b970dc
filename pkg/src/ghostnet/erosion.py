"""Ghost networks: virtual models obtained by eroding a trained base network.

Two erosion kinds are supported. Dropout erosion multiplies the activation
at every ``erosion_slot`` by a fixed Bernoulli(1 - magnitude) mask and
rescales by ``1 / (1 - magnitude)``. Skip erosion replaces the identity path
of each residual block with ``lam * x`` where ``lam ~ U[1 - magnitude, 1 + magnitude]``.

A ghost holds only its random draw; the base weights are shared and never
modified. Draws are derived from a counter-based generator keyed on
``(model id, seed, draw index)``, so any ghost can be rebuilt on demand and
ghosts with different draw indices can be sampled in any order.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as nw

log = logging.getLogger(__name__)

KINDS = ("dropout", "skip", "both")

# top-1 magnitudes reported for ImageNet models at a ~10% accuracy drop; documentation only
REFERENCE_MAGNITUDES = {
    "inception-v3": 0.006,
    "inception-v4": 0.012,
    "resnet-50": 0.22,
    "resnet-101": 0.16,
    "resnet-152": 0.12,
    "inception-resnet-v2": 0.08,
}

GRID_STEP = {"dropout": 0.002, "both": 0.002, "skip": 0.02}

_STREAM_MASK, _STREAM_SCALAR = 0, 1


@dataclass(frozen=True)
class ErosionSpec:
    kind: str
    magnitude: float
    seed: int = 0
    slots: str = "all"  # "all" or "top" (only the last slot is eroded)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown erosion kind {self.kind!r}")
        m = self.magnitude
        if self.kind == "skip":
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"skip erosion magnitude must lie in [0, 1], got {m}")
        elif not 0.0 <= m < 1.0:
            raise ValueError(f"dropout erosion magnitude must lie in [0, 1), got {m}")
        if self.slots not in ("all", "top"):
            raise ValueError(f"slots must be 'all' or 'top', got {self.slots!r}")

    def with_magnitude(self, magnitude: float) -> "ErosionSpec":
        return ErosionSpec(self.kind, magnitude, self.seed, self.slots)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "magnitude": self.magnitude, "seed": self.seed, "slots": self.slots}

    @classmethod
    def from_dict(cls, d: dict) -> "ErosionSpec":
        return cls(d["kind"], float(d["magnitude"]), int(d.get("seed", 0)), d.get("slots", "all"))


def _rng(model_id: str, seed: int, draw: int, stream: int) -> np.random.Generator:
    key = [int(model_id[i:i + 8], 16) for i in range(0, len(model_id), 8)]
    ss = np.random.SeedSequence([seed, draw, stream, *key])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class GhostParams:
    masks: list  # per slot: 0/1 float array, or None when the slot is not eroded
    scalars: np.ndarray | None  # per residual block
    derivation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "derivation": self.derivation,
            "masks": [None if m is None else m.astype(int).tolist() for m in self.masks],
            "scalars": None if self.scalars is None else self.scalars.tolist(),
        }


def sample_params(base: nw.TrainedNetwork, spec: ErosionSpec, draw: int) -> GhostParams:
    layout = base.layout
    lam = spec.magnitude
    masks: list = [None] * len(layout.slot_shapes)
    scalars = None
    if spec.kind in ("dropout", "both"):
        if not layout.slot_shapes:
            raise ValueError(f"{base.spec.name} has no erosion_slot; dropout erosion is not applicable")
        rng = _rng(base.model_id, spec.seed, draw, _STREAM_MASK)
        # every slot is drawn so "top" mode shares its last mask with "all" mode
        drawn = [rng.random(shape) < 1.0 - lam for shape in layout.slot_shapes]
        active = range(len(drawn)) if spec.slots == "all" else [len(drawn) - 1]
        for i in active:
            masks[i] = drawn[i].astype(np.float64)
    if spec.kind in ("skip", "both"):
        if layout.block_count == 0:
            raise ValueError(f"{base.spec.name} has no residual_block; skip erosion is not applicable")
        rng = _rng(base.model_id, spec.seed, draw, _STREAM_SCALAR)
        u = rng.random(layout.block_count)
        scalars = np.clip((1.0 - lam) + 2.0 * lam * u, 1.0 - lam, 1.0 + lam)
    derivation = {"model_id": base.model_id, "spec": spec.to_dict(), "draw": int(draw)}
    return GhostParams(masks, scalars, derivation)


class GhostNetwork(nw.Erosion):
    """A base network plus one fixed erosion draw."""

    def __init__(self, base: nw.TrainedNetwork, spec: ErosionSpec, params: GhostParams):
        self.base = base
        self.spec = spec
        self.params = params
        keep = 1.0 - spec.magnitude
        self._factors = [None if m is None else m / keep for m in params.masks]

    @property
    def draw(self) -> int:
        return self.params.derivation["draw"]

    @property
    def class_count(self) -> int:
        return self.base.class_count

    def slot(self, index, x):
        f = self._factors[index]
        return x if f is None else ad.mask_mul(x, f)

    def skip(self, index, x):
        s = self.params.scalars
        return x if s is None else ad.scale(x, s[index])

    def __repr__(self):
        return f"GhostNetwork({self.base.spec.name}, {self.spec.kind}, magnitude={self.spec.magnitude}, draw={self.draw})"


def sample_ghost(base: nw.TrainedNetwork, spec: ErosionSpec, draw: int) -> GhostNetwork:
    return GhostNetwork(base, spec, sample_params(base, spec, draw))


def ghost_forward(ghost: GhostNetwork, batch) -> ad.Tensor:
    return nw.forward(ghost.base, batch, erosion=ghost)


def ghost_predict(ghost: GhostNetwork, batch) -> np.ndarray:
    return nw.predict(ghost.base, batch, erosion=ghost)


def ghost_input_grad(ghost: GhostNetwork, image, label) -> np.ndarray:
    """Input gradient of the ghost's mean cross-entropy loss; accepts one image or a batch."""
    image = np.asarray(image, dtype=np.float64)
    single = image.shape == tuple(ghost.base.spec.input_shape)
    x = image[None] if single else image
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    g = nw.input_grad(ghost.base, x, y, erosion=ghost)
    return g[0] if single else g


def dump_params(ghost: GhostNetwork, path) -> None:
    Path(path).write_text(json.dumps(ghost.params.to_dict(), indent=1, sort_keys=True))


# ---------------------------------------------------------------- calibration


@dataclass
class Calibration:
    magnitude: float
    base_accuracy: float
    threshold: float
    curve: list  # (magnitude, mean ghost accuracy)
    crossed: bool

    def to_dict(self) -> dict:
        return {
            "magnitude": self.magnitude,
            "base_accuracy": self.base_accuracy,
            "threshold": self.threshold,
            "crossed": self.crossed,
            "curve": [[m, a] for m, a in self.curve],
        }


def magnitude_grid(kind: str, step: float | None = None) -> np.ndarray:
    step = step or GRID_STEP[kind]
    top = 1.0 if kind == "skip" else 1.0 - step
    n = int(round(top / step))
    return np.round(np.arange(n + 1) * step, 10)


def ghost_accuracy(base, spec: ErosionSpec, x, y, ghosts: int) -> float:
    if spec.magnitude == 0.0:
        return nw.accuracy(base, x, y)
    return float(np.mean([nw.accuracy(base, x, y, sample_ghost(base, spec, d)) for d in range(ghosts)]))


def calibrate_lambda(base, dataset, target_drop: float, kind: str, ghosts: int = 20, seed: int = 0,
                     step: float | None = None, full_curve: bool = False) -> Calibration:
    """Smallest grid magnitude whose mean ghost accuracy falls to base accuracy minus ``target_drop``.

    ``dataset`` is evaluated as given (pass the validation split). The scan stops at the
    first crossing unless ``full_curve`` is set.
    """
    if not 0.0 < target_drop <= 0.5:
        raise ValueError("target_drop must lie in (0, 0.5]")
    x, y = dataset.x, dataset.y
    base_acc = nw.accuracy(base, x, y)
    threshold = base_acc - target_drop
    curve, chosen = [], None
    for m in magnitude_grid(kind, step):
        acc = ghost_accuracy(base, ErosionSpec(kind, float(m), seed), x, y, ghosts)
        curve.append((float(m), acc))
        if chosen is None and acc <= threshold:
            chosen = float(m)
            if not full_curve:
                break
    crossed = chosen is not None
    if not crossed:
        chosen = curve[-1][0]
        warnings.warn(f"accuracy never fell to {threshold:.4f}; returning grid maximum {chosen}")
    log.info("calibrated %s magnitude %.3f for %s", kind, chosen, base.spec.name)
    return Calibration(chosen, base_acc, threshold, curve, crossed)
