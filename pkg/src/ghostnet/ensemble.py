"""Gradient fusion: standard ensemble, longitudinal ensemble and their combination.

A plan has ``S`` branches evaluated at every attack iteration. Branch ``b``
uses base model ``b % B``. In ghost mode the branch attacks a ghost of that
base; with a longitudinal length ``L > 1`` it attacks a fresh ghost at every
iteration (draw ``b * L + j``), otherwise one ghost (draw ``b``) for the whole
attack. Fusion averages branch losses with ``weights``, which makes the fused
gradient the weighted sum of branch gradients.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import erosion as er
from . import network as nw
from .attack import AttackConfig, run_attack


class PlanError(ValueError):
    pass


@dataclass
class EnsemblePlan:
    bases: list  # list of (TrainedNetwork, ErosionSpec | None)
    S: int = 1
    L: int = 1
    weights: list | None = None
    modes: list | None = None  # per branch: "ghost" or "base"; inferred from the erosion spec
    name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.bases:
            raise PlanError("plan needs at least one base model")
        if self.S < 1 or self.L < 1:
            raise PlanError("S and L must be positive")
        self.bases = [b if isinstance(b, tuple) else (b, None) for b in self.bases]
        if self.weights is None:
            self.weights = [1.0 / self.S] * self.S
        self.weights = [float(w) for w in self.weights]
        if len(self.weights) != self.S:
            raise PlanError(f"expected {self.S} branch weights, got {len(self.weights)}")
        if any(w < 0 for w in self.weights):
            raise PlanError("branch weights must be non-negative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise PlanError(f"branch weights sum to {sum(self.weights)!r}, expected 1")
        if self.modes is None:
            self.modes = ["base" if self.branch_base(b)[1] is None else "ghost" for b in range(self.S)]
        for b, mode in enumerate(self.modes):
            if mode not in ("base", "ghost"):
                raise PlanError(f"unknown branch mode {mode!r}")
            if mode == "ghost" and self.branch_base(b)[1] is None:
                raise PlanError(f"branch {b} is in ghost mode but its base has no erosion spec")

    @property
    def B(self) -> int:
        return len(self.bases)

    def branch_base(self, b: int):
        return self.bases[b % len(self.bases)]

    @property
    def intrinsic_models(self) -> int:
        return sum(self.L if m == "ghost" else 1 for m in self.modes)

    @property
    def cost(self) -> int:
        """Model evaluations per iteration relative to a single-model attack."""
        return self.S

    def draw(self, b: int, j: int) -> int:
        return b * self.L + j if self.L > 1 else b

    def validate(self, n_iter: int) -> None:
        if self.L > 1 and self.L != n_iter:
            raise PlanError(f"longitudinal length {self.L} must equal the iteration count {n_iter}")

    def branch_model(self, b: int, j: int):
        """The network (or ghost) attacked by branch ``b`` at iteration ``j``."""
        net, spec = self.branch_base(b)
        if self.modes[b] == "base":
            return net, None
        return net, er.sample_ghost(net, spec, self.draw(b, j))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "B": self.B,
            "S": self.S,
            "L": self.L,
            "I": self.intrinsic_models,
            "CC": self.cost,
            "weights": self.weights,
            "modes": self.modes,
            "bases": [{"model_id": n.model_id, "arch": n.spec.name,
                       "erosion": None if s is None else s.to_dict()} for n, s in self.bases],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def branch_grad(plan: EnsemblePlan, b: int, j: int, images, labels) -> np.ndarray:
    net, ghost = plan.branch_model(b, j)
    return nw.input_grad(net, images, labels, erosion=ghost)


def fused_grad(plan: EnsemblePlan, j: int, images, labels) -> np.ndarray:
    """Weighted sum of branch input gradients at iteration ``j``, reduced in branch order."""
    images = np.asarray(images, dtype=np.float64)
    total = np.zeros_like(images)
    for b, w in enumerate(plan.weights):
        if w == 0.0:
            continue
        g = branch_grad(plan, b, j, images, labels)
        total = total + w * g
    return total


def make_grad_provider(plan: EnsemblePlan, n_iter: int | None = None):
    if n_iter is not None:
        plan.validate(n_iter)

    def provider(j, images, labels):
        return fused_grad(plan, j, images, labels)

    return provider


def attack_with_plan(plan: EnsemblePlan, images, labels, cfg: AttackConfig, on_step=None) -> np.ndarray:
    return run_attack(images, labels, make_grad_provider(plan, cfg.n_iter), cfg, on_step)


def measure_cost(plan: EnsemblePlan, images, labels, cfg: AttackConfig, repeats: int = 3) -> dict:
    """Theoretical cost plus the best-of-``repeats`` wall time per adversarial image."""
    images = np.asarray(images, dtype=np.float64)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        attack_with_plan(plan, images, labels, cfg)
        best = min(best, time.perf_counter() - t0)
    return {"CC": plan.cost, "I": plan.intrinsic_models,
            "seconds_per_image": best / max(len(images), 1), "images": int(len(images))}
