"""I-FGSM and MI-FGSM on any gradient source.

Images live in [0, 1]; ``epsilon`` and ``alpha`` are given on the 0-255 scale.
A gradient provider is any callable ``provider(iteration, images, labels)``
returning the input gradient of the loss to ascend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import network as nw

METHODS = ("IFGSM", "MIFGSM")
NORM_FLOOR = 1e-12

GradProvider = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


class AttackError(RuntimeError):
    pass


def default_iterations(epsilon: float) -> int:
    return int(min(epsilon + 4, math.ceil(1.25 * epsilon)))


@dataclass(frozen=True)
class AttackConfig:
    method: str = "IFGSM"
    epsilon: float = 8
    alpha: float = 1.0
    n_iter: int | None = None
    mu: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.n_iter is None:
            object.__setattr__(self, "n_iter", default_iterations(self.epsilon))
        if self.epsilon <= 0 or self.alpha <= 0:
            raise ValueError("epsilon and alpha must be positive")
        if self.n_iter < 1:
            raise ValueError(f"iteration count must be at least 1, got {self.n_iter}")
        if self.mu < 0:
            raise ValueError("momentum decay must be non-negative")

    def replace(self, **kw) -> "AttackConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"method": self.method, "epsilon": self.epsilon, "alpha": self.alpha,
                "n_iter": self.n_iter, "mu": self.mu, "seed": self.seed}


@dataclass
class AttackState:
    original: np.ndarray
    adv: np.ndarray
    g: np.ndarray
    n: int = 0

    @classmethod
    def start(cls, images) -> "AttackState":
        x = np.array(images, dtype=np.float64)
        return cls(x, x.copy(), np.zeros_like(x), 0)


def clip(adv: np.ndarray, original: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the epsilon-ball around ``original`` (0-255 scale), then onto [0, 1]."""
    e = epsilon / 255.0
    return np.clip(np.clip(adv, original - e, original + e), 0.0, 1.0)


def l1_normalize(grad: np.ndarray) -> np.ndarray:
    """Divide each image's gradient by its L1 norm; near-zero norms give a zero term."""
    flat = grad.reshape(len(grad), -1)
    norm = np.abs(flat).sum(axis=1)
    out = np.zeros_like(flat)
    ok = norm >= NORM_FLOOR
    out[ok] = flat[ok] / norm[ok, None]
    return out.reshape(grad.shape)


def attack_step(state: AttackState, grad: np.ndarray, cfg: AttackConfig) -> AttackState:
    """One update on a batch of images (leading axis)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.adv.shape:
        raise AttackError(f"gradient shape {grad.shape} does not match images {state.adv.shape}")
    if not np.all(np.isfinite(grad)):
        raise AttackError(f"non-finite gradient at iteration {state.n}")
    if cfg.method == "MIFGSM":
        g = cfg.mu * state.g + l1_normalize(grad)
        direction = np.sign(g)
    else:
        g = state.g
        direction = np.sign(grad)
    adv = clip(state.adv + (cfg.alpha / 255.0) * direction, state.original, cfg.epsilon)
    return AttackState(state.original, adv, g, state.n + 1)


def run_attack(images, labels, grad_provider: GradProvider, cfg: AttackConfig,
               on_step: Callable[[AttackState], None] | None = None) -> np.ndarray:
    """Untargeted attack; returns the adversarial images after ``cfg.n_iter`` steps."""
    images = np.asarray(images, dtype=np.float64)
    if images.size and (images.min() < 0 or images.max() > 1):
        raise AttackError("input images must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    state = AttackState.start(images)
    for j in range(cfg.n_iter):
        state = attack_step(state, grad_provider(j, state.adv, labels), cfg)
        if on_step is not None:
            on_step(state)
    return state.adv


def model_grad_provider(net: nw.TrainedNetwork) -> GradProvider:
    def provider(j, images, labels):
        return nw.input_grad(net, images, labels)

    return provider
