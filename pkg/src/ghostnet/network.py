"""Declarative networks, supervised training and the GNET model file format."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv2d", "relu", "avgpool2d", "flatten", "residual_block", "erosion_slot")

GNET_MAGIC = b"GNET"
GNET_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training diverged: non-finite loss at epoch {epoch}")


@dataclass
class LayerSpec:
    kind: str
    attrs: dict = field(default_factory=dict)
    layers: list["LayerSpec"] = field(default_factory=list)  # residual_block body

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "attrs": dict(self.attrs)}
        if self.kind == "residual_block":
            d["layers"] = [l.to_dict() for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kind = d.get("kind")
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"unknown layer kind {kind!r}")
        return cls(kind, dict(d.get("attrs", {})), [cls.from_dict(x) for x in d.get("layers", [])])


@dataclass
class NetworkSpec:
    input_shape: tuple
    class_count: int
    layers: list[LayerSpec]
    name: str = "custom"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), int(d["class_count"]),
                   [LayerSpec.from_dict(x) for x in d["layers"]], d.get("name", "custom"))


@dataclass
class Layout:
    """Shape analysis of a spec: parameter order and erosion sites."""

    params: list[tuple[str, tuple]]  # (name, shape) in spec order
    slot_shapes: list[tuple]  # per erosion_slot, per-sample activation shape
    block_count: int
    output_shape: tuple


def _walk(layers, shape, prefix, params, slots, counter, top_level=True):
    for i, layer in enumerate(layers):
        name = f"{prefix}{i}"
        kind, a = layer.kind, layer.attrs
        where = f"layer {name} ({kind})"
        if kind == "dense":
            if len(shape) != 1 or shape[0] != a["in"]:
                raise ValueError(f"shape chain break at {where}: got {shape}, expects ({a['in']},)")
            params.append((f"{name}.W", (a["in"], a["out"])))
            params.append((f"{name}.b", (a["out"],)))
            shape = (a["out"],)
        elif kind == "conv2d":
            if len(shape) != 3 or shape[0] != a["in"]:
                raise ValueError(f"shape chain break at {where}: got {shape}, expects {a['in']} channels")
            k = a.get("k", 3)
            params.append((f"{name}.W", (a["out"], a["in"], k, k)))
            params.append((f"{name}.b", (a["out"],)))
            shape = (a["out"], shape[1], shape[2])
        elif kind == "avgpool2d":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ValueError(f"shape chain break at {where}: cannot pool {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "relu":
            pass
        elif kind == "erosion_slot":
            slots.append(shape)
        elif kind == "residual_block":
            counter[0] += 1
            inner = _walk(layer.layers, shape, f"{name}.", params, slots, counter, False)
            if inner != shape:
                raise ValueError(f"shape chain break at {where}: body maps {shape} to {inner}")
        else:
            raise ValueError(f"unknown layer kind {kind!r} at layer {name}")
    return shape


def analyze(spec: NetworkSpec) -> Layout:
    params, slots, counter = [], [], [0]
    out = _walk(spec.layers, tuple(spec.input_shape), "", params, slots, counter)
    if out != (spec.class_count,):
        raise ValueError(f"shape chain break at output: got {out}, expects ({spec.class_count},)")
    return Layout(params, slots, counter[0], out)


# ---------------------------------------------------------------- presets


def _dense(i, o):
    return LayerSpec("dense", {"in": i, "out": o})


def plain_mlp(input_shape=(2,), class_count=2, width=256, depth=2, name="plain-mlp") -> NetworkSpec:
    layers = []
    fan_in = int(np.prod(input_shape))
    if len(input_shape) > 1:
        layers.append(LayerSpec("flatten"))
    for _ in range(depth):
        layers += [_dense(fan_in, width), LayerSpec("relu"), LayerSpec("erosion_slot")]
        fan_in = width
    layers.append(_dense(fan_in, class_count))
    return NetworkSpec(tuple(input_shape), class_count, layers, name)


def res_mlp(input_shape=(2,), class_count=2, width=64, blocks=8, name="res-mlp") -> NetworkSpec:
    fan_in = int(np.prod(input_shape))
    layers = [LayerSpec("flatten")] if len(input_shape) > 1 else []
    layers += [_dense(fan_in, width), LayerSpec("relu"), LayerSpec("erosion_slot")]
    for _ in range(blocks):
        body = [_dense(width, width), LayerSpec("relu"), LayerSpec("erosion_slot"), _dense(width, width)]
        layers.append(LayerSpec("residual_block", {}, body))
    layers += [LayerSpec("relu"), LayerSpec("erosion_slot"), _dense(width, class_count)]
    return NetworkSpec(tuple(input_shape), class_count, layers, name)


def small_cnn(input_shape=(1, 8, 8), class_count=10, channels=(8, 16), name="small-cnn") -> NetworkSpec:
    c, h, w = input_shape
    layers = []
    for out in channels:
        layers += [LayerSpec("conv2d", {"in": c, "out": out, "k": 3}), LayerSpec("relu"),
                   LayerSpec("erosion_slot"), LayerSpec("avgpool2d")]
        c, h, w = out, h // 2, w // 2
    layers += [LayerSpec("flatten"), _dense(c * h * w, class_count)]
    return NetworkSpec(tuple(input_shape), class_count, layers, name)


PRESETS = {"plain-mlp": plain_mlp, "res-mlp": res_mlp, "small-cnn": small_cnn}


def preset(name: str, input_shape, class_count: int, **kw) -> NetworkSpec:
    try:
        return PRESETS[name](input_shape=tuple(input_shape), class_count=class_count, **kw)
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}") from None


# ---------------------------------------------------------------- model


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.5
    decay_every: int = 20
    seed: int = 0


class TrainedNetwork:
    """Network spec plus weights. Weights are frozen (read-only arrays) once built."""

    def __init__(self, spec: NetworkSpec, weights: dict, meta: dict | None = None):
        self.spec = spec
        self.layout = analyze(spec)
        self.weights = {}
        for name, shape in self.layout.params:
            arr = np.array(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"weight {name} has shape {arr.shape}, expects {shape}")
            arr.flags.writeable = False
            self.weights[name] = arr
        self.meta = dict(meta or {})
        self._id = None

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def model_id(self) -> str:
        """Content hash of spec and weights."""
        if self._id is None:
            h = hashlib.sha256(_canonical(self.spec.to_dict()))
            for name, _ in self.layout.params:
                h.update(self.weights[name].astype("<f8").tobytes())
            self._id = h.hexdigest()[:16]
        return self._id

    def __repr__(self):
        return f"TrainedNetwork({self.spec.name}, id={self.model_id})"


def build(spec: NetworkSpec, seed: int = 0) -> TrainedNetwork:
    """Initialise weights with seeded scaled-uniform draws, biases at zero."""
    layout = analyze(spec)
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in layout.params:
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
            continue
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights[name] = rng.uniform(-bound, bound, size=shape)
    return TrainedNetwork(spec, weights, {"init_seed": seed})


class Erosion:
    """Hook interface used by :func:`forward`. The base network uses ``None``."""

    def slot(self, index: int, x: Tensor) -> Tensor:
        return x

    def skip(self, index: int, x: Tensor) -> Tensor:
        return x


def _run(layers, x, params, prefix, erosion, counters):
    for i, layer in enumerate(layers):
        name = f"{prefix}{i}"
        kind = layer.kind
        if kind == "dense":
            x = ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])
        elif kind == "conv2d":
            x = ad.conv2d(x, params[f"{name}.W"], params[f"{name}.b"])
        elif kind == "relu":
            x = ad.relu(x)
        elif kind == "avgpool2d":
            x = ad.avgpool2d(x)
        elif kind == "flatten":
            x = ad.flatten(x)
        elif kind == "erosion_slot":
            idx = counters[0]
            counters[0] += 1
            if erosion is not None:
                x = erosion.slot(idx, x)
        elif kind == "residual_block":
            idx = counters[1]
            counters[1] += 1
            body = _run(layer.layers, x, params, f"{name}.", erosion, counters)
            trunk = x if erosion is None else erosion.skip(idx, x)
            x = ad.add(trunk, body)
    return x


def _as_input(net: TrainedNetwork, batch) -> Tensor:
    t = batch if isinstance(batch, Tensor) else Tensor(batch)
    if t.shape[1:] != tuple(net.spec.input_shape):
        raise ad.ShapeError("forward", t.shape, (None, *net.spec.input_shape))
    return t


def forward(net: TrainedNetwork, batch, erosion: Erosion | None = None, params: dict | None = None) -> Tensor:
    """Logits for a batch. ``params`` overrides the frozen weights (used by training)."""
    x = _as_input(net, batch)
    if params is None:
        params = {k: Tensor(v) for k, v in net.weights.items()}
    return _run(net.spec.layers, x, params, "", erosion, [0, 0])


def predict_logits(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index
    return np.argmax(logits, axis=-1)


def predict(net: TrainedNetwork, batch, erosion: Erosion | None = None, chunk: int = 4096) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    out = [predict_logits(forward(net, batch[i:i + chunk], erosion).data) for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def loss(net: TrainedNetwork, batch, labels, erosion: Erosion | None = None) -> Tensor:
    return ad.cross_entropy(forward(net, batch, erosion), labels)


def input_grad(net: TrainedNetwork, batch, labels, erosion: Erosion | None = None) -> np.ndarray:
    """Gradient of the mean cross-entropy loss with respect to the input batch."""
    x = Tensor(np.asarray(batch, dtype=np.float64), requires_grad=True)
    ad.backward(loss(net, x, labels, erosion))
    return x.grad


def accuracy(net: TrainedNetwork, x, y, erosion: Erosion | None = None) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(net, x, erosion) == np.asarray(y)))


def train(net: TrainedNetwork, dataset, cfg: TrainConfig) -> TrainedNetwork:
    """SGD with momentum and step decay on the dataset's ``train`` split.

    Returns a new network; the input network is left untouched.
    """
    tr = dataset.split("train")
    va = dataset.split("val")
    if tr.y.size and (tr.y.min() < 0 or tr.y.max() >= net.class_count):
        raise ValueError("dataset labels outside [0, class_count)")
    rng = np.random.default_rng(cfg.seed)
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in net.weights.items()}
    velocity = {k: np.zeros_like(v) for k, v in net.weights.items()}
    n = len(tr.y)
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch and cfg.decay_every and epoch % cfg.decay_every == 0:
            lr *= cfg.lr_decay
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ad.zero_grad(params.values())
            l = ad.cross_entropy(forward(net, tr.x[idx], params=params), tr.y[idx])
            if not np.isfinite(l.data):
                raise TrainingDiverged(epoch)
            ad.backward(l)
            for k, p in params.items():
                velocity[k] = cfg.momentum * velocity[k] - lr * p.grad
                p.data = p.data + velocity[k]
                if not np.all(np.isfinite(p.data)):
                    raise TrainingDiverged(epoch)
            total += float(l.data) * len(idx)
        log.debug("epoch %d loss %.4f", epoch, total / max(n, 1))
    out = TrainedNetwork(net.spec, {k: p.data for k, p in params.items()})
    out.meta = {
        **net.meta,
        "train_seed": cfg.seed,
        "epochs": cfg.epochs,
        "train_config": cfg.__dict__.copy(),
        "train_accuracy": accuracy(out, tr.x, tr.y),
        "val_accuracy": accuracy(out, va.x, va.y) if len(va.y) else None,
    }
    return out


# ---------------------------------------------------------------- GNET I/O


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def to_bytes(net: TrainedNetwork) -> bytes:
    meta = _canonical({"spec": net.spec.to_dict(), "meta": net.meta})
    parts = [GNET_MAGIC, struct.pack("<H", GNET_VERSION), struct.pack("<I", len(meta)), meta]
    for name, _ in net.layout.params:
        parts.append(net.weights[name].astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes, source: str = "<bytes>") -> TrainedNetwork:
    if len(blob) < 14 or blob[:4] != GNET_MAGIC:
        raise ModelFormatError(f"{source}: not a GNET model file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError(f"{source}: checksum mismatch")
    (version,) = struct.unpack("<H", body[4:6])
    if version != GNET_VERSION:
        raise ModelFormatError(f"{source}: unsupported GNET version {version}")
    (mlen,) = struct.unpack("<I", body[6:10])
    head = json.loads(body[10:10 + mlen])
    try:
        spec = NetworkSpec.from_dict(head["spec"])
    except ModelFormatError as e:
        raise ModelFormatError(f"{source}: {e}") from None
    layout = analyze(spec)
    off = 10 + mlen
    weights = {}
    for name, shape in layout.params:
        count = int(np.prod(shape))
        weights[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
    if off != len(body):
        raise ModelFormatError(f"{source}: payload length mismatch")
    return TrainedNetwork(spec, weights, head.get("meta", {}))


def save(net: TrainedNetwork, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load(path) -> TrainedNetwork:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return from_bytes(path.read_bytes(), str(path))


