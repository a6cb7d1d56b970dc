"""Named experiment presets and the gen-data -> train -> calibrate -> attack -> evaluate pipeline.

Single-model presets (``s1``..``s5``) attack from each source base in turn and
score the adversarial batch on every other model. Multi-model presets
(``m1``..``m6``) hold out one base at a time, build the plan from the
remaining bases and score on the held-out base plus the extra target model.

Intermediate artifacts (datasets, trained models, calibrations) are cached
under ``<cache>/`` keyed by a hash of the settings that produce them, so
running several presets on the same seeds trains each model once.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from . import ensemble as en
from . import erosion as er
from . import evaluation as ev
from . import network as nw
from .attack import AttackConfig

# MT: "B" base model, "M" ghost networks
PRESETS = {
    "s1": {"MT": "B", "B": 1, "S": 1, "L": 1},
    "s2": {"MT": "M", "B": 1, "S": 1, "L": 1},
    "s3": {"MT": "M", "B": 1, "S": 1, "L": 10},
    "s4": {"MT": "M", "B": 1, "S": 10, "L": 1},
    "s5": {"MT": "M", "B": 1, "S": 10, "L": 10},
    "m1": {"MT": "B", "B": 1, "S": 1, "L": 1},
    "m2": {"MT": "B", "B": 3, "S": 3, "L": 1},
    "m3": {"MT": "M", "B": 1, "S": 3, "L": 1},
    "m4": {"MT": "M", "B": 3, "S": 3, "L": 1},
    "m5": {"MT": "M", "B": 1, "S": 3, "L": 10},
    "m6": {"MT": "M", "B": 3, "S": 3, "L": 10},
}

# dropout erosion for plain and convolutional nets, skip erosion for residual ones
EROSION_KIND = {"plain-mlp": "dropout", "small-cnn": "dropout", "res-mlp": "skip"}
ARCH_LR = {"plain-mlp": 0.05, "res-mlp": 0.02, "small-cnn": 0.05}


class UnknownPresetError(KeyError):
    def __str__(self):
        return f"unknown preset {self.args[0]!r}; expected one of {', '.join(PRESETS)}"


def preset_row(name: str) -> dict:
    """The preset's settings plus intrinsic model count #I and per-iteration cost CC."""
    if name not in PRESETS:
        raise UnknownPresetError(name)
    p = dict(PRESETS[name])
    per_branch = p["L"] if p["MT"] == "M" else 1
    p["I"] = p["S"] * per_branch
    p["CC"] = p["S"]
    return p


def default_config() -> dict:
    return {
        "preset": "s1",
        "seed": 0,
        "data": {"task": "digits-8x8", "count": 1500, "noise": 0.3},
        "models": [
            {"arch": "plain-mlp", "role": "base"},
            {"arch": "plain-mlp", "role": "base"},
            {"arch": "res-mlp", "role": "base"},
            {"arch": "res-mlp", "role": "base"},
            {"arch": "small-cnn", "role": "target"},
        ],
        "train": {"epochs": 30, "batch_size": 32},
        "erosion": {"target_drop": 0.10, "ghosts": 20, "step": None},
        "attack": {"methods": ["IFGSM", "MIFGSM"], "epsilon": 16, "alpha": 1.6, "n_iter": 10, "mu": 1.0},
        "max_attack_images": 300,
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(overrides: dict | None = None) -> dict:
    cfg = _merge(default_config(), overrides or {})
    preset_row(cfg["preset"])
    return cfg


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Workspace:
    """Cache of datasets, models and calibrations shared across experiments."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        for sub in ("data", "models", "calib"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def dataset(self, spec: dict, seed: int) -> tuple[dataio.Dataset, Path]:
        p = self.root / "data" / f"{_key([spec, seed])}.gdat"
        if not p.exists():
            ds = dataio.gen_synthetic(spec["task"], spec["count"], spec["noise"], seed)
            dataio.save_dataset(ds, p, provenance={"task": spec["task"], "seed": seed, **spec})
        return dataio.load_dataset(p), p

    def model(self, ds_path: Path, ds: dataio.Dataset, arch: str, seed: int, train: dict) -> tuple[nw.TrainedNetwork, Path]:
        cfg = nw.TrainConfig(epochs=train["epochs"], batch_size=train["batch_size"],
                             lr=train.get("lr", {}).get(arch, ARCH_LR[arch]), seed=seed)
        p = self.root / "models" / f"{arch}-{_key([file_sha(ds_path), arch, seed, cfg.__dict__])}.gnet"
        if not p.exists():
            net = nw.build(nw.preset(arch, ds.input_shape, ds.class_count), seed)
            nw.save(nw.train(net, ds, cfg), p)
        return nw.load(p), p

    def calibration(self, net: nw.TrainedNetwork, val: dataio.Dataset, kind: str, settings: dict, seed: int) -> er.Calibration:
        p = self.root / "calib" / f"{_key([net.model_id, kind, settings, seed])}.json"
        if not p.exists():
            c = er.calibrate_lambda(net, val, settings["target_drop"], kind, ghosts=settings["ghosts"],
                                    seed=seed, step=settings.get("step"))
            p.write_text(json.dumps(c.to_dict(), sort_keys=True))
        d = json.loads(p.read_text())
        return er.Calibration(d["magnitude"], d["base_accuracy"], d["threshold"],
                              [tuple(x) for x in d["curve"]], d["crossed"])


def _make_plan(preset: str, bases: list, specs: list) -> en.EnsemblePlan:
    row = preset_row(preset)
    ghost = row["MT"] == "M"
    pairs = [(b, s if ghost else None) for b, s in zip(bases, specs)]
    return en.EnsemblePlan(pairs[: row["B"]], S=row["S"], L=row["L"], name=preset)


@dataclass
class ExperimentResult:
    report: ev.EvalReport
    manifest: dict
    timing: dict


def run(cfg: dict, out_dir, cache_dir=None, on_step=None) -> ExperimentResult:
    """Run one preset end to end and write report, manifest and timing files to ``out_dir``.

    ``on_step`` is handed to every attack and sees each intermediate state.
    """
    cfg = resolve_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ws = Workspace(cache_dir or out / "cache")
    seed = int(cfg["seed"])
    row = preset_row(cfg["preset"])
    timing = {}
    t0 = time.perf_counter()

    ds, ds_path = ws.dataset(cfg["data"], seed)
    models, paths, archs = [], [], []
    for i, m in enumerate(cfg["models"]):
        net, p = ws.model(ds_path, ds, m["arch"], 1000 * seed + i, cfg["train"])
        models.append(net)
        paths.append(p)
        archs.append(m["arch"])
    timing["prepare_seconds"] = time.perf_counter() - t0
    base_idx = [i for i, m in enumerate(cfg["models"]) if m.get("role", "base") == "base"]

    t1 = time.perf_counter()
    val = ds.split("val")
    calib, specs = {}, {}
    for i in base_idx:
        kind = EROSION_KIND[archs[i]]
        c = ws.calibration(models[i], val, kind, cfg["erosion"], seed)
        calib[i] = c
        specs[i] = er.ErosionSpec(kind, c.magnitude, seed=seed)
    timing["calibrate_seconds"] = time.perf_counter() - t1

    # every scored model must classify the clean sample correctly
    atk = ev.filter_dataset(ds.split("attack"), models)
    if len(atk) > cfg["max_attack_images"]:
        atk = atk.subset(np.arange(cfg["max_attack_images"]))

    ids = [f"{archs[i]}#{i}" for i in range(len(models))]
    jobs = []  # (source label, plan, target indices)
    if row["B"] == 1 and cfg["preset"].startswith("s"):
        for i in base_idx:
            plan = _make_plan(cfg["preset"], [models[i]], [specs[i]])
            jobs.append((ids[i], plan, [k for k in range(len(models)) if k != i], i))
    else:
        extra = [k for k in range(len(models)) if k not in base_idx]
        for held in base_idx:
            group = [i for i in base_idx if i != held][:3]
            plan = _make_plan(cfg["preset"], [models[i] for i in group], [specs[i] for i in group])
            label = "+".join(ids[i] for i in group[: row["B"]])
            jobs.append((label, plan, [held, *extra], group[0] if row["B"] == 1 else None))

    sources, rates, summary, plans, attack_seconds = [], [], {}, [], {}
    for method in cfg["attack"]["methods"]:
        acfg = AttackConfig(method, cfg["attack"]["epsilon"], cfg["attack"]["alpha"],
                            cfg["attack"]["n_iter"], cfg["attack"]["mu"], seed)
        bb, wb = [], []
        t2 = time.perf_counter()
        for label, plan, targets, white in jobs:
            adv = en.attack_with_plan(plan, atk.x, atk.y, acfg, on_step)
            r = [ev.attack_rate(adv, atk.y, m) for m in models]
            sources.append(f"{method}:{label}")
            rates.append(r)
            bb.append(float(np.mean([r[k] for k in targets])))
            if white is not None:
                wb.append(r[white])
            if method == cfg["attack"]["methods"][0]:
                plans.append(plan.describe())
        attack_seconds[method] = time.perf_counter() - t2
        summary[method] = {"black_box": float(np.mean(bb)), "per_source": bb}
        if wb:
            summary[method]["white_box"] = float(np.mean(wb))

    report = ev.EvalReport(
        sources=sources,
        targets=ids,
        rates=rates,
        counts={"attack_images": int(len(atk)), **atk.meta.get("filter", {})},
        summary=summary,
        curves={ids[i]: calib[i].to_dict() for i in base_idx},
        config={"preset": cfg["preset"], "row": row, "resolved": cfg},
    )
    report.fingerprint = _key(report.to_dict())
    report.write_json(out / "report.json")
    report.write_csv(out)
    timing["attack_seconds"] = attack_seconds
    timing["total_seconds"] = time.perf_counter() - t0
    (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")

    manifest = {
        "command": "experiment",
        "preset": cfg["preset"],
        "row": row,
        "I": row["I"],
        "CC": row["CC"],
        "config": cfg,
        "seeds": {"data": seed, "models": [1000 * seed + i for i in range(len(models))], "erosion": seed},
        "inputs": {"dataset": {"file": ds_path.name, "sha256": file_sha(ds_path)},
                   "models": [{"id": ids[i], "model_id": models[i].model_id, "sha256": file_sha(paths[i])}
                              for i in range(len(models))]},
        "plans": plans,
        "erosion": {ids[i]: specs[i].to_dict() for i in base_idx},
        "outputs": {"report.json": file_sha(out / "report.json")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return ExperimentResult(report, manifest, timing)


def rerun_from_manifest(manifest_path, out_dir, cache_dir=None) -> ExperimentResult:
    manifest = json.loads(Path(manifest_path).read_text())
    return run(manifest["config"], out_dir, cache_dir)
