"""ghostnet command-line front end.

Every command writes its artifacts plus ``manifest.json`` (inputs, seeds,
hashes) into the output directory: ``--out``, else ``$GHOSTNET_OUT``, else
``./ghostnet-out``. Wall-clock numbers go to ``timing.json`` so reports and
manifests are byte-identical across repeated runs. Failures print a JSON
error record on stderr, also saved as ``error.json``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import dataio
from . import ensemble as en
from . import erosion as er
from . import evaluation as ev
from . import experiment as ex
from . import network as nw
from .attack import METHODS, AttackConfig

OUT_ENV = "GHOSTNET_OUT"

EXIT_CODES = {
    "error": 1,
    "unknown_preset": 2,
    "missing_model_file": 3,
    "missing_data_file": 4,
    "config_schema_mismatch": 5,
    "bad_file_format": 6,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _schema() -> dict:
    text = resources.files("ghostnet").joinpath("schemas/experiment.schema.json").read_text()
    return json.loads(text)


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError("missing_data_file", f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CliError("config_schema_mismatch", f"{path}: not valid JSON ({e})") from e
    # a manifest embeds its resolved config under "config"
    if isinstance(cfg, dict) and cfg.get("command") == "experiment" and "config" in cfg:
        cfg = cfg["config"]
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise CliError("config_schema_mismatch", f"{path}: {where}: {e.message}") from e
    return cfg


def _model(path) -> nw.TrainedNetwork:
    if not Path(path).exists():
        raise CliError("missing_model_file", f"model file not found: {path}")
    return nw.load(path)


def _data(path) -> dataio.Dataset:
    if not Path(path).exists():
        raise CliError("missing_data_file", f"dataset file not found: {path}")
    return dataio.load_dataset(path)


def _out(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "ghostnet-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, config: dict, inputs: dict, outputs: list, **extra) -> dict:
    m = {
        "command": command,
        "config": config,
        "inputs": {k: {"file": Path(v).name, "sha256": ex.file_sha(v)} for k, v in inputs.items()},
        "outputs": {Path(p).name: ex.file_sha(p) for p in outputs},
        **extra,
    }
    _write_json(out / "manifest.json", m)
    return m


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, out):
    ds = dataio.gen_synthetic(args.task, args.count, args.noise, args.seed)
    cfg = {"task": args.task, "count": args.count, "noise": args.noise, "seed": args.seed}
    p = out / "data.gdat"
    dataio.save_dataset(ds, p, provenance=cfg)
    outputs = [p]
    if args.csv:
        dataio.export_csv(ds, out / "data.csv")
        outputs.append(out / "data.csv")
    _manifest(out, "gen-data", cfg, {}, outputs, seeds={"data": args.seed})


def cmd_train(args, out):
    ds = _data(args.data)
    tc = nw.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                        lr=args.lr if args.lr is not None else ex.ARCH_LR[args.arch], seed=args.seed)
    net = nw.train(nw.build(nw.preset(args.arch, ds.input_shape, ds.class_count), args.seed), ds, tc)
    p = out / f"{args.name or args.arch}.gnet"
    nw.save(net, p)
    _manifest(out, "train", {"arch": args.arch, "train": tc.__dict__}, {"data": args.data}, [p],
              seeds={"init": args.seed, "train": args.seed}, model_id=net.model_id,
              val_accuracy=net.meta["val_accuracy"])


def cmd_calibrate(args, out):
    net, ds = _model(args.model), _data(args.data)
    c = er.calibrate_lambda(net, ds.split("val"), args.target_drop, args.kind, ghosts=args.ghosts,
                            seed=args.seed, step=args.step, full_curve=args.full_curve)
    p = out / "calibration.json"
    _write_json(p, c.to_dict())
    cfg = {"kind": args.kind, "target_drop": args.target_drop, "ghosts": args.ghosts, "step": args.step,
           "full_curve": args.full_curve}
    _manifest(out, "calibrate", cfg, {"model": args.model, "data": args.data}, [p], seeds={"erosion": args.seed},
              magnitude=c.magnitude)


def _attack_cfg(args) -> AttackConfig:
    return AttackConfig(args.method, args.epsilon, args.alpha, args.n_iter, args.mu, args.seed)


def cmd_attack(args, out):
    nets = [_model(m) for m in args.model]
    ds = _data(args.data).split(args.split)
    if args.filter:
        ds = ev.filter_dataset(ds, nets + [_model(m) for m in args.filter_with])
    if args.limit:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    acfg = _attack_cfg(args)
    if args.preset:
        row = ex.preset_row(args.preset)
        S, L, ghost = row["S"], row["L"], row["MT"] == "M"
        nets = nets[: row["B"]]
        if len(nets) < row["B"]:
            raise CliError("error", f"preset {args.preset} needs {row['B']} models, got {len(nets)}")
    else:
        S, L, ghost = args.S or len(nets), args.L, args.magnitude is not None
    mags = args.magnitude or []
    if ghost and len(mags) not in (1, len(nets)):
        raise CliError("error", "give one --magnitude per model, or one shared value")
    if ghost and not mags:
        raise CliError("error", "ghost plans need --magnitude")
    specs = [er.ErosionSpec(args.kind or ex.EROSION_KIND.get(n.spec.name, "dropout"),
                            mags[i] if len(mags) > 1 else mags[0], seed=args.seed) if ghost else None
             for i, n in enumerate(nets)]
    plan = en.EnsemblePlan(list(zip(nets, specs)), S=S, L=L, name=args.preset or "")
    adv = en.attack_with_plan(plan, ds.x, ds.y, acfg)
    prov = {"plan": plan.describe(), "attack": acfg.to_dict(), "split": args.split,
            "label": "+".join(n.model_id for n, _ in plan.bases)}
    p = out / "adv.gdat"
    dataio.save_dataset(dataio.Dataset(adv, ds.y, ds.class_count), p, provenance=prov)
    inputs = {"data": args.data, **{f"model{i}": m for i, m in enumerate(args.model)}}
    _manifest(out, "attack", prov, inputs, [p], seeds={"attack": args.seed}, I=plan.intrinsic_models, CC=plan.cost)


def cmd_evaluate(args, out):
    adv = _data(args.adv)
    nets = [_model(m) for m in args.model]
    prov = adv.meta.get("provenance", {})
    ids = [f"{n.spec.name}:{n.model_id}" for n in nets]
    rates = [ev.attack_rate(adv.x, adv.y, n) for n in nets]
    source_ids = {b["model_id"] for b in prov.get("plan", {}).get("bases", [])}
    black = [r for n, r in zip(nets, rates) if n.model_id not in source_ids]
    white = [r for n, r in zip(nets, rates) if n.model_id in source_ids]
    summary = {"black_box": float(np.mean(black)) if black else None,
               "white_box": float(np.mean(white)) if white else None}
    rep = ev.EvalReport(sources=[prov.get("label", Path(args.adv).name)], targets=ids, rates=[rates],
                        counts={"images": len(adv)}, summary=summary, config={"provenance": prov})
    rep.fingerprint = ex._key(rep.to_dict())
    rep.write_json(out / "report.json")
    files = rep.write_csv(out)
    _manifest(out, "evaluate", {}, {"adv": args.adv, **{f"model{i}": m for i, m in enumerate(args.model)}},
              [out / "report.json", *files])


def cmd_diversity(args, out):
    base, ds = _model(args.model), _data(args.data)
    x = ds.split(args.split).x[: args.limit]
    spec = er.ErosionSpec(args.kind or ex.EROSION_KIND.get(base.spec.name, "dropout"), args.magnitude, seed=args.seed)
    ghosts = [er.sample_ghost(base, spec, d) for d in range(args.ghosts)]
    blocks = {"ghosts": {"ids": [f"ghost{d}" for d in range(args.ghosts)],
                         "matrix": ev.diversity_matrix(ghosts, x).tolist()}}
    if args.compare:
        others = [_model(m) for m in args.compare]
        blocks["trained"] = {"ids": [n.model_id for n in others], "matrix": ev.diversity_matrix(others, x).tolist()}
    summary = {k: ev.mean_offdiag(np.array(v["matrix"])) for k, v in blocks.items()}
    rep = ev.EvalReport(summary={"mean_jsd_nats": summary}, diversity=blocks,
                        config={"erosion": spec.to_dict(), "ghosts": args.ghosts, "split": args.split})
    rep.fingerprint = ex._key(rep.to_dict())
    rep.write_json(out / "report.json")
    files = rep.write_csv(out)
    inputs = {"model": args.model, "data": args.data, **{f"compare{i}": m for i, m in enumerate(args.compare or [])}}
    _manifest(out, "diversity", rep.config, inputs, [out / "report.json", *files], seeds={"erosion": args.seed})


def cmd_experiment(args, out):
    if args.from_manifest:
        cfg = load_config(args.from_manifest)
    elif args.config:
        cfg = load_config(args.config)
    else:
        cfg = {}
    if args.preset:
        cfg["preset"] = args.preset
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.epsilon is not None:
        cfg.setdefault("attack", {})["epsilon"] = args.epsilon
    if args.methods:
        cfg.setdefault("attack", {})["methods"] = args.methods
    if "preset" not in cfg:
        raise CliError("unknown_preset", f"no preset given; expected one of {', '.join(ex.PRESETS)}")
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as e:
        raise CliError("config_schema_mismatch", e.message) from e
    cache = Path(args.cache) if args.cache else out.parent / "cache"
    res = ex.run(cfg, out, cache)
    print(json.dumps({"preset": res.manifest["preset"], "I": res.manifest["I"], "CC": res.manifest["CC"],
                      "summary": {m: round(v["black_box"], 4) for m, v in res.report.summary.items()}}))


def cmd_report(args, out):
    rows = []
    for d in args.inputs:
        p = Path(d) / "report.json"
        if not p.exists():
            raise CliError("missing_data_file", f"no report.json in {d}")
        rep = json.loads(p.read_text())
        row = rep.get("config", {}).get("row", {})
        for method, s in sorted(rep.get("summary", {}).items()):
            if not isinstance(s, dict) or "black_box" not in s:
                continue
            rows.append({"run": Path(d).name, "preset": rep["config"].get("preset", ""), "method": method,
                         "MT": row.get("MT", ""), "B": row.get("B", ""), "S": row.get("S", ""),
                         "L": row.get("L", ""), "I": row.get("I", ""), "CC": row.get("CC", ""),
                         "black_box": s["black_box"], "white_box": s.get("white_box", "")})
    cols = ["run", "preset", "method", "MT", "B", "S", "L", "I", "CC", "black_box", "white_box"]
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "summary.json", rows)
    for r in rows:
        print(f"{r['run']:<16} {r['method']:<7} I={r['I']!s:<4} CC={r['CC']!s:<3} black-box {r['black_box']:.4f}")
    _manifest(out, "report", {"inputs": [Path(d).name for d in args.inputs]},
              {Path(d).name: Path(d) / "report.json" for d in args.inputs}, [out / "summary.csv", out / "summary.json"])


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ghostnet", description="Ghost-network transfer attacks on small synthetic tasks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./ghostnet-out)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--task", choices=dataio.TASKS, default="digits-8x8")
    p.add_argument("--count", type=int, default=1500)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true", help="also export CSV (flat tasks only)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a preset network")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=list(nw.PRESETS), default="plain-mlp")
    p.add_argument("--name")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="pick the erosion magnitude by the accuracy-drop rule")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=er.KINDS, default="dropout")
    p.add_argument("--target-drop", type=float, default=0.10)
    p.add_argument("--ghosts", type=int, default=20)
    p.add_argument("--step", type=float)
    p.add_argument("--full-curve", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("attack", parents=[common], help="craft adversarial examples")
    p.add_argument("--model", action="append", required=True, help="source model; repeat for several bases")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="attack")
    p.add_argument("--filter", action="store_true", help="keep only samples every model classifies correctly")
    p.add_argument("--filter-with", action="append", default=[], help="extra models for --filter")
    p.add_argument("--limit", type=int)
    p.add_argument("--method", choices=METHODS, default="IFGSM")
    p.add_argument("--epsilon", type=float, default=8)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--n-iter", type=int)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--preset", help="take MT/#B/#S/#L from a named preset")
    p.add_argument("-S", type=int, help="branches per iteration")
    p.add_argument("-L", type=int, default=1, help="longitudinal length")
    p.add_argument("--magnitude", type=float, action="append", help="erosion magnitude (makes branches ghosts)")
    p.add_argument("--kind", choices=er.KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("evaluate", parents=[common], help="score an adversarial batch on target models")
    p.add_argument("--adv", required=True)
    p.add_argument("--model", action="append", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("diversity", parents=[common], help="pairwise JSD among ghosts and trained models")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--ghosts", type=int, default=3)
    p.add_argument("--kind", choices=er.KINDS)
    p.add_argument("--magnitude", type=float, required=True)
    p.add_argument("--compare", action="append", help="independently trained model to compare against")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_diversity)

    p = sub.add_parser("experiment", parents=[common], help="run a named preset end to end")
    p.add_argument("preset", nargs="?", help=f"one of {', '.join(ex.PRESETS)}")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--from-manifest", help="re-run the config embedded in a manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--cache", help="shared cache for data, models and calibrations (default <out>/../cache)")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("report", parents=[common], help="collect experiment reports into one table")
    p.add_argument("inputs", nargs="+", help="experiment output directories")
    p.set_defaults(fn=cmd_report)
    return ap


def _error_record(code: str, message: str, out: Path | None) -> int:
    rec = {"error": code, "message": message, "exit_code": EXIT_CODES[code]}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    if out is not None:
        _write_json(out / "error.json", rec)
    return EXIT_CODES[code]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = None
    try:
        out = _out(args)
        t0 = time.perf_counter()
        args.fn(args, out)
        if args.command != "experiment":
            _write_json(out / "timing.json", {"seconds": time.perf_counter() - t0})
        return 0
    except CliError as e:
        return _error_record(e.code, str(e), out)
    except ex.UnknownPresetError as e:
        return _error_record("unknown_preset", str(e), out)
    except (nw.ModelFormatError, dataio.DatasetFormatError) as e:
        return _error_record("bad_file_format", str(e), out)
    except (ValueError, RuntimeError, KeyError) as e:
        return _error_record("error", f"{type(e).__name__}: {e}", out)


if __name__ == "__main__":
    sys.exit(main())
