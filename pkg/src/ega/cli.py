"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes one run manifest next to its outputs; ``rerun``
replays a manifest and checks the artifacts hash the same.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .attack import epsilon_schedule, pgd
from .data import DEFAULT_SIZES, SyntheticDataset, generate, load_dataset, save_dataset
from .errors import ConfigError, EgaError
from .fileio import atomic_write, sha256_file
from .localization import DEFAULT_TAU, extract_box, upsample_cam
from .model import ArchConfig, load_checkpoint
from .objective import LAMBDA_GRID
from .trainer import MODES, TrainConfig, class_maps, evaluate, predict_maps, train

log = logging.getLogger("ega")

MANIFEST_NAME = "manifest.json"
SPLIT_FILES = {split: f"{split}.egd" for split in ("train", "val", "test")}


# -- config files -----------------------------------------------------------

_INT_KEYS = {"epochs", "batch_size", "epsilon", "seed", "num_classes", "input_size"}
_FLOAT_KEYS = {"lr", "momentum", "weight_decay", "lambda_clean", "lambda_adv"}
CONFIG_KEYS = _INT_KEYS | _FLOAT_KEYS | {"mode", "stages"}


def parse_stages(text: str):
    """``"32,32;64,64;128"`` -> ((32, 32), (64, 64), (128,))."""
    stages = tuple(tuple(int(w) for w in part.split(",")) for part in text.split(";"))
    if any(w < 1 for s in stages for w in s):
        raise ValueError("widths must be positive")
    return stages


def format_stages(stages) -> str:
    return ";".join(",".join(str(w) for w in s) for s in stages)


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments) into a validated TrainConfig."""
    values: Dict[str, object] = {}
    arch_kw: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}; known keys: {', '.join(sorted(CONFIG_KEYS))}", line=lineno)
        if key in values or key in arch_kw:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            if key in _INT_KEYS:
                parsed: object = int(value)
            elif key in _FLOAT_KEYS:
                parsed = float(value)
            elif key == "stages":
                parsed = parse_stages(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key}", line=lineno) from None
        if key == "mode" and parsed not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {value!r}", line=lineno)
        if key in ("stages", "num_classes", "input_size"):
            arch_kw[key] = parsed
        else:
            values[key] = parsed
    cfg = TrainConfig(arch=ArchConfig(**arch_kw), **values)
    return cfg.validate()


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name != "arch":
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    lines.append(f"stages = {format_stages(cfg.arch.stages)}")
    lines.append(f"num_classes = {cfg.arch.num_classes}")
    return "\n".join(lines) + "\n"


# -- manifests ----------------------------------------------------------------

def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_manifest(path: str, command: str, args: Dict[str, object], out_arg: str, artifacts: Sequence[str],
                   started: float, config: Optional[dict] = None, seed: Optional[int] = None,
                   logs: Sequence[str] = ()) -> str:
    """Record what ran and the sha256 of every artifact, relative to the output location."""
    base = args[out_arg] if os.path.isdir(str(args[out_arg])) else os.path.dirname(str(args[out_arg]))
    manifest = {
        "command": command,
        "args": args,
        "output_arg": out_arg,
        "config": config,
        "seed": seed,
        "artifacts": {os.path.relpath(a, base): sha256_file(a) for a in artifacts},
        "logs": [os.path.relpath(p, base) for p in logs],
        "wall_clock_seconds": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "version": version_string(),
    }
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    print(path)
    return path


def _file_manifest_path(path: str) -> str:
    return path + ".manifest.json"


# -- data helpers -----------------------------------------------------------------

def _load_split(path: str, split: str) -> SyntheticDataset:
    if os.path.isdir(path):
        path = os.path.join(path, SPLIT_FILES[split])
    ds = load_dataset(path)
    if ds.split != split:
        raise EgaError(f"{path} holds the {ds.split!r} split, expected {split!r}")
    return ds


# -- commands ---------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    sizes = {
        "train": args.size,
        "val": args.val_size if args.val_size is not None else max(args.classes, args.size // 8),
        "test": args.test_size if args.test_size is not None else max(args.classes, args.size // 4),
    }
    paths = []
    for split, n in sizes.items():
        ds = generate(args.seed, split, n, args.classes)
        path = os.path.join(args.out, SPLIT_FILES[split])
        save_dataset(ds, path)
        log.info("%s: %d samples, per class %s", split, n, ds.class_counts())
        paths.append(path)
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "generate-data", vars_of(args), "out", paths, started,
                   seed=args.seed)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    with open(args.config) as f:
        cfg = parse_config(f.read())
    data = _load_split(args.data, "train")
    os.makedirs(args.out, exist_ok=True)
    atomic_write(os.path.join(args.out, "config.txt"), format_config(cfg).encode())
    resume = os.path.join(args.out, "last.ega") if args.resume and os.path.exists(
        os.path.join(args.out, "last.ega")) else None
    res = train(cfg, data, out_dir=args.out, resume=resume)
    artifacts = [p for p in (res.checkpoint, os.path.join(args.out, "last.ega"), os.path.join(args.out, "config.txt"))
                 if os.path.exists(p)]
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "train", vars_of(args), "out", artifacts, started,
                   config=cfg.to_dict(), seed=cfg.seed, logs=[os.path.join(args.out, "train_log.jsonl")])
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    data = _load_split(args.data, args.split)
    with_pxap = {"auto": None, "yes": True, "no": False}[args.pxap]
    report = evaluate(model, data, tau=args.tau, with_pxap=with_pxap)
    atomic_write(args.report, (report.to_json() + "\n").encode())
    artifacts = [args.report]
    if args.curves:
        atomic_write(args.curves, report.curves_csv().encode())
        artifacts.append(args.curves)
    for key, value in report.to_dict()["errors"].items():
        log.info("%s: %s", key, "n/a" if value is None else f"{value:.2f}")
    write_manifest(_file_manifest_path(args.report), "evaluate", vars_of(args), "report", artifacts, started)
    return 0


def ablation_plan(seeds: Sequence[int], sections: Sequence[str]) -> List[dict]:
    """Grid cells: the mode comparison, the epsilon sweep and the lambda grid, each over ``seeds``."""
    cells = []
    for seed in seeds:
        if "modes" in sections:
            for mode in MODES:
                cfg = TrainConfig(mode=mode)
                cells.append(dict(section="modes", mode=mode, epsilon=cfg.epsilon, lambda_clean=cfg.lambda_clean,
                                  lambda_adv=cfg.lambda_adv, seed=seed))
        if "epsilon" in sections:
            for eps in (1, 2, 3, 4):
                cells.append(dict(section="epsilon", mode="ega", epsilon=eps, lambda_clean=1.0, lambda_adv=0.01,
                                  seed=seed))
        if "lambda" in sections:
            for lc, la in LAMBDA_GRID:
                cells.append(dict(section="lambda", mode="ega", epsilon=1, lambda_clean=lc, lambda_adv=la,
                                  seed=seed))
    for cell in cells:
        attack = epsilon_schedule(cell["epsilon"])
        cell["steps"] = attack.steps
        cell["step_size"] = attack.step_size
        cell["id"] = "{section}-{mode}-e{epsilon}-lc{lambda_clean:g}-la{lambda_adv:g}-s{seed}".format(**cell)
    return cells


SUMMARY_KEYS = ("top1_cls_acc", "top1_loc_acc", "corloc", "maxboxaccv2", "pxap")


def summarize(rows: List[dict]) -> List[dict]:
    """Mean and population std over seeds for each (section, mode, epsilon, lambdas) group."""
    groups: Dict[tuple, List[dict]] = {}
    for row in rows:
        key = (row["section"], row["mode"], row["epsilon"], row["lambda_clean"], row["lambda_adv"])
        groups.setdefault(key, []).append(row)
    out = []
    for (section, mode, eps, lc, la), members in groups.items():
        entry = dict(section=section, mode=mode, epsilon=eps, steps=members[0]["steps"], lambda_clean=lc,
                     lambda_adv=la, seeds=[m["seed"] for m in members])
        for k in SUMMARY_KEYS:
            vals = [m[k] for m in members if m.get(k) is not None]
            entry[f"{k}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{k}_std"] = float(np.std(vals)) if vals else None
        out.append(entry)
    return out


def _csv(rows: List[dict]) -> bytes:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (";".join(map(str, v)) if isinstance(v, list) else v) for k, v in row.items()})
    return buf.getvalue().encode()


def cmd_ablate(args) -> int:
    started = time.time()
    base = TrainConfig()
    if args.config:
        with open(args.config) as f:
            base = parse_config(f.read())
    seeds = [int(s) for s in args.seeds.split(",")]
    sections = args.sections.split(",")
    unknown = set(sections) - {"modes", "epsilon", "lambda"}
    if unknown:
        raise ConfigError(f"unknown ablation sections {sorted(unknown)}")
    cells = ablation_plan(seeds, sections)
    os.makedirs(args.out, exist_ok=True)
    plan_path = os.path.join(args.out, "plan.json")
    atomic_write(plan_path, (json.dumps(cells, indent=2) + "\n").encode())
    artifacts = [plan_path]
    if args.plan_only:
        write_manifest(os.path.join(args.out, MANIFEST_NAME), "ablate", vars_of(args), "out", artifacts, started)
        return 0
    train_data = _load_split(args.data, "train")
    test_data = _load_split(args.data, args.split)
    rows = []
    for cell in cells:
        cell_dir = os.path.join(args.out, "cells", cell["id"])
        report_path = os.path.join(cell_dir, "report.json")
        if not os.path.exists(report_path):
            cfg = TrainConfig.from_dict({**base.to_dict(), "mode": cell["mode"], "epsilon": cell["epsilon"],
                                         "lambda_clean": cell["lambda_clean"], "lambda_adv": cell["lambda_adv"],
                                         "seed": cell["seed"]}).validate()
            last = os.path.join(cell_dir, "last.ega")
            log.info("cell %s", cell["id"])
            res = train(cfg, train_data, out_dir=cell_dir, resume=last if os.path.exists(last) else None)
            report = evaluate(res.model, test_data)
            atomic_write(report_path, (report.to_json() + "\n").encode())
        with open(report_path) as f:
            scores = json.load(f)
        rows.append({**{k: cell[k] for k in ("id", "section", "mode", "epsilon", "steps", "step_size",
                                             "lambda_clean", "lambda_adv", "seed")},
                     **{k: scores.get(k) for k in SUMMARY_KEYS}})
        artifacts.append(report_path)
    summary = summarize(rows)
    paths = {
        "cells.csv": _csv(rows),
        "summary.csv": _csv(summary),
        "summary.json": (json.dumps({"cells": rows, "summary": summary}, indent=2) + "\n").encode(),
    }
    for name, blob in paths.items():
        atomic_write(os.path.join(args.out, name), blob)
        artifacts.append(os.path.join(args.out, name))
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "ablate", vars_of(args), "out", artifacts, started,
                   config=base.to_dict())
    return 0


def cmd_cam_export(args) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    data = _load_split(args.data, args.split)
    n = args.n
    if n > len(data):
        log.warning("requested %d maps but the split has %d samples; exporting %d", n, len(data), len(data))
        n = len(data)
    os.makedirs(args.out, exist_ok=True)
    logits, feats = predict_maps(model, data.images[:n])
    preds = logits.argmax(axis=1)
    cams = class_maps(model, feats, preds)
    size = data.images.shape[-2:]
    artifacts = []
    for i in range(n):
        score = upsample_cam(cams[i], *size).astype("<f4")
        box = extract_box(score, args.tau)
        stem = os.path.join(args.out, f"cam_{i:04d}")
        atomic_write(stem + ".f32", score.tobytes())
        sidecar = {
            "index": i,
            "label": int(data.labels[i]),
            "predicted": int(preds[i]),
            "class_name": data.class_names[int(preds[i])],
            "shape": list(score.shape),
            "dtype": "float32-le",
            "tau": args.tau,
            "pred_box": list(box.as_tuple()),
            "gt_box": [int(v) for v in data.boxes[i]],
        }
        atomic_write(stem + ".json", (json.dumps(sidecar, sort_keys=True) + "\n").encode())
        artifacts += [stem + ".f32", stem + ".json"]
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "cam-export", vars_of(args), "out", artifacts, started)
    return 0


def cmd_attack_demo(args) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    data = _load_split(args.data, args.split)
    n = min(args.n, len(data))
    if n < 2:
        raise ConfigError("attack-demo needs at least 2 samples (batch statistics)")
    cfg = epsilon_schedule(args.epsilon)
    x = data.images[:n]
    losses: List[float] = []
    x_adv = pgd(model, x, data.labels[:n], cfg, losses=losses)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    for name, arr in (("x", x), ("x_adv", x_adv), ("perturbation", x_adv - x)):
        path = os.path.join(args.out, f"{name}.npy")
        buf = io.BytesIO()
        np.save(buf, np.asarray(arr, dtype="<f4"))
        atomic_write(path, buf.getvalue())
        artifacts.append(path)
    info = {"epsilon": cfg.epsilon, "steps": cfg.steps, "step_size": cfg.step_size, "losses": losses,
            "linf": float(np.abs(x_adv.astype(np.float64) - x).max())}
    atomic_write(os.path.join(args.out, "attack.json"), (json.dumps(info, indent=2) + "\n").encode())
    artifacts.append(os.path.join(args.out, "attack.json"))
    write_manifest(os.path.join(args.out, MANIFEST_NAME), "attack-demo", vars_of(args), "out", artifacts, started)
    return 0


def cmd_rerun(args) -> int:
    """Replay a manifest (optionally into another output location) and compare artifact hashes."""
    with open(args.manifest) as f:
        manifest = json.load(f)
    replay = dict(manifest["args"])
    out_arg = manifest["output_arg"]
    if args.out:
        if out_arg == "out":
            replay["out"] = os.path.abspath(args.out)
        else:
            # file outputs keep their names inside the new directory
            os.makedirs(args.out, exist_ok=True)
            for key in (out_arg, "curves"):
                if replay.get(key):
                    replay[key] = os.path.join(os.path.abspath(args.out), os.path.basename(replay[key]))
    ns = argparse.Namespace(**replay)
    code = COMMANDS[manifest["command"]](ns)
    if code:
        return code
    out = replay[out_arg]
    new_manifest = os.path.join(out, MANIFEST_NAME) if os.path.isdir(out) else _file_manifest_path(out)
    with open(new_manifest) as f:
        fresh = json.load(f)
    mismatched = sorted(k for k, v in manifest["artifacts"].items() if fresh["artifacts"].get(k) != v)
    if mismatched:
        log.error("artifacts differ from the manifest: %s", ", ".join(mismatched))
        return 1
    log.info("all %d artifacts identical", len(manifest["artifacts"]))
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "cam-export": cmd_cam_export,
    "attack-demo": cmd_attack_demo,
    "rerun": cmd_rerun,
}


_PATH_ARGS = ("data", "config", "checkpoint", "out", "report", "curves")


def vars_of(args) -> Dict[str, object]:
    """Command arguments with paths made absolute, so a manifest replays from any directory."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "verbose":
            continue
        out[k] = os.path.abspath(v) if k in _PATH_ARGS and isinstance(v, str) else v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ega", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write train/val/test dataset files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=DEFAULT_SIZES["train"], help="train split size")
    g.add_argument("--val-size", type=int, default=None, help="default: size // 8")
    g.add_argument("--test-size", type=int, default=None, help="default: size // 4")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="train split file or dataset directory")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ega when present")

    e = sub.add_parser("evaluate", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("val", "test"))
    e.add_argument("--tau", type=float, default=DEFAULT_TAU)
    e.add_argument("--report", required=True)
    e.add_argument("--curves", default=None, help="optional CSV of box-accuracy and pixel PR curves")
    e.add_argument("--pxap", default="auto", choices=("auto", "yes", "no"))

    a = sub.add_parser("ablate", help="mode comparison, epsilon sweep and lambda grid")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None, help="base config; mode/epsilon/lambdas/seed are overridden")
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--sections", default="modes,epsilon,lambda")
    a.add_argument("--split", default="test", choices=("val", "test"))
    a.add_argument("--plan-only", action="store_true", help="write the grid and stop")

    c = sub.add_parser("cam-export", help="dump normalized score maps with box sidecars")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="test", choices=("val", "test"))
    c.add_argument("--n", type=int, default=16)
    c.add_argument("--tau", type=float, default=DEFAULT_TAU)
    c.add_argument("--out", required=True)

    d = sub.add_parser("attack-demo", help="export clean, adversarial and perturbation tensors")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test", choices=("val", "test"))
    d.add_argument("--epsilon", type=int, default=4)
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--out", required=True)

    r = sub.add_parser("rerun", help="replay a run manifest and verify its artifacts")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", default=None, help="write the replay here instead of over the original")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EgaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
