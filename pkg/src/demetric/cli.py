"""Command-line surface: gen-data, train, eval, attend, gradcheck.

Exit codes: 0 success, 1 usage error (bad arguments, unknown config
keys, missing files), 2 runtime failure.  Every run writes a
``manifest.json`` echoing the fully resolved configuration into its
output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (GlyphSpec, default_split, generate_dataset, load_dataset,
                   read_image, save_dataset, verify_split, write_pgm)
from .errors import ConfigError, DatasetError, FormatError, ParameterError, SplitDesignError
from .evaluate import evaluate_zero_shot
from .gradcheck import run_suite
from .model import BackboneConfig, DecoupledNet, ModelConfig
from .train import TrainConfig, train_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_MODEL_KEYS = {
    "I": int,
    "J": int,
    "d": int,
    "share_fnet_across_scales": None,  # bool, parsed specially
    "use_cam": None,
}
_TRAIN_KEYS = {
    "base_lr": float,
    "learner_lr_multiplier": float,
    "weight_decay": float,
    "lambda0": float,
    "lambda1": float,
    "lambda2": float,
    "alpha": float,
    "beta": float,
    "gamma_neg": float,
    "T": int,
    "iterations": int,
    "m": int,
    "k": int,
    "seed": int,
    "eval_every": int,
}


def _parse_bool(raw: str, key: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes"):
        return True
    if lowered in ("0", "false", "no"):
        return False
    raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")


def parse_config_file(path) -> dict[str, str]:
    """Read `key=value` lines; `#` starts a comment, blanks are skipped."""
    entries: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def build_configs(entries: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Resolve a flat key=value mapping into model and train configs."""
    known = set(_MODEL_KEYS) | set(_TRAIN_KEYS)
    unknown = sorted(set(entries) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    model_kwargs = {}
    train_kwargs = {}
    for key, raw in entries.items():
        if key in _MODEL_KEYS:
            conv = _MODEL_KEYS[key]
            model_kwargs[key] = _parse_bool(raw, key) if conv is None else conv(raw)
        else:
            try:
                train_kwargs[key] = _TRAIN_KEYS[key](raw)
            except ValueError:
                raise ConfigError(f"key {key!r} got non-numeric value {raw!r}")
    train_cfg = TrainConfig(**train_kwargs)
    model_cfg = ModelConfig(walk_steps=train_cfg.T, **model_kwargs)
    return model_cfg, train_cfg


def _write_manifest(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "demetric", "version": __version__, "command": command}
    manifest.update(payload)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# subcommands ----------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    spec = GlyphSpec(slots=args.slots, values=args.values, noise=args.noise,
                     jitter=args.jitter, cluster_jitter=args.cluster_jitter)
    split = default_split(spec)
    verify_split(split, spec)
    class_ids = list(split.seen) + list(split.unseen)
    dataset = generate_dataset(spec, per_class=args.per_class, seed=args.seed,
                               class_ids=class_ids)
    out = Path(args.out_dir)
    save_dataset(dataset, split, out)
    _write_manifest(out, "gen-data", {
        "spec": asdict(spec),
        "per_class": args.per_class,
        "seed": args.seed,
        "seen_classes": list(split.seen),
        "unseen_classes": list(split.unseen),
        "images": len(dataset),
    })
    print(f"wrote {len(dataset)} images to {out}")
    return 0


def _cmd_train(args) -> int:
    entries = parse_config_file(args.config)
    model_cfg, train_cfg = build_configs(entries)
    dataset, split = load_dataset(args.data)
    seen_set = set(split.seen)
    train_data = dataset.subset(seen_set)
    if len(train_data) == 0:
        raise DatasetError(f"no seen-class images found under {args.data}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = DecoupledNet(model_cfg, BackboneConfig(), seed=train_cfg.seed)

    metrics_rows: list[list] = []

    def eval_hook(step: int) -> None:
        unseen = dataset.subset(set(split.unseen))
        report = evaluate_zero_shot(model, unseen.images, unseen.labels,
                                    ks=(1, 2, 4, 8), seen_class_ids=split.seen)
        row = [step] + [report.recalls[k] for k in (1, 2, 4, 8)]
        row += [report.per_root_recall1[i] for i in range(model_cfg.I)]
        metrics_rows.append(row)

    hook = eval_hook if train_cfg.eval_every else None
    train_model(model, train_data, train_cfg, log_path=out / "training_log.csv",
                eval_hook=hook)
    model.save(out / "model.ckpt")
    if metrics_rows:
        with open(out / "metrics.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "R@1", "R@2", "R@4", "R@8"]
                            + [f"root{i}_R@1" for i in range(model_cfg.I)])
            writer.writerows(metrics_rows)
    _write_manifest(out, "train", {
        "config": {**asdict(model_cfg), **asdict(train_cfg)},
        "data": str(args.data),
        "checkpoint": str(out / "model.ckpt"),
    })
    print(f"saved checkpoint to {out / 'model.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    ks = [int(k) for k in args.ks.split(",") if k]
    if not ks:
        raise UsageError("--ks needs at least one value")
    model = DecoupledNet.load(args.checkpoint)
    dataset, split = load_dataset(args.data)
    unseen = dataset.subset(set(split.unseen))
    if len(unseen) == 0:
        raise DatasetError(f"no unseen-class images found under {args.data}")
    report = evaluate_zero_shot(model, unseen.images, unseen.labels, ks=ks,
                                seen_class_ids=split.seen)
    print("K,recall")
    for k in ks:
        print(f"{k},{report.recalls[k]:.6f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "recall.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["K", "recall"])
        for k in ks:
            writer.writerow([k, f"{report.recalls[k]:.6f}"])
        for i, r in report.per_root_recall1.items():
            writer.writerow([f"root{i}@1", f"{r:.6f}"])
    _write_manifest(out, "eval", {
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "ks": ks,
        "recalls": {str(k): report.recalls[k] for k in ks},
        "per_root_recall1": {str(i): r for i, r in report.per_root_recall1.items()},
    })
    return 0


def _cmd_attend(args) -> int:
    model = DecoupledNet.load(args.checkpoint)
    image = read_image(args.image)
    info = model.attend(image.data[None])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    proposal_files = []
    for i, proposal in enumerate(info["proposals"]):
        name = f"proposal_scale{i}.pgm"
        write_pgm(proposal.mass, out / name)
        proposal_files.append(name)
    with open(out / "gates.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scale", "branch", "channel", "gate"])
        for i, per_scale in enumerate(info["gates"]):
            for j, gates in enumerate(per_scale):
                for c, g in enumerate(gates):
                    writer.writerow([i, j, c, f"{g:.8f}"])
    _write_manifest(out, "attend", {
        "checkpoint": str(args.checkpoint),
        "image": str(args.image),
        "proposals": proposal_files,
        "boxes": [{"center_row": b.center_row, "center_col": b.center_col, "side": b.side}
                  for b in info["boxes"]],
    })
    print(f"wrote {len(proposal_files)} proposal maps and gates.csv to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    failures = 0
    print("operation,max_rel_err,tolerance,status")
    for name, err, tol in results:
        ok = err < tol
        failures += 0 if ok else 1
        print(f"{name},{err:.3e},{tol:.1e},{'ok' if ok else 'FAIL'}")
    out = Path(args.out)
    _write_manifest(out, "gradcheck", {
        "seed": args.seed,
        "results": {name: {"max_rel_err": err, "tolerance": tol} for name, err, tol in results},
        "failures": failures,
    })
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 2
    return 0


# entry point -----------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="demetric",
                     description="decoupled attention embeddings for zero-shot retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic glyph dataset")
    p.add_argument("out_dir")
    p.add_argument("--slots", type=int, default=4)
    p.add_argument("--values", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--cluster-jitter", type=int, default=0)
    p.add_argument("--per-class", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="recall table of a checkpoint on the unseen split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ks", default="1,2,4,8")
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("attend", help="export attention proposals and gate vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attend)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, FormatError, ParameterError, SplitDesignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
