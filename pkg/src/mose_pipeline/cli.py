"""``mose-pipeline`` command line: datagen, train, infer, eval, ablate, describe.

Every command accepts ``--config FILE``. The file is INI-style; keys in a
section named after the command (or in ``[DEFAULT]``) are treated exactly
like the matching ``--key value`` flags, and flags given on the command
line win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .augment import DEFAULT_CLASSES, BlurConfig, filter_and_binarize, load_instance_records, merge_masks
from .data_io import load_video, save_frame, save_mask, scan_dataset, write_video
from .infer import InferConfig, infer_dataset
from .memory import MemoryConfig
from .metrics import evaluate, format_table, write_csv
from .network import NetConfig, VOSModel, describe, load_weights, save_weights
from .synthetic import toy_video
from .train import PRESETS, TrainingSources, load_checkpoint_model, train_stage

log = logging.getLogger("mose_pipeline")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2

# inference defaults per preset; toy scales are the same caps relative to 96 px clips
INFER_PRESETS = {
    "full": dict(scales="600,720,800", tmax=18, interval=1),
    "toy": dict(scales="80,96,112", tmax=18, interval=1),
}
# memory used by the single-scale ablation rows
BASELINE_MEMORY = dict(base_tmax=5, base_interval=5)


class InputError(Exception):
    """Bad or empty user input; maps to exit code 2."""


def cache_dir() -> Path:
    root = os.environ.get("MOSE_PIPELINE_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "mose_pipeline"


def sha256_file(path) -> Optional[str]:
    if path is None or not Path(path).is_file():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, args, started: str, weights=None) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k != "func" and not k.startswith("_")}
    manifest = {
        "command": args.command,
        "version": __version__,
        "config": config,
        "seed": args.seed,
        "weights_sha256": sha256_file(weights),
        "started": started,
        "finished": _now(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def parse_scales(text: str):
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if part.lower() in ("none", "full", "0"):
            out.append(None)
        elif part:
            out.append(int(part))
    if not out:
        raise InputError("empty --scales")
    return tuple(out)


def load_model(path) -> VOSModel:
    """Weights file from ``save_weights`` or a training checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"weights not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if "net_config" in blob:
        return load_checkpoint_model(path)
    return load_weights(path)


# --------------------------------------------------------------------------
# commands

def cmd_datagen(args) -> int:
    out = Path(args.out)
    kept = total = pairs = 0
    if args.toy_videos:
        for i in range(args.toy_videos):
            v = toy_video(args.seed + i, n_frames=args.toy_frames, size=(args.toy_size, args.toy_size),
                          n_objects=args.toy_objects)
            write_video(out, v)
        pairs += args.toy_videos
        print(f"wrote {args.toy_videos} synthetic sequences")
    if args.records:
        allowed = set(c.strip() for c in args.classes.split(",")) if args.classes else set(DEFAULT_CLASSES)
        records = load_instance_records(args.records)
        for image_id, (image, recs) in records.items():
            total += len(recs)
            chosen = filter_and_binarize(recs, allowed)
            kept += len(chosen)
            if not chosen:
                continue
            save_frame(image, out / "JPEGImages" / image_id / "00000.jpg")
            save_mask(merge_masks(chosen), out / "Annotations" / image_id / "00000.png")
            pairs += 1
        print(f"kept {kept} / {total}")
    if args.pool:
        index = scan_dataset(args.pool)
        for seq in index.valid:
            v = load_video(args.pool, seq.video)
            annotated = [(f, m) for f, m in zip(v.frames, v.masks) if m is not None]
            for t, (f, m) in enumerate(annotated):
                name = f"{seq.video}_{t:05d}"
                save_frame(f, out / "JPEGImages" / name / "00000.jpg")
                save_mask(m, out / "Annotations" / name / "00000.png")
                pairs += 1
    if not (args.toy_videos or args.records or args.pool):
        raise InputError("nothing to generate: pass --records, --pool or --toy-videos")
    print(f"corpus: {pairs} pairs/sequences in {out}")
    if pairs == 0:
        return EXIT_INPUT
    write_manifest(out / "manifest.json", args, args._started)
    return EXIT_OK


def _train_config(args, stage):
    over = {"seed": args.seed}
    for key in ("iters", "batch", "lr", "crop", "seq_len", "checkpoint_every"):
        value = getattr(args, key)
        if value is not None:
            over[key] = value
    if args.blur_prob is not None:
        over["blur"] = replace(BlurConfig(), probability=args.blur_prob)
    if args.hflip is not None:
        over["hflip"] = args.hflip
    if over.get("iters") is not None and stage == "main":
        base = PRESETS[args.preset](stage)
        # keep the decay points at the same fractions of the run
        scaled = {int(p * over["iters"] / base.iters) for p in base.decay_points}
        over["decay_points"] = tuple(sorted(p for p in scaled if 0 < p < over["iters"]))
    return PRESETS[args.preset](stage, **over)


def cmd_train(args) -> int:
    seed_everything(args.seed)
    data = [Path(p) for p in args.data]
    static = [Path(p) for p in (args.static or args.data)]
    for p in data + static:
        if not p.exists():
            raise InputError(f"data root not found: {p}")
    sources = TrainingSources.from_dirs(static, data)
    out = Path(args.out)
    stages = ["pretrain", "main"] if args.stage == "both" else [args.stage]
    model = load_model(args.init) if args.init else VOSModel(NetConfig())
    result = None
    for stage in stages:
        config = _train_config(args, stage)
        resume = args.resume if len(stages) == 1 else None
        result = train_stage(config, model, sources, out, resume=resume)
        first, last = result.losses[0][2], result.losses[-1][2]
        print(f"{stage}: {len(result.losses)} iters, loss {first:.4f} -> {last:.4f}, checkpoint {result.checkpoint}")
    weights = out / "weights.pt"
    save_weights(model, weights)
    print(f"weights: {weights}")
    write_manifest(out / "train_manifest.json", args, args._started, weights)
    return EXIT_OK


def _infer_config(args) -> InferConfig:
    preset = INFER_PRESETS[args.preset]
    scales = parse_scales(args.scales or preset["scales"])
    memory = MemoryConfig(t_max=args.tmax or preset["tmax"], interval=args.interval or preset["interval"])
    return InferConfig(scales=scales, flip=args.flip, memory=memory, output_root=Path(args.out))


def cmd_infer(args) -> int:
    seed_everything(args.seed)
    model = load_model(args.weights)
    config = _infer_config(args)
    done = infer_dataset(args.data, model, config, args.out, dump_probs=args.dump_probs,
                         subdir=args.subdir, jobs=args.jobs)
    print(f"segmented {len(done)} videos into {args.out}")
    write_manifest(Path(args.out) / "manifest.json", args, args._started, args.weights)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate(args.pred, args.gt, jobs=args.jobs)
    print(format_table([("result", report.J, report.F)]))
    if args.csv:
        write_csv(report, args.csv)
    if args.manifest:
        write_manifest(Path(args.manifest), args, args._started)
    return EXIT_OK


def cmd_ablate(args) -> int:
    seed_everything(args.seed)
    variants = {"Baseline": args.baseline_weights, "+DA": args.da_weights}
    for name, path in variants.items():
        if not path or not Path(path).is_file():
            raise InputError(f"missing checkpoint for variant {name}: {path}")
    out = Path(args.out) if args.out else cache_dir() / "ablate"
    gt = Path(args.gt) if args.gt else Path(args.data)
    preset = INFER_PRESETS[args.preset]
    single = InferConfig(scales=(None,), flip=False,
                         memory=MemoryConfig(t_max=args.base_tmax, interval=args.base_interval))
    full = InferConfig(scales=parse_scales(args.scales or preset["scales"]), flip=True,
                       memory=MemoryConfig(t_max=args.tmax or preset["tmax"],
                                           interval=args.interval or preset["interval"]))
    plan = [
        ("Baseline", variants["Baseline"], single),
        ("+DA", variants["+DA"], single),
        ("+DA+TTA+MS", variants["+DA"], full),
    ]
    rows = []
    for name, weights, config in plan:
        pred = out / name.replace("+", "plus_").strip("_")
        infer_dataset(args.data, load_model(weights), config, pred, jobs=args.jobs)
        report = evaluate(pred, gt, jobs=args.jobs)
        rows.append((name, report.J, report.F))
    table = format_table(rows)
    print(table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table + "\n")
    write_manifest(out / "manifest.json", args, args._started, args.da_weights)
    return EXIT_OK


def cmd_describe(args) -> int:
    model = load_model(args.weights) if args.weights else VOSModel(NetConfig())
    print(json.dumps(model.cfg.to_dict(), indent=2))
    print(describe(model))
    for stage in ("pretrain", "main"):
        print(f"{stage}: {json.dumps(asdict(PRESETS[args.preset](stage)), default=str)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _common(p):
    p.add_argument("--config", type=Path, help="INI file; [<command>] and [DEFAULT] keys act as flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker cap for videos / TTA branches")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--log-level", default="WARNING")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mose-pipeline", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="build a pretraining corpus")
    _common(p)
    p.add_argument("--records", type=Path, help="instance-record directory with manifest.json")
    p.add_argument("--classes", help="comma-separated allowed classes (default: built-in set)")
    p.add_argument("--pool", type=Path, help="extra static image-mask pool in dataset layout")
    p.add_argument("--toy-videos", type=int, default=0, help="also write N synthetic sequences")
    p.add_argument("--toy-frames", type=int, default=8)
    p.add_argument("--toy-size", type=int, default=96)
    p.add_argument("--toy-objects", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="pretrain and/or main training")
    _common(p)
    p.add_argument("--stage", choices=["pretrain", "main", "both"], default="both")
    p.add_argument("--data", action="append", required=True, help="video dataset root (repeatable)")
    p.add_argument("--static", action="append", help="static pair roots for pretraining (default: --data)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--init", type=Path, help="start from these weights")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--crop", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--blur-prob", type=float, help="0 disables the motion-blur augmentation")
    p.add_argument("--hflip", type=float, help="clip mirroring probability")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment every video of a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--subdir")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--scales", help="comma-separated max shorter sides; 'none' keeps full size")
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--tmax", type=int)
    p.add_argument("--interval", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-probs", action="store_true", help="also write <frame>.npy probability stacks")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="J, F and J&F of a prediction tree")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--csv", type=Path)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Baseline / +DA / +DA+TTA+MS table")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--gt", type=Path, help="annotation root (default: --data)")
    p.add_argument("--baseline-weights", type=Path)
    p.add_argument("--da-weights", type=Path)
    p.add_argument("--scales")
    p.add_argument("--tmax", type=int)
    p.add_argument("--interval", type=int)
    p.add_argument("--base-tmax", type=int, default=BASELINE_MEMORY["base_tmax"])
    p.add_argument("--base-interval", type=int, default=BASELINE_MEMORY["base_interval"])
    p.add_argument("--out", type=Path, help="default: $MOSE_PIPELINE_CACHE/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("describe", help="model configuration and parameter table")
    _common(p)
    p.add_argument("--weights", type=Path)
    p.set_defaults(func=cmd_describe)
    return parser


def _config_tokens(parser, argv: List[str]) -> List[str]:
    """Translate ``--config`` file entries into flag tokens placed before ``argv``'s own flags."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None or known.command is None:
        return argv
    if not known.config.is_file():
        raise InputError(f"config file not found: {known.config}")
    ini = configparser.ConfigParser()
    ini.read(known.config)
    section = ini[known.command] if ini.has_section(known.command) else ini.defaults()
    sub = parser._subparsers._group_actions[0].choices[known.command]
    actions = {a.dest: a for a in sub._actions}
    tokens = []
    for key, value in section.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest == "config":
            raise InputError(f"unknown config key {key!r} for {known.command}")
        flag = "--" + dest.replace("_", "-")
        if isinstance(action, argparse.BooleanOptionalAction):
            tokens.append(flag if ini.BOOLEAN_STATES[value.lower()] else "--no-" + flag[2:])
        elif isinstance(action, argparse._StoreTrueAction):
            if ini.BOOLEAN_STATES[value.lower()]:
                tokens.append(flag)
        elif isinstance(action, argparse._AppendAction):
            for item in value.split(","):
                tokens += [flag, item.strip()]
        else:
            tokens += [flag, value]
    i = argv.index(known.command)
    # file tokens go first so later command-line flags override them
    # (repeatable flags from the command line replace the file's list)
    user = argv[i + 1:]
    user_dests = {t[2:].split("=")[0].replace("-", "_") for t in user if t.startswith("--")}
    tokens = _drop_append(tokens, actions, user_dests)
    return argv[:i + 1] + tokens + user


def _drop_append(tokens, actions, user_dests):
    out, i = [], 0
    while i < len(tokens):
        dest = tokens[i][2:].replace("-", "_")
        action = actions.get(dest)
        if isinstance(action, argparse._AppendAction) and dest in user_dests:
            i += 2
            continue
        out.append(tokens[i])
        i += 1
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_config_tokens(parser, argv))
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args._started = _now()
    try:
        return args.func(args)
    except (InputError, ValueError, FileNotFoundError) as exc:  # DatasetError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001 - last-resort handler for the exit-code contract
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
