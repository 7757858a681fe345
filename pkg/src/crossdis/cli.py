"""Command-line front door: ``crossdis <command> ...``.

Every invocation creates a fresh run directory ``<out>/<timestamp>-<command>/``
holding ``manifest.json`` and the command's artifacts. Exit codes: 0 success,
1 usage error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, datagen
from . import evaluate as ev
from .losses import TrainingDivergence
from .model import CheckpointMismatch, load_checkpoint
from .training import (ABLATION_TITLES, ABLATIONS, PRESETS, AblationFlags, TrainConfig,
                       load_config_file, train)

log = logging.getLogger("crossdis")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DIRECTIONS = {"cd2cb": "X", "cb2cd": "Y"}
DOMAIN_ALIASES = {"X": "X", "Y": "Y", "cd": "X", "cb": "Y"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return dt.datetime.now().isoformat(timespec="seconds")


def new_run_dir(out: str, command: str) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{stamp}-{command}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def write_manifest(run_dir: Path, command: str, argv: list, config: dict, seed: int,
                   started: str, artifacts: dict, status: str = "ok") -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "code_version": code_version(),
        "started": started,
        "finished": _now(),
        "status": status,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


# --------------------------------------------------------------------------
# train config resolution

def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), help="ablation variant")
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int, dest="train_count", help="number of training pairs")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--n-critic", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--lambda-grl", type=float)
    p.add_argument("--w-gan", type=float)
    p.add_argument("--w-ex", type=float)
    p.add_argument("--w-l1", type=float)
    p.add_argument("--lambda-gp", type=float)
    p.add_argument("--dataset", dest="dataset_ref", help="'mnist-cdcb', an mnist.npz, or a paired directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any TrainConfig key")


FLAG_KEYS = ("epochs", "train_count", "batch_size", "learning_rate", "n_critic", "resolution",
             "lambda_grl", "w_gan", "w_ex", "w_l1", "lambda_gp", "dataset_ref")


def resolve_train_config(args) -> TrainConfig:
    cfg = PRESETS[args.preset]
    try:
        if args.config:
            cfg = load_config_file(args.config, cfg)
        overrides = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k, None) is not None}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            try:
                overrides[key] = json.loads(value)
            except json.JSONDecodeError:
                overrides[key] = value
        overrides["seed"] = args.seed
        cfg = TrainConfig.from_flat_dict(overrides, cfg)
        if args.ablation:
            cfg = replace(cfg, ablation=AblationFlags(**ABLATIONS[args.ablation]))
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg


# --------------------------------------------------------------------------
# commands

def cmd_datagen(args, run_dir: Path) -> dict:
    if args.preset != "mnist-cdcb":
        raise UsageError(f"unknown dataset preset {args.preset!r}")
    splits = ["train", "test"] if args.split == "both" else [args.split]
    artifacts = {}
    for name in splits:
        split = datagen.mnist_cdcb(name, args.seed, args.count, args.resolution, args.mnist)
        artifacts[name] = datagen.export_split(split, run_dir / "dataset" / name)
    return artifacts


def cmd_train(args, run_dir: Path) -> dict:
    cfg = resolve_train_config(args)
    args.resolved_config = cfg.to_flat_dict()
    ckpt = train(cfg, run_dir, resume=args.resume)
    return {"checkpoint": ckpt, "metrics": run_dir / "metrics.jsonl", "summary": run_dir / "summary.json"}


def _test_split(args, resolution: int) -> datagen.DatasetSplit:
    ref = args.dataset
    if ref == "mnist-cdcb" or (ref.endswith(".npz") and Path(ref).is_file()):
        mnist = None if ref == "mnist-cdcb" else ref
        return datagen.mnist_cdcb("test", args.data_seed, args.count, resolution, mnist)
    split = datagen.load_paired_directory(ref, resolution)
    return split.subset(args.count) if args.count else split


def _load_model(path, args):
    expected = None
    if getattr(args, "config", None):
        expected = load_config_file(args.config).arch()
    model, header, _ = load_checkpoint(path, expected)
    return model, header


def cmd_eval(args, run_dir: Path) -> dict:
    model, header = _load_model(args.checkpoint, args)
    split = _test_split(args, model.cfg.resolution)
    if len(split) == 0:
        raise UsageError("evaluation split is empty")
    figures = run_dir / "figures"
    metrics = {"subcommand": args.sub, "checkpoint": str(args.checkpoint),
               "training_step": header.get("training_step")}
    artifacts = {}
    X, Y, labels = split.images("X"), split.images("Y"), split.labels
    imgs = {"X": X, "Y": Y}

    if args.sub == "samples":
        d = DOMAIN_ALIASES[args.domain]
        rows, divs = [], []
        for i in range(min(args.rows, len(split))):
            samples = ev.sample_translations(model, imgs[d][i], d, args.n, args.seed + i)
            rows.append([imgs[d][i]] + samples)
            divs.append(ev.diversity(samples))
        metrics["mean_pairwise_distance"] = float(np.mean(divs))
        artifacts["grid"] = ev.save_grid(rows, figures / "samples.png")
    elif args.sub == "analogy":
        d = DOMAIN_ALIASES[args.domain]
        q, r = ev.analogy_pairs(len(split), args.rows, args.seed)
        out = ev.visual_analogy(model, imgs[d][q], imgs[d][r], d)
        truth = ev.analogy_ground_truth(split, q, r, d)
        rows = [[imgs[d][a], imgs[d][b], o, t] for a, b, o, t in zip(q, r, out, truth)]
        metrics["distance_x1e-2"] = (ev.image_distance(out, truth) * 100).tolist()
        artifacts["grid"] = ev.save_grid(rows, figures / "analogy.png")
    elif args.sub == "interpolate":
        d = DOMAIN_ALIASES[args.domain]
        rng = np.random.default_rng(args.seed)
        rows = []
        for _ in range(args.rows):
            a, b = rng.choice(len(split), 2, replace=False)
            rows.append(ev.interpolate(model, imgs[d][a], imgs[d][b], d, args.part, args.steps))
        artifacts["grid"] = ev.save_grid(rows, figures / f"interpolate_{args.part}.png")
    elif args.sub == "retrieve":
        d = DIRECTIONS[args.direction]
        src, dst = (X, Y) if d == "X" else (Y, X)
        res = ev.cross_domain_retrieval(model, src, dst, d, args.features, labels, labels, k=args.k)
        metrics.update(res.to_dict(), direction=args.direction, n_queries=len(split))
    elif args.sub == "retrieve-mixed":
        d = DOMAIN_ALIASES[args.domain]
        res = ev.mixed_domain_retrieval(model, imgs[d], d, X, Y, args.features, args.k, labels, labels, labels)
        metrics.update(res.to_dict(), query_domain=d)
    elif args.sub == "analogy-bench":
        for d, name in (("Y", "MNIST-CB"), ("X", "MNIST-CD")):
            metrics[name] = ev.analogy_benchmark(model, split, d, args.pairs, args.seed).to_dict()
    elif args.sub == "grl-probe":
        if not args.without:
            raise UsageError("grl-probe needs --without CHECKPOINT (trained with disable_grl)")
        other_model, other_header = _load_model(args.without, args)
        cfg_with = TrainConfig.from_flat_dict(header["train_config"]) if "train_config" in header else None
        cfg_without = (TrainConfig.from_flat_dict(other_header["train_config"])
                       if "train_config" in other_header else None)
        for d in ("X", "Y"):
            metrics[d] = ev.grl_probe(model, other_model, imgs[d], labels, d, cfg_with, cfg_without)
    path = run_dir / "metrics.json"
    path.write_text(json.dumps(metrics, indent=1))
    print(json.dumps(metrics, indent=1))
    artifacts["metrics"] = path
    return artifacts


def cmd_ablation_suite(args, run_dir: Path) -> dict:
    base = resolve_train_config(args)
    args.resolved_config = base.to_flat_dict()
    names = list(ABLATIONS) if not args.variants else args.variants.split(",")
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown ablation variants {unknown}; choose from {list(ABLATIONS)}")
    test = datagen.mnist_cdcb("test", args.data_seed, args.count, base.resolution,
                              None if base.dataset_ref == "mnist-cdcb" else base.dataset_ref)
    scores, artifacts = {}, {}
    for name in names:
        cfg = replace(base, ablation=AblationFlags(**ABLATIONS[name]))
        sub = run_dir / name
        try:
            ckpt = train(cfg, sub)
            model, _, _ = load_checkpoint(ckpt)
            scores[name] = {d: ev.analogy_benchmark(model, test, d, args.pairs, args.seed) for d in ("Y", "X")}
            artifacts[name] = ckpt
        except TrainingDivergence as exc:
            log.error("variant %s diverged: %s", name, exc)
            scores[name] = {"error": str(exc)}
    table = run_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Dataset"] + [ABLATION_TITLES[n] for n in ABLATIONS])
        for d, label in (("Y", "MNIST-CB"), ("X", "MNIST-CD")):
            row = [label]
            for n in ABLATIONS:
                s = scores.get(n)
                if s is None:
                    row.append("")
                elif "error" in s:
                    row.append("diverged")
                else:
                    row.append(f"{s[d].mean_distance:.1f} ± {s[d].std_distance:.1f}")
            w.writerow(row)
    artifacts["table"] = table
    print(table.read_text())
    return artifacts


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crossdis", description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs", help="root for run directories")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--verbose", action="store_true")
    # the global options are also accepted after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--out", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", parents=[common], help="synthesize the paired MNIST-CD/CB dataset")
    p.add_argument("--preset", default="mnist-cdcb")
    p.add_argument("--count", type=int)
    p.add_argument("--split", choices=["train", "test", "both"], default="train")
    p.add_argument("--resolution", type=int, default=datagen.DEFAULT_RESOLUTION)
    p.add_argument("--mnist", help="Keras-style mnist.npz for the full 50K/10K splits")

    p = sub.add_parser("train", parents=[common], help="train one model")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("sub", choices=["samples", "analogy", "interpolate", "retrieve", "retrieve-mixed",
                                   "analogy-bench", "grl-probe"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="training config the checkpoint must match")
    p.add_argument("--dataset", default="mnist-cdcb")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--count", type=int, help="number of test pairs")
    p.add_argument("--domain", choices=sorted(DOMAIN_ALIASES), default="X")
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default="cd2cb")
    p.add_argument("--features", choices=ev.FEATURE_KINDS, default="shared")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--part", choices=["shared", "exclusive"], default="exclusive")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--without", help="grl-probe: checkpoint trained with disable_grl")

    p = sub.add_parser("ablation-suite", parents=[common], help="train all ablation variants and score analogies")
    _add_train_flags(p)
    p.add_argument("--variants", help="comma-separated subset of variants")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--count", type=int, help="number of test pairs")

    p = sub.add_parser("rerun", parents=[common], help="repeat a run from its manifest")
    p.add_argument("manifest")
    return parser


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval,
            "ablation-suite": cmd_ablation_suite}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "rerun":
            manifest = json.loads(Path(args.manifest).read_text())
            return main(manifest["argv"])
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = _now()
    run_dir = new_run_dir(args.out, args.command if args.command != "eval" else f"eval-{args.sub}")
    status, code, artifacts = "ok", EXIT_OK, {}
    try:
        artifacts = COMMANDS[args.command](args, run_dir)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        status, code = f"usage error: {exc}", EXIT_USAGE
    except CheckpointMismatch as exc:
        print(f"version error: {exc}", file=sys.stderr)
        status, code = f"version error: {exc}", EXIT_RUNTIME
    except TrainingDivergence as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        status, code = f"divergence: {exc}", EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, code = f"error: {exc}", EXIT_RUNTIME
    config = getattr(args, "resolved_config", {k: v for k, v in vars(args).items() if k != "func"})
    write_manifest(run_dir, args.command, argv, config, args.seed, started, artifacts, status)
    return code


if __name__ == "__main__":
    sys.exit(main())
