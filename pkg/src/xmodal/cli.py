"""Command-line surface: generate, train, eval, ablate, report.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort.  Every
run writes a manifest naming its inputs and outputs with content hashes;
manifests are the only artifacts that differ between identical runs.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from .data import (
    ClipGeometry,
    SamplerConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError, TrainingDiverged, XmodalError
from .evaluate import (
    ABLATION_ARMS,
    ProbeConfig,
    center_frame,
    crossmodal_retrieval,
    linear_probe,
    load_report,
    run_ablation,
    saliency,
    save_report,
)
from .model import init_model, load_checkpoint
from .report import render_report, save_saliency
from .trainer import (
    LOSS_MODES,
    TrainingConfig,
    read_metrics,
    train,
    write_metrics,
)

_TRAIN_DEFAULTS = TrainingConfig()
_SAMPLER_DEFAULTS = SamplerConfig()
_GEOMETRY_DEFAULTS = ClipGeometry()

# argparse dest -> TrainingConfig field
_TRAIN_FLAGS = {
    "mode": "loss_mode",
    "iters": "total_iterations",
    "tuples": "B",
    "lr": "lr_initial",
    "lr_drop_factor": "lr_drop_factor",
    "lr_drop_iteration": "lr_drop_iteration",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "epsilon": "epsilon",
    "loss_weights": "loss_weights",
    "distance": "distance",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
    "concat_hidden": "concat_hidden",
}
_SAMPLER_FLAGS = {
    "crop_size": "crop_size",
    "magnitude_weighting": "magnitude_weighting",
    "random_crop": "random_crop",
    "horizontal_flip": "horizontal_flip",
    "temporal_flip": "temporal_flip",
    "channel_split": "channel_split",
    "mean_subtract_sod": "mean_subtract_sod",
}


def tool_version() -> str:
    try:
        return metadata.version("xmodal")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(path: Path, command: str, config: dict, inputs, outputs,
                   started: float) -> None:
    """Hashes are taken from the files as they exist right now."""
    manifest = {
        "tool": "xmodal",
        "version": tool_version(),
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _env_seed():
    raw = os.environ.get("XMODAL_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"XMODAL_SEED must be an integer, got {raw!r}") from e


def _apply_known(target: dict, updates: dict, where: str):
    for key, value in updates.items():
        if key not in target:
            raise ConfigError(f"unknown config key {key!r} in {where}")
        target[key] = value


def training_config_from_args(args) -> TrainingConfig:
    """Precedence: flags over config file over XMODAL_SEED over defaults."""
    base = asdict(_TRAIN_DEFAULTS)
    sampler = base.pop("sampler")
    env = _env_seed()
    if env is not None:
        base["seed"] = env
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold an object")
        _apply_known(sampler, loaded.pop("sampler", {}), str(config_path))
        _apply_known(base, loaded, str(config_path))
    for dest, field_name in _TRAIN_FLAGS.items():
        if hasattr(args, dest):
            base[field_name] = getattr(args, dest)
    for dest, field_name in _SAMPLER_FLAGS.items():
        if hasattr(args, dest):
            sampler[field_name] = getattr(args, dest)
    base["loss_weights"] = tuple(base["loss_weights"])
    config = TrainingConfig(**base, sampler=SamplerConfig(**sampler))
    config.validate()
    return config


def add_training_flags(parser: argparse.ArgumentParser) -> None:
    d = _TRAIN_DEFAULTS
    s = _SAMPLER_DEFAULTS
    sup = argparse.SUPPRESS
    parser.add_argument("--config", metavar="JSON",
                        help="JSON config file; flags override its values")
    parser.add_argument("--mode", default=sup, choices=LOSS_MODES,
                        help=f"training objective (default {d.loss_mode})")
    parser.add_argument("--iters", default=sup, type=int,
                        help=f"training iterations (default {d.total_iterations})")
    parser.add_argument("--tuples", default=sup, type=int,
                        help=f"tuples per batch, 2x this many clips "
                             f"(default {d.B})")
    parser.add_argument("--lr", default=sup, type=float,
                        help=f"initial learning rate (default {d.lr_initial})")
    parser.add_argument("--lr-drop-factor", default=sup, type=float,
                        help=f"one-time lr multiplier (default {d.lr_drop_factor})")
    parser.add_argument("--lr-drop-iteration", default=sup, type=int,
                        help=f"iteration of the lr drop "
                             f"(default {d.lr_drop_iteration})")
    parser.add_argument("--momentum", default=sup, type=float,
                        help=f"SGD momentum (default {d.momentum})")
    parser.add_argument("--weight-decay", default=sup, type=float,
                        help=f"decay on weight matrices (default {d.weight_decay})")
    parser.add_argument("--epsilon", default=sup, type=float,
                        help=f"cosine stabilizer in the loss (default {d.epsilon})")
    parser.add_argument("--loss-weights", default=sup, type=float, nargs=2,
                        metavar=("W_CROSS", "W_DIV"),
                        help=f"objective weights (default {d.loss_weights[0]:g} "
                             f"{d.loss_weights[1]:g})")
    parser.add_argument("--distance", default=sup,
                        choices=("cosine", "euclidean"),
                        help=f"training distance (default {d.distance})")
    parser.add_argument("--seed", default=sup, type=int,
                        help=f"init and sampling seed (default {d.seed}, "
                             f"or XMODAL_SEED)")
    parser.add_argument("--checkpoint-every", default=sup, type=int,
                        help=f"periodic checkpoint interval, 0 disables "
                             f"(default {d.checkpoint_every})")
    parser.add_argument("--concat-hidden", default=sup, type=int,
                        help=f"hidden width of the concat head "
                             f"(default {d.concat_hidden})")
    parser.add_argument("--crop-size", default=sup, type=int,
                        help=f"square crop fed to the encoders "
                             f"(default {s.crop_size})")
    parser.add_argument("--no-magnitude-weighting", dest="magnitude_weighting",
                        default=sup, action="store_false",
                        help=f"uniform window sampling "
                             f"(default weighting {s.magnitude_weighting})")
    parser.add_argument("--no-random-crop", dest="random_crop", default=sup,
                        action="store_false",
                        help=f"centered crops only (default random "
                             f"{s.random_crop})")
    parser.add_argument("--no-horizontal-flip", dest="horizontal_flip",
                        default=sup, action="store_false",
                        help=f"disable mirror augmentation "
                             f"(default {s.horizontal_flip})")
    parser.add_argument("--temporal-flip", default=sup, action="store_true",
                        help=f"enable time-reversal augmentation "
                             f"(default {s.temporal_flip})")
    parser.add_argument("--no-channel-split", dest="channel_split",
                        default=sup, action="store_false",
                        help=f"keep all color channels "
                             f"(default split {s.channel_split})")
    parser.add_argument("--mean-subtract-sod", default=sup,
                        action="store_true",
                        help=f"zero-mean the difference stack "
                             f"(default {s.mean_subtract_sod})")


def add_probe_flags(parser: argparse.ArgumentParser) -> None:
    d = ProbeConfig()
    parser.add_argument("--test-fraction", type=float,
                        default=d.test_fraction,
                        help=f"held-out clip fraction (default {d.test_fraction})")
    parser.add_argument("--probe-epochs", type=int, default=d.max_epochs,
                        help=f"probe optimizer cap (default {d.max_epochs})")
    parser.add_argument("--probe-seed", type=int, default=d.seed,
                        help=f"probe split seed (default {d.seed})")


def probe_config_from_args(args) -> ProbeConfig:
    return ProbeConfig(
        max_epochs=args.probe_epochs,
        test_fraction=args.test_fraction,
        seed=args.probe_seed,
    )


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    started = time.monotonic()
    seed = args.seed
    if seed is None:
        env = _env_seed()
        seed = 0 if env is None else env
    geometry = ClipGeometry(
        height=args.height,
        width=args.width,
        frame_count=args.frames,
        shape_classes=args.shape_classes,
        motion_classes=args.motion_classes,
    )
    dataset = generate_dataset(args.clips, seed=seed, geometry=geometry)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise ConfigError(f"output directory {out.parent} does not exist")
    save_dataset(dataset, out)
    config = {"clips": args.clips, "seed": seed, "geometry": asdict(geometry)}
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "generate",
                   config, inputs=[], outputs=[out], started=started)
    print(f"wrote {len(dataset)} clips to {out}")
    return 0


def _train_progress(total):
    def report(record):
        it = record.iteration
        if it == total - 1 or (it + 1) % 500 == 0:
            print(
                f"iteration {it + 1}/{total}  loss {record.loss_total:.4f}  "
                f"spread {record.feature_spread:.3f}",
                flush=True,
            )

    return report


def cmd_train(args) -> int:
    started = time.monotonic()
    data_path = Path(args.data)
    dataset = load_dataset(data_path)
    config = training_config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = (config.sampler.crop_size, config.sampler.crop_size)
    model = init_model(seed=config.seed, input_size=size)
    records, head = train(dataset, model, config, checkpoint_dir=out,
                          progress=_train_progress(config.total_iterations))
    metrics_path = out / "metrics.csv"
    write_metrics(records, metrics_path)
    outputs = [metrics_path, out / "model_final.xmck"]
    if head is not None:
        outputs.append(out / "head_final.xmck")
    write_manifest(out / "manifest.json", "train", asdict(config),
                   inputs=[data_path], outputs=outputs, started=started)
    final = f"final loss {records[-1].loss_total:.4f}" if records else "no steps"
    print(f"trained {config.total_iterations} iterations ({final}); "
          f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    started = time.monotonic()
    data_path = Path(args.data)
    ckpt_path = Path(args.checkpoint)
    dataset = load_dataset(data_path)
    model = load_checkpoint(ckpt_path)
    probe_config = probe_config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["xmodal-eval v1"]
    for task in ("shape_class", "motion_class"):
        for modality in ("rgb", "sod"):
            r = linear_probe(model, dataset, task, modality, probe_config)
            lines.append(
                f"probe task={r.task} modality={r.modality} "
                f"accuracy={r.accuracy!r} n_train={r.n_train} "
                f"n_test={r.n_test} seed={r.seed}"
            )
            print(lines[-1])
    retrieval = crossmodal_retrieval(model, dataset, args.k)
    lines.append(
        f"retrieval k={retrieval.k} n={retrieval.n} "
        f"rgb_to_sod={retrieval.recall_rgb_to_sod!r} "
        f"sod_to_rgb={retrieval.recall_sod_to_rgb!r}"
    )
    print(lines[-1])
    eval_path = out / "eval.txt"
    eval_path.write_text("\n".join(lines) + "\n")
    outputs = [eval_path]
    if args.saliency_clip is not None:
        matches = np.flatnonzero(dataset.clip_ids == args.saliency_clip)
        if len(matches) == 0:
            raise ConfigError(
                f"clip id {args.saliency_clip} not in {data_path}"
            )
        pair = dataset.pair(int(matches[0]), center_frame(dataset))
        sal = saliency(model, pair, args.top_n, guided=args.guided)
        pgm, raw = save_saliency(sal, out / f"saliency_{args.saliency_clip}")
        outputs.extend([pgm, raw])
    config = {
        "k": args.k,
        "probe": asdict(probe_config),
        "saliency_clip": args.saliency_clip,
        "top_n": args.top_n,
        "guided": args.guided,
    }
    write_manifest(out / "manifest.json", "eval", config,
                   inputs=[data_path, ckpt_path], outputs=outputs,
                   started=started)
    return 0


def cmd_ablate(args) -> int:
    started = time.monotonic()
    data_path = Path(args.data)
    dataset = load_dataset(data_path)
    config = training_config_from_args(args)
    probe_config = probe_config_from_args(args)
    arms = tuple(args.arms.split(",")) if args.arms else ABLATION_ARMS
    for arm in arms:
        if arm not in ABLATION_ARMS:
            raise ConfigError(
                f"unknown arm {arm!r}; valid arms: {', '.join(ABLATION_ARMS)}"
            )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = run_ablation(dataset, config, probe_config, arms=arms,
                          sweep=args.sweep, progress=lambda m: print(m, flush=True))
    report_path = out / "ablation.txt"
    save_report(report, report_path)
    failed = [a.arm for a in report.arms if a.failed]
    status = f"{len(failed)} arm(s) failed: {', '.join(failed)}" if failed \
        else "all arms completed"
    print(f"{status}; report at {report_path}")
    write_manifest(out / "manifest.json", "ablate",
                   {"training": asdict(config), "probe": asdict(probe_config),
                    "arms": list(arms), "sweep": args.sweep},
                   inputs=[data_path], outputs=[report_path], started=started)
    return 0


def cmd_report(args) -> int:
    started = time.monotonic()
    ablation_path = Path(args.ablation)
    report = load_report(ablation_path)
    records = read_metrics(Path(args.metrics)) if args.metrics else None
    written = render_report(report, args.out_dir, records)
    sys.stdout.write((Path(args.out_dir) / "report.txt").read_text())
    inputs = [ablation_path] + ([Path(args.metrics)] if args.metrics else [])
    write_manifest(Path(args.out_dir) / "manifest.json", "report",
                   {"ablation": str(ablation_path),
                    "metrics": args.metrics},
                   inputs=inputs, outputs=written, started=started)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmodal",
        description="Two-stream cross-modal representation learning on "
                    "synthetic moving-shape clips.",
    )
    parser.add_argument("--version", action="version",
                        version=f"xmodal {tool_version()}")
    sub = parser.add_subparsers(dest="command", required=True)
    g = _GEOMETRY_DEFAULTS

    p = sub.add_parser("generate", help="render a labeled synthetic dataset")
    p.add_argument("--clips", type=int, required=True,
                   help="number of clips (>= 2)")
    p.add_argument("--seed", type=int, default=None,
                   help="generator seed (default 0, or XMODAL_SEED)")
    p.add_argument("-o", "--out", required=True, help="output dataset file")
    p.add_argument("--frames", type=int, default=g.frame_count,
                   help=f"frames per clip (default {g.frame_count})")
    p.add_argument("--height", type=int, default=g.height,
                   help=f"frame height (default {g.height})")
    p.add_argument("--width", type=int, default=g.width,
                   help=f"frame width (default {g.width})")
    p.add_argument("--shape-classes", type=int, default=g.shape_classes,
                   help=f"distinct shapes (default {g.shape_classes})")
    p.add_argument("--motion-classes", type=int, default=g.motion_classes,
                   help=f"distinct directions (default {g.motion_classes})")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="pretrain the two encoder streams")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("-o", "--out-dir", required=True,
                   help="directory for checkpoint, metrics, manifest")
    add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval",
                       help="probe, retrieval, and saliency on a checkpoint")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("-o", "--out-dir", required=True, help="output directory")
    p.add_argument("--k", type=int, default=1,
                   help="retrieval neighborhood size (default 1)")
    add_probe_flags(p)
    p.add_argument("--saliency-clip", type=int, default=None,
                   help="clip id to render a saliency map for")
    p.add_argument("--top-n", type=int, default=100,
                   help="strongest final-conv activations to sum (default 100)")
    p.add_argument("--guided", action="store_true",
                   help="zero negative gradients at ReLUs in backward")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and probe every objective arm")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("-o", "--out-dir", required=True, help="output directory")
    add_training_flags(p)
    add_probe_flags(p)
    p.add_argument("--arms", default=None,
                   help="comma-separated subset of "
                        f"{','.join(ABLATION_ARMS)} (default all)")
    p.add_argument("--sweep", action="store_true",
                   help="also sweep loss weights (2,1) (1,1) (1,2)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render tables and figures")
    p.add_argument("--ablation", required=True, help="ablation report file")
    p.add_argument("--metrics", default=None,
                   help="metrics CSV for training curves")
    p.add_argument("-o", "--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        if e.last_record is not None:
            print(f"last record: {e.last_record}", file=sys.stderr)
        return 3
    except (XmodalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
