"""``odin`` command line: generate data, train, evaluate and dump segmentations.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import os

# Thread caps must be in place before numpy loads its BLAS.
_THREADS = os.environ.get("ODIN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import netpbm  # noqa: E402
from .config import (  # noqa: E402
    ConfigError,
    RunConfig,
    build_config,
    flatten,
    load_config,
    parse_overrides,
)
from .data import (  # noqa: E402
    VideoConfig,
    load_dataset,
    load_video_dataset,
    write_dataset,
    write_video_dataset,
)
from .discovery import kmeans, upsample_labels  # noqa: E402
from .evaluation import merge_by_class  # noqa: E402
from .pipeline import (  # noqa: E402
    color_features,
    evaluate_discovery,
    evaluate_video,
    model_features,
    random_params,
)
from .trainer import (  # noqa: E402
    CheckpointError,
    NumericalError,
    Trainer,
    checkpoint_load,
    checkpoint_save,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
BASELINES = ("random", "oracle-color")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def config_help() -> str:
    lines = ["configuration keys (set with --set key=value or a JSON --config file):"]
    for key, value in flatten(RunConfig()).items():
        lines.append(f"  {key} = {json.dumps(value)}")
    return "\n".join(lines)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _write_report(report: dict, out: str | None) -> None:
    text = _dump(report)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _load_scenes(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError, netpbm.NetpbmError) as exc:
        raise DataError(f"cannot read scene dataset {path}: {exc}") from exc


def _load_videos(path):
    try:
        return load_video_dataset(path)
    except (OSError, ValueError, KeyError, netpbm.NetpbmError) as exc:
        raise DataError(f"cannot read video dataset {path}: {exc}") from exc


def _config(args) -> RunConfig:
    try:
        return load_config(args.config, args.set)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from exc


def _resolve_features(args):
    """(feature function, config, description) for a checkpoint path or a named baseline."""
    if args.ckpt in BASELINES:
        config = _config(args)
        if args.ckpt == "random":
            return model_features(random_params(config, config.run.seed), config), config, "random"
        return color_features(config), config, "oracle-color"
    try:
        state = checkpoint_load(args.ckpt)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint {args.ckpt}: {exc}") from exc
    config = state.config
    if args.set:
        config = build_config({**flatten(config), **parse_overrides(args.set)})
    which = args.params or config.eval.params
    return model_features(state.params(which), config), config, f"{args.ckpt}:{which}"


# -- commands ----------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    config = _config(args)
    if args.video:
        vcfg = VideoConfig(frames=args.frames, max_step_px=args.max_step, scene=config.data)
        digest = write_video_dataset(out, args.n, args.seed, vcfg)
    else:
        digest = write_dataset(out, args.n, args.seed, config.data)
    print(digest)
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        try:
            state = checkpoint_load(args.resume)
        except (OSError, CheckpointError) as exc:
            raise DataError(f"cannot read checkpoint {args.resume}: {exc}") from exc
        config = state.config
    else:
        config = _config(args)
    _, scenes = _load_scenes(args.data)
    if not scenes:
        raise DataError(f"{args.data} has no images")
    trainer = Trainer(config, [s.image for s in scenes], state)
    every = config.run.checkpoint_every
    mode = "a" if args.resume else "w"
    started = time.perf_counter()
    with open(out / "metrics.jsonl", mode, encoding="utf-8") as log:

        def on_step(metrics):
            log.write(json.dumps(metrics, sort_keys=True) + "\n")
            step = trainer.state.step
            if every > 0 and step % every == 0 and step < config.optim.total_steps:
                checkpoint_save(trainer.state, out / f"step_{step:06d}.odin")
            if not args.quiet and (step % 50 == 0 or step == config.optim.total_steps):
                loss = metrics["loss"]
                shown = "skipped" if loss is None else f"{loss:.4f}"
                print(f"step {step} loss {shown} lr {metrics['lr']:.4g}", file=sys.stderr)

        trainer.run(on_step=on_step)
    checkpoint_save(trainer.state, out / "final.odin")
    if not args.quiet:
        print(f"done in {time.perf_counter() - started:.1f}s -> {out / 'final.odin'}", file=sys.stderr)
    return EXIT_OK


def _parse_ks(text: str | None):
    if text is None:
        return None
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError as exc:
        raise UsageError(f"--Ks must be comma-separated integers, got {text!r}") from exc
    if not ks or min(ks) < 1:
        raise UsageError("--Ks needs at least one positive K")
    return ks


def _ground_truth_proposals(scene) -> np.ndarray:
    """Instance masks plus per-class unions, so every score should come out 1."""
    merged = merge_by_class(scene.instance_masks, scene.class_ids)
    return np.concatenate([scene.instance_masks, merged])


def cmd_eval_discovery(args) -> int:
    fn, config, source = _resolve_features(args)
    ks = _parse_ks(args.Ks)
    if ks is not None:
        config = build_config({**flatten(config), "eval.Ks": list(ks)})
    ids, scenes = _load_scenes(args.data)
    override = _ground_truth_proposals if args.self_test else None
    try:
        report = evaluate_discovery(fn, scenes, config, ids, override)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    report["checkpoint"] = source
    report["params"] = args.params or config.eval.params
    if args.csv:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "abo_i", "abo_c", "or", "num_gt"])
        for row in report["per_image"]:
            writer.writerow([row["id"], row["abo_i"], row["abo_c"], row["or"], row["num_gt"]])
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
    _write_report(report, args.out)
    return EXIT_OK


def cmd_eval_video(args) -> int:
    fn, config, source = _resolve_features(args)
    ids, videos = _load_videos(args.data)
    report = evaluate_video(fn, videos, config, ids)
    report["checkpoint"] = source
    _write_report(report, args.out)
    return EXIT_OK


PALETTE = np.random.default_rng(0xC0102).random((256, 3)) * 0.8 + 0.2


def colorize(labels: np.ndarray) -> np.ndarray:
    out = PALETTE[np.asarray(labels) % 256]
    out[np.asarray(labels) == 0] = 0.0
    return out


def cmd_dump_segments(args) -> int:
    fn, config, _ = _resolve_features(args)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    ids, scenes = _load_scenes(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, scene in list(zip(ids, scenes))[: args.limit]:
        feats = fn(scene.image)
        grid = kmeans(feats, min(args.k, feats.shape[0] * feats.shape[1]), seed=0).labels
        labels = upsample_labels(grid, scene.image.shape[:2])
        netpbm.write_labelmap(out / f"{sid}.pgm", labels)
        panel = np.concatenate([scene.image, colorize(scene.labels), colorize(labels + 1)], axis=1)
        netpbm.write_image(out / f"{sid}_panel.ppm", panel)
    print(str(out))
    return EXIT_OK


SWEEP_RATES = ("discrete", 1e-2, 1e-3, 1e-4)


def run_sweep(config: RunConfig, images, eval_scenes, Ks, steps: int, progress=None) -> list[dict]:
    """Train one model per (K, discovery schedule) cell and score its discovery pyramid."""
    rows = []
    for K in Ks:
        for rate in SWEEP_RATES:
            flat = {**flatten(config), "discovery.K": K, "optim.total_steps": steps}
            if rate == "discrete":
                flat["discovery.schedule"] = "discrete"
            else:
                flat.update({"discovery.schedule": "continuous", "discovery.rate": rate})
            cfg = build_config(flat)
            trainer = Trainer(cfg, images)
            trainer.run()
            means = evaluate_discovery(model_features(trainer.state.online, cfg), eval_scenes, cfg)["means"]
            row = {"K": K, "schedule": "discrete" if rate == "discrete" else f"rate={rate:g}", **means}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def sweep_table(rows: list[dict]) -> str:
    lines = ["| K | schedule | ABO^i | ABO^c | OR |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['K']} | {r['schedule']} | {r['abo_i']:.3f} | {r['abo_c']:.3f} | {r['or']:.3f} |")
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    config = _config(args)
    _, scenes = _load_scenes(args.data)
    _, eval_scenes = _load_scenes(args.eval_data) if args.eval_data else (None, scenes)
    Ks = _parse_ks(args.Ks)
    steps = args.steps or config.optim.total_steps

    def progress(row):
        print(f"K={row['K']} {row['schedule']}: ABO {row['abo_i']:.3f} OR {row['or']:.3f}", file=sys.stderr)

    rows = run_sweep(config, [s.image for s in scenes], eval_scenes, Ks, steps, progress)
    table = sweep_table(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(_dump({"steps": steps, "rows": rows}) + "\n", encoding="utf-8")
        (out / "sweep.md").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="odin", description=__doc__, epilog=config_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=config_help(), formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    def config_opts(p):
        p.add_argument("--config", help="JSON config file with dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = add("generate", "write a synthetic scene or video dataset", cmd_generate)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--video", action="store_true")
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--max-step", type=int, default=2, help="largest per-frame object displacement in pixels")
    p.add_argument("--force", action="store_true")
    config_opts(p)

    p = add("train", "train the online, target and discovery networks", cmd_train)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a checkpoint (its config is used)")
    p.add_argument("--quiet", action="store_true")
    config_opts(p)

    def ckpt_opts(p):
        p.add_argument("--ckpt", required=True, help="checkpoint path, 'random' or 'oracle-color'")
        p.add_argument("--data", required=True)
        p.add_argument("--params", choices=("online", "target", "teacher"))
        p.add_argument("--out", help="also write the JSON report here")
        config_opts(p)

    p = add("eval-discovery", "score proposal pyramids against ground-truth masks", cmd_eval_discovery)
    ckpt_opts(p)
    p.add_argument("--Ks", help="comma-separated pyramid levels, e.g. 1,2,4")
    p.add_argument("--self-test", action="store_true", help="use ground truth as proposals")
    p.add_argument("--csv", help="write per-image rows as CSV")

    p = add("eval-video", "propagate first-frame labels and score J/F", cmd_eval_video)
    ckpt_opts(p)

    p = add("dump-segments", "write k-means label maps and image|truth|segments panels", cmd_dump_segments)
    ckpt_opts(p)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--limit", type=int, default=None)

    p = add("sweep", "K x discovery-schedule ablation table", cmd_sweep)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--Ks", default="8,16,32")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    config_opts(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        problems = getattr(exc, "problems", [str(exc)])
        for problem in problems:
            print(f"odin: error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"odin: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"odin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
