"""Command-line entry point: ``facerenov <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import platform
import sys
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .core import ImageError, derive_seed, load_image, save_image, image_grid
from .degrade import TASKS, task_pipeline
from .train import (
    ABLATIONS,
    Checkpoint,
    ConfigError,
    DatasetError,
    PairedDataset,
    TrainConfig,
    TrainingDiverged,
    VersionError,
    build_dataset,
    fit,
    prepare_hq,
    restore_batch,
    run_ablation,
    IMAGE_EXTS,
)

log = logging.getLogger("facerenov")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ENV_PREFIX = "FACERENOV_"
# keys understood by the commands on top of the training config
EXTRA_KEYS = {"hq_dir": str, "guide_dir": str, "out_root": str, "variants": list}
REQUIRED_KEYS = ("task", "hq_dir")


class UsageError(Exception):
    pass


class LockError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling


def _field_types() -> dict[str, Any]:
    types = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}
    types.update(EXTRA_KEYS)
    return types


def _scalar(tok: str) -> Any:
    for cast in (int, float):
        try:
            return cast(tok)
        except ValueError:
            pass
    return tok


def _coerce(key: str, raw: str) -> Any:
    """Parse a string override according to the key's declared type."""
    kind = _field_types()[key]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind in (tuple, list):
            if raw.strip().startswith("["):
                return list(json.loads(raw))
            return [_scalar(p.strip()) for p in raw.split(",")]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise UsageError(f"cannot parse {key}={raw!r} as {kind.__name__}") from exc


def load_config_file(path: str) -> dict[str, Any]:
    """Read a flat JSON object of typed keys."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a flat object of keys")
    return data


def env_overrides(environ: Mapping[str, str] = os.environ) -> dict[str, Any]:
    types = _field_types()
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            key = k[len(ENV_PREFIX):].lower()
            if key in types:
                out[key] = _coerce(key, v)
    return out


def merge_config(
    file_cfg: Mapping[str, Any],
    sets: Sequence[str] = (),
    seed: int | None = None,
    environ: Mapping[str, str] = os.environ,
    required: Sequence[str] = REQUIRED_KEYS,
) -> tuple[TrainConfig, dict[str, Any]]:
    """File keys, then ``FACERENOV_*`` environment, then ``--set``/``--seed`` flags.

    Returns the training config and the command-level extras.
    """
    types = _field_types()
    merged = dict(file_cfg)
    unknown = sorted(set(merged) - set(types))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged.update(env_overrides(environ))
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in types:
            raise UsageError(f"unknown config key in --set: {k}")
        merged[k] = _coerce(k, v)
    if seed is not None:
        merged["seed"] = seed
    missing = [k for k in required if k not in merged]
    if missing:
        raise UsageError(f"missing required config key: {', '.join(missing)}")
    extras = {k: merged.pop(k) for k in list(merged) if k in EXTRA_KEYS}
    try:
        cfg = TrainConfig.from_dict(merged)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, extras


# ---------------------------------------------------------------------------
# run directories


class RunDir:
    """Timestamped output directory holding a lockfile, the effective config and a manifest."""

    LOCK = ".lock"

    def __init__(self, path: str):
        self.path = path
        self._locked = False

    @classmethod
    def create(cls, root: str, tag: str) -> "RunDir":
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        base = os.path.join(root, f"{stamp}-{tag}")
        path, k = base, 1
        while os.path.exists(path):
            path = f"{base}-{k}"
            k += 1
        os.makedirs(path)
        return cls(path)

    def __enter__(self) -> "RunDir":
        lock = os.path.join(self.path, self.LOCK)
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise LockError(f"run directory {self.path} is locked by another writer ({lock})") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._locked = True
        return self

    def __exit__(self, *exc) -> None:
        if self._locked:
            os.remove(os.path.join(self.path, self.LOCK))
            self._locked = False

    def join(self, *parts: str) -> str:
        return os.path.join(self.path, *parts)

    def write_json(self, name: str, obj: Any) -> str:
        p = self.join(name)
        with open(p, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return p

    def write_manifest(self, command: str, argv: Sequence[str], **extra) -> None:
        import torch
        from ._backend import BACKEND

        self.write_json(
            "run_manifest.json",
            {
                "command": command,
                "argv": list(argv),
                "version": __version__,
                "python": platform.python_version(),
                "torch": torch.__version__,
                "numpy": np.__version__,
                "kernel_backend": BACKEND,
                "started": _dt.datetime.now().isoformat(timespec="seconds"),
                **extra,
            },
        )


def _latest_run(root: str, cfg: TrainConfig) -> str:
    if not os.path.isdir(root):
        raise UsageError(f"--resume: no runs under {root}")
    for name in sorted(os.listdir(root), reverse=True):
        p = os.path.join(root, name, "config.json")
        if os.path.exists(p):
            with open(p) as fh:
                echoed = json.load(fh)
            if echoed.get("config_hash") == cfg.config_hash():
                return os.path.join(root, name)
    raise UsageError(f"--resume: no run under {root} matches this configuration")


# ---------------------------------------------------------------------------
# commands


def _list_inputs(d: str) -> list[str]:
    if not os.path.isdir(d):
        raise DatasetError(f"input directory not found: {d}")
    names = sorted(n for n in os.listdir(d) if n.lower().endswith(IMAGE_EXTS))
    if not names:
        raise DatasetError(f"no PNG/JPEG images in {d}")
    return [os.path.join(d, n) for n in names]


def cmd_degrade(args) -> int:
    """Degrade every image in a directory and write ``manifest.jsonl`` next to the outputs."""
    if args.task.upper() not in TASKS:
        raise UsageError(f"--task must be one of {', '.join(TASKS)}")
    task = args.task.upper()
    srcs = _list_inputs(args.input)
    os.makedirs(args.output, exist_ok=True)
    failures = 0
    records = []
    for i, src in enumerate(srcs):
        stem = os.path.splitext(os.path.basename(src))[0]
        try:
            img = load_image(src)
            seed = derive_seed(args.seed, i)
            pipe = task_pipeline(task, seed, mosaic_block=args.mosaic_block or max(1, min(img.shape[:2]) // 32))
            out_name = f"{stem}.png"
            save_image(pipe.apply(img), os.path.join(args.output, out_name))
        except (OSError, ImageError, ValueError) as exc:
            print(f"error: {src}: {exc}", file=sys.stderr)
            failures += 1
            continue
        records.append({"index": i, "source": os.path.basename(src), "lq": out_name, "seed": seed, "task": task, "pipeline": pipe.to_record()})
    with open(os.path.join(args.output, "manifest.jsonl"), "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"degraded {len(records)}/{len(srcs)} images -> {args.output}")
    return EXIT_RUNTIME if failures else EXIT_OK


def _echo_config(run: RunDir, cfg: TrainConfig, extras: Mapping[str, Any]) -> None:
    run.write_json("config.json", {**cfg.to_dict(), **extras, "config_hash": cfg.config_hash()})


def cmd_train(args) -> int:
    cfg, extras = merge_config(load_config_file(args.config), args.set, args.seed)
    root = extras.get("out_root") or args.out_root
    run = RunDir(_latest_run(root, cfg)) if args.resume else RunDir.create(root, cfg.task.lower())
    with run:
        _echo_config(run, cfg, extras)
        run.write_manifest("train", sys.argv, config_hash=cfg.config_hash(), resume=bool(args.resume))
        ds_dir = run.join("dataset")
        if args.resume and os.path.exists(os.path.join(ds_dir, PairedDataset.MANIFEST)):
            ds = PairedDataset.load(ds_dir)
        else:
            ds = build_dataset(extras["hq_dir"], cfg, ds_dir, workers=args.workers)
        ck = fit(cfg, ds, run.path, resume=args.resume, device=args.device, guide_dir=extras.get("guide_dir"), stop_at=args.stop_at)
    print(f"run directory: {run.path}")
    print(f"trained to step {ck.step}; checkpoint {run.join('checkpoints', 'latest.ckpt')}")
    return EXIT_OK


def cmd_renovate(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    res = ck.train_config.resolution
    srcs = _list_inputs(args.input)
    imgs = np.stack([prepare_hq(load_image(p), res) for p in srcs])
    out = restore_batch(ck.generator_model(args.device), imgs, device=args.device)
    os.makedirs(args.output, exist_ok=True)
    for src, o in zip(srcs, out):
        save_image(o, os.path.join(args.output, os.path.splitext(os.path.basename(src))[0] + ".png"))
    if args.grid:
        save_image(image_grid([[a, b] for a, b in zip(imgs, out)]), args.grid)
    print(f"renovated {len(out)} images -> {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .losses import PerceptualExtractor
    from .metrics import NiqeModel, evaluate, format_table, niqe_fit
    from .train import evaluate_checkpoint

    ds = PairedDataset.load(args.dataset)
    if args.niqe_model:
        niqe_model = NiqeModel.load(args.niqe_model)
    else:
        _, _, hq = ds.load_split("TRAIN")
        niqe_model = niqe_fit(list(hq), patch=args.niqe_patch, min_images=min(100, len(hq)))
    if args.checkpoint:
        ck = Checkpoint.load(args.checkpoint)
        cfg = ck.train_config
        ext = PerceptualExtractor(cfg.perc_widths, cfg.perc_seed, cfg.perc_weights or None).double()
        rep, _ = evaluate_checkpoint(ck, ds, args.outputs, niqe_model, ext, label=args.label or cfg.ablation)
    else:
        if not args.outputs:
            raise UsageError("evaluate needs --checkpoint or --outputs")
        ext = PerceptualExtractor().double()
        rep = evaluate(ds.split("TEST"), args.outputs, niqe_model, ext, args.label or os.path.basename(os.path.normpath(args.outputs)))
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    rep.save(args.report)
    print(format_table({rep.label or "result": rep}))
    return EXIT_OK


def parse_stages(spec: str, n_stages: int) -> list[list[int] | None]:
    """``all`` / ``none`` / ``prefix`` / ``"3;3,2;0,1,2,3"`` -> list of active sets (``None`` = all)."""
    spec = spec.strip().lower()
    if spec == "all":
        return [None]
    if spec == "prefix":
        from .generator import prefix_active_sets

        return list(prefix_active_sets(n_stages))
    sets: list[list[int] | None] = []
    for part in spec.split(";"):
        part = part.strip()
        if part == "all":
            sets.append(None)
            continue
        if part in ("none", ""):
            sets.append([])
            continue
        try:
            idx = [int(t) for t in part.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad stage list {part!r}; use comma-separated integers in 0..{n_stages - 1}") from exc
        bad = [i for i in idx if not 0 <= i < n_stages]
        if bad:
            raise UsageError(f"invalid stage index {bad}; valid range is 0..{n_stages - 1}")
        sets.append(idx)
    return sets


def cmd_ablate(args) -> int:
    import torch

    from .core import to_model, from_model

    ck = Checkpoint.load(args.checkpoint)
    g = ck.generator_model(args.device)
    sets = parse_stages(args.stages, g.n_stages)
    img = prepare_hq(load_image(args.image), ck.train_config.resolution)
    x = to_model(img, dtype=next(g.parameters()).dtype).to(args.device)
    panels = []
    with torch.no_grad():
        for s in sets:
            panels.append(from_model(g(x, active=s))[0])
    row = ([img] if args.with_input else []) + panels
    save_image(image_grid([row]), args.out)
    print(f"wrote {len(panels)} panel(s) -> {args.out}")
    return EXIT_OK


def cmd_ablation_suite(args) -> int:
    cfg, extras = merge_config(load_config_file(args.config), args.set, args.seed)
    variants = [v.upper() for v in (args.variants.split(",") if args.variants else extras.get("variants") or ["DEFAULT", "FIXCONV", "L1"])]
    bad = [v for v in variants if v not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation variant(s) {bad}; choose from {', '.join(ABLATIONS)}")
    root = extras.get("out_root") or args.out_root
    run = RunDir.create(root, f"ablation-{cfg.task.lower()}")
    with run:
        _echo_config(run, cfg, {**extras, "variants": variants})
        run.write_manifest("ablation-suite", sys.argv, config_hash=cfg.config_hash(), variants=variants)
        ds = build_dataset(extras["hq_dir"], cfg, run.join("dataset"), workers=args.workers)
        run_ablation(cfg, ds, run.path, variants, device=args.device, guide_dir=extras.get("guide_dir"))
        with open(run.join("ablation_table.txt")) as fh:
            print(fh.read(), end="")
    print(f"run directory: {run.path}")
    return EXIT_OK


def cmd_make_toy_data(args) -> int:
    from .data import write_synthetic_faces

    paths = write_synthetic_faces(args.output, args.n, args.size, args.seed)
    print(f"wrote {len(paths)} images -> {args.output}")
    return EXIT_OK


def cmd_fit_niqe(args) -> int:
    from .metrics import niqe_fit

    imgs = [load_image(p) for p in _list_inputs(args.input)]
    model = niqe_fit(imgs, patch=args.patch, min_images=args.min_images)
    model.save(args.out)
    print(f"NIQE model from {len(imgs)} images -> {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-degrade a dataset's ground truth from its manifest and compare with the stored inputs."""
    ds = PairedDataset.load(args.dataset)
    mismatched = []
    for rec in ds.records:
        stored = load_image(ds.path(rec["lq"]))
        again = np.round(ds.replay(rec) * 255.0)
        if not np.array_equal(np.round(stored * 255.0), again):
            mismatched.append(rec["id"])
    if mismatched:
        print(f"{len(mismatched)} of {len(ds.records)} images differ: {', '.join(mismatched[:10])}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(ds.records)} degraded images reproduced exactly")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--device", default="cpu")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for dataset generation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="facerenov", description="Face renovation: degradation, training, inference and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("degrade", parents=[common], help="apply a task's degradation to a directory of images")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--task", required=True, help="|".join(TASKS))
    s.add_argument("--mosaic-block", type=int, default=0, help="mosaic block size (default: shorter side / 32)")
    s.set_defaults(func=cmd_degrade)

    for name, func, helptext in (
        ("train", cmd_train, "train a generator from a config file"),
        ("ablation-suite", cmd_ablation_suite, "train and score several ablation variants"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--out-root", default="runs")
        s.set_defaults(func=func)
        if name == "train":
            s.add_argument("--resume", action="store_true", help="continue the latest run with the same config")
            s.add_argument("--stop-at", type=int, default=None, help=argparse.SUPPRESS)
        else:
            s.add_argument("--variants", default="", help="comma-separated, default DEFAULT,FIXCONV,L1")

    s = sub.add_parser("renovate", parents=[common], help="restore a directory of images with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--grid", default="", help="also write a before/after grid PNG here")
    s.set_defaults(func=cmd_renovate)

    s = sub.add_parser("evaluate", parents=[common], help="score TEST-split outputs against ground truth")
    s.add_argument("--dataset", required=True, help="dataset directory with manifest.jsonl")
    s.add_argument("--checkpoint", default="")
    s.add_argument("--outputs", default="", help="directory of <id>.png outputs")
    s.add_argument("--report", required=True)
    s.add_argument("--niqe-model", default="")
    s.add_argument("--niqe-patch", type=int, default=32)
    s.add_argument("--label", default="")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="render a stage-ablation grid for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--stages", default="prefix", help="all | prefix | semicolon-separated index lists, e.g. '3;3,2;none'")
    s.add_argument("--out", required=True)
    s.add_argument("--with-input", action="store_true", help="prepend the input panel")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("make-toy-data", parents=[common], help="render procedural face images")
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_make_toy_data, seed=0)

    s = sub.add_parser("fit-niqe", parents=[common], help="fit a NIQE model to pristine images")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--patch", type=int, default=96)
    s.add_argument("--min-images", type=int, default=100)
    s.set_defaults(func=cmd_fit_niqe)

    s = sub.add_parser("replay", parents=[common], help="check a dataset manifest reproduces its degraded images")
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"facerenov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VersionError, DatasetError, LockError, TrainingDiverged, ImageError, OSError, ValueError, RuntimeError) as exc:
        print(f"facerenov: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
