"""Paired-data construction, adversarial training, checkpointing and the ablation harness."""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .core import derive_seed, load_image, make_rng, quantize, resize_bicubic, save_image, from_model, to_model
from .degrade import DegradationPipeline, DegradationRanges, Kind, task_pipeline, TASKS
from .discriminator import MultiScaleDiscriminator
from .generator import Generator
from .losses import (
    LossWeights,
    PerceptualExtractor,
    feature_matching_loss,
    l1_pixel_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    perceptual_loss,
    total_g_loss,
)
from .metrics import MetricReport, NiqeModel, niqe_fit, psnr, score_images, ssim

__all__ = [
    "MODEL_CODE_VERSION",
    "ABLATIONS",
    "TrainConfig",
    "ConfigError",
    "VersionError",
    "DatasetError",
    "TrainingDiverged",
    "PairedDataset",
    "build_dataset",
    "build_models",
    "Trainer",
    "Checkpoint",
    "fit",
    "read_curve",
    "renovate_images",
    "evaluate_checkpoint",
    "run_ablation",
]

log = logging.getLogger(__name__)

MODEL_CODE_VERSION = "csr-gan-1"
ABLATIONS = ("DEFAULT", "FIXCONV", "L1", "GUIDANCE_16XFACE", "SPADE")
L1_ABLATION_WEIGHT = 10.0
IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class ConfigError(ValueError):
    pass


class VersionError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else v


@dataclass(frozen=True)
class TrainConfig:
    task: str = "RENOVATION"
    resolution: int = 64
    n_stages: int = 4
    channels: tuple[int, ...] = (64, 128, 256, 512)
    spade_hidden: int = 64
    activation: str = "sigmoid"
    d_scales: int = 2
    d_widths: tuple[int, ...] = (64, 128, 256)
    d_instance_norm: bool = False
    perc_widths: tuple[int, ...] = (32, 64, 128, 128)
    perc_seed: int = 1234
    perc_weights: str = ""
    batch_size: int = 8
    steps: int = 2000
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.9
    seed: int = 0
    lambda_fm: float = 10.0
    lambda_perc: float = 10.0
    l1_weight: float = 0.0
    ablation: str = "DEFAULT"
    mosaic_block: int = 0
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    val_every: int = 250
    ckpt_every: int = 250
    niqe_patch: int = 32
    deg_sigma: tuple[float, float] = (0.5, 3.0)
    deg_motion_length: tuple[int, int] = (3, 9)
    deg_down_factors: tuple[int, ...] = (2, 4)
    deg_noise_level: tuple[float, float] = (0.02, 0.12)
    deg_jpeg_quality: tuple[int, int] = (10, 60)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            object.__setattr__(self, f.name, _tuple(getattr(self, f.name)))
        object.__setattr__(self, "task", self.task.upper())
        object.__setattr__(self, "ablation", self.ablation.upper())
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if len(self.channels) != self.n_stages:
            raise ConfigError(f"channels has {len(self.channels)} entries but n_stages = {self.n_stages}")
        if self.resolution % (2**self.n_stages):
            raise ConfigError(f"resolution {self.resolution} is not divisible by 2**n_stages = {2**self.n_stages}")
        if not (self.lr_g > 0 and self.lr_d > 0):
            raise ConfigError(f"learning rates must be positive, got lr_g={self.lr_g}, lr_d={self.lr_d}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        LossWeights(self.lambda_fm, self.lambda_perc)
        if self.l1_weight < 0:
            raise ConfigError("l1_weight must be >= 0")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_fm, self.lambda_perc)

    @property
    def effective_l1_weight(self) -> float:
        if self.ablation == "L1":
            return self.l1_weight or L1_ABLATION_WEIGHT
        return self.l1_weight

    @property
    def effective_mosaic_block(self) -> int:
        return self.mosaic_block or max(1, self.resolution // 32)

    @property
    def ranges(self) -> DegradationRanges:
        return DegradationRanges(
            sigma=self.deg_sigma,
            sigma_max=max(self.deg_sigma),
            motion_length=self.deg_motion_length,
            down_factors=self.deg_down_factors,
            noise_level=self.deg_noise_level,
            jpeg_quality=self.deg_jpeg_quality,
        )

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v, tuple) else v) for f, v in ((f, getattr(self, f.name)) for f in dataclasses.fields(self))}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def arch_hash(self) -> str:
        """Hash of everything that determines parameter shapes, plus the code version."""
        keys = ("resolution", "n_stages", "channels", "spade_hidden", "activation", "d_scales", "d_widths", "d_instance_norm", "ablation")
        blob = json.dumps({"code": MODEL_CODE_VERSION, **{k: self.to_dict()[k] for k in keys}}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        blob = json.dumps({"code": MODEL_CODE_VERSION, **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data


def _list_images(d: str) -> list[str]:
    if not os.path.isdir(d):
        raise DatasetError(f"not a directory: {d}")
    names = sorted(n for n in os.listdir(d) if n.lower().endswith(IMAGE_EXTS))
    if not names:
        raise DatasetError(f"no PNG/JPEG images in {d}")
    return [os.path.join(d, n) for n in names]


def prepare_hq(img: np.ndarray, resolution: int) -> np.ndarray:
    """Center-crop to a square, resize to ``resolution``, force RGB, quantize to 8 bits."""
    h, w = img.shape[:2]
    s = min(h, w)
    y0, x0 = (h - s) // 2, (w - s) // 2
    img = img[y0 : y0 + s, x0 : x0 + s]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if s != resolution:
        img = resize_bicubic(img, size=(resolution, resolution))
    return quantize(img) / 255.0


def _pipeline_for(cfg: TrainConfig, seed: int) -> DegradationPipeline:
    return task_pipeline(cfg.task, seed, cfg.ranges, mosaic_block=cfg.effective_mosaic_block)


def _make_pair(args) -> dict:
    idx, src, root, cfg_dict = args
    cfg = TrainConfig.from_dict(cfg_dict)
    img_id = f"{idx:05d}_{os.path.splitext(os.path.basename(src))[0]}"
    seed = derive_seed(cfg.seed, idx)
    hq = prepare_hq(load_image(src), cfg.resolution)
    pipe = _pipeline_for(cfg, seed)
    lq = pipe.apply(hq)
    hq_rel, lq_rel = os.path.join("hq", f"{img_id}.png"), os.path.join("lq", f"{img_id}.png")
    save_image(hq, os.path.join(root, hq_rel))
    save_image(lq, os.path.join(root, lq_rel))
    return {"id": img_id, "index": idx, "source": os.path.basename(src), "hq": hq_rel, "lq": lq_rel, "seed": seed, "pipeline": pipe.to_record()}


@dataclass
class PairedDataset:
    """Manifest-backed (lq, hq) pairs with a fixed TRAIN/VAL/TEST split."""

    root: str
    records: list[dict]
    task: str = ""

    MANIFEST = "manifest.jsonl"

    def __post_init__(self):
        self._accessed: set[str] = set()

    def split(self, name: str) -> list[dict]:
        name = name.upper()
        out = [dict(r, hq_path=self.path(r["hq"]), lq_path=self.path(r["lq"])) for r in self.records if r["split"] == name]
        return out

    def path(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def load_split(self, name: str) -> tuple[list[str], np.ndarray, np.ndarray]:
        """``(ids, lq, hq)`` arrays ``(N, H, W, 3)`` for one split."""
        recs = self.split(name)
        self._accessed.add(name.upper())
        if not recs:
            return [], np.zeros((0,)), np.zeros((0,))
        lq = np.stack([load_image(r["lq_path"]) for r in recs])
        hq = np.stack([load_image(r["hq_path"]) for r in recs])
        return [r["id"] for r in recs], lq, hq

    @property
    def accessed_splits(self) -> set[str]:
        return set(self._accessed)

    def replay(self, record: Mapping) -> np.ndarray:
        """Re-degrade the stored ground truth from the recorded pipeline."""
        hq = load_image(self.path(record["hq"]))
        return DegradationPipeline.from_record(record["pipeline"]).apply(hq)

    @classmethod
    def load(cls, root: str) -> "PairedDataset":
        path = os.path.join(root, cls.MANIFEST)
        if not os.path.exists(path):
            raise DatasetError(f"no manifest at {path}")
        with open(path) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        return cls(root, recs, recs[0].get("task", "") if recs else "")

    def manifest_hash(self) -> str:
        return ckpt_io.sha256_file(os.path.join(self.root, self.MANIFEST))


def _assign_splits(n: int, cfg: TrainConfig) -> list[str]:
    n_test = int(round(n * cfg.test_fraction))
    n_val = int(round(n * cfg.val_fraction))
    if n >= 3:
        n_test, n_val = max(n_test, 1), max(n_val, 1)
    perm = make_rng(derive_seed(cfg.seed, 0x5911)).permutation(n)
    split = ["TRAIN"] * n
    for k, i in enumerate(perm):
        if k < n_test:
            split[i] = "TEST"
        elif k < n_test + n_val:
            split[i] = "VAL"
    return split


def build_dataset(hq_dir: str, cfg: TrainConfig, out_dir: str, workers: int = 1) -> PairedDataset:
    """Degrade every image in ``hq_dir`` for ``cfg.task`` and write a manifest.

    Per-image seeds are ``derive_seed(cfg.seed, index)`` so output does not
    depend on ``workers``.
    """
    srcs = _list_images(hq_dir)
    os.makedirs(os.path.join(out_dir, "hq"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "lq"), exist_ok=True)
    jobs = [(i, s, out_dir, cfg.to_dict()) for i, s in enumerate(srcs)]
    if workers > 1:
        with cf.ProcessPoolExecutor(workers) as ex:
            recs = list(ex.map(_make_pair, jobs, chunksize=8))
    else:
        recs = [_make_pair(j) for j in jobs]
    for rec, sp in zip(recs, _assign_splits(len(recs), cfg)):
        rec["split"] = sp
        rec["task"] = cfg.task
    with open(os.path.join(out_dir, PairedDataset.MANIFEST), "w") as fh:
        for rec in recs:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return PairedDataset(out_dir, recs, cfg.task)


# ---------------------------------------------------------------------------
# models and training


def build_models(cfg: TrainConfig, dtype=torch.float32):
    """Generator, discriminator and frozen perceptual extractor, seeded from ``cfg.seed``."""
    torch.manual_seed(derive_seed(cfg.seed, 0xA11) & 0x7FFF_FFFF_FFFF_FFFF)
    mode = "image" if cfg.ablation in ("GUIDANCE_16XFACE", "SPADE") else "encoder"
    g = Generator(
        cfg.resolution,
        cfg.channels,
        adaptive=cfg.ablation != "FIXCONV",
        activation=cfg.activation,
        guidance_mode=mode,
        spade_hidden=cfg.spade_hidden,
    )
    d = MultiScaleDiscriminator(cfg.d_scales, 3, cfg.d_widths, cfg.d_instance_norm)
    p = PerceptualExtractor(cfg.perc_widths, cfg.perc_seed, cfg.perc_weights or None)
    return g.to(dtype), d.to(dtype), p.to(dtype)


def _grad_norms(module: torch.nn.Module) -> dict[str, float]:
    return {n: float(p.grad.norm()) for n, p in module.named_parameters() if p.grad is not None}


class Trainer:
    """Owns models, optimizers and the batch RNG; one :meth:`train_step` = one D then one G update."""

    def __init__(self, cfg: TrainConfig, device: str = "cpu", dump_dir: str | None = None):
        self.cfg = cfg
        self.device = torch.device(device)
        self.g, self.d, self.p = (m.to(self.device) for m in build_models(cfg))
        self.opt_g = torch.optim.Adam(self.g.parameters(), lr=cfg.lr_g, betas=(float(cfg.beta1), float(cfg.beta2)))
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=cfg.lr_d, betas=(float(cfg.beta1), float(cfg.beta2)))
        self.rng = make_rng(derive_seed(cfg.seed, 0xBA7C))
        self.step = 0
        self.dump_dir = dump_dir

    # -- batches
    def sample_indices(self, n: int) -> np.ndarray:
        return self.rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)

    def _tensors(self, lq: np.ndarray, hq: np.ndarray, guide: np.ndarray | None = None):
        t = lambda a: to_model(a).to(self.device)  # noqa: E731
        return t(lq), t(hq), (t(guide) if guide is not None else None)

    def _check(self, losses: dict[str, torch.Tensor], which: str) -> None:
        bad = {k: v.item() for k, v in losses.items() if not torch.isfinite(v)}
        if not bad:
            return
        dump = {
            "step": self.step,
            "phase": which,
            "losses": {k: v.item() for k, v in losses.items()},
            "grad_norms": {"g": _grad_norms(self.g), "d": _grad_norms(self.d)},
        }
        if self.dump_dir:
            os.makedirs(self.dump_dir, exist_ok=True)
            with open(os.path.join(self.dump_dir, f"diverged_step{self.step}.json"), "w") as fh:
                json.dump(dump, fh, indent=1, sort_keys=True, default=str)
        raise TrainingDiverged(f"non-finite loss at step {self.step} ({which}): {bad}", dump)

    def train_step(self, lq: np.ndarray, hq: np.ndarray, guide: np.ndarray | None = None) -> dict[str, float]:
        """One discriminator update followed by one generator update on a ``[0, 1]`` batch."""
        x, y, gd = self._tensors(lq, hq, guide)
        cfg = self.cfg
        self.g.train()
        self.d.train()

        # discriminator
        with torch.no_grad():
            fake = self.g(x, gd)
        self.d.requires_grad_(True)
        d_real = self.d(y)
        d_fake = self.d(fake)
        loss_d = lsgan_d_loss([o[0] for o in d_real], [o[0] for o in d_fake])
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self._check({"d": loss_d}, "discriminator")
        self.opt_d.step()

        # generator
        self.d.requires_grad_(False)
        fake = self.g(x, gd)
        d_fake = self.d(fake)
        with torch.no_grad():
            d_real = self.d(y)
        parts = {
            "gan": lsgan_g_loss([o[0] for o in d_fake]),
            "fm": feature_matching_loss([o[1][:-1] for o in d_real], [o[1][:-1] for o in d_fake]),
            "perc": perceptual_loss(y, fake, self.p),
            "l1": l1_pixel_loss(y, fake),
        }
        total = total_g_loss(parts, cfg.loss_weights, cfg.effective_l1_weight)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self._check({**parts, "total": total}, "generator")
        self.opt_g.step()
        self.d.requires_grad_(True)
        self.step += 1
        return {"d": loss_d.item(), "g_total": total.item(), **{f"g_{k}": v.item() for k, v in parts.items()}}

    # -- inference
    def restore(self, lq: np.ndarray, guide: np.ndarray | None = None, batch: int = 32) -> np.ndarray:
        return restore_batch(self.g, lq, guide, batch, self.device)

    # -- state
    def state(self) -> "Checkpoint":
        return Checkpoint(
            step=self.step,
            config=self.cfg.to_dict(),
            generator={k: v.clone() for k, v in self.g.state_dict().items()},
            discriminator={k: v.clone() for k, v in self.d.state_dict().items()},
            opt_g=self.opt_g.state_dict(),
            opt_d=self.opt_d.state_dict(),
            rng_state=self.rng.bit_generator.state,
        )

    def load_state(self, ck: "Checkpoint") -> None:
        if ck.config_hash != self.cfg.config_hash():
            raise VersionError("checkpoint was written with a different training config")
        self.g.load_state_dict(ck.generator)
        self.d.load_state_dict(ck.discriminator)
        self.opt_g.load_state_dict(ck.opt_g)
        self.opt_d.load_state_dict(ck.opt_d)
        self.rng.bit_generator.state = ck.rng_state
        self.step = ck.step


def restore_batch(g: Generator, lq: np.ndarray, guide: np.ndarray | None = None, batch: int = 32, device="cpu") -> np.ndarray:
    """Run the generator over ``(N, H, W, 3)`` ``[0, 1]`` inputs."""
    g.eval()
    dtype = next(g.parameters()).dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(lq), batch):
            x = to_model(lq[i : i + batch], dtype=dtype).to(device)
            gd = to_model(guide[i : i + batch], dtype=dtype).to(device) if guide is not None else None
            outs.append(from_model(g(x, gd)))
    return np.concatenate(outs) if outs else np.zeros((0,) + tuple(lq.shape[1:]))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    step: int
    config: dict
    generator: dict
    discriminator: dict
    opt_g: dict
    opt_d: dict
    rng_state: dict
    model_version: str = MODEL_CODE_VERSION
    config_hash: str = ""
    arch_hash: str = ""

    def __post_init__(self):
        cfg = TrainConfig.from_dict(self.config)
        self.config_hash = self.config_hash or cfg.config_hash()
        self.arch_hash = self.arch_hash or cfg.arch_hash()

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def to_bytes(self) -> bytes:
        return ckpt_io.encode(dataclasses.asdict(self))

    @classmethod
    def from_bytes(cls, data: bytes, check: bool = True) -> "Checkpoint":
        d = ckpt_io.decode(data)
        ck = cls(**d)
        if check:
            ck.verify()
        return ck

    def verify(self) -> None:
        """Refuse checkpoints whose hashes do not match this code version."""
        cfg = TrainConfig.from_dict(self.config)
        if self.model_version != MODEL_CODE_VERSION:
            raise VersionError(f"checkpoint model version {self.model_version!r} != code version {MODEL_CODE_VERSION!r}")
        if self.arch_hash != cfg.arch_hash() or self.config_hash != cfg.config_hash():
            raise VersionError("checkpoint config hash does not match its embedded config for this code version")

    def save(self, path: str | os.PathLike) -> None:
        ckpt_io.write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike, check: bool = True) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), check)

    def generator_model(self, device: str = "cpu") -> Generator:
        g, _, _ = build_models(self.train_config)
        g.load_state_dict(self.generator)
        return g.to(device).eval()


# ---------------------------------------------------------------------------
# fit


def _load_guides(dataset: PairedDataset, split: str, guide_dir: str | None) -> np.ndarray | None:
    if not guide_dir:
        return None
    recs = dataset.split(split)
    out = []
    for r in recs:
        stem = os.path.splitext(r["source"])[0]
        cands = [os.path.join(guide_dir, stem + e) for e in IMAGE_EXTS]
        path = next((c for c in cands if os.path.exists(c)), None)
        if path is None:
            raise DatasetError(f"no guidance map for {r['source']} in {guide_dir}")
        out.append(prepare_hq(load_image(path), r_res(dataset, r)))
    return np.stack(out) if out else None


def r_res(dataset: PairedDataset, rec: Mapping) -> int:
    return load_image(dataset.path(rec["hq"])).shape[0]


def _append_lines(path: str, recs: Iterable[dict]) -> None:
    with open(path, "a") as fh:
        for r in recs:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _truncate_curve(path: str, step: int) -> None:
    if not os.path.exists(path):
        return
    with open(path) as fh:
        keep = [line for line in fh if line.strip() and json.loads(line)["step"] <= step]
    with open(path, "w") as fh:
        fh.writelines(keep)


def validate(trainer: Trainer, lq: np.ndarray, hq: np.ndarray, guide=None) -> dict[str, float]:
    if len(lq) == 0:
        return {}
    out = trainer.restore(lq, guide)
    return {
        "psnr": float(np.mean([psnr(o, h) for o, h in zip(out, hq)])),
        "ssim": float(np.mean([ssim(o, h) for o, h in zip(out, hq)])),
    }


def fit(
    cfg: TrainConfig,
    dataset: PairedDataset,
    run_dir: str,
    *,
    resume: bool = False,
    device: str = "cpu",
    guide_dir: str | None = None,
    stop_at: int | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> Checkpoint:
    """Train for ``cfg.steps`` steps, validating and checkpointing periodically.

    Writes ``curves.jsonl`` (one ``train`` record per step, ``val`` records at
    validation points) and ``checkpoints/latest.ckpt`` plus
    ``checkpoints/step_XXXXXX.ckpt`` under ``run_dir``.  With ``resume`` the
    latest checkpoint is loaded and the curve continues from its step.
    ``stop_at`` ends the run early (after checkpointing), to simulate an
    interruption.
    """
    if cfg.ablation == "SPADE" and not guide_dir:
        raise ConfigError("the SPADE ablation needs precomputed guidance maps (guide_dir)")
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    curve = os.path.join(run_dir, "curves.jsonl")
    latest = os.path.join(run_dir, "checkpoints", "latest.ckpt")
    trainer = Trainer(cfg, device, dump_dir=run_dir)
    if resume:
        if not os.path.exists(latest):
            raise FileNotFoundError(f"--resume given but no checkpoint at {latest}")
        trainer.load_state(Checkpoint.load(latest))
        _truncate_curve(curve, trainer.step)
        log.info("resumed from step %d", trainer.step)
    elif os.path.exists(curve):
        os.remove(curve)

    _, lq_tr, hq_tr = dataset.load_split("TRAIN")
    _, lq_va, hq_va = dataset.load_split("VAL")
    if len(lq_tr) == 0:
        raise DatasetError("TRAIN split is empty")
    gd_tr = _load_guides(dataset, "TRAIN", guide_dir) if cfg.ablation == "SPADE" else None
    gd_va = _load_guides(dataset, "VAL", guide_dir) if cfg.ablation == "SPADE" else None

    def checkpoint() -> Checkpoint:
        ck = trainer.state()
        data = ck.to_bytes()
        ckpt_io.write_atomic(os.path.join(run_dir, "checkpoints", f"step_{trainer.step:06d}.ckpt"), data)
        ckpt_io.write_atomic(latest, data)
        return ck

    if trainer.step == 0:
        _append_lines(curve, [{"type": "val", "step": 0, **validate(trainer, lq_va, hq_va, gd_va)}])
    end = cfg.steps if stop_at is None else min(cfg.steps, stop_at)
    t0 = time.time()
    while trainer.step < end:
        idx = trainer.sample_indices(len(lq_tr))
        losses = trainer.train_step(lq_tr[idx], hq_tr[idx], gd_tr[idx] if gd_tr is not None else None)
        recs = [{"type": "train", "step": trainer.step, **losses}]
        if trainer.step % cfg.val_every == 0 or trainer.step == cfg.steps:
            recs.append({"type": "val", "step": trainer.step, **validate(trainer, lq_va, hq_va, gd_va)})
        _append_lines(curve, recs)
        if progress is not None:
            progress(trainer.step, losses)
        if trainer.step % cfg.ckpt_every == 0 and trainer.step < end:
            checkpoint()
        if trainer.step % 50 == 0:
            log.info("step %d/%d %.2fs/step %s", trainer.step, cfg.steps, (time.time() - t0) / 50, losses)
            t0 = time.time()
    return checkpoint()


def read_curve(run_dir: str, kind: str = "train") -> list[dict]:
    with open(os.path.join(run_dir, "curves.jsonl")) as fh:
        return [r for r in map(json.loads, fh) if r["type"] == kind]


# ---------------------------------------------------------------------------
# inference / evaluation helpers


def renovate_images(ck: Checkpoint, images: Sequence[np.ndarray], device: str = "cpu") -> list[np.ndarray]:
    """Restore arbitrary images: each is center-cropped/resized to the working resolution."""
    g = ck.generator_model(device)
    res = ck.train_config.resolution
    prepared = np.stack([prepare_hq(im, res) for im in images])
    return list(restore_batch(g, prepared, device=device))


def fit_niqe_on_split(dataset: PairedDataset, split: str, patch: int) -> NiqeModel:
    _, _, hq = dataset.load_split(split)
    return niqe_fit(list(hq), patch=patch, min_images=min(100, len(hq)))


def evaluate_checkpoint(
    ck: Checkpoint,
    dataset: PairedDataset,
    out_dir: str | None = None,
    niqe_model: NiqeModel | None = None,
    extractor: PerceptualExtractor | None = None,
    guide_dir: str | None = None,
    label: str = "",
) -> tuple[MetricReport, MetricReport]:
    """Restore the TEST split and score it; also scores the degraded inputs for reference.

    Returns ``(model_report, input_report)``.
    """
    cfg = ck.train_config
    ids, lq, hq = dataset.load_split("TEST")
    guide = _load_guides(dataset, "TEST", guide_dir) if cfg.ablation == "SPADE" else None
    out = restore_batch(ck.generator_model(), lq, guide)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for i, o in zip(ids, out):
            save_image(o, os.path.join(out_dir, f"{i}.png"))
        # score what was written, so file-based and in-memory evaluation agree
        out = np.stack([load_image(os.path.join(out_dir, f"{i}.png")) for i in ids])
    extractor = extractor or PerceptualExtractor(cfg.perc_widths, cfg.perc_seed, cfg.perc_weights or None).double()
    rep = score_images({i: (o, h) for i, o, h in zip(ids, out, hq)}, extractor, niqe_model, label or cfg.ablation)
    inp = score_images({i: (l, h) for i, l, h in zip(ids, lq, hq)}, extractor, niqe_model, "degraded input")
    return rep, inp


def run_ablation(
    cfg: TrainConfig,
    dataset: PairedDataset,
    out_root: str,
    variants: Sequence[str] = ("DEFAULT", "FIXCONV", "L1"),
    *,
    device: str = "cpu",
    guide_dir: str | None = None,
) -> dict[str, MetricReport]:
    """Train each variant with identical data, seeds and schedule; score the TEST split.

    Writes ``<out_root>/<variant>/`` run directories, ``ablation.jsonl`` and
    ``ablation_table.txt`` (one row per metric, one column per variant).
    """
    from .metrics import format_metric_columns

    os.makedirs(out_root, exist_ok=True)
    niqe_model = fit_niqe_on_split(dataset, "TRAIN", cfg.niqe_patch)
    extractor = PerceptualExtractor(cfg.perc_widths, cfg.perc_seed, cfg.perc_weights or None).double()
    reports: dict[str, MetricReport] = {}
    for v in variants:
        vcfg = cfg.replace(ablation=v)
        run_dir = os.path.join(out_root, v.lower())
        ck = fit(vcfg, dataset, run_dir, device=device, guide_dir=guide_dir)
        rep, _ = evaluate_checkpoint(ck, dataset, os.path.join(run_dir, "test_outputs"), niqe_model, extractor, guide_dir, v)
        rep.save(os.path.join(run_dir, "report.jsonl"))
        reports[v] = rep
    with open(os.path.join(out_root, "ablation.jsonl"), "w") as fh:
        for v, rep in reports.items():
            fh.write(json.dumps({"variant": v, "metrics": {k: m for k, (m, _) in rep.aggregate.items()}}, sort_keys=True) + "\n")
    table = format_metric_columns(reports, metrics=("psnr", "ssim", "ms_ssim", "frechet_feature_distance", "niqe"))
    with open(os.path.join(out_root, "ablation_table.txt"), "w") as fh:
        fh.write(table + "\n")
    return reports
