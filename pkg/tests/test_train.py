import json
import os

import numpy as np
import pytest
import torch

from facerenov.checkpoint import CheckpointFormatError, decode, encode
from facerenov.data import write_synthetic_faces
from facerenov.degrade import Kind
from facerenov.train import (
    Checkpoint,
    ConfigError,
    DatasetError,
    PairedDataset,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    VersionError,
    build_dataset,
    fit,
    read_curve,
    run_ablation,
)

TINY = dict(
    resolution=32,
    n_stages=2,
    channels=(8, 8),
    spade_hidden=8,
    d_scales=2,
    d_widths=(8, 8),
    perc_widths=(4, 8),
    batch_size=4,
    val_every=5,
    ckpt_every=5,
    niqe_patch=16,
)


@pytest.fixture(scope="module")
def hq_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("hq")
    write_synthetic_faces(d, 12, 40, seed=3)
    return str(d)


def _cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(resolution=30)
    with pytest.raises(ConfigError):
        _cfg(lr_g=0.0)
    with pytest.raises(ConfigError):
        _cfg(task="NOPE")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = _cfg(ablation="l1")
    assert cfg.ablation == "L1" and cfg.effective_l1_weight > 0
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert _cfg().effective_mosaic_block == 1 and TrainConfig().effective_mosaic_block == 2


def test_dataset_determinism_and_splits(tmp_path, hq_dir):
    cfg = _cfg(task="RENOVATION")
    a = build_dataset(hq_dir, cfg, str(tmp_path / "a"))
    b = build_dataset(hq_dir, cfg, str(tmp_path / "b"), workers=2)
    assert a.manifest_hash() == b.manifest_hash()
    for r in a.records:
        assert Kind.MOSAIC.value not in json.dumps(r["pipeline"])
        assert np.array_equal(np.round(a.replay(r) * 255), np.round(load(a, r["lq"]) * 255))
    splits = [r["split"] for r in a.records]
    assert {"TRAIN", "VAL", "TEST"} <= set(splits)
    with pytest.raises(DatasetError):
        build_dataset(str(tmp_path / "empty_missing"), cfg, str(tmp_path / "c"))


def load(ds, rel):
    from facerenov.core import load_image

    return load_image(ds.path(rel))


def test_task_datasets(tmp_path, hq_dir):
    for task, kind in (("SR4X", "DOWNSAMPLE"), ("HALLUC16X", "MOSAIC"), ("JPEG", "JPEG")):
        ds = build_dataset(hq_dir, _cfg(task=task), str(tmp_path / task))
        assert all(r["pipeline"]["stages"][0]["kind"] == kind for r in ds.records)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, hq_dir):
    return build_dataset(hq_dir, _cfg(), str(tmp_path_factory.mktemp("ds")))


def test_train_step_updates_and_finite(dataset):
    tr = Trainer(_cfg())
    _, lq, hq = dataset.load_split("TRAIN")
    g0 = [p.detach().clone() for p in tr.g.parameters()]
    d0 = [p.detach().clone() for p in tr.d.parameters()]
    losses = tr.train_step(lq[:4], hq[:4])
    assert all(np.isfinite(v) for v in losses.values())
    assert {"d", "g_total", "g_gan", "g_fm", "g_perc"} <= set(losses)
    assert any(not torch.equal(a, b) for a, b in zip(g0, tr.g.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d0, tr.d.parameters()))


def test_zero_lr_identity(dataset):
    tr = Trainer(_cfg())
    for opt in (tr.opt_g, tr.opt_d):
        for grp in opt.param_groups:
            grp["lr"] = 0.0
    _, lq, hq = dataset.load_split("TRAIN")
    before = [p.detach().clone() for p in list(tr.g.parameters()) + list(tr.d.parameters())]
    a = tr.train_step(lq[:4], hq[:4])
    b = tr.train_step(lq[:4], hq[:4])
    assert a == b
    assert all(torch.equal(x, y) for x, y in zip(before, list(tr.g.parameters()) + list(tr.d.parameters())))


def test_divergence_dump(tmp_path, dataset):
    tr = Trainer(_cfg(), dump_dir=str(tmp_path))
    _, lq, hq = dataset.load_split("TRAIN")
    with torch.no_grad():
        tr.d.scales[0].logit.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as exc:
        tr.train_step(lq[:4], hq[:4])
    assert exc.value.dump["step"] == 0 and "grad_norms" in exc.value.dump
    assert os.path.exists(tmp_path / "diverged_step0.json")


def test_resume_equivalence_and_checkpoint_stability(tmp_path, dataset):
    cfg = _cfg(steps=20)
    fit(cfg, dataset, str(tmp_path / "full"))
    fit(cfg, dataset, str(tmp_path / "part"), stop_at=10)
    ck = fit(cfg, dataset, str(tmp_path / "part"), resume=True)
    full, part = read_curve(str(tmp_path / "full")), read_curve(str(tmp_path / "part"))
    assert [r["step"] for r in full] == list(range(1, 21))
    assert full == part
    path = tmp_path / "part" / "checkpoints" / "latest.ckpt"
    raw = path.read_bytes()
    again = Checkpoint.load(path)
    assert again.to_bytes() == raw
    _, lq, _ = dataset.load_split("VAL")
    x = torch.from_numpy(lq[:2].transpose(0, 3, 1, 2)).float() * 2 - 1
    with torch.no_grad():
        assert torch.equal(ck.generator_model()(x), again.generator_model()(x))


def test_checkpoint_version_errors(tmp_path, dataset):
    cfg = _cfg(steps=1)
    ck = fit(cfg, dataset, str(tmp_path / "r"))
    bad = Checkpoint(**{**ck.__dict__, "model_version": "other"})
    with pytest.raises(VersionError):
        Checkpoint.from_bytes(bad.to_bytes())
    tampered = Checkpoint(**{**ck.__dict__, "config_hash": "0" * 16})
    with pytest.raises(VersionError):
        Checkpoint.from_bytes(tampered.to_bytes())
    with pytest.raises(VersionError):
        Trainer(_cfg(steps=2)).load_state(ck)
    with pytest.raises(CheckpointFormatError):
        decode(b"garbage!" + bytes(20))


def test_checkpoint_container_roundtrip():
    state = {"a": torch.arange(6.0).view(2, 3), "b": (1, 2.5, "x"), "c": [None, True], 3: torch.zeros(0)}
    blob = encode(state)
    back = decode(blob)
    assert encode(back) == blob
    assert torch.equal(back["a"], state["a"]) and back["b"] == (1, 2.5, "x") and 3 in back


def test_test_split_never_read_in_training(tmp_path, dataset):
    ds = PairedDataset.load(dataset.root)
    fit(_cfg(steps=2), ds, str(tmp_path / "r"))
    assert "TEST" not in ds.accessed_splits


def test_val_curve_recorded(tmp_path, dataset):
    fit(_cfg(steps=5), dataset, str(tmp_path / "r"))
    vals = read_curve(str(tmp_path / "r"), "val")
    assert [v["step"] for v in vals] == [0, 5] and all("psnr" in v and "ssim" in v for v in vals)


def test_fixconv_equals_unit_modulation_before_training():
    from facerenov.train import build_models

    g_def, _, _ = build_models(_cfg(ablation="DEFAULT"), torch.float64)
    g_fix, _, _ = build_models(_cfg(ablation="FIXCONV"), torch.float64)
    for st in g_def.encoder.stages:
        st.modulation = lambda z, st=st: torch.ones_like(type(st).modulation(st, z))
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        assert torch.allclose(g_def(x), g_fix(x), atol=1e-12)


def test_run_ablation_table(tmp_path, hq_dir):
    cfg = _cfg(task="HALLUC16X", mosaic_block=4, steps=2)
    ds = build_dataset(hq_dir, cfg, str(tmp_path / "ds"))
    reports = run_ablation(cfg, ds, str(tmp_path / "abl"), ("DEFAULT", "FIXCONV", "L1", "GUIDANCE_16XFACE"))
    table = (tmp_path / "abl" / "ablation_table.txt").read_text().splitlines()
    assert table[0].split("|")[1:] and all(v in table[0] for v in ("DEFAULT", "FIXCONV", "L1", "GUIDANCE_16XFACE"))
    rows = [line.split("|")[0].strip() for line in table[2:]]
    assert rows == ["PSNR", "SSIM", "MS_SSIM", "FRECHET_FEATURE_DISTANCE", "NIQE"]
    assert all("niqe" in r.aggregate for r in reports.values())


def test_spade_variant_needs_guides(tmp_path, dataset):
    with pytest.raises(ConfigError):
        fit(_cfg(ablation="SPADE", steps=1), dataset, str(tmp_path / "r"))
