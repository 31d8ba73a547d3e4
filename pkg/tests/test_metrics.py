import math
import warnings

import numpy as np
import pytest

from facerenov.degrade import add_noise
from facerenov.losses import PerceptualExtractor
from facerenov.metrics import (
    EvaluationError,
    MetricError,
    MetricReport,
    NiqeModel,
    evaluate,
    format_metric_columns,
    frechet_distance,
    frechet_feature_distance,
    ms_ssim,
    niqe_features,
    niqe_fit,
    niqe_score,
    psnr,
    score_images,
    sqrtm_psd,
    ssim,
)
from facerenov.core import save_image
from oracles import PSNR_OFFSET16, SSIM_100_140, gaussian_samples_frechet


def test_psnr_closed_form_and_identity(rng):
    a = rng.integers(0, 240, (16, 16, 3)) / 255.0
    assert psnr(a, a + 16 / 255.0) == pytest.approx(PSNR_OFFSET16, abs=1e-3)
    assert abs(PSNR_OFFSET16 - 24.0484) < 1e-4
    assert psnr(a, a) == math.inf
    b = rng.random(a.shape)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, a[:8])


def test_ssim_closed_form_and_symmetry(rng):
    a, b = np.full((32, 32, 3), 100 / 255.0), np.full((32, 32, 3), 140 / 255.0)
    assert ssim(a, b) == pytest.approx(SSIM_100_140, abs=1e-4)
    assert abs(SSIM_100_140 - 0.94596) < 1e-4
    x, y = rng.random((24, 24, 3)), rng.random((24, 24, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-15)
    with pytest.raises(ValueError):
        ssim(x[:8, :8], y[:8, :8])


def test_ms_ssim_properties(face, rng):
    assert ms_ssim(face, face) == pytest.approx(1.0, abs=1e-12)
    noisy = np.clip(face + 0.05 * rng.standard_normal(face.shape), 0, 1)
    assert abs(ms_ssim(face, noisy, weights=[1.0]) - ssim(face, noisy)) <= 1e-9
    vals = [ms_ssim(face, add_noise(face, "GAUSS", lv, seed=1)) for lv in (0.02, 0.04, 0.06, 0.08)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        ms_ssim(face[:8, :8], face[:8, :8])


def test_frechet_self_and_shift():
    a, b = gaussian_samples_frechet(np.zeros(4), 4000, 4, 0)
    assert frechet_distance(a.mean(0), np.cov(a, rowvar=False), a.mean(0), np.cov(a, rowvar=False)) == pytest.approx(0, abs=1e-6)
    mu = np.array([1.0, -2.0, 0.5, 0.0])
    a, b = gaussian_samples_frechet(mu, 20000, 4, 1)
    d = frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))
    assert abs(d - mu @ mu) / (mu @ mu) < 0.05


def test_sqrtm_psd():
    m = np.array([[4.0, 1.0], [1.0, 3.0]])
    r = sqrtm_psd(m)
    assert np.allclose(r @ r, m)
    assert np.all(np.isfinite(sqrtm_psd(np.array([[1.0, 0], [0, -1e-9]]))))


def test_frechet_feature_distance(face, rng):
    p = PerceptualExtractor((8, 8, 8)).double()
    imgs = [np.clip(face + 0.05 * rng.standard_normal(face.shape), 0, 1) for _ in range(6)]
    assert frechet_feature_distance(imgs, imgs, p) == pytest.approx(0, abs=1e-6)
    assert frechet_feature_distance(imgs, imgs[::-1], p) == pytest.approx(0, abs=1e-6)
    with pytest.raises(ValueError):
        frechet_feature_distance([], imgs, p)


def _niqe_set(n, seed=0):
    from facerenov.data import synthetic_faces

    return synthetic_faces(n, 64, seed)


def test_niqe_fit_and_score(face):
    imgs = _niqe_set(12)
    m1 = niqe_fit(imgs, patch=32, min_images=10)
    m2 = niqe_fit(imgs, patch=32, min_images=10)
    assert np.array_equal(m1.mean_vec, m2.mean_vec) and np.array_equal(m1.covariance, m2.covariance)
    assert m1.mean_vec.shape == (36,) and np.allclose(m1.covariance, m1.covariance.T)
    assert np.linalg.eigvalsh(m1.covariance).min() > -1e-10
    s = niqe_score(face, m1)
    assert s >= 0 and s == niqe_score(face, m1)
    assert niqe_score(add_noise(face, "GAUSS", 0.1, 3), m1) > s
    with pytest.raises(ValueError):
        niqe_fit(imgs, patch=32)
    with pytest.raises(MetricError):
        niqe_score(face[:16, :16], m1)


def test_niqe_constant_patch_excluded(face):
    img = face.copy()
    img[:40, :40] = 0.5  # margin covers the 7x7 local window
    f, sharp = niqe_features(img, 32)
    assert sharp[0] < 1e-4 < sharp.max()  # grey levels; rounding residue only
    assert not sharp[0] > 0.75 * sharp.max()


def test_niqe_model_roundtrip(tmp_path):
    m = NiqeModel(np.arange(36.0), np.eye(36), 32)
    m.save(tmp_path / "n.npz")
    back = NiqeModel.load(tmp_path / "n.npz")
    assert np.array_equal(back.covariance, m.covariance) and back.patch == 32


def test_report_aggregate_and_roundtrip(tmp_path, rng):
    pairs = {f"i{k}": (rng.random((32, 32, 3)), rng.random((32, 32, 3))) for k in range(4)}
    pairs["same"] = (pairs["i0"][1], pairs["i0"][1])
    rep = score_images(pairs, PerceptualExtractor((4, 4)).double(), None, "x")
    finite = [r["ssim"] for r in rep.per_image.values()]
    assert abs(rep.mean("ssim") - np.mean(finite)) < 1e-9
    assert rep.per_image["same"]["psnr"] == math.inf
    rep.save(tmp_path / "r.jsonl")
    back = MetricReport.load(tmp_path / "r.jsonl")
    assert back.per_image == rep.per_image and back.set_level == rep.set_level
    table = format_metric_columns({"A": rep, "B": back}, ("psnr", "ssim", "frechet_feature_distance"))
    lines = table.splitlines()
    assert len(lines) == 2 + 3 and "A" in lines[0] and "B" in lines[0]


def test_evaluate_identity_and_missing(tmp_path, face):
    out = tmp_path / "out"
    out.mkdir()
    recs = []
    for k in range(3):
        hq = tmp_path / f"hq{k}.png"
        img = np.roll(face, 5 * k, axis=1)
        save_image(img, hq)
        save_image(img, out / f"id{k}.png")
        recs.append({"id": f"id{k}", "hq_path": str(hq)})
    rep = evaluate(recs, out, None, PerceptualExtractor((4, 4)).double())
    agg = rep.aggregate
    assert agg["psnr"][0] == math.inf and agg["ssim"][0] == pytest.approx(1.0)
    assert agg["frechet_feature_distance"][0] == pytest.approx(0, abs=1e-6)
    (out / "id1.png").unlink()
    with pytest.raises(EvaluationError, match="id1"):
        evaluate(recs, out, None)
