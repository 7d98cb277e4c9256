import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.linalg import sqrtm

from rmgn.atelier import generate_dataset
from rmgn.evaluation import (VARIANTS, EmbeddingStats, RunCache, desk_fid, eval_samples,
                             fit_stats, frechet_distance, mask_region_score, run_ablation,
                             run_fakeset_sweep, stats_from_features, summarize, write_table)
from rmgn.objectives import PerceptualEmbedder
from rmgn.tensors import RegionalMask


@pytest.fixture(scope="module")
def emb():
    return PerceptualEmbedder(seed=0, channels=(8, 8, 8, 8), dtype=torch.float64)


def _images(seed, n=6, size=(16, 12)):
    return torch.from_numpy(np.random.default_rng(seed).uniform(-1, 1, (n, 3) + size))


def _random_stats(rng, d):
    a = rng.normal(size=(d, d))
    return EmbeddingStats(rng.normal(size=d), a @ a.T / d)


def scipy_frechet(a: EmbeddingStats, b: EmbeddingStats) -> float:
    cross = sqrtm(a.cov @ b.cov)
    return float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * np.real(cross)))


# ---------------------------------------------------------------- stats

def test_fit_stats_basics(emb):
    imgs = _images(0)
    dup = torch.stack([imgs[0]] * 4)
    st_dup = fit_stats(dup, emb)
    assert np.abs(st_dup.cov).max() < 1e-20
    a = fit_stats(imgs, emb)
    b = fit_stats(imgs.flip(0), emb)
    assert a.dim == emb.width
    assert np.allclose(a.mean, b.mean, rtol=0, atol=1e-14)
    assert np.allclose(a.cov, b.cov, rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        fit_stats(imgs[:1], emb)


def test_stats_validation():
    with pytest.raises(ValueError):
        EmbeddingStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        EmbeddingStats(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        EmbeddingStats(np.zeros(3), np.eye(2))


# ---------------------------------------------------------------- frechet

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_frechet_matches_scipy(seed, d):
    rng = np.random.default_rng(seed)
    a, b = _random_stats(rng, d), _random_stats(rng, d)
    ours = frechet_distance(a, b)
    assert ours >= 0
    assert ours == pytest.approx(scipy_frechet(a, b), rel=1e-6, abs=1e-8)
    assert abs(ours - frechet_distance(b, a)) <= 1e-6
    assert frechet_distance(a, a) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_mean_shift_closed_form(seed, d):
    rng = np.random.default_rng(seed)
    a = _random_stats(rng, d)
    delta = rng.normal(size=d)
    b = EmbeddingStats(a.mean + delta, a.cov)
    assert abs(frechet_distance(a, b) - delta @ delta) <= 1e-4


def test_frechet_dimension_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(EmbeddingStats(np.zeros(2), np.eye(2)), EmbeddingStats(np.zeros(3), np.eye(3)))


def test_singular_covariances_stay_nonnegative():
    a = EmbeddingStats(np.zeros(3), np.diag([1.0, 0.0, 0.0]))
    b = EmbeddingStats(np.zeros(3), np.diag([0.0, 0.0, 1e-30]))
    assert frechet_distance(a, b) >= 0


def test_halves_closer_than_shifted():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4000, 5))
    a, b = stats_from_features(x[:2000]), stats_from_features(x[2000:])
    shifted = stats_from_features(x[2000:] + 0.5)
    assert frechet_distance(a, b) < frechet_distance(a, shifted)


def test_desk_fid_identical_sets(emb):
    imgs = _images(3)
    assert desk_fid(imgs, imgs, emb) <= 1e-6
    assert desk_fid(imgs, _images(4) * 0.2, emb) > 1e-3


# ---------------------------------------------------------------- masks

def test_mask_score_examples():
    gt = torch.zeros(1, 8, 6)
    gt[:, 2:6, 1:5] = 1
    assert mask_region_score([torch.full((1, 8, 6), 0.5)], [gt]) == 0
    assert mask_region_score([gt], [gt]) == 1
    wrapped = RegionalMask(gt.clamp(0.1, 0.9))
    assert mask_region_score([wrapped], [gt]) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        mask_region_score([], [])
    with pytest.raises(ValueError):
        mask_region_score([gt], [gt[:, :4]])


def test_random_masks_score_near_zero():
    rng = np.random.default_rng(11)
    gts = [torch.from_numpy((rng.uniform(size=(1, 64, 48)) < 0.3).astype(float)) for _ in range(100)]
    masks = [torch.from_numpy(rng.uniform(size=(1, 64, 48))) for _ in range(100)]
    assert abs(mask_region_score(masks, gts)) < 0.05


# ---------------------------------------------------------------- experiments

def test_eval_samples_oracle_is_real_person():
    m = generate_dataset(2, 4, size=(16, 12))
    s = eval_samples(m)
    assert s.persons.shape == (8, 3, 16, 12)
    outside = s.cloth_masks.expand_as(s.persons) == 0
    assert torch.equal(s.persons[outside], s.oracles[outside])


def test_ablation_table_shape(tiny_config, tiny_manifest, tmp_path):
    cfg = tiny_config.replace(steps=1, n_fake=2)
    ev = generate_dataset(2, 99, size=(8, 6))
    cache = RunCache(tmp_path / "cache")
    rows = run_ablation(cfg, tiny_manifest, ev, seeds=(0, 1, 2), cache=cache)
    assert [r["variant"] for r in rows] == [v for v in VARIANTS for _ in range(3)]
    assert [r["n_fake"] for r in rows if r["variant"] == "D"] == [2, 2, 2]
    table = summarize(rows, "variant")
    assert [t["variant"] for t in table] == ["A", "B", "C", "D"]
    assert {"pixel_l1_median", "desk_fid_median"} <= set(table[0])
    write_table(table, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().count("\n") == 5
    # cached: a fresh cache object on the same directory reproduces the rows
    again = run_ablation(cfg, tiny_manifest, ev, seeds=(0, 1, 2), cache=RunCache(tmp_path / "cache"))
    assert again == rows


def test_sweep_rows(tiny_config, tiny_manifest):
    cfg = tiny_config.replace(steps=1)
    ev = generate_dataset(1, 98, size=(8, 6))
    rows = run_fakeset_sweep(cfg, tiny_manifest, ev, n_values=[1], seeds=(0,))
    assert len(rows) == 1 and rows[0]["n_fake"] == 1
    with pytest.raises(ValueError):
        run_fakeset_sweep(cfg, tiny_manifest, ev, n_values=[4])
