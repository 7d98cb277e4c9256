"""Desk-scale metrics: Frechet distance, mask probes, ablation and fake-set sweeps."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import statistics
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .atelier import Manifest, oracle_teacher
from .objectives import PerceptualEmbedder
from .tensors import ImageTensor, RegionalMask
from .training import (TrainConfig, _cloth_image, embedder_for, infer_batch, prepare, train)

log = logging.getLogger(__name__)

PSD_TOL = 1e-8


@dataclass(frozen=True)
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance is not symmetric")
        if mean.size and np.linalg.eigvalsh(cov).min() < -PSD_TOL * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _image_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    return torch.stack([im.data if isinstance(im, ImageTensor) else im for im in images])


@torch.no_grad()
def embed(images, emb: PerceptualEmbedder, chunk: int = 256) -> np.ndarray:
    batch = _image_batch(images)
    dtype = emb.convs[0].weight.dtype
    feats = [emb.embed(batch[i:i + chunk].to(dtype)) for i in range(0, len(batch), chunk)]
    return torch.cat(feats).double().numpy()


def stats_from_features(feats: np.ndarray) -> EmbeddingStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need at least two feature vectors")
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = 0.5 * (cov + cov.T)
    return EmbeddingStats(feats.mean(axis=0), cov)


def fit_stats(images, emb: PerceptualEmbedder) -> EmbeddingStats:
    batch = _image_batch(images)
    if batch.shape[0] < 2:
        raise ValueError("fit_stats needs at least two images")
    return stats_from_features(embed(batch, emb))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term is computed from the eigenvalues of the
    symmetric S_a^(1/2) S_b S_a^(1/2), clamped at zero.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0, None)).sum()
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross
    return float(max(value, 0.0))


def desk_fid(images_a, images_b, emb: PerceptualEmbedder) -> float:
    return frechet_distance(fit_stats(images_a, emb), fit_stats(images_b, emb))


def mask_region_score(masks, gt_cloth_masks) -> float:
    """Mean over samples of (mean mask inside the cloth region - mean outside)."""
    masks = list(masks)
    gts = list(gt_cloth_masks)
    if not masks or len(masks) != len(gts):
        raise ValueError("need equally many (nonzero) masks and ground-truth masks")
    scores = []
    for m, g in zip(masks, gts):
        m = torch.as_tensor(m.values if isinstance(m, RegionalMask) else m).double().reshape(-1)
        g = torch.as_tensor(g).double().reshape(-1) > 0.5
        if m.shape != g.shape:
            raise ValueError(f"mask size {m.numel()} != ground truth size {g.numel()}")
        inside = m[g].mean() if g.any() else torch.tensor(0.0, dtype=torch.float64)
        outside = m[~g].mean() if (~g).any() else torch.tensor(0.0, dtype=torch.float64)
        scores.append(float(inside - outside))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# try-on quality against the exact teacher composite

class EvalSamples(NamedTuple):
    persons: torch.Tensor  # inputs: fakes wearing a pool cloth
    cloths: torch.Tensor   # target cloth, flat
    oracles: torch.Tensor  # teacher composite of the target cloth (= real person)
    cloth_masks: torch.Tensor


def eval_samples(manifest: Manifest, per_person: int | None = None) -> EvalSamples:
    """Every (person, pool cloth) pair as a try-on of the person's own cloth.

    The input wears a pool cloth, the target is the cloth the person really
    wears, so the exact composite of the target is the rendered person.
    """
    persons, cloths, oracles, masks = [], [], [], []
    size = tuple(manifest.size)
    for p in prepare(manifest, 1):
        pool = p.entry.clothes if per_person is None else p.entry.clothes[:per_person]
        for spec in pool:
            fake = oracle_teacher(p.render.image, p.render.cloth_region, p.render.geometry,
                                  _cloth_image(spec, size))
            persons.append(fake.data)
            cloths.append(p.target.data)
            oracles.append(p.render.image.data)
            masks.append(p.render.cloth_region)
    return EvalSamples(torch.stack(persons), torch.stack(cloths), torch.stack(oracles),
                       torch.stack(masks))


@torch.no_grad()
def run_inference(state, samples: EvalSamples, chunk: int = 16):
    outs, finest = [], []
    for i in range(0, len(samples.persons), chunk):
        out, masks, _ = infer_batch(samples.persons[i:i + chunk], samples.cloths[i:i + chunk], state)
        outs.append(out)
        if masks:
            finest.append(masks[-1])
    return torch.cat(outs), (torch.cat(finest) if finest else None)


def evaluate_state(state, samples: EvalSamples, emb: PerceptualEmbedder | None = None) -> dict:
    emb = emb or embedder_for(state.config)
    outs, finest = run_inference(state, samples)
    err = (outs - samples.oracles).abs()
    region = samples.cloth_masks.expand_as(err) > 0.5
    result = {
        "pixel_l1": float(err.mean()),
        "pixel_l1_cloth": float(err[region].mean()),
        "desk_fid": desk_fid(outs, samples.oracles, emb),
    }
    if finest is not None:
        result["mask_score"] = mask_region_score(finest, samples.cloth_masks)
    return result


# --------------------------------------------------------------------------
# experiments

VARIANTS = {
    "A": {"multilevel": False, "use_mask": False, "n_fake": 1},
    "B": {"multilevel": True, "use_mask": False, "n_fake": 1},
    "C": {"multilevel": True, "use_mask": True, "n_fake": 1},
    "D": {"multilevel": True, "use_mask": True},
}
VARIANT_LABELS = {"A": "baseline", "B": "+extractor", "C": "+mask", "D": "+PA-loss"}


def _run_key(config: TrainConfig, train_manifest: Manifest, eval_manifest: Manifest) -> str:
    blob = json.dumps([config.to_dict(), train_manifest.to_dict(), eval_manifest.to_dict()],
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


class RunCache:
    """Memo of finished runs, optionally persisted as one JSON file per run."""

    def __init__(self, directory=None):
        self.directory = directory
        self.memory = {}
        if directory:
            os.makedirs(directory, exist_ok=True)

    def get(self, key):
        if key in self.memory:
            return self.memory[key]
        if self.directory:
            path = os.path.join(self.directory, f"{key}.json")
            if os.path.exists(path):
                with open(path) as fh:
                    self.memory[key] = json.load(fh)
                return self.memory[key]
        return None

    def put(self, key, value):
        self.memory[key] = value
        if self.directory:
            with open(os.path.join(self.directory, f"{key}.json"), "w") as fh:
                json.dump(value, fh, sort_keys=True)


def train_and_evaluate(config: TrainConfig, train_manifest: Manifest, eval_manifest: Manifest,
                       cache: RunCache | None = None, samples: EvalSamples | None = None) -> dict:
    key = _run_key(config, train_manifest, eval_manifest)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    state = train(config, train_manifest)
    samples = samples if samples is not None else eval_samples(eval_manifest)
    result = evaluate_state(state, samples)
    if cache is not None:
        cache.put(key, result)
    return result


def run_ablation(config: TrainConfig, train_manifest: Manifest, eval_manifest: Manifest,
                 seeds=(0, 1, 2), cache: RunCache | None = None) -> list:
    """One row per (variant, seed) with pixel-L1-to-oracle and desk FID."""
    samples = eval_samples(eval_manifest)
    rows = []
    for name, changes in VARIANTS.items():
        for seed in seeds:
            cfg = config.replace(seed=seed, **changes)
            res = train_and_evaluate(cfg, train_manifest, eval_manifest, cache, samples)
            log.info("variant %s seed %d: %s", name, seed, res)
            rows.append({"variant": name, "modules": VARIANT_LABELS[name], "seed": seed,
                         "n_fake": cfg.n_fake, "pixel_l1": res["pixel_l1"],
                         "desk_fid": res["desk_fid"]})
    return rows


def run_fakeset_sweep(config: TrainConfig, train_manifest: Manifest, eval_manifest: Manifest,
                      n_values=(1, 2, 3), seeds=(0, 1, 2), cache: RunCache | None = None) -> list:
    n_values = list(n_values)
    if not n_values or any(n not in (1, 2, 3) for n in n_values):
        raise ValueError(f"n_values must be a nonempty subset of {{1, 2, 3}}, got {n_values}")
    samples = eval_samples(eval_manifest)
    rows = []
    for n in n_values:
        for seed in seeds:
            cfg = config.replace(seed=seed, n_fake=n)
            res = train_and_evaluate(cfg, train_manifest, eval_manifest, cache, samples)
            rows.append({"n_fake": n, "seed": seed, "pixel_l1": res["pixel_l1"],
                         "desk_fid": res["desk_fid"]})
    return rows


def summarize(rows: list, by: str, metrics=("pixel_l1", "desk_fid")) -> list:
    """Median/min/max per group, keeping first-seen group order."""
    groups = {}
    for r in rows:
        groups.setdefault(r[by], []).append(r)
    out = []
    for key, items in groups.items():
        row = {by: key, "seeds": len(items)}
        for m in metrics:
            vals = [it[m] for it in items]
            row[f"{m}_median"] = statistics.median(vals)
            row[f"{m}_min"] = min(vals)
            row[f"{m}_max"] = max(vals)
        out.append(row)
    return out


def write_table(rows: list, path):
    if not rows:
        raise ValueError("empty table")
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
