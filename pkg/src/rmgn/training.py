"""Fake-triplet training of the warp module and generator, checkpoints, inference."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import torch
import yaml

from .atelier import (ClothSpec, DatasetEntry, Manifest, PersonRender, gt_warped_cloth,
                      oracle_teacher, render_cloth, render_person, save_manifest,
                      teacher_flow_pyramid)
from .generator import RMGenerator, generate
from .objectives import NonFiniteLoss, PerceptualEmbedder, generator_loss, total_objective
from .tensors import (DEFAULT_SIZE, ImageTensor, LossWeights, RegionalMask, WarpedCloth,
                      check_resolution)
from .warp import FlowEstimator, posture_awareness_loss, predict_flow, warp

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "L_W", "L_G", "O"]


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# config

@dataclass
class TrainConfig:
    steps: int
    seed: int = 0
    batch_size: int = 1
    n_fake: int = 3
    learning_rate: float = 2e-4
    resolution: tuple = DEFAULT_SIZE
    gen_levels: int = 4
    warp_levels: int = 4
    gen_channels: tuple = (16, 32, 64, 128)
    warp_channels: tuple = (16, 24, 32, 48)
    warp_hidden: int = 32
    rm_units: int = 2
    use_mask: bool = True
    multilevel: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    embedder_seed: int = 1234
    embedder_channels: tuple = (16, 32, 64, 64)
    checkpoint_interval: int = 100
    max_fake: int = 3

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.resolution = tuple(int(v) for v in self.resolution)
        self.gen_channels = tuple(int(v) for v in self.gen_channels)
        self.warp_channels = tuple(int(v) for v in self.warp_channels)
        self.embedder_channels = tuple(int(v) for v in self.embedder_channels)
        for name in ("batch_size", "n_fake", "gen_levels", "warp_levels", "rm_units",
                     "checkpoint_interval", "warp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.n_fake > self.max_fake:
            raise ConfigError(f"n_fake={self.n_fake} exceeds max_fake={self.max_fake}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if len(self.gen_channels) != self.gen_levels:
            raise ConfigError("gen_channels needs one width per generator level")
        if len(self.warp_channels) != self.warp_levels:
            raise ConfigError("warp_channels needs one width per warp level")
        if len(self.resolution) != 2:
            raise ConfigError("resolution is [height, width]")
        try:
            check_resolution(*self.resolution, max(self.gen_levels, self.warp_levels) - 1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.as_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


REQUIRED_KEYS = ("steps", "seed", "batch_size", "n_fake", "learning_rate")


def _key_lines(text: str) -> dict:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise ConfigError(f"{source}: {where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: line 1: expected a key-value mapping")
    lines = _key_lines(text)
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(missing)}")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in raw:
        if key not in fields:
            raise ConfigError(f"{source}: line {lines.get(key, '?')}: unknown key {key!r}")
    try:
        return TrainConfig(**raw)
    except (ConfigError, TypeError, ValueError) as exc:
        msg = str(exc)
        key = next((k for k in raw if re.search(rf"\b{re.escape(k)}\b", msg)), None)
        where = f"line {lines[key]}: " if key in lines else ""
        raise ConfigError(f"{source}: {where}{msg}") from None


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)


# --------------------------------------------------------------------------
# data

@lru_cache(maxsize=4096)
def _cloth_image(spec: ClothSpec, size: tuple) -> ImageTensor:
    return render_cloth(spec, size)


class PreparedPerson(NamedTuple):
    entry: DatasetEntry
    render: PersonRender
    target: ImageTensor  # the cloth the person wears, flat
    gt: WarpedCloth
    teacher: list


class Sample(NamedTuple):
    fakes: torch.Tensor  # [n, 3, H, W]
    target: torch.Tensor
    real: torch.Tensor
    gt: WarpedCloth
    teacher: list
    cloth_mask: torch.Tensor


def prepare(manifest: Manifest, warp_levels: int, size=None) -> list:
    size = tuple(size or manifest.size)
    out = []
    for entry in manifest.entries:
        render = render_person(entry.person, size)
        out.append(PreparedPerson(
            entry, render, _cloth_image(entry.person.cloth, size),
            gt_warped_cloth(render.image, render.cloth_region),
            teacher_flow_pyramid(render.geometry, warp_levels)))
    return out


def sample_fake_set(person_render: PersonRender, clothes, n: int, rng: np.random.Generator) -> list:
    """n teacher composites of distinct pool clothes on the same person."""
    if n < 1:
        raise ValueError("fake set size must be at least 1")
    if len(clothes) < n:
        raise ValueError(f"cloth pool has {len(clothes)} items, need {n}")
    size = tuple(person_render.image.shape[1:])
    picks = rng.choice(len(clothes), size=n, replace=False)
    return [oracle_teacher(person_render.image, person_render.cloth_region,
                           person_render.geometry, _cloth_image(clothes[int(i)], size))
            for i in picks]


def make_sample(person: PreparedPerson, n: int, rng: np.random.Generator) -> Sample:
    fakes = sample_fake_set(person.render, person.entry.clothes, n, rng)
    return Sample(torch.stack([f.data for f in fakes]), person.target.data,
                  person.render.image.data, person.gt, person.teacher,
                  person.render.cloth_region)


# --------------------------------------------------------------------------
# model state

@dataclass
class ModelState:
    config: TrainConfig
    warp: FlowEstimator
    gen: RMGenerator
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    last_checkpoint: str | None = None

    def parameters(self):
        return list(self.warp.parameters()) + list(self.gen.parameters())


def build_models(config: TrainConfig, dtype=torch.float32):
    torch.manual_seed(config.seed)
    warp_model = FlowEstimator(config.warp_levels, config.warp_channels, config.warp_hidden)
    gen = RMGenerator(config.gen_channels, config.rm_units, config.use_mask, config.multilevel)
    return warp_model.to(dtype), gen.to(dtype)


def init_state(config: TrainConfig, dtype=torch.float32) -> ModelState:
    warp_model, gen = build_models(config, dtype)
    opt = torch.optim.Adam(list(warp_model.parameters()) + list(gen.parameters()),
                           lr=config.learning_rate, betas=(0.9, 0.999))
    return ModelState(config, warp_model, gen, opt, np.random.default_rng(config.seed))


@lru_cache(maxsize=8)
def _embedder(seed: int, channels: tuple, dtype) -> PerceptualEmbedder:
    return PerceptualEmbedder(seed, channels, dtype=dtype)


def embedder_for(config: TrainConfig, dtype=torch.float32) -> PerceptualEmbedder:
    return _embedder(config.embedder_seed, tuple(config.embedder_channels), dtype)


def compute_losses(state: ModelState, batch, config: TrainConfig | None = None):
    """Mean over the batch of (L_W, L_G, O) as differentiable tensors."""
    config = config or state.config
    emb = embedder_for(config, next(state.gen.parameters()).dtype)
    l_w_sum = l_g_sum = obj_sum = 0.0
    for item in batch:
        l_w, warped = posture_awareness_loss(
            item.fakes, item.target, item.gt, item.teacher, state.warp, config.weights)
        preds, _ = generate(warped, item.fakes, state.gen)
        l_g = generator_loss(preds, item.real, config.weights, emb)
        obj = total_objective(l_w, l_g)
        l_w_sum = l_w_sum + l_w
        l_g_sum = l_g_sum + l_g
        obj_sum = obj_sum + obj
    n = len(batch)
    return l_w_sum / n, l_g_sum / n, obj_sum / n


def train_step(state: ModelState, batch, config: TrainConfig | None = None):
    """One optimiser step on O = L_W + L_G; returns (state, metrics)."""
    config = config or state.config
    state.warp.train()
    state.gen.train()
    try:
        l_w, l_g, obj = compute_losses(state, batch, config)
    except NonFiniteLoss as exc:
        raise TrainingAborted(
            f"step {state.step + 1}: {exc}; last good checkpoint: {state.last_checkpoint}") from exc
    state.optimizer.zero_grad(set_to_none=True)
    obj.backward()
    state.optimizer.step()
    state.step += 1
    metrics = {"step": state.step, "L_W": float(l_w.detach()), "L_G": float(l_g.detach()),
               "O": float(obj.detach())}
    return state, metrics


def next_batch(state: ModelState, people: list, config: TrainConfig | None = None) -> list:
    config = config or state.config
    k = min(config.batch_size, len(people))
    idx = state.rng.choice(len(people), size=k, replace=False)
    return [make_sample(people[int(i)], config.n_fake, state.rng) for i in idx]


# --------------------------------------------------------------------------
# checkpoint container:
#   magic (8) | version u32 | section count u32 |
#   count x [name (16, NUL padded) | offset u64 | length u64] | payloads

CKPT_MAGIC = b"RMGNCKPT"
CKPT_VERSION = 1
_ENTRY = struct.Struct("<16sQQ")


def pack_tensors(tensors: dict, meta=None) -> bytes:
    header = {"meta": meta, "tensors": []}
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        header["tensors"].append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                                  "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<I", len(head)) + head + b"".join(blobs)


def unpack_tensors(raw: bytes):
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + n])
    base = 4 + n
    tensors = {}
    for item in header["tensors"]:
        start = base + item["offset"]
        arr = np.frombuffer(raw[start:start + item["nbytes"]], dtype=np.dtype(item["dtype"]))
        tensors[item["name"]] = torch.from_numpy(arr.reshape(item["shape"]).copy())
    return tensors, header["meta"]


def write_container(path, sections: dict):
    names = list(sections)
    table_size = 16 + _ENTRY.size * len(names)
    offset = table_size
    table = b""
    for name in names:
        if len(name.encode()) > 16:
            raise ValueError(f"section name too long: {name}")
        table += _ENTRY.pack(name.encode(), offset, len(sections[name]))
        offset += len(sections[name])
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(names)) + table)
        for name in names:
            fh.write(sections[name])


def read_container(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sections = {}
    for i in range(count):
        name, off, length = _ENTRY.unpack_from(raw, 16 + i * _ENTRY.size)
        sections[name.rstrip(b"\0").decode()] = raw[off:off + length]
    return sections


def _optimizer_section(opt: torch.optim.Optimizer) -> bytes:
    sd = opt.state_dict()
    tensors = {}
    scalars = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                tensors[f"{idx}.{key}"] = val
            else:
                scalars[f"{idx}.{key}"] = val
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
              for g in sd["param_groups"]]
    return pack_tensors(tensors, {"param_groups": groups, "scalars": scalars})


def _load_optimizer(opt: torch.optim.Optimizer, raw: bytes):
    tensors, meta = unpack_tensors(raw)
    state = {}
    for name, t in tensors.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = t
    for name, v in meta["scalars"].items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = v
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(state: ModelState, path):
    rng = {"bit_generator": state.rng.bit_generator.state, "step": state.step}
    write_container(path, {
        "config": dump_config(state.config).encode(),
        "warp": pack_tensors(state.warp.state_dict()),
        "gen": pack_tensors(state.gen.state_dict()),
        "optimizer": _optimizer_section(state.optimizer),
        "rng": json.dumps(rng, sort_keys=True).encode(),
    })
    state.last_checkpoint = str(path)


def load_checkpoint(path) -> ModelState:
    sections = read_container(path)
    config = parse_config(sections["config"].decode(), f"{path}:config")
    state = init_state(config)
    state.warp.load_state_dict(unpack_tensors(sections["warp"])[0])
    state.gen.load_state_dict(unpack_tensors(sections["gen"])[0])
    if "optimizer" in sections:
        _load_optimizer(state.optimizer, sections["optimizer"])
    rng = json.loads(sections["rng"])
    state.rng.bit_generator.state = rng["bit_generator"]
    state.step = int(rng["step"])
    state.last_checkpoint = str(path)
    return state


# --------------------------------------------------------------------------
# run loop

def checkpoint_path(out_dir, step: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"ckpt_{step:06d}.rmgn")


def latest_checkpoint(out_dir) -> str | None:
    d = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(d):
        return None
    found = sorted(f for f in os.listdir(d)
                   if re.fullmatch(r"ckpt_\d{6}\.rmgn", f) and os.path.isfile(os.path.join(d, f)))
    return os.path.join(d, found[-1]) if found else None


def _format(x: float) -> str:
    return repr(float(x))


def _rewrite_metrics(path, upto: int):
    rows = []
    if os.path.exists(path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
    rows = [r for r in rows if r and int(r[0]) <= upto]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def train(config: TrainConfig, manifest: Manifest, out_dir=None, resume: bool = False,
          people: list | None = None, callback=None) -> ModelState:
    """Run ``config.steps`` optimiser steps; write checkpoints and metrics under ``out_dir``."""
    if not manifest.entries:
        raise ValueError("manifest has no entries")
    if tuple(manifest.size) != tuple(config.resolution):
        raise ConfigError(
            f"manifest resolution {tuple(manifest.size)} != config resolution {config.resolution}")
    people = people if people is not None else prepare(manifest, config.warp_levels)
    metrics_path = None
    state = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        ckpt = latest_checkpoint(out_dir) if resume else None
        if ckpt:
            state = load_checkpoint(ckpt)
            if state.config.to_dict() != config.to_dict():
                if state.config.replace(steps=config.steps).to_dict() != config.to_dict():
                    raise ConfigError(f"{ckpt} was written with a different config")
                state.config = config
            _rewrite_metrics(metrics_path, state.step)
            log.info("resuming from %s at step %d", ckpt, state.step)
        else:
            if latest_checkpoint(out_dir):
                raise FileExistsError(f"{out_dir} already holds checkpoints; use resume")
            with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
                fh.write(dump_config(config))
            save_manifest(manifest, os.path.join(out_dir, "manifest.yaml"))
            _rewrite_metrics(metrics_path, -1)
    if state is None:
        state = init_state(config)

    fh = open(metrics_path, "a", newline="") if metrics_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    try:
        while state.step < config.steps:
            batch = next_batch(state, people, config)
            state, metrics = train_step(state, batch, config)
            if writer:
                writer.writerow([metrics["step"]] + [_format(metrics[k]) for k in METRICS_HEADER[1:]])
                fh.flush()
            if callback:
                callback(state, metrics)
            if out_dir is not None and (state.step % config.checkpoint_interval == 0
                                        or state.step == config.steps):
                path = checkpoint_path(out_dir, state.step)
                try:
                    save_checkpoint(state, path)
                except OSError as exc:
                    raise OSError(f"step {state.step}: cannot write checkpoint {path}: {exc}") from exc
    finally:
        if fh:
            fh.close()
    return state


# --------------------------------------------------------------------------
# inference

@torch.no_grad()
def infer(person: ImageTensor, cloth: ImageTensor, state: ModelState):
    """Try ``cloth`` on ``person``. Only the two images and the model are used."""
    if person.shape != cloth.shape:
        raise ValueError(f"person {person.shape} and cloth {cloth.shape} differ in size")
    expected = tuple(state.config.resolution)
    if tuple(person.shape[1:]) != expected:
        raise ValueError(f"input resolution {tuple(person.shape[1:])} does not match "
                         f"model resolution {expected}")
    out, masks, _ = infer_batch(person.batch(), cloth.batch(), state)
    return ImageTensor(out[0]), [RegionalMask(m[0]) for m in masks]


@torch.no_grad()
def infer_batch(persons: torch.Tensor, cloths: torch.Tensor, state: ModelState):
    state.warp.eval()
    state.gen.eval()
    flows = predict_flow(persons, cloths, state.warp)
    warped = warp(cloths.to(flows[-1].dtype), flows[-1])
    out, masks = generate(warped, persons, state.gen)
    return out.double(), [m.double() for m in masks if m is not None], warped
