"""Procedural persons and clothes, plus the exact compositing teacher.

Everything is rendered by inverse mapping pixel centres (x = column,
y = row) into a canonical cloth frame, so cloth masks are hard-edged and
the teacher knows the exact source coordinate of every worn-cloth pixel.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import yaml

from .tensors import DEFAULT_SIZE, ImageTensor, WarpedCloth

PATTERNS = ("solid", "stripes", "logo_patch")
SLEEVES = ("short", "long")
POSTURES = ("canonical", "hip", "raised")

PALETTE = {
    "red": (0.85, -0.75, -0.75),
    "blue": (-0.75, -0.45, 0.85),
    "green": (-0.6, 0.6, -0.55),
    "yellow": (0.9, 0.8, -0.7),
    "white": (0.92, 0.92, 0.92),
    "black": (-0.85, -0.85, -0.85),
    "purple": (0.3, -0.7, 0.6),
    "orange": (0.95, 0.15, -0.8),
}
SKIN_TONES = ((0.75, 0.35, 0.1), (0.45, 0.05, -0.25), (0.1, -0.3, -0.5))
PANTS = (-0.55, -0.55, -0.3)
CLOTH_BACKGROUND = 0.0

# Canonical layout, as fractions of (W, H).
TORSO_X = (0.30, 0.70)
TORSO_Y = (0.25, 0.70)
SLEEVE_W = 0.10
SLEEVE_LEN = {"short": 0.14, "long": 0.38}
ARM_LEN = 0.42
HEAD = (0.5, 0.14, 0.09)  # cx, cy (fractions), radius (fraction of H)


@dataclass(frozen=True)
class ClothSpec:
    seed: int
    base_color: tuple = PALETTE["red"]
    pattern: str = "solid"
    sleeve_length: str = "short"
    texture_noise: float = 0.03

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.sleeve_length not in SLEEVES:
            raise ValueError(f"unknown sleeve length {self.sleeve_length!r}")
        if len(self.base_color) != 3 or any(abs(c) > 1 for c in self.base_color):
            raise ValueError("base_color must be 3 values in [-1, 1]")
        if self.texture_noise < 0:
            raise ValueError("texture_noise must be nonnegative")
        object.__setattr__(self, "base_color", tuple(float(c) for c in self.base_color))


@dataclass(frozen=True)
class PersonSpec:
    seed: int
    cloth: ClothSpec
    arm_angles: tuple = (0.0, 0.0)
    torso_lean: float = 0.0
    skin_tone: tuple = SKIN_TONES[0]
    background_tone: tuple = (0.7, 0.7, 0.65)
    body_scale: float = 1.0
    posture: str = "canonical"

    def __post_init__(self):
        if len(self.arm_angles) != 2 or any(abs(a) > 90 for a in self.arm_angles):
            raise ValueError("arm_angles must be two angles within [-90, 90] degrees")
        if abs(self.torso_lean) > 20:
            raise ValueError("torso_lean must lie within [-20, 20] degrees")
        if not 0.8 <= self.body_scale <= 1.2:
            raise ValueError("body_scale must lie within [0.8, 1.2]")
        if isinstance(self.cloth, dict):
            object.__setattr__(self, "cloth", ClothSpec(**self.cloth))
        for name in ("arm_angles", "skin_tone", "background_tone"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))


# --------------------------------------------------------------------------
# geometry

def _affine(linear, offset) -> np.ndarray:
    return np.concatenate([np.asarray(linear, float), np.asarray(offset, float)[:, None]], axis=1)


def _compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a after b."""
    return _affine(a[:, :2] @ b[:, :2], a[:, :2] @ b[:, 2] + a[:, 2])


def _rotation_about(pivot, linear) -> np.ndarray:
    pivot = np.asarray(pivot, float)
    linear = np.asarray(linear, float)
    return _affine(linear, pivot - linear @ pivot)


def _invert(a: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(a[:, :2])
    return _affine(inv, -inv @ a[:, 2])


def _apply(a: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    return (a[0, 0] * xs + a[0, 1] * ys + a[0, 2],
            a[1, 0] * xs + a[1, 1] * ys + a[1, 2])


def _in_rect(xs, ys, x0, x1, y0, y1):
    return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)


def _sleeve_rect(side: str, length: str, size):
    h, w = size
    sw = SLEEVE_W * w
    y0 = TORSO_Y[0] * h
    if side == "left":
        x1 = TORSO_X[0] * w
        return x1 - sw, x1, y0, y0 + SLEEVE_LEN[length] * h
    x0 = TORSO_X[1] * w
    return x0, x0 + sw, y0, y0 + SLEEVE_LEN[length] * h


def _arm_rect(side: str, size):
    x0, x1, y0, _ = _sleeve_rect(side, "short", size)
    inset = 0.1 * (x1 - x0)
    return x0 + inset, x1 - inset, y0, y0 + ARM_LEN * size[0]


def _torso_rect(size):
    h, w = size
    return TORSO_X[0] * w, TORSO_X[1] * w, TORSO_Y[0] * h, TORSO_Y[1] * h


@dataclass(frozen=True)
class TorsoGeometry:
    """Piecewise-affine map from the canonical cloth frame to the image.

    ``torso``, ``left`` and ``right`` are 2x3 canonical->image affines for
    the three cloth parts; sleeves are drawn over the torso.
    """
    torso: np.ndarray
    left: np.ndarray
    right: np.ndarray
    sleeve_length: str
    size: tuple

    def part_index(self) -> np.ndarray:
        """-1 outside the cloth, 0 torso, 1 left sleeve, 2 right sleeve."""
        h, w = self.size
        ys, xs = np.mgrid[0:h, 0:w].astype(float)
        parts = np.full((h, w), -1, dtype=np.int8)
        qx, qy = _apply(_invert(self.torso), xs, ys)
        parts[_in_rect(qx, qy, *_torso_rect(self.size))] = 0
        for idx, side in ((1, "left"), (2, "right")):
            qx, qy = _apply(_invert(getattr(self, side)), xs, ys)
            parts[_in_rect(qx, qy, *_sleeve_rect(side, self.sleeve_length, self.size))] = idx
        return parts

    def source_coords(self, parts: np.ndarray | None = None) -> np.ndarray:
        """Canonical (x, y) for every pixel, shape [2, H, W].

        Cloth pixels use their own part's inverse; everything else falls
        back to the torso inverse so the field is defined everywhere.
        """
        h, w = self.size
        if parts is None:
            parts = self.part_index()
        ys, xs = np.mgrid[0:h, 0:w].astype(float)
        qx, qy = _apply(_invert(self.torso), xs, ys)
        for idx, side in ((1, "left"), (2, "right")):
            sel = parts == idx
            sx, sy = _apply(_invert(getattr(self, side)), xs[sel], ys[sel])
            qx[sel], qy[sel] = sx, sy
        return np.stack([qx, qy])

    def flow(self) -> np.ndarray:
        """Exact appearance flow (person pixel -> cloth pixel), [2, H, W]."""
        h, w = self.size
        ys, xs = np.mgrid[0:h, 0:w].astype(float)
        src = self.source_coords()
        return np.stack([src[0] - xs, src[1] - ys])


def body_geometry(spec: PersonSpec, size=DEFAULT_SIZE):
    """Returns (global affine, legs affine, TorsoGeometry)."""
    h, w = size
    s = spec.body_scale
    centre = np.array([0.5 * w, 0.5 * h])
    scale = _rotation_about(centre, np.eye(2) * s)
    hip = centre + s * (np.array([0.5 * w, TORSO_Y[1] * h]) - centre)
    phi = math.radians(spec.torso_lean)
    lean = _rotation_about(hip, [[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    body = _compose(lean, scale)

    sleeves = {}
    for side, angle, x_frac in (("left", spec.arm_angles[0], TORSO_X[0]),
                                ("right", spec.arm_angles[1], TORSO_X[1])):
        t = math.radians(angle)
        c, sn = math.cos(t), math.sin(t)
        # positive angles swing the sleeve outwards and up
        linear = [[c, -sn], [sn, c]] if side == "left" else [[c, sn], [-sn, c]]
        pivot = (x_frac * w, TORSO_Y[0] * h)
        sleeves[side] = _compose(body, _rotation_about(pivot, linear))
    geom = TorsoGeometry(body, sleeves["left"], sleeves["right"], spec.cloth.sleeve_length,
                         tuple(size))
    return body, scale, geom


# --------------------------------------------------------------------------
# sampling

def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample [C, H, W] at float coordinates; out-of-bounds taps read zero."""
    c, h, w = img.shape
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros((c,) + np.shape(xs))
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + dy, x0 + dx
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        out += np.where(ok, wgt, 0.0) * vals
    return out


# --------------------------------------------------------------------------
# rendering

def _contrast(color) -> np.ndarray:
    color = np.asarray(color, float)
    return np.where(color > 0, color - 0.9, color + 0.9)


def cloth_shape(sleeve_length: str, size=DEFAULT_SIZE) -> np.ndarray:
    """Boolean [H, W] footprint of a flat cloth in the canonical frame."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    shape = _in_rect(xs, ys, *_torso_rect(size))
    for side in ("left", "right"):
        shape |= _in_rect(xs, ys, *_sleeve_rect(side, sleeve_length, size))
    return shape


def render_cloth_array(spec: ClothSpec, size=DEFAULT_SIZE) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    shape = cloth_shape(spec.sleeve_length, size)
    base = np.asarray(spec.base_color, float)[:, None, None]
    img = np.broadcast_to(base, (3, h, w)).copy()
    accent = _contrast(spec.base_color)[:, None, None]
    if spec.pattern == "stripes":
        band = (np.floor((ys - TORSO_Y[0] * h) / 3.0) % 2 == 1)
        img = np.where(band[None], accent, img)
    elif spec.pattern == "logo_patch":
        half = 0.125 * w
        cx, cy = 0.5 * w, 0.42 * h
        logo = _in_rect(xs, ys, cx - half, cx + half, cy - half, cy + half)
        img = np.where(logo[None], accent, img)
    if spec.texture_noise > 0:
        rng = np.random.default_rng([spec.seed, 0xC10])
        img = img + spec.texture_noise * rng.standard_normal((3, h, w))
    img = np.clip(img, -1.0, 1.0)
    return np.where(shape[None], img, CLOTH_BACKGROUND)


def render_cloth(spec: ClothSpec, size=DEFAULT_SIZE) -> ImageTensor:
    return ImageTensor(torch.from_numpy(render_cloth_array(spec, size)))


class PersonRender(NamedTuple):
    image: ImageTensor
    cloth_region: torch.Tensor  # [1, H, W] in {0, 1}
    geometry: TorsoGeometry


def _composite(person: np.ndarray, parts: np.ndarray, geometry: TorsoGeometry,
               cloth: np.ndarray) -> np.ndarray:
    region = parts >= 0
    src = geometry.source_coords(parts)
    worn = bilinear_sample(cloth, src[0][region], src[1][region])
    out = person.copy()
    out[:, region] = worn
    return out


def render_person(spec: PersonSpec, size=DEFAULT_SIZE) -> PersonRender:
    h, w = size
    body, legs, geom = body_geometry(spec, size)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    img = np.broadcast_to(np.asarray(spec.background_tone, float)[:, None, None], (3, h, w)).copy()
    skin = np.asarray(spec.skin_tone, float)[:, None]

    lx, ly = _apply(_invert(legs), xs, ys)
    leg_y = (TORSO_Y[1] * h - 1, 0.97 * h)
    leg_mask = (_in_rect(lx, ly, 0.33 * w, 0.48 * w, *leg_y)
                | _in_rect(lx, ly, 0.52 * w, 0.67 * w, *leg_y))
    img[:, leg_mask] = np.asarray(PANTS, float)[:, None]

    for side in ("left", "right"):
        ax, ay = _apply(_invert(getattr(geom, side)), xs, ys)
        arm = _in_rect(ax, ay, *_arm_rect(side, size))
        img[:, arm] = skin

    bx, by = _apply(_invert(body), xs, ys)
    cx, cy, r = HEAD[0] * w, HEAD[1] * h, HEAD[2] * h
    head = (bx - cx) ** 2 + (by - cy) ** 2 < r * r
    neck = _in_rect(bx, by, 0.45 * w, 0.55 * w, cy, TORSO_Y[0] * h)
    img[:, head | neck] = skin

    parts = geom.part_index()
    img = _composite(img, parts, geom, render_cloth_array(spec.cloth, size))
    region = torch.from_numpy((parts >= 0).astype(np.float64))[None]
    return PersonRender(ImageTensor(torch.from_numpy(img)), region, geom)


# --------------------------------------------------------------------------
# teacher

def oracle_teacher(person: ImageTensor, cloth_region, torso_geometry: TorsoGeometry,
                   cloth: ImageTensor) -> ImageTensor:
    """Replace the worn cloth pixels of ``person`` with ``cloth``."""
    region = np.asarray(torch.as_tensor(cloth_region).detach().cpu().numpy()).astype(bool)
    if region.ndim == 3:
        region = region[0]
    if person.shape != cloth.shape or region.shape != person.shape[1:]:
        raise ValueError(
            f"shape mismatch: person {person.shape}, cloth {cloth.shape}, mask {region.shape}")
    if tuple(torso_geometry.size) != region.shape:
        raise ValueError("geometry was built for a different resolution")
    parts = torso_geometry.part_index()
    parts = np.where(region, np.maximum(parts, 0), -1)
    out = _composite(person.data.double().numpy(), parts, torso_geometry,
                     cloth.data.double().numpy())
    return ImageTensor(torch.from_numpy(out))


def gt_warped_cloth(person: ImageTensor, cloth_region) -> WarpedCloth:
    region = torch.as_tensor(cloth_region).to(person.data.dtype)
    if region.dim() == 2:
        region = region[None]
    return WarpedCloth(person.data * region, region.clone())


def teacher_flow_pyramid(geometry: TorsoGeometry, levels: int) -> list:
    """Exact flows at every scale, coarse -> fine, each [2, h, w] in that scale's pixels."""
    finest = torch.from_numpy(geometry.flow())
    flows = []
    for k in range(levels - 1, -1, -1):
        f = 2 ** k
        if f == 1:
            flows.append(finest.clone())
        else:
            flows.append(torch.nn.functional.avg_pool2d(finest[None], f)[0] / f)
    return flows


# --------------------------------------------------------------------------
# dataset

@dataclass(frozen=True)
class DatasetEntry:
    person: PersonSpec
    clothes: tuple  # pool of alternative ClothSpecs for fake sets and targets


@dataclass
class Manifest:
    seed: int
    size: tuple
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "size": [int(s) for s in self.size],
            "entries": [
                {"person": _plain(asdict(e.person)), "clothes": [_plain(asdict(c)) for c in e.clothes]}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        entries = []
        for e in d["entries"]:
            person = dict(e["person"])
            person["cloth"] = ClothSpec(**person["cloth"])
            entries.append(DatasetEntry(PersonSpec(**person),
                                        tuple(ClothSpec(**c) for c in e["clothes"])))
        return cls(int(d["seed"]), tuple(d["size"]), entries)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def save_manifest(manifest: Manifest, path):
    with open(path, "w") as fh:
        yaml.safe_dump(manifest.to_dict(), fh, sort_keys=False, default_flow_style=None)


def load_manifest(path) -> Manifest:
    with open(path) as fh:
        return Manifest.from_dict(yaml.safe_load(fh))


def _random_cloth(rng: np.random.Generator, seed: int) -> ClothSpec:
    names = sorted(PALETTE)
    return ClothSpec(
        seed=seed,
        base_color=PALETTE[names[rng.integers(len(names))]],
        pattern=PATTERNS[rng.integers(len(PATTERNS))],
        sleeve_length=SLEEVES[rng.integers(len(SLEEVES))],
    )


def _posture(rng: np.random.Generator, kind: str):
    side = int(rng.integers(2))
    if kind == "canonical":
        arms = rng.uniform(-5, 5, 2)
        lean = rng.uniform(-3, 3)
    elif kind == "hip":
        arms = rng.uniform(-5, 10, 2)
        arms[side] = rng.uniform(25, 40)
        lean = rng.uniform(-8, 8)
    else:
        arms = rng.uniform(0, 25, 2)
        arms[side] = rng.uniform(60, 90)
        lean = rng.uniform(-10, 10)
    return tuple(float(a) for a in arms), float(lean)


def sample_entry(seed: int, index: int, pool_size: int = 4) -> DatasetEntry:
    rng = np.random.default_rng([seed, index])
    kind = POSTURES[index % len(POSTURES)]
    arms, lean = _posture(rng, kind)
    item_seed = int(rng.integers(2 ** 31))
    worn = _random_cloth(rng, item_seed)
    pool = tuple(_random_cloth(rng, item_seed + 1 + k) for k in range(pool_size))
    bg = rng.uniform(0.35, 0.8)
    person = PersonSpec(
        seed=item_seed,
        cloth=worn,
        arm_angles=arms,
        torso_lean=lean,
        skin_tone=SKIN_TONES[rng.integers(len(SKIN_TONES))],
        background_tone=(bg, bg, bg - 0.05),
        body_scale=float(rng.uniform(0.9, 1.1)),
        posture=kind,
    )
    return DatasetEntry(person, pool)


def generate_dataset(n: int, seed: int, size=DEFAULT_SIZE, pool_size: int = 4) -> Manifest:
    """Seed-keyed manifest; item ``i`` depends only on (seed, i)."""
    if n < 1:
        raise ValueError(f"dataset size must be at least 1, got {n}")
    if pool_size < 1:
        raise ValueError("pool_size must be at least 1")
    return Manifest(int(seed), tuple(size), [sample_entry(seed, i, pool_size) for i in range(n)])
