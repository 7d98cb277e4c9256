"""Core value types and PNG I/O.

Images are channel-major ``[C, H, W]`` float tensors with values in [-1, 1].
Batched computation elsewhere in the package uses plain ``[B, C, H, W]``
tensors; the dataclasses here validate at module boundaries.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image

DEFAULT_SIZE = (64, 48)
DEFAULT_DEPTH = 4


class ImageDecodeError(ValueError):
    pass


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x))
    return torch.as_tensor(x)


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains NaN or Inf")


def check_resolution(height: int, width: int, depth: int):
    """Raise unless both sides are positive and divisible by 2**depth."""
    step = 2 ** depth
    if height <= 0 or width <= 0 or height % step or width % step:
        raise ValueError(
            f"resolution {height}x{width} is not divisible by 2^{depth}={step}")


@dataclass(frozen=True)
class ImageTensor:
    data: torch.Tensor

    def __post_init__(self):
        data = _as_tensor(self.data)
        if not data.is_floating_point():
            data = data.double()
        if data.dim() != 3 or data.shape[0] not in (1, 3):
            raise ValueError(f"expected [C, H, W] with C in (1, 3), got {tuple(data.shape)}")
        if data.shape[1] <= 0 or data.shape[2] <= 0:
            raise ValueError("empty image")
        _check_finite(data, "image")
        if data.min() < -1 or data.max() > 1:
            raise ValueError(
                f"image values outside [-1, 1]: [{float(data.min())}, {float(data.max())}]")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return tuple(self.data.shape)

    def batch(self) -> torch.Tensor:
        return self.data.unsqueeze(0)


class WarpedCloth(NamedTuple):
    """Warped image plus the in-bounds fraction of its bilinear taps.

    Both fields may carry a leading batch dimension.
    """
    image: torch.Tensor
    validity: torch.Tensor


@dataclass(frozen=True)
class FlowField:
    offsets: torch.Tensor  # [2, h, w], (dx, dy) in pixels of this scale
    scale_index: int = 1

    def __post_init__(self):
        offsets = _as_tensor(self.offsets)
        if offsets.dim() != 3 or offsets.shape[0] != 2:
            raise ValueError(f"flow must be [2, h, w], got {tuple(offsets.shape)}")
        _check_finite(offsets, "flow")
        if self.scale_index < 1:
            raise ValueError("scale_index starts at 1")
        object.__setattr__(self, "offsets", offsets)


@dataclass(frozen=True)
class RegionalMask:
    values: torch.Tensor  # [1, h, w]

    def __post_init__(self):
        values = _as_tensor(self.values)
        if values.dim() != 3 or values.shape[0] != 1:
            raise ValueError(f"mask must be [1, h, w], got {tuple(values.shape)}")
        _check_finite(values, "mask")
        if values.min() <= 0 or values.max() >= 1:
            raise ValueError("regional mask entries must lie strictly in (0, 1)")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class FakeTriplet:
    fake_person: ImageTensor
    target_cloth: ImageTensor
    real_person: ImageTensor
    gt_cloth_mask: torch.Tensor

    def __post_init__(self):
        sizes = {im.shape[1:] for im in (self.fake_person, self.target_cloth, self.real_person)}
        if len(sizes) != 1:
            raise ValueError(f"triplet images disagree in size: {sorted(sizes)}")
        mask = _as_tensor(self.gt_cloth_mask)
        if mask.dim() == 2:
            mask = mask.unsqueeze(0)
        if tuple(mask.shape[1:]) != self.real_person.shape[1:]:
            raise ValueError("gt_cloth_mask does not match the image size")
        if not ((mask == 0) | (mask == 1)).all():
            raise ValueError("gt_cloth_mask must be binary")
        object.__setattr__(self, "gt_cloth_mask", mask)


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 1.0
    lambda_sec: float = 0.01
    lambda_d: float = 0.25
    lambda_p: float = 0.2

    def __post_init__(self):
        for name in ("lambda_f", "lambda_sec", "lambda_d", "lambda_p"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite nonnegative number, got {value}")

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("lambda_f", "lambda_sec", "lambda_d", "lambda_p")}


# --------------------------------------------------------------------------
# PNG I/O

def load_image(path) -> ImageTensor:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            raise ImageDecodeError(
                f"{path}: unsupported mode {im.mode!r}; need 8-bit grayscale or RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return ImageTensor(torch.from_numpy(arr.astype(np.float64) * (2.0 / 255.0) - 1.0))


def to_uint8(t: ImageTensor | torch.Tensor) -> np.ndarray:
    """[-1, 1] -> bytes, rounding half to even. Returns HxW or HxWx3."""
    if not isinstance(t, ImageTensor):
        t = ImageTensor(t.detach())
    arr = np.rint((t.data.detach().double().numpy() + 1.0) * 127.5)
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def save_image(t: ImageTensor | torch.Tensor, path):
    Image.fromarray(to_uint8(t)).save(path, format="PNG")


def save_mask(mask: RegionalMask | torch.Tensor, path):
    """Grayscale PNG; 0 -> 0.0, 255 -> 1.0."""
    values = mask.values if isinstance(mask, RegionalMask) else _as_tensor(mask)
    values = values.detach().double()
    if values.dim() == 3:
        values = values[0]
    if values.min() < 0 or values.max() > 1 or not torch.isfinite(values).all():
        raise ValueError("mask values must be finite and within [0, 1]")
    arr = np.rint(values.numpy() * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_mask(path) -> torch.Tensor:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ImageDecodeError(f"{path}: masks are 8-bit grayscale, got {im.mode!r}")
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float64) / 255.0)[None]


# --------------------------------------------------------------------------
# Flow export: 16-byte header (8-byte magic, uint32 h, uint32 w), then
# little-endian float32 [2, h, w].

FLOW_MAGIC = b"RMGNFLO\x00"


def save_flow(flow: FlowField | torch.Tensor, path):
    offsets = flow.offsets if isinstance(flow, FlowField) else FlowField(flow).offsets
    _, h, w = offsets.shape
    payload = offsets.detach().cpu().numpy().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", h, w) + payload)


def load_flow(path, scale_index: int = 1) -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow file")
    h, w = struct.unpack("<II", raw[8:16])
    expected = 16 + 2 * h * w * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw[16:], dtype="<f4").reshape(2, h, w)
    return FlowField(torch.from_numpy(arr.astype(np.float32)), scale_index)
