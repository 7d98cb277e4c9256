"""Appearance-flow warping and its loss stack.

Flows are ``[B, 2, h, w]`` tensors of (dx, dy) offsets in pixels of their own
scale; a pyramid is a list ordered coarse -> fine whose last entry has the
image resolution.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensors import ImageTensor, LossWeights, WarpedCloth, check_resolution

CHARBONNIER_EPS = 1e-3
CHARBONNIER_ALPHA = 0.45

# (dy, dx) for horizontal, vertical and the two diagonals
NEIGHBOURHOOD = ((0, 1), (1, 0), (1, 1), (1, -1))


def _batched(t: torch.Tensor, ndim: int = 4) -> torch.Tensor:
    if isinstance(t, ImageTensor):
        t = t.data
    return t.unsqueeze(0) if t.dim() == ndim - 1 else t


def pixel_grid(h: int, w: int, dtype=torch.float64, device=None):
    ys = torch.arange(h, dtype=dtype, device=device).view(h, 1).expand(h, w)
    xs = torch.arange(w, dtype=dtype, device=device).view(1, w).expand(h, w)
    return xs, ys


def _bilinear(img: torch.Tensor, sx: torch.Tensor, sy: torch.Tensor):
    """Four-tap bilinear gather; out-of-bounds taps read zero.

    Integer coordinates give a single unit-weight tap, so integer shifts
    are exact. Returns (samples [B, C, H, W], in-bounds weight [B, 1, H, W]).
    """
    b, c, h, w = img.shape
    x0 = torch.floor(sx).detach()
    y0 = torch.floor(sy).detach()
    fx = sx - x0
    fy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = img.reshape(b, c, h * w)
    out = None
    valid = None
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, h * w)
        taps = flat.gather(2, idx.expand(b, c, h * w)).reshape(b, c, h, w)
        wgt = (wgt * inside)[:, None]
        out = wgt * taps if out is None else out + wgt * taps
        valid = wgt if valid is None else valid + wgt
    return out, valid


def warp(cloth, flow) -> WarpedCloth:
    """Bilinearly sample ``cloth`` at (x + dx, y + dy).

    Out-of-bounds taps read zero; ``validity`` is the in-bounds share of
    the tap weights. Accepts unbatched or batched inputs; the result is
    unbatched only when both are.
    """
    unbatched = all((t.data if isinstance(t, ImageTensor) else t).dim() == 3
                    for t in (cloth, flow))
    cloth = _batched(cloth)
    flow = _batched(flow)
    if flow.shape[0] == 1 and cloth.shape[0] > 1:
        flow = flow.expand(cloth.shape[0], -1, -1, -1)
    elif cloth.shape[0] == 1 and flow.shape[0] > 1:
        cloth = cloth.expand(flow.shape[0], -1, -1, -1)
    if flow.shape[1] != 2 or flow.shape[2:] != cloth.shape[2:] or flow.shape[0] != cloth.shape[0]:
        raise ValueError(f"flow {tuple(flow.shape)} does not match image {tuple(cloth.shape)}")
    h, w = cloth.shape[2:]
    flow = flow.to(cloth.dtype)
    xs, ys = pixel_grid(h, w, cloth.dtype, cloth.device)
    image, validity = _bilinear(cloth, xs + flow[:, 0], ys + flow[:, 1])
    if unbatched:
        return WarpedCloth(image[0], validity[0])
    return WarpedCloth(image, validity)


def upsample_flow(flow: torch.Tensor, size) -> torch.Tensor:
    """Resize a flow to ``size`` and rescale its offsets to the new pixel units."""
    h, w = flow.shape[-2:]
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    sx, sy = size[1] / w, size[0] / h
    return torch.cat([out[:, :1] * sx, out[:, 1:] * sy], dim=1)


# --------------------------------------------------------------------------
# losses

def charbonnier(x, eps: float = CHARBONNIER_EPS, alpha: float = CHARBONNIER_ALPHA):
    """Generalised Charbonnier (x^2 + eps^2)^alpha; summed over tensor input."""
    if isinstance(x, torch.Tensor):
        return ((x * x + eps * eps) ** alpha).sum()
    return (x * x + eps * eps) ** alpha


def second_differences(flow: torch.Tensor):
    """Yield f[j-p] + f[j+p] - 2 f[j] over interior points, one tensor per direction."""
    h, w = flow.shape[-2:]
    for dy, dx in NEIGHBOURHOOD:
        if h <= 2 * dy or w <= 2 * abs(dx):
            continue
        hs = slice(dy, h - dy)
        ws = slice(abs(dx), w - abs(dx))
        centre = flow[..., hs, ws]
        if dx >= 0:
            before = flow[..., : h - 2 * dy, : w - 2 * dx]
            after = flow[..., 2 * dy:, 2 * dx:]
        else:
            before = flow[..., : h - 2 * dy, 2 * abs(dx):]
            after = flow[..., 2 * dy:, : w - 2 * abs(dx)]
        yield before + after - 2 * centre


def loss_second_order(pyramid) -> torch.Tensor:
    """Charbonnier of second differences summed over scales, points, directions, channels."""
    total = 0.0
    for flow in pyramid:
        for diff in second_differences(flow):
            total = total + charbonnier(diff)
    return total if isinstance(total, torch.Tensor) else torch.tensor(total, dtype=torch.float64)


def second_order_term_count(shapes) -> int:
    """Number of Charbonnier terms loss_second_order sums for flows of ``shapes``.

    Each shape is (..., channels, h, w); leading dims multiply.
    """
    count = 0
    for shape in shapes:
        *lead, h, w = shape
        per_channel = (h * max(w - 2, 0) + max(h - 2, 0) * w
                       + 2 * max(h - 2, 0) * max(w - 2, 0))
        count += per_channel * math.prod(lead)
    return count


def _mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def loss_first_order(warped, gt) -> torch.Tensor:
    a = warped.image if isinstance(warped, WarpedCloth) else warped
    b = gt.image if isinstance(gt, WarpedCloth) else gt
    if a.shape[-3:] != b.shape[-3:]:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _mean_l1(a, b)


def loss_distill(student, teacher) -> torch.Tensor:
    if len(student) != len(teacher):
        raise ValueError(f"pyramids have {len(student)} and {len(teacher)} levels")
    total = 0.0
    for s, t in zip(student, teacher):
        if s.shape[-3:] != t.shape[-3:]:
            raise ValueError(f"scale mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
        total = total + _mean_l1(s, t.to(s.dtype))
    return total


# --------------------------------------------------------------------------
# flow estimator

def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class _Encoder(nn.Sequential):
    def __init__(self, in_ch, channels):
        levels = []
        prev = in_ch
        for i, ch in enumerate(channels):
            stride = 1 if i == 0 else 2
            levels.append(nn.Sequential(_conv(prev, ch, stride), nn.SiLU(), _conv(ch, ch), nn.SiLU()))
            prev = ch
        super().__init__(*levels)

    def forward(self, x):
        feats = []
        for level in self:
            x = level(x)
            feats.append(x)
        return feats  # fine -> coarse


class _Refine(nn.Module):
    def __init__(self, cin, hidden):
        super().__init__()
        self.body = nn.Sequential(_conv(cin, hidden), nn.SiLU(), _conv(hidden, hidden), nn.SiLU())
        self.head = _conv(hidden, 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.body(x))


class FlowEstimator(nn.Module):
    """Two-branch encoder with coarse-to-fine residual flow heads.

    At each scale the cloth features are warped by the current flow and
    concatenated with the person features and the flow itself; three
    convolutions predict a residual. Flow heads start at zero.
    """

    def __init__(self, levels: int = 4, channels=(16, 24, 32, 48), hidden: int = 32, in_ch: int = 3):
        super().__init__()
        channels = tuple(channels)[:levels]
        if len(channels) != levels:
            raise ValueError(f"need {levels} channel widths, got {len(channels)}")
        self.levels = levels
        self.person_enc = _Encoder(in_ch, channels)
        self.cloth_enc = _Encoder(in_ch, channels)
        self.refine = nn.ModuleList(
            _Refine(2 * ch + 2, hidden) for ch in reversed(channels))

    def forward(self, person: torch.Tensor, cloth: torch.Tensor) -> list:
        pfeats = self.person_enc(person)[::-1]
        cfeats = self.cloth_enc(cloth)[::-1]
        flows = []
        flow = None
        for pf, cf, head in zip(pfeats, cfeats, self.refine):
            if flow is None:
                flow = pf.new_zeros(pf.shape[0], 2, *pf.shape[2:])
            else:
                flow = upsample_flow(flow, pf.shape[2:])
            warped = warp(cf, flow).image
            flow = flow + head(torch.cat([pf, warped, flow], dim=1))
            flows.append(flow)
        return flows


def predict_flow(person_like, cloth, model: FlowEstimator) -> list:
    person_like = _batched(person_like)
    cloth = _batched(cloth)
    if person_like.shape != cloth.shape:
        raise ValueError(f"shape mismatch: {tuple(person_like.shape)} vs {tuple(cloth.shape)}")
    check_resolution(person_like.shape[2], person_like.shape[3], model.levels - 1)
    dtype = next(model.parameters()).dtype
    return model(person_like.to(dtype), cloth.to(dtype))


def posture_awareness_loss(fake_set, target, gt: WarpedCloth, teacher_flows,
                           model: FlowEstimator, weights: LossWeights):
    """Warp loss averaged over a set of fakes sharing one posture.

    Returns (loss, warped) where ``warped`` is a WarpedCloth batched over
    the fake set, ready for the generator.
    """
    if len(fake_set) == 0:
        raise ValueError("fake set is empty")
    fakes = torch.stack([f.data if isinstance(f, ImageTensor) else f for f in fake_set])
    if fakes.dim() == 5:
        fakes = fakes.squeeze(1)
    n = fakes.shape[0]
    dtype = next(model.parameters()).dtype
    fakes = fakes.to(dtype)
    cloth = _batched(target).to(dtype).expand(n, -1, -1, -1)
    flows = predict_flow(fakes, cloth, model)
    warped = warp(cloth, flows[-1])
    # per-fake losses are means over equally sized items, so batching
    # them and averaging equals the mean over the set
    l_f = loss_first_order(warped, _batched(gt.image).to(dtype))
    l_sec = loss_second_order(flows) / n
    teacher = [_batched(t).to(dtype) for t in teacher_flows]
    l_d = loss_distill(flows, teacher)
    loss = weights.lambda_f * l_f + weights.lambda_sec * l_sec + weights.lambda_d * l_d
    return loss, warped
