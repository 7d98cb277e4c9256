"""Regional-mask guided generator.

Two independent encoder/decoder extractors (person, warped cloth) feed a
one-way synthesis path. Every synthesis level is an RM-ResBlk whose fusion
units de-normalise the running activation twice, once per branch, and mix
the two results with a learned single-channel mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensors import ImageTensor, WarpedCloth, check_resolution

NORM_EPS = 1e-5
DEFAULT_CHANNELS = (16, 32, 64, 128)


@dataclass
class FeaturePyramid:
    encoder_feats: list  # e^1 .. e^K, fine -> coarse
    decoder_feats: list  # f^0 .. f^K, coarse -> fine; f^0 is e^K


def _conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def _resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="nearest")


class FeatureExtractor(nn.Module):
    """K-level encoder, K-step decoder with encoder short connections.

    ``multilevel=False`` drops the short connections, leaving a plain
    bottleneck decoder (the single-level ablation).
    """

    def __init__(self, in_ch=3, channels=DEFAULT_CHANNELS, multilevel=True):
        super().__init__()
        self.depth = len(channels)
        self.multilevel = multilevel
        enc = []
        prev = in_ch
        for ch in channels:
            enc.append(nn.Sequential(_conv3(prev, ch, 2), nn.SiLU(), _conv3(ch, ch), nn.SiLU()))
            prev = ch
        self.encoder = nn.ModuleList(enc)
        # step i maps f^i (width of e^{K-i+1}, or e^K for i = 0) to the width of e^{K-i}
        widths = list(channels)
        dec = [nn.Sequential(_conv3(widths[-1], widths[-1]), nn.SiLU())]
        for i in range(1, self.depth):
            dec.append(nn.Sequential(_conv3(widths[-i], widths[-i - 1]), nn.SiLU()))
        self.decoder = nn.ModuleList(dec)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        enc = []
        for level in self.encoder:
            x = level(x)
            enc.append(x)
        f = enc[-1]
        dec = [f]
        for i, step in enumerate(self.decoder):
            skip = enc[self.depth - 1 - i]
            x = step(_resize(f, skip.shape[-2:]))
            f = x + skip if self.multilevel else x
            dec.append(f)
        return FeaturePyramid(enc, dec)


def normalize(f: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-sample, per-channel standardisation over the spatial dims."""
    if f.shape[-1] * f.shape[-2] < 2:
        raise ValueError("instance normalisation needs at least two spatial positions")
    mean = f.mean(dim=(-2, -1), keepdim=True)
    var = f.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (f - mean) / torch.sqrt(var + eps)


def modulate(h: torch.Tensor, feat: torch.Tensor, gamma_conv: nn.Conv2d,
             beta_conv: nn.Conv2d) -> torch.Tensor:
    if feat.shape[-2:] != h.shape[-2:]:
        raise ValueError(f"conditioning {tuple(feat.shape)} not resized to {tuple(h.shape)}")
    if gamma_conv.out_channels != h.shape[-3] or beta_conv.out_channels != h.shape[-3]:
        raise ValueError("modulation kernels do not match the activation's channels")
    return h * gamma_conv(feat) + beta_conv(feat)


def compute_mask(h_p: torch.Tensor, h_i: torch.Tensor, mask_conv: nn.Conv2d) -> torch.Tensor:
    if h_p.shape != h_i.shape:
        raise ValueError(f"shape mismatch: {tuple(h_p.shape)} vs {tuple(h_i.shape)}")
    logits = mask_conv(torch.cat([h_p, h_i], dim=-3))
    # keep entries strictly inside (0, 1) where the sigmoid rounds to an endpoint
    eps = torch.finfo(logits.dtype).eps
    return torch.sigmoid(logits).clamp(eps, 1 - eps)


def fuse(h_p: torch.Tensor, h_i: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if h_p.shape != h_i.shape or mask.shape[-2:] != h_p.shape[-2:] or mask.shape[-3] != 1:
        raise ValueError(
            f"cannot fuse {tuple(h_p.shape)}, {tuple(h_i.shape)} with mask {tuple(mask.shape)}")
    return (1 - mask) * h_p + mask * h_i


class FusionUnit(nn.Module):
    """normalise -> modulate x2 -> mask -> fuse -> 3x3 conv -> activation."""

    def __init__(self, cin, cout, cond_p, cond_i, use_mask=True):
        super().__init__()
        self.use_mask = use_mask
        self.gamma_p = nn.Conv2d(cond_p, cin, 1)
        self.beta_p = nn.Conv2d(cond_p, cin, 1)
        self.gamma_i = nn.Conv2d(cond_i, cin, 1)
        self.beta_i = nn.Conv2d(cond_i, cin, 1)
        for conv in (self.gamma_p, self.gamma_i):
            nn.init.ones_(conv.bias)
        if use_mask:
            self.mask_conv = _conv3(2 * cin, 1)
        else:
            self.mix = nn.Conv2d(2 * cin, cin, 1)
        self.conv = _conv3(cin, cout)
        self.act = nn.SiLU()
        self.probe = None  # set to a callable(h_p, h_i, mask, fused) for instrumentation

    def forward(self, x, feat_p, feat_i):
        h = normalize(x)
        h_p = modulate(h, feat_p, self.gamma_p, self.beta_p)
        h_i = modulate(h, feat_i, self.gamma_i, self.beta_i)
        if self.use_mask:
            mask = compute_mask(h_p, h_i, self.mask_conv)
            fused = fuse(h_p, h_i, mask)
        else:
            mask = None
            fused = self.mix(torch.cat([h_p, h_i], dim=-3))
        if self.probe is not None:
            self.probe(h_p, h_i, mask, fused)
        return self.act(self.conv(fused)), mask


class RMResBlk(nn.Module):
    def __init__(self, cin, cout, cond_p, cond_i, units=2, use_mask=True):
        super().__init__()
        widths = [cin] + [cout] * units
        self.units = nn.ModuleList(
            FusionUnit(a, b, cond_p, cond_i, use_mask) for a, b in zip(widths, widths[1:]))
        self.shortcut = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, f_hat, feat_p, feat_i):
        x = f_hat
        mask = None
        for unit in self.units:
            x, mask = unit(x, feat_p, feat_i)
        return self.shortcut(f_hat) + x, mask


def rm_resblk(f_hat, feat_p, feat_i, block: RMResBlk):
    return block(f_hat, feat_p, feat_i)


class RMGenerator(nn.Module):
    """Synthesis path: fused bottleneck, one RM-ResBlk per decoder level, tanh head.

    The bottleneck f_hat^0 mixes the coarsest features of both branches
    with its own regional mask (not returned).

    Block i doubles the running resolution and is conditioned on the
    decoder features f^i of both branches resized to match, so the last
    block (and its mask) sits at image resolution.
    """

    def __init__(self, channels=DEFAULT_CHANNELS, units=2, use_mask=True, multilevel=True,
                 in_ch=3, out_ch=3):
        super().__init__()
        channels = tuple(channels)
        self.depth = len(channels)
        self.use_mask = use_mask
        self.person = FeatureExtractor(in_ch, channels, multilevel)
        self.cloth = FeatureExtractor(in_ch, channels, multilevel)
        # bottleneck fusion: a mask of its own, or concat + 1x1 conv in the no-mask ablation
        if use_mask:
            self.init_mask = _conv3(2 * channels[-1], 1)
        else:
            self.init = nn.Conv2d(2 * channels[-1], channels[-1], 1)
        # width of f^i for i = 1..K
        cond = [channels[-1]] + [channels[-1 - i] for i in range(1, self.depth)]
        outs = [channels[-2 - i] if i < self.depth - 1 else channels[0] for i in range(self.depth)]
        ins = [channels[-1]] + outs[:-1]
        self.blocks = nn.ModuleList(
            RMResBlk(ci, co, cf, cf, units, use_mask) for ci, co, cf in zip(ins, outs, cond))
        self.head = _conv3(outs[-1], out_ch)

    def extract(self, image: torch.Tensor, branch: str) -> FeaturePyramid:
        if branch not in ("person", "cloth"):
            raise ValueError(f"unknown branch {branch!r}")
        return getattr(self, branch)(image)

    def forward(self, cloth: torch.Tensor, person: torch.Tensor):
        fp = self.person(person).decoder_feats
        fi = self.cloth(cloth).decoder_feats
        if self.use_mask:
            f_hat = fuse(fp[0], fi[0], compute_mask(fp[0], fi[0], self.init_mask))
        else:
            f_hat = self.init(torch.cat([fp[0], fi[0]], dim=1))
        masks = []
        sizes = [fp[i + 1].shape[-2:] for i in range(1, self.depth)] + [person.shape[-2:]]
        for i, (block, size) in enumerate(zip(self.blocks, sizes), start=1):
            f_hat = _resize(f_hat, size)
            f_hat, mask = block(f_hat, _resize(fp[i], size), _resize(fi[i], size))
            masks.append(mask)
        return torch.tanh(self.head(f_hat)), masks


def _image_batch(x) -> torch.Tensor:
    if isinstance(x, WarpedCloth):
        x = x.image
    if isinstance(x, ImageTensor):
        x = x.data
    return x.unsqueeze(0) if x.dim() == 3 else x


def extract_features(image, branch: str, model: RMGenerator) -> FeaturePyramid:
    image = _image_batch(image)
    check_resolution(image.shape[-2], image.shape[-1], model.depth - 1)
    return model.extract(image.to(next(model.parameters()).dtype), branch)


def generate(warped, person_like, model: RMGenerator):
    """Returns (try-on image batch, per-level masks coarse -> fine)."""
    cloth = _image_batch(warped)
    person = _image_batch(person_like)
    if cloth.shape[-3:] != person.shape[-3:]:
        raise ValueError(f"shape mismatch: {tuple(cloth.shape)} vs {tuple(person.shape)}")
    check_resolution(person.shape[-2], person.shape[-1], model.depth - 1)
    dtype = next(model.parameters()).dtype
    return model(cloth.to(dtype), person.to(dtype))
