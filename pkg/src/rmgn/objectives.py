"""Generator losses and the joint objective."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensors import ImageTensor, LossWeights


class NonFiniteLoss(FloatingPointError):
    pass


class PerceptualEmbedder(nn.Module):
    """Frozen random conv stack used in place of a pretrained classifier.

    Stage 1 is linear (conv + average pool); later stages apply SiLU
    before their conv. Each stage halves the resolution and is tapped.
    """

    def __init__(self, seed: int = 0, channels=(16, 32, 64, 64), in_ch: int = 3,
                 dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.convs = nn.ModuleList()
        prev = in_ch
        for ch in channels:
            conv = nn.Conv2d(prev, ch, 3, padding=1)
            with torch.no_grad():
                std = math.sqrt(2.0 / (prev * 9))
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            self.convs.append(conv)
            prev = ch
        self.to(dtype)
        self.requires_grad_(False)
        self.eval()

    @property
    def width(self) -> int:
        return self.convs[-1].out_channels

    def forward(self, x: torch.Tensor) -> list:
        taps = []
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.silu(x)
            x = F.avg_pool2d(conv(x), 2, ceil_mode=True)
            taps.append(x)
        return taps

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Globally pooled final tap, [B, width]."""
        return self(x)[-1].mean(dim=(-2, -1))


def _batch(x) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        x = x.data
    return x.unsqueeze(0) if x.dim() == 3 else x


def loss_pixel(pred, gt) -> torch.Tensor:
    pred, gt = _batch(pred), _batch(gt)
    if pred.shape[-3:] != gt.shape[-3:]:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt.to(pred.dtype)).abs().mean()


def loss_perceptual(pred, gt, emb: PerceptualEmbedder, taps=None) -> torch.Tensor:
    """Sum over embedder taps of the mean absolute feature difference."""
    pred, gt = _batch(pred), _batch(gt)
    if pred.shape[-3:] != gt.shape[-3:]:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    dtype = emb.convs[0].weight.dtype
    fp = emb(pred.to(dtype))
    fg = emb(gt.to(dtype))
    order = range(len(fp)) if taps is None else taps
    total = 0.0
    for m in order:
        total = total + (fp[m] - fg[m].expand_as(fp[m])).abs().mean()
    return total


def generator_loss(preds, gt, weights: LossWeights, emb: PerceptualEmbedder) -> torch.Tensor:
    """Weighted pixel + perceptual loss summed (not averaged) over the fake set.

    ``preds`` is a list of images or one [n, C, H, W] batch.
    """
    if isinstance(preds, (list, tuple)):
        if not preds:
            raise ValueError("no predictions")
        preds = torch.stack([_batch(p)[0] for p in preds])
    preds = _batch(preds)
    n = preds.shape[0]
    if n == 0:
        raise ValueError("no predictions")
    gt = _batch(gt)
    # batched means are means over equally sized items; multiply by n for the sum
    loss = weights.lambda_f * loss_pixel(preds, gt)
    if weights.lambda_p:
        loss = loss + weights.lambda_p * loss_perceptual(preds, gt, emb)
    return n * loss


def total_objective(l_w, l_g):
    total = l_w + l_g
    value = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    if not math.isfinite(value):
        raise NonFiniteLoss(
            f"objective is not finite: L_W={float(torch.as_tensor(l_w).detach())!r}, "
            f"L_G={float(torch.as_tensor(l_g).detach())!r}")
    return total
