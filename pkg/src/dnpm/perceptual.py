"""Frozen feature extractors standing in for pretrained perceptual/identity nets.

Both are random convolutional pyramids with weights drawn from a fixed seed,
so they need no downloads and are identical on every machine. Anything with
the same call signature (a (B, 1, H, W) tensor -> list of per-sample
feature tensors) can be dropped in instead, e.g. a real AlexNet/VGG or
ArcFace wrapper.
"""
from __future__ import annotations

import math
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

PERCEPTUAL_SEED = 1234
IDENTITY_SEED = 4321


class FeatureExtractor(Protocol):
    def __call__(self, x: torch.Tensor) -> list: ...


def _frozen_convs(channels, seed: int) -> nn.ModuleList:
    gen = torch.Generator().manual_seed(seed)
    convs = nn.ModuleList()
    for cin, cout in zip(channels[:-1], channels[1:]):
        conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
            conv.bias.zero_()
        convs.append(conv)
    convs.requires_grad_(False)
    return convs


class RandomConvPyramid(nn.Module):
    """Multi-scale perceptual features for the LPIPS-style loss.

    Each scale is flattened and divided by the square root of its size so
    the three scales contribute comparably to the L2 distance.
    """

    def __init__(self, channels=(1, 16, 32, 64), seed: int = PERCEPTUAL_SEED):
        super().__init__()
        self.convs = _frozen_convs(channels, seed)

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        for conv in self.convs:
            x = F.relu(conv.to(x.dtype)(x))
            feats.append(x.flatten(1) / math.sqrt(x[0].numel()))
        return feats


class PixelFeatures(nn.Module):
    """Identity extractor: the raw pixels are the only feature."""

    def forward(self, x: torch.Tensor) -> list:
        return [x.flatten(1)]


class RandomIdentityNet(nn.Module):
    """Five-tap identity features R_1..R_5, each average pooled to a ``pool`` x ``pool`` grid.

    Taps are read before each ReLU so pooled vectors can take either sign.
    A global average would collapse the first tap onto one direction scaled
    by the map mean, whose cosine is a near-discontinuous sign test.
    """

    def __init__(self, channels=(1, 16, 32, 32, 64, 64), seed: int = IDENTITY_SEED, pool: int = 4):
        super().__init__()
        self.convs = _frozen_convs(channels, seed)
        self.pool = pool

    def forward(self, x: torch.Tensor) -> list:
        taps = []
        for conv in self.convs:
            x = conv.to(x.dtype)(x)
            taps.append(F.adaptive_avg_pool2d(x, min(self.pool, x.shape[-1])).flatten(1))
            x = F.relu(x)
        return taps


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def loss_pixel(pred, target) -> torch.Tensor:
    """Mean absolute texel difference."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def loss_lpips(pred, target, extractor: FeatureExtractor) -> torch.Tensor:
    """Batch mean of the L2 distance between stacked extractor features."""
    pred, target = _as_batch(pred), _as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    fa = torch.cat(extractor(pred), dim=1)
    fb = torch.cat(extractor(target), dim=1)
    if fa.shape != fb.shape:
        raise ValueError("extractor returned mismatched feature shapes")
    sq = (fa - fb).square().sum(dim=1)
    # sqrt has an infinite slope at 0; route identical pairs through a zero gradient
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq)).mean()


def cosine_terms(fa: torch.Tensor, fb: torch.Tensor):
    """Per-sample cosine similarity; zero-norm rows give 0 and are flagged."""
    na = fa.norm(dim=1)
    nb = fb.norm(dim=1)
    degenerate = (na == 0) | (nb == 0)
    denom = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = torch.where(degenerate, torch.zeros_like(na), (fa * fb).sum(dim=1) / denom)
    return cos, degenerate


def loss_id(pred, target, extractor: FeatureExtractor, return_diagnostics: bool = False):
    """``sum_i (1 - cos(R_i(pred), R_i(target)))`` over the extractor taps, batch-averaged."""
    pred, target = _as_batch(pred), _as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    taps_a, taps_b = extractor(pred), extractor(target)
    total = 0.0
    flags = []
    for fa, fb in zip(taps_a, taps_b):
        cos, bad = cosine_terms(fa.flatten(1), fb.flatten(1))
        total = total + (1.0 - cos)
        flags.append(bad)
    loss = total.mean()
    if return_diagnostics:
        return loss, {"zero_norm_taps": torch.stack(flags, dim=1)}
    return loss
