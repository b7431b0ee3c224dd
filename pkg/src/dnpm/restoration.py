"""Restoring high-quality displacement maps from degraded inputs through the DNPM prior."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import load_checkpoint, load_state, save_checkpoint, state_to_tensors
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .fitting import FitConfig, FitResult, fit_landmarks
from .generator import Generator, synthesis_forward, write_loss_csv
from .geometry import DEFAULT_D_MAX, CoreTensor, Mesh, apply_displacement, bilinear_proxy
from .perceptual import RandomConvPyramid, RandomIdentityNet, loss_id, loss_lpips, loss_pixel

logger = logging.getLogger(__name__)

MODES = ("downsample", "lowres_blur")
FACTORS = (4, 8)


@dataclass
class DegradationSpec:
    mode: str = "downsample"
    factor: int = 4
    target_resolution: int = 64
    gaussian_sigma: float = 1.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.factor not in FACTORS:
            raise ConfigError(f"factor must be one of {FACTORS}, got {self.factor!r}")
        if self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be positive")
        if self.target_resolution < 1:
            raise ConfigError("target_resolution must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown DegradationSpec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "DegradationSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def area_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ConfigError(f"factor {factor} does not divide the {h}x{w} source")
    return img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:]).mean(axis=(1, 3))


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h == size and w == size:
        return img
    if h % size == 0 and w % size == 0 and h // size == w // size:
        return area_downsample(img, h // size)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))
    t = t.permute(2, 0, 1)[None] if t.ndim == 3 else t[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=size < h)
    out = out[0].permute(1, 2, 0) if img.ndim == 3 else out[0, 0]
    return out.numpy()


def degrade(image, spec: DegradationSpec) -> np.ndarray:
    """Deterministic degradation of a map (H, W) or image (H, W, C).

    ``downsample`` area-averages ``factor`` x ``factor`` blocks; ``lowres_blur``
    resizes to ``target_resolution`` and applies a Gaussian blur.
    """
    img = np.asarray(image, dtype=np.float64)
    if spec.mode == "downsample":
        return area_downsample(img, spec.factor)
    small = _resize(img, spec.target_resolution)
    sigma = (spec.gaussian_sigma, spec.gaussian_sigma) + (0,) * (small.ndim - 2)
    return ndimage.gaussian_filter(small, sigma=sigma, mode="reflect")


def bicubic_upsample(low, size: int) -> np.ndarray:
    """Comparison baseline: bicubic resize of (H, W) or (N, H, W) maps, clamped to [-1, 1]."""
    t = torch.as_tensor(np.asarray(low), dtype=torch.float64)
    single = t.ndim == 2
    t = t[None, None] if single else t[:, None]
    out = F.interpolate(t, size=(size, size), mode="bicubic", align_corners=False).clamp(-1, 1)
    out = out[0, 0] if single else out[:, 0]
    return out.numpy()


@dataclass
class RestorerConfig:
    latent_dim: int
    num_ws: int
    in_resolution: int = 64
    channels: tuple = (16, 32, 64, 64)
    pool: int = 4
    hidden: tuple = ()  # widths of an MLP trunk between pooled features and heads

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.hidden = tuple(int(c) for c in self.hidden)
        if self.hidden and min(self.hidden) < 1:
            raise ConfigError("hidden widths must be positive")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError("restorer needs at least one conv level")
        if self.in_resolution >> len(self.channels) < 1:
            raise ConfigError("too many conv levels for the working resolution")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RestorerConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown RestorerConfig keys: {sorted(unknown)}")
        return cls(**d)


class Restorer(nn.Module):
    """Strided conv pyramid; each level pooled to ``pool`` x ``pool``; optional MLP trunk;
    one linear head per style row.

    Inputs of any size are first resized bilinearly to ``in_resolution``.
    Heads start at zero so the untrained restorer returns the average latent.
    """

    def __init__(self, config: RestorerConfig):
        super().__init__()
        self.config = config
        chans = (1,) + config.channels
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        feat = 0
        res = config.in_resolution
        for c in config.channels:
            res = (res + 1) // 2
            feat += c * min(config.pool, res) ** 2
        trunk = []
        for width in config.hidden:
            trunk.append(nn.Linear(feat, width))
            feat = width
        self.trunk = nn.ModuleList(trunk)
        self.heads = nn.ModuleList(nn.Linear(feat, config.latent_dim) for _ in range(config.num_ws))
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x[:, None]
        r = self.config.in_resolution
        if x.shape[-2:] != (r, r):
            x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False)
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            p = min(self.config.pool, x.shape[-1])
            feats.append(F.adaptive_avg_pool2d(x, p).flatten(1))
        return torch.cat(feats, dim=1)

    def forward(self, low: torch.Tensor) -> torch.Tensor:
        single = low.ndim == 2
        if single:
            low = low[None]
        f = self.features(low)
        for layer in self.trunk:
            f = F.leaky_relu(layer(f), 0.2)
        out = torch.stack([head(f) for head in self.heads], dim=1)
        return out[0] if single else out

    def save(self, path, step: int = 0, seed=None) -> Path:
        return save_checkpoint(path, state_to_tensors(self), kind="restorer", config=self.config.to_dict(), step=step, seed=seed)

    @classmethod
    def load(cls, path) -> "Restorer":
        tensors, meta = load_checkpoint(path, kind="restorer")
        net = cls(RestorerConfig.from_dict(meta["config"]))
        load_state(net, tensors)
        return net.eval()


def restorer_forward(restorer: Restorer, low) -> torch.Tensor:
    dtype = restorer.convs[0].weight.dtype
    with torch.no_grad():
        return restorer(torch.as_tensor(np.asarray(low), dtype=dtype))


def restore(restorer: Restorer, generator: Generator, w_avg, low) -> np.ndarray:
    """``G(E_deg(low) + w_avg)`` with noise disabled; accepts one map or a stack."""
    offset = restorer_forward(restorer, low)
    with torch.no_grad():
        img = synthesis_forward(generator, offset + torch.as_tensor(w_avg, dtype=offset.dtype))
    return img.double().numpy()


@dataclass
class RestorerTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 5e-4
    lambda_lpips: float = 0.8
    lambda_id: float = 0.1
    use_pixel: bool = True
    use_lpips: bool = True
    use_id: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RestorerTrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown RestorerTrainConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.steps < 0 or cfg.batch_size < 1 or cfg.lr <= 0:
            raise ConfigError("invalid restorer training hyper-parameters")
        return cfg


@dataclass
class RestorerTrainResult:
    restorer: Restorer
    step: int
    history: list = field(default_factory=list)  # (step, l_pixel, l_lpips, l_id)


def restoration_losses(pred, high, hyper: RestorerTrainConfig, perceptual, identity):
    """Weighted total plus the three unweighted terms. Disabled terms are not evaluated."""
    zero = torch.zeros((), dtype=pred.dtype)
    l_pix = loss_pixel(pred, high) if hyper.use_pixel else zero
    l_lp = loss_lpips(pred, high, perceptual) if hyper.use_lpips else zero
    l_id = loss_id(pred, high, identity) if hyper.use_id else zero
    total = zero
    if hyper.use_pixel:
        total = total + l_pix
    if hyper.use_lpips:
        total = total + hyper.lambda_lpips * l_lp
    if hyper.use_id:
        total = total + hyper.lambda_id * l_id
    return total, (l_pix, l_lp, l_id)


def train_restorer(
    lows,
    highs,
    generator: Generator,
    w_avg,
    hyper: RestorerTrainConfig | None = None,
    restorer: Optional[Restorer] = None,
    perceptual=None,
    identity=None,
    out_dir=None,
) -> RestorerTrainResult:
    """Train ``E_deg`` against a frozen generator on (low, high) pairs."""
    hyper = hyper or RestorerTrainConfig()
    dtype = generator.const.dtype
    lows = torch.as_tensor(np.asarray(lows), dtype=dtype)
    highs = torch.as_tensor(np.asarray(highs), dtype=dtype)
    if len(lows) != len(highs) or len(lows) == 0:
        raise ShapeError("need equally many low and high maps")
    torch.manual_seed(hyper.seed)
    if restorer is None:
        restorer = Restorer(
            RestorerConfig(generator.config.latent_dim, generator.num_ws, in_resolution=generator.config.out_resolution)
        ).to(dtype)
    perceptual = perceptual if perceptual is not None else RandomConvPyramid().to(dtype)
    identity = identity if identity is not None else RandomIdentityNet().to(dtype)
    generator.requires_grad_(False)
    w_avg = torch.as_tensor(w_avg, dtype=dtype)
    opt = torch.optim.Adam(restorer.parameters(), lr=hyper.lr)
    order = torch.Generator().manual_seed(hyper.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []
    n = len(lows)
    perm = torch.randperm(n, generator=order)
    cursor = 0
    for step in range(1, hyper.steps + 1):
        if cursor + hyper.batch_size > n:
            perm = torch.randperm(n, generator=order)
            cursor = 0
        idx = perm[cursor : cursor + hyper.batch_size]
        cursor += hyper.batch_size
        lr = 0.5 * hyper.lr * (1.0 + math.cos(math.pi * (step - 1) / max(hyper.steps, 1)))
        for group in opt.param_groups:
            group["lr"] = lr
        pred = generator.synthesis(restorer(lows[idx]) + w_avg)[:, 0]
        total, (l_pix, l_lp, l_id) = restoration_losses(pred, highs[idx], hyper, perceptual, identity)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        row = (step, l_pix.item(), l_lp.item(), l_id.item())
        history.append(row)
        if not math.isfinite(total.item()):
            path = restorer.save(out_dir / "diverged" / "restorer.bin", step=step) if out_dir else None
            raise TrainingDivergedError(f"non-finite restorer loss at step {step}", path)
        if out_dir is not None and hyper.checkpoint_every and step % hyper.checkpoint_every == 0:
            restorer.save(out_dir / f"restorer_{step:06d}.bin", step=step, seed=hyper.seed)
        if step % 250 == 0:
            logger.info("restorer step %d pixel=%.4f lpips=%.4f id=%.4f", *row)
    restorer.eval()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        restorer.save(out_dir / "restorer.bin", step=hyper.steps, seed=hyper.seed)
        write_loss_csv(out_dir / "metrics.csv", history, ("step", "l_pixel", "l_lpips", "l_id"))
    return RestorerTrainResult(restorer, hyper.steps, history)


# ------------------------------------------------- degraded image -> mesh


class GroundTruthRegressor:
    """Image->displacement stand-in that returns a fixed, known low-quality map."""

    def __init__(self, low_map):
        self.low_map = np.asarray(low_map, dtype=np.float64)

    def __call__(self, image) -> np.ndarray:
        return self.low_map


class FileRegressor:
    """Adapter for an external image->displacement tool that wrote a 16-bit PNG."""

    def __init__(self, path):
        self.path = Path(path)

    def __call__(self, image) -> np.ndarray:
        from .io import read_map_png

        return read_map_png(self.path)


class FixedLandmarks:
    """Landmark detector stand-in returning precomputed 2D points."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64)

    def __call__(self, image) -> np.ndarray:
        return self.points


@dataclass
class Reconstruction:
    mesh: Mesh
    proxy: Mesh
    fit: FitResult
    low_map: np.ndarray
    restored_map: np.ndarray


def reconstruct_from_degraded_image(
    image,
    core: CoreTensor,
    landmark_ids,
    landmark_detector: Optional[Callable],
    ext_regressor: Optional[Callable],
    restorer: Restorer,
    generator: Generator,
    w_avg,
    s: float,
    subdiv: int = 1,
    fit_config: Optional[FitConfig] = None,
    d_max: float = DEFAULT_D_MAX,
) -> Reconstruction:
    """Fit the proxy to detected landmarks, restore the regressed map, displace."""
    if landmark_detector is None or ext_regressor is None:
        raise ConfigError("both a landmark detector and an image->displacement regressor must be bound")
    fit = fit_landmarks(core, landmark_ids, landmark_detector(image), config=fit_config)
    proxy = bilinear_proxy(core, fit.w_id, fit.w_exp)
    low = np.asarray(ext_regressor(image), dtype=np.float64)
    restored = restore(restorer, generator, w_avg, low)
    mesh = apply_displacement(proxy, restored, s, subdiv, d_max)
    return Reconstruction(mesh, proxy, fit, low, restored)
