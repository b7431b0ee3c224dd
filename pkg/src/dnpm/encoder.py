"""Detailed3DMM: an MLP from (identity, expression) into the DNPM's w+ space."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_state, save_checkpoint, state_to_tensors
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .generator import Generator, synthesis_forward, write_loss_csv
from .geometry import DEFAULT_D_MAX, CoreTensor, Mesh, apply_displacement, bilinear_proxy
from .perceptual import RandomConvPyramid, loss_lpips, loss_pixel

logger = logging.getLogger(__name__)


def style_allocation(num_ws: int) -> tuple[int, int, int]:
    """How many style rows the 3rd, 4th and 5th hidden layers emit."""
    if num_ws < 3:
        raise ConfigError(f"need at least 3 style rows, got {num_ws}")
    n3 = math.ceil(num_ws / 2)
    n5 = (num_ws - n3) // 2
    return n3, num_ws - n3 - n5, n5


@dataclass
class EncoderConfig:
    id_dim: int
    exp_dim: int
    latent_dim: int
    num_ws: int
    widths: Optional[tuple] = None

    def __post_init__(self):
        if min(self.id_dim, self.exp_dim, self.latent_dim) < 1:
            raise ConfigError("encoder dimensions must be positive")
        if self.widths is None:
            self.widths = (4 * self.latent_dim,) * 5
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5 or min(self.widths) < 1:
            raise ConfigError("encoder needs five positive layer widths")
        style_allocation(self.num_ws)

    @property
    def allocation(self) -> tuple[int, int, int]:
        return style_allocation(self.num_ws)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown EncoderConfig keys: {sorted(unknown)}")
        return cls(**d)


class Detailed3DMMEncoder(nn.Module):
    """Five ReLU layers; w_exp is re-injected after layer 1; heads on layers 3/4/5.

    Output rows are ordered layer-3 block, then layer-4, then layer-5. Heads
    start at zero, so a fresh encoder predicts the average latent.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.fc = nn.ModuleList(
            [
                nn.Linear(config.id_dim + config.exp_dim, w[0]),
                nn.Linear(w[0] + config.exp_dim, w[1]),
                nn.Linear(w[1], w[2]),
                nn.Linear(w[2], w[3]),
                nn.Linear(w[3], w[4]),
            ]
        )
        d = config.latent_dim
        self.heads = nn.ModuleList(nn.Linear(w[2 + k], n * d) for k, n in enumerate(config.allocation))
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, w_id: torch.Tensor, w_exp: torch.Tensor) -> torch.Tensor:
        single = w_id.ndim == 1
        if single:
            w_id, w_exp = w_id[None], w_exp[None]
        if w_id.shape[-1] != self.config.id_dim or w_exp.shape[-1] != self.config.exp_dim:
            raise ShapeError(
                f"expected id/exp dims {self.config.id_dim}/{self.config.exp_dim}, "
                f"got {w_id.shape[-1]}/{w_exp.shape[-1]}"
            )
        h = F.relu(self.fc[0](torch.cat([w_id, w_exp], dim=-1)))
        h = F.relu(self.fc[1](torch.cat([h, w_exp], dim=-1)))
        rows = []
        for k in range(2, 5):
            h = F.relu(self.fc[k](h))
            n = self.config.allocation[k - 2]
            if n:
                rows.append(self.heads[k - 2](h).reshape(h.shape[0], n, self.config.latent_dim))
        out = torch.cat(rows, dim=1)
        return out[0] if single else out

    def save(self, path, step: int = 0, seed=None) -> Path:
        return save_checkpoint(path, state_to_tensors(self), kind="encoder", config=self.config.to_dict(), step=step, seed=seed)

    @classmethod
    def load(cls, path) -> "Detailed3DMMEncoder":
        tensors, meta = load_checkpoint(path, kind="encoder")
        enc = cls(EncoderConfig.from_dict(meta["config"]))
        load_state(enc, tensors)
        return enc.eval()


def encoder_forward(encoder: Detailed3DMMEncoder, w_id, w_exp) -> torch.Tensor:
    dtype = encoder.fc[0].weight.dtype
    with torch.no_grad():
        return encoder(torch.as_tensor(w_id, dtype=dtype), torch.as_tensor(w_exp, dtype=dtype))


@dataclass
class EncoderTrainConfig:
    epochs: int = 100
    max_steps: Optional[int] = None
    batch_size: int = 8
    lr: float = 5e-4
    lambda_lpips: float = 0.8
    use_lpips: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderTrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown EncoderTrainConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.lr <= 0:
            raise ConfigError("invalid encoder training hyper-parameters")
        return cfg


def cosine_epoch_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Full rate in the first epoch, cosine decay over the rest."""
    if epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))


@dataclass
class EncoderTrainResult:
    encoder: Detailed3DMMEncoder
    step: int
    history: list = field(default_factory=list)  # (step, l_pixel, l_lpips, lr)


def train_encoder(
    w_id,
    w_exp,
    maps,
    generator: Generator,
    w_avg: torch.Tensor,
    hyper: EncoderTrainConfig | None = None,
    encoder: Optional[Detailed3DMMEncoder] = None,
    extractor=None,
    out_dir=None,
) -> EncoderTrainResult:
    """Fit the encoder so ``G(E(w_id, w_exp) + w_avg)`` reproduces ``maps``.

    The generator stays frozen; Adam with a per-epoch cosine schedule.
    """
    hyper = hyper or EncoderTrainConfig()
    dtype = generator.const.dtype
    w_id = torch.as_tensor(np.asarray(w_id), dtype=dtype)
    w_exp = torch.as_tensor(np.asarray(w_exp), dtype=dtype)
    maps = torch.as_tensor(np.asarray(maps), dtype=dtype)
    if not (len(w_id) == len(w_exp) == len(maps)) or len(maps) == 0:
        raise ShapeError("w_id, w_exp and maps must be non-empty and equally long")
    torch.manual_seed(hyper.seed)
    if encoder is None:
        encoder = Detailed3DMMEncoder(
            EncoderConfig(w_id.shape[1], w_exp.shape[1], generator.config.latent_dim, generator.num_ws)
        ).to(dtype)
    extractor = extractor if extractor is not None else RandomConvPyramid().to(dtype)
    generator.requires_grad_(False)
    w_avg = torch.as_tensor(w_avg, dtype=dtype)
    opt = torch.optim.Adam(encoder.parameters(), lr=hyper.lr)
    order = torch.Generator().manual_seed(hyper.seed)
    history = []
    step = 0
    n = len(maps)
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(hyper.epochs):
        lr = cosine_epoch_lr(hyper.lr, epoch, hyper.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=order)
        for start in range(0, n, hyper.batch_size):
            if hyper.max_steps is not None and step >= hyper.max_steps:
                break
            idx = perm[start : start + hyper.batch_size]
            pred = generator.synthesis(encoder(w_id[idx], w_exp[idx]) + w_avg)[:, 0]
            l_pix = loss_pixel(pred, maps[idx])
            loss = l_pix
            l_lp = torch.zeros((), dtype=dtype)
            if hyper.use_lpips:
                l_lp = loss_lpips(pred, maps[idx], extractor)
                loss = loss + hyper.lambda_lpips * l_lp
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            row = (step, l_pix.item(), l_lp.item(), lr)
            history.append(row)
            if not math.isfinite(loss.item()):
                path = encoder.save(out_dir / "diverged" / "encoder.bin", step=step) if out_dir else None
                raise TrainingDivergedError(f"non-finite encoder loss at step {step}", path)
            if out_dir is not None and hyper.checkpoint_every and step % hyper.checkpoint_every == 0:
                encoder.save(out_dir / f"encoder_{step:06d}.bin", step=step, seed=hyper.seed)
            if step % 250 == 0:
                logger.info("encoder step %d l_pixel=%.4f l_lpips=%.4f lr=%.2e", *row)
    encoder.eval()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        encoder.save(out_dir / "encoder.bin", step=step, seed=hyper.seed)
        write_loss_csv(out_dir / "metrics.csv", history, ("step", "l_pixel", "l_lpips", "lr"))
    return EncoderTrainResult(encoder, step, history)


def detailed_map(encoder, generator, w_avg, w_id, w_exp) -> np.ndarray:
    """``G(E(w_id, w_exp) + w_avg)`` as a float64 array."""
    offset = encoder_forward(encoder, w_id, w_exp)
    with torch.no_grad():
        img = synthesis_forward(generator, offset + torch.as_tensor(w_avg, dtype=offset.dtype))
    return img.double().numpy()


def detailed3dmm_generate(
    core: CoreTensor,
    w_id,
    w_exp,
    encoder: Detailed3DMMEncoder,
    generator: Generator,
    w_avg,
    s: float,
    subdiv: int,
    d_max: float = DEFAULT_D_MAX,
) -> Mesh:
    proxy = bilinear_proxy(core, w_id, w_exp)
    return apply_displacement(proxy, detailed_map(encoder, generator, w_avg, w_id, w_exp), s, subdiv, d_max)


@dataclass
class Detailed3DMM:
    """Everything needed to turn (w_id, w_exp) into a detailed mesh."""

    core: CoreTensor
    encoder: Detailed3DMMEncoder
    generator: Generator
    w_avg: torch.Tensor
    s: float = 1.0
    subdiv: int = 1
    d_max: float = DEFAULT_D_MAX

    def generate(self, w_id, w_exp) -> Mesh:
        return detailed3dmm_generate(
            self.core, w_id, w_exp, self.encoder, self.generator, self.w_avg, self.s, self.subdiv, self.d_max
        )

    def displacement(self, w_id, w_exp) -> np.ndarray:
        return detailed_map(self.encoder, self.generator, self.w_avg, w_id, w_exp)
