"""Style-based generator over displacement maps (the DNPM).

A StyleGAN2-style network: an MLP mapping z -> w, a learned 4x4 constant,
two modulated/demodulated 3x3 convolutions per resolution, and a skip
architecture summing per-resolution 1-channel readouts. Style row ``i`` of
a w+ code drives feature layer ``i``; the readout of each resolution reuses
the row of that resolution's second convolution. Row resolutions are
therefore 4, 4, 8, 8, ..., R, R and there are ``2 * (log2(R) - 1)`` rows.
"""
from __future__ import annotations

import csv
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

logger = logging.getLogger(__name__)

_LRELU_GAIN = math.sqrt(2.0)


def num_style_layers(resolution: int) -> int:
    return 2 * (int(round(math.log2(resolution))) - 1)


def default_channels(resolution: int, base: int = 1024, cap: int = 64) -> dict:
    res = [2**k for k in range(2, int(math.log2(resolution)) + 1)]
    return {r: int(min(cap, max(base // r, 8))) for r in res}


@dataclass
class GeneratorConfig:
    out_resolution: int = 64
    latent_dim: int = 64
    channels: Optional[dict] = None  # resolution -> feature channels
    mapping_layers: int = 8
    mapping_activation: str = "lrelu"  # or "linear"
    normalize_z: bool = True

    def __post_init__(self):
        r = self.out_resolution
        if r < 8 or r & (r - 1):
            raise ConfigError(f"out_resolution must be a power of two >= 8, got {r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.mapping_layers < 1:
            raise ConfigError("mapping_layers must be >= 1")
        if self.mapping_activation not in ("lrelu", "linear"):
            raise ConfigError(f"unknown mapping activation {self.mapping_activation!r}")
        if self.channels is None:
            self.channels = default_channels(r)
        self.channels = {int(k): int(v) for k, v in self.channels.items()}
        missing = [res for res in self.resolutions if res not in self.channels]
        if missing:
            raise ConfigError(f"channel schedule missing resolutions {missing}")
        sched = [self.channels[res] for res in self.resolutions]
        if any(b > a for a, b in zip(sched, sched[1:])):
            raise ConfigError("channel schedule must be non-increasing with resolution")

    @property
    def resolutions(self) -> list:
        return [2**k for k in range(2, int(math.log2(self.out_resolution)) + 1)]

    @property
    def num_style_layers(self) -> int:
        return num_style_layers(self.out_resolution)

    def style_resolutions(self) -> list:
        return [r for r in self.resolutions for _ in range(2)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = {str(k): v for k, v in self.channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown GeneratorConfig keys: {sorted(unknown)}")
        return cls(**d)


class MappingNetwork(nn.Module):
    def __init__(self, dim: int, n_layers: int, activation: str = "lrelu", normalize_z: bool = True):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_layers))
        self.activation = activation
        self.normalize_z = normalize_z
        for layer in self.layers:
            nn.init.normal_(layer.weight, std=1.0 / math.sqrt(dim))
            nn.init.zeros_(layer.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z
        if self.normalize_z:
            x = x * torch.rsqrt(x.square().mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = layer(x)
            if self.activation == "lrelu":
                x = F.leaky_relu(x, 0.2)
        return x

    @torch.no_grad()
    def identity_(self) -> "MappingNetwork":
        for layer in self.layers:
            layer.weight.copy_(torch.eye(layer.weight.shape[0]))
            layer.bias.zero_()
        return self


class ModulatedConv(nn.Module):
    """Modulated convolution, computed by scaling activations instead of weights.

    ``conv(x * s, W) * d`` equals a conv with the per-sample weight
    ``W * s`` demodulated by ``d``, without materializing one kernel per sample.
    """

    def __init__(self, in_ch: int, out_ch: int, w_dim: int, kernel: int = 3, demodulate: bool = True):
        super().__init__()
        self.affine = nn.Linear(w_dim, in_ch)
        nn.init.normal_(self.affine.weight, std=1.0 / math.sqrt(w_dim))
        nn.init.ones_(self.affine.bias)
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.gain = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        s = self.affine(w)
        weight = self.weight * self.gain
        x = F.conv2d(x * s[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            wsq = weight.square().sum(dim=(2, 3))  # (out, in)
            d = torch.rsqrt(s.square() @ wsq.t() + 1e-8)
            x = x * d[:, :, None, None]
        return x


class SynthesisLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, w_dim: int, resolution: int, upsample: bool):
        super().__init__()
        self.conv = ModulatedConv(in_ch, out_ch, w_dim)
        self.upsample = upsample
        self.resolution = resolution
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, w, noise: Optional[torch.Tensor]):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv(x, w)
        if noise is not None:
            x = x + noise * self.noise_strength
        return F.leaky_relu(x + self.bias[None, :, None, None], 0.2) * _LRELU_GAIN


class ToMap(nn.Module):
    def __init__(self, in_ch: int, w_dim: int):
        super().__init__()
        self.conv = ModulatedConv(in_ch, 1, w_dim, kernel=1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]


class Generator(nn.Module):
    """Mapping + synthesis network. ``GeneratorParams`` is simply this module's state."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        d = config.latent_dim
        ch = config.channels
        self.mapping = MappingNetwork(d, config.mapping_layers, config.mapping_activation, config.normalize_z)
        self.const = nn.Parameter(torch.randn(1, ch[4], 4, 4))
        layers, readouts = [], []
        prev = ch[4]
        for res in config.resolutions:
            layers.append(SynthesisLayer(prev, ch[res], d, res, upsample=res > 4))
            layers.append(SynthesisLayer(ch[res], ch[res], d, res, upsample=False))
            readouts.append(ToMap(ch[res], d))
            prev = ch[res]
        self.layers = nn.ModuleList(layers)
        self.readouts = nn.ModuleList(readouts)

    @property
    def num_ws(self) -> int:
        return len(self.layers)

    def make_noise(self, batch: int, seed: int, dtype=torch.float32) -> list:
        gen = torch.Generator().manual_seed(int(seed))
        return [torch.randn(batch, 1, l.resolution, l.resolution, generator=gen, dtype=dtype) for l in self.layers]

    def synthesis(
        self,
        wplus: torch.Tensor,
        noise_mode: str = "zero",
        noise_seed: int = 0,
        noise: Optional[list] = None,
        return_activations: bool = False,
    ):
        """w+ codes (B, L, d) -> maps (B, 1, R, R) in [-1, 1].

        ``noise_mode`` is ``"zero"`` (deterministic, no noise), ``"seeded"``
        (noise drawn from ``noise_seed``) or ``"random"`` (global RNG, for
        training).
        """
        if wplus.ndim != 3 or wplus.shape[1] != self.num_ws or wplus.shape[2] != self.config.latent_dim:
            raise ShapeError(
                f"w+ must be (B, {self.num_ws}, {self.config.latent_dim}), got {tuple(wplus.shape)}"
            )
        styles = [wplus[:, i] for i in range(self.num_ws)]
        return self._synthesize(styles, noise_mode, noise_seed, noise, return_activations)

    def synthesis_w(self, w: torch.Tensor, noise_mode: str = "zero", noise_seed: int = 0):
        """Single-w mode: every layer is modulated by the same (B, d) code."""
        if w.ndim != 2 or w.shape[1] != self.config.latent_dim:
            raise ShapeError(f"w must be (B, {self.config.latent_dim}), got {tuple(w.shape)}")
        return self._synthesize([w] * self.num_ws, noise_mode, noise_seed, None, False)

    def _synthesize(self, styles, noise_mode, noise_seed, noise, return_activations):
        batch = styles[0].shape[0]
        dtype = styles[0].dtype
        if noise is None:
            if noise_mode == "zero":
                noise = [None] * self.num_ws
            elif noise_mode == "seeded":
                noise = self.make_noise(batch, noise_seed, dtype)
            elif noise_mode == "random":
                noise = [torch.randn(batch, 1, l.resolution, l.resolution, dtype=dtype) for l in self.layers]
            else:
                raise ValueError(f"unknown noise mode {noise_mode!r}")
        x = self.const.expand(batch, -1, -1, -1).to(dtype)
        out = None
        acts = []
        for b, readout in enumerate(self.readouts):
            for i in (2 * b, 2 * b + 1):
                x = self.layers[i](x, styles[i], noise[i])
                acts.append(x)
            y = readout(x, styles[2 * b + 1])
            if out is not None:
                out = F.interpolate(out, scale_factor=2, mode="bilinear", align_corners=False)
                y = y + out
            out = y
        img = torch.tanh(out)
        return (img, acts) if return_activations else img

    def forward(self, z: torch.Tensor, noise_mode: str = "zero", noise_seed: int = 0) -> torch.Tensor:
        return self.synthesis(broadcast_w_to_wplus(self.mapping(z), self.num_ws), noise_mode, noise_seed)

    def save(self, path, step: int = 0, seed=None, extra=None) -> Path:
        return save_checkpoint(
            path, state_to_tensors(self), kind="generator", config=self.config.to_dict(), step=step, seed=seed, extra=extra
        )

    @classmethod
    def load(cls, path) -> "Generator":
        tensors, meta = load_checkpoint(path, kind="generator")
        gen = cls(GeneratorConfig.from_dict(meta["config"]))
        load_state(gen, tensors)
        return gen.eval()


def mapping_forward(gen: Generator, z) -> torch.Tensor:
    with torch.no_grad():
        return gen.mapping(torch.as_tensor(z, dtype=gen.const.dtype))


def broadcast_w_to_wplus(w: torch.Tensor, n_layers: int) -> torch.Tensor:
    """(d,) -> (L, d) or (B, d) -> (B, L, d)."""
    return w.unsqueeze(-2).expand(*w.shape[:-1], n_layers, w.shape[-1]).contiguous()


@torch.no_grad()
def synthesis_forward(gen: Generator, wplus, noise_mode: str = "zero", noise_seed: int = 0) -> torch.Tensor:
    """Single or batched w+ -> map(s) with the channel axis dropped (inference only)."""
    wplus = torch.as_tensor(wplus, dtype=gen.const.dtype)
    single = wplus.ndim == 2
    if single:
        wplus = wplus[None]
    img = gen.synthesis(wplus, noise_mode, noise_seed)[:, 0]
    return img[0] if single else img


def average_latent(gen: Generator, n_samples: int, seed: int = 0) -> torch.Tensor:
    """Broadcast mean of ``mapping(z)`` over ``n_samples`` standard-normal draws, shape (L, d)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    g = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n_samples, gen.config.latent_dim, generator=g, dtype=gen.const.dtype)
    with torch.no_grad():
        w = gen.mapping(z).mean(dim=0)
    return broadcast_w_to_wplus(w, gen.num_ws)


# ---------------------------------------------------------------- training


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv0 = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv0(x), 0.2)
        y = F.avg_pool2d(F.leaky_relu(self.conv1(y), 0.2), 2)
        s = F.avg_pool2d(self.skip(x), 2)
        return (y + s) / math.sqrt(2.0)


class Discriminator(nn.Module):
    def __init__(self, config: GeneratorConfig, mbstd_group: int = 4):
        super().__init__()
        ch = config.channels
        res = config.resolutions[::-1]
        self.fromrgb = nn.Conv2d(1, ch[res[0]], 1)
        self.blocks = nn.ModuleList(DiscriminatorBlock(ch[r], ch[r // 2]) for r in res[:-1])
        self.mbstd_group = mbstd_group
        self.conv = nn.Conv2d(ch[4] + 1, ch[4], 3, padding=1)
        self.fc = nn.Linear(ch[4] * 16, ch[4])
        self.out = nn.Linear(ch[4], 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.fromrgb(img), 0.2)
        for block in self.blocks:
            x = block(x)
        b, c, h, w = x.shape
        g = min(self.mbstd_group, b)
        if b % g:
            g = 1
        y = x.reshape(g, -1, c, h, w)
        y = (y - y.mean(0)).square().mean(0).add(1e-8).sqrt().mean(dim=(1, 2, 3))  # (b/g,)
        y = y.reshape(-1, 1, 1, 1).repeat(g, 1, h, w)
        x = torch.cat([x, y], dim=1)
        x = F.leaky_relu(self.conv(x), 0.2)
        x = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        return self.out(x).squeeze(1)


@dataclass
class DNPMTrainConfig:
    steps: int = 20000
    batch_size: int = 8
    lr: float = 0.002
    betas: tuple = (0.0, 0.99)
    mapping_lr_mul: float = 0.01
    r1_gamma: float = 1.0
    r1_interval: int = 16
    ema_kimg: float = 2.0
    ema_rampup: float = 0.05
    checkpoint_every: int = 1000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DNPMTrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown DNPMTrainConfig keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**d)
        if cfg.steps < 0 or cfg.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        return cfg


@dataclass
class DNPMTrainResult:
    generator: Generator  # EMA weights, the DNPM used downstream
    discriminator: Discriminator
    step: int
    history: list = field(default_factory=list)  # rows of (step, g_loss, d_loss, r1)


def _check_finite(values, step, out_dir, modules):
    if all(math.isfinite(v) for v in values):
        return
    path = None
    if out_dir is not None:
        path = Path(out_dir) / "diverged" / "generator.bin"
        modules["generator"].save(path, step=step)
        save_checkpoint(
            Path(out_dir) / "diverged" / "discriminator.bin",
            state_to_tensors(modules["discriminator"]),
            kind="discriminator",
            config={},
            step=step,
        )
    raise TrainingDivergedError(f"non-finite loss at step {step}", path)


def train_dnpm(
    dataset,
    gen_config: GeneratorConfig,
    hyper: DNPMTrainConfig | None = None,
    out_dir=None,
    init: Optional[Generator] = None,
) -> DNPMTrainResult:
    """Adversarial training of the DNPM on a stack of maps (N, R, R) in [-1, 1].

    Non-saturating logistic losses with lazy R1 on real samples. When
    ``out_dir`` is given, checkpoints land there every ``checkpoint_every``
    steps and the loss curve is written to ``losses.csv``.
    """
    hyper = hyper or DNPMTrainConfig()
    data = torch.as_tensor(np.asarray(dataset), dtype=torch.float32)
    if data.ndim != 3 or len(data) == 0:
        raise ShapeError("dataset must be a non-empty (N, R, R) stack")
    if data.shape[1:] != (gen_config.out_resolution,) * 2:
        raise ShapeError(f"maps must be {gen_config.out_resolution}x{gen_config.out_resolution}")
    data = data[:, None]
    torch.manual_seed(hyper.seed)
    G = init if init is not None else Generator(gen_config)
    D = Discriminator(gen_config)
    G_ema = Generator(gen_config)
    G_ema.load_state_dict(G.state_dict())
    G_ema.requires_grad_(False)
    mapping_params = list(G.mapping.parameters())
    other_params = [p for n, p in G.named_parameters() if not n.startswith("mapping.")]
    g_opt = torch.optim.Adam(
        [{"params": other_params}, {"params": mapping_params, "lr": hyper.lr * hyper.mapping_lr_mul}],
        lr=hyper.lr,
        betas=hyper.betas,
    )
    # lazy regularization rescaling, as in StyleGAN2
    c = hyper.r1_interval / (hyper.r1_interval + 1)
    d_opt = torch.optim.Adam(D.parameters(), lr=hyper.lr * c, betas=tuple(b**c for b in hyper.betas))
    order_gen = torch.Generator().manual_seed(hyper.seed)
    d = gen_config.latent_dim
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    r1_val = 0.0
    for step in range(1, hyper.steps + 1):
        idx = torch.randint(len(data), (hyper.batch_size,), generator=order_gen)
        real = data[idx]

        # generator
        z = torch.randn(hyper.batch_size, d)
        fake = G(z, noise_mode="random")
        g_loss = F.softplus(-D(fake)).mean()
        g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        g_opt.step()

        # discriminator
        z = torch.randn(hyper.batch_size, d)
        with torch.no_grad():
            fake = G(z, noise_mode="random")
        d_loss = F.softplus(D(fake)).mean() + F.softplus(-D(real)).mean()
        d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        d_opt.step()

        if hyper.r1_gamma > 0 and step % hyper.r1_interval == 0:
            real_r = real.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(D(real_r).sum(), real_r, create_graph=True)
            penalty = grad.square().sum(dim=(1, 2, 3)).mean()
            d_opt.zero_grad(set_to_none=True)
            (penalty * (hyper.r1_gamma / 2) * hyper.r1_interval).backward()
            d_opt.step()
            r1_val = penalty.item()

        # EMA
        ema_nimg = hyper.ema_kimg * 1000
        if hyper.ema_rampup:
            ema_nimg = min(ema_nimg, step * hyper.batch_size * hyper.ema_rampup)
        beta = 0.5 ** (hyper.batch_size / max(ema_nimg, 1e-8))
        with torch.no_grad():
            for p_ema, p in zip(G_ema.parameters(), G.parameters()):
                p_ema.copy_(p.detach().lerp(p_ema, beta))

        row = (step, g_loss.item(), d_loss.item(), r1_val)
        history.append(row)
        _check_finite(row[1:], step, out_dir, {"generator": G_ema, "discriminator": D})
        if out_dir is not None and hyper.checkpoint_every and step % hyper.checkpoint_every == 0:
            G_ema.save(out_dir / f"generator_{step:06d}.bin", step=step, seed=hyper.seed)
        if step % 500 == 0:
            logger.info("dnpm step %d g=%.4f d=%.4f r1=%.4f", *row)

    G_ema.eval()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        G_ema.save(out_dir / "generator.bin", step=hyper.steps, seed=hyper.seed)
        write_loss_csv(out_dir / "losses.csv", history, ("step", "g_loss", "d_loss", "r1"))
    return DNPMTrainResult(G_ema, D, hyper.steps, history)


def write_loss_csv(path, rows, header) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


@torch.no_grad()
def discriminator_accuracy(D: Discriminator, G: Generator, real, n_fake: int, seed: int = 0) -> tuple[float, float]:
    """Fraction of reals scored positive and of fakes scored negative."""
    real = torch.as_tensor(np.asarray(real), dtype=torch.float32)[:, None]
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n_fake, G.config.latent_dim, generator=g)
    fake = G(z, noise_mode="seeded", noise_seed=seed)
    return float((D(real) > 0).float().mean()), float((D(fake) < 0).float().mean())
