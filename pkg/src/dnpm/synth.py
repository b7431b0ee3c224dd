"""Procedural stand-in for a scanned face dataset.

Produces a bilinear core over a spherical face patch and, for every sampled
(identity, expression) pair, a displacement map built from oriented ridge
(Gabor-like) fields. Expressions switch wrinkle sites on; identity bends
their orientation, frequency, phase and strength. Everything is a pure
function of the config seed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ConfigError
from .geometry import CoreTensor, Mesh

ARKIT_DIM = 52


@dataclass
class SynthConfig:
    n_id: int = 10
    n_exp: int = ARKIT_DIM
    resolution: int = 64
    n_train: int = 200
    n_test: int = 20
    grid: int = 25  # template vertices per side
    ridge_count: tuple = (12, 18)
    frequency: tuple = (2.0, 6.0)  # cycles per UV unit
    amplitude: tuple = (0.25, 0.5)  # normalized map units
    envelope: tuple = (0.1, 0.2)  # Gaussian envelope sigma, UV units
    # how far identity bends each site: orientation (rad), relative frequency,
    # phase (rad), relative amplitude
    id_gain: tuple = (0.2, 0.15, 0.5, 0.3)
    exp_channels_per_site: int = 6
    exp_active_prob: float = 0.35
    seed: int = 0

    def __post_init__(self):
        for name in ("ridge_count", "frequency", "amplitude", "envelope"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must be a positive ordered range, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        self.id_gain = tuple(float(x) for x in self.id_gain)
        if len(self.id_gain) != 4 or min(self.id_gain) < 0:
            raise ConfigError(f"id_gain needs four non-negative gains, got {self.id_gain}")
        if self.n_id < 1 or self.n_exp < 1:
            raise ConfigError("basis sizes must be positive")
        if self.resolution < 8 or self.grid < 3:
            raise ConfigError("resolution must be >= 8 and grid >= 3")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.exp_channels_per_site < 1:
            raise ConfigError("exp_channels_per_site must be >= 1")
        if not 0 < self.exp_active_prob <= 1:
            raise ConfigError("exp_active_prob must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown SynthConfig keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class WrinkleParams:
    """Per-dataset constants of the ridge field (one row per wrinkle site)."""

    centers: np.ndarray  # (K, 2)
    sigma: np.ndarray  # (K,)
    theta: np.ndarray  # (K,)
    freq: np.ndarray  # (K,)
    amp: np.ndarray  # (K,)
    exp_weights: np.ndarray  # (K, n_exp), non-negative
    id_theta: np.ndarray  # (K, n_id)
    id_freq: np.ndarray
    id_phase: np.ndarray
    id_amp: np.ndarray
    id_gain: tuple = (0.2, 0.15, 0.5, 0.3)


@dataclass
class Sample:
    w_id: np.ndarray
    w_exp: np.ndarray
    displacement: np.ndarray  # (R, R) normalized texels


@dataclass
class SynthDataset:
    config: SynthConfig
    core: CoreTensor
    template: Mesh
    wrinkles: WrinkleParams
    landmark_ids: np.ndarray
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def maps(self, split: str = "train") -> np.ndarray:
        items = getattr(self, split)
        return np.stack([s.displacement for s in items]) if items else np.zeros((0,) * 3)


def sphere_patch(grid: int) -> Mesh:
    """Frontal patch of an ellipsoid with a regular single-chart UV grid."""
    g = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(g, g)  # rows follow v
    lon = (uu - 0.5) * 1.6
    lat = (vv - 0.5) * 1.8
    xyz = np.stack(
        [0.8 * np.sin(lon) * np.cos(lat), 1.0 * np.sin(lat), 0.7 * np.cos(lon) * np.cos(lat)],
        axis=-1,
    ).reshape(-1, 3)
    uvs = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    idx = np.arange(grid * grid).reshape(grid, grid)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    # counter-clockwise in uv so normals face +z
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return Mesh(xyz, faces, uvs=uvs)


def _landmark_ids(grid: int) -> np.ndarray:
    step = 2
    rows = np.arange(1, grid - 1, step)
    return (rows[:, None] * grid + rows[None, :]).ravel()


def build_core(cfg: SynthConfig, rng: np.random.Generator, template: Mesh) -> CoreTensor:
    n = template.n_vertices
    uv = template.uvs
    data = np.zeros((cfg.n_id + 1, cfg.n_exp + 1, n, 3))
    data[0, 0] = template.vertices

    # identity: smooth low-order cosine deformations
    basis = np.stack(
        [np.cos(np.pi * a * uv[:, 0]) * np.cos(np.pi * b * uv[:, 1]) for a in range(3) for b in range(3)],
        axis=1,
    )
    for i in range(1, cfg.n_id + 1):
        coef = rng.normal(size=(basis.shape[1], 3)) * 0.04 / np.sqrt(basis.shape[1])
        data[i, 0] = basis @ coef

    # expression: localized, mostly tangential bumps
    centers = rng.uniform(0.15, 0.85, size=(cfg.n_exp, 2))
    for e in range(1, cfg.n_exp + 1):
        bump = np.exp(-np.sum((uv - centers[e - 1]) ** 2, axis=1) / (2 * 0.12**2))
        direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.3])
        direction *= 0.06 / np.linalg.norm(direction)
        data[0, e] = bump[:, None] * direction
        for i in range(1, cfg.n_id + 1):
            data[i, e] = bump[:, None] * rng.normal(size=3) * 0.004
    return CoreTensor(data.reshape(cfg.n_id + 1, cfg.n_exp + 1, 3 * n), template.faces, uv, affine=True)


def build_wrinkles(cfg: SynthConfig, rng: np.random.Generator) -> WrinkleParams:
    k = int(rng.integers(cfg.ridge_count[0], cfg.ridge_count[1] + 1))
    exp_weights = np.zeros((k, cfg.n_exp))
    for j in range(k):
        chans = rng.choice(cfg.n_exp, size=min(cfg.exp_channels_per_site, cfg.n_exp), replace=False)
        exp_weights[j, chans] = rng.uniform(0.5, 2.0, size=len(chans))
    scale = 1.0 / np.sqrt(cfg.n_id)
    return WrinkleParams(
        centers=rng.uniform(0.2, 0.8, size=(k, 2)),
        sigma=rng.uniform(*cfg.envelope, size=k),
        theta=rng.uniform(0.0, np.pi, size=k),
        freq=rng.uniform(*cfg.frequency, size=k),
        amp=rng.uniform(*cfg.amplitude, size=k),
        exp_weights=exp_weights,
        id_theta=rng.normal(size=(k, cfg.n_id)) * scale,
        id_freq=rng.normal(size=(k, cfg.n_id)) * scale,
        id_phase=rng.normal(size=(k, cfg.n_id)) * scale,
        id_amp=rng.normal(size=(k, cfg.n_id)) * scale,
        id_gain=cfg.id_gain,
    )


def wrinkle_field(params: WrinkleParams, w_id, w_exp, resolution: int) -> np.ndarray:
    """Closed-form displacement map for one (identity, expression) pair.

    For site k with centre c, envelope sigma and uv-offset d = uv - c::

        act   = 1 - exp(-exp_weights_k . w_exp)
        theta = theta_k + g_theta tanh(id_theta_k . w_id)
        f     = freq_k (1 + g_freq tanh(id_freq_k . w_id))
        phi   = g_phase tanh(id_phase_k . w_id)
        a     = amp_k (1 + g_amp tanh(id_amp_k . w_id)) act
        I    += a exp(-|d|^2 / (2 sigma^2)) cos(2 pi f (d . (cos theta, sin theta)) + phi)

    and the sum is clipped to [-1, 1]. Texel (r, c) sits at
    uv = (c / (R - 1), 1 - r / (R - 1)).
    """
    w_id = np.asarray(w_id, dtype=np.float64)
    w_exp = np.asarray(w_exp, dtype=np.float64)
    g = np.linspace(0.0, 1.0, resolution)
    u = g[None, :]
    v = (1.0 - g)[:, None]
    g_theta, g_freq, g_phase, g_amp = params.id_gain
    act = 1.0 - np.exp(-params.exp_weights @ w_exp)
    theta = params.theta + g_theta * np.tanh(params.id_theta @ w_id)
    freq = params.freq * (1.0 + g_freq * np.tanh(params.id_freq @ w_id))
    phase = g_phase * np.tanh(params.id_phase @ w_id)
    amp = params.amp * (1.0 + g_amp * np.tanh(params.id_amp @ w_id)) * act
    out = np.zeros((resolution, resolution))
    for k in range(len(amp)):
        du = u - params.centers[k, 0]
        dv = v - params.centers[k, 1]
        env = np.exp(-(du**2 + dv**2) / (2 * params.sigma[k] ** 2))
        along = du * np.cos(theta[k]) + dv * np.sin(theta[k])
        out = out + amp[k] * env * np.cos(2 * np.pi * freq[k] * along + phase[k])
    return np.clip(out, -1.0, 1.0)


def sample_coefficients(cfg: SynthConfig, rng: np.random.Generator, n: int):
    w_id = rng.normal(size=(n, cfg.n_id))
    active = rng.random(size=(n, cfg.n_exp)) < cfg.exp_active_prob
    w_exp = np.where(active, rng.uniform(0.0, 1.0, size=(n, cfg.n_exp)), 0.0)
    return w_id, w_exp


def synth_dataset(config: Optional[SynthConfig] = None) -> SynthDataset:
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    template = sphere_patch(cfg.grid)
    core = build_core(cfg, rng, template)
    wrinkles = build_wrinkles(cfg, rng)
    w_id, w_exp = sample_coefficients(cfg, rng, cfg.n_train + cfg.n_test)
    samples = [
        Sample(w_id[i], w_exp[i], wrinkle_field(wrinkles, w_id[i], w_exp[i], cfg.resolution))
        for i in range(len(w_id))
    ]
    return SynthDataset(
        config=cfg,
        core=core,
        template=template,
        wrinkles=wrinkles,
        landmark_ids=_landmark_ids(cfg.grid),
        train=samples[: cfg.n_train],
        test=samples[cfg.n_train :],
    )
