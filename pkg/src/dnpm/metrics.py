"""PSNR / SSIM on displacement maps and the evaluation table writer."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def to_unit(disp) -> np.ndarray:
    """Normalized map in [-1, 1] -> [0, 1], the range all metrics are reported in."""
    return (np.asarray(disp, dtype=np.float64) + 1.0) / 2.0


def psnr(a, b, max_value: float = 1.0) -> float:
    """``10 log10(max_value^2 / MSE)`` in dB; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    if max_value <= 0:
        raise ConfigError("max_value must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, max_value: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Gaussian-window SSIM averaged over fully interior window positions.

    Stabilisers ``C1 = (K1 L)^2``, ``C2 = (K2 L)^2`` with ``L = max_value``.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError("SSIM expects single-channel (H, W) inputs")
    if min(a.shape) < window:
        raise ConfigError(f"inputs must be at least {window}x{window} for SSIM")
    w = gaussian_window(window, sigma)

    def filt(x):
        # correlate then keep positions where the window lies fully inside
        full = ndimage.correlate(x, w, mode="constant")
        h = window // 2
        return full[h : x.shape[0] - (window - 1 - h), h : x.shape[1] - (window - 1 - h)]

    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def map_metrics(pred, target) -> tuple[float, float]:
    """PSNR and SSIM of two normalized maps after mapping both to [0, 1]."""
    a, b = to_unit(pred), to_unit(target)
    return psnr(a, b), ssim(a, b)


def mean_metrics(preds, targets) -> tuple[float, float]:
    """Mean PSNR (infinite entries skipped) and mean SSIM over a stack of normalized maps."""
    ps, ss = [], []
    for p, t in zip(preds, targets):
        v, s = map_metrics(p, t)
        if math.isfinite(v):
            ps.append(v)
        ss.append(s)
    return (float(np.mean(ps)) if ps else math.inf), float(np.mean(ss))


@dataclass
class EvalRow:
    """One table row; ``protocol`` is the degradation tag (e.g. "4", "8", "blur64")."""

    method: str
    protocol: str
    psnr: float
    ssim: float


EVAL_COLUMNS = ("method", "factor", "psnr", "ssim")


def format_value(v: float, decimals: int) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.{decimals}f}"


def eval_table(rows, path=None, decimals: int = 4) -> str:
    """Render rows as CSV text (header ``method,factor,psnr,ssim``); optionally write it."""
    lines = [",".join(EVAL_COLUMNS)]
    for r in rows:
        lines.append(f"{r.method},{r.protocol},{format_value(r.psnr, decimals)},{format_value(r.ssim, decimals)}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def read_eval_table(path) -> list[EvalRow]:
    with open(path, newline="") as fh:
        return [EvalRow(r["method"], r["factor"], float(r["psnr"]), float(r["ssim"])) for r in csv.DictReader(fh)]
