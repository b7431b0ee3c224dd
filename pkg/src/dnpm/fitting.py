"""Landmark-driven fitting of bilinear face parameters under a weak-perspective camera."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import Camera, CoreTensor, rotvec_to_matrix

logger = logging.getLogger(__name__)


@dataclass
class FitConfig:
    lambda_id: float = 1e-3
    lambda_exp: float = 1e-3
    max_iters: int = 100
    tol: float = 1e-10
    # (lo, hi) box for expression coefficients, e.g. (0, 1) for ARKit weights
    exp_bounds: Optional[tuple[float, float]] = None
    damping: float = 1e-3
    max_damping_tries: int = 12

    def __post_init__(self):
        if self.lambda_id < 0 or self.lambda_exp < 0:
            raise ConfigError("regularization weights must be non-negative")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.exp_bounds is not None:
            lo, hi = self.exp_bounds
            if not lo < hi:
                raise ConfigError("exp_bounds must be an increasing pair")
            self.exp_bounds = (float(lo), float(hi))

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "FitConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class FitResult:
    w_id: np.ndarray
    w_exp: np.ndarray
    camera: Camera
    residual: float  # RMS landmark reprojection error, image units
    objective: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list)  # best-so-far objective per iteration


def _wrap_rotvec(r: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(r)
    if theta > np.pi:
        r = r * (1.0 - 2.0 * np.pi / theta)
    return r


class _Problem:
    """Objective restricted to the landmark columns of the core."""

    def __init__(self, core: CoreTensor, ids, observed, cfg: FitConfig):
        ids = np.asarray(ids, dtype=np.int64)
        cols = (3 * ids[:, None] + np.arange(3)).ravel()
        self.core = core
        self.data = core.data[:, :, cols]
        self.k = len(ids)
        self.obs = np.asarray(observed, dtype=np.float64)
        self.cfg = cfg

    def lift(self, w):
        return np.concatenate([[1.0], w]) if self.core.affine else w

    def landmarks(self, w_id, w_exp) -> np.ndarray:
        x = np.einsum("ijk,i,j->k", self.data, self.lift(w_id), self.lift(w_exp))
        return x.reshape(-1, 3)

    def residuals(self, w_id, w_exp, scale, rot, t) -> np.ndarray:
        x = self.landmarks(w_id, w_exp)
        proj = scale * x @ rotvec_to_matrix(rot)[:2].T + t
        return np.concatenate(
            [
                (proj - self.obs).ravel(),
                np.sqrt(self.cfg.lambda_id) * w_id,
                np.sqrt(self.cfg.lambda_exp) * w_exp,
            ]
        )

    def objective(self, *state) -> float:
        r = self.residuals(*state)
        return float(r @ r)

    def camera_jacobian(self, w_id, w_exp, scale, rot, t) -> np.ndarray:
        x = self.landmarks(w_id, w_exp)
        rmat = rotvec_to_matrix(rot)
        n_res = 2 * self.k + len(w_id) + len(w_exp)
        jac = np.zeros((n_res, 6))
        jac[: 2 * self.k, 0] = (x @ rmat[:2].T).ravel()
        h = 1e-6
        for a in range(3):
            dr = np.zeros(3)
            dr[a] = h
            plus = x @ rotvec_to_matrix(rot + dr)[:2].T
            minus = x @ rotvec_to_matrix(rot - dr)[:2].T
            jac[: 2 * self.k, 1 + a] = scale * (plus - minus).ravel() / (2 * h)
        jac[0 : 2 * self.k : 2, 4] = 1.0
        jac[1 : 2 * self.k : 2, 5] = 1.0
        return jac

    def shape_jacobian(self, w_id, w_exp, scale, rot, t) -> np.ndarray:
        p = scale * rotvec_to_matrix(rot)[:2]
        off = int(self.core.affine)
        did = np.einsum("ijk,j->ik", self.data, self.lift(w_exp))[off:]  # (n_id, 3k)
        dexp = np.einsum("ijk,i->jk", self.data, self.lift(w_id))[off:]
        n_id, n_exp = len(w_id), len(w_exp)
        jac = np.zeros((2 * self.k + n_id + n_exp, n_id + n_exp))
        jac[: 2 * self.k, :n_id] = np.einsum("ab,nkb->kan", p, did.reshape(n_id, self.k, 3)).reshape(2 * self.k, n_id)
        jac[: 2 * self.k, n_id:] = np.einsum("ab,nkb->kan", p, dexp.reshape(n_exp, self.k, 3)).reshape(2 * self.k, n_exp)
        jac[2 * self.k : 2 * self.k + n_id, :n_id] = np.sqrt(self.cfg.lambda_id) * np.eye(n_id)
        jac[2 * self.k + n_id :, n_id:] = np.sqrt(self.cfg.lambda_exp) * np.eye(n_exp)
        return jac


def _block_step(problem: _Problem, state: list, block: str, mu: float, cfg: FitConfig):
    """One damped Gauss-Newton step on a parameter block, falling back to gradient descent.

    Returns ``(state, objective, mu, improved)``; ``state`` is only replaced
    when the objective strictly decreases.
    """
    w_id, w_exp, scale, rot, t = state
    f0 = problem.objective(*state)
    r = problem.residuals(*state)
    if block == "camera":
        jac = problem.camera_jacobian(*state)
    elif block == "shape":
        jac = problem.shape_jacobian(*state)
    else:
        jac = np.hstack([problem.camera_jacobian(*state), problem.shape_jacobian(*state)])
    grad = jac.T @ r
    if block != "camera" and cfg.exp_bounds is not None:
        # freeze expression coefficients held at a bound by an outward gradient
        lo, hi = cfg.exp_bounds
        g_exp = grad[jac.shape[1] - len(w_exp) :]
        pinned = ((w_exp <= lo) & (g_exp > 0)) | ((w_exp >= hi) & (g_exp < 0))
        if pinned.any():
            cols = np.flatnonzero(pinned) + jac.shape[1] - len(w_exp)
            jac = jac.copy()
            jac[:, cols] = 0.0
            grad[cols] = 0.0
    if not np.any(grad):
        return state, f0, mu, False
    jtj = jac.T @ jac
    diag = np.diag(jtj).copy()

    def candidate(delta):
        new_id, new_exp, new_scale, new_rot, new_t = w_id, w_exp, scale, rot, t
        if block in ("camera", "joint"):
            new_scale = scale + delta[0]
            if new_scale <= 0:
                return None
            new_rot = _wrap_rotvec(rot + delta[1:4])
            new_t = t + delta[4:6]
            delta = delta[6:]
        if block in ("shape", "joint"):
            n_id = len(w_id)
            new_id = w_id + delta[:n_id]
            new_exp = w_exp + delta[n_id:]
            if cfg.exp_bounds is not None:
                new_exp = np.clip(new_exp, *cfg.exp_bounds)
        return [new_id, new_exp, new_scale, new_rot, new_t]

    for _ in range(cfg.max_damping_tries):
        lhs = jtj + mu * (np.diag(diag) + np.eye(len(diag)))
        try:
            delta = np.linalg.solve(lhs, -grad)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        cand = candidate(delta)
        if cand is not None:
            f1 = problem.objective(*cand)
            if f1 < f0:
                return cand, f1, max(mu * 0.3, 1e-12), True
        mu *= 10.0
    # gradient fallback with backtracking
    alpha = 1.0 / (np.linalg.norm(grad) + 1e-300)
    for _ in range(40):
        cand = candidate(-alpha * grad)
        if cand is not None:
            f1 = problem.objective(*cand)
            if f1 < f0:
                return cand, f1, mu, True
        alpha *= 0.5
    return state, f0, mu, False


def fit_landmarks(
    core: CoreTensor,
    landmark_vertex_ids,
    observed_2d,
    init: tuple | None = None,
    config: FitConfig | None = None,
) -> FitResult:
    """Fit (w_id, w_exp, camera) so projected landmark vertices match ``observed_2d``.

    Minimizes ``sum_j |P(V[l_j]) - p_j|^2 + lambda_id |w_id|^2 + lambda_exp |w_exp|^2``
    by alternating damped Gauss-Newton on the camera and on the shape
    coefficients, each round closed by one coupled step over all parameters
    (alternation alone zigzags along the scale/shape valley). Running out of
    iterations is reported through ``converged=False`` rather than an
    exception.
    """
    cfg = config or FitConfig()
    ids = np.asarray(landmark_vertex_ids, dtype=np.int64)
    obs = np.asarray(observed_2d, dtype=np.float64)
    if obs.shape != (len(ids), 2):
        raise ShapeError(f"observed_2d must be ({len(ids)}, 2), got {obs.shape}")
    if len(ids) < 6:
        raise ShapeError("need at least 6 landmarks")
    if ids.min() < 0 or ids.max() >= core.n_vert:
        raise ShapeError("landmark index out of range")
    problem = _Problem(core, ids, obs, cfg)
    if init is None:
        w_id, w_exp = np.zeros(core.n_id), np.zeros(core.n_exp)
        if cfg.exp_bounds is not None:
            w_exp = np.clip(w_exp, *cfg.exp_bounds)
        cam = initial_camera(problem.landmarks(w_id, w_exp), obs)
    else:
        w_id, w_exp, cam = init
    w_id = np.asarray(w_id, dtype=np.float64).copy()
    w_exp = np.asarray(w_exp, dtype=np.float64).copy()
    if len(w_id) != core.n_id or len(w_exp) != core.n_exp:
        raise ShapeError("initial coefficient vectors do not match the core")
    state = [w_id, w_exp, float(cam.scale), cam.rotation.copy(), cam.translation.copy()]
    best = problem.objective(*state)
    history = [best]
    mu = {"camera": cfg.damping, "shape": cfg.damping, "joint": cfg.damping}
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        prev = best
        for block in ("camera", "shape", "joint"):
            state, best, mu[block], _ = _block_step(problem, state, block, mu[block], cfg)
        history.append(best)
        if prev - best <= cfg.tol * max(prev, 1e-300) or best == 0.0:
            converged = True
            break
    else:
        it = cfg.max_iters
    if not converged and cfg.max_iters > 0:
        logger.info("fit_landmarks stopped after %d iterations without converging", it)
    w_id, w_exp, scale, rot, t = state
    camera = Camera(scale, rot, t)
    proj = camera.project(problem.landmarks(w_id, w_exp))
    rms = float(np.sqrt(np.mean(np.sum((proj - obs) ** 2, axis=1))))
    return FitResult(w_id, w_exp, camera, rms, best, converged, it, history)


def initial_camera(points_3d: np.ndarray, observed_2d: np.ndarray) -> Camera:
    """Frontal camera matching the centroid and spread of the observations."""
    xy = points_3d[:, :2]
    spread_model = np.sqrt(np.mean(np.sum((xy - xy.mean(0)) ** 2, axis=1)))
    spread_obs = np.sqrt(np.mean(np.sum((observed_2d - observed_2d.mean(0)) ** 2, axis=1)))
    scale = spread_obs / spread_model if spread_model > 0 else 1.0
    t = observed_2d.mean(0) - scale * xy.mean(0)
    return Camera(scale, np.zeros(3), t)
