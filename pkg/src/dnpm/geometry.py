"""Proxy-face geometry: bilinear synthesis, UV mapping and displacement.

Conventions used throughout the package:

* UV origin is the bottom-left corner of the map. Map arrays are stored
  image-style, so row 0 is the top edge (v = 1).
* Sampling is pixel-centred: u = 0 lands on the centre of the first texel
  column and u = 1 on the centre of the last one, i.e. ``x = u * (W - 1)``.
* Float displacement maps hold normalized values in [-1, 1]. A value ``t``
  corresponds to ``t * d_max`` model units along the surface normal.
  16-bit maps use ``decode(v) = (v / 65535 - 0.5) * 2 * d_max``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import (
    ChartError,
    EmptyInputError,
    PreconditionError,
    RangeError,
    ShapeError,
)

DEFAULT_D_MAX = 0.002
UINT16_MAX = 65535


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    uvs: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    allow_isolated: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeError(f"vertices must be (n, 3), got {v.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ShapeError("face index out of range")
        if len(v) and not self.allow_isolated:
            used = np.zeros(len(v), dtype=bool)
            used[f.ravel()] = True
            if not used.all():
                raise ShapeError(f"{int((~used).sum())} vertices are not referenced by any face")
        if self.uvs is not None:
            uv = np.asarray(self.uvs, dtype=np.float64)
            if uv.shape != (len(v), 2):
                raise ShapeError(f"uvs must be ({len(v)}, 2), got {uv.shape}")
            if uv.size and (uv.min() < -1e-9 or uv.max() > 1 + 1e-9):
                raise RangeError("uvs must lie inside the unit square")
            object.__setattr__(self, "uvs", uv)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64)
            if n.shape != v.shape:
                raise ShapeError(f"normals must be {v.shape}, got {n.shape}")
            if n.size and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise RangeError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class CoreTensor:
    """Bilinear identity x expression x geometry tensor bound to a template.

    With ``affine=True`` the first identity slice is the mean face and the
    first expression slice the neutral expression; coefficient vectors then
    have one entry fewer than the corresponding axis and are lifted to
    ``(1, w)`` before contraction.
    """

    data: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray
    affine: bool = False

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ShapeError(f"core must be rank 3, got shape {d.shape}")
        if d.shape[2] % 3:
            raise ShapeError("geometry axis length must be divisible by 3")
        if not np.all(np.isfinite(d)):
            raise ValueError("core tensor has non-finite entries")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        uvs = np.asarray(self.uvs, dtype=np.float64)
        if uvs.shape != (self.n_vert, 2):
            raise ShapeError(f"template uvs must be ({self.n_vert}, 2), got {uvs.shape}")
        object.__setattr__(self, "uvs", uvs)

    @property
    def n_vert(self) -> int:
        return self.data.shape[2] // 3

    @property
    def n_id(self) -> int:
        return self.data.shape[0] - int(self.affine)

    @property
    def n_exp(self) -> int:
        return self.data.shape[1] - int(self.affine)

    def lift(self, w_id, w_exp):
        w_id = np.asarray(w_id, dtype=np.float64).ravel()
        w_exp = np.asarray(w_exp, dtype=np.float64).ravel()
        if w_id.shape[0] != self.n_id or w_exp.shape[0] != self.n_exp:
            raise ShapeError(
                f"expected w_id of length {self.n_id} and w_exp of length {self.n_exp}, "
                f"got {w_id.shape[0]} and {w_exp.shape[0]}"
            )
        if self.affine:
            w_id = np.concatenate([[1.0], w_id])
            w_exp = np.concatenate([[1.0], w_exp])
        return w_id, w_exp

    def id_basis(self, w_exp) -> np.ndarray:
        """Matrix mapping the (unlifted) identity vector to flat vertices at fixed w_exp.

        Returns ``(B, offset)`` packed as a single array of shape
        ``(n_id + 1, 3 n_vert)``; the last row is the constant term.
        """
        _, e = self.lift(np.zeros(self.n_id), w_exp)
        m = np.einsum("ijk,j->ik", self.data, e)
        if self.affine:
            return np.vstack([m[1:], m[:1]])
        return np.vstack([m, np.zeros((1, m.shape[1]))])

    def exp_basis(self, w_id) -> np.ndarray:
        i, _ = self.lift(w_id, np.zeros(self.n_exp))
        m = np.einsum("ijk,i->jk", self.data, i)
        if self.affine:
            return np.vstack([m[1:], m[:1]])
        return np.vstack([m, np.zeros((1, m.shape[1]))])


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: ``p = scale * R[:2] @ X + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2))
        if not self.scale > 0:
            raise RangeError(f"camera scale must be positive, got {self.scale}")
        if np.linalg.norm(self.rotation) >= np.pi + 1e-6:
            raise RangeError("rotation vector norm must be below pi")

    def matrix(self) -> np.ndarray:
        return rotvec_to_matrix(self.rotation)

    def project(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.matrix()[:2].T + self.translation


def rotvec_to_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    k = np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + k
    k = k / theta
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def bilinear_proxy(core: CoreTensor, w_id, w_exp) -> Mesh:
    i, e = core.lift(w_id, w_exp)
    flat = np.einsum("ijk,i,j->k", core.data, i, e)
    return Mesh(flat.reshape(-1, 3), core.faces, uvs=core.uvs)


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals; their length is twice the triangle area."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return np.cross(b - a, c - a)


def compute_vertex_normals(mesh: Mesh) -> Mesh:
    if mesh.n_vertices == 0 or mesh.n_faces == 0:
        raise EmptyInputError("cannot compute normals of an empty mesh")
    fn = face_normals(mesh.vertices, mesh.faces)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (mesh.n_vertices, 1))
    ok = norm > 1e-300
    out[ok] = acc[ok] / norm[ok, None]
    return replace(mesh, normals=out)


def subdivide_midpoint(mesh: Mesh, levels: int) -> Mesh:
    """Split every triangle into four at edge midpoints, ``levels`` times.

    Positions and UVs are interpolated linearly so the surface is unchanged.
    Normals are dropped since they no longer match the vertex count.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    verts, faces, uvs = mesh.vertices, mesh.faces, mesh.uvs
    if levels == 0:
        return mesh
    for _ in range(levels):
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        nv = len(verts)
        mid = nv + inverse.reshape(3, -1).T  # columns: edge01, edge12, edge20
        verts = np.vstack([verts, 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])])
        if uvs is not None:
            uvs = np.vstack([uvs, 0.5 * (uvs[uniq[:, 0]] + uvs[uniq[:, 1]])])
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        m01, m12, m20 = mid[:, 0], mid[:, 1], mid[:, 2]
        faces = np.concatenate(
            [
                np.stack([a, m01, m20], 1),
                np.stack([m01, b, m12], 1),
                np.stack([m20, m12, c], 1),
                np.stack([m01, m12, m20], 1),
            ]
        )
    return Mesh(verts, faces, uvs=uvs, allow_isolated=mesh.allow_isolated)


def _texel_coords(uv: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    return uv[..., 0] * (w - 1), (1.0 - uv[..., 1]) * (h - 1)


def sample_map(disp_map: np.ndarray, uv) -> np.ndarray | float:
    """Bilinearly interpolate ``disp_map`` at one uv (2,) or many uvs (n, 2)."""
    m = np.asarray(disp_map, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    if uv.min(initial=0.0) < -1e-9 or uv.max(initial=0.0) > 1 + 1e-9:
        raise RangeError("uv outside the unit square")
    uv = np.clip(uv, 0.0, 1.0)
    h, w = m.shape
    x, y = _texel_coords(uv, (h, w))
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = m[y0, x0] * (1 - fx) + m[y0, x1] * fx
    bot = m[y1, x0] * (1 - fx) + m[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return float(out[0]) if single else out


def encode_uint16(values: np.ndarray) -> np.ndarray:
    """Normalized [-1, 1] texels to 16-bit codes."""
    v = np.clip((np.asarray(values, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)
    return np.round(v * UINT16_MAX).astype(np.uint16)


def uint16_to_normalized(codes: np.ndarray) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) / UINT16_MAX - 0.5) * 2.0


def decode_uint16(codes: np.ndarray, d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """16-bit codes to signed model-unit displacement."""
    return uint16_to_normalized(codes) * d_max


def decoded_displacement(disp_map: np.ndarray, uv: np.ndarray, d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """Sample a map at ``uv`` and convert to model units.

    ``uint16`` maps are decoded with the 16-bit rule; float maps are treated
    as normalized values. Sampling before decoding is fine because both
    steps are affine.
    """
    m = np.asarray(disp_map)
    if m.dtype == np.uint16:
        return decode_uint16(sample_map(m.astype(np.float64), uv), d_max)
    return sample_map(m, uv) * d_max


def apply_displacement(
    proxy: Mesh,
    disp_map: np.ndarray,
    s: float,
    subdiv_levels: int,
    d_max: float = DEFAULT_D_MAX,
) -> Mesh:
    """Detailed mesh ``V_h = V_p + s * decode(map(uv)) * n`` on the subdivided proxy."""
    if proxy.uvs is None:
        raise PreconditionError("proxy mesh has no uvs")
    if not np.isfinite(s):
        raise PreconditionError("scale s must be finite")
    fine = compute_vertex_normals(subdivide_midpoint(proxy, subdiv_levels))
    disp = decoded_displacement(disp_map, fine.uvs, d_max)
    verts = fine.vertices + (s * disp)[:, None] * fine.normals
    return Mesh(verts, fine.faces, uvs=fine.uvs, allow_isolated=proxy.allow_isolated)


def bake_map(mesh: Mesh, per_vertex_scalar, resolution: int) -> np.ndarray:
    """Rasterize a per-vertex scalar into a ``resolution``² UV map.

    Each texel centre takes the barycentric interpolation of the scalar over
    the UV triangle containing it; texels outside every triangle copy the
    nearest covered texel.
    """
    if mesh.uvs is None:
        raise PreconditionError("mesh has no uvs")
    vals = np.asarray(per_vertex_scalar, dtype=np.float64).ravel()
    if vals.shape[0] != mesh.n_vertices:
        raise ShapeError("scalar length must equal vertex count")
    res = int(resolution)
    if res < 2:
        raise ValueError("resolution must be >= 2")
    out = np.zeros((res, res))
    covered = np.zeros((res, res), dtype=bool)
    interior = np.zeros((res, res), dtype=bool)
    tx, ty = _texel_coords(mesh.uvs, (res, res))
    eps = 1e-9
    for f in mesh.faces:
        xs, ys = tx[f], ty[f]
        det = (ys[1] - ys[2]) * (xs[0] - xs[2]) + (xs[2] - xs[1]) * (ys[0] - ys[2])
        if abs(det) < 1e-14:
            continue
        c0, c1 = int(max(np.floor(xs.min()), 0)), int(min(np.ceil(xs.max()), res - 1))
        r0, r1 = int(max(np.floor(ys.min()), 0)), int(min(np.ceil(ys.max()), res - 1))
        cc, rr = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        l0 = ((ys[1] - ys[2]) * (cc - xs[2]) + (xs[2] - xs[1]) * (rr - ys[2])) / det
        l1 = ((ys[2] - ys[0]) * (cc - xs[2]) + (xs[0] - xs[2]) * (rr - ys[2])) / det
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
        strict = (l0 > 1e-6) & (l1 > 1e-6) & (l2 > 1e-6)
        if np.any(strict & covered[rr, cc]) or np.any(inside & interior[rr, cc]):
            raise ChartError("overlapping UV triangles")
        value = l0 * vals[f[0]] + l1 * vals[f[1]] + l2 * vals[f[2]]
        write = inside & ~covered[rr, cc]
        out[rr[write], cc[write]] = value[write]
        covered[rr[inside], cc[inside]] = True
        interior[rr[strict], cc[strict]] = True
    if not covered.any():
        raise ChartError("no texel is covered by the UV chart")
    if not covered.all():
        _, (ri, ci) = ndimage.distance_transform_edt(~covered, return_indices=True)
        out = out[ri, ci]
    return out
