"""File formats: OBJ meshes, 16-bit PNG maps, WAV audio, ARKit CSV."""
from __future__ import annotations

import csv
import wave
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError
from .geometry import Mesh, compute_vertex_normals, decode_uint16, encode_uint16, uint16_to_normalized


def write_obj(path, mesh: Mesh, precision: int = 8) -> Path:
    """``v``/``vt``/``vn`` records and ``f v/vt/vn`` faces (vt and vn share vertex indices).

    Vertex normals are computed when the mesh carries none.
    """
    if mesh.normals is None and len(mesh.faces):
        mesh = compute_vertex_normals(mesh)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = f"%.{precision}g"
    out = []
    for v in mesh.vertices:
        out.append("v " + " ".join(fmt % x for x in v))
    if mesh.uvs is not None:
        for t in mesh.uvs:
            out.append("vt " + " ".join(fmt % x for x in t))
    if mesh.normals is not None:
        for n in mesh.normals:
            out.append("vn " + " ".join(fmt % x for x in n))
    has_t, has_n = mesh.uvs is not None, mesh.normals is not None
    for f in mesh.faces + 1:
        if has_t and has_n:
            out.append("f " + " ".join(f"{i}/{i}/{i}" for i in f))
        elif has_n:
            out.append("f " + " ".join(f"{i}//{i}" for i in f))
        elif has_t:
            out.append("f " + " ".join(f"{i}/{i}" for i in f))
        else:
            out.append("f " + " ".join(str(i) for i in f))
    path.write_text("\n".join(out) + "\n")
    return path


def read_obj(path) -> Mesh:
    """Reader for OBJ files written by :func:`write_obj` (per-vertex attributes only)."""
    vs, vts, vns, faces = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            vs.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            vts.append([float(x) for x in parts[1:3]])
        elif tag == "vn":
            vns.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise ShapeError("only triangular faces are supported")
            faces.append(idx)
    uvs = np.array(vts) if vts else None
    normals = np.array(vns) if vns else None
    return Mesh(np.array(vs, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3), uvs, normals)


def write_map_png(path, disp: np.ndarray) -> Path:
    """Normalized map in [-1, 1] -> 16-bit greyscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(disp, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("maps must be 2D")
    Image.fromarray(encode_uint16(arr)).save(path)
    return path


def read_png16(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeError(f"{path} is not a single-channel image")
    if arr.dtype == np.uint8:
        return arr.astype(np.uint16) * 257
    return arr.astype(np.uint16)


def read_map_png(path) -> np.ndarray:
    """16-bit PNG -> normalized map in [-1, 1]."""
    return uint16_to_normalized(read_png16(path))


def read_displacement_png(path, d_max: float) -> np.ndarray:
    """16-bit PNG -> displacement in model units."""
    return decode_uint16(read_png16(path), d_max)


def write_wav(path, samples, sample_rate: int = 16000) -> Path:
    """Mono 16-bit PCM; float input is taken to lie in [-1, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.asarray(samples)
    if x.dtype.kind == "f":
        x = np.round(np.clip(x, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(x.astype("<i2").tobytes())
    return path


def read_wav(path) -> tuple[np.ndarray, int]:
    """PCM WAV -> (float samples in [-1, 1], sample rate); channels are averaged."""
    with wave.open(str(path), "rb") as fh:
        n_ch, width, rate, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
        raw = fh.readframes(n)
    if width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise ShapeError(f"unsupported sample width {width}")
    return x.reshape(-1, n_ch).mean(axis=1), rate


def write_arkit_csv(path, coeffs, names) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in coeffs:
            w.writerow([repr(float(x)) for x in row])
    return path


def read_arkit_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ShapeError(f"{path} is empty")
    names, body = rows[0], rows[1:]
    return np.array([[float(x) for x in r] for r in body], dtype=np.float64).reshape(-1, len(names)), names
