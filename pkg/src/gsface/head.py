"""Linear blendshape head model (FLAME-style stand-in) and its "GFBM" file format.

Vertices are ``template + shape_basis @ beta + pose_basis @ theta_blend +
expr_basis @ psi``.  The 11-dim pose vector is split into a global rotation
(axis-angle), a translation and the coefficients of the pose blendshapes; only
the last slice deforms the mesh, the first two drive the camera.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

MAGIC = b"GFBM"
VERSION = 1
THETA_DIM = 11
# (rotation, translation, pose-blend) widths; must sum to THETA_DIM
DEFAULT_THETA_SPLIT = (3, 3, 5)
EXPR_DIMS = (10, 20, 30, 40, 50)
BASIS_DECAY = 0.8

_HEADER = struct.Struct("<4sH5I3H")


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


@dataclass(frozen=True)
class FlameParams:
    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        for name in ("beta", "theta", "psi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        if self.theta.shape[0] != THETA_DIM:
            raise ValueError(f"theta must have exactly {THETA_DIM} components, got {self.theta.shape[0]}")

    @classmethod
    def neutral(cls, n_beta: int = 0, dim_psi: int = 50) -> "FlameParams":
        return cls(np.zeros(n_beta), np.zeros(THETA_DIM), np.zeros(dim_psi))


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BlendshapeHead:
    template: np.ndarray      # V x 3, millimetres
    shape_basis: np.ndarray   # V x 3 x n_beta
    pose_basis: np.ndarray    # V x 3 x n_pose
    expr_basis: np.ndarray    # V x 3 x n_psi_max
    faces: np.ndarray         # F x 3
    uv: np.ndarray            # V x 2
    theta_split: tuple[int, int, int] = DEFAULT_THETA_SPLIT

    def __post_init__(self):
        for name in ("template", "shape_basis", "pose_basis", "expr_basis", "uv"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64))
        object.__setattr__(self, "theta_split", tuple(int(x) for x in self.theta_split))
        self._validate()

    def _validate(self) -> None:
        v = self.template.shape[0]
        if self.template.shape != (v, 3):
            raise ValueError("template must be V x 3")
        for name in ("shape_basis", "pose_basis", "expr_basis"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[:2] != (v, 3):
                raise ValueError(f"{name} must be V x 3 x k")
        if self.uv.shape != (v, 2):
            raise ValueError("uv must be V x 2")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3 or len(self.faces) == 0:
            raise ValueError("faces must be a non-empty F x 3 index array")
        if self.faces.min() < 0 or self.faces.max() >= v:
            raise ValueError("face index out of range")
        if sum(self.theta_split) != THETA_DIM:
            raise ValueError(f"theta split {self.theta_split} does not sum to {THETA_DIM}")
        if self.theta_split[2] != self.pose_basis.shape[2]:
            raise ValueError("pose-blend slice width must equal the pose basis width")
        if np.any(self.uv_areas() <= 0):
            raise ValueError("degenerate triangle in UV space")

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_beta(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_pose(self) -> int:
        return self.pose_basis.shape[2]

    @property
    def n_psi_max(self) -> int:
        return self.expr_basis.shape[2]

    def uv_areas(self) -> np.ndarray:
        """Unsigned triangle areas in UV space."""
        a, b, c = (self.uv[self.faces[:, i]] for i in range(3))
        cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        return 0.5 * np.abs(cross)

    def theta_blend(self, theta: np.ndarray) -> np.ndarray:
        start = self.theta_split[0] + self.theta_split[1]
        return np.asarray(theta)[start:start + self.theta_split[2]]

    def content_bytes(self) -> bytes:
        return _encode_body(self)

    @cached_property
    def content_hash(self) -> bytes:
        """SHA-256 of the canonical array payload; binds avatars to this model."""
        return hashlib.sha256(self.content_bytes()).digest()

    def equals(self, other: "BlendshapeHead") -> bool:
        return self.theta_split == other.theta_split and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("template", "shape_basis", "pose_basis", "expr_basis", "faces", "uv")
        )


def _pad(vec: np.ndarray, width: int, what: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if vec.shape[0] > width:
        raise ValueError(f"{what} has {vec.shape[0]} components but the basis only has {width}")
    if vec.shape[0] == width:
        return vec
    out = np.zeros(width)
    out[: vec.shape[0]] = vec
    return out


def deform(model: BlendshapeHead, params: FlameParams) -> np.ndarray:
    """Deformed V x 3 vertices; shorter beta/psi vectors are zero-padded."""
    beta = _pad(params.beta, model.n_beta, "beta")
    psi = _pad(params.psi, model.n_psi_max, "psi")
    blend = model.theta_blend(params.theta)
    return (
        model.template
        + model.shape_basis @ beta
        + model.pose_basis @ blend
        + model.expr_basis @ psi
    )


def _grid_dims(n_vertices: int) -> tuple[int, int]:
    """Lat-long grid (rows, cols) with (rows+1)(cols+1) <= n_vertices, cols ~ 2 rows."""
    best = None
    for rows in range(1, n_vertices):
        cols = n_vertices // (rows + 1) - 1
        if cols < 1:
            break
        key = ((rows + 1) * (cols + 1), -abs(cols - 2 * rows))
        if best is None or key > best[0]:
            best = (key, rows, cols)
    return best[1], best[2]


def _smooth_field(rng: np.random.Generator, dirs: np.ndarray, n_terms: int = 4) -> np.ndarray:
    """Random smooth vector field over unit directions (V x 3)."""
    out = dirs @ rng.normal(size=(3, 3))
    for _ in range(n_terms):
        freq = rng.normal(size=3) * rng.uniform(1.0, 3.0)
        amp = rng.normal(size=3)
        out = out + np.sin(dirs @ freq + rng.uniform(0, 2 * np.pi))[:, None] * amp
    return out


def _basis(rng, dirs, n_cols, rms_first, weight=None) -> np.ndarray:
    v = dirs.shape[0]
    cols = []
    for k in range(n_cols):
        f = _smooth_field(rng, dirs)
        if weight is not None:
            f = f * weight[:, None]
        f *= rms_first * np.sqrt(v) * BASIS_DECAY**k / np.linalg.norm(f)
        cols.append(f)
    return np.stack(cols, axis=2).astype(np.float32).astype(np.float64)


def generate_synthetic(
    seed: int,
    n_vertices: int = 2000,
    n_beta: int = 20,
    n_psi_max: int = 50,
) -> BlendshapeHead:
    """Deterministic sphere-like head with a lat-long UV atlas.

    ``n_vertices`` is a target: the grid realises the largest vertex count not
    above it.  Basis column norms decay geometrically (ratio 0.8) so the
    columns are ordered like principal components.
    """
    if n_vertices < 4:
        raise ValueError("need at least 4 vertices")
    if n_psi_max < max(EXPR_DIMS):
        raise ValueError(f"n_psi_max must be >= {max(EXPR_DIMS)}")
    rng = np.random.default_rng(seed)
    rows, cols = _grid_dims(n_vertices)
    v_coord, u_coord = np.meshgrid(np.linspace(0, 1, rows + 1), np.linspace(0, 1, cols + 1), indexing="ij")
    u_coord, v_coord = u_coord.ravel(), v_coord.ravel()
    lat = v_coord * np.pi
    lon = u_coord * 2 * np.pi
    # +y up, -z faces the default camera
    dirs = np.stack([np.sin(lat) * np.sin(lon), np.cos(lat), -np.sin(lat) * np.cos(lon)], axis=1)
    radii = np.array([75.0, 95.0, 85.0])
    bumps = 1.0 + 0.04 * np.tanh(_smooth_field(rng, dirs, 3)[:, 0])
    template = (dirs * radii * bumps[:, None]).astype(np.float32).astype(np.float64)

    faces = []
    for i in range(rows):
        for j in range(cols):
            a = i * (cols + 1) + j
            b, c, d = a + cols + 1, a + cols + 2, a + 1
            faces.append((a, b, c))
            faces.append((a, c, d))
    faces = np.asarray(faces, dtype=np.int64)

    # expressions concentrate on the camera-facing lower half
    face_weight = np.clip(-dirs[:, 2], 0, None) * (0.6 + 0.4 * np.clip(-dirs[:, 1], 0, None))
    shape_basis = _basis(rng, dirs, n_beta, 6.0)
    pose_basis = _basis(rng, dirs, DEFAULT_THETA_SPLIT[2], 4.0, face_weight + 0.2)
    expr_basis = _basis(rng, dirs, n_psi_max, 5.0, face_weight)
    uv = np.stack([u_coord, v_coord], axis=1).astype(np.float32).astype(np.float64)
    return BlendshapeHead(template, shape_basis, pose_basis, expr_basis, faces, uv)


def _encode_body(model: BlendshapeHead) -> bytes:
    header = _HEADER.pack(
        MAGIC, VERSION, model.n_vertices, len(model.faces), model.n_beta, model.n_pose,
        model.n_psi_max, *model.theta_split,
    )
    parts = [header]
    for arr in (model.template, model.shape_basis, model.pose_basis, model.expr_basis, model.uv):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(model.faces, dtype="<u4").tobytes())
    return b"".join(parts)


def model_to_bytes(model: BlendshapeHead) -> bytes:
    body = _encode_body(model)
    # content hash precedes the CRC so containers can bind to it without re-hashing
    body += model.content_hash
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> BlendshapeHead:
    if len(data) < _HEADER.size + 36:
        raise ModelFormatError("file truncated", len(data))
    magic, version, v, f, nb, npose, npsi, *split = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}", 4)
    shapes = [(v, 3), (v, 3, nb), (v, 3, npose), (v, 3, npsi), (v, 2)]
    expected = _HEADER.size + sum(4 * int(np.prod(s)) for s in shapes) + 12 * f + 32 + 4
    if len(data) != expected:
        raise ModelFormatError(f"expected {expected} bytes, found {len(data)}", min(len(data), expected))
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError("CRC32 mismatch", len(data) - 4)
    off = _HEADER.size
    arrays = []
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(data, "<f4", n, off).reshape(s).astype(np.float64))
        off += 4 * n
    faces = np.frombuffer(data, "<u4", 3 * f, off).reshape(f, 3).astype(np.int64)
    off += 12 * f
    stored_hash = data[off:off + 32]
    try:
        model = BlendshapeHead(*arrays[:4], faces, arrays[4], tuple(split))
    except ValueError as exc:
        raise ModelFormatError(f"invalid model contents: {exc}", _HEADER.size) from exc
    if model.content_hash != stored_hash:
        raise ModelFormatError("content hash mismatch", off)
    return model


def save_model(model: BlendshapeHead, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> BlendshapeHead:
    return model_from_bytes(Path(path).read_bytes())
