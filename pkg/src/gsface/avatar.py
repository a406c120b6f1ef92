"""Gaussian head avatar: UV-anchored point set, expression offset MLP, composition.

Gaussian means follow the deformed mesh through fixed (face, barycentric)
anchors; an MLP conditioned on the positionally encoded anchor position and
the expression vector predicts per-point offsets for mean, rotation and
log-scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .head import BlendshapeHead, FlameParams, deform
from .sections import METHOD_STORED, ContainerError, Section, read_sections, write_sections

SH_C0 = 0.28209479177387814
DEFAULT_GRID = 128
DEFAULT_DIM_PSI = 50
LEAKY_SLOPE = 0.01
# rows per GEMM call; a fixed block shape keeps batched and per-point forwards bit-identical
FORWARD_BLOCK = 256

AVATAR_MAGIC = b"GFAV"
AVATAR_VERSION = 1

SEC_ANCHORS = 1
SEC_H_REST = 2
SEC_ROTATION = 3
SEC_OPACITY = 4
SEC_H_BASE = 5
SEC_SCALE = 6
SEC_MLP = 7
SEC_META = 8


def sh_rest_width(sh_degree: int) -> int:
    return 3 * ((sh_degree + 1) ** 2 - 1)


@dataclass(frozen=True)
class Anchors:
    face: np.ndarray   # N
    bary: np.ndarray   # N x 3
    grid_size: int

    def __len__(self) -> int:
        return self.face.shape[0]


@dataclass
class GaussianSet:
    anchors: Anchors
    r: np.ndarray        # N x 4 unit quaternions (w, x, y, z)
    s: np.ndarray        # N x 3 log-scales
    o: np.ndarray        # N opacity logits
    h_base: np.ndarray   # N x 3
    h_rest: np.ndarray   # N x 3*((L+1)^2-1), laid out [coefficient][channel]
    sh_degree: int = 1

    def __post_init__(self):
        n = len(self.anchors)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(n, 4)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(n, 3)
        self.o = np.asarray(self.o, dtype=np.float64).reshape(n)
        self.h_base = np.asarray(self.h_base, dtype=np.float64).reshape(n, 3)
        self.h_rest = np.asarray(self.h_rest, dtype=np.float64).reshape(n, sh_rest_width(self.sh_degree))
        bary = self.anchors.bary
        if np.any(bary < 0) or np.any(np.abs(bary.sum(axis=1) - 1) > 1e-6):
            raise ValueError("barycentric weights must be nonnegative and sum to 1")
        if np.any(np.abs(np.linalg.norm(self.r, axis=1) - 1) > 1e-6):
            raise ValueError("rotations must be unit quaternions")

    @property
    def n_points(self) -> int:
        return len(self.anchors)


@dataclass
class OffsetNetwork:
    layers: list[tuple[np.ndarray, np.ndarray]]
    pe_bands: int = 10
    include_raw: bool = True
    dim_psi: int = DEFAULT_DIM_PSI
    pos_scale: float = 128.0
    out_scale: tuple[float, float, float] = (0.01, 0.1, 0.1)

    def __post_init__(self):
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in self.layers]
        dims = [self.input_dim]
        for w, b in self.layers:
            if w.shape[0] != dims[-1] or b.shape != (w.shape[1],):
                raise ValueError(f"layer shapes do not chain: {w.shape} after width {dims[-1]}")
            dims.append(w.shape[1])
        if dims[-1] != 10:
            raise ValueError("offset network must output 10 values (3 + 4 + 3)")

    @property
    def input_dim(self) -> int:
        return 6 * self.pe_bands + (3 if self.include_raw else 0) + self.dim_psi

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    @classmethod
    def random(cls, seed: int, hidden: tuple[int, ...] = (256, 256, 256), **config) -> "OffsetNetwork":
        rng = np.random.default_rng(seed)
        probe = cls.__new__(cls)
        probe.pe_bands = config.get("pe_bands", 10)
        probe.include_raw = config.get("include_raw", True)
        probe.dim_psi = config.get("dim_psi", DEFAULT_DIM_PSI)
        widths = [probe.input_dim, *hidden, 10]
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            b = rng.normal(0.0, 0.01, size=fan_out)
            # float32-representable so the GFAV round trip is exact
            layers.append((w.astype(np.float32), b.astype(np.float32)))
        return cls(layers, **config)


@dataclass
class GaussianAvatar:
    gaussians: GaussianSet
    network: OffsetNetwork
    base_hash: bytes
    meta: dict = field(default_factory=dict)


@dataclass
class ComposedGaussians:
    means: np.ndarray     # N x 3
    quats: np.ndarray     # N x 4
    scales: np.ndarray    # N x 3
    alpha: np.ndarray     # N
    h_base: np.ndarray
    h_rest: np.ndarray
    sh_degree: int = 1

    def __len__(self) -> int:
        return self.means.shape[0]


def anchor_points(model: BlendshapeHead, grid_size: int) -> Anchors:
    """Sample a grid_size x grid_size lattice of UV cell centres onto the atlas.

    Samples falling in no triangle are dropped; a sample on a shared edge goes
    to the lowest face index.  Output is in row-major sample order.
    """
    if grid_size < 1:
        raise ValueError("grid size must be >= 1")
    if len(model.faces) == 0:
        raise ValueError("model has an empty UV atlas")
    g = grid_size
    centres = (np.arange(g) + 0.5) / g
    owner = np.full(g * g, -1, dtype=np.int64)
    bary = np.zeros((g * g, 3))
    tri = model.uv[model.faces]  # F x 3 x 2
    lo = np.clip(np.ceil(tri.min(axis=1) * g - 0.5 - 1e-9), 0, g).astype(int)
    hi = np.clip(np.floor(tri.max(axis=1) * g - 0.5 + 1e-9), -1, g - 1).astype(int)
    for f in range(len(model.faces)):
        (u0, v0), (u1, v1), (u2, v2) = tri[f]
        if hi[f, 0] < lo[f, 0] or hi[f, 1] < lo[f, 1]:
            continue
        iu = np.arange(lo[f, 0], hi[f, 0] + 1)
        iv = np.arange(lo[f, 1], hi[f, 1] + 1)
        jv, ju = np.meshgrid(iv, iu, indexing="ij")
        idx = (jv * g + ju).ravel()
        pu, pv = centres[ju.ravel()], centres[jv.ravel()]
        det = (v1 - v2) * (u0 - u2) + (u2 - u1) * (v0 - v2)
        w0 = ((v1 - v2) * (pu - u2) + (u2 - u1) * (pv - v2)) / det
        w1 = ((v2 - v0) * (pu - u2) + (u0 - u2) * (pv - v2)) / det
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12) & (owner[idx] < 0)
        take = idx[inside]
        owner[take] = f
        bary[take] = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
    keep = owner >= 0
    w = np.clip(bary[keep], 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return Anchors(owner[keep], w, grid_size)


def mesh_positions(anchors: Anchors, faces: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Barycentric interpolation of anchor positions on the deformed mesh."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or faces.max() >= vertices.shape[0]:
        raise ValueError(f"vertex array {vertices.shape} does not match the mesh")
    corners = vertices[faces[anchors.face]]  # N x 3 x 3
    return np.einsum("nj,njk->nk", anchors.bary, corners)


def positional_encoding(x: np.ndarray, bands: int, include_raw: bool = True) -> np.ndarray:
    """NeRF-style encoding: [x] + [sin(2^l pi x), cos(2^l pi x) for l < bands]."""
    if bands < 1:
        raise ValueError("need at least one frequency band")
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if include_raw else []
    for level in range(bands):
        arg = (2.0**level) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def mlp_forward(layers: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> np.ndarray:
    """Leaky hidden layers, identity output, evaluated in fixed-size row blocks."""
    n = x.shape[0]
    out = np.empty((n, layers[-1][0].shape[1]))
    for start in range(0, n, FORWARD_BLOCK):
        h = x[start:start + FORWARD_BLOCK]
        rows = h.shape[0]
        if rows < FORWARD_BLOCK:
            padded = np.zeros((FORWARD_BLOCK, x.shape[1]))
            padded[:rows] = h
            h = padded
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:
                h = _leaky(h)
        out[start:start + rows] = h[:rows]
    return out


def network_input(net: OffsetNetwork, mu_m: np.ndarray, psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64).ravel()
    if psi.shape[0] > net.dim_psi:
        raise ValueError(f"expression vector has {psi.shape[0]} dims, network accepts {net.dim_psi}")
    padded = np.zeros(net.dim_psi)
    padded[: psi.shape[0]] = psi
    enc = positional_encoding(np.asarray(mu_m) / net.pos_scale, net.pe_bands, net.include_raw)
    return np.concatenate([enc, np.broadcast_to(padded, (enc.shape[0], net.dim_psi))], axis=1)


def offset_forward(net: OffsetNetwork, mu_m: np.ndarray, psi: np.ndarray, layers=None):
    """Per-point (d_mu N x 3, d_r N x 4, d_s N x 3); ``layers`` overrides the weights."""
    out = mlp_forward(net.layers if layers is None else layers, network_input(net, mu_m, psi))
    k_mu, k_r, k_s = net.out_scale
    return out[:, :3] * k_mu, out[:, 3:7] * k_r, out[:, 7:10] * k_s


def compose(base: GaussianSet, mu_m, d_mu, d_r, d_s) -> ComposedGaussians:
    q = base.r + d_r
    norm = np.linalg.norm(q, axis=1)
    if np.any(norm < 1e-8):
        raise ValueError(f"degenerate rotation at point {int(np.argmin(norm))}")
    return ComposedGaussians(
        means=np.asarray(mu_m) + d_mu,
        quats=q / norm[:, None],
        scales=np.exp(base.s + d_s),
        alpha=1.0 / (1.0 + np.exp(-base.o)),
        h_base=base.h_base,
        h_rest=base.h_rest,
        sh_degree=base.sh_degree,
    )


def drive(avatar: GaussianAvatar, model: BlendshapeHead, params: FlameParams, layers=None) -> ComposedGaussians:
    """deform -> mesh_positions -> offset_forward -> compose for one frame."""
    verts = deform(model, params)
    mu_m = mesh_positions(avatar.gaussians.anchors, model.faces, verts)
    d_mu, d_r, d_s = offset_forward(avatar.network, mu_m, params.psi, layers)
    return compose(avatar.gaussians, mu_m, d_mu, d_r, d_s)


def _smooth_scalar(rng, dirs, n_terms=4):
    out = dirs @ rng.normal(size=3) * 0.3
    for _ in range(n_terms):
        freq = rng.normal(size=3) * rng.uniform(1.0, 4.0)
        out = out + rng.normal() * np.sin(dirs @ freq + rng.uniform(0, 2 * np.pi))
    return out / max(np.abs(out).max(), 1e-12)


def make_avatar(
    model: BlendshapeHead,
    seed: int = 0,
    grid_size: int = DEFAULT_GRID,
    dim_psi: int = DEFAULT_DIM_PSI,
    hidden: tuple[int, ...] = (256, 256, 256),
) -> GaussianAvatar:
    """Synthetic avatar with spatially smooth attributes (stands in for a trained one)."""
    rng = np.random.default_rng(seed)
    anchors = anchor_points(model, grid_size)
    mu0 = mesh_positions(anchors, model.faces, model.template)
    dirs = mu0 / np.linalg.norm(mu0, axis=1, keepdims=True)
    n = len(anchors)

    skin = np.array([0.78, 0.58, 0.48])
    color = skin + 0.08 * np.stack([_smooth_scalar(rng, dirs) for _ in range(3)], axis=1)
    front = np.clip(-dirs[:, 2], 0, None)
    for centre, tint, width in (
        ((-0.35, 0.25, -0.9), (-0.5, -0.45, -0.35), 0.18),   # eyes
        ((0.35, 0.25, -0.9), (-0.5, -0.45, -0.35), 0.18),
        ((0.0, -0.45, -0.88), (0.05, -0.3, -0.25), 0.22),    # mouth
        ((0.0, 0.95, 0.0), (-0.45, -0.4, -0.35), 0.9),       # hair cap
    ):
        c = np.asarray(centre) / np.linalg.norm(centre)
        weight = np.exp(-np.sum((dirs - c) ** 2, axis=1) / (2 * width**2))
        color = color + weight[:, None] * np.asarray(tint)
    color = np.clip(color, 0.02, 0.98) * (0.85 + 0.15 * front)[:, None]
    h_base = color / SH_C0

    rest_w = sh_rest_width(1)
    rest_dir = rng.normal(size=rest_w) * 0.08
    h_rest = _smooth_scalar(rng, dirs)[:, None] * rest_dir + 0.002 * rng.normal(size=(n, rest_w))

    q = np.stack([np.full(n, 1.5)] + [_smooth_scalar(rng, dirs) for _ in range(3)], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)

    log_scale = np.log(2.2) + 0.15 * np.stack([_smooth_scalar(rng, dirs) for _ in range(3)], axis=1)
    log_scale[:, 2] -= 0.8
    opacity = 2.5 + 1.0 * _smooth_scalar(rng, dirs)

    # float32-representable, matching what the GFAV file stores
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    gaussians = GaussianSet(anchors, f32(q), f32(log_scale), f32(opacity), f32(h_base), f32(h_rest), 1)
    network = OffsetNetwork.random(seed + 1, hidden, dim_psi=dim_psi)
    return GaussianAvatar(gaussians, network, model.content_hash, {"seed": seed})


# -- GFAV file ---------------------------------------------------------------

_ANCHOR_CFG = struct.Struct("<IIB")


def encode_mlp_f32(net: OffsetNetwork) -> bytes:
    arch = {
        "pe_bands": net.pe_bands,
        "include_raw": net.include_raw,
        "dim_psi": net.dim_psi,
        "pos_scale": net.pos_scale,
        "out_scale": list(net.out_scale),
        "shapes": [list(w.shape) for w, _ in net.layers],
    }
    blob = json.dumps(arch, sort_keys=True).encode()
    parts = [struct.pack("<I", len(blob)), blob]
    for w, b in net.layers:
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    return b"".join(parts)


def network_arch(blob: bytes) -> tuple[dict, int]:
    (n,) = struct.unpack_from("<I", blob, 0)
    return json.loads(blob[4:4 + n]), 4 + n


def decode_mlp_f32(blob: bytes) -> OffsetNetwork:
    arch, off = network_arch(blob)
    layers = []
    for fan_in, fan_out in arch["shapes"]:
        w = np.frombuffer(blob, "<f4", fan_in * fan_out, off).reshape(fan_in, fan_out)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(blob, "<f4", fan_out, off)
        off += 4 * fan_out
        layers.append((w, b))
    if off != len(blob):
        raise ContainerError("MLP section has trailing bytes", off)
    return OffsetNetwork(
        layers, arch["pe_bands"], arch["include_raw"], arch["dim_psi"], arch["pos_scale"], tuple(arch["out_scale"])
    )


def anchors_config_bytes(g: GaussianSet) -> bytes:
    return _ANCHOR_CFG.pack(g.anchors.grid_size, g.n_points, g.sh_degree)


def parse_anchors_config(blob: bytes, model: BlendshapeHead) -> tuple[Anchors, int]:
    grid, n, degree = _ANCHOR_CFG.unpack(blob)
    anchors = anchor_points(model, grid)
    if len(anchors) != n:
        raise ContainerError(f"base model yields {len(anchors)} anchors, file expects {n}")
    return anchors, degree


def avatar_to_bytes(avatar: GaussianAvatar) -> bytes:
    g = avatar.gaussians
    raw = {
        SEC_ANCHORS: anchors_config_bytes(g),
        SEC_H_REST: g.h_rest.astype("<f4").tobytes(),
        SEC_ROTATION: g.r.astype("<f4").tobytes(),
        SEC_OPACITY: g.o.astype("<f4").tobytes(),
        SEC_H_BASE: g.h_base.astype("<f4").tobytes(),
        SEC_SCALE: g.s.astype("<f4").tobytes(),
        SEC_MLP: encode_mlp_f32(avatar.network),
        SEC_META: json.dumps(avatar.meta, sort_keys=True).encode(),
    }
    sections = [Section(sid, METHOD_STORED, blob, len(blob)) for sid, blob in raw.items()]
    return write_sections(AVATAR_MAGIC, AVATAR_VERSION, avatar.base_hash, sections)


def avatar_from_bytes(data: bytes, model: BlendshapeHead) -> GaussianAvatar:
    base_hash, secs = read_sections(data, AVATAR_MAGIC, AVATAR_VERSION)
    if base_hash != model.content_hash:
        raise ContainerError("avatar was built for a different base model")
    missing = {SEC_ANCHORS, SEC_H_REST, SEC_ROTATION, SEC_OPACITY, SEC_H_BASE, SEC_SCALE, SEC_MLP} - secs.keys()
    if missing:
        raise ContainerError(f"missing sections {sorted(missing)}")
    anchors, degree = parse_anchors_config(secs[SEC_ANCHORS].stored, model)
    arr = lambda sid: np.frombuffer(secs[sid].stored, "<f4").astype(np.float64)  # noqa: E731
    gaussians = GaussianSet(
        anchors,
        arr(SEC_ROTATION),
        arr(SEC_SCALE),
        arr(SEC_OPACITY),
        arr(SEC_H_BASE),
        arr(SEC_H_REST),
        degree,
    )
    meta = json.loads(secs[SEC_META].stored) if SEC_META in secs else {}
    return GaussianAvatar(gaussians, decode_mlp_f32(secs[SEC_MLP].stored), base_hash, meta)


def save_avatar(avatar: GaussianAvatar, path: str | Path) -> None:
    Path(path).write_bytes(avatar_to_bytes(avatar))


def load_avatar(path: str | Path, model: BlendshapeHead) -> GaussianAvatar:
    return avatar_from_bytes(Path(path).read_bytes(), model)
