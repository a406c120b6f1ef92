"""Sender/receiver pipelines, rate-distortion sweeps, link simulation and the compression ablation."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import paramcodec as pc
from .avatar import GaussianAvatar, avatar_to_bytes, drive, encode_mlp_f32
from .head import EXPR_DIMS, THETA_DIM, BlendshapeHead, FlameParams
from .modelcodec import CompressionConfig, pack_container, unpack_container
from .render import DEFAULT_BACKGROUND, Camera, psnr, rasterize, ssim

MOTIONS = ("smooth", "static", "random")
SEQ_MAGIC = b"GFPR"
SEQ_VERSION = 1
_SEQ_HEAD = struct.Struct("<4sHIHHf")

# fixed camera rig: looking down +z at the head from 600 mm, image y pointing down
RIG_ROTATION = np.diag([-1.0, -1.0, 1.0])
RIG_TRANSLATION = np.array([0.0, 0.0, 600.0])
FOCAL_FACTOR = 2.4


class SessionError(ValueError):
    pass


@dataclass
class ParamSequence:
    psi: np.ndarray     # F x n_psi
    theta: np.ndarray   # F x 11
    fps: float = pc.DEFAULT_FPS

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.psi.ndim != 2 or self.theta.shape != (self.psi.shape[0], THETA_DIM):
            raise SessionError(f"sequence needs F x n_psi expression and F x {THETA_DIM} pose arrays")

    def __len__(self) -> int:
        return self.psi.shape[0]

    @property
    def n_psi(self) -> int:
        return self.psi.shape[1]

    def frames(self, dim_psi: int) -> np.ndarray:
        """F x (dim_psi + 11) codec input: truncated expression then pose."""
        return np.concatenate([pc.truncate_expression(self.psi, dim_psi), self.theta], axis=1)

    def params(self, i: int, n_beta: int = 0) -> FlameParams:
        return FlameParams(np.zeros(n_beta), self.theta[i], self.psi[i])

    # -- files -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        head = _SEQ_HEAD.pack(SEQ_MAGIC, SEQ_VERSION, len(self), self.n_psi, THETA_DIM, self.fps)
        return head + np.concatenate([self.psi, self.theta], axis=1).astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamSequence":
        if len(data) < _SEQ_HEAD.size:
            raise SessionError("sequence file truncated in header")
        magic, version, n, n_psi, n_theta, fps = _SEQ_HEAD.unpack_from(data, 0)
        if magic != SEQ_MAGIC or version != SEQ_VERSION or n_theta != THETA_DIM:
            raise SessionError("not a GFPR v1 sequence file")
        width = n_psi + n_theta
        if len(data) != _SEQ_HEAD.size + 4 * n * width:
            raise SessionError("sequence file size does not match its header")
        arr = np.frombuffer(data, "<f4", n * width, _SEQ_HEAD.size).reshape(n, width).astype(np.float64)
        return cls(arr[:, :n_psi].copy(), arr[:, n_psi:].copy(), float(fps))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"psi_{k}" for k in range(self.n_psi)] + [f"theta_{k}" for k in range(THETA_DIM)])
        for row in np.concatenate([self.psi, self.theta], axis=1):
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, fps: float = pc.DEFAULT_FPS) -> "ParamSequence":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise SessionError("empty sequence CSV")
        header = rows[0]
        n_psi = sum(1 for h in header if h.startswith("psi_"))
        if len(header) != n_psi + THETA_DIM or any(not h.startswith(("psi_", "theta_")) for h in header):
            raise SessionError(f"CSV header must be psi_0..psi_k then theta_0..theta_{THETA_DIM - 1}")
        try:
            arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(header))
        except ValueError as exc:
            raise SessionError(f"bad number in sequence CSV: {exc}") from None
        return cls(arr[:, :n_psi], arr[:, n_psi:], fps)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix.lower() == ".csv":
            path.write_text(self.to_csv())
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParamSequence":
        path = Path(path)
        if path.suffix.lower() == ".csv":
            return cls.from_csv(path.read_text())
        return cls.from_bytes(path.read_bytes())


# -- synthetic sequences ----------------------------------------------------------

EXPR_AMPLITUDE = 1.5
EXPR_DECAY = 0.93
NOISE_LEVEL = 0.003
ROT_AMPLITUDE = (0.15, 0.2, 0.05)
TRANS_AMPLITUDE = (8.0, 6.0, 10.0)
POSE_BLEND_AMPLITUDE = 0.5


def _smooth_track(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    """Three low-frequency sinusoids plus light noise, scaled to unit peak."""
    freqs = rng.uniform(0.05, 0.35, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    weights = rng.uniform(0.5, 1.0, size=3)
    x = (weights[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    x = x / weights.sum() + NOISE_LEVEL * rng.standard_normal(t.size)
    return x / max(np.abs(x).max(), 1e-12)


def generate_sequence(
    seed: int,
    frames: int,
    dim_psi: int = 50,
    motion: str = "smooth",
    fps: float = pc.DEFAULT_FPS,
) -> ParamSequence:
    """Synthetic expression/pose trajectories; dimension k has peak |value| = amplitude(k), decreasing in k."""
    if frames < 1:
        raise SessionError("need at least one frame")
    if motion not in MOTIONS:
        raise SessionError(f"motion must be one of {MOTIONS}")
    rng = np.random.default_rng(seed)
    t = np.arange(frames) / fps
    expr_amp = EXPR_AMPLITUDE * EXPR_DECAY ** np.arange(dim_psi)
    theta_amp = np.concatenate([ROT_AMPLITUDE, TRANS_AMPLITUDE, POSE_BLEND_AMPLITUDE * 0.8 ** np.arange(5)])
    amps = np.concatenate([expr_amp, theta_amp])
    if motion == "smooth":
        tracks = np.stack([_smooth_track(rng, t) for _ in amps], axis=1)
    elif motion == "static":
        tracks = np.repeat(rng.uniform(-1, 1, size=(1, amps.size)), frames, axis=0)
    else:
        walk = np.cumsum(rng.standard_normal((frames, amps.size)), axis=0)
        tracks = walk / np.maximum(np.abs(walk).max(axis=0), 1e-12)
    values = tracks * amps
    return ParamSequence(values[:, :dim_psi], values[:, dim_psi:], fps)


# -- configuration --------------------------------------------------------------------

@dataclass(frozen=True)
class SessionConfig:
    dim_psi: int = 50
    bit_depth: int = 8
    fps: float = pc.DEFAULT_FPS
    intra_period: int = pc.DEFAULT_INTRA_PERIOD
    image_size: int = 128
    background: tuple = DEFAULT_BACKGROUND
    container: CompressionConfig = field(default_factory=CompressionConfig)

    def __post_init__(self):
        if self.dim_psi not in EXPR_DIMS:
            raise SessionError(f"dim_psi must be one of {EXPR_DIMS}")
        if self.bit_depth not in pc.BIT_DEPTHS:
            raise SessionError(f"bit depth must be one of {pc.BIT_DEPTHS}")
        if self.intra_period < 1 or self.fps <= 0 or self.image_size < 8:
            raise SessionError("intra period, fps and image size must be positive")


def camera_from_pose(theta: np.ndarray, size: int) -> Camera:
    """Fixed rig composed with the decoded global rotation (axis-angle) and translation."""
    theta = np.asarray(theta, dtype=np.float64)
    rot = RIG_ROTATION @ Rotation.from_rotvec(theta[0:3]).as_matrix()
    f = FOCAL_FACTOR * size
    return Camera(rot, RIG_TRANSLATION + theta[3:6], f, f, size / 2, size / 2, size, size)


def render_frame(avatar: GaussianAvatar, model: BlendshapeHead, psi: np.ndarray, theta: np.ndarray,
                 size: int, background=DEFAULT_BACKGROUND) -> np.ndarray:
    params = FlameParams(np.zeros(0), theta, pc.pad_expression(psi, avatar.network.dim_psi))
    return rasterize(drive(avatar, model, params), camera_from_pose(theta, size), background).image


def frame_indices(n_frames: int, count: int) -> np.ndarray:
    """``count`` evenly spaced frame indices (all frames if count >= n_frames)."""
    if count >= n_frames:
        return np.arange(n_frames)
    return np.unique(np.round(np.linspace(0, n_frames - 1, count)).astype(int))


# -- sender -----------------------------------------------------------------------

@dataclass
class EncodeResult:
    stream: bytes
    stats: pc.StreamStats
    header: pc.StreamHeader

    def summary(self) -> dict:
        s = self.stats
        return {
            "frames": s.n_frames,
            "bytes": s.total_bytes,
            "kbps": s.kbps,
            "payload_kbps": s.payload_kbps,
            "expression_share": s.expression_share,
            "clamped": s.clamped,
            "header_bytes": s.header_bytes,
        }


def run_encoder(seq: ParamSequence, config: SessionConfig) -> EncodeResult:
    if seq.n_psi < config.dim_psi:
        raise SessionError(f"sequence has {seq.n_psi} expression dims, config needs {config.dim_psi}")
    frames = seq.frames(config.dim_psi)
    header = pc.make_header(frames, config.dim_psi, config.bit_depth, config.fps, config.intra_period)
    stream, stats, _ = pc.encode_stream(frames, header)
    return EncodeResult(stream, stats, header)


# -- receiver -----------------------------------------------------------------------

@dataclass
class DecodeResult:
    indices: np.ndarray
    images: list
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan


class ReferenceRenderer:
    """Caches uncompressed-avatar renders of unquantized parameters, keyed by frame index."""

    def __init__(self, seq: ParamSequence, avatar: GaussianAvatar, model: BlendshapeHead, size: int,
                 background=DEFAULT_BACKGROUND):
        self.seq, self.avatar, self.model, self.size, self.background = seq, avatar, model, size, background
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = render_frame(self.avatar, self.model, self.seq.psi[i], self.seq.theta[i],
                                          self.size, self.background)
        return self._cache[i]


def run_decoder(
    stream: bytes,
    avatar: GaussianAvatar,
    model: BlendshapeHead,
    size: int = 128,
    indices=None,
    reference: ReferenceRenderer | None = None,
    background=DEFAULT_BACKGROUND,
) -> DecodeResult:
    """Decode the stream and render the selected frames, scoring them against ``reference`` if given."""
    if not stream:
        raise SessionError("empty bitstream")
    if avatar.base_hash != model.content_hash:
        raise SessionError("avatar was built for a different base model")
    decoded = pc.decode_stream(stream)
    header = decoded.header
    n = decoded.values.shape[0]
    idx = np.arange(n) if indices is None else np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise SessionError(f"frame index out of range for a {n}-frame stream")
    if reference is not None and len(reference.seq) != n:
        raise SessionError("reference sequence length differs from the stream")
    result = DecodeResult(idx, [])
    for i in idx.tolist():
        psi = decoded.values[i, :header.dim_psi]
        theta = decoded.values[i, header.dim_psi:]
        img = render_frame(avatar, model, psi, theta, size, background)
        result.images.append(img)
        if reference is not None:
            ref = reference(i)
            result.psnr.append(psnr(img, ref))
            result.ssim.append(ssim(img, ref))
    return result


# -- rate-distortion sweep ------------------------------------------------------------

@dataclass
class RdPoint:
    dim_psi: int
    bits: int
    kbps: float
    psnr: float
    ssim: float
    stream: bytes = field(repr=False, default=b"")


RD_COLUMNS = ("dim_psi", "bits", "kbps", "psnr", "ssim")


def rd_sweep(
    seq: ParamSequence,
    avatar: GaussianAvatar,
    model: BlendshapeHead,
    configs: list[SessionConfig],
    render_frames: int = 4,
    reference: ReferenceRenderer | None = None,
) -> list[RdPoint]:
    """One RD point per config; ``reference`` defaults to renders of ``avatar`` itself."""
    if not configs:
        raise SessionError("rd sweep needs at least one configuration")
    size = configs[0].image_size
    if reference is None:
        reference = ReferenceRenderer(seq, avatar, model, size, configs[0].background)
    idx = frame_indices(len(seq), render_frames)
    points = []
    for cfg in configs:
        enc = run_encoder(seq, cfg)
        dec = run_decoder(enc.stream, avatar, model, cfg.image_size, idx, reference, cfg.background)
        points.append(RdPoint(cfg.dim_psi, cfg.bit_depth, enc.stats.kbps, dec.mean_psnr, dec.mean_ssim, enc.stream))
    return points


def rd_csv(points: list[RdPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RD_COLUMNS)
    for p in points:
        writer.writerow([p.dim_psi, p.bits, f"{p.kbps:.6f}", f"{p.psnr:.6f}", f"{p.ssim:.8f}"])
    return buf.getvalue()


def sweep_configs(dims=EXPR_DIMS, depths=pc.BIT_DEPTHS, **common) -> list[SessionConfig]:
    return [SessionConfig(dim_psi=d, bit_depth=b, **common) for b in depths for d in dims]


# -- link simulation --------------------------------------------------------------------

@dataclass
class LinkReport:
    delays: np.ndarray        # seconds, per frame: arrival to last bit sent
    capacity_kbps: float
    mean_kbps: float
    fps: float

    @property
    def feasible(self) -> bool:
        return self.mean_kbps < self.capacity_kbps

    @property
    def max_delay(self) -> float:
        return float(self.delays.max())

    def summary(self) -> dict:
        d = self.delays
        return {
            "frames": int(d.size),
            "capacity_kbps": self.capacity_kbps if math.isfinite(self.capacity_kbps) else "inf",
            "mean_kbps": self.mean_kbps,
            "feasible": self.feasible,
            "mean_delay_s": float(d.mean()),
            "p95_delay_s": float(np.percentile(d, 95)),
            "max_delay_s": self.max_delay,
            "final_delay_s": float(d[-1]),
        }


def simulate_link(frame_bytes, capacity_kbps: float, fps: float = pc.DEFAULT_FPS, bucket_bits: float = 0.0) -> LinkReport:
    """Token-bucket link: tokens accrue at the capacity up to ``bucket_bits`` (or the frame size if larger).

    Frame i arrives at i / fps and leaves once enough tokens have accrued for
    all of it, after every earlier frame has left.
    """
    if not capacity_kbps > 0:
        raise SessionError("link capacity must be positive")
    sizes = np.asarray(frame_bytes, dtype=np.float64) * 8
    rate = capacity_kbps * 1000.0
    delays = np.zeros(sizes.size)
    tokens = bucket_bits
    clock = 0.0           # time the previous frame left
    for i, bits in enumerate(sizes.tolist()):
        arrival = i / fps
        start = max(arrival, clock)
        cap = max(bucket_bits, bits)
        if math.isinf(rate):
            done = start
            tokens = cap
        else:
            tokens = min(cap, tokens + rate * (start - clock))
            done = start + max(0.0, bits - tokens) / rate
            tokens = max(0.0, tokens - bits)
        delays[i] = done - arrival
        clock = done
    mean_kbps = float(sizes.sum()) * fps / max(sizes.size, 1) / 1000.0
    return LinkReport(delays, capacity_kbps, mean_kbps, fps)


def stream_frame_sizes(stream: bytes) -> np.ndarray:
    """Per-frame byte counts with the stream header charged to frame 0 (sums to the file size)."""
    decoded = pc.decode_stream(stream)
    sizes = decoded.frame_bytes.astype(np.int64).copy()
    sizes[0] += decoded.header.nbytes
    return sizes


# -- compression ablation -----------------------------------------------------------------

ABLATION_STAGES = ("Uncompressed", "+ LR", "+ MP", "+ QE", "+ LZ77")
ABLATION_COLUMNS = ("stage", "gs_attr_bytes", "mlp_bytes", "total_bytes", "psnr")


@dataclass
class AblationRow:
    stage: str
    gs_attr_bytes: int
    mlp_bytes: int
    total_bytes: int
    psnr: float
    container: bytes = field(repr=False, default=b"")


def ablation_ladder(base: CompressionConfig = CompressionConfig()) -> list[CompressionConfig]:
    off = replace(base, latents=False, prune=False, quantize=False, lz77=False)
    lr = replace(off, latents=True)
    mp = replace(lr, prune=True)
    qe = replace(mp, quantize=True)
    return [lr, mp, qe, replace(qe, lz77=True)]


def ablation_report(
    avatar: GaussianAvatar,
    model: BlendshapeHead,
    seq: ParamSequence | None = None,
    base: CompressionConfig = CompressionConfig(),
    render_frames: int = 3,
    size: int = 128,
) -> list[AblationRow]:
    """Apply the stages cumulatively and measure sizes and render PSNR against the uncompressed avatar."""
    if seq is None:
        seq = generate_sequence(base.seed, 50, avatar.network.dim_psi)
    reference = ReferenceRenderer(seq, avatar, model, size)
    idx = frame_indices(len(seq), render_frames).tolist()

    def score(av: GaussianAvatar) -> float:
        return float(np.mean([
            psnr(render_frame(av, model, seq.psi[i], seq.theta[i], size), reference(i)) for i in idx
        ]))

    gfav = avatar_to_bytes(avatar)
    mlp_raw = len(encode_mlp_f32(avatar.network))
    rows = [AblationRow(ABLATION_STAGES[0], len(gfav) - mlp_raw, mlp_raw, len(gfav), score(avatar), gfav)]
    for stage, cfg in zip(ABLATION_STAGES[1:], ablation_ladder(base)):
        data, report = pack_container(avatar, cfg)
        rows.append(AblationRow(stage, report.total_bytes - report.mlp_bytes, report.mlp_bytes, report.total_bytes,
                                score(unpack_container(data, model)), data))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for r in rows:
        writer.writerow([r.stage, r.gs_attr_bytes, r.mlp_bytes, r.total_bytes, f"{r.psnr:.6f}"])
    return buf.getvalue()
