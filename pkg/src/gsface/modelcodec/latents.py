"""Per-point int8 latent codes with a shared tiny decoder, fitted by gradient descent.

The decoder maps a d-dimensional code through 16 leaky-ReLU units (or a
single affine layer) to the attribute, followed by an attribute-specific
output map: identity for SH rest coefficients and opacity logits,
normalization for rotation quaternions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..bits import BitstreamError
from ..paramcodec import round_half_away

HIDDEN = 16
SLOPE = 0.01
MOMENTUM = 0.9
DEFAULT_ITERS = 2000
DEFAULT_STEP = 0.5
# once the step has been halved this far below its start, no update can change the loss
MIN_STEP_RATIO = 1e-9

OUTPUT_MAPS = {"h_rest": "identity", "r": "normalize", "o": "identity"}
KINDS = ("mlp", "linear")
_HEAD = struct.Struct("<BBIHHH")


class FitError(ArithmeticError):
    pass


@dataclass
class LatentBank:
    codes: np.ndarray                  # N x d int8
    scale: np.ndarray                  # d, float32-representable
    zero_point: np.ndarray             # d, int
    layers: list                       # [(W, b)], float32-representable
    tag: str = "h_rest"
    kind: str = "mlp"

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        if self.codes.ndim != 2:
            raise ValueError("codes must be N x d")
        d = self.codes.shape[1]
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(d)
        self.zero_point = np.asarray(self.zero_point, dtype=np.int64).reshape(d)
        if self.tag not in OUTPUT_MAPS:
            raise ValueError(f"unknown attribute tag {self.tag!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        expected = _layer_shapes(d, self.out_dim_of_layers(), self.kind)
        got = [(w.shape, b.shape) for w, b in self.layers]
        if got != expected:
            raise ValueError(f"decoder architecture {got} does not match {expected}")

    def out_dim_of_layers(self) -> int:
        return int(np.shape(self.layers[-1][1])[0])

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    @property
    def out_dim(self) -> int:
        return self.out_dim_of_layers()

    @property
    def output_map(self) -> str:
        return OUTPUT_MAPS[self.tag]


@dataclass
class FitReport:
    mse: float
    trace: list = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0
    final_step: float = 0.0


def _layer_shapes(d: int, out_dim: int, kind: str):
    if kind == "linear":
        return [((d, out_dim), (out_dim,))]
    return [((d, HIDDEN), (HIDDEN,)), ((HIDDEN, out_dim), (out_dim,))]


def _leaky(x):
    return np.where(x > 0, x, SLOPE * x)


def _quant_params(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = z.min(axis=0)
    hi = z.max(axis=0)
    scale = np.where(hi > lo, (hi - lo) / 255.0, 1.0).astype(np.float32).astype(np.float64)
    zero_point = round_half_away(-128.0 - lo / scale).astype(np.int64)
    return scale, zero_point


def _codes(z: np.ndarray, scale: np.ndarray, zero_point: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(z / scale) + zero_point, -128, 127)


def _apply_map(y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "normalize":
        return y / np.linalg.norm(y, axis=1, keepdims=True)
    return y


def _decode(zq: np.ndarray, layers, kind: str, out_map: str) -> np.ndarray:
    if kind == "linear":
        (w, b), = layers
        y = zq @ w + b
    else:
        (w1, b1), (w2, b2) = layers
        y = _leaky(zq @ w1 + b1) @ w2 + b2
    return _apply_map(y, out_map)


def decode_latents(bank: LatentBank) -> np.ndarray:
    zq = (bank.codes.astype(np.float64) - bank.zero_point) * bank.scale
    return _decode(zq, bank.layers, bank.kind, bank.output_map)


def _pca_init(values: np.ndarray, d: int, kind: str, rng: np.random.Generator):
    n, out_dim = values.shape
    mean = values.mean(axis=0)
    centred = values - mean
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    k = min(d, vt.shape[0], HIDDEN // 2 if kind == "mlp" else d)
    sigma = sv[:k] / np.sqrt(n)
    sigma = np.where(sigma > 1e-12, sigma, 1.0)
    z = np.zeros((n, d))
    z[:, :k] = centred @ vt[:k].T / sigma
    if d > k:
        z[:, k:] = 1e-3 * rng.standard_normal((n, d - k))
    basis = vt[:k] * sigma[:, None]  # k x out_dim
    if kind == "linear":
        w = np.zeros((d, out_dim))
        w[:k] = basis
        return z, [(w, mean.copy())]
    # paired units u and -u: leaky(u) - leaky(-u) = (1 + slope) u keeps the init linear
    w1 = 0.1 * rng.standard_normal((d, HIDDEN))
    w2 = np.zeros((HIDDEN, out_dim))
    for i in range(k):
        w1[:, 2 * i] = 0.0
        w1[:, 2 * i + 1] = 0.0
        w1[i, 2 * i] = 1.0
        w1[i, 2 * i + 1] = -1.0
        w2[2 * i] = basis[i] / (1 + SLOPE)
        w2[2 * i + 1] = -basis[i] / (1 + SLOPE)
    return z, [(w1, np.zeros(HIDDEN)), (w2, mean.copy())]


def _loss_and_grads(z, layers, values, kind, out_map, want_grad=True):
    scale, zp = _quant_params(z)
    zq = (_codes(z, scale, zp) - zp) * scale
    if kind == "linear":
        (w, b), = layers
        y = zq @ w + b
    else:
        (w1, b1), (w2, b2) = layers
        a1 = zq @ w1 + b1
        h = _leaky(a1)
        y = h @ w2 + b2
    out = _apply_map(y, out_map)
    diff = out - values
    loss = float(np.mean(diff * diff))
    if not want_grad:
        return loss, None
    g = 2.0 * diff / diff.size
    if out_map == "normalize":
        norm = np.linalg.norm(y, axis=1, keepdims=True)
        g = (g - out * np.sum(out * g, axis=1, keepdims=True)) / norm
    if kind == "linear":
        gz = g @ w.T
        grads = [(zq.T @ g, g.sum(axis=0))]
    else:
        gw2 = h.T @ g
        gb2 = g.sum(axis=0)
        gh = (g @ w2.T) * np.where(a1 > 0, 1.0, SLOPE)
        gw1 = zq.T @ gh
        gb1 = gh.sum(axis=0)
        gz = gh @ w1.T
        grads = [(gw1, gb1), (gw2, gb2)]
    # straight-through rounding; per-point codes step on their own (un-averaged) loss
    return loss, (gz * z.shape[0], grads)


def fit_latents(
    values: np.ndarray,
    d: int,
    tag: str = "h_rest",
    iters: int = DEFAULT_ITERS,
    step: float = DEFAULT_STEP,
    seed: int = 0,
    kind: str = "mlp",
) -> tuple[LatentBank, FitReport]:
    """Jointly fit int8 latents and decoder to ``values`` (N x out_dim)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] < 1 or d < 1:
        raise ValueError("need N >= 1 and d >= 1")
    if not np.all(np.isfinite(values)):
        raise FitError("attribute values are not finite")
    if tag not in OUTPUT_MAPS:
        raise ValueError(f"unknown attribute tag {tag!r}")
    if kind not in KINDS:
        raise ValueError(f"unknown decoder kind {kind!r}")
    out_map = OUTPUT_MAPS[tag]
    rng = np.random.default_rng(seed)
    z, layers = _pca_init(values, d, kind, rng)
    loss, grads = _loss_and_grads(z, layers, values, kind, out_map)
    if not np.isfinite(loss):
        raise FitError("initial loss is not finite")
    report = FitReport(mse=loss, trace=[loss], final_step=step)
    vel_z = np.zeros_like(z)
    vel = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
    min_step = step * MIN_STEP_RATIO
    for it in range(iters):
        if step < min_step:
            break
        gz, gl = grads
        new_vz = MOMENTUM * vel_z - step * gz
        new_vel = [(MOMENTUM * vw - step * dw, MOMENTUM * vb - step * db) for (vw, vb), (dw, db) in zip(vel, gl)]
        cand_z = z + new_vz
        cand_layers = [(w + vw, b + vb) for (w, b), (vw, vb) in zip(layers, new_vel)]
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught just below
            cand_loss, cand_grads = _loss_and_grads(cand_z, cand_layers, values, kind, out_map)
        if not np.isfinite(cand_loss):
            raise FitError(f"loss became non-finite at step {it} (step size {step:g} too large)")
        if cand_loss <= loss:
            z, layers, loss, grads = cand_z, cand_layers, cand_loss, cand_grads
            vel_z, vel = new_vz, new_vel
            report.accepted += 1
        else:
            step *= 0.5
            vel_z = np.zeros_like(z)
            vel = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
            report.rejected += 1
        report.trace.append(loss)
    report.final_step = step

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    scale, zp = _quant_params(z)
    bank = LatentBank(_codes(z, scale, zp), scale, zp, [(f32(w), f32(b)) for w, b in layers], tag, kind)
    out = decode_latents(bank)
    report.mse = float(np.mean((out - values) ** 2))
    return bank, report


def bank_to_bytes(bank: LatentBank) -> bytes:
    tag = bank.tag.encode()
    n, d = bank.codes.shape
    parts = [
        _HEAD.pack(len(tag), KINDS.index(bank.kind), n, d, bank.out_dim, HIDDEN),
        tag,
        bank.scale.astype("<f4").tobytes(),
        bank.zero_point.astype("<i4").tobytes(),
        # channel-major: each code channel is a smooth field, which LZ77 likes
        np.ascontiguousarray(bank.codes.T).tobytes(),
    ]
    for w, b in bank.layers:
        parts += [w.astype("<f4").tobytes(), b.astype("<f4").tobytes()]
    return b"".join(parts)


def bank_from_bytes(blob: bytes) -> LatentBank:
    blob = bytes(blob)
    try:
        tag_len, kind_i, n, d, out_dim, hidden = _HEAD.unpack_from(blob, 0)
        off = _HEAD.size
        tag = blob[off:off + tag_len].decode()
        off += tag_len
        if kind_i >= len(KINDS):
            raise BitstreamError(f"unknown decoder kind {kind_i}", 8 * off)
        kind = KINDS[kind_i]
        if kind == "mlp" and hidden != HIDDEN:
            raise BitstreamError(f"decoder hidden width {hidden} unsupported", 8 * off)
        scale = np.frombuffer(blob, "<f4", d, off).astype(np.float64)
        off += 4 * d
        zp = np.frombuffer(blob, "<i4", d, off).astype(np.int64)
        off += 4 * d
        codes = np.frombuffer(blob, np.int8, n * d, off).reshape(d, n).T
        off += n * d
        layers = []
        for (ws, bs) in _layer_shapes(d, out_dim, kind):
            w = np.frombuffer(blob, "<f4", ws[0] * ws[1], off).reshape(ws).astype(np.float64)
            off += 4 * w.size
            b = np.frombuffer(blob, "<f4", bs[0], off).astype(np.float64)
            off += 4 * b.size
            layers.append((w, b))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise BitstreamError(f"malformed latent bank: {exc}") from None
    if off != len(blob):
        raise BitstreamError("trailing bytes after latent bank", 8 * off)
    return LatentBank(codes, scale, zp, layers, tag, kind)
