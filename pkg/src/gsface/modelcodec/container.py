"""The "GFCM" compact avatar container.

Each section payload starts with a one-byte encoding kind, so every stage
of the pipeline can be toggled independently (the ablation ladder uses
this). Sections are LZ77-compressed when that makes them smaller and
stored otherwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..avatar import (
    GaussianAvatar,
    GaussianSet,
    OffsetNetwork,
    anchors_config_bytes,
    decode_mlp_f32,
    encode_mlp_f32,
    parse_anchors_config,
    sh_rest_width,
)
from ..bits import BitstreamError
from ..head import BlendshapeHead
from ..sections import METHOD_LZ77, METHOD_STORED, ContainerError, Section, read_sections, write_sections
from . import lz77
from .latents import LatentBank, bank_from_bytes, bank_to_bytes, decode_latents, fit_latents
from .pruning import PrunedMlp, prune_mlp, pruned_from_bytes, pruned_to_bytes
from .quant import QuantizedAttr, attr_from_bytes, attr_to_bytes, dequantize_attr, quantize_attr

MAGIC = b"GFCM"
VERSION = 1

SEC_ANCHORS = 1
SEC_H_REST = 10
SEC_ROTATION = 11
SEC_OPACITY = 12
SEC_H_BASE = 20
SEC_SCALE = 21
SEC_MLP = 30
SEC_META = 40

ATTR_SECTIONS = (SEC_H_REST, SEC_ROTATION, SEC_OPACITY, SEC_H_BASE, SEC_SCALE)
SECTION_NAMES = {
    SEC_ANCHORS: "anchors",
    SEC_H_REST: "h_rest",
    SEC_ROTATION: "r",
    SEC_OPACITY: "o",
    SEC_H_BASE: "h_base",
    SEC_SCALE: "s",
    SEC_MLP: "mlp",
    SEC_META: "meta",
}

KIND_F32 = 0
KIND_LATENT = 1
KIND_QUANT = 2
KIND_PRUNED = 3
KIND_MLP_F32 = 4


@dataclass(frozen=True)
class CompressionConfig:
    dim_rest: int = 1
    dim_r: int = 4
    dim_o: int = 1
    bits_h_base: int = 8
    bits_s: int = 8
    sparsity: float = 0.35
    iters: int = 2000
    step: float = 0.5
    seed: int = 0
    latents: bool = True
    prune: bool = True
    quantize: bool = True
    lz77: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SectionReport:
    name: str
    kind: int
    raw_bytes: int
    stored_bytes: int
    method: int


@dataclass
class PackReport:
    sections: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)     # attribute -> {"mse", "max_abs"}
    fits: dict = field(default_factory=dict)       # attribute -> latent fit MSE
    total_bytes: int = 0

    def size_of(self, *names: str) -> int:
        return sum(s.stored_bytes for s in self.sections if s.name in names)

    @property
    def gs_attr_bytes(self) -> int:
        return self.size_of("anchors", "h_rest", "r", "o", "h_base", "s")

    @property
    def mlp_bytes(self) -> int:
        return self.size_of("mlp")


@dataclass
class CompactModel:
    """Decoded contents of a container, before conversion to a render-ready avatar."""

    base_hash: bytes
    anchors_cfg: bytes
    attrs: dict        # section id -> ndarray | LatentBank | QuantizedAttr
    mlp: object        # OffsetNetwork | PrunedMlp
    meta: dict
    methods: dict = field(default_factory=dict)   # section id -> storage method

    def section_payloads(self) -> dict[int, bytes]:
        out = {SEC_ANCHORS: self.anchors_cfg}
        for sid, value in self.attrs.items():
            out[sid] = _encode_attr(value)
        if isinstance(self.mlp, PrunedMlp):
            out[SEC_MLP] = bytes([KIND_PRUNED]) + pruned_to_bytes(self.mlp)
        else:
            out[SEC_MLP] = bytes([KIND_MLP_F32]) + encode_mlp_f32(self.mlp)
        out[SEC_META] = json.dumps(self.meta, sort_keys=True).encode()
        return out

    def to_bytes(self, use_lz77: bool | None = None) -> tuple[bytes, list[SectionReport]]:
        if use_lz77 is None:
            use_lz77 = bool(self.meta.get("config", {}).get("lz77", True))
        sections, reports = [], []
        for sid, raw in sorted(self.section_payloads().items()):
            method, stored = METHOD_STORED, raw
            if use_lz77:
                packed = lz77.compress(raw)
                if len(packed) < len(raw):
                    method, stored = METHOD_LZ77, packed
            sections.append(Section(sid, method, stored, len(raw)))
            reports.append(SectionReport(SECTION_NAMES[sid], raw[0] if sid in ATTR_SECTIONS or sid == SEC_MLP else -1,
                                         len(raw), len(stored), method))
        return write_sections(MAGIC, VERSION, self.base_hash, sections), reports

    def attribute(self, sid: int) -> np.ndarray:
        value = self.attrs[sid]
        if isinstance(value, LatentBank):
            return decode_latents(value)
        if isinstance(value, QuantizedAttr):
            return dequantize_attr(value)
        return value

    def network(self) -> OffsetNetwork:
        return self.mlp.to_network() if isinstance(self.mlp, PrunedMlp) else self.mlp

    def to_avatar(self, model: BlendshapeHead) -> GaussianAvatar:
        if self.base_hash != model.content_hash:
            raise ContainerError("container was built for a different base model; refusing to render")
        anchors, degree = parse_anchors_config(self.anchors_cfg, model)
        n = len(anchors)
        r = self.attribute(SEC_ROTATION).reshape(n, 4)
        if not isinstance(self.attrs[SEC_ROTATION], np.ndarray):
            # lossy encodings drift off the unit sphere; raw float32 values pass through untouched
            r = r / np.linalg.norm(r, axis=1, keepdims=True)
        gaussians = GaussianSet(
            anchors,
            r,
            self.attribute(SEC_SCALE).reshape(n, 3),
            self.attribute(SEC_OPACITY).reshape(n),
            self.attribute(SEC_H_BASE).reshape(n, 3),
            self.attribute(SEC_H_REST).reshape(n, sh_rest_width(degree)),
            degree,
        )
        return GaussianAvatar(gaussians, self.network(), self.base_hash, dict(self.meta.get("avatar", {})))


def _encode_attr(value) -> bytes:
    if isinstance(value, LatentBank):
        return bytes([KIND_LATENT]) + bank_to_bytes(value)
    if isinstance(value, QuantizedAttr):
        return bytes([KIND_QUANT]) + attr_to_bytes(value)
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    head = np.array(arr.shape, dtype="<u4").tobytes()
    return bytes([KIND_F32]) + head + arr.astype("<f4").tobytes()


def _decode_attr(blob: bytes, sid: int):
    if not blob:
        raise ContainerError("empty attribute section", section=sid)
    kind, body = blob[0], blob[1:]
    try:
        if kind == KIND_LATENT:
            return bank_from_bytes(body)
        if kind == KIND_QUANT:
            return attr_from_bytes(body)
        if kind == KIND_F32:
            n, c = np.frombuffer(body, "<u4", 2, 0)
            if len(body) != 8 + 4 * int(n) * int(c):
                raise BitstreamError("raw attribute size mismatch")
            return np.frombuffer(body, "<f4", int(n) * int(c), 8).reshape(int(n), int(c)).astype(np.float64)
    except (BitstreamError, ValueError) as exc:
        raise ContainerError(f"corrupt {SECTION_NAMES[sid]} section: {exc}", section=sid) from None
    raise ContainerError(f"unknown encoding kind {kind}", section=sid)


def compress_avatar(avatar: GaussianAvatar, config: CompressionConfig = CompressionConfig()) -> tuple[CompactModel, PackReport]:
    g = avatar.gaussians
    report = PackReport()
    attrs: dict = {}
    for sid, tag, values, d in (
        (SEC_H_REST, "h_rest", g.h_rest, config.dim_rest),
        (SEC_ROTATION, "r", g.r, config.dim_r),
        (SEC_OPACITY, "o", g.o[:, None], config.dim_o),
    ):
        if config.latents:
            bank, fit = fit_latents(values, d, tag, iters=config.iters, step=config.step, seed=config.seed)
            attrs[sid] = bank
            report.fits[tag] = fit.mse
        else:
            attrs[sid] = np.asarray(values, dtype=np.float32).astype(np.float64)
    for sid, values, bits in ((SEC_H_BASE, g.h_base, config.bits_h_base), (SEC_SCALE, g.s, config.bits_s)):
        if config.quantize:
            attrs[sid] = quantize_attr(values, bits)
        else:
            attrs[sid] = np.asarray(values, dtype=np.float32).astype(np.float64)
    mlp = prune_mlp(avatar.network, config.sparsity) if config.prune else avatar.network
    meta = {"config": config.to_dict(), "avatar": avatar.meta}
    compact = CompactModel(avatar.base_hash, anchors_config_bytes(g), attrs, mlp, meta)
    originals = {SEC_H_REST: g.h_rest, SEC_ROTATION: g.r, SEC_OPACITY: g.o[:, None], SEC_H_BASE: g.h_base, SEC_SCALE: g.s}
    for sid, ref in originals.items():
        err = compact.attribute(sid).reshape(ref.shape) - ref
        report.errors[SECTION_NAMES[sid]] = {"mse": float(np.mean(err**2)), "max_abs": float(np.abs(err).max())}
    return compact, report


def pack_container(avatar: GaussianAvatar, config: CompressionConfig = CompressionConfig()) -> tuple[bytes, PackReport]:
    compact, report = compress_avatar(avatar, config)
    data, report.sections = compact.to_bytes(config.lz77)
    report.total_bytes = len(data)
    return data, report


def read_container(data: bytes) -> CompactModel:
    base_hash, secs = read_sections(data, MAGIC, VERSION)
    required = {SEC_ANCHORS, SEC_MLP, SEC_META, *ATTR_SECTIONS}
    missing = required - secs.keys()
    if missing:
        raise ContainerError(f"missing sections {sorted(missing)}")
    unknown = secs.keys() - required
    if unknown:
        raise ContainerError(f"unknown sections {sorted(unknown)}")
    raw: dict[int, bytes] = {}
    for sid, sec in secs.items():
        if sec.method == METHOD_LZ77:
            try:
                raw[sid] = lz77.decompress(sec.stored)
            except BitstreamError as exc:
                raise ContainerError(f"LZ77 stream corrupt: {exc}", section=sid) from None
        elif sec.method == METHOD_STORED:
            raw[sid] = sec.stored
        else:
            raise ContainerError(f"unknown storage method {sec.method}", section=sid)
        if len(raw[sid]) != sec.raw_len:
            raise ContainerError(f"decompressed length {len(raw[sid])} != declared {sec.raw_len}", section=sid)
    attrs = {sid: _decode_attr(raw[sid], sid) for sid in ATTR_SECTIONS}
    mlp_blob = raw[SEC_MLP]
    try:
        if mlp_blob[:1] == bytes([KIND_PRUNED]):
            mlp = pruned_from_bytes(mlp_blob[1:])
        elif mlp_blob[:1] == bytes([KIND_MLP_F32]):
            mlp = decode_mlp_f32(mlp_blob[1:])
        else:
            raise ContainerError("unknown MLP encoding", section=SEC_MLP)
    except BitstreamError as exc:
        raise ContainerError(f"corrupt MLP section: {exc}", section=SEC_MLP) from None
    try:
        meta = json.loads(raw[SEC_META])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ContainerError(f"corrupt metadata: {exc}", section=SEC_META) from None
    methods = {sid: sec.method for sid, sec in secs.items()}
    return CompactModel(base_hash, raw[SEC_ANCHORS], attrs, mlp, meta, methods)


def unpack_container(data: bytes, model: BlendshapeHead) -> GaussianAvatar:
    return read_container(data).to_avatar(model)
