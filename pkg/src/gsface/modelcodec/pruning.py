"""Global magnitude pruning of the offset network with FP16 storage."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..avatar import OffsetNetwork
from ..bits import BitstreamError

FP16_MAX = float(np.finfo(np.float16).max)


@dataclass
class PrunedMlp:
    masks: list          # per layer, bool array shaped like W
    values: list         # per layer, float16 kept weights in row-major mask order
    biases: list         # per layer, float16
    arch: dict           # OffsetNetwork config (everything except the weights)

    def __post_init__(self):
        for i, (m, v) in enumerate(zip(self.masks, self.values)):
            if int(m.sum()) != v.size:
                raise ValueError(f"layer {i}: mask keeps {int(m.sum())} weights but {v.size} values stored")

    @property
    def n_kept(self) -> int:
        return sum(v.size for v in self.values)

    @property
    def n_weights(self) -> int:
        return sum(m.size for m in self.masks)

    def to_network(self) -> OffsetNetwork:
        layers = []
        for m, v, b in zip(self.masks, self.values, self.biases):
            w = np.zeros(m.shape)
            w[m] = v.astype(np.float64)
            layers.append((w, b.astype(np.float64)))
        return OffsetNetwork(layers, **_net_config(self.arch))


def _net_config(arch: dict) -> dict:
    return {
        "pe_bands": arch["pe_bands"],
        "include_raw": arch["include_raw"],
        "dim_psi": arch["dim_psi"],
        "pos_scale": arch["pos_scale"],
        "out_scale": tuple(arch["out_scale"]),
    }


def keep_masks(weights: list[np.ndarray], sparsity: float) -> list[np.ndarray]:
    """Masks keeping the largest-|w| (1 - sparsity) fraction across all matrices.

    Among equal magnitudes, earlier layers and lower row-major indices are kept first.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    flat = np.concatenate([np.abs(np.asarray(w, dtype=np.float64)).ravel() for w in weights])
    n_prune = int(np.floor(sparsity * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    if n_prune:
        # stable sort on -|w| ranks ties by position, i.e. layer then index
        order = np.argsort(-flat, kind="stable")
        keep[order[flat.size - n_prune:]] = False
    masks = []
    start = 0
    for w in weights:
        masks.append(keep[start:start + w.size].reshape(w.shape))
        start += w.size
    return masks


def prune_mlp(net: OffsetNetwork, sparsity: float) -> PrunedMlp:
    masks = keep_masks([w for w, _ in net.layers], sparsity)
    values, biases = [], []
    for (w, b), m in zip(net.layers, masks):
        kept = w[m]
        if np.any(np.abs(kept) > FP16_MAX) or np.any(np.abs(b) > FP16_MAX):
            raise ValueError("weights exceed the FP16 range")
        values.append(kept.astype(np.float16))
        biases.append(np.asarray(b).astype(np.float16))
    arch = {**_net_config(vars(net)), "out_scale": list(net.out_scale), "shapes": [list(w.shape) for w, _ in net.layers]}
    return PrunedMlp(masks, values, biases, arch)


def pruned_to_bytes(p: PrunedMlp) -> bytes:
    """json arch, then per layer: packed mask bits, FP16 kept values, FP16 biases."""
    blob = json.dumps(p.arch, sort_keys=True).encode()
    parts = [struct.pack("<I", len(blob)), blob]
    for m, v, b in zip(p.masks, p.values, p.biases):
        parts += [np.packbits(m.ravel()).tobytes(), struct.pack("<I", v.size), v.astype("<f2").tobytes(), b.astype("<f2").tobytes()]
    return b"".join(parts)


def pruned_from_bytes(blob: bytes) -> PrunedMlp:
    blob = bytes(blob)
    try:
        (n,) = struct.unpack_from("<I", blob, 0)
        arch = json.loads(blob[4:4 + n])
        off = 4 + n
        masks, values, biases = [], [], []
        for fan_in, fan_out in arch["shapes"]:
            size = fan_in * fan_out
            nbytes = (size + 7) // 8
            if off + nbytes > len(blob):
                raise BitstreamError("pruned MLP mask truncated", 8 * off)
            m = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, off))[:size].astype(bool)
            off += nbytes
            (kept,) = struct.unpack_from("<I", blob, off)
            off += 4
            if kept != int(m.sum()):
                raise BitstreamError("pruned MLP mask popcount does not match value count", 8 * off)
            v = np.frombuffer(blob, "<f2", kept, off).astype(np.float16)
            off += 2 * kept
            b = np.frombuffer(blob, "<f2", fan_out, off).astype(np.float16)
            off += 2 * fan_out
            masks.append(m.reshape(fan_in, fan_out))
            values.append(v)
            biases.append(b)
    except (struct.error, ValueError, KeyError, json.JSONDecodeError) as exc:
        if isinstance(exc, BitstreamError):
            raise
        raise BitstreamError(f"malformed pruned MLP: {exc}") from None
    if off != len(blob):
        raise BitstreamError("trailing bytes after pruned MLP", 8 * off)
    return PrunedMlp(masks, values, biases, arch)
