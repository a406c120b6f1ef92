import numpy as np
import pytest

from gsface.avatar import OffsetNetwork, offset_forward
from gsface.bits import BitstreamError
from gsface.modelcodec.pruning import keep_masks, prune_mlp, pruned_from_bytes, pruned_to_bytes


def test_top_magnitude_selection():
    w = np.array([[1.0, -1.0, 2.0, -2.0], [3.0, -3.0, 4.0, -4.0]])
    (mask,) = keep_masks([w], 0.5)
    assert set(w[mask].tolist()) == {3.0, -3.0, 4.0, -4.0}


def test_matches_sort_oracle(rng):
    ws = [rng.normal(size=(20, 30)), rng.normal(size=(30, 5))]
    masks = keep_masks(ws, 0.35)
    flat = np.concatenate([np.abs(w).ravel() for w in ws])
    n_keep = flat.size - int(np.floor(0.35 * flat.size))
    threshold = np.sort(flat)[::-1][n_keep - 1]
    kept = np.concatenate([m.ravel() for m in masks])
    assert kept.sum() == n_keep
    assert np.all(flat[kept] >= threshold) and np.all(flat[~kept] <= threshold)


def test_sparsity_bounds():
    with pytest.raises(ValueError):
        keep_masks([np.ones((2, 2))], 1.0)
    with pytest.raises(ValueError):
        keep_masks([np.ones((2, 2))], -0.1)


def test_zero_sparsity_only_fp16_rounding(rng):
    net = OffsetNetwork.random(0, hidden=(32, 32))
    p = prune_mlp(net, 0.0)
    assert p.n_kept == p.n_weights
    back = p.to_network()
    for (w0, b0), (w1, b1) in zip(net.layers, back.layers):
        assert np.array_equal(w1, w0.astype(np.float16).astype(np.float64))
        assert np.array_equal(b1, b0.astype(np.float16).astype(np.float64))
    mu, psi = rng.normal(size=(50, 3)) * 50, rng.normal(size=50)
    for a, b in zip(offset_forward(net, mu, psi), offset_forward(back, mu, psi)):
        assert np.abs(a - b).max() < 1e-2 * max(1e-3, np.abs(a).max())


def test_serialization_round_trip():
    net = OffsetNetwork.random(4, hidden=(24,))
    p = prune_mlp(net, 0.35)
    blob = pruned_to_bytes(p)
    q = pruned_from_bytes(blob)
    assert pruned_to_bytes(q) == blob
    for m0, m1, v0, v1 in zip(p.masks, q.masks, p.values, q.values):
        assert np.array_equal(m0, m1) and np.array_equal(v0, v1)
    assert p.n_kept == p.n_weights - int(np.floor(0.35 * p.n_weights))
    with pytest.raises(BitstreamError):
        pruned_from_bytes(blob[:-1])
