import numpy as np
import pytest

from gsface.bits import BitstreamError
from gsface.modelcodec.latents import (
    FitError,
    LatentBank,
    bank_from_bytes,
    bank_to_bytes,
    decode_latents,
    fit_latents,
)


def rank_one(seed, n=2000, out=9):
    r = np.random.default_rng(seed)
    return np.outer(r.normal(size=n), r.normal(size=out))


def test_zero_values_fit_exactly():
    _, report = fit_latents(np.zeros((300, 9)), 1, iters=50)
    assert report.mse <= 1e-8


def test_rank_one_linear_fit_matches_least_squares():
    values = rank_one(0)
    bank, report = fit_latents(values, 1, kind="linear")
    assert report.mse <= 1e-4 * values.var()
    # closed-form oracle: best affine map from the stored codes to the data
    zq = (bank.codes.astype(float) - bank.zero_point) * bank.scale
    design = np.column_stack([zq, np.ones(len(zq))])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    ls_mse = np.mean((design @ coef - values) ** 2)
    assert ls_mse <= report.mse + 1e-15
    assert report.mse <= 2.0 * ls_mse + 1e-6 * values.var()


@pytest.mark.parametrize("seed", range(5))
def test_trace_never_increases(seed):
    values = rank_one(seed, n=500) + 0.1 * np.random.default_rng(seed + 9).normal(size=(500, 9))
    _, report = fit_latents(values, 2, iters=300, seed=seed)
    trace = np.array(report.trace)
    assert np.all(np.diff(trace) <= 0)
    assert report.accepted + report.rejected == len(trace) - 1


def test_reported_mse_is_decoded_mse(avatar):
    values = avatar.gaussians.h_rest[:2000]
    bank, report = fit_latents(values, 2, iters=200)
    assert report.mse == float(np.mean((decode_latents(bank) - values) ** 2))


def test_more_latent_dims_fit_no_worse(avatar):
    values = avatar.gaussians.h_rest[::4]
    mses = [fit_latents(values, d, iters=400)[1].mse for d in (1, 3, 6)]
    assert mses[0] >= mses[1] >= mses[2]


def test_rotation_outputs_are_unit(avatar):
    bank, _ = fit_latents(avatar.gaussians.r[::8], 2, tag="r", iters=100)
    out = decode_latents(bank)
    assert np.abs(np.linalg.norm(out, axis=1) - 1).max() <= 1e-6


def test_zero_bank_decodes_to_zero():
    layers = [(np.zeros((3, 16)), np.zeros(16)), (np.zeros((16, 9)), np.zeros(9))]
    bank = LatentBank(np.zeros((10, 3)), np.ones(3), np.zeros(3), layers)
    assert not decode_latents(bank).any()


def test_architecture_mismatch_rejected():
    with pytest.raises(ValueError, match="architecture"):
        LatentBank(np.zeros((10, 3)), np.ones(3), np.zeros(3), [(np.zeros((2, 16)), np.zeros(16)),
                                                                 (np.zeros((16, 9)), np.zeros(9))])


def test_divergence_aborts():
    with pytest.raises(FitError, match="non-finite"):
        fit_latents(rank_one(1, n=100), 1, iters=20, step=1e300)
    with pytest.raises(FitError):
        fit_latents(np.array([[1.0, np.inf]]), 1)


def test_bank_serialization(avatar):
    bank, _ = fit_latents(avatar.gaussians.o[::16], 1, tag="o", iters=50)
    blob = bank_to_bytes(bank)
    back = bank_from_bytes(blob)
    assert np.array_equal(decode_latents(back), decode_latents(bank))
    assert bank_to_bytes(back) == blob
    with pytest.raises(BitstreamError):
        bank_from_bytes(blob[:-1])
