"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also repeated in the terminal summary).
"""

import subprocess
import sys
import time

import numpy as np
from conftest import ACCEPTANCE_LINES
from oracles import naive_render, random_scene

from gsface import paramcodec as pc
from gsface.avatar import avatar_to_bytes, drive
from gsface.bits import BitReader, pack_fields
from gsface.head import THETA_DIM, FlameParams, deform
from gsface.modelcodec import read_container
from gsface.modelcodec.huffman import decode, encode, table_for
from gsface.modelcodec.latents import fit_latents
from gsface.modelcodec.lz77 import compress, decompress
from gsface.modelcodec.quant import dequantize_attr, quantize_attr
from gsface.render import covariance, rasterize
from gsface.session import (
    ReferenceRenderer,
    SessionConfig,
    ablation_report,
    generate_sequence,
    rd_sweep,
    run_encoder,
)

BG = (0.5, 0.5, 0.5)


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_01_expression_share():
    t0 = time.perf_counter()
    shares = []
    for seed in (0, 1, 2):
        seq = generate_sequence(seed, 2500)
        for bits in (8, 10):
            shares.append(run_encoder(seq, SessionConfig(bit_depth=bits)).stats.expression_share)
    elapsed = time.perf_counter() - t0
    ok = all(0.79 <= s <= 0.85 for s in shares) and elapsed < 5
    record(1, ok, f"shares {min(shares):.4f}..{max(shares):.4f} over 3 seeds x b{{8,10}}, {elapsed:.2f}s")


def test_criterion_02_closed_form_bitrates():
    t0 = time.perf_counter()
    intra = run_encoder(generate_sequence(0, 2500), SessionConfig(intra_period=1)).stats
    static = run_encoder(generate_sequence(0, 2500, motion="static"), SessionConfig()).stats
    elapsed = time.perf_counter() - t0
    closed = 61 * 8 * 25 / 1000
    ok = (
        abs(intra.payload_kbps - closed) < 1e-9
        and 0 <= intra.kbps - closed < 0.01 * closed
        and abs(static.kbps - 1.9) <= 0.1 * 1.9
        and elapsed < 5
    )
    record(2, ok, f"intra {intra.kbps:.4f} kbps (closed form {closed}), static {static.kbps:.4f} kbps vs 1.9, "
                  f"{elapsed:.2f}s")


def test_criterion_03_lossless_round_trips(packed):
    t0 = time.perf_counter()
    failures = {}

    n = np.arange(1 << 20, dtype=np.int64)
    data, nbits = pack_fields(n + 1, pc.eg0_length(n))
    reader = BitReader(data, end_bit=nbits)
    decoded = np.array([pc.eg0_read(reader) for _ in range(n.size)])
    lengths_ok = np.array_equal(pc.eg0_length(n), 2 * np.floor(np.log2(n + 1)).astype(int) + 1)
    failures["eg0"] = int(np.sum(decoded != n)) + (reader.remaining != 0) + (not lengths_ok)

    s = np.arange(-(1 << 15), 1 << 15)
    u = pc.zigzag(s)
    failures["zigzag"] = int(np.sum(pc.unzigzag(u) != s)) + (len(np.unique(u)) != s.size)

    rng = np.random.default_rng(3)
    symbols = rng.integers(0, 1000, 100_000)
    table = table_for(symbols)
    blob, bits = encode(symbols, table)
    failures["huffman"] = int(np.sum(decode(blob, bits, symbols.size, table) != symbols))

    inputs = [
        rng.integers(0, 256, 200_000, dtype=np.uint8).tobytes(),
        b"abc" * 50_000,
        b"a" * 10_000,
        b"",
        bytes(range(256)) * 500,
        b"\x00" * 100_000 + b"\x01" + b"\x00" * 100_000,
        (b"xyzw" * 20_000)[:-1] + b"q" + b"xyzw" * 20_000,
    ]
    failures["lz77"] = sum(decompress(compress(x)) != x for x in inputs)

    container = packed[0]
    model = read_container(container)
    failures["container"] = int(model.to_bytes()[0] != container)

    elapsed = time.perf_counter() - t0
    ok = sum(failures.values()) == 0 and elapsed < 60
    record(3, ok, f"failures {failures}, {elapsed:.2f}s")


def test_criterion_04_quantization_and_monotone_rd(model, avatar):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for lo, hi in ((0.0, 1.0), (-3.0, 2.0), (-500.0, 1200.0), (1e-3, 2e-3)):
        for bits in (8, 10):
            x = rng.uniform(lo, hi, 10_000)
            step = (hi - lo) / ((1 << bits) - 1)
            err = np.abs(pc.dequantize(pc.quantize(x, lo, hi, bits), lo, hi, bits) - x)
            worst = max(worst, err.max() / step)
            attr = quantize_attr(x, bits)
            worst = max(worst, (np.abs(dequantize_attr(attr)[:, 0] - x) / attr.step()[0]).max())
    seq = generate_sequence(0, 250)
    cfgs = [SessionConfig(bit_depth=b) for b in (8, 10)]
    ref = ReferenceRenderer(seq, avatar, model, 128)
    p8, p10 = rd_sweep(seq, avatar, model, cfgs, 3, ref)
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.5 + 1e-9 and p10.psnr >= p8.psnr and elapsed < 120
    record(4, ok, f"max error {worst:.6f} steps, PSNR b8 {p8.psnr:.2f} dB, b10 {p10.psnr:.2f} dB, {elapsed:.1f}s")


def test_criterion_05_rasterizer_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    conservation = 0.0
    for i in range(20):
        g, cam = random_scene(rng, int(rng.integers(1, 101)), 64)
        out = rasterize(g, cam, BG)
        worst = max(worst, np.abs(out.image - naive_render(g, cam, BG)).max())
        conservation = max(conservation, np.abs(out.foreground_weight + out.transmittance - 1).max())
    elapsed = time.perf_counter() - t0
    # weight + transmittance is a sum of rounded products: equal to 1 up to float64 rounding
    ok = worst <= 1e-4 and conservation <= 1e-12 and elapsed < 30
    record(5, ok, f"max deviation {worst:.2e}, |weight+T-1| {conservation:.1e}, {elapsed:.1f}s")


def test_criterion_06_compression_ledger(model, avatar):
    t0 = time.perf_counter()
    rows = ablation_report(avatar, model)
    elapsed = time.perf_counter() - t0
    totals = [r.total_bytes for r in rows]
    ratio = totals[-1] / len(avatar_to_bytes(avatar))
    ok = (
        len(rows) == 5
        and all(a >= b for a, b in zip(totals, totals[1:]))
        and rows[-1].psnr == rows[-2].psnr
        and ratio <= 0.25
        and elapsed < 300
    )
    table = ", ".join(f"{r.stage} {r.total_bytes}B/{r.psnr:.2f}dB" for r in rows)
    record(6, ok, f"{table}; ratio {ratio:.3f}, {elapsed:.1f}s")


def test_criterion_07_latent_fit_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    values = np.outer(rng.normal(size=3000), rng.normal(size=9))
    bank, report = fit_latents(values, 1, kind="linear")
    zq = (bank.codes.astype(float) - bank.zero_point) * bank.scale
    design = np.column_stack([zq, np.ones(len(zq))])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    ls = float(np.mean((design @ coef - values) ** 2))
    monotone = True
    for seed in range(5):
        r = np.random.default_rng(seed)
        noisy = np.outer(r.normal(size=800), r.normal(size=9)) + 0.05 * r.normal(size=(800, 9))
        _, rep = fit_latents(noisy, 1, iters=500, seed=seed)
        monotone &= bool(np.all(np.diff(rep.trace) <= 0))
    elapsed = time.perf_counter() - t0
    rel = report.mse / values.var()
    ok = rel <= 1e-4 and ls <= report.mse + 1e-15 and monotone and elapsed < 60
    record(7, ok, f"MSE/var {rel:.2e} (least-squares oracle {ls / values.var():.2e}), traces monotone "
                  f"{monotone}, {elapsed:.1f}s")


def test_criterion_08_geometry_oracles(model, avatar):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    deform_err = 0.0
    for _ in range(5):
        beta, theta, psi = rng.normal(size=model.n_beta), rng.normal(size=THETA_DIM), rng.normal(size=50)
        dense = np.concatenate([model.shape_basis, model.pose_basis, model.expr_basis], axis=2)
        dense = dense.reshape(3 * model.n_vertices, -1)
        want = model.template.ravel() + dense @ np.concatenate([beta, theta[6:], psi])
        got = deform(model, FlameParams(beta, theta, psi)).ravel()
        deform_err = max(deform_err, np.abs(got - want).max() / np.abs(want).max())
    q = rng.normal(size=(500, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(0.05, 5, (500, 3))
    ev = np.sort(np.linalg.eigvalsh(covariance(q, s)), axis=1)
    eig_err = (np.abs(ev - np.sort(s**2, axis=1)) / np.sort(s**2, axis=1)[:, -1:]).max()
    norm_err = 0.0
    for _ in range(3):
        p = FlameParams(np.zeros(0), rng.normal(size=THETA_DIM) * 0.2, rng.normal(size=50))
        g = drive(avatar, model, p)
        norm_err = max(norm_err, np.abs(np.linalg.norm(g.quats, axis=1) - 1).max())
    elapsed = time.perf_counter() - t0
    ok = deform_err <= 1e-9 and eig_err <= 1e-9 and norm_err <= 1e-6 and elapsed < 10
    record(8, ok, f"deform rel {deform_err:.1e}, eigen rel {eig_err:.1e}, quat norm {norm_err:.1e}, {elapsed:.2f}s")


def test_criterion_09_codec_speed():
    seq = generate_sequence(0, 2500)
    medians = {}
    for bits in (8, 10):
        cfg = SessionConfig(bit_depth=bits)
        times = []
        for _ in range(7):
            t0 = time.perf_counter()
            enc = run_encoder(seq, cfg)
            dec = pc.decode_stream(enc.stream)
            times.append(time.perf_counter() - t0)
        assert np.array_equal(dec.quantized.shape, (2500, 61))
        medians[bits] = float(np.median(times)) * 1000
    ok = max(medians.values()) < 100
    record(9, ok, f"median encode+decode of 2500 frames: b8 {medians[8]:.1f} ms, b10 {medians[10]:.1f} ms")


def test_criterion_10_rd_sweep_determinism(tmp_path):
    args = ["--seed", "3", "--grid", "32", "--frames", "60", "--size", "32", "--render-frames", "2",
            "--dims", "10", "50", "--iters", "150"]
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        subprocess.run([sys.executable, "-m", "gsface", "rd-sweep", *args, "--out-dir", str(out)], check=True,
                       capture_output=True)
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    other = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
    same = files == other and all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    kinds = {f.suffix for f in files}
    ok = same and {".csv", ".gfpc", ".gfcm"} <= kinds
    record(10, ok, f"{len(files)} files compared byte for byte ({', '.join(sorted(kinds))}), identical {same}")
