"""Command-line entry point: ``gsface <subcommand> ...``.

Errors are reported as a single JSON object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import paramcodec as pc
from .avatar import load_avatar, make_avatar, save_avatar
from .head import EXPR_DIMS, generate_synthetic, load_model, save_model
from .modelcodec import CompressionConfig, pack_container, unpack_container
from .render import DEFAULT_BACKGROUND, save_png
from .session import (
    MOTIONS,
    ParamSequence,
    ReferenceRenderer,
    SessionConfig,
    ablation_csv,
    ablation_report,
    frame_indices,
    generate_sequence,
    rd_csv,
    rd_sweep,
    run_decoder,
    run_encoder,
    simulate_link,
    stream_frame_sizes,
    sweep_configs,
)

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, EXIT_USAGE)


def _fail(kind: str, message: str, code: int):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)


def _container_config(args) -> CompressionConfig:
    return CompressionConfig(
        dim_rest=args.dim_rest,
        dim_r=args.dim_r,
        dim_o=args.dim_o,
        bits_h_base=args.bits_h_base,
        bits_s=args.bits_s,
        sparsity=args.sparsity,
        iters=args.iters,
        seed=args.fit_seed,
        lz77=not args.no_lz77,
    )


def _add_container_flags(p):
    g = p.add_argument_group("container")
    g.add_argument("--dim-rest", type=int, default=1)
    g.add_argument("--dim-r", type=int, default=4)
    g.add_argument("--dim-o", type=int, default=1)
    g.add_argument("--bits-h-base", type=int, default=8)
    g.add_argument("--bits-s", type=int, default=8)
    g.add_argument("--sparsity", type=float, default=0.35)
    g.add_argument("--iters", type=int, default=2000)
    g.add_argument("--fit-seed", type=int, default=0)
    g.add_argument("--no-lz77", action="store_true")


def _load_render_avatar(args, model):
    if getattr(args, "container", None):
        return unpack_container(Path(args.container).read_bytes(), model)
    if getattr(args, "avatar", None):
        return load_avatar(args.avatar, model)
    raise CliError("need --avatar or --container")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_avatar(args):
    model = generate_synthetic(args.seed, n_vertices=args.vertices)
    avatar = make_avatar(model, args.seed, args.grid)
    save_model(model, args.model)
    save_avatar(avatar, args.avatar)
    _emit({"model": str(args.model), "avatar": str(args.avatar), "points": avatar.gaussians.n_points,
           "avatar_bytes": Path(args.avatar).stat().st_size, "model_hash": model.content_hash.hex()})


def cmd_gen_sequence(args):
    seq = generate_sequence(args.seed, args.frames, args.dim_psi, args.motion, args.fps)
    seq.save(args.out)
    _emit({"out": str(args.out), "frames": len(seq), "dim_psi": seq.n_psi})


def cmd_encode(args):
    seq = ParamSequence.load(args.sequence)
    cfg = SessionConfig(dim_psi=args.dim_psi, bit_depth=args.bits, fps=seq.fps, intra_period=args.intra_period)
    enc = run_encoder(seq, cfg)
    _write(args.out, enc.stream)
    summary = enc.summary()
    if args.frame_sizes:
        _write(args.frame_sizes, "frame,bytes\n" + "".join(f"{i},{b}\n" for i, b in enumerate(enc.stats.frame_bytes)))
    _emit({"out": str(args.out), **summary})


def cmd_decode(args):
    model = load_model(args.model)
    avatar = _load_render_avatar(args, model)
    stream = Path(args.stream).read_bytes()
    n = pc.StreamHeader.from_bytes(stream).n_frames if stream else 0
    idx = frame_indices(n, args.render_frames) if n else None
    reference = None
    if args.sequence:
        if not args.reference_avatar:
            raise CliError("--sequence needs --reference-avatar (the uncompressed avatar)")
        reference = ReferenceRenderer(ParamSequence.load(args.sequence), load_avatar(args.reference_avatar, model),
                                      model, args.size)
    result = run_decoder(stream, avatar, model, args.size, idx, reference)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in zip(result.indices.tolist(), result.images):
        save_png(img, out / f"frame_{i:05d}.png")
    report = {"frames": [int(i) for i in result.indices], "out_dir": str(out)}
    if reference is not None:
        rows = "".join(f"{i},{p:.6f},{s:.8f}\n" for i, p, s in zip(result.indices.tolist(), result.psnr, result.ssim))
        _write(out / "metrics.csv", "frame,psnr,ssim\n" + rows)
        report.update(mean_psnr=result.mean_psnr, mean_ssim=result.mean_ssim)
    _emit(report)


def cmd_pack_model(args):
    model = load_model(args.model)
    avatar = load_avatar(args.avatar, model)
    data, report = pack_container(avatar, _container_config(args))
    _write(args.out, data)
    _emit({
        "out": str(args.out),
        "total_bytes": report.total_bytes,
        "avatar_bytes": Path(args.avatar).stat().st_size,
        "ratio": report.total_bytes / Path(args.avatar).stat().st_size,
        "sections": [vars(s) for s in report.sections],
        "errors": report.errors,
    })


def cmd_unpack_model(args):
    model = load_model(args.model)
    avatar = unpack_container(Path(args.container).read_bytes(), model)
    save_avatar(avatar, args.out)
    _emit({"out": str(args.out), "points": avatar.gaussians.n_points})


def cmd_rd_sweep(args):
    out = Path(args.out_dir)
    if args.model:
        model = load_model(args.model)
        avatar = load_avatar(args.avatar, model) if args.avatar else make_avatar(model, args.seed, args.grid)
    else:
        model = generate_synthetic(args.seed)
        avatar = make_avatar(model, args.seed, args.grid)
    seq = ParamSequence.load(args.sequence) if args.sequence else generate_sequence(args.seed, args.frames)
    container = None
    render_avatar = avatar
    if not args.uncompressed:
        container, _ = pack_container(avatar, _container_config(args))
        _write(out / "model.gfcm", container)
        render_avatar = unpack_container(container, model)
    configs = sweep_configs(args.dims, args.bits, fps=seq.fps, intra_period=args.intra_period, image_size=args.size)
    reference = ReferenceRenderer(seq, avatar, model, args.size, DEFAULT_BACKGROUND)
    points = rd_sweep(seq, render_avatar, model, configs, args.render_frames, reference)
    for p in points:
        _write(out / "streams" / f"dim{p.dim_psi:02d}_b{p.bits}.gfpc", p.stream)
    _write(out / "rd.csv", rd_csv(points))
    _emit({"csv": str(out / "rd.csv"), "points": len(points), "container_bytes": len(container) if container else None})


def cmd_ablate(args):
    if args.model:
        model = load_model(args.model)
        avatar = load_avatar(args.avatar, model)
    else:
        model = generate_synthetic(args.seed)
        avatar = make_avatar(model, args.seed, args.grid)
    seq = ParamSequence.load(args.sequence) if args.sequence else None
    rows = ablation_report(avatar, model, seq, _container_config(args), args.render_frames, args.size)
    text = ablation_csv(rows)
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)


def cmd_simulate_link(args):
    stream = Path(args.stream).read_bytes()
    sizes = stream_frame_sizes(stream)
    fps = pc.StreamHeader.from_bytes(stream).fps
    report = simulate_link(sizes, args.capacity_kbps, fps, args.bucket_bits)
    if args.out:
        _write(args.out, "frame,bytes,delay_s\n" + "".join(
            f"{i},{b},{d:.9f}\n" for i, (b, d) in enumerate(zip(sizes.tolist(), report.delays.tolist()))))
    _emit(report.summary())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsface", description="Expression-driven Gaussian head avatar codec toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-avatar", help="synthesize a base model and a Gaussian avatar")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vertices", type=int, default=2000)
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--model", required=True, help="output GFBM path")
    p.add_argument("--avatar", required=True, help="output GFAV path")
    p.set_defaults(func=cmd_gen_avatar)

    p = sub.add_parser("gen-sequence", help="synthesize an expression/pose sequence (.gfpr or .csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=2500)
    p.add_argument("--dim-psi", type=int, default=50)
    p.add_argument("--motion", choices=MOTIONS, default="smooth")
    p.add_argument("--fps", type=float, default=pc.DEFAULT_FPS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_sequence)

    p = sub.add_parser("encode", help="encode a parameter sequence into a GFPC bitstream")
    p.add_argument("--sequence", required=True)
    p.add_argument("--dim-psi", type=int, choices=EXPR_DIMS, default=50)
    p.add_argument("--bits", type=int, choices=pc.BIT_DEPTHS, default=8)
    p.add_argument("--intra-period", type=int, default=pc.DEFAULT_INTRA_PERIOD)
    p.add_argument("--out", required=True)
    p.add_argument("--frame-sizes", help="optional CSV of per-frame byte counts")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream and render frames to PNG")
    p.add_argument("--stream", required=True)
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--avatar")
    src.add_argument("--container")
    p.add_argument("--sequence", help="unquantized sequence, enables PSNR/SSIM against the reference render")
    p.add_argument("--reference-avatar", help="uncompressed avatar used for the reference render")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--render-frames", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("pack-model", help="compress a GFAV avatar into a GFCM container")
    p.add_argument("--model", required=True)
    p.add_argument("--avatar", required=True)
    p.add_argument("--out", required=True)
    _add_container_flags(p)
    p.set_defaults(func=cmd_pack_model)

    p = sub.add_parser("unpack-model", help="expand a GFCM container back into a GFAV avatar")
    p.add_argument("--model", required=True)
    p.add_argument("--container", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unpack_model)

    p = sub.add_parser("rd-sweep", help="rate-distortion sweep over expression dims and bit depths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model")
    p.add_argument("--avatar")
    p.add_argument("--sequence")
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--frames", type=int, default=250)
    p.add_argument("--dims", type=int, nargs="+", choices=EXPR_DIMS, default=list(EXPR_DIMS))
    p.add_argument("--bits", type=int, nargs="+", choices=pc.BIT_DEPTHS, default=list(pc.BIT_DEPTHS))
    p.add_argument("--intra-period", type=int, default=pc.DEFAULT_INTRA_PERIOD)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--render-frames", type=int, default=4)
    p.add_argument("--uncompressed", action="store_true", help="decode with the uncompressed avatar")
    p.add_argument("--out-dir", required=True)
    _add_container_flags(p)
    p.set_defaults(func=cmd_rd_sweep)

    p = sub.add_parser("ablate", help="cumulative compression-stage ablation table (CSV)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model")
    p.add_argument("--avatar")
    p.add_argument("--sequence")
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--render-frames", type=int, default=3)
    p.add_argument("--out")
    _add_container_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("simulate-link", help="token-bucket delivery of a bitstream over a fixed-rate link")
    p.add_argument("--stream", required=True)
    p.add_argument("--capacity-kbps", type=float, required=True, help="link rate; 'inf' for unlimited")
    p.add_argument("--bucket-bits", type=float, default=0.0)
    p.add_argument("--out", help="optional per-frame delay CSV")
    p.set_defaults(func=cmd_simulate_link)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("ablate", "rd-sweep") and args.avatar and not args.model:
        _fail("UsageError", "--avatar needs --model", EXIT_USAGE)
    try:
        args.func(args)
    except (CliError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
