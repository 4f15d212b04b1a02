"""Command-line entry point: ``solar synth|encode|decode|report|selftest``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report as rpt
from . import synth
from .pipeline import PROFILES, PipelineConfig, stream_decode, stream_encode, decode_states
from .render import Camera

log = logging.getLogger("solar")


def _field_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of PipelineConfig fields")
    p.add_argument("--profile", choices=sorted(PROFILES), default="default",
                   help="named preset applied before the config file")
    for f in dataclasses.fields(PipelineConfig):
        if f.type in ("bool", bool):
            p.add_argument(_field_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                           default=None)
        else:
            kind = {"int": int, "float": float}.get(str(f.type), str)
            p.add_argument(_field_flag(f.name), dest=f.name, type=kind, default=None)
    p.add_argument("--no-aad", dest="enable_aad", action="store_false")
    p.add_argument("--no-ladar", dest="enable_ladar", action="store_false")
    p.add_argument("--gop", dest="gop_size", type=int)


def resolve_config(args) -> PipelineConfig:
    """defaults < profile < config file < SOLAR_SEED < explicit flags."""
    values = dict(PROFILES[args.profile])
    if args.config:
        try:
            file_vals = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_vals, dict):
            raise ValueError(f"config file {args.config} must hold a JSON object")
        values.update(file_vals)
    env = os.environ.get("SOLAR_SEED")
    if env:
        try:
            values["seed"] = int(env)
        except ValueError:
            raise ValueError(f"SOLAR_SEED must be an integer, got {env!r}") from None
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return PipelineConfig.from_dict(values)


def parse_camera(spec: str, cameras: list[Camera], centroid: np.ndarray):
    """``heldout``, a rig index, or ``pose:ex,ey,ez`` (looks at the scene centre)."""
    if spec == "heldout":
        return "heldout"
    if spec.startswith("pose:"):
        try:
            eye = [float(v) for v in spec[5:].split(",")]
        except ValueError:
            raise ValueError(f"bad pose '{spec}'") from None
        if len(eye) != 3:
            raise ValueError(f"pose needs 3 coordinates, got {len(eye)}")
        ref = cameras[0]
        if np.linalg.norm(np.asarray(eye) - centroid) < 1e-9:
            raise ValueError("pose coincides with the scene centre")
        return Camera.look_at(eye, centroid, [0, 0, 1], ref.fx, ref.fy, ref.width, ref.height)
    try:
        idx = int(spec)
    except ValueError:
        raise ValueError(f"bad camera spec '{spec}' (use heldout, an index, or pose:x,y,z)") from None
    if not 0 <= idx < len(cameras):
        raise ValueError(f"camera index {idx} out of range 0..{len(cameras) - 1}")
    return idx


# -- verbs ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    script = synth.load_script(args.script)
    path = synth.generate(script, args.out_dir)
    print(f"wrote {script.frame_count} frames x {len(script.cameras()[0])} cameras, manifest {path}")
    return 0


def cmd_encode(args) -> int:
    cfg = resolve_config(args)
    seq = synth.load_sequence(args.dataset)
    if args.frames is not None:
        seq = seq.slice(0, args.frames)
    res = stream_encode(seq, cfg, on_frame=(lambda r: print(
        f"frame {r.frame:4d} {r.kind} psnr={r.psnr_db:6.2f} bytes={r.bytes} recal={r.recal}",
        file=sys.stderr)) if args.verbose else None)
    data = res.bitstream.to_bytes()
    Path(args.output).write_bytes(data)
    csv_path = args.report or str(Path(args.output).with_suffix(".csv"))
    rpt.write_frames_csv(csv_path, res.reports, cfg.to_dict())
    ps = np.array([r.psnr_db for r in res.reports])
    print(f"frames={len(res.reports)} mean_psnr={ps.mean():.3f}dB total={len(data) / 1e6:.4f}MB "
          f"recals={sum(r.recal for r in res.reports)} -> {args.output}, {csv_path}")
    return 0


def cmd_decode(args) -> int:
    data = Path(args.input).read_bytes()
    first = next(decode_states(data))
    scene = first[0]
    cam = parse_camera(args.camera, scene.cameras, scene.centroid)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = stream_decode(data, cam)
    for t, img in enumerate(images):
        synth.write_ppm(out / f"frame{t:04d}.ppm", np.clip(img, 0, 1))
        if args.pfm:
            synth.write_pfm(out / f"frame{t:04d}.pfm", img)
    print(f"decoded {len(images)} frames -> {out}")
    return 0


def cmd_report(args) -> int:
    runs = [rpt.read_frames_csv(p) for p in args.csv]
    text = rpt.report(args.mode, runs)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all
    ok = run_all(print)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="solar", description="Streamable Gaussian-anchor video codec")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="render a synthetic multi-view dataset")
    p.add_argument("script", help=f"built-in name ({', '.join(synth.BUILTIN)}) or script file")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="encode a dataset into a .solar bitstream")
    p.add_argument("dataset", help="dataset directory or manifest")
    p.add_argument("output", help="output .solar file")
    p.add_argument("--report", help="per-frame CSV (default: <output>.csv)")
    p.add_argument("--frames", type=int, help="encode only the first N frames")
    add_config_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="render every frame of a bitstream")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--camera", default="heldout", help="heldout | INDEX | pose:x,y,z")
    p.add_argument("--pfm", action="store_true", help="also write float PFM images")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("report", help="derive tables from per-frame CSVs")
    p.add_argument("mode", choices=rpt.MODES)
    p.add_argument("csv", nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="gradient and round-trip checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("solar: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"solar {args.verb}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
