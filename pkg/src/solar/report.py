"""Per-frame CSV reports and the derived experiment tables.

Frame CSV layout::

    # schema=solar-frames/1 config={...json...}
    frame,psnr_db,ssim,bytes,grad_ema,recal,active_anchors
    0,31.2,...

Derived tables carry their own ``# schema=solar-<mode>/1`` line.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMA = "solar-frames/1"
COLUMNS = ("frame", "psnr_db", "ssim", "bytes", "grad_ema", "recal", "active_anchors")
MODES = ("drift", "rd", "correlation", "stability")


class SchemaError(ValueError):
    pass


@dataclass
class RunTable:
    config: dict
    columns: dict[str, np.ndarray]
    source: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.columns["frame"].size)

    def p_frames(self) -> np.ndarray:
        """Mask of predictively coded frames (I-frames sit at GOP heads)."""
        frame = self.columns["frame"].astype(int)
        gop = int(self.config.get("gop_size", 0) or 0)
        first = int(frame.min()) if frame.size else 0
        if gop > 0:
            return frame % gop != 0
        return frame != first


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def frames_csv(reports, config: dict) -> str:
    out = io.StringIO()
    out.write(f"# schema={SCHEMA} config={json.dumps(config, sort_keys=True, separators=(',', ':'))}\n")
    out.write(",".join(COLUMNS) + "\n")
    for r in reports:
        out.write(",".join(_fmt(getattr(r, c)) for c in COLUMNS) + "\n")
    return out.getvalue()


def write_frames_csv(path, reports, config: dict) -> None:
    Path(path).write_text(frames_csv(reports, config))


def parse_frames_csv(text: str, source: str = "<csv>") -> RunTable:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# schema="):
        raise SchemaError(f"{source}: missing '# schema=' header line")
    head = lines[0][len("# schema="):]
    schema, _, rest = head.partition(" ")
    if schema != SCHEMA:
        raise SchemaError(f"{source}: unsupported schema '{schema}' (expected {SCHEMA})")
    config = {}
    if rest.startswith("config="):
        try:
            config = json.loads(rest[len("config="):])
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{source}: unreadable config echo: {exc}") from None
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{source}: no column header") from None
    if tuple(header) != COLUMNS:
        raise SchemaError(f"{source}: columns {header} do not match {list(COLUMNS)}")
    rows = [r for r in reader if r]
    try:
        data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, len(COLUMNS))
    except ValueError as exc:
        raise SchemaError(f"{source}: bad value: {exc}") from None
    return RunTable(config, {c: data[:, i] for i, c in enumerate(COLUMNS)}, source)


def read_frames_csv(path) -> RunTable:
    return parse_frames_csv(Path(path).read_text(), str(path))


# -- statistics ---------------------------------------------------------------

def pearson(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size != b.size or a.size < 2:
        raise ValueError("Pearson r needs two equal-length series of at least 2 values")
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt(np.dot(da, da) * np.dot(db, db))
    return float(np.dot(da, db) / den) if den > 0 else float("nan")


@dataclass
class Stability:
    mu_seq: float
    sigma_run: float
    sigma_temp: float


def stability(psnr_runs) -> Stability:
    """Statistics over an (R runs, T frames) PSNR matrix.

    mu_seq: mean over runs of each run's sequence mean; sigma_run: per-frame
    sample std across runs, averaged over frames; sigma_temp: each run's
    sample std over time, averaged over runs.
    """
    p = np.asarray(psnr_runs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("stability needs at least 2 runs")
    if p.shape[1] < 2:
        raise ValueError("stability needs at least 2 frames per run")
    return Stability(float(p.mean(axis=1).mean()), float(p.std(axis=0, ddof=1).mean()),
                     float(p.std(axis=1, ddof=1).mean()))


# -- derived tables -----------------------------------------------------------

def _table(mode: str, header, rows) -> str:
    out = io.StringIO()
    out.write(f"# schema=solar-{mode}/1\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])
    return out.getvalue()


def _aligned(runs: list[RunTable]) -> np.ndarray:
    n = {r.n_frames for r in runs}
    if len(n) != 1:
        raise SchemaError(f"runs have different frame counts: {sorted(n)}")
    frames = [r.columns["frame"] for r in runs]
    if any(not np.array_equal(frames[0], f) for f in frames[1:]):
        raise SchemaError("runs cover different frame indices")
    return frames[0]


def report(mode: str, runs: list[RunTable]) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown report mode '{mode}' (choose from {', '.join(MODES)})")
    if not runs:
        raise ValueError("no input CSVs")
    if mode == "drift":
        frames = _aligned(runs)
        ps = np.stack([r.columns["psnr_db"] for r in runs])
        header = ["frame"] + [f"run{i}" for i in range(len(runs))] + ["mean"]
        rows = [[int(f), *ps[:, i], ps[:, i].mean()] for i, f in enumerate(frames)]
        return _table(mode, header, rows)
    if mode == "rd":
        rows = []
        for i, r in enumerate(runs):
            rows.append([i, Path(r.source).name, r.columns["bytes"].mean(), r.columns["bytes"].sum(),
                         r.columns["psnr_db"].mean()])
        return _table(mode, ["run", "source", "bytes_per_frame", "total_bytes", "psnr_db"], rows)
    if mode == "correlation":
        rows = []
        for i, r in enumerate(runs):
            m = r.p_frames()
            rows.append([i, Path(r.source).name, int(m.sum()),
                         pearson(r.columns["psnr_db"][m], r.columns["grad_ema"][m])])
        return _table(mode, ["run", "source", "p_frames", "pearson_r"], rows)
    if len(runs) < 2:
        raise ValueError("stability needs at least 2 run CSVs")
    _aligned(runs)
    s = stability(np.stack([r.columns["psnr_db"] for r in runs]))
    return _table(mode, ["runs", "frames", "mu_seq", "sigma_run", "sigma_temp"],
                  [[len(runs), runs[0].n_frames, s.mu_seq, s.sigma_run, s.sigma_temp]])
