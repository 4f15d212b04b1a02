"""Synthetic multi-view ground truth: scripted Gaussian scenes seen by a camera ring.

Script format, one directive per line (``#`` starts a comment)::

    frames 24
    size 32 32
    cameras 4 radius 3.0 height 1.0 focal 36
    heldout 22.5                 # azimuth in degrees of the held-out camera
    bounds -1 -1 -1 1 1 1        # scene box handed to the encoder
    seed 7
    gaussian NAME x y z sx sy sz r g b alpha
    scatter N spread scale       # N random Gaussians named s0..s{N-1}
    linear NAME vx vy vz         # displacement per frame
    sin NAME ax ay az period [phase]
    hide NAME start end          # alpha = 0 for start <= t < end

Manifest (``manifest.txt``)::

    # solar-manifest/1
    size W H
    frames T
    bounds x0 y0 z0 x1 y1 z1
    camera IDX train|heldout fx fy cx cy R00 .. R22 t0 t1 t2
    frame T IDX relative/path.ppm
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .render import Camera, GaussianPrimitive, Gaussians, render

MANIFEST_TAG = "# solar-manifest/1"
BUILTIN = ("static", "drift", "vanish")


class ScriptError(ValueError):
    pass


@dataclass
class Track:
    kind: str  # linear | sin
    vec: np.ndarray
    period: float = 1.0
    phase: float = 0.0


@dataclass
class SceneScript:
    gaussians: dict[str, GaussianPrimitive] = field(default_factory=dict)
    tracks: dict[str, list[Track]] = field(default_factory=dict)
    hidden: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    frame_count: int = 10
    width: int = 32
    height: int = 32
    n_cameras: int = 4
    radius: float = 3.0
    cam_height: float = 1.0
    focal: float = 36.0
    heldout_deg: float | None = None
    bounds: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1, -1, 1, 1, 1]))
    seed: int = 0

    def state_at(self, t: int) -> list[GaussianPrimitive]:
        out = []
        for name, g in self.gaussians.items():
            mu = np.array(g.mu, dtype=np.float64)
            for tr in self.tracks.get(name, []):
                if tr.kind == "linear":
                    mu = mu + t * tr.vec
                else:
                    mu = mu + tr.vec * np.sin(2 * np.pi * t / tr.period + tr.phase)
            alpha = g.alpha
            if any(a <= t < b for a, b in self.hidden.get(name, [])):
                alpha = 0.0
            out.append(GaussianPrimitive(mu, np.array(g.s), np.array(g.r), np.array(g.c), alpha))
        return out

    def cameras(self) -> tuple[list[Camera], int | None]:
        """Training ring plus an optional held-out camera (returned last)."""
        angles = [2 * np.pi * i / self.n_cameras for i in range(self.n_cameras)]
        heldout = None
        if self.heldout_deg is not None:
            angles.append(np.deg2rad(self.heldout_deg))
            heldout = self.n_cameras
        center = self.center
        cams = []
        for a in angles:
            eye = center + np.array([self.radius * np.cos(a), self.radius * np.sin(a), self.cam_height])
            cams.append(Camera.look_at(eye, center, [0, 0, 1], self.focal, self.focal,
                                       self.width, self.height))
        return cams, heldout

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bounds[:3] + self.bounds[3:])


def _floats(tokens, n, lineno, what):
    if len(tokens) < n:
        raise ScriptError(f"line {lineno}: '{what}' needs {n} numbers")
    try:
        return [float(v) for v in tokens[:n]]
    except ValueError:
        raise ScriptError(f"line {lineno}: '{what}' has a non-numeric argument") from None


def parse_script(text: str) -> SceneScript:
    s = SceneScript()
    deferred = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        if key == "frames":
            s.frame_count = int(_floats(args, 1, lineno, key)[0])
            if s.frame_count < 1:
                raise ScriptError(f"line {lineno}: frame count must be >= 1")
        elif key == "size":
            s.width, s.height = (int(v) for v in _floats(args, 2, lineno, key))
        elif key == "cameras":
            if not args:
                raise ScriptError(f"line {lineno}: 'cameras' needs a count")
            s.n_cameras = int(_floats(args, 1, lineno, key)[0])
            opts = args[1:]
            if len(opts) % 2:
                raise ScriptError(f"line {lineno}: camera options come in name/value pairs")
            for name, val in zip(opts[0::2], opts[1::2]):
                v = _floats([val], 1, lineno, name)[0]
                if name == "radius":
                    s.radius = v
                elif name == "height":
                    s.cam_height = v
                elif name == "focal":
                    s.focal = v
                else:
                    raise ScriptError(f"line {lineno}: unknown camera option '{name}'")
        elif key == "heldout":
            s.heldout_deg = _floats(args, 1, lineno, key)[0]
        elif key == "bounds":
            s.bounds = np.array(_floats(args, 6, lineno, key))
        elif key == "seed":
            s.seed = int(_floats(args, 1, lineno, key)[0])
        elif key == "gaussian":
            if not args:
                raise ScriptError(f"line {lineno}: 'gaussian' needs a name")
            v = _floats(args[1:], 10, lineno, key)
            s.gaussians[args[0]] = GaussianPrimitive(np.array(v[0:3]), np.array(v[3:6]),
                                                     np.array([1.0, 0, 0, 0]), np.array(v[6:9]), v[9])
        elif key == "scatter":
            n, spread, scale = _floats(args, 3, lineno, key)
            rng = np.random.default_rng(s.seed)
            for i in range(int(n)):
                q = rng.normal(size=4)
                s.gaussians[f"s{i}"] = GaussianPrimitive(
                    s.center + rng.uniform(-spread, spread, 3), scale * rng.uniform(0.6, 1.4, 3),
                    q / np.linalg.norm(q), rng.uniform(0.1, 1.0, 3), float(rng.uniform(0.6, 0.95)))
        elif key in ("linear", "sin", "hide"):
            deferred.append((lineno, key, args))
        else:
            raise ScriptError(f"line {lineno}: unknown directive '{key}'")
    for lineno, key, args in deferred:
        if not args or args[0] not in s.gaussians:
            raise ScriptError(f"line {lineno}: '{key}' refers to an unknown Gaussian")
        name = args[0]
        if key == "linear":
            s.tracks.setdefault(name, []).append(Track("linear", np.array(_floats(args[1:], 3, lineno, key))))
        elif key == "sin":
            v = _floats(args[1:], 4, lineno, key)
            phase = _floats(args[5:], 1, lineno, key)[0] if len(args) > 5 else 0.0
            if v[3] <= 0:
                raise ScriptError(f"line {lineno}: period must be positive")
            s.tracks.setdefault(name, []).append(Track("sin", np.array(v[:3]), v[3], phase))
        else:
            a, b = (int(x) for x in _floats(args[1:], 2, lineno, key))
            s.hidden.setdefault(name, []).append((a, b))
    if not s.gaussians:
        raise ScriptError("script defines no Gaussians")
    if s.width < 1 or s.height < 1 or s.n_cameras < 1:
        raise ScriptError("size and camera count must be positive")
    return s


def builtin_script(name: str) -> str:
    if name not in BUILTIN:
        raise ScriptError(f"unknown built-in script '{name}' (choose from {', '.join(BUILTIN)})")
    return resources.files("solar").joinpath("scripts", f"{name}.txt").read_text()


def load_script(name_or_path: str) -> SceneScript:
    if name_or_path in BUILTIN:
        return parse_script(builtin_script(name_or_path))
    return parse_script(Path(name_or_path).read_text())


@dataclass
class Sequence:
    frames: np.ndarray  # (T, C, H, W, 3) in [0,1]
    cameras: list[Camera]
    train: list[int]
    heldout: int | None
    bounds: np.ndarray

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.bounds[:3] + self.bounds[3:])

    def __len__(self):
        return self.frames.shape[0]

    def slice(self, start: int, stop: int) -> "Sequence":
        return Sequence(self.frames[start:stop], self.cameras, self.train, self.heldout, self.bounds)


def _to8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def render_sequence(script: SceneScript) -> Sequence:
    """Render every frame from every camera, quantized to 8 bits like the PPM files."""
    cams, heldout = script.cameras()
    frames = np.empty((script.frame_count, len(cams), script.height, script.width, 3))
    for t in range(script.frame_count):
        g = Gaussians.from_primitives(script.state_at(t))
        for c, cam in enumerate(cams):
            frames[t, c] = _to8(render(g, cam)) / 255.0
    train = [i for i in range(len(cams)) if i != heldout]
    return Sequence(frames, cams, train, heldout, np.array(script.bounds, dtype=np.float64))


# -- image I/O ------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(_to8(img).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    px = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if px.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return px.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"PF":
            raise ValueError(f"{path}: not a colour PFM")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        px = np.frombuffer(fh.read(), dtype=dtype)
    return px.reshape(h, w, 3)[::-1].astype(np.float64)


# -- dataset on disk ------------------------------------------------------------

def generate(script: SceneScript, out_dir) -> Path:
    """Write every frame as PPM plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    seq = render_sequence(script)
    lines = [MANIFEST_TAG, f"size {script.width} {script.height}", f"frames {script.frame_count}",
             "bounds " + " ".join(repr(float(v)) for v in seq.bounds)]
    for i, cam in enumerate(seq.cameras):
        role = "heldout" if i == seq.heldout else "train"
        vals = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.R.reshape(-1), *cam.t]
        lines.append(f"camera {i} {role} " + " ".join(repr(float(v)) for v in vals))
    for t in range(len(seq)):
        for c in range(len(seq.cameras)):
            rel = f"frames/f{t:04d}_c{c}.ppm"
            write_ppm(out / rel, seq.frames[t, c])
            lines.append(f"frame {t} {c} {rel}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_sequence(manifest) -> Sequence:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    root = manifest.parent
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_TAG:
        raise ValueError(f"{manifest}: missing '{MANIFEST_TAG}' header")
    size = n_frames = None
    bounds = np.array([-1.0, -1, -1, 1, 1, 1])
    cams: dict[int, tuple[str, Camera]] = {}
    table: dict[tuple[int, int], str] = {}
    for lineno, raw in enumerate(lines[1:], 2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        try:
            if key == "size":
                size = (int(args[0]), int(args[1]))
            elif key == "frames":
                n_frames = int(args[0])
            elif key == "bounds":
                bounds = np.array([float(v) for v in args[:6]])
            elif key == "camera":
                v = [float(a) for a in args[2:]]
                cam = Camera(v[0], v[1], v[2], v[3], np.array(v[4:13]).reshape(3, 3),
                             np.array(v[13:16]), size[0], size[1])
                cams[int(args[0])] = (args[1], cam)
            elif key == "frame":
                table[(int(args[0]), int(args[1]))] = args[2]
            else:
                raise ValueError(f"unknown entry '{key}'")
        except (IndexError, ValueError, TypeError) as exc:
            raise ValueError(f"{manifest}:{lineno}: {exc}") from None
    if size is None or n_frames is None or not cams:
        raise ValueError(f"{manifest}: needs size, frames and at least one camera")
    order = sorted(cams)
    if order != list(range(len(order))):
        raise ValueError(f"{manifest}: camera indices must be 0..{len(order) - 1}")
    frames = np.empty((n_frames, len(order), size[1], size[0], 3))
    for t in range(n_frames):
        for c in order:
            rel = table.get((t, c))
            if rel is None:
                raise ValueError(f"{manifest}: no entry for frame {t} camera {c}")
            path = root / rel
            if not path.exists():
                raise FileNotFoundError(f"missing frame image: {path}")
            img = read_ppm(path)
            if img.shape[:2] != (size[1], size[0]):
                raise ValueError(f"{path}: resolution {img.shape[1]}x{img.shape[0]} != {size[0]}x{size[1]}")
            frames[t, c] = img
    heldouts = [c for c in order if cams[c][0] == "heldout"]
    train = [c for c in order if cams[c][0] != "heldout"]
    if not train:
        raise ValueError(f"{manifest}: no training cameras")
    return Sequence(frames, [cams[c][1] for c in order], train, heldouts[0] if heldouts else None, bounds)

