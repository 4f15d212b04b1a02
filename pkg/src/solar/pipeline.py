"""Streaming encoder: I-frame fit, then per-frame BTC/AAD training with LaDAR.

The encoder always continues from the state a decoder would reconstruct, so
both sides follow the same anchor trajectory.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .anchors import (ActivationPartition, AnchorSet, GaussianAttributeNet, MaskNet, decode_anchors,
                      gate_attributes, mask_scores, partition, warm_start_mask)
from .btc import (BtcPair, apply_updates, btc_forward, count_symbols, empirical_p,
                  positional_encoding, soft_rate)
from .codec.bitstream import (Bitstream, CodecState, FormatError, FrameRecord, KIND_I,
                              decode_frame, encode_iframe, encode_pframe, iter_frames,
                              parse_header, propagate_anchors)
from .ladar import (GradientStatistic, RecalConfig, grad_norm_btc_f, recalibrate,
                    should_recalibrate, update_ema)
from .losses import LossWeights, psnr, rendering_loss, sparsity_loss, ssim, total_loss
from .render import Camera, Gaussians, render_tensor
from .synth import Sequence

log = logging.getLogger(__name__)

TAU_START, TAU_END = 1.0, 1e-2


@dataclass
class PipelineConfig:
    t_btc: int = 500
    t_iframe: int = 2000
    t_recal: int = 200
    eps_m: float = 0.01
    eps_d: float = 0.002
    alpha_d: float = 0.3
    lambda_e: float = 0.004
    lambda_s: float = 0.01
    lambda_ssim: float = 0.2
    lr: float = 5e-3
    lr_recal: float = 5e-3
    seed: int = 0
    enable_aad: bool = True
    enable_ladar: bool = True
    gop_size: int = 0
    n_anchors: int = 256
    k: int = 5
    feat_dim: int = 16
    hidden_g: int = 64
    hidden_m: int = 16
    hidden_b: int = 48
    s_base: float = 0.05
    rate_unit: str = "symbol"  # "symbol": L_e in bits per sign, "total": raw bit count

    def __post_init__(self):
        if self.rate_unit not in ("symbol", "total"):
            raise ValueError(f"rate_unit must be 'symbol' or 'total', not {self.rate_unit!r}")
        if not 0.0 < self.eps_m < 0.5:
            # sigma(0) = 0.5, so eps_m >= 0.5 would mask every freshly initialized anchor
            raise ValueError(f"eps_m={self.eps_m} must lie in (0, 0.5)")
        if self.eps_d <= 0 or not 0.0 <= self.alpha_d < 1.0:
            raise ValueError("eps_d must be > 0 and alpha_d in [0, 1)")
        if self.gop_size < 0:
            raise ValueError("gop_size must be >= 0")
        if min(self.t_btc, self.t_iframe, self.t_recal) < 0:
            raise ValueError("step counts must be >= 0")
        if min(self.n_anchors, self.k, self.feat_dim, self.hidden_g, self.hidden_m, self.hidden_b) < 1:
            raise ValueError("model sizes must be positive")
        if self.lr <= 0 or self.lr_recal <= 0 or self.s_base <= 0:
            raise ValueError("learning rates and s_base must be positive")
        LossWeights(self.lambda_ssim, self.lambda_e, self.lambda_s)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssim, self.lambda_e, self.lambda_s)

    @property
    def recal(self) -> RecalConfig:
        return RecalConfig(self.eps_d, self.t_recal, self.lr_recal)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


# "desk" is the small profile the acceptance suite runs on one CPU core
PROFILES: dict[str, dict] = {
    "default": {},
    "desk": {"t_iframe": 400, "t_btc": 30, "t_recal": 30, "eps_d": 0.015, "n_anchors": 48, "k": 4,
             "feat_dim": 8, "hidden_g": 32, "hidden_m": 8, "hidden_b": 16},
}


@dataclass
class FrameState:
    anchors: AnchorSet
    ng: GaussianAttributeNet
    nm: MaskNet | None
    stat: GradientStatistic = field(default_factory=GradientStatistic)
    partition: ActivationPartition | None = None

    def state_bytes(self) -> bytes:
        return CodecState(self.anchors, self.ng, self.nm).state_bytes()


@dataclass
class FrameReport:
    frame: int
    psnr_db: float
    ssim: float
    bytes: int
    grad_ema: float
    recal: int
    active_anchors: int
    kind: str = "P"


@dataclass
class Scene:
    """What the encoder knows about the capture rig."""

    cameras: list[Camera]
    train: list[int]
    heldout: int | None
    bounds: np.ndarray

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.bounds[:3] + self.bounds[3:])

    @classmethod
    def of(cls, seq: Sequence) -> "Scene":
        return cls(seq.cameras, list(seq.train), seq.heldout, np.asarray(seq.bounds, np.float64))

    def view_dir(self, cam_idx: int) -> np.ndarray:
        return self.cameras[cam_idx].view_dir(self.centroid)


def stream_config(cfg: PipelineConfig, scene: Scene) -> dict:
    """Self-describing global block written at the head of the bitstream."""
    return {"pipeline": cfg.to_dict(), "k": cfg.k, "feat_dim": cfg.feat_dim, "hidden_g": cfg.hidden_g,
            "hidden_m": cfg.hidden_m, "hidden_b": cfg.hidden_b, "s_base": cfg.s_base,
            "cameras": [c.to_dict() for c in scene.cameras], "train": scene.train,
            "heldout": scene.heldout, "bounds": [float(v) for v in scene.bounds]}


def frame_rng(seed: int, frame: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, frame, stream])


# -- forward helpers --------------------------------------------------------------

def render_frame(x, f, l, ng, nm, scene: Scene, cam_idx: int, cfg: PipelineConfig,
                 train_ng: bool = False, train_nm: bool = False):
    """Decode anchors for one camera, gate with N_m (if any) and render.

    Returns (image tensor, mask scores or None).
    """
    gauss = decode_anchors(x, f, l, ng, scene.view_dir(cam_idx), trainable=train_ng)
    scores, probe, shape = None, None, None
    if nm is not None:
        scores = mask_scores(x, f, nm, trainable=train_nm)
        shape = ad.as_tensor(gauss.scale).value
        gauss, probe = gate_attributes(gauss, scores, cfg.eps_m, cfg.k)
    img = render_tensor(gauss, scene.cameras[cam_idx], probe=probe, probe_scale=shape)
    return img, scores


def render_state(state: CodecState | FrameState, scene: Scene, cam: Camera | int,
                 cfg: PipelineConfig) -> np.ndarray:
    """Plain render of a decoded state from a rig camera index or any pose."""
    if isinstance(cam, int):
        cam = scene.cameras[cam]
    a = state.anchors
    gauss = decode_anchors(a.x, a.f, a.l, state.ng, cam.view_dir(scene.centroid))
    probe = None
    if state.nm is not None:
        gauss, probe = gate_attributes(gauss, mask_scores(a.x, a.f, state.nm, trainable=False),
                                       cfg.eps_m, cfg.k)
    return render_tensor(gauss, cam, probe=probe).value


def active_count(state, cfg: PipelineConfig) -> int:
    if state.nm is None:
        return len(state.anchors)
    a = state.anchors
    return int(partition(mask_scores(a.x, a.f, state.nm, trainable=False), cfg.eps_m).active.size)


# -- I-frame ----------------------------------------------------------------------

def init_anchors(n: int, bounds: np.ndarray, feat_dim: int, rng: np.random.Generator) -> AnchorSet:
    """Jittered grid of ``n`` anchors inside the scene box."""
    lo, hi = np.asarray(bounds[:3], float), np.asarray(bounds[3:], float)
    side = int(np.ceil(n ** (1.0 / 3.0)))
    cell = (hi - lo) / side
    grid = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), -1).reshape(-1, 3)
    pick = np.sort(rng.permutation(grid.shape[0])[:n])
    x = lo + (grid[pick] + 0.5 + rng.uniform(-0.25, 0.25, (n, 3))) * cell
    f = rng.normal(0.0, 0.1, (n, feat_dim))
    l = np.tile(cell, (n, 1))
    return AnchorSet(x, f, l)


def train_iframe(frames: np.ndarray, scene: Scene, cfg: PipelineConfig, frame_index: int = 0
                 ) -> tuple[FrameState, FrameRecord, list[float]]:
    """Jointly fit anchors, N_G and N_m to one multi-view frame.

    ``frames`` is (C, H, W, 3). Returns the decoder-side state, its record and
    the per-step loss trace.
    """
    if not scene.train:
        raise ValueError("I-frame training needs at least one training camera")
    rng = frame_rng(cfg.seed, frame_index)
    init = init_anchors(cfg.n_anchors, scene.bounds, cfg.feat_dim, rng)
    x = ad.Param(init.x, "anchor.x")
    f = ad.Param(init.f, "anchor.f")
    log_l = ad.Param(np.log(init.l), "anchor.log_l")
    ng = GaussianAttributeNet(cfg.feat_dim, cfg.k, cfg.hidden_g, cfg.s_base, rng)
    nm = MaskNet(cfg.feat_dim, cfg.hidden_m, rng) if cfg.enable_aad else None
    params = [x, f, log_l] + ng.params() + (nm.params() if nm is not None else [])
    w = cfg.weights
    trace = []
    for step in range(cfg.t_iframe):
        cam = int(rng.choice(scene.train))
        try:
            img, scores = render_frame(x, f, ad.exp(log_l), ng, nm, scene, cam, cfg,
                                       train_ng=True, train_nm=True)
            lr_ = rendering_loss(img, frames[cam], w)
            ls = sparsity_loss(scores) if scores is not None else None
            loss = total_loss(lr_, None, ls, w)
            ad.backward(loss)
            ad.adam_step(params, cfg.lr)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"I-frame {frame_index} diverged at step {step} "
                                    f"(seed {cfg.seed}): {exc}") from exc
        trace.append(float(loss.value))
    ng.round_to_f32()
    if nm is not None:
        nm.round_to_f32()
    anchors = AnchorSet(x.value.copy(), f.value.copy(), np.exp(log_l.value))
    record = encode_iframe(anchors, ng, nm, frame_index, cfg.hidden_m)
    dec = decode_frame(record, None, _codec_cfg(cfg))
    state = FrameState(dec.anchors, dec.ng, dec.nm)
    state.partition = _partition(state, cfg)
    return state, record, trace


def _codec_cfg(cfg: PipelineConfig) -> dict:
    return {"k": cfg.k, "feat_dim": cfg.feat_dim, "hidden_g": cfg.hidden_g, "hidden_m": cfg.hidden_m,
            "hidden_b": cfg.hidden_b, "s_base": cfg.s_base}


def _partition(state: FrameState, cfg: PipelineConfig) -> ActivationPartition:
    n = len(state.anchors)
    if state.nm is None:
        return ActivationPartition(np.arange(n), np.zeros(0, dtype=np.int64))
    a = state.anchors
    return partition(mask_scores(a.x, a.f, state.nm, trainable=False), cfg.eps_m)


# -- P-frames ---------------------------------------------------------------------

@dataclass
class PFrameTrace:
    loss: list[float] = field(default_factory=list)
    render: list[float] = field(default_factory=list)
    rate: list[float] = field(default_factory=list)
    sparsity: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    ema: list[float] = field(default_factory=list)
    recal_before: float | None = None
    recal_after: float | None = None
    pair: BtcPair | None = None


def tau_at(step: int, total: int) -> float:
    if total <= 1:
        return TAU_END
    return TAU_START + (TAU_END - TAU_START) * step / (total - 1)


def frame_render_loss(anchors: AnchorSet, ng, nm, frames, scene: Scene, cfg: PipelineConfig,
                      cams=None) -> float:
    """Mean L_r over training cameras for a fixed state."""
    cams = scene.train if cams is None else cams
    vals = []
    for c in cams:
        img, _ = render_frame(anchors.x, anchors.f, anchors.l, ng, nm, scene, c, cfg)
        vals.append(float(rendering_loss(img, frames[c], cfg.weights).value))
    return float(np.mean(vals))


def train_pframe(frames: np.ndarray, prev: FrameState, scene: Scene, cfg: PipelineConfig,
                 frame_index: int) -> tuple[FrameState, FrameRecord, PFrameTrace]:
    """One pass of the inter-frame procedure for frame ``frame_index``."""
    rng = frame_rng(cfg.seed, frame_index)
    pair = BtcPair(cfg.feat_dim, cfg.hidden_b, rng)
    nm = None
    if cfg.enable_aad:
        nm = warm_start_mask(prev.nm, cfg.feat_dim, cfg.hidden_m, rng)
        for p in nm.params():
            p.reset_optimizer()
    stat = GradientStatistic(cfg.alpha_d)
    params = pair.params() + (nm.params() if nm is not None else [])
    a = prev.anchors
    enc = positional_encoding(a.x)
    n_signs = pair.btc_x.n_signs + pair.btc_f.n_signs
    w = cfg.weights
    tr = PFrameTrace()
    for step in range(cfg.t_btc):
        cam = int(rng.choice(scene.train))
        try:
            outs = btc_forward(pair, a.x, enc)
            x_t, f_t = apply_updates(a.x, a.f, outs)
            img, scores = render_frame(x_t, f_t, a.l, prev.ng, nm, scene, cam, cfg, train_nm=True)
            l_r = rendering_loss(img, frames[cam], w)
            l_e = soft_rate(pair, empirical_p(count_symbols(pair)), tau_at(step, cfg.t_btc))
            if cfg.rate_unit == "symbol":
                l_e = l_e * (1.0 / n_signs)
            l_s = sparsity_loss(scores) if scores is not None else None
            loss = total_loss(l_r, l_e, l_s, w)
            ad.backward(loss)
            g = grad_norm_btc_f(pair)
            stat = update_ema(stat, g)
            ad.adam_step(params, cfg.lr)
            pair.clamp_scales()
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"P-frame {frame_index} diverged at step {step} "
                                    f"(seed {cfg.seed}): {exc}") from exc
        tr.loss.append(float(loss.value))
        tr.render.append(float(l_r.value))
        tr.rate.append(float(l_e.value))
        if l_s is not None:
            tr.sparsity.append(float(l_s.value))
        tr.grad_norm.append(g)
        tr.ema.append(stat.ema)

    pair.round_to_f32()
    if nm is not None:
        nm.round_to_f32()
    anchors = propagate_anchors(a, pair)
    recal_ng = None
    if cfg.enable_ladar and should_recalibrate(stat, cfg.recal):
        recal_ng, tr.recal_before, tr.recal_after = _recalibrate(anchors, prev.ng, nm, frames, scene,
                                                                 cfg, frame_index)
    record = encode_pframe(pair, nm, recal_ng, frame_index)
    dec = decode_frame(record, CodecState(a, prev.ng, prev.nm, frame_index - 1), _codec_cfg(cfg))
    state = FrameState(dec.anchors, dec.ng, dec.nm, stat)
    state.partition = _partition(state, cfg)
    tr.pair = pair
    return state, record, tr


def _recalibrate(anchors, ng, nm, frames, scene, cfg, frame_index):
    rng = frame_rng(cfg.seed, frame_index, 1)
    w = cfg.weights
    cams = [int(rng.choice(scene.train)) for _ in range(cfg.t_recal)]

    def loss_fn(net, step):
        img, _ = render_frame(anchors.x, anchors.f, anchors.l, net, nm, scene, cams[step], cfg,
                              train_ng=True)
        return rendering_loss(img, frames[cams[step]], w)

    new, changed = recalibrate(ng, loss_fn, cfg.recal)
    if not changed:
        return None, None, None
    new.round_to_f32()
    before = frame_render_loss(anchors, ng, nm, frames, scene, cfg)
    after = frame_render_loss(anchors, new, nm, frames, scene, cfg)
    log.info("frame %d: recalibrated N_G, L_r %.5f -> %.5f", frame_index, before, after)
    return new, before, after


# -- streams ----------------------------------------------------------------------

@dataclass
class EncodeResult:
    bitstream: Bitstream
    reports: list[FrameReport]
    states: list[FrameState]
    traces: list[PFrameTrace | list[float]]


def evaluate(state, frames: np.ndarray, scene: Scene, cfg: PipelineConfig) -> tuple[float, float]:
    """PSNR/SSIM on the held-out camera (first training camera if there is none)."""
    cam = scene.heldout if scene.heldout is not None else scene.train[0]
    img = np.clip(render_state(state, scene, cam, cfg), 0.0, 1.0)
    return psnr(img, frames[cam]), float(ssim(img, frames[cam]))


def stream_encode(seq: Sequence, cfg: PipelineConfig, keep_states: bool = False,
                  on_frame=None) -> EncodeResult:
    scene = Scene.of(seq)
    stream = Bitstream(stream_config(cfg, scene))
    reports, states, traces = [], [], []
    state = None
    for t in range(len(seq)):
        frames = seq.frames[t]
        is_i = state is None or (cfg.gop_size > 0 and t % cfg.gop_size == 0)
        if is_i:
            state, record, trace = train_iframe(frames, scene, cfg, t)
            ema, recal = 0.0, 0
        else:
            state, record, trace = train_pframe(frames, state, scene, cfg, t)
            ema, recal = state.stat.ema, int(trace.recal_before is not None)
        stream.frames.append(record)
        p, s = evaluate(state, frames, scene, cfg)
        rep = FrameReport(t, p, s, record.nbytes, ema, recal, int(state.partition.active.size),
                          "I" if is_i else "P")
        reports.append(rep)
        traces.append(trace if keep_states else None)
        if keep_states:
            states.append(state)
        if on_frame is not None:
            on_frame(rep)
        log.info("frame %d %s psnr=%.2f bytes=%d ema=%.5f recal=%d active=%d", t, rep.kind, p,
                 rep.bytes, ema, recal, rep.active_anchors)
    return EncodeResult(stream, reports, states, traces)


def scene_from_config(config: dict) -> tuple[Scene, PipelineConfig]:
    try:
        cams = [Camera.from_dict(c) for c in config["cameras"]]
        scene = Scene(cams, list(config["train"]), config["heldout"], np.array(config["bounds"], float))
        cfg = PipelineConfig.from_dict(config["pipeline"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bitstream config block is incomplete: {exc}") from None
    return scene, cfg


def decode_states(data: bytes):
    """Yield (scene, cfg, CodecState) for every frame of a serialized stream."""
    if not data:
        raise FormatError("empty bitstream")
    config, offset = parse_header(data)
    scene, cfg = scene_from_config(config)
    state = None
    seen = False
    for record in iter_frames(data, offset):
        if record.kind == KIND_I:
            state = decode_frame(record, None, config)
        else:
            state = decode_frame(record, state, config)
        seen = True
        yield scene, cfg, state
    if not seen:
        raise FormatError("bitstream holds no frames")


def stream_decode(data: bytes, camera: Camera | int | str = "heldout") -> list[np.ndarray]:
    """Render every decoded frame from a rig camera, ``"heldout"`` or any pose."""
    out = []
    for scene, cfg, state in decode_states(data):
        cam = camera
        if camera == "heldout":
            cam = scene.heldout if scene.heldout is not None else scene.train[0]
        if isinstance(cam, (int, np.integer)) and not 0 <= cam < len(scene.cameras):
            raise ValueError(f"camera index {cam} out of range 0..{len(scene.cameras) - 1}")
        out.append(render_state(state, scene, cam if not isinstance(cam, np.integer) else int(cam), cfg))
    return out
