"""The ``.solar`` container: global config block followed by I/P frame records.

Layout (little-endian)::

    "SOLR" | u16 version | u32 cfg_len | cfg (UTF-8 JSON)
    frame*: u32 frame_index | u8 kind | u32 payload_len | payload | u32 crc32(payload)

P payload::

    u16 p16 | u8 flags | u32 len[5] (btc_x signs, btc_f signs, side, N_m, N_G)
    | coded btc_x signs | coded btc_f signs | f32 biases+scales | f32 N_m | f32 N_G

I payload::

    u32 n_anchors | u16 feat_dim | f64 x_lo[3] x_hi[3] f_lo f_hi l_lo l_hi
    | u32 len + coded x | u32 len + coded f | u32 len + coded l
    | u32 len + f32 N_G | u32 len + f32 N_m | u16 k, u16 H_G, u16 H_m (echo)
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..anchors import AnchorSet, GaussianAttributeNet, MaskNet
from ..btc import BtcPair, SymbolCounts, apply_updates, btc_forward, hard_rate
from .rangecoder import (BernoulliModel, CodecError, CRCError, arith_decode, arith_encode,
                         decode_bytes_adaptive, encode_bytes_adaptive)

MAGIC = b"SOLR"
VERSION = 1
KIND_I, KIND_P = 0, 1
FLAG_RECAL = 1
FLAG_NM = 2
X_BITS, F_BITS = 16, 12

_FRAME_HEAD = struct.Struct("<IBI")
_P_HEAD = struct.Struct("<HB5I")


class FormatError(CodecError):
    pass


@dataclass
class CodecState:
    """What a decoder holds after each frame (and what the encoder adopts)."""

    anchors: AnchorSet
    ng: GaussianAttributeNet
    nm: MaskNet | None
    frame_index: int = 0
    recal: bool = False

    def state_bytes(self) -> bytes:
        nm = self.nm.state_bytes() if self.nm is not None else b""
        return self.anchors.state_bytes() + self.ng.state_bytes() + nm


@dataclass
class FrameRecord:
    frame_index: int
    kind: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return (_FRAME_HEAD.pack(self.frame_index, self.kind, len(self.payload)) + self.payload
                + struct.pack("<I", zlib.crc32(self.payload)))

    @property
    def nbytes(self) -> int:
        return _FRAME_HEAD.size + len(self.payload) + 4


@dataclass
class Bitstream:
    config: dict
    frames: list[FrameRecord] = field(default_factory=list)

    def header_bytes(self) -> bytes:
        cfg = json.dumps(self.config, sort_keys=True).encode()
        return MAGIC + struct.pack("<HI", VERSION, len(cfg)) + cfg

    def to_bytes(self) -> bytes:
        return self.header_bytes() + b"".join(f.to_bytes() for f in self.frames)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        config, frames = parse_header(data)
        return cls(config, list(iter_frames(data, frames)))


def parse_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 10:
        raise FormatError("empty or truncated bitstream header")
    if data[:4] != MAGIC:
        raise FormatError("bad magic, not a .solar bitstream")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if len(data) < 10 + n:
        raise FormatError("truncated config block")
    return json.loads(data[10:10 + n].decode()), 10 + n


def iter_frames(data: bytes, offset: int):
    """Yield frame records in order; usable on any prefix of the stream."""
    expected = 0
    while offset < len(data):
        if offset + _FRAME_HEAD.size > len(data):
            raise FormatError(f"stream truncated in header of frame {expected}")
        idx, kind, n = _FRAME_HEAD.unpack_from(data, offset)
        offset += _FRAME_HEAD.size
        if offset + n + 4 > len(data):
            raise FormatError(f"stream truncated inside frame {idx}")
        payload = data[offset:offset + n]
        (crc,) = struct.unpack_from("<I", data, offset + n)
        if zlib.crc32(payload) != crc:
            raise CRCError(f"CRC mismatch in frame {idx}")
        if idx != expected:
            raise FormatError(f"out-of-order frame {idx}, expected {expected}")
        if kind not in (KIND_I, KIND_P):
            raise FormatError(f"unknown frame kind {kind} in frame {idx}")
        offset += n + 4
        expected += 1
        yield FrameRecord(idx, kind, payload)


# -- quantization -------------------------------------------------------------

def quantize(values: np.ndarray, lo, hi, bits: int) -> np.ndarray:
    """Uniform quantization over [lo, hi]; a zero-width range maps to index 0."""
    levels = (1 << bits) - 1
    lo = np.asarray(lo, np.float64)
    span = np.asarray(hi, np.float64) - lo
    step = np.where(span > 0, span / levels, 1.0)
    q = np.where(span > 0, np.rint((values - lo) / step), 0)
    return np.clip(q, 0, levels).astype(np.int64)


def dequantize(q: np.ndarray, lo, hi, bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    lo = np.asarray(lo, np.float64)
    span = np.asarray(hi, np.float64) - lo
    return lo + q.astype(np.float64) * (span / levels)


def _split_bytes(q: np.ndarray) -> list[int]:
    flat = q.reshape(-1)
    out = np.empty(flat.size * 2, dtype=np.int64)
    out[0::2] = flat >> 8
    out[1::2] = flat & 0xFF
    return out.tolist()


def _join_bytes(b: np.ndarray) -> np.ndarray:
    b = b.astype(np.int64)
    return (b[0::2] << 8) | b[1::2]


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


class _Reader:
    def __init__(self, data: bytes, frame_index: int):
        self.data, self.pos, self.frame = data, 0, frame_index

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"frame {self.frame}: section overruns payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


# -- I-frames -----------------------------------------------------------------

def quantize_anchors(anchors: AnchorSet):
    x_lo, x_hi = anchors.x.min(axis=0), anchors.x.max(axis=0)
    f_lo, f_hi = float(anchors.f.min()), float(anchors.f.max())
    l_lo, l_hi = float(anchors.l.min()), float(anchors.l.max())
    qx = quantize(anchors.x, x_lo, x_hi, X_BITS)
    qf = quantize(anchors.f, f_lo, f_hi, F_BITS)
    ql = quantize(anchors.l, l_lo, l_hi, F_BITS)
    return (qx, qf, ql), (x_lo, x_hi, f_lo, f_hi, l_lo, l_hi)


def encode_iframe(anchors: AnchorSet, ng: GaussianAttributeNet, nm: MaskNet | None,
                  frame_index: int, hidden_m: int) -> FrameRecord:
    (qx, qf, ql), (x_lo, x_hi, f_lo, f_hi, l_lo, l_hi) = quantize_anchors(anchors)
    n, d = anchors.f.shape
    parts = [struct.pack("<IH", n, d),
             struct.pack("<6d", *x_lo, *x_hi), struct.pack("<4d", f_lo, f_hi, l_lo, l_hi)]
    for q in (qx, qf, ql):
        parts.append(_blob(encode_bytes_adaptive(_split_bytes(q), n_models=2)))
    parts.append(_blob(ng.to_bytes()))
    parts.append(_blob(nm.to_bytes() if nm is not None else b""))
    parts.append(struct.pack("<3H", ng.k, ng.sizes[1], hidden_m))
    return FrameRecord(frame_index, KIND_I, b"".join(parts))


def decode_iframe(record: FrameRecord, cfg: dict) -> CodecState:
    r = _Reader(record.payload, record.frame_index)
    n, d = r.unpack("<IH")
    xb = r.unpack("<6d")
    x_lo, x_hi = np.array(xb[:3]), np.array(xb[3:])
    f_lo, f_hi, l_lo, l_hi = r.unpack("<4d")
    qs = []
    for width in (3, d, 3):
        qs.append(_join_bytes(decode_bytes_adaptive(r.blob(), 2 * n * width, n_models=2)).reshape(n, width))
    x = dequantize(qs[0], x_lo, x_hi, X_BITS)
    f = dequantize(qs[1], f_lo, f_hi, F_BITS)
    l = dequantize(qs[2], l_lo, l_hi, F_BITS)
    ng_bytes, nm_bytes = r.blob(), r.blob()
    k, hg, hm = r.unpack("<3H")
    if (k, hg, hm, d) != (cfg["k"], cfg["hidden_g"], cfg["hidden_m"], cfg["feat_dim"]):
        raise FormatError(f"frame {record.frame_index}: I-frame echo disagrees with stream config")
    ng = GaussianAttributeNet(d, k, hg, cfg["s_base"])
    ng.load_bytes(ng_bytes)
    nm = None
    if nm_bytes:
        nm = MaskNet(d, hm)
        nm.load_bytes(nm_bytes)
    return CodecState(AnchorSet(x, f, l), ng, nm, record.frame_index)


# -- P-frames -----------------------------------------------------------------

def encode_pframe(pair: BtcPair, nm: MaskNet | None, recal_ng: GaussianAttributeNet | None,
                  frame_index: int) -> FrameRecord:
    sx, sf = pair.btc_x.sign_vector(), pair.btc_f.sign_vector()
    model = BernoulliModel.from_counts(int((sx > 0).sum() + (sf > 0).sum()),
                                       int((sx < 0).sum() + (sf < 0).sum()))
    cx, cf = arith_encode(sx, model), arith_encode(sf, model)
    side = np.concatenate([pair.btc_x.side_vector(), pair.btc_f.side_vector()]).astype("<f4").tobytes()
    nm_b = nm.to_bytes() if nm is not None else b""
    ng_b = recal_ng.to_bytes() if recal_ng is not None else b""
    flags = (FLAG_RECAL if recal_ng is not None else 0) | (FLAG_NM if nm is not None else 0)
    head = _P_HEAD.pack(model.p16, flags, len(cx), len(cf), len(side), len(nm_b), len(ng_b))
    return FrameRecord(frame_index, KIND_P, head + cx + cf + side + nm_b + ng_b)


@dataclass
class PSections:
    p16: int
    flags: int
    signs_x: bytes
    signs_f: bytes
    side: bytes
    nm: bytes
    ng: bytes


def parse_pframe(record: FrameRecord) -> PSections:
    r = _Reader(record.payload, record.frame_index)
    p16, flags, *lens = r.unpack(_P_HEAD.format)
    secs = [r.take(n) for n in lens]
    if r.pos != len(record.payload):
        raise FormatError(f"frame {record.frame_index}: trailing bytes in P payload")
    return PSections(p16, flags, *secs)


def decode_btc(sec: PSections, feat_dim: int, hidden_b: int, frame_index: int = -1) -> BtcPair:
    pair = BtcPair(feat_dim, hidden_b, rng=None)
    model = BernoulliModel(sec.p16)
    sx = arith_decode(sec.signs_x, pair.btc_x.n_signs, model)
    sf = arith_decode(sec.signs_f, pair.btc_f.n_signs, model)
    side = np.frombuffer(sec.side, dtype="<f4").astype(np.float64)
    if side.size != pair.btc_x.n_side + pair.btc_f.n_side:
        raise FormatError(f"frame {frame_index}: BTC side-parameter section has wrong size")
    pair.btc_x.load(sx, side[:pair.btc_x.n_side])
    pair.btc_f.load(sf, side[pair.btc_x.n_side:])
    return pair


def propagate_anchors(anchors: AnchorSet, pair: BtcPair) -> AnchorSet:
    """Apply a transmitted BTC to the previous anchors (encoder and decoder share this)."""
    outs = btc_forward(pair, anchors.x)
    x_t, f_t = apply_updates(anchors.x, anchors.f, outs)
    return AnchorSet(x_t.value.copy(), f_t.value.copy(), anchors.l.copy())


def decode_pframe(record: FrameRecord, prev: CodecState, cfg: dict) -> CodecState:
    sec = parse_pframe(record)
    pair = decode_btc(sec, cfg["feat_dim"], cfg["hidden_b"], record.frame_index)
    anchors = propagate_anchors(prev.anchors, pair)
    nm = prev.nm
    if sec.flags & FLAG_NM:
        nm = MaskNet(cfg["feat_dim"], cfg["hidden_m"])
        nm.load_bytes(sec.nm)
    ng = prev.ng
    recal = bool(sec.flags & FLAG_RECAL)
    if recal:
        ng = prev.ng.copy()
        ng.load_bytes(sec.ng)
    return CodecState(anchors, ng, nm, record.frame_index, recal)


def decode_frame(record: FrameRecord, prev: CodecState | None, cfg: dict) -> CodecState:
    if record.kind == KIND_I:
        return decode_iframe(record, cfg)
    if prev is None:
        raise FormatError(f"P-frame {record.frame_index} without a preceding I-frame")
    if record.frame_index != prev.frame_index + 1:
        raise FormatError(f"out-of-order frame {record.frame_index} after {prev.frame_index}")
    return decode_pframe(record, prev, cfg)


def measure_rate(record: FrameRecord) -> dict[str, int]:
    """Byte sizes of each section (plus the framed total)."""
    out = {"total": record.nbytes}
    if record.kind == KIND_P:
        sec = parse_pframe(record)
        out.update(signs_x=len(sec.signs_x), signs_f=len(sec.signs_f), side=len(sec.side),
                   nm=len(sec.nm), ng=len(sec.ng), header=_P_HEAD.size)
    return out


def estimate_gap(record: FrameRecord, counts: SymbolCounts) -> float:
    """Coded sign bits minus the ideal Bernoulli code length at the header p16."""
    sec = parse_pframe(record)
    coded = 8 * (len(sec.signs_x) + len(sec.signs_f))
    return coded - hard_rate(counts, BernoulliModel(sec.p16).p)
