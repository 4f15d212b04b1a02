"""32-bit range coder with carry propagation.

Binary symbols are coded against a static 16-bit probability; multi-symbol
data uses adaptive frequency tables. Interval splits use the exact product
``(range * p16) >> 16`` so the per-symbol loss stays below 2^-24 bits.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TOP = 1 << 24
MASK32 = (1 << 32) - 1
PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
MAX_TOTAL = 1 << 16


class CodecError(ValueError):
    """Malformed, truncated or corrupted coded data."""


class CRCError(CodecError):
    pass


@dataclass(frozen=True)
class BernoulliModel:
    """P(+1) = p16 / 65536 with p16 in [1, 65535]."""

    p16: int

    def __post_init__(self):
        if not 1 <= self.p16 <= PROB_ONE - 1:
            raise ValueError(f"p16={self.p16} outside [1, 65535]")

    @classmethod
    def from_probability(cls, p: float) -> "BernoulliModel":
        return cls(int(min(max(round(p * PROB_ONE), 1), PROB_ONE - 1)))

    @classmethod
    def from_counts(cls, c_plus: int, c_minus: int) -> "BernoulliModel":
        return cls.from_probability(c_plus / max(c_plus + c_minus, 1))

    @property
    def p(self) -> float:
        return self.p16 / PROB_ONE


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def _carry(self):
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def _normalize(self):
        while self.range < TOP:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
            self.range <<= 8

    def encode_bits(self, bits: Iterable[int], p16: int) -> None:
        """Code a run of +1/-1 symbols with P(+1) = p16/65536."""
        low, rng, out = self.low, self.range, self.out
        for b in bits:
            bound = (rng * p16) >> PROB_BITS
            if b > 0:
                rng = bound
            else:
                low += bound
                rng -= bound
                if low > MASK32:
                    low &= MASK32
                    self._carry()
            while rng < TOP:
                out.append(low >> 24)
                low = (low << 8) & MASK32
                rng <<= 8
        self.low, self.range = low, rng

    def encode_freq(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        if self.low > MASK32:
            self.low &= MASK32
            self._carry()
        self._normalize()

    def finish(self) -> bytes:
        """Emit one byte pinning a value inside the final interval."""
        v = (self.low + TOP - 1) & ~(TOP - 1)
        if v > MASK32:
            v &= MASK32
            self._carry()
        self.out.append(v >> 24)
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        if pos - len(self.data) >= 3:
            raise CodecError("truncated coded stream")
        return 0

    def _normalize(self):
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8

    def decode_bits(self, count: int, p16: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int8)
        rng, code = self.range, self.code
        for i in range(count):
            bound = (rng * p16) >> PROB_BITS
            if code < bound:
                out[i] = 1
                rng = bound
            else:
                out[i] = -1
                code -= bound
                rng -= bound
            while rng < TOP:
                code = ((code << 8) | self._next()) & MASK32
                rng <<= 8
        self.range, self.code = rng, code
        return out

    def decode_target(self, total: int) -> tuple[int, int]:
        r = self.range // total
        return min(self.code // r, total - 1), r

    def consume(self, cum: int, freq: int, r: int) -> None:
        self.code -= r * cum
        self.range = r * freq
        self._normalize()


class AdaptiveByteModel:
    """Order-0 adaptive frequencies over 256 byte values."""

    INCREMENT = 24

    def __init__(self):
        self.freq = [1] * 256
        self.total = 256

    def _update(self, s: int) -> None:
        self.freq[s] += self.INCREMENT
        self.total += self.INCREMENT
        if self.total > MAX_TOTAL:
            self.freq = [(f + 1) // 2 for f in self.freq]
            self.total = sum(self.freq)

    def encode(self, enc: RangeEncoder, s: int) -> None:
        cum = sum(self.freq[:s])
        enc.encode_freq(cum, self.freq[s], self.total)
        self._update(s)

    def decode(self, dec: RangeDecoder) -> int:
        target, r = dec.decode_target(self.total)
        cum = 0
        s = 0
        freq = self.freq
        while cum + freq[s] <= target:
            cum += freq[s]
            s += 1
        dec.consume(cum, freq[s], r)
        self._update(s)
        return s


def arith_encode(bits: Sequence[int], model: BernoulliModel) -> bytes:
    enc = RangeEncoder()
    enc.encode_bits((int(b) for b in bits), model.p16)
    return enc.finish()


def arith_decode(data: bytes, count: int, model: BernoulliModel, crc: int | None = None) -> np.ndarray:
    """Inverse of :func:`arith_encode`; verifies ``crc`` (CRC32) when given."""
    if crc is not None and zlib.crc32(data) != crc:
        raise CRCError("CRC mismatch in coded sign stream")
    dec = RangeDecoder(data)
    out = dec.decode_bits(count, model.p16)
    if dec.pos > len(data) + 3:
        raise CodecError("truncated coded stream")
    return out


def encode_bytes_adaptive(symbols: Sequence[int], n_models: int = 1) -> bytes:
    """Code a byte sequence with ``n_models`` interleaved adaptive models."""
    enc = RangeEncoder()
    models = [AdaptiveByteModel() for _ in range(n_models)]
    for i, s in enumerate(symbols):
        models[i % n_models].encode(enc, int(s))
    return enc.finish()


def decode_bytes_adaptive(data: bytes, count: int, n_models: int = 1) -> np.ndarray:
    dec = RangeDecoder(data)
    models = [AdaptiveByteModel() for _ in range(n_models)]
    out = np.empty(count, dtype=np.uint8)
    for i in range(count):
        out[i] = models[i % n_models].decode(dec)
    return out


def shannon_bits(c_plus: int, c_minus: int, p: float) -> float:
    return c_plus * -np.log2(p) + c_minus * -np.log2(1.0 - p)
