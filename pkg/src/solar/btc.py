"""Binarized transformation networks predicting per-anchor motion and feature residuals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PE_BANDS = 4
ENC_DIM = 3 + 3 * 2 * PE_BANDS
GAMMA_MAX = 1.0
P_DELTA = 1e-4
SCALE_FLOOR = 1e-6


def positional_encoding(x: np.ndarray, bands: int = PE_BANDS) -> np.ndarray:
    """Raw coordinates followed by sin/cos at octave frequencies."""
    x = np.asarray(x, dtype=np.float64)
    feats = [x]
    for k in range(bands):
        feats.append(np.sin((2.0 ** k) * np.pi * x))
        feats.append(np.cos((2.0 ** k) * np.pi * x))
    return np.concatenate(feats, axis=1)


class BinarizedLinear:
    """y = x @ (scale * sign(latent_w)) + b.

    Only the sign pattern of ``latent_w`` is transmitted; bias and scale go
    over the wire in float32.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 scale: float | None = None, name: str = "bl"):
        self.n_in, self.n_out = n_in, n_out
        latent = rng.uniform(-0.1, 0.1, (n_in, n_out)) if rng is not None else np.zeros((n_in, n_out))
        self.latent_w = ad.Param(latent, f"{name}.latent_w")
        self.bias = ad.Param(np.zeros(n_out), f"{name}.bias")
        init_scale = 1.0 / np.sqrt(n_in) if scale is None else scale
        self.scale = ad.Param(np.array([init_scale]), f"{name}.scale")

    def params(self) -> list[ad.Param]:
        return [self.latent_w, self.bias, self.scale]

    def signs(self) -> np.ndarray:
        return np.where(self.latent_w.value >= 0, 1, -1).astype(np.int8)

    def effective_weight(self) -> np.ndarray:
        return self.scale.value[0] * self.signs().astype(np.float64)

    def __call__(self, x) -> ad.Tensor:
        w = self.scale * ad.ste_sign(self.latent_w)
        return ad.as_tensor(x) @ w + self.bias


class BinarizedMLP:
    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 out_scale: float = 0.1, name: str = "btc"):
        self.sizes = list(sizes)
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            s = None if i < len(sizes) - 2 else out_scale / np.sqrt(a)
            self.layers.append(BinarizedLinear(a, b, rng, scale=s, name=f"{name}.{i}"))

    def params(self) -> list[ad.Param]:
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, x) -> ad.Tensor:
        h = ad.as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.tanh(h)
        return h

    @property
    def n_signs(self) -> int:
        return sum(l.n_in * l.n_out for l in self.layers)

    def sign_vector(self) -> np.ndarray:
        return np.concatenate([l.signs().reshape(-1) for l in self.layers])

    def side_vector(self) -> np.ndarray:
        """Biases then scales, layer by layer."""
        return np.concatenate([np.concatenate([l.bias.value, l.scale.value]) for l in self.layers])

    def load(self, signs: np.ndarray, side: np.ndarray) -> None:
        """Install transmitted signs (as +-1 latents) and side parameters."""
        so = po = 0
        for l in self.layers:
            n = l.n_in * l.n_out
            l.latent_w.value = signs[so:so + n].astype(np.float64).reshape(l.n_in, l.n_out)
            so += n
            l.bias.value = np.asarray(side[po:po + l.n_out], dtype=np.float64).copy()
            po += l.n_out
            l.scale.value = np.asarray(side[po:po + 1], dtype=np.float64).copy()
            po += 1

    @property
    def n_side(self) -> int:
        return sum(l.n_out + 1 for l in self.layers)


@dataclass
class BtcOutputs:
    dx_tilde: ad.Tensor  # (N,3)
    gamma_x: ad.Tensor   # (N,)
    gamma_f: ad.Tensor   # (N,)
    df_tilde: ad.Tensor  # (N,D)


@dataclass
class SymbolCounts:
    c_plus: int
    c_minus: int

    @property
    def total(self) -> int:
        return self.c_plus + self.c_minus


class BtcPair:
    def __init__(self, feat_dim: int, hidden: int = 48, rng: np.random.Generator | None = None,
                 out_scale: float = 0.1):
        self.feat_dim, self.hidden = feat_dim, hidden
        self.btc_x = BinarizedMLP([ENC_DIM, hidden, 5], rng, out_scale, name="btc_x")
        self.btc_f = BinarizedMLP([ENC_DIM, hidden, feat_dim], rng, out_scale, name="btc_f")

    def params(self) -> list[ad.Param]:
        return self.btc_x.params() + self.btc_f.params()

    def latent_weights(self) -> list[ad.Param]:
        return [l.latent_w for l in self.btc_x.layers + self.btc_f.layers]

    def clamp_scales(self) -> None:
        """Project layer scales back to positive values after an optimizer step."""
        for layer in self.btc_x.layers + self.btc_f.layers:
            np.maximum(layer.scale.value, SCALE_FLOOR, out=layer.scale.value)

    def round_to_f32(self) -> None:
        for layer in self.btc_x.layers + self.btc_f.layers:
            layer.bias.value = layer.bias.value.astype(np.float32).astype(np.float64)
            layer.scale.value = layer.scale.value.astype(np.float32).astype(np.float64)


def btc_forward(pair: BtcPair, x_prev, encoding: np.ndarray | None = None) -> BtcOutputs:
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if not np.all(np.isfinite(x_prev)):
        raise ad.NonFiniteError("non-finite anchor positions fed to BTC")
    enc = positional_encoding(x_prev) if encoding is None else encoding
    out = pair.btc_x(enc)
    dx = out[:, 0:3]
    gx = ad.tanh(out[:, 3]) * GAMMA_MAX
    gf = ad.tanh(out[:, 4]) * GAMMA_MAX
    df = pair.btc_f(enc)
    return BtcOutputs(dx, gx, gf, df)


def apply_updates(x_prev, f_prev, outs: BtcOutputs):
    """x_t = x + gamma_x * dx_tilde, f_t = f + gamma_f * df_tilde (tensors)."""
    x_t = ad.as_tensor(x_prev) + ad.reshape(outs.gamma_x, (-1, 1)) * outs.dx_tilde
    f_t = ad.as_tensor(f_prev) + ad.reshape(outs.gamma_f, (-1, 1)) * outs.df_tilde
    return x_t, f_t


def count_symbols(pair: BtcPair) -> SymbolCounts:
    plus = minus = 0
    for p in pair.latent_weights():
        n_plus = int(np.count_nonzero(p.value >= 0))
        plus += n_plus
        minus += p.size - n_plus
    return SymbolCounts(plus, minus)


def hard_rate(counts: SymbolCounts, p_b: float) -> float:
    """Bernoulli code length in bits of the sign stream."""
    return counts.c_plus * -np.log2(p_b) + counts.c_minus * -np.log2(1.0 - p_b)


def _check_p(p_b: float) -> None:
    if not (P_DELTA <= p_b <= 1.0 - P_DELTA):
        raise ValueError(f"p_b={p_b} outside [{P_DELTA}, {1 - P_DELTA}]")


def soft_rate(pair: BtcPair, p_b: float, tau: float = 1.0) -> ad.Tensor:
    """Differentiable relaxation of the sign-stream code length."""
    _check_p(p_b)
    bits_plus, bits_minus = -np.log2(p_b), -np.log2(1.0 - p_b)
    total = None
    for w in pair.latent_weights():
        s = ad.sigmoid(w * (1.0 / tau))
        term = (s * (bits_plus - bits_minus) + bits_minus).sum()
        total = term if total is None else total + term
    return total


def empirical_p(counts: SymbolCounts) -> float:
    p = counts.c_plus / max(counts.total, 1)
    return float(np.clip(p, P_DELTA, 1.0 - P_DELTA))
