"""Dynamic anchors: attribute decoding (N_G) and activation masking (N_m)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .render import Gaussians

ATTRS_PER_GAUSSIAN = 14  # offset 3, color 3, rotation 4, scale 3, opacity 1
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class MLP:
    """Dense MLP with a hidden activation and a linear output layer."""

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 activation: str = "relu", name: str = "mlp", out_scale: float = 1.0):
        self.sizes = list(sizes)
        self.activation = activation
        self.name = name
        self.weights: list[ad.Param] = []
        self.biases: list[ad.Param] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            if i == len(sizes) - 2:
                bound *= out_scale
            w = rng.uniform(-bound, bound, (n_in, n_out)) if rng is not None else np.zeros((n_in, n_out))
            self.weights.append(ad.Param(w, f"{name}.w{i}"))
            self.biases.append(ad.Param(np.zeros(n_out), f"{name}.b{i}"))

    def params(self) -> list[ad.Param]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x, trainable: bool = True) -> ad.Tensor:
        h = ad.as_tensor(x)
        act = {"relu": ad.relu, "tanh": ad.tanh}[self.activation]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not trainable:
                w, b = ad.Tensor(w.value), ad.Tensor(b.value)
            h = h @ w + b
            if i < last:
                h = act(h)
        return h

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    @property
    def byte_size(self) -> int:
        return 4 * self.n_params

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes, new.activation, new.name = list(self.sizes), self.activation, self.name
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def to_bytes(self) -> bytes:
        return b"".join(p.value.astype("<f4").tobytes() for p in self.params())

    def load_bytes(self, data: bytes) -> None:
        off = 0
        for p in self.params():
            n = p.size * 4
            p.value = np.frombuffer(data[off:off + n], dtype="<f4").astype(np.float64).reshape(p.shape)
            off += n
        if off != len(data):
            raise ValueError(f"{self.name}: expected {off} bytes, got {len(data)}")

    def round_to_f32(self) -> None:
        """Adopt the values the wire format can carry."""
        for p in self.params():
            p.value = p.value.astype(np.float32).astype(np.float64)

    def state_bytes(self) -> bytes:
        return b"".join(p.value.tobytes() for p in self.params())


@dataclass
class AnchorSet:
    x: np.ndarray  # (N,3)
    f: np.ndarray  # (N,D)
    l: np.ndarray  # (N,3), positive

    def __post_init__(self):
        if np.any(self.l <= 0):
            raise ValueError("anchor scaling must be positive")

    def __len__(self):
        return self.x.shape[0]

    def copy(self) -> "AnchorSet":
        return AnchorSet(self.x.copy(), self.f.copy(), self.l.copy())

    def state_bytes(self) -> bytes:
        return self.x.tobytes() + self.f.tobytes() + self.l.tobytes()


class GaussianAttributeNet(MLP):
    """N_G: (feature, view direction) -> k Gaussians of attributes per anchor."""

    def __init__(self, feat_dim: int, k: int = 5, hidden: int = 64, s_base: float = 0.05,
                 rng: np.random.Generator | None = None):
        super().__init__([feat_dim + 3, hidden, hidden, k * ATTRS_PER_GAUSSIAN], rng,
                         activation="relu", name="ng")
        self.k = k
        self.s_base = s_base

    def copy(self) -> "GaussianAttributeNet":
        new = GaussianAttributeNet.__new__(GaussianAttributeNet)
        new.__dict__.update(MLP.copy(self).__dict__)
        new.k, new.s_base = self.k, self.s_base
        return new


class MaskNet(MLP):
    """N_m: (feature, position) -> scalar significance score."""

    def __init__(self, feat_dim: int, hidden: int = 16, rng: np.random.Generator | None = None):
        super().__init__([feat_dim + 3, hidden, 1], rng, activation="relu", name="nm")

    def copy(self) -> "MaskNet":
        new = MaskNet.__new__(MaskNet)
        new.__dict__.update(MLP.copy(self).__dict__)
        return new


@dataclass
class ActivationPartition:
    active: np.ndarray
    vanished: np.ndarray


def decode_anchors(x, f, l, ng: GaussianAttributeNet, d_c, trainable: bool = False) -> Gaussians:
    """Decode k Gaussians per anchor; output order is anchor-major."""
    x, f, l = ad.as_tensor(x), ad.as_tensor(f), ad.as_tensor(l)
    n, k = x.shape[0], ng.k
    d_c = np.asarray(d_c, dtype=np.float64)
    if abs(np.linalg.norm(d_c) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit-norm")
    bad = np.nonzero(~np.all(np.isfinite(f.value), axis=1))[0]
    if bad.size:
        raise ad.NonFiniteError(f"non-finite anchor features at anchors {bad[:5].tolist()}")
    inp = ad.concat([f, np.broadcast_to(d_c, (n, 3))], axis=1)
    try:
        raw = ng(inp, trainable=trainable)
    except ad.NonFiniteError as exc:
        with np.errstate(all="ignore"):
            h = inp.value
            for i, (w, b) in enumerate(zip(ng.weights, ng.biases)):
                h = h @ w.value + b.value
                if i < len(ng.weights) - 1:
                    h = np.maximum(h, 0.0)
        bad = np.nonzero(~np.all(np.isfinite(h), axis=1))[0]
        raise ad.NonFiniteError(f"N_G produced non-finite output at anchors {bad[:5].tolist()}") from exc
    raw = ad.reshape(raw, (n * k, ATTRS_PER_GAUSSIAN))
    rep = np.repeat(np.arange(n), k)
    offset = raw[:, 0:3]
    color = ad.sigmoid(raw[:, 3:6])
    rot = ad.normalize(raw[:, 6:10] + IDENTITY_QUAT, axis=-1)
    scale = ad.softplus(raw[:, 10:13]) * ng.s_base
    alpha = ad.sigmoid(raw[:, 13])
    mu = x[rep] + offset * l[rep]
    return Gaussians(mu, scale, rot, color, alpha)


def mask_scores(x, f, nm: MaskNet, trainable: bool = True) -> ad.Tensor:
    """m_x = N_m(f, x) for every anchor, shape (N,)."""
    out = nm(ad.concat([ad.as_tensor(f), ad.as_tensor(x)], axis=1), trainable=trainable)
    return ad.reshape(out, (-1,))


def gate_attributes(gauss: Gaussians, scores, eps_m: float, k: int):
    """Straight-through gating of scale and opacity.

    Returns the gated batch and a per-Gaussian bool array marking gated-off
    primitives (forward factor 0).
    """
    gate = ad.ste_gate(scores, eps_m)
    rep = np.repeat(np.arange(gate.shape[0]), k)
    g = gate[rep]
    scale = ad.as_tensor(gauss.scale) * ad.reshape(g, (-1, 1))
    alpha = ad.as_tensor(gauss.alpha) * g
    return Gaussians(gauss.mu, scale, gauss.rot, gauss.color, alpha), g.value == 0.0


def partition(scores, eps_m: float) -> ActivationPartition:
    s = ad._sigmoid(np.asarray(ad.as_tensor(scores).value, dtype=np.float64))
    active = np.nonzero(s > eps_m)[0]
    vanished = np.nonzero(~(s > eps_m))[0]
    return ActivationPartition(active, vanished)


def warm_start_mask(prev: MaskNet | None, feat_dim: int, hidden: int,
                    rng: np.random.Generator) -> MaskNet:
    """Copy the previous frame's mask net (fresh optimizer) or draw a new one."""
    if prev is None:
        return MaskNet(feat_dim, hidden, rng)
    return prev.copy()
