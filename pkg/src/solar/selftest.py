"""Finite-difference and round-trip checks runnable without pytest."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def gradcheck(loss_fn, params: list[ad.Param], h: float = 1e-5, rtol: float = 1e-4,
              atol: float = 1e-7, max_coords: int | None = None, rng=None) -> float:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    Returns the worst relative error over coordinates with |grad| above 1e-6;
    raises AssertionError past tolerance.
    """
    for p in params:
        p.zero_grad()
    ad.backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().value)
            flat[i] = old - h
            down = float(loss_fn().value)
            flat[i] = old
            num = (up - down) / (2 * h)
            a = g.reshape(-1)[i]
            err = abs(a - num)
            scale = max(abs(a), abs(num))
            rel = err / scale if scale > 0 else 0.0
            if err > atol and rel > rtol:
                raise AssertionError(f"{p.name}[{i}]: analytic {a:.10g} vs numeric {num:.10g} "
                                     f"(rel {rel:.2e})")
            if scale > 1e-6:
                worst = max(worst, rel)
    for p in params:
        p.zero_grad()
    return worst


def _check_mlp(rng):
    from .anchors import GaussianAttributeNet, decode_anchors
    ng = GaussianAttributeNet(4, k=2, hidden=6, rng=rng)
    x, f = rng.normal(size=(3, 3)), rng.normal(size=(3, 4))
    l = rng.uniform(0.5, 1.5, (3, 3))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    w = rng.normal(size=(6, 14))

    def loss():
        g = decode_anchors(x, f, l, ng, d, trainable=True)
        parts = [g.mu, g.scale, g.rot, g.color, ad.reshape(g.alpha, (-1, 1))]
        return (ad.concat(parts, axis=1) * w).sum()

    return gradcheck(loss, ng.params())


def _check_render(rng):
    from .render import Camera, Gaussians, RasterSettings, render_tensor
    cam = Camera.look_at([0, -3, 0.5], [0, 0, 0], [0, 0, 1], 20.0, 20.0, 12, 12)
    n = 4
    params = [ad.Param(rng.uniform(-0.4, 0.4, (n, 3)), "mu"), ad.Param(rng.uniform(0.15, 0.3, (n, 3)), "scale"),
              ad.Param(rng.normal(size=(n, 4)), "rot"), ad.Param(rng.uniform(0.1, 0.9, (n, 3)), "color"),
              ad.Param(rng.uniform(0.3, 0.9, n), "alpha")]
    target = rng.uniform(size=(12, 12, 3))
    settings = RasterSettings(w_min=0.0, support_sigma=50.0)

    def loss():
        mu, s, r, c, a = params
        img = render_tensor(Gaussians(mu, s, ad.normalize(r), c, a), cam, settings)
        return ((img - target) ** 2).sum()

    return gradcheck(loss, params)


def _check_codec(rng):
    from .codec.rangecoder import BernoulliModel, arith_decode, arith_encode
    for p in (0.1, 0.5, 0.9):
        bits = np.where(rng.uniform(size=5000) < p, 1, -1)
        m = BernoulliModel.from_probability(p)
        if not np.array_equal(arith_decode(arith_encode(bits, m), bits.size, m), bits):
            raise AssertionError(f"range coder round trip failed at p={p}")
    return 0.0


CHECKS = {"N_G gradients": _check_mlp, "rasterizer gradients": _check_render,
          "range coder round trip": _check_codec}


def run_all(emit=print, seed: int = 0) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            worst = fn(np.random.default_rng(seed))
            emit(f"PASS {name} (worst rel err {worst:.1e})")
        except AssertionError as exc:
            ok = False
            emit(f"FAIL {name}: {exc}")
    return ok
