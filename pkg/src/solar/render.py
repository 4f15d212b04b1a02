"""Differentiable Gaussian splatting: pinhole projection + per-pixel compositing.

Projection is expressed with autodiff ops; the compositing core is a pair of
numba kernels (forward and exact reverse sweep) that iterate Gaussians in
depth order per pixel with fixed summation order, so results are
bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import autodiff as ad

COV_EPS = 0.3
W_MIN = 1.0 / 255.0
SUPPORT_SIGMA = 3.0
NEAR = 0.01


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        return self.R[2].copy()

    def view_dir(self, centroid) -> np.ndarray:
        """Unit vector from the scene centroid toward the camera center."""
        d = self.center - np.asarray(centroid, dtype=np.float64)
        return d / np.linalg.norm(d)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        t = -R @ eye
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, R, t, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.R.reshape(-1).tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.array(d["R"], dtype=np.float64).reshape(3, 3),
                   np.array(d["t"], dtype=np.float64), int(d["width"]), int(d["height"]))


@dataclass
class GaussianPrimitive:
    mu: np.ndarray
    s: np.ndarray
    r: np.ndarray
    c: np.ndarray
    alpha: float


@dataclass
class Gaussians:
    """Batch of primitives; fields are arrays or autodiff tensors."""

    mu: object
    scale: object
    rot: object
    color: object
    alpha: object

    def __len__(self):
        return ad.as_tensor(self.mu).shape[0]

    @classmethod
    def from_primitives(cls, prims) -> "Gaussians":
        prims = list(prims)
        if not prims:
            z = np.zeros((0, 3))
            return cls(z, z.copy(), np.zeros((0, 4)), z.copy(), np.zeros(0))
        return cls(np.array([p.mu for p in prims], dtype=np.float64),
                   np.array([p.s for p in prims], dtype=np.float64),
                   np.array([p.r for p in prims], dtype=np.float64),
                   np.array([p.c for p in prims], dtype=np.float64),
                   np.array([p.alpha for p in prims], dtype=np.float64))


@dataclass
class RasterSettings:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w_min: float = W_MIN
    support_sigma: float = SUPPORT_SIGMA
    cov_eps: float = COV_EPS
    near: float = NEAR


# -- projection -------------------------------------------------------------

def quat_to_rotmat(q: ad.Tensor) -> ad.Tensor:
    """(G,4) unit quaternions (w,x,y,z) -> (G,3,3)."""
    w, x, y, z = (q[:, i] for i in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return ad.stack([ad.stack(r, axis=-1) for r in rows], axis=-2)


def covariance3d(scale, rot) -> ad.Tensor:
    R = quat_to_rotmat(ad.normalize(ad.as_tensor(rot), axis=-1))
    M = R * ad.reshape(ad.as_tensor(scale), (-1, 1, 3))
    return ad.einsum("gij,gkj->gik", M, M)


@dataclass
class Projection:
    means2d: ad.Tensor   # (G,2)
    conics: ad.Tensor    # (G,3) inverse 2D covariance (a, b, c)
    cov2d: np.ndarray    # (G,3) (xx, xy, yy) incl. floor
    depth: np.ndarray    # (G,)
    index: np.ndarray    # indices into the input batch (visible only)


def project_batch(mu, scale, rot, cam: Camera, settings: RasterSettings | None = None) -> Projection:
    """Project Gaussians; behind-camera ones are culled (absent from ``index``)."""
    settings = settings or RasterSettings()
    mu, scale, rot = ad.as_tensor(mu), ad.as_tensor(scale), ad.as_tensor(rot)
    depth_all = mu.value @ cam.R[2] + cam.t[2]
    index = np.nonzero(depth_all > settings.near)[0]
    if index.size < mu.shape[0]:
        mu, scale, rot = mu[index], scale[index], rot[index]
    sigma = covariance3d(scale, rot)
    pc = mu @ cam.R.T + cam.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / z
    zero = np.zeros(index.size)
    J = ad.stack([
        ad.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z * inv_z], axis=-1),
        ad.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], axis=-1),
    ], axis=-2)
    T = ad.einsum("gij,jk->gik", J, cam.R)
    cov = ad.einsum("gik,glk->gil", ad.einsum("gij,gjk->gik", T, sigma), T)
    a = cov[:, 0, 0] + settings.cov_eps
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + settings.cov_eps
    det = a * c - b * b
    conics = ad.stack([c / det, -b / det, a / det], axis=-1)
    means2d = ad.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=-1)
    cov2d = np.stack([a.value, b.value, c.value], axis=-1)
    return Projection(means2d, conics, cov2d, z.value.copy(), index)


def project(g: GaussianPrimitive, cam: Camera, settings: RasterSettings | None = None):
    """Single-primitive projection: (mu2d, cov2d 2x2, depth) or None if culled."""
    p = project_batch(np.asarray(g.mu, float)[None], np.asarray(g.s, float)[None],
                      np.asarray(g.r, float)[None], cam, settings)
    if p.index.size == 0:
        return None
    a, b, c = p.cov2d[0]
    return p.means2d.value[0].copy(), np.array([[a, b], [b, c]]), float(p.depth[0])


def eval_gaussian_2d(mu2d, cov2d, p) -> float:
    d = np.asarray(p, float) - np.asarray(mu2d, float)
    (a, b), (_, c) = np.asarray(cov2d, float)
    det = a * c - b * b
    q = (c * d[0] * d[0] - 2 * b * d[0] * d[1] + a * d[1] * d[1]) / det
    return float(np.exp(-0.5 * q))


# -- compositing kernels ------------------------------------------------------

@numba.njit(cache=True)
def _raster_forward(means, conics, opac, colors, radii, order, probe, H, W, bg, w_min):
    img = np.empty((H, W, 3))
    for py in range(H):
        for px in range(W):
            T = 1.0
            r = 0.0
            g_ = 0.0
            b_ = 0.0
            for k in range(order.shape[0]):
                i = order[k]
                if probe[i]:
                    continue
                dx = px - means[i, 0]
                if abs(dx) > radii[i, 0]:
                    continue
                dy = py - means[i, 1]
                if abs(dy) > radii[i, 1]:
                    continue
                power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                w = opac[i] * np.exp(power)
                if w < w_min:
                    continue
                r += colors[i, 0] * w * T
                g_ += colors[i, 1] * w * T
                b_ += colors[i, 2] * w * T
                T = T * (1.0 - w)
            img[py, px, 0] = r + bg[0] * T
            img[py, px, 1] = g_ + bg[1] * T
            img[py, px, 2] = b_ + bg[2] * T
    return img


@numba.njit(cache=True)
def _raster_backward(means, conics, opac, colors, radii, order, probe, H, W, bg, w_min, dimg):
    G = means.shape[0]
    d_means = np.zeros((G, 2))
    d_conics = np.zeros((G, 3))
    d_opac = np.zeros(G)
    d_colors = np.zeros((G, 3))
    n = order.shape[0]
    idx = np.empty(n, np.int64)
    ws = np.empty(n)
    gs = np.empty(n)
    Ts = np.empty(n)
    for py in range(H):
        for px in range(W):
            T = 1.0
            cnt = 0
            for k in range(n):
                i = order[k]
                dx = px - means[i, 0]
                if abs(dx) > radii[i, 0]:
                    continue
                dy = py - means[i, 1]
                if abs(dy) > radii[i, 1]:
                    continue
                power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                gval = np.exp(power)
                if probe[i]:
                    if gval < w_min:
                        continue
                    idx[cnt] = i
                    ws[cnt] = -1.0
                    gs[cnt] = gval
                    Ts[cnt] = T
                    cnt += 1
                    continue
                w = opac[i] * gval
                if w < w_min:
                    continue
                idx[cnt] = i
                ws[cnt] = w
                gs[cnt] = gval
                Ts[cnt] = T
                cnt += 1
                T = T * (1.0 - w)
            d0 = dimg[py, px, 0]
            d1 = dimg[py, px, 1]
            d2 = dimg[py, px, 2]
            R0 = bg[0]
            R1 = bg[1]
            R2 = bg[2]
            for k in range(cnt - 1, -1, -1):
                i = idx[k]
                Tk = Ts[k]
                gval = gs[k]
                if ws[k] < 0.0:
                    # gated-off primitive: derivative of the composite at opacity 0
                    d_opac[i] += gval * Tk * ((colors[i, 0] - R0) * d0 + (colors[i, 1] - R1) * d1
                                              + (colors[i, 2] - R2) * d2)
                    continue
                w = ws[k]
                d_colors[i, 0] += w * Tk * d0
                d_colors[i, 1] += w * Tk * d1
                d_colors[i, 2] += w * Tk * d2
                dw = Tk * ((colors[i, 0] - R0) * d0 + (colors[i, 1] - R1) * d1 + (colors[i, 2] - R2) * d2)
                R0 = colors[i, 0] * w + (1.0 - w) * R0
                R1 = colors[i, 1] * w + (1.0 - w) * R1
                R2 = colors[i, 2] * w + (1.0 - w) * R2
                d_opac[i] += dw * gval
                dpower = dw * opac[i] * gval
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                d_means[i, 0] += dpower * (conics[i, 0] * dx + conics[i, 1] * dy)
                d_means[i, 1] += dpower * (conics[i, 1] * dx + conics[i, 2] * dy)
                d_conics[i, 0] += dpower * (-0.5 * dx * dx)
                d_conics[i, 1] += dpower * (-dx * dy)
                d_conics[i, 2] += dpower * (-0.5 * dy * dy)
    return d_means, d_conics, d_opac, d_colors


def rasterize(means2d, conics, opacity, colors, depth, radii, probe, width, height,
              settings: RasterSettings) -> ad.Tensor:
    """Composite projected Gaussians into an (H,W,3) image tensor.

    ``probe`` marks gated-off primitives: they never contribute in the
    forward pass, but receive the opacity gradient of the un-culled composite
    at zero opacity so a mask can re-open them.
    """
    means2d, conics, opacity, colors = (ad.as_tensor(t) for t in (means2d, conics, opacity, colors))
    order = np.argsort(depth, kind="stable").astype(np.int64)
    bg = np.asarray(settings.background, dtype=np.float64)
    args = (np.ascontiguousarray(means2d.value), np.ascontiguousarray(conics.value),
            np.ascontiguousarray(opacity.value), np.ascontiguousarray(colors.value),
            np.ascontiguousarray(radii), order, np.ascontiguousarray(probe, dtype=np.bool_),
            int(height), int(width), bg, float(settings.w_min))
    img = _raster_forward(*args)

    def backward(g):
        return _raster_backward(*args, np.ascontiguousarray(g))

    return ad.custom(img, (means2d, conics, opacity, colors), backward, "rasterize")


def render_tensor(gauss: Gaussians, cam: Camera, settings: RasterSettings | None = None,
                  probe: np.ndarray | None = None, probe_scale: np.ndarray | None = None) -> ad.Tensor:
    """Differentiable render of a Gaussian batch (fields may be tensors).

    ``probe_scale`` optionally gives the footprint at which probe primitives
    measure their opacity gradient (they add nothing to the image either way).
    """
    settings = settings or RasterSettings()
    n = len(gauss)
    if n == 0:
        return ad.Tensor(np.broadcast_to(settings.background, (cam.height, cam.width, 3)).copy())
    scale = gauss.scale
    if probe is not None and probe_scale is not None and np.any(probe):
        pm = np.asarray(probe, np.float64)[:, None]
        scale = ad.as_tensor(scale) * (1.0 - pm) + np.asarray(probe_scale, np.float64) * pm
    proj = project_batch(gauss.mu, scale, gauss.rot, cam, settings)
    idx = proj.index
    color = ad.as_tensor(gauss.color)
    alpha = ad.as_tensor(gauss.alpha)
    if idx.size < n:
        color, alpha = color[idx], alpha[idx]
    radii = settings.support_sigma * np.sqrt(proj.cov2d[:, [0, 2]])
    pr = np.zeros(idx.size, dtype=bool) if probe is None else np.asarray(probe, bool)[idx]
    return rasterize(proj.means2d, proj.conics, alpha, color, proj.depth, radii, pr,
                     cam.width, cam.height, settings)


def render(gaussians, cam: Camera, settings: RasterSettings | None = None) -> np.ndarray:
    """Render a list of primitives or a batch to an (H,W,3) float array."""
    if not isinstance(gaussians, Gaussians):
        gaussians = Gaussians.from_primitives(gaussians)
    plain = Gaussians(*(ad.as_tensor(v).value for v in
                        (gaussians.mu, gaussians.scale, gaussians.rot, gaussians.color, gaussians.alpha)))
    return render_tensor(plain, cam, settings).value


def render_backward(gaussians, cam: Camera, dL_dimage: np.ndarray,
                    settings: RasterSettings | None = None) -> dict[str, np.ndarray]:
    """Gradients of <dL_dimage, render(gaussians)> w.r.t. every attribute."""
    if not isinstance(gaussians, Gaussians):
        gaussians = Gaussians.from_primitives(gaussians)
    params = {k: ad.Param(ad.as_tensor(getattr(gaussians, k)).value.copy(), k)
              for k in ("mu", "scale", "rot", "color", "alpha")}
    img = render_tensor(Gaussians(**params), cam, settings)
    loss = (img * np.asarray(dL_dimage, dtype=np.float64)).sum()
    ad.backward(loss)
    return {k: p.grad for k, p in params.items()}
