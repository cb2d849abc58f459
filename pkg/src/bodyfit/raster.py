"""Silhouette rasterization: soft (differentiable) and hard, plus Sobel edges.

Soft coverage aggregates per-triangle sigmoid coverages with a
product-of-complements union. Per-triangle work is limited to a bounding box
grown by ``CUTOFF * tau`` pixels. Over the last ``TAPER`` units before the
cutoff the log-complement is blended to zero with a smoothstep, so the image
stays C1 in the vertex positions and is exact everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import project_with_jacobian
from .errors import InvalidArgument

CUTOFF = 10.0
TAPER = 2.0
DEFAULT_TAU = 1.0
DEGENERATE_AREA = 1e-12

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class Silhouette:
    values: np.ndarray          # (height, width), row-major
    kind: str = "soft"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgument("silhouette must be a 2D grid")
        if self.kind not in ("soft", "hard"):
            raise InvalidArgument(f"unknown silhouette kind {self.kind!r}")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @classmethod
    def hard(cls, mask):
        return cls(np.asarray(mask, dtype=bool).astype(float), "hard")

    def as_bool(self):
        return self.values >= 0.5


def _triangle_pixel_pairs(tri, width, height, margin):
    """Enumerate (triangle, pixel) pairs inside each grown bounding box."""
    lo = tri.min(axis=1) - margin
    hi = tri.max(axis=1) + margin
    x0 = np.maximum(np.ceil(lo[:, 0]), 0).astype(np.int64)
    y0 = np.maximum(np.ceil(lo[:, 1]), 0).astype(np.int64)
    x1 = np.minimum(np.floor(hi[:, 0]), width - 1).astype(np.int64)
    y1 = np.minimum(np.floor(hi[:, 1]), height - 1).astype(np.int64)
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)
    counts = w * h
    total = int(counts.sum())
    t = np.repeat(np.arange(len(tri)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(starts, counts)
    wt = w[t]
    px = x0[t] + local % np.maximum(wt, 1)
    py = y0[t] + local // np.maximum(wt, 1)
    return t, px, py


@numba.njit(cache=True)
def _soft_kernel(tri, faces, width, height, tau):
    """Per (triangle, pixel) signed distances, log-complements and their slopes.

    Returns flat pair arrays (pixel, edge start vertex, edge end vertex, edge
    parameter u, unit direction, d(logc)/d(distance)) and the per-pixel sum of
    log-complements.
    """
    nf = tri.shape[0]
    margin = CUTOFF * tau
    bound = 0
    for f in range(nf):
        x0 = max(int(np.ceil(min(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0]) - margin)), 0)
        x1 = min(int(np.floor(max(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0]) + margin)), width - 1)
        y0 = max(int(np.ceil(min(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1]) - margin)), 0)
        y1 = min(int(np.floor(max(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1]) + margin)), height - 1)
        if x1 >= x0 and y1 >= y0:
            bound += (x1 - x0 + 1) * (y1 - y0 + 1)
    pix = np.empty(bound, np.int64)
    vp = np.empty(bound, np.int64)
    vq = np.empty(bound, np.int64)
    uu = np.empty(bound)
    direc = np.empty((bound, 2))
    dlogc = np.empty(bound)
    total = np.zeros(width * height)
    m = 0
    ex = np.empty(3)
    ey = np.empty(3)
    il2 = np.empty(3)
    cut2 = margin * margin
    for f in range(nf):
        for i in range(3):
            j = (i + 1) % 3
            ex[i] = tri[f, j, 0] - tri[f, i, 0]
            ey[i] = tri[f, j, 1] - tri[f, i, 1]
            il2[i] = 1.0 / max(ex[i] * ex[i] + ey[i] * ey[i], 1e-300)
        area2 = ex[0] * ey[1] - ey[0] * ex[1]
        if abs(area2) <= DEGENERATE_AREA:
            continue
        orient = 1.0 if area2 > 0 else -1.0
        x0 = max(int(np.ceil(min(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0]) - margin)), 0)
        x1 = min(int(np.floor(max(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0]) + margin)), width - 1)
        y0 = max(int(np.ceil(min(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1]) - margin)), 0)
        y1 = min(int(np.floor(max(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1]) + margin)), height - 1)
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                best = np.inf
                bk = 0
                bu = 0.0
                bdx = 0.0
                bdy = 0.0
                inside = True
                for i in range(3):
                    wx = px - tri[f, i, 0]
                    wy = py - tri[f, i, 1]
                    if (ex[i] * wy - ey[i] * wx) * orient < 0.0:
                        inside = False
                    u = (wx * ex[i] + wy * ey[i]) * il2[i]
                    if u < 0.0:
                        u = 0.0
                    elif u > 1.0:
                        u = 1.0
                    dx = wx - u * ex[i]
                    dy = wy - u * ey[i]
                    d2 = dx * dx + dy * dy
                    if d2 < best:
                        best = d2
                        bk = i
                        bu = u
                        bdx = dx
                        bdy = dy
                if not inside and best >= cut2:
                    continue
                dist = np.sqrt(best)
                sgn = 1.0 if inside else -1.0
                x = sgn * dist / tau
                if x <= -CUTOFF:
                    continue
                if dist > 1e-12:
                    dirx = sgn * bdx / dist
                    diry = sgn * bdy / dist
                else:
                    ln = np.sqrt(ex[bk] * ex[bk] + ey[bk] * ey[bk])
                    dirx = -orient * ey[bk] / ln
                    diry = orient * ex[bk] / ln
                ez = np.exp(-abs(x))
                if x > 0:
                    sp = x + np.log1p(ez)
                    sig = 1.0 / (1.0 + ez)
                else:
                    sp = np.log1p(ez)
                    sig = ez / (1.0 + ez)
                if x < TAPER - CUTOFF:
                    t = (x + CUTOFF) / TAPER
                    blend = t * t * (3.0 - 2.0 * t)
                    slope = sig * blend + sp * 6.0 * t * (1.0 - t) / TAPER
                    sp *= blend
                else:
                    slope = sig
                p = py * width + px
                total[p] += sp
                pix[m] = p
                vp[m] = faces[f, bk]
                vq[m] = faces[f, (bk + 1) % 3]
                uu[m] = bu
                direc[m, 0] = dirx
                direc[m, 1] = diry
                dlogc[m] = slope / tau
                m += 1
    return pix[:m], vp[:m], vq[:m], uu[:m], direc[:m], dlogc[:m], total


@numba.njit(cache=True)
def _soft_values(tri, width, height, tau):
    """Per-pixel sum of log-complements only; same arithmetic as ``_soft_kernel``."""
    nf = tri.shape[0]
    margin = CUTOFF * tau
    total = np.zeros(width * height)
    ex = np.empty(3)
    ey = np.empty(3)
    il2 = np.empty(3)
    cut2 = margin * margin
    for f in range(nf):
        for i in range(3):
            j = (i + 1) % 3
            ex[i] = tri[f, j, 0] - tri[f, i, 0]
            ey[i] = tri[f, j, 1] - tri[f, i, 1]
            il2[i] = 1.0 / max(ex[i] * ex[i] + ey[i] * ey[i], 1e-300)
        area2 = ex[0] * ey[1] - ey[0] * ex[1]
        if abs(area2) <= DEGENERATE_AREA:
            continue
        orient = 1.0 if area2 > 0 else -1.0
        x0 = max(int(np.ceil(min(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0]) - margin)), 0)
        x1 = min(int(np.floor(max(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0]) + margin)), width - 1)
        y0 = max(int(np.ceil(min(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1]) - margin)), 0)
        y1 = min(int(np.floor(max(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1]) + margin)), height - 1)
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                best = np.inf
                inside = True
                for i in range(3):
                    wx = px - tri[f, i, 0]
                    wy = py - tri[f, i, 1]
                    if (ex[i] * wy - ey[i] * wx) * orient < 0.0:
                        inside = False
                    u = (wx * ex[i] + wy * ey[i]) * il2[i]
                    if u < 0.0:
                        u = 0.0
                    elif u > 1.0:
                        u = 1.0
                    dx = wx - u * ex[i]
                    dy = wy - u * ey[i]
                    d2 = dx * dx + dy * dy
                    if d2 < best:
                        best = d2
                if not inside and best >= cut2:
                    continue
                dist = np.sqrt(best)
                x = dist / tau if inside else -dist / tau
                if x <= -CUTOFF:
                    continue
                ez = np.exp(-abs(x))
                sp = x + np.log1p(ez) if x > 0 else np.log1p(ez)
                if x < TAPER - CUTOFF:
                    t = (x + CUTOFF) / TAPER
                    sp *= t * t * (3.0 - 2.0 * t)
                total[py * width + px] += sp
    return total


@numba.njit(cache=True)
def _soft_backward(g, complement, pix, vp, vq, uu, direc, dlogc, n):
    out = np.zeros((n, 2))
    for m in range(pix.shape[0]):
        p = pix[m]
        w = g[p] * complement[p] * dlogc[m]
        if w == 0.0:
            continue
        a = -w * (1.0 - uu[m])
        b = -w * uu[m]
        out[vp[m], 0] += a * direc[m, 0]
        out[vp[m], 1] += a * direc[m, 1]
        out[vq[m], 0] += b * direc[m, 0]
        out[vq[m], 1] += b * direc[m, 1]
    return out


class SoftRaster:
    """Soft silhouette of projected triangles with reverse and forward derivatives.

    Args:
        points: projected vertex positions, shape (N, 2), pixels.
        faces: triangle vertex indices, shape (F, 3).
        width, height: image size.
        tau: sigmoid softness in pixels.
    """

    def __init__(self, points, faces, width, height, tau=DEFAULT_TAU):
        if not tau > 0:
            raise InvalidArgument("tau must be positive")
        self.points = np.asarray(points, dtype=float)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.width = int(width)
        self.height = int(height)
        self.tau = float(tau)
        self._run()

    def _run(self):
        tri = self.points[self.faces] if len(self.faces) else np.zeros((0, 3, 2))
        (self._pix, self._vp, self._vq, self._u, self._dir,
         self._dlogc, total) = _soft_kernel(tri, self.faces, self.width, self.height, self.tau)
        self._complement = np.exp(-total)
        self.values = (1.0 - self._complement).reshape(self.height, self.width)

    @property
    def silhouette(self):
        return Silhouette(self.values, "soft")

    def backward(self, grad_values):
        """dL/dpoints, shape (N, 2), from dL/dvalues, shape (height, width)."""
        g = np.ascontiguousarray(grad_values, dtype=float).ravel()
        return _soft_backward(g, self._complement, self._pix, self._vp, self._vq,
                              self._u, self._dir, self._dlogc, len(self.points))

    def jvp(self, tangent):
        """Directional derivative of the image for a point perturbation (N, 2)."""
        tangent = np.asarray(tangent, dtype=float)
        npix = self.width * self.height
        if self._pix.size == 0:
            return np.zeros((self.height, self.width))
        dd = -np.einsum("mi,mi->m", self._dir,
                        (1.0 - self._u)[:, None] * tangent[self._vp] + self._u[:, None] * tangent[self._vq])
        dS = np.bincount(self._pix, weights=self._dlogc * dd, minlength=npix) * self._complement
        return dS.reshape(self.height, self.width)


class SoftRender:
    """Soft silhouette of a 3D mesh with a reverse pass to vertex positions."""

    def __init__(self, camera, vertices, faces, tau=DEFAULT_TAU):
        self.uv, self.jac = project_with_jacobian(camera, vertices)
        self.raster = SoftRaster(self.uv, faces, camera.width, camera.height, tau)
        self.values = self.raster.values

    def backward(self, grad_values):
        g2 = self.raster.backward(grad_values)
        return np.einsum("ni,nij->nj", g2, self.jac)


def soft_values(points, faces, width, height, tau=DEFAULT_TAU):
    """Soft coverage grid without the bookkeeping needed for derivatives."""
    if not tau > 0:
        raise InvalidArgument("tau must be positive")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    tri = np.asarray(points, dtype=float)[faces] if len(faces) else np.zeros((0, 3, 2))
    total = _soft_values(tri, int(width), int(height), float(tau))
    return (1.0 - np.exp(-total)).reshape(int(height), int(width))


def rasterize_soft(camera, vertices, faces, tau=DEFAULT_TAU):
    uv, _ = project_with_jacobian(camera, vertices)
    return Silhouette(soft_values(uv, faces, camera.width, camera.height, tau), "soft")


def _is_top_left(dx, dy):
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize_points_hard(points, faces, width, height):
    """Binary coverage of pixel centers by 2D triangles, top-left fill rule."""
    mask = np.zeros(width * height, dtype=bool)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return mask.reshape(height, width)
    tri = np.asarray(points, dtype=float)[faces]
    e = np.roll(tri, -1, axis=1) - tri
    area2 = e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]
    keep = np.abs(area2) > 0
    tri = tri[keep]
    flip = area2[keep] < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    e = np.roll(tri, -1, axis=1) - tri
    t, px, py = _triangle_pixel_pairs(tri, width, height, 0.0)
    p = np.stack([px, py], axis=1).astype(float)
    A = tri[t]
    E = e[t]
    w = p[:, None, :] - A
    cross = E[..., 0] * w[..., 1] - E[..., 1] * w[..., 0]
    tl = _is_top_left(E[..., 0], E[..., 1])
    inside = np.all((cross > 0) | ((cross == 0) & tl), axis=1)
    mask[(py[inside] * width + px[inside])] = True
    return mask.reshape(height, width)


def rasterize_hard(camera, vertices, faces):
    uv, _ = project_with_jacobian(camera, vertices)
    return Silhouette.hard(rasterize_points_hard(uv, faces, camera.width, camera.height))


def _sobel_x(values):
    """Correlation with SOBEL_X under zero padding: difference first, then smooth."""
    P = np.pad(values, 1)
    dx = P[:, 2:] - P[:, :-2]
    return dx[:-2] + 2.0 * dx[1:-1] + dx[2:]


def _sobel_x_adjoint(grad):
    h, w = grad.shape
    t = np.zeros((h + 2, w))
    t[:-2] += grad
    t[1:-1] += 2.0 * grad
    t[2:] += grad
    P = np.zeros((h + 2, w + 2))
    P[:, 2:] += t
    P[:, :-2] -= t
    return P[1:-1, 1:-1]


class Boundary:
    """Sobel edge magnitude of a grid with its reverse pass.

    Differencing before smoothing keeps constant regions exactly zero.
    """

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        self.gx = _sobel_x(values)
        self.gy = _sobel_x(values.T).T
        self.values = np.hypot(self.gx, self.gy)

    def backward(self, grad_values):
        # zero subgradient where the magnitude vanishes
        nz = self.values > 0
        inv = np.where(nz, 1.0 / np.where(nz, self.values, 1.0), 0.0)
        g = np.asarray(grad_values, dtype=float) * inv
        return _sobel_x_adjoint(g * self.gx) + _sobel_x_adjoint((g * self.gy).T).T


def boundary(sil):
    values = sil.values if isinstance(sil, Silhouette) else sil
    return Boundary(values).values
