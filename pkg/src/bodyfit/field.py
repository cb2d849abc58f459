"""Exact Euclidean distance transforms and asymmetric distance fields."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateMaskError, EmptyMaskError, InvalidArgument

DEFAULT_LAMBDA_OUTER = 1.0
DEFAULT_LAMBDA_INNER = 0.1


@numba.njit(cache=True)
def _envelope_1d(f, out, v, z):
    """Lower envelope of parabolas (q - p)^2 + f[p] over finite f[p].

    Writes the squared distance into ``out``; infinite where no finite sample.
    """
    n = f.shape[0]
    k = -1
    for q in range(n):
        if not np.isfinite(f[q]):
            continue
        fq = f[q] + q * q
        while k >= 0:
            p = v[k]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            z[k] = -np.inf
        else:
            p = v[k - 1]
            z[k] = (fq - (f[p] + p * p)) / (2.0 * (q - p))
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        p = v[j]
        out[q] = (q - p) * (q - p) + f[p]


@numba.njit(cache=True)
def _squared_edt(fg):
    h, w = fg.shape
    n = max(h, w)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1)
    col = np.empty(h)
    col_out = np.empty(h)
    tmp = np.empty((h, w))
    for x in range(w):
        for y in range(h):
            col[y] = 0.0 if fg[y, x] else np.inf
        _envelope_1d(col, col_out, v, z)
        for y in range(h):
            tmp[y, x] = col_out[y]
    out = np.empty((h, w))
    row_out = np.empty(w)
    for y in range(h):
        _envelope_1d(tmp[y].copy(), row_out, v, z)
        for x in range(w):
            out[y, x] = row_out[x]
    return out


def squared_distance_transform(mask):
    """Squared Euclidean distance from each pixel center to the nearest foreground center."""
    fg = np.ascontiguousarray(np.asarray(mask) >= 0.5)
    if fg.ndim != 2:
        raise InvalidArgument("mask must be 2D")
    if not fg.any():
        raise EmptyMaskError("distance transform of an empty mask is undefined")
    return _squared_edt(fg)


def distance_transform(mask):
    """Exact Euclidean distance transform (pixels), zero on foreground.

    Args:
        mask: binary grid or hard ``Silhouette``.
    """
    values = getattr(mask, "values", mask)
    return np.sqrt(squared_distance_transform(values))


@dataclass(frozen=True, eq=False)
class AdfField:
    values: np.ndarray
    lambda_o: float
    lambda_i: float
    source: str = ""


def asymmetric_field(mask, lambda_o=DEFAULT_LAMBDA_OUTER, lambda_i=DEFAULT_LAMBDA_INNER, source=""):
    """Outer distance-to-silhouette weighted by lambda_o plus inner distance-to-background by lambda_i."""
    if lambda_o < 0 or lambda_i < 0:
        raise InvalidArgument("field weights must be nonnegative")
    fg = np.asarray(getattr(mask, "values", mask)) >= 0.5
    if fg.all() or not fg.any():
        raise DegenerateMaskError("mask needs both foreground and background pixels")
    outer = distance_transform(fg)
    inner = distance_transform(~fg)
    values = lambda_o * outer * (~fg) + lambda_i * inner * fg
    values.setflags(write=False)
    return AdfField(values, float(lambda_o), float(lambda_i), source)


def adf_energy(boundary, field):
    """Sum of boundary * field; the gradient w.r.t. the boundary is the field itself."""
    boundary = np.asarray(boundary, dtype=float)
    values = field.values if isinstance(field, AdfField) else np.asarray(field, dtype=float)
    if boundary.shape != values.shape:
        raise InvalidArgument(f"boundary {boundary.shape} and field {values.shape} differ in shape")
    return float(np.sum(boundary * values)), values
