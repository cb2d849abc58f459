"""Pinhole camera; integer pixel coordinates address pixel centers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BehindCameraError, InvalidArgument


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("image size must be at least 1x1")

    @classmethod
    def default(cls, width, height):
        """Fixed camera used when nothing is known about the capture."""
        f = float(max(width, height))
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def _check_depth(points):
    z = points[..., 2]
    bad = np.flatnonzero(~(z > 0))
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(z.ravel()[bad[0]]))


def project(camera, points):
    """Project camera-frame points (N, 3) to pixels (N, 2).

    Results may fall outside the image.
    """
    points = np.asarray(points, dtype=float)
    _check_depth(points)
    z = points[:, 2]
    return np.stack([camera.fx * points[:, 0] / z + camera.cx,
                     camera.fy * points[:, 1] / z + camera.cy], axis=1)


def project_with_jacobian(camera, points):
    """Projected pixels and per-point 2x3 Jacobians, shape (N, 2, 3)."""
    points = np.asarray(points, dtype=float)
    uv = project(camera, points)
    x, y, z = points.T
    inv_z = 1.0 / z
    jac = np.zeros((len(points), 2, 3))
    jac[:, 0, 0] = camera.fx * inv_z
    jac[:, 0, 2] = -camera.fx * x * inv_z ** 2
    jac[:, 1, 1] = camera.fy * inv_z
    jac[:, 1, 2] = -camera.fy * y * inv_z ** 2
    return uv, jac
