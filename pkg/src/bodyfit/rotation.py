"""Axis-angle helpers: exponential map and its derivative."""

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotvec_to_matrix(r):
    """Rodrigues' formula; falls back to a first-order expansion near zero."""
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r)
    if angle < SMALL_ANGLE:
        return np.eye(3) + skew(r)
    k = skew(r / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotvec_to_matrix_with_grad(r):
    """Rotation matrix and its partial derivatives.

    Returns:
        (R, dR) where dR[i] = dR/dr_i, shape (3, 3, 3).
    """
    r = np.asarray(r, dtype=float)
    R = rotvec_to_matrix(r)
    theta2 = float(r @ r)
    basis = np.eye(3)
    dR = np.empty((3, 3, 3))
    if np.sqrt(theta2) < SMALL_ANGLE:
        for i in range(3):
            dR[i] = skew(basis[i])
        return R, dR
    # Gallego & Yezzi closed form for the derivative of the exponential map
    rx = skew(r)
    i_minus_r = np.eye(3) - R
    for i in range(3):
        dR[i] = (r[i] * rx + skew(np.cross(r, i_minus_r @ basis[i]))) @ R / theta2
    return R, dR


def matrix_to_rotvec(R):
    """Inverse exponential map onto the canonical range |r| <= pi."""
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * axis
    if np.pi - angle < 1e-6:
        # near pi: axis from the symmetric part
        S = (R + np.eye(3)) * 0.5
        i = int(np.argmax(np.diag(S)))
        v = S[:, i] / np.sqrt(max(S[i, i], 1e-300))
        return v * angle
    return axis * (angle / (2.0 * np.sin(angle)))


def batch_skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def batch_rotvec_to_matrix_with_grad(r):
    """Vectorized `rotvec_to_matrix_with_grad` over rows of r, shape (P, 3)."""
    r = np.asarray(r, dtype=float)
    theta2 = np.einsum("pi,pi->p", r, r)
    angle = np.sqrt(theta2)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    K = batch_skew(r / safe[:, None])
    sin = np.sin(angle)[:, None, None]
    cos = np.cos(angle)[:, None, None]
    R = np.eye(3) + sin * K + (1.0 - cos) * (K @ K)
    if small.any():
        R[small] = np.eye(3) + batch_skew(r[small])
    rx = batch_skew(r)
    i_minus_r = np.eye(3) - R
    # cols[p, :, i] = (I - R_p) e_i
    cross = np.cross(r[:, None, :], np.swapaxes(i_minus_r, 1, 2))     # (P, 3 basis, 3)
    dR = (r[:, :, None, None] * rx[:, None] + batch_skew(cross)) @ R[:, None]
    dR /= np.where(small, 1.0, theta2)[:, None, None, None]
    if small.any():
        dR[small] = batch_skew(np.eye(3))[None]
    return R, dR
