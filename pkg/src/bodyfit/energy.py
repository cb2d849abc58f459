"""Fitting energies with analytic gradients w.r.t. the flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .camera import Camera, project_with_jacobian
from .errors import InvalidArgument
from .field import AdfField
from .model import BodyParams, Posed, build_template_model
from .camera import project
from .raster import CUTOFF, DEFAULT_TAU, Boundary, Silhouette, SoftRaster, soft_values

DEFAULT_GM_SIGMA = 100.0


@dataclass(frozen=True)
class TermWeights:
    lambda_k: float = 1.0
    lambda_m: float = 0.0
    lambda_d: float = 0.0
    w_pose: float = 1.0
    w_shape: float = 1.0
    gm_sigma: float = DEFAULT_GM_SIGMA

    def __post_init__(self):
        for name in ("lambda_k", "lambda_m", "lambda_d", "w_pose", "w_shape"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be nonnegative")
        if not self.gm_sigma > 0:
            raise InvalidArgument("gm_sigma must be positive")

    def scaled(self, prior=1.0):
        return replace(self, w_pose=self.w_pose * prior, w_shape=self.w_shape * prior)


class Keypoint(NamedTuple):
    id: int
    x: float
    y: float
    confidence: float


@dataclass
class Observation:
    """Image evidence: 2D keypoints, optional silhouette, camera and valid region.

    ``valid_region`` is a half-open pixel rectangle (x0, y0, x1, y1).
    """

    keypoints: list
    camera: Camera
    silhouette: Optional[Silhouette] = None
    valid_region: Optional[tuple] = None

    def __post_init__(self):
        self.keypoints = sorted((Keypoint(int(k[0]), float(k[1]), float(k[2]), float(k[3]))
                                 for k in self.keypoints), key=lambda k: k.id)
        for k in self.keypoints:
            if not 0.0 <= k.confidence <= 1.0:
                raise InvalidArgument(f"keypoint {k.id} confidence {k.confidence} outside [0, 1]")
        if self.valid_region is None:
            self.valid_region = (0, 0, self.camera.width, self.camera.height)
        self.valid_region = tuple(int(v) for v in self.valid_region)

    @property
    def ids(self):
        return np.array([k.id for k in self.keypoints], dtype=np.int64)

    @property
    def points(self):
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=float).reshape(-1, 2)

    @property
    def confidences(self):
        return np.array([k.confidence for k in self.keypoints], dtype=float)

    def valid_mask(self):
        x0, y0, x1, y1 = self.valid_region
        mask = np.zeros((self.camera.height, self.camera.width), dtype=bool)
        mask[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
        return mask

    def with_keypoints(self, keypoints):
        return replace(self, keypoints=list(keypoints))


def geman_mcclure(residual, sigma):
    """Geman-McClure penalty sigma^2 e^2 / (sigma^2 + e^2) and its derivative in e."""
    e = np.asarray(residual, dtype=float)
    s2 = sigma * sigma
    den = s2 + e * e
    return s2 * e * e / den, 2.0 * s2 * s2 * e / (den * den)


def model_keypoints(joints, ids, vjconfig=None, use_virtual_joints=True):
    """3D points matched to keypoint ids and the (K, P) linear map producing them."""
    joints = np.asarray(joints)
    P = len(joints)
    lookup = vjconfig.targets if (vjconfig is not None and use_virtual_joints) else {}
    M = np.zeros((len(ids), P))
    for row, kid in enumerate(ids):
        if kid in lookup:
            e = vjconfig.entries[lookup[kid]]
            for j, b in zip(e.triangle, e.weights):
                M[row, j] += b
        elif 0 <= kid < P:
            M[row, kid] = 1.0
        else:
            raise InvalidArgument(f"keypoint id {kid} maps to no joint or virtual joint")
    return M @ joints, M


def _keypoint_term(posed, vjconfig, obs, weights, use_virtual_joints):
    """Value and dE/djoints of the robust reprojection energy."""
    P = posed.model.joint_count
    if not obs.keypoints:
        return 0.0, np.zeros((P, 3))
    conf = obs.confidences
    X, M = model_keypoints(posed.joints, obs.ids, vjconfig, use_virtual_joints)
    active = conf > 0
    if not active.any():
        return 0.0, np.zeros((P, 3))
    uv, jac = project_with_jacobian(obs.camera, X[active])
    r = uv - obs.points[active]
    e2 = np.einsum("ki,ki->k", r, r)
    s2 = weights.gm_sigma ** 2
    den = s2 + e2
    c = conf[active]
    value = float(np.sum(c * s2 * e2 / den))
    g_uv = (c * 2.0 * s2 * s2 / (den * den))[:, None] * r
    gX = np.einsum("ki,kij->kj", g_uv, jac)
    return value, M[active].T @ gX


def _render_window(uv, camera, tau):
    """Pixel box (x0, y0, x1, y1), half-open, outside which the soft render and its edges vanish."""
    pad = CUTOFF * tau + 2.0
    lo = np.floor(uv.min(axis=0) - pad)
    hi = np.ceil(uv.max(axis=0) + pad)
    x0 = int(min(max(lo[0], 0), camera.width))
    y0 = int(min(max(lo[1], 0), camera.height))
    x1 = int(min(max(hi[0] + 1, x0), camera.width))
    y1 = int(min(max(hi[1] + 1, y0), camera.height))
    return x0, y0, x1, y1


def _check_render_inputs(obs, field_, lambda_d):
    if obs.silhouette is None:
        raise InvalidArgument("observation has no silhouette")
    shape = (obs.camera.height, obs.camera.width)
    if obs.silhouette.values.shape != shape:
        raise InvalidArgument("silhouette size does not match the camera")
    if not lambda_d:
        return None
    if field_ is None:
        raise InvalidArgument("ADF term requested without a distance field")
    F = field_.values if isinstance(field_, AdfField) else np.asarray(field_, dtype=float)
    if F.shape != shape:
        raise InvalidArgument("distance field size does not match the camera")
    return F


def _window_terms(S_hat, S, omega, F, box, lambda_m, lambda_d):
    """Unweighted mask and ADF values over the full image from a render cropped to ``box``."""
    x0, y0, x1, y1 = box
    Sw = S[y0:y1, x0:x1]
    ow = omega[y0:y1, x0:x1]
    terms = {"mask": 0.0, "adf": 0.0}
    edge = None
    if lambda_m:
        # outside the box the render is zero, so the L1 difference there is the observed mask
        outside = float(np.sum(S[omega])) - float(np.sum(Sw[ow]))
        terms["mask"] = float(np.sum(np.abs(S_hat - Sw)[ow])) + outside
    if lambda_d:
        edge = Boundary(S_hat)
        terms["adf"] = float(np.sum((edge.values * F[y0:y1, x0:x1])[ow]))
    return terms, edge


def _render_terms(posed, obs, field_, tau, lambda_m, lambda_d):
    """Weighted mask + ADF energy and dE/dvertices from one soft render."""
    F = _check_render_inputs(obs, field_, lambda_d)
    cam = obs.camera
    uv, jac = project_with_jacobian(cam, posed.vertices)
    box = _render_window(uv, cam, tau)
    x0, y0, x1, y1 = box
    raster = SoftRaster(uv - np.array([x0, y0], dtype=float), posed.model.faces, x1 - x0, y1 - y0, tau)
    S = obs.silhouette.values
    omega = obs.valid_mask()
    S_hat = raster.values
    terms, edge = _window_terms(S_hat, S, omega, F, box, lambda_m, lambda_d)
    grad_S = np.zeros_like(S_hat)
    ow = omega[y0:y1, x0:x1]
    if lambda_m:
        grad_S += lambda_m * np.sign(S_hat - S[y0:y1, x0:x1]) * ow
    if lambda_d:
        grad_S += lambda_d * edge.backward(F[y0:y1, x0:x1] * ow)
    value = lambda_m * terms["mask"] + lambda_d * terms["adf"]
    gV = np.einsum("ni,nij->nj", raster.backward(grad_S), jac)
    return value, gV, terms


def _prior_term(params, model, weights):
    sl_theta = params.theta[1:]
    grad_theta = np.zeros_like(params.theta)
    value = weights.w_pose * float(np.sum(sl_theta ** 2))
    grad_theta[1:] = 2.0 * weights.w_pose * sl_theta
    lo = model.joint_limits[1:, :, 0]
    hi = model.joint_limits[1:, :, 1]
    over = np.maximum(sl_theta - hi, 0.0) - np.maximum(lo - sl_theta, 0.0)
    value += weights.w_pose * float(np.sum(over ** 2))
    grad_theta[1:] += 2.0 * weights.w_pose * over
    value += weights.w_shape * float(params.beta @ params.beta)
    grad_beta = 2.0 * weights.w_shape * params.beta
    grad = np.zeros(model.param_count)
    grad[:grad_theta.size] = grad_theta.ravel()
    grad[grad_theta.size:grad_theta.size + params.beta.size] = grad_beta
    return value, grad


def keypoint_energy(params, model, vjconfig, obs, weights, use_virtual_joints=True):
    """Confidence-weighted Geman-McClure reprojection energy and gradient."""
    posed = Posed(model, params, need_vertices=False)
    value, gJ = _keypoint_term(posed, vjconfig, obs, weights, use_virtual_joints)
    return value, posed.backward(grad_joints=gJ)


def mask_energy(params, model, obs, tau=DEFAULT_TAU):
    """L1 difference between observed and soft-rendered silhouettes over the valid region."""
    posed = Posed(model, params)
    value, gV, _ = _render_terms(posed, obs, None, tau, 1.0, 0.0)
    return value, posed.backward(grad_vertices=gV)


def adf_term(params, model, obs, field, tau=DEFAULT_TAU):
    """Soft-render boundary weighted by the precomputed distance field."""
    posed = Posed(model, params)
    value, gV, _ = _render_terms(posed, obs, field, tau, 0.0, 1.0)
    return value, posed.backward(grad_vertices=gV)


def prior_energy(params, weights, model=None):
    """Pull-to-rest on non-root joints, squared-hinge joint limits, and shape magnitude."""
    if model is None:
        model = _default_model()
    return _prior_term(params, model, weights)


_MODEL_CACHE = {}


def _default_model():
    if "m" not in _MODEL_CACHE:
        _MODEL_CACHE["m"] = build_template_model()
    return _MODEL_CACHE["m"]


@dataclass
class EnergyEval:
    value: float
    grad: np.ndarray
    terms: dict = field(default_factory=dict)


def evaluate(params, model, vjconfig, obs, field_, weights, tau=DEFAULT_TAU,
             use_virtual_joints=True, use_silhouette=True):
    """Total energy, gradient and the unweighted value of each term."""
    use_render = (use_silhouette and obs.silhouette is not None
                  and (weights.lambda_m > 0 or weights.lambda_d > 0))
    posed = Posed(model, params, need_vertices=use_render)
    terms = {"keypoints": 0.0, "mask": 0.0, "adf": 0.0}
    value = 0.0
    gJ = None
    gV = None
    if weights.lambda_k > 0:
        kv, gJ = _keypoint_term(posed, vjconfig, obs, weights, use_virtual_joints)
        terms["keypoints"] = kv
        value += weights.lambda_k * kv
        gJ = weights.lambda_k * gJ
    if use_render:
        rv, gV, rterms = _render_terms(posed, obs, field_, tau, weights.lambda_m, weights.lambda_d)
        terms.update(rterms)
        value += rv
    grad = posed.backward(grad_vertices=gV, grad_joints=gJ)
    pv, pg = _prior_term(params, model, weights)
    terms["prior"] = pv
    return EnergyEval(value + pv, grad + pg, terms)


def energy_terms(params, model, vjconfig, obs, field_, weights, tau=DEFAULT_TAU,
                 use_virtual_joints=True, use_silhouette=True, render_cache=None):
    """Values only: the same terms as ``evaluate`` without any derivative bookkeeping.

    Args:
        render_cache: optional dict reused across calls with the same obs, field
            and weights; silhouette terms are looked up by the projected vertices.
    """
    use_render = (use_silhouette and obs.silhouette is not None
                  and (weights.lambda_m > 0 or weights.lambda_d > 0))
    posed = Posed(model, params, need_vertices=use_render)
    terms = {"keypoints": 0.0, "mask": 0.0, "adf": 0.0}
    if weights.lambda_k > 0 and obs.keypoints:
        conf = obs.confidences
        active = conf > 0
        if active.any():
            X, _ = model_keypoints(posed.joints, obs.ids, vjconfig, use_virtual_joints)
            r = project(obs.camera, X[active]) - obs.points[active]
            rho, _ = geman_mcclure(np.sqrt(np.einsum("ki,ki->k", r, r)), weights.gm_sigma)
            terms["keypoints"] = float(np.sum(conf[active] * rho))
    if use_render:
        F = _check_render_inputs(obs, field_, weights.lambda_d)
        uv = project(obs.camera, posed.vertices)
        key = uv.tobytes()
        rterms = render_cache.get(key) if render_cache is not None else None
        if rterms is None:
            box = _render_window(uv, obs.camera, tau)
            x0, y0, x1, y1 = box
            S_hat = soft_values(uv - np.array([x0, y0], dtype=float), model.faces, x1 - x0, y1 - y0, tau)
            rterms, _ = _window_terms(S_hat, obs.silhouette.values, obs.valid_mask(), F, box,
                                      weights.lambda_m, weights.lambda_d)
            if render_cache is not None:
                render_cache[key] = rterms
        terms.update(rterms)
    terms["prior"] = _prior_term(params, model, weights)[0]
    terms["total"] = (weights.lambda_k * terms["keypoints"] + weights.lambda_m * terms["mask"]
                      + weights.lambda_d * terms["adf"] + terms["prior"])
    return terms


def total_energy(params, model, vjconfig, obs, field_, weights, tau=DEFAULT_TAU,
                 use_virtual_joints=True, use_silhouette=True):
    ev = evaluate(params, model, vjconfig, obs, field_, weights, tau, use_virtual_joints, use_silhouette)
    return ev.value, ev.grad


def as_params(x, model):
    return BodyParams.from_vector(x, model.joint_count, model.shape_count)
