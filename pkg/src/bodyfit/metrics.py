"""Evaluation metrics and the virtual-joint calibration search."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .camera import project
from .energy import model_keypoints
from .errors import DegenerateInputError, InvalidArgument
from .model import default_virtual_joints, forward, tpose_vertices
from .raster import rasterize_hard


@dataclass(frozen=True)
class MetricReport:
    pa_v2v: float
    pve_t_sc: float
    iou: float
    keypoint_rmse: float
    indicator: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in ("pa_v2v", "pve_t_sc", "iou", "keypoint_rmse", "indicator")})


def umeyama_align(source, target):
    """Similarity (s, R, t) minimizing sum |s R x_i + t - y_i|^2 with det R = +1."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidArgument("source and target must be matching (N, 3) arrays")
    if len(src) < 3:
        raise InvalidArgument("alignment needs at least 3 points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var = float(np.sum(xs * xs)) / len(src)
    if var <= 1e-30:
        raise DegenerateInputError("source points are coincident")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    E = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        E[2, 2] = -1.0
    R = U @ E @ Vt
    s = float(np.trace(np.diag(D) @ E)) / var
    t = mu_d - s * R @ mu_s
    return s, R, t


def pa_v2v(est_vertices, gt_vertices):
    """Mean vertex distance after similarity-aligning the estimate to the ground truth."""
    est = np.asarray(est_vertices, dtype=float)
    gt = np.asarray(gt_vertices, dtype=float)
    if est.shape != gt.shape:
        raise InvalidArgument(f"vertex counts differ: {est.shape} vs {gt.shape}")
    s, R, t = umeyama_align(est, gt)
    aligned = s * est @ R.T + t
    return float(np.mean(np.linalg.norm(aligned - gt, axis=1)))


def _height(V):
    return float(V[:, 1].max() - V[:, 1].min())


def pve_t_sc(model, est_beta, gt_beta):
    """Mean vertex distance between T-posed shapes after matching the estimate's height.

    The estimate is scaled about its pelvis, which is where the ground truth's
    pelvis sits as well once both are in rest pose.
    """
    est_beta = np.asarray(est_beta, dtype=float)
    gt_beta = np.asarray(gt_beta, dtype=float)
    if est_beta.shape != (model.shape_count,) or gt_beta.shape != (model.shape_count,):
        raise InvalidArgument("beta lengths must match the model")
    Ve = tpose_vertices(model, est_beta)
    Vg = tpose_vertices(model, gt_beta)
    pe = model.rest_joints[0] + model.joint_blend_dirs[:, 0].T @ est_beta
    pg = model.rest_joints[0] + model.joint_blend_dirs[:, 0].T @ gt_beta
    scale = _height(Vg) / _height(Ve)
    return float(np.mean(np.linalg.norm((Ve - pe) * scale - (Vg - pg), axis=1)))


def iou(a, b):
    """Intersection over union of two hard masks; 1 when both are empty."""
    a = np.asarray(getattr(a, "values", a)) >= 0.5
    b = np.asarray(getattr(b, "values", b)) >= 0.5
    if a.shape != b.shape:
        raise InvalidArgument(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def indicator(keypoint_rmse, iou_value):
    if not 0.0 <= iou_value <= 1.0 or keypoint_rmse < 0:
        raise InvalidArgument("need iou in [0, 1] and a nonnegative rmse")
    # same as (1 - iou) * rmse, but exact for round inputs such as iou = 0.8
    return keypoint_rmse - iou_value * keypoint_rmse


def keypoint_rmse(camera, joints, keypoints, vjconfig=None):
    """RMSE in pixels between projected model keypoints and confident detections.

    Model keypoints are the regular joints, with virtual joints substituted for
    their targets when ``vjconfig`` is given.
    """
    kps = [k for k in keypoints if k.confidence > 0]
    if not kps:
        return 0.0
    ids = [k.id for k in kps]
    X, _ = model_keypoints(joints, ids, vjconfig, use_virtual_joints=vjconfig is not None)
    uv = project(camera, X)
    ref = np.array([(k.x, k.y) for k in kps])
    return float(np.sqrt(np.mean(np.sum((uv - ref) ** 2, axis=1))))


def evaluate_fit(model, scene, params, vjconfig=None):
    """Full metric report of ``params`` against a synthetic scene's ground truth."""
    V, J = forward(model, params)
    Vg, _ = forward(model, scene.gt_params)
    rendered = rasterize_hard(scene.camera, V, model.faces)
    ref = scene.gt_silhouette if scene.gt_silhouette is not None else scene.observation.silhouette
    overlap = iou(rendered, ref)
    rmse = keypoint_rmse(scene.camera, J, scene.observation.keypoints, vjconfig)
    return MetricReport(pa_v2v(V, Vg), pve_t_sc(model, params.beta, scene.gt_params.beta),
                        overlap, rmse, indicator(rmse, overlap))


def scene_indicator(model, scene, params, vjconfig=None):
    """Calibration score: (1 - IoU against the observed mask) x keypoint RMSE."""
    V, J = forward(model, params)
    rendered = rasterize_hard(scene.camera, V, model.faces)
    overlap = iou(rendered, scene.observation.silhouette)
    return indicator(keypoint_rmse(scene.camera, J, scene.observation.keypoints, vjconfig), overlap)


def barycentric_grid(lo=-0.5, hi=1.5, step=0.25):
    """Candidates (b1, b2, 1 - b1 - b2) with b1, b2 on a regular grid."""
    n = int(round((hi - lo) / step)) + 1
    vals = lo + step * np.arange(n)
    return [(float(b1), float(b2), float(1.0 - b1 - b2)) for b1 in vals for b2 in vals]


def _refine_grid(center, step):
    b1, b2 = center[0], center[1]
    return [(b1 + i * step, b2 + j * step, 1.0 - (b1 + i * step) - (b2 + j * step))
            for i in (-1, 0, 1) for j in (-1, 0, 1)]


def calibrate_virtual_joints(model, scenes, search_grid=None, fit=None, levels=2, step=0.25,
                             base=None):
    """Pick barycentric weights per torso virtual joint by the mean indicator.

    Joints are searched one at a time in table order, each with the others
    held at their current best. The second level searches the 3x3 neighborhood
    of the coarse winner at half the step. Ties go to the lowest grid index.

    Args:
        scenes: synthetic scenes whose observations carry the detector bias.
        search_grid: coarse candidates; defaults to ``barycentric_grid()``.
        fit: callable (model, vjconfig, scene) -> BodyParams running the
            keypoint-only stage; defaults to ``calibration_fit``.
        levels: 1 for the coarse grid only, 2 to add the refinement pass.
        step: coarse grid spacing, used to size the refinement.

    Returns:
        (VirtualJointConfig, history) where history lists (entry, candidate, score).
    """
    if not scenes:
        raise InvalidArgument("calibration needs at least one scene")
    grid = barycentric_grid() if search_grid is None else [tuple(map(float, c)) for c in search_grid]
    if not grid:
        raise InvalidArgument("calibration grid is empty")
    for c in grid:
        if len(c) != 3 or abs(sum(c) - 1.0) > 1e-9:
            raise InvalidArgument(f"candidate {c} is not a barycentric triple")
    fit = fit if fit is not None else calibration_fit
    config = base if base is not None else default_virtual_joints()
    history = []

    def score(cfg):
        return float(np.mean([scene_indicator(model, s, fit(model, cfg, s), cfg) for s in scenes]))

    for index in range(len(config.entries)):
        candidates = grid
        for level in range(levels):
            scores = [score(config.with_weights(index, c)) for c in candidates]
            best = int(np.argmin(scores))
            history += [(index, c, s) for c, s in zip(candidates, scores)]
            config = config.with_weights(index, candidates[best])
            if len(grid) == 1:
                break
            candidates = _refine_grid(candidates[best], step / 2 ** (level + 1))
    return config, history


def calibration_fit(model, vjconfig, scene, iterations=30):
    """Keypoint-only fit with virtual joints enabled, from the scene's predicted init."""
    from .energy import TermWeights
    from .optim import FitConfig, StageConfig, fit_staged
    stage = StageConfig(TermWeights(lambda_k=1.0, w_pose=1.0, w_shape=1.0), iterations,
                        enable_virtual_joints=True)
    params, _ = fit_staged(model, vjconfig, scene.observation, FitConfig((stage,)), scene.init_params)
    return params
