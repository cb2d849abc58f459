"""Synthetic scenes with known ground truth, and partial-image keypoint helpers."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .camera import Camera, project
from .energy import Keypoint, Observation
from .errors import DegenerateInputError, InvalidArgument
from .io import read_json, read_mask, write_json, write_pgm
from .model import JOINT, BodyParams, default_virtual_joints, forward
from .raster import Silhouette, rasterize_hard

DEFAULT_SIZE = 512
POSE_RANGE = 0.7
DEPTH_RANGE = (2.0, 5.0)
EXTRAPOLATION_SIGMA = 2.0


def make_rng(seed, stream=0):
    """Counter-based generator; ``stream`` selects an independent substream."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


@dataclass
class NoiseSpec:
    keypoint_sigma: float = 2.0
    torso_bias: dict = field(default_factory=dict)   # keypoint id -> (u, v) in triangle units
    dilation_radius: float = 2.0
    dropout_prob: float = 0.05

    def __post_init__(self):
        if self.keypoint_sigma < 0 or self.dilation_radius < 0:
            raise InvalidArgument("noise sigma and dilation radius must be nonnegative")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise InvalidArgument("dropout probability must lie in [0, 1]")
        self.torso_bias = {int(k): (float(v[0]), float(v[1])) for k, v in self.torso_bias.items()}
        targets = default_virtual_joints().targets
        for k in self.torso_bias:
            if k not in targets:
                raise InvalidArgument(f"torso bias given for non-torso keypoint {k}")

    @classmethod
    def zero(cls):
        return cls(0.0, {}, 0.0, 0.0)

    def to_dict(self):
        return {"keypoint_sigma": self.keypoint_sigma,
                "torso_bias": {str(k): list(v) for k, v in sorted(self.torso_bias.items())},
                "dilation_radius": self.dilation_radius, "dropout_prob": self.dropout_prob}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["keypoint_sigma"]), dict(d.get("torso_bias", {})),
                   float(d["dilation_radius"]), float(d["dropout_prob"]))


@dataclass
class Scene:
    gt_params: BodyParams
    camera: Camera
    observation: Observation
    gt_silhouette: Silhouette
    seed: int
    noise: NoiseSpec
    truncation: Optional[int] = None
    partial_fraction: Optional[float] = None
    init_params: Optional[BodyParams] = None
    extrapolated: list = field(default_factory=list)


def planted_torso_point(joints, target, uv):
    """Point j_t + u (j_a - j_t) + v (j_b - j_t) in the target's virtual-joint triangle."""
    cfg = default_virtual_joints()
    e = cfg.entries[cfg.targets[target]]
    others = [j for j in e.triangle if j != target]
    jt = joints[target]
    return jt + uv[0] * (joints[others[0]] - jt) + uv[1] * (joints[others[1]] - jt)


def planted_weights(target, uv):
    """Barycentric weights over the target's triangle that reproduce a planted offset."""
    cfg = default_virtual_joints()
    e = cfg.entries[cfg.targets[target]]
    others = [j for j in e.triangle if j != target]
    w = {target: 1.0 - uv[0] - uv[1], others[0]: uv[0], others[1]: uv[1]}
    return tuple(w[j] for j in e.triangle)


def disk(radius):
    r = int(np.floor(radius))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= radius * radius


def dilate(mask, radius):
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius))


def sample_params(model, rng):
    beta = np.clip(rng.standard_normal(model.shape_count), -2.0, 2.0)
    lo = model.joint_limits[..., 0] * POSE_RANGE
    hi = model.joint_limits[..., 1] * POSE_RANGE
    theta = rng.uniform(lo, hi)
    theta[0] = 0.0
    yaw = rng.uniform(-0.3, 0.3)
    depth = rng.uniform(*DEPTH_RANGE)
    shift = rng.uniform(-0.05, 0.05, 2)
    # the rest mesh stands on y = 0; lift its mid-height onto the optical axis
    t = np.array([shift[0] * depth, 0.87 + shift[1], depth])
    return BodyParams(theta, beta, np.array([0.0, yaw, 0.0]), t)


def predict_init(gt, rng, pose_sigma=0.1, trans_sigma=0.02):
    """Stand-in for a learned regressor: noisy pose and translation, mean shape."""
    theta = gt.theta + rng.normal(0.0, pose_sigma, gt.theta.shape)
    rot = gt.trans_rot + rng.normal(0.0, pose_sigma / 2, 3)
    depth = gt.trans_t[2]
    t = gt.trans_t + rng.normal(0.0, trans_sigma, 3) * np.array([1.0, 1.0, depth])
    return BodyParams(theta, np.zeros_like(gt.beta), rot, t)


def hide_cropped_pose(model, init, hidden):
    """Rest rotation for bones the predictor cannot see: those ending at a cropped joint.

    A hidden joint's own rotation and its parent's (which aims the bone into
    it) are reset; the root's is kept since it moves the whole body.
    """
    out = init.copy()
    for j in hidden:
        out.theta[j] = 0.0
        parent = model.parent[j]
        if parent > 0:
            out.theta[parent] = 0.0
    return out


def perturb_params(params, rng, pose=0.05, beta=0.2):
    """Rotate every joint by ``pose`` radians about a random axis and jitter beta."""
    axes = rng.standard_normal(params.theta.shape)
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    out = params.copy()
    out.theta = params.theta + pose * axes
    out.beta = params.beta + rng.normal(0.0, beta, params.beta.shape)
    return out


def generate_scene(model, seed, noise=None, camera=None, partial_fraction=None):
    """Sample a body, render it and derive noisy observations, all from ``seed``.

    Args:
        noise: NoiseSpec; defaults to the standard low-noise spec.
        camera: defaults to a square DEFAULT_SIZE image.
        partial_fraction: keep only the top fraction of rows as the valid region.
    """
    if partial_fraction is not None and not 0.0 < partial_fraction <= 1.0:
        raise InvalidArgument("partial fraction must lie in (0, 1]")
    noise = noise if noise is not None else NoiseSpec()
    camera = camera if camera is not None else Camera.default(DEFAULT_SIZE, DEFAULT_SIZE)
    rng = make_rng(seed)
    gt = sample_params(model, rng)
    V, J = forward(model, gt)
    points = J.copy()
    for target, uv in noise.torso_bias.items():
        points[target] = planted_torso_point(J, target, uv)
    uv = project(camera, points)
    uv = uv + noise.keypoint_sigma * rng.standard_normal(uv.shape)
    dropped = rng.uniform(size=len(uv)) < noise.dropout_prob
    conf = np.where(dropped, 0.0, 1.0)
    gt_mask = rasterize_hard(camera, V, model.faces)
    observed = dilate(gt_mask.values, noise.dilation_radius)
    valid = (0, 0, camera.width, camera.height)
    crop = None
    if partial_fraction is not None and partial_fraction < 1.0:
        crop = int(round(partial_fraction * camera.height))
        valid = (0, 0, camera.width, crop)
        observed[crop:] = False
        conf = np.where(uv[:, 1] > crop - 0.5, 0.0, conf)
    kps = [Keypoint(i, float(uv[i, 0]), float(uv[i, 1]), float(conf[i])) for i in range(len(uv))]
    init = predict_init(gt, rng)
    extrapolated = []
    if crop is not None:
        hidden = [k.id for k in kps if k.confidence == 0 and k.y > crop - 0.5]
        init = hide_cropped_pose(model, init, hidden)
        true_uv = project(camera, J)
        jitter = EXTRAPOLATION_SIGMA * rng.standard_normal((len(true_uv), 2))
        extrapolated = [Keypoint(i, float(true_uv[i, 0] + jitter[i, 0]),
                                 float(true_uv[i, 1] + jitter[i, 1]), 1.0) for i in hidden]
    obs = Observation(kps, camera, Silhouette.hard(observed), valid)
    return Scene(gt, camera, obs, gt_mask, int(seed), noise, crop, partial_fraction, init, extrapolated)


def similarity_align(reference, observed):
    """Least-squares isotropic scale s and translation t with s * observed + t ~ reference."""
    ref = np.asarray(reference, dtype=float).reshape(-1, 2)
    obs = np.asarray(observed, dtype=float).reshape(-1, 2)
    if len(ref) != len(obs) or len(obs) < 2:
        raise InvalidArgument("need at least two matching point pairs")
    oc = obs - obs.mean(axis=0)
    rc = ref - ref.mean(axis=0)
    var = float(np.sum(oc * oc))
    if var <= 1e-24 * max(1.0, float(np.sum(obs * obs))):
        raise DegenerateInputError("observed keypoints are all coincident")
    s = float(np.sum(oc * rc)) / var
    t = ref.mean(axis=0) - s * obs.mean(axis=0)
    return s, t


def merge_keypoints(visible, extrapolated):
    """Disjoint union of confident visible keypoints and extrapolated ones, sorted by id.

    Visible entries with zero confidence are superseded by an extrapolated entry
    of the same id when one exists.
    """
    vis = [Keypoint(*k) for k in visible]
    ext = [Keypoint(*k) for k in extrapolated]
    ext_ids = [k.id for k in ext]
    if len(set(ext_ids)) != len(ext_ids):
        raise InvalidArgument("extrapolated keypoints repeat an id")
    clash = {k.id for k in vis if k.confidence > 0} & set(ext_ids)
    if clash:
        raise InvalidArgument(f"keypoint ids {sorted(clash)} are both visible and extrapolated")
    kept = [k for k in vis if k.id not in ext_ids]
    return sorted(kept + ext, key=lambda k: k.id)


def keypoints_to_json(kps):
    return [{"id": k.id, "x": k.x, "y": k.y, "c": k.confidence} for k in kps]


def keypoints_from_json(items):
    return [Keypoint(int(d["id"]), float(d["x"]), float(d["y"]), float(d["c"])) for d in items]


def save_scene(scene, directory):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "seed": scene.seed,
        "camera": scene.camera.to_dict(),
        "gt_params": scene.gt_params.to_dict(),
        "init_params": scene.init_params.to_dict() if scene.init_params is not None else None,
        "noise": scene.noise.to_dict(),
        "valid_region": list(scene.observation.valid_region),
        "truncation": scene.truncation,
        "partial_fraction": scene.partial_fraction,
    }
    write_json(os.path.join(directory, "scene.json"), meta)
    write_json(os.path.join(directory, "keypoints.json"), keypoints_to_json(scene.observation.keypoints))
    write_pgm(os.path.join(directory, "mask.pgm"), scene.observation.silhouette.as_bool())
    write_pgm(os.path.join(directory, "gt_mask.pgm"), scene.gt_silhouette.as_bool())
    if scene.extrapolated:
        write_json(os.path.join(directory, "extrapolated.json"), keypoints_to_json(scene.extrapolated))


def load_scene(directory, require_mask=True):
    """Read a scene directory. Missing files raise FileNotFoundError naming the path."""
    def path(name):
        return os.path.join(directory, name)

    for name in ("scene.json", "keypoints.json") + (("mask.pgm",) if require_mask else ()):
        if not os.path.exists(path(name)):
            raise FileNotFoundError(path(name))
    meta = read_json(path("scene.json"))
    camera = Camera.from_dict(meta["camera"])
    kps = keypoints_from_json(read_json(path("keypoints.json")))
    sil = Silhouette.hard(read_mask(path("mask.pgm"))) if os.path.exists(path("mask.pgm")) else None
    gt_sil = Silhouette.hard(read_mask(path("gt_mask.pgm"))) if os.path.exists(path("gt_mask.pgm")) else None
    obs = Observation(kps, camera, sil, tuple(meta["valid_region"]))
    init = BodyParams.from_dict(meta["init_params"]) if meta.get("init_params") else None
    extrapolated = []
    if os.path.exists(path("extrapolated.json")):
        extrapolated = keypoints_from_json(read_json(path("extrapolated.json")))
    return Scene(BodyParams.from_dict(meta["gt_params"]), camera, obs, gt_sil, int(meta["seed"]),
                 NoiseSpec.from_dict(meta["noise"]), meta.get("truncation"), meta.get("partial_fraction"),
                 init, extrapolated)


TORSO_IDS = (JOINT["l_hip"], JOINT["r_hip"], JOINT["l_shoulder"], JOINT["r_shoulder"])
