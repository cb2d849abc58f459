"""Procedural articulated capsule body with linear blendshapes and LBS.

The body lives in a camera-aligned frame: +x is the subject's left (image
right for a subject facing the camera), +y points down, +z points away from
the camera. The subject faces -z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .rotation import batch_rotvec_to_matrix_with_grad, rotvec_to_matrix, rotvec_to_matrix_with_grad

JOINT_NAMES = (
    "pelvis", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
JOINT = {name: i for i, name in enumerate(JOINT_NAMES)}
PARENTS = (-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14)
NUM_JOINTS = 16
NUM_BETAS = 4
SEGMENTS = 8
BLEND_SPAN = 0.3

# (x, height above floor) in meters; mirrored for the right side.
_REST_LAYOUT = {
    "pelvis": (0.0, 0.95), "chest": (0.0, 1.25), "neck": (0.0, 1.50), "head": (0.0, 1.62),
    "l_shoulder": (0.17, 1.44), "l_elbow": (0.45, 1.44), "l_wrist": (0.70, 1.44),
    "l_hip": (0.09, 0.87), "l_knee": (0.09, 0.48), "l_ankle": (0.09, 0.08),
}

# bone: (start joint, end joint, start radius, end radius, depth ratio, region)
_BONES = (
    ("pelvis", "chest", 0.13, 0.14, 0.7, "torso"),
    ("chest", "neck", 0.07, 0.06, 1.0, "torso"),
    ("neck", "head", 0.06, 0.09, 1.0, "head"),
    ("chest", "l_shoulder", 0.07, 0.06, 1.0, "torso"),
    ("l_shoulder", "l_elbow", 0.048, 0.042, 1.0, "arm"),
    ("l_elbow", "l_wrist", 0.04, 0.032, 1.0, "arm"),
    ("chest", "r_shoulder", 0.07, 0.06, 1.0, "torso"),
    ("r_shoulder", "r_elbow", 0.048, 0.042, 1.0, "arm"),
    ("r_elbow", "r_wrist", 0.04, 0.032, 1.0, "arm"),
    ("pelvis", "l_hip", 0.09, 0.08, 0.8, "torso"),
    ("l_hip", "l_knee", 0.075, 0.06, 1.0, "leg"),
    ("l_knee", "l_ankle", 0.055, 0.042, 1.0, "leg"),
    ("pelvis", "r_hip", 0.09, 0.08, 0.8, "torso"),
    ("r_hip", "r_knee", 0.075, 0.06, 1.0, "leg"),
    ("r_knee", "r_ankle", 0.055, 0.042, 1.0, "leg"),
)

# blendshape gains: displacement per unit beta
SCALE_GAIN = 0.06
LENGTH_GAIN = 0.08
WIDTH_GAIN = 0.08
GIRTH_GAIN = 0.12

GENERIC_LIMIT = 2.0
HINGE_LIMIT = 2.5
HINGE_SIDE = 0.3


def _limb_root(name):
    side = name[:2]
    if name[2:] in ("shoulder", "elbow", "wrist"):
        return JOINT[side + "shoulder"]
    return JOINT[side + "hip"]


def default_joint_limits():
    """Per-joint, per-axis (lo, hi) bounds in radians, shape (P, 3, 2).

    Elbows flex about y and knees about x, one-sided; every other axis of
    every other joint gets the generic symmetric bound.
    """
    limits = np.empty((NUM_JOINTS, 3, 2))
    limits[..., 0] = -GENERIC_LIMIT
    limits[..., 1] = GENERIC_LIMIT
    hinges = {
        "l_elbow": (1, 0.0, HINGE_LIMIT),
        "r_elbow": (1, -HINGE_LIMIT, 0.0),
        "l_knee": (0, 0.0, HINGE_LIMIT),
        "r_knee": (0, 0.0, HINGE_LIMIT),
    }
    for name, (axis, lo, hi) in hinges.items():
        j = JOINT[name]
        limits[j, :, 0] = -HINGE_SIDE
        limits[j, :, 1] = HINGE_SIDE
        limits[j, axis] = (lo, hi)
    return limits


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class BodyModel:
    """Static data of the body function: template, tree, blendshapes, skinning."""

    template_vertices: np.ndarray   # (N, 3)
    faces: np.ndarray               # (F, 3) int
    parent: np.ndarray              # (P,) int, root = -1
    rest_joints: np.ndarray         # (P, 3)
    blend_dirs: np.ndarray          # (B, N, 3)
    joint_blend_dirs: np.ndarray    # (B, P, 3)
    skin_weights: np.ndarray        # (N, P)
    regressor_rings: np.ndarray     # (P, SEGMENTS) vertex indices
    joint_limits: np.ndarray        # (P, 3, 2)
    joint_names: tuple = JOINT_NAMES
    resolution: int = 6

    @property
    def joint_count(self):
        return len(self.parent)

    @property
    def shape_count(self):
        return self.blend_dirs.shape[0]

    @property
    def vertex_count(self):
        return self.template_vertices.shape[0]

    @property
    def param_count(self):
        return 3 * self.joint_count + self.shape_count + 6

    def subtree(self, j):
        """Joint j and all its descendants."""
        out = [j]
        for k in range(j + 1, self.joint_count):
            if self.parent[k] in out:
                out.append(k)
        return out

    def regress_joints(self, vertices):
        return vertices[self.regressor_rings].mean(axis=1)


def _perpendicular_frame(u):
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def build_template_model(resolution=6):
    """Build the 16-joint capsule body.

    Args:
        resolution: number of vertex rings along each bone (>= 3).
    """
    if int(resolution) != resolution or resolution < 3:
        raise InvalidArgument(f"resolution must be an integer >= 3, got {resolution!r}")
    resolution = int(resolution)

    rest = np.zeros((NUM_JOINTS, 3))
    for name, (x, h) in _REST_LAYOUT.items():
        rest[JOINT[name]] = (x, -h, 0.0)
        if name.startswith("l_"):
            rest[JOINT["r_" + name[2:]]] = (-x, -h, 0.0)

    verts, faces, weights = [], [], []
    bone_of, radial, along = [], [], []
    ring_start, ring_end = {}, {}
    phis = 2.0 * np.pi * np.arange(SEGMENTS) / SEGMENTS
    parents = np.array(PARENTS)

    for bone_id, (a_name, b_name, r0, r1, depth, _region) in enumerate(_BONES):
        a, b = JOINT[a_name], JOINT[b_name]
        pa, pb = rest[a], rest[b]
        length = np.linalg.norm(pb - pa)
        u = (pb - pa) / length
        e1, e2 = _perpendicular_frame(u)
        if abs(e1[2]) < abs(e2[2]):
            e1, e2 = e2, e1
        # e1 is the depth-ish direction; squash it for flattened bones
        ring_dirs = [np.cos(p) * e1 * depth + np.sin(p) * e2 for p in phis]

        def weight_row(t, a=a):
            row = np.zeros(NUM_JOINTS)
            par = parents[a]
            if par < 0:
                row[a] = 1.0
            else:
                wa = 0.5 + 0.5 * min(max(t, 0.0) / BLEND_SPAN, 1.0)
                row[a] = wa
                row[par] = 1.0 - wa
            return row

        rings = []
        # start cap latitude ring, tube rings, end cap latitude ring
        lat = np.pi / 4.0
        ring_specs = [(-r0 * np.sin(lat) / length, r0 * np.cos(lat), pa, -1)]
        for i in range(resolution):
            t = i / (resolution - 1)
            ring_specs.append((t, r0 + (r1 - r0) * t, None, i))
        ring_specs.append((1.0 + r1 * np.sin(lat) / length, r1 * np.cos(lat), pb, -2))

        for t, radius, _anchor, tag in ring_specs:
            center = pa + t * length * u
            idx = []
            for k in range(SEGMENTS):
                idx.append(len(verts))
                verts.append(center + radius * ring_dirs[k])
                weights.append(weight_row(t))
                bone_of.append(bone_id)
                if tag == -1:
                    radial.append(verts[-1] - pa)
                elif tag == -2:
                    radial.append(verts[-1] - pb)
                else:
                    radial.append(verts[-1] - center)
                along.append(t)
            rings.append(idx)
            if tag == 0:
                ring_start[bone_id] = idx
            if tag == resolution - 1:
                ring_end[bone_id] = idx
        poles = []
        for pole_pos, t, anchor in ((pa - r0 * u, -r0 / length, pa), (pb + r1 * u, 1.0 + r1 / length, pb)):
            poles.append(len(verts))
            verts.append(pole_pos)
            weights.append(weight_row(t))
            bone_of.append(bone_id)
            radial.append(pole_pos - anchor)
            along.append(t)

        for ra, rb in zip(rings[:-1], rings[1:]):
            for k in range(SEGMENTS):
                k2 = (k + 1) % SEGMENTS
                faces.append((ra[k], rb[k], rb[k2]))
                faces.append((ra[k], rb[k2], ra[k2]))
        for k in range(SEGMENTS):
            k2 = (k + 1) % SEGMENTS
            faces.append((poles[0], rings[0][k], rings[0][k2]))
            faces.append((poles[1], rings[-1][k2], rings[-1][k]))

    V0 = np.array(verts)
    F = np.array(faces, dtype=np.int64)
    W = np.array(weights)
    bone_of = np.array(bone_of)
    radial = np.array(radial)

    # regressor: first ring of the first outgoing bone, else last ring of the incoming bone
    regressor = np.zeros((NUM_JOINTS, SEGMENTS), dtype=np.int64)
    for j in range(NUM_JOINTS):
        out = [i for i, bone in enumerate(_BONES) if JOINT[bone[0]] == j]
        if out:
            regressor[j] = ring_start[out[0]]
        else:
            inc = [i for i, bone in enumerate(_BONES) if JOINT[bone[1]] == j]
            regressor[j] = ring_end[inc[0]]

    D = np.zeros((NUM_BETAS, len(V0), 3))
    D[0] = SCALE_GAIN * (V0 - rest[JOINT["pelvis"]])
    for bone_id, (a_name, _b, _r0, _r1, _d, region) in enumerate(_BONES):
        sel = bone_of == bone_id
        if region in ("arm", "leg"):
            root = _limb_root(a_name)
            tip = JOINT["l_wrist" if region == "arm" else "l_ankle"]
            if a_name.startswith("r_"):
                tip = JOINT["r_wrist" if region == "arm" else "r_ankle"]
            axis = rest[tip] - rest[root]
            axis /= np.linalg.norm(axis)
            offset = (V0[sel] - rest[root]) @ axis
            D[1, sel] = LENGTH_GAIN * offset[:, None] * axis
            D[2, sel, 0] = WIDTH_GAIN * rest[root, 0]
            D[3, sel] = GIRTH_GAIN * radial[sel]
        elif region == "torso":
            D[2, sel, 0] = WIDTH_GAIN * V0[sel, 0]
    DJ = D[:, regressor].mean(axis=2)
    # ring centroids are the joints up to round-off; store the layout values
    model = BodyModel(
        template_vertices=V0,
        faces=F,
        parent=parents,
        rest_joints=rest,
        blend_dirs=D,
        joint_blend_dirs=DJ,
        skin_weights=W,
        regressor_rings=regressor,
        joint_limits=default_joint_limits(),
        resolution=resolution,
    )
    _freeze(V0, F, parents, rest, D, DJ, W, regressor, model.joint_limits)
    return model


@dataclass
class BodyParams:
    """Optimized state: per-joint axis-angle, shape, global rotation and translation."""

    theta: np.ndarray
    beta: np.ndarray
    trans_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1, 3)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.trans_rot = np.asarray(self.trans_rot, dtype=float).reshape(3)
        self.trans_t = np.asarray(self.trans_t, dtype=float).reshape(3)

    @classmethod
    def zeros(cls, model, trans_t=(0.0, 0.0, 0.0)):
        return cls(np.zeros((model.joint_count, 3)), np.zeros(model.shape_count), np.zeros(3), trans_t)

    def to_vector(self):
        return np.concatenate([self.theta.ravel(), self.beta, self.trans_rot, self.trans_t])

    @classmethod
    def from_vector(cls, x, joint_count=NUM_JOINTS, shape_count=NUM_BETAS):
        x = np.asarray(x, dtype=float)
        n = 3 * joint_count
        return cls(x[:n].reshape(joint_count, 3), x[n:n + shape_count],
                   x[n + shape_count:n + shape_count + 3], x[n + shape_count + 3:])

    def copy(self):
        return BodyParams(self.theta.copy(), self.beta.copy(), self.trans_rot.copy(), self.trans_t.copy())

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "trans_rot": self.trans_rot.tolist(),
            "trans_t": self.trans_t.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta"], d["beta"], d["trans_rot"], d["trans_t"])


def param_slices(model):
    """Index slices of theta, beta, trans_rot, trans_t in the flat vector."""
    n = 3 * model.joint_count
    b = model.shape_count
    return {
        "theta": slice(0, n),
        "beta": slice(n, n + b),
        "trans_rot": slice(n + b, n + b + 3),
        "trans_t": slice(n + b + 3, n + b + 6),
    }


def _check_params(model, params):
    if params.theta.shape != (model.joint_count, 3) or params.beta.shape != (model.shape_count,):
        raise InvalidArgument(
            f"params shape theta{params.theta.shape} beta{params.beta.shape} does not match "
            f"model ({model.joint_count} joints, {model.shape_count} betas)")
    vec = params.to_vector()
    if not np.all(np.isfinite(vec)):
        raise InvalidArgument("params contain non-finite values")


class Posed:
    """Result of a forward pass; keeps what the reverse pass needs."""

    def __init__(self, model, params, need_vertices=True):
        _check_params(model, params)
        self.model = model
        P = model.joint_count
        beta = params.beta
        self.j_shaped = model.rest_joints + np.tensordot(beta, model.joint_blend_dirs, axes=1)
        self.local_R, self.local_dR = batch_rotvec_to_matrix_with_grad(params.theta)
        self.global_R = np.empty((P, 3, 3))
        # displacement of each posed joint from its shaped rest position
        disp = np.zeros((P, 3))
        eye = np.eye(3)
        for j in range(P):
            par = model.parent[j]
            if par < 0:
                self.global_R[j] = self.local_R[j]
            else:
                self.global_R[j] = self.global_R[par] @ self.local_R[j]
                disp[j] = disp[par] + (self.global_R[par] - eye) @ (self.j_shaped[j] - self.j_shaped[par])
        self.joint_pos = self.j_shaped + disp
        self.root_R, self.root_dR = rotvec_to_matrix_with_grad(params.trans_rot)
        self.t = params.trans_t
        self.joints = self.joint_pos @ self.root_R.T + self.t
        self.vertices = None
        if need_vertices:
            self.v_shaped = model.template_vertices + np.tensordot(beta, model.blend_dirs, axes=1)
            offsets = disp - np.einsum("pab,pb->pa", self.global_R - eye, self.j_shaped)
            W = model.skin_weights
            # sum_j w_j (R_j - I) v keeps the identity pose exact whatever the weight rounding
            blend_D = (W @ (self.global_R - np.eye(3)).reshape(P, 9)).reshape(-1, 3, 3)
            self.blend_R = blend_D + np.eye(3)
            self.v_posed = self.v_shaped + np.einsum("nab,nb->na", blend_D, self.v_shaped) + W @ offsets
            self.vertices = self.v_posed @ self.root_R.T + self.t

    def backward(self, grad_vertices=None, grad_joints=None):
        """Gradient of a scalar loss w.r.t. the flat parameter vector.

        Args:
            grad_vertices: dL/dvertices, shape (N, 3), or None.
            grad_joints: dL/djoints, shape (P, 3), or None.
        """
        model = self.model
        P = model.joint_count
        sl = param_slices(model)
        grad = np.zeros(model.param_count)
        gR = np.zeros((P, 3, 3))      # dL/d global_R
        gp = np.zeros((P, 3))         # dL/d joint_pos
        gj = np.zeros((P, 3))         # dL/d j_shaped
        g_root_R = np.zeros((3, 3))
        g_beta = np.zeros(model.shape_count)

        if grad_joints is not None:
            grad_joints = np.asarray(grad_joints, dtype=float)
            grad[sl["trans_t"]] += grad_joints.sum(axis=0)
            g_root_R += grad_joints.T @ self.joint_pos
            gp += grad_joints @ self.root_R

        if grad_vertices is not None:
            if self.vertices is None:
                raise InvalidArgument("forward pass was run without vertices")
            grad_vertices = np.asarray(grad_vertices, dtype=float)
            grad[sl["trans_t"]] += grad_vertices.sum(axis=0)
            g_root_R += grad_vertices.T @ self.v_posed
            g_local = grad_vertices @ self.root_R
            W = model.skin_weights
            outer = (g_local[:, :, None] * self.v_shaped[:, None, :]).reshape(-1, 9)
            gR += (W.T @ outer).reshape(P, 3, 3)
            g_off = W.T @ g_local
            gp += g_off
            gR -= g_off[:, :, None] * self.j_shaped[:, None, :]
            gj -= np.einsum("pba,pb->pa", self.global_R, g_off)
            g_vs = np.einsum("nba,nb->na", self.blend_R, g_local)
            g_beta += np.einsum("na,kna->k", g_vs, model.blend_dirs)

        g_local_R = np.zeros((P, 3, 3))
        for j in range(P - 1, -1, -1):
            par = model.parent[j]
            if par < 0:
                g_local_R[j] = gR[j]
                gj[j] += gp[j]
                continue
            Rp = self.global_R[par]
            g_local_R[j] = Rp.T @ gR[j]
            gR[par] += gR[j] @ self.local_R[j].T + np.outer(gp[j], self.j_shaped[j] - self.j_shaped[par])
            gp[par] += gp[j]
            back = Rp.T @ gp[j]
            gj[j] += back
            gj[par] -= back

        grad[sl["theta"]] = np.einsum("pab,pcab->pc", g_local_R, self.local_dR).ravel()
        g_beta += np.einsum("pa,kpa->k", gj, model.joint_blend_dirs)
        grad[sl["beta"]] = g_beta
        grad[sl["trans_rot"]] = np.einsum("ab,cab->c", g_root_R, self.root_dR)
        return grad


def forward(model, params):
    """Posed mesh vertices and joints for the given parameters."""
    posed = Posed(model, params)
    return posed.vertices, posed.joints


def tpose_vertices(model, beta):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.shape_count,):
        raise InvalidArgument(f"beta must have length {model.shape_count}")
    return forward(model, BodyParams(np.zeros((model.joint_count, 3)), beta))[0]


@dataclass(frozen=True)
class VirtualJoint:
    target: int                 # keypoint id it stands in for
    triangle: tuple             # three joint indices
    weights: tuple              # barycentric weights, sum to 1


@dataclass(frozen=True)
class VirtualJointConfig:
    entries: tuple = ()

    def __post_init__(self):
        for e in self.entries:
            if len(e.triangle) != 3 or len(e.weights) != 3:
                raise InvalidArgument("virtual joints need a 3-joint triangle and 3 weights")
            if abs(sum(e.weights) - 1.0) > 1e-9:
                raise InvalidArgument(f"barycentric weights {e.weights} do not sum to 1")

    @property
    def targets(self):
        return {e.target: i for i, e in enumerate(self.entries)}

    def with_weights(self, index, weights):
        entries = list(self.entries)
        e = entries[index]
        entries[index] = VirtualJoint(e.target, e.triangle, tuple(float(w) for w in weights))
        return VirtualJointConfig(tuple(entries))

    def to_list(self):
        return [{"keypoint_id": e.target, "triangle": list(e.triangle), "b": list(e.weights)}
                for e in self.entries]

    @classmethod
    def from_list(cls, items):
        return cls(tuple(VirtualJoint(int(d["keypoint_id"]), tuple(int(t) for t in d["triangle"]),
                                      tuple(float(w) for w in d["b"])) for d in items))


def default_virtual_joints():
    """Torso virtual joints initialized to reproduce the raw joints exactly."""
    J = JOINT
    hips = (J["pelvis"], J["l_hip"], J["r_hip"])
    shoulders = (J["chest"], J["l_shoulder"], J["r_shoulder"])
    return VirtualJointConfig((
        VirtualJoint(J["l_hip"], hips, (0.0, 1.0, 0.0)),
        VirtualJoint(J["r_hip"], hips, (0.0, 0.0, 1.0)),
        VirtualJoint(J["l_shoulder"], shoulders, (0.0, 1.0, 0.0)),
        VirtualJoint(J["r_shoulder"], shoulders, (0.0, 0.0, 1.0)),
    ))


def virtual_joints(joints, config):
    """Barycentric combinations b1*ja + b2*jb + b3*jc, one row per entry."""
    joints = np.asarray(joints, dtype=float)
    out = np.empty((len(config.entries), 3))
    for i, e in enumerate(config.entries):
        if abs(sum(e.weights) - 1.0) > 1e-9:
            raise InvalidArgument(f"barycentric weights {e.weights} do not sum to 1")
        if any(t < 0 or t >= len(joints) for t in e.triangle):
            raise InvalidArgument(f"triangle {e.triangle} references a missing joint")
        out[i] = np.asarray(e.weights) @ joints[list(e.triangle)]
    return out


def rigid_transform(points, rot, t):
    return np.asarray(points) @ rotvec_to_matrix(rot).T + np.asarray(t)
