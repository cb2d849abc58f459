"""Finite-difference checks of every analytic gradient in the fitting energy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, project
from .energy import (Observation, TermWeights, adf_term, as_params, energy_terms, keypoint_energy,
                     mask_energy, prior_energy, total_energy)
from .field import asymmetric_field
from .model import BodyParams, default_virtual_joints, forward, param_slices
from .raster import CUTOFF, TAPER, SoftRaster, rasterize_hard
from .synth import make_rng

TOLERANCE = 1e-3
ANGLE_STEP = 1e-5
TRANSLATION_STEP = 1e-4
PIXEL_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    count: int
    kinks: int = 0                # stencils re-differenced at a smaller step

    @property
    def ok(self):
        return self.error < TOLERANCE


def relative_error(analytic, numeric):
    """Largest component deviation relative to the larger of the two gradients' inf-norms."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def central_difference(fun, x, steps):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        out[i] = (fun(xp) - fun(xm)) / (2.0 * steps[i])
    return out


def param_steps(model):
    steps = np.full(model.param_count, ANGLE_STEP)
    steps[param_slices(model)["trans_t"]] = TRANSLATION_STEP
    return steps


def random_state(model, rng, pose=0.6):
    theta = rng.uniform(-pose, pose, (model.joint_count, 3))
    beta = rng.uniform(-1.5, 1.5, model.shape_count)
    rot = rng.uniform(-0.3, 0.3, 3)
    t = np.array([rng.uniform(-0.1, 0.1), 0.87 + rng.uniform(-0.05, 0.05), rng.uniform(2.5, 4.0)])
    return BodyParams(theta, beta, rot, t)


def random_observation(model, rng, camera, params):
    """Noisy keypoints and a hard mask from a nearby body, so every term is active."""
    other = params.copy()
    other.theta = params.theta + rng.normal(0.0, 0.08, params.theta.shape)
    other.beta = params.beta + rng.normal(0.0, 0.3, params.beta.shape)
    V, J = forward(model, other)
    uv = project(camera, J) + rng.normal(0.0, 3.0, (len(J), 2))
    conf = rng.uniform(0.2, 1.0, len(J))
    kps = [(i, uv[i, 0], uv[i, 1], conf[i]) for i in range(len(J))]
    return Observation(kps, camera, rasterize_hard(camera, V, model.faces))


def check_energy_terms(model, seed, states=50, camera=None, tau=0.5):
    """Compare each term's gradient and the total's against central differences.

    One energy evaluation per perturbed vector yields every term's value, so
    the rendering cost is shared across terms.
    """
    camera = camera or Camera.default(96, 96)
    rng = make_rng(seed, 7)
    vj = default_virtual_joints()
    vj = vj.with_weights(0, (0.25, 1.0, -0.25)).with_weights(2, (-0.25, 0.75, 0.5))
    steps = param_steps(model)
    weights = TermWeights(lambda_k=1.0, lambda_m=0.05, lambda_d=0.05, w_pose=0.5, w_shape=0.5,
                          gm_sigma=50.0)
    names = ("keypoints", "mask", "adf", "prior", "total")
    worst = {k: 0.0 for k in names}
    for _ in range(states):
        p = random_state(model, rng)
        obs = random_observation(model, rng, camera, p)
        field = asymmetric_field(obs.silhouette, 1.0, 0.1)
        analytic = {
            "keypoints": keypoint_energy(p, model, vj, obs, weights)[1],
            "mask": mask_energy(p, model, obs, tau)[1],
            "adf": adf_term(p, model, obs, field, tau)[1],
            "prior": prior_energy(p, weights, model)[1],
            "total": total_energy(p, model, vj, obs, field, weights, tau)[1],
        }
        x = p.to_vector()
        numeric = {k: np.zeros_like(x) for k in names}
        # leaf-joint rotations move no vertex, so their renders repeat bitwise
        cache = {}
        for i in range(x.size):
            vals = []
            for sign in (1.0, -1.0):
                xs = x.copy()
                xs[i] += sign * steps[i]
                vals.append(energy_terms(as_params(xs, model), model, vj, obs, field, weights, tau,
                                         render_cache=cache))
            for k in names:
                numeric[k][i] = (vals[0][k] - vals[1][k]) / (2.0 * steps[i])
        for k in names:
            worst[k] = max(worst[k], relative_error(analytic[k], numeric[k]))
    return [CheckResult(k, worst[k], states) for k in names]


def _face_logc(tri, px, py, tau, with_features=False):
    """Per-triangle tapered log-complement at one pixel; tri has shape (F, 3, 2).

    With ``with_features`` also returns an integer code per triangle naming the
    nearest boundary feature (edge and clamp state) and the inside flag; the
    coverage is smooth in the vertices wherever these codes stay constant.
    """
    p = np.array([px, py], dtype=float)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    dists = []
    crosses = []
    clamps = []
    for s, e in ((a, b), (b, c), (c, a)):
        d = e - s
        w = p - s
        raw = np.sum(w * d, axis=1) / np.sum(d * d, axis=1)
        u = np.clip(raw, 0.0, 1.0)
        r = w - u[:, None] * d
        dists.append(np.sqrt(np.sum(r * r, axis=1)))
        crosses.append(d[:, 0] * w[:, 1] - d[:, 1] * w[:, 0])
        clamps.append(np.where(raw <= 0.0, 0, np.where(raw >= 1.0, 2, 1)))
    dist = np.min(dists, axis=0)
    inside = np.all(np.stack(crosses) * np.sign(area2) >= 0, axis=0)
    x = np.where(inside, dist, -dist) / tau
    t = np.clip((x + CUTOFF) / TAPER, 0.0, 1.0)
    logc = np.logaddexp(0.0, x) * t * t * (3.0 - 2.0 * t)
    live = (x > -CUTOFF) & (np.abs(area2) > 1e-12)
    logc = np.where(live, logc, 0.0)
    if not with_features:
        return logc
    k = np.argmin(dists, axis=0)
    clamp = np.stack(clamps)[k, np.arange(len(k))]
    return logc, (k * 3 + clamp) * 2 + inside


def pixel_coverage(points, faces, px, py, tau):
    """Independent single-pixel soft coverage, same cutoff taper as the rasterizer."""
    tri = np.asarray(points, dtype=float)[np.asarray(faces)]
    return 1.0 - np.exp(-np.sum(_face_logc(tri, px, py, tau)))


def pixel_coverage_partials(points, faces, px, py, tau, vertices, step=PIXEL_STEP):
    """Central differences of one pixel's coverage w.r.t. each listed vertex's (x, y).

    Only the faces incident to the moved vertex change, so each perturbation
    re-evaluates those faces on top of the fixed sum over the rest.

    Returns:
        (partials (V, 2), smooth (V, 2)); ``smooth`` is False where the stencil
        crosses a change of nearest boundary feature, i.e. a kink of the
        distance function, so the difference quotient is not a derivative.
    """
    points = np.asarray(points, dtype=float)
    faces = np.asarray(faces)
    base, code0 = _face_logc(points[faces], px, py, tau, with_features=True)
    total = float(np.sum(base))
    tris, groups, rest, ref = [], [], [], []
    g = 0
    for v in vertices:
        inc = np.flatnonzero(np.any(faces == v, axis=1))
        others = total - float(np.sum(base[inc]))
        for ax in range(2):
            for sign in (1.0, -1.0):
                t = points[faces[inc]].copy()
                t[faces[inc] == v, ax] += sign * step
                tris.append(t)
                groups.append(np.full(len(inc), g))
                rest.append(others)
                ref.append(code0[inc])
                g += 1
    if not tris:
        return np.zeros((0, 2)), np.zeros((0, 2), dtype=bool)
    logc, code = _face_logc(np.concatenate(tris), px, py, tau, with_features=True)
    grp = np.concatenate(groups)
    sums = np.bincount(grp, weights=logc, minlength=g) + np.array(rest)
    changed = np.bincount(grp, weights=(code != np.concatenate(ref)).astype(float), minlength=g) > 0
    cov = (1.0 - np.exp(-sums)).reshape(len(vertices), 2, 2)
    smooth = ~changed.reshape(len(vertices), 2, 2).any(axis=2)
    return (cov[:, :, 0] - cov[:, :, 1]) / (2.0 * step), smooth


def partials_across_kinks(points, faces, px, py, tau, vertices, step=PIXEL_STEP, min_step=1e-7):
    """Partials at ``step``; stencils that straddle a kink are retried at 10x smaller steps.

    Returns:
        (partials, number of coordinates that needed a smaller step)
    """
    fd, smooth = pixel_coverage_partials(points, faces, px, py, tau, vertices, step)
    refined = int(np.count_nonzero(~smooth))
    h = step
    while not smooth.all() and h > min_step:
        h /= 10.0
        rows = np.flatnonzero(~smooth.all(axis=1))
        sub, sub_smooth = pixel_coverage_partials(points, faces, px, py, tau, np.asarray(vertices)[rows], h)
        take = ~smooth[rows]
        fd[rows] = np.where(take, sub, fd[rows])
        smooth[rows] = smooth[rows] | (take & sub_smooth)
    return fd, refined


def check_raster(model, seed, bodies=10, pixels=100, tau=1.0, camera=None, zero_probes=8):
    """Per-pixel vertex gradients of the soft rasterizer against central differences.

    Pixels are sampled where coverage is strictly between 0.02 and 0.98 so the
    derivative is not trivially zero. Every coordinate with a nonzero analytic
    partial is differenced, plus ``zero_probes`` nearby vertices whose analytic
    partial is zero, against the independent single-pixel oracle.
    """
    camera = camera or Camera.default(96, 96)
    rng = make_rng(seed, 11)
    faces = np.asarray(model.faces)
    reach = CUTOFF * tau + 2.0
    worst = 0.0
    count = 0
    kinks = 0
    for _ in range(bodies):
        p = random_state(model, rng)
        V, _ = forward(model, p)
        uv = project(camera, V)
        raster = SoftRaster(uv, faces, camera.width, camera.height, tau)
        vals = raster.values
        cand = np.flatnonzero((vals.ravel() > 0.02) & (vals.ravel() < 0.98))
        chosen = rng.choice(cand, size=min(pixels, cand.size), replace=False)
        tri = uv[faces]
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        for flat in chosen:
            py, px = divmod(int(flat), camera.width)
            onehot = np.zeros_like(vals)
            onehot[py, px] = 1.0
            g = raster.backward(onehot)
            local = faces[np.all((lo - reach <= (px, py)) & ((px, py) <= hi + reach), axis=1)]
            verts = np.unique(local)
            active = verts[np.any(g[verts] != 0.0, axis=1)]
            idle = np.setdiff1d(verts, active)
            probes = rng.choice(idle, size=min(zero_probes, idle.size), replace=False)
            test = np.concatenate([active, np.sort(probes)]).astype(np.int64)
            fd, refined = partials_across_kinks(uv, local, px, py, tau, test)
            kinks += refined
            outside = np.setdiff1d(np.arange(len(uv)), verts)
            leak = float(np.max(np.abs(g[outside]), initial=0.0))
            worst = max(worst, relative_error(g[test], fd), leak)
            count += 1
    return CheckResult("raster", worst, count, kinks)


def run_all(model, seed, states=50, bodies=10, pixels=100):
    return check_energy_terms(model, seed, states) + \
        [check_raster(model, seed, bodies, pixels)]
