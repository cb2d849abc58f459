"""L-BFGS with strong Wolfe line search, block alternation and the staged fitting loop."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from .energy import TermWeights, as_params, evaluate
from .errors import BehindCameraError, InvalidArgument
from .field import DEFAULT_LAMBDA_INNER, DEFAULT_LAMBDA_OUTER, asymmetric_field
from .model import BodyParams, VirtualJointConfig, default_virtual_joints, param_slices

log = logging.getLogger(__name__)

MAX_TRIALS = 20
GRAD_TOL = 1e-9
STEP_TOL = 1e-12


@dataclass
class StepRecord:
    """Line-search outcome of one iteration; enough to re-check the Wolfe inequalities."""

    f0: float
    dg0: float
    f: float
    dg: float
    alpha: float
    kind: str          # "wolfe", "backtrack" or "failed"

    def to_dict(self):
        return {k: getattr(self, k) for k in ("f0", "dg0", "f", "dg", "alpha", "kind")}


@dataclass
class Trace:
    energies: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    iterations: int = 0
    failures: int = 0
    reason: str = ""

    def extend(self, other):
        if self.energies and other.energies and other.energies[0] == self.energies[-1]:
            self.energies.extend(other.energies[1:])
        else:
            self.energies.extend(other.energies)
        self.steps.extend(other.steps)
        self.iterations += other.iterations
        self.failures += other.failures
        self.reason = other.reason

    def to_dict(self):
        return {"energies": list(self.energies), "steps": [s.to_dict() for s in self.steps],
                "iterations": self.iterations, "failures": self.failures, "reason": self.reason}


def _safe_eval(objective, x):
    try:
        f, g = objective(x)
    except BehindCameraError:
        return np.inf, None
    f = float(f)
    if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        return np.inf, None
    return f, np.asarray(g, dtype=float)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic matching values and slopes at a and b, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    den = gb - ga + 2.0 * d2
    if den == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / den
    return t if np.isfinite(t) else None


def _strong_wolfe(objective, x, f0, g0, d, alpha0, c1, c2, max_trials):
    """Bracketing + zoom search; returns (alpha, f, g, trials) or (None, ...) when exhausted."""
    dg0 = float(g0 @ d)
    prev_a, prev_f, prev_dg = 0.0, f0, dg0
    a = alpha0
    trials = 0
    lo = hi = None
    while trials < max_trials:
        f, g = _safe_eval(objective, x + a * d)
        trials += 1
        if g is None:
            hi = (a, np.inf, np.nan)
            lo = (prev_a, prev_f, prev_dg)
            break
        dg = float(g @ d)
        if f > f0 + c1 * a * dg0 or (trials > 1 and f >= prev_f):
            lo, hi = (prev_a, prev_f, prev_dg), (a, f, dg)
            break
        if abs(dg) <= -c2 * dg0:
            return a, f, g, trials
        if dg >= 0:
            lo, hi = (a, f, dg), (prev_a, prev_f, prev_dg)
            break
        prev_a, prev_f, prev_dg = a, f, dg
        a = 2.0 * a
    if lo is None:
        return None, None, None, trials
    while trials < max_trials:
        (al, fl, gl), (ah, fh, gh) = lo, hi
        if abs(ah - al) <= 1e-16 * max(1.0, abs(al)):
            break
        t = None
        if np.isfinite(fh) and np.isfinite(gh):
            t = _cubic_min(al, fl, gl, ah, fh, gh)
        lo_b, hi_b = min(al, ah), max(al, ah)
        margin = 0.1 * (hi_b - lo_b)
        if t is None or not (lo_b + margin <= t <= hi_b - margin):
            t = 0.5 * (al + ah)
        f, g = _safe_eval(objective, x + t * d)
        trials += 1
        if g is None:
            hi = (t, np.inf, np.nan)
            continue
        dg = float(g @ d)
        if f > f0 + c1 * t * dg0 or f >= fl:
            hi = (t, f, dg)
            continue
        if abs(dg) <= -c2 * dg0:
            return t, f, g, trials
        if dg * (ah - al) >= 0:
            hi = lo
        lo = (t, f, dg)
    return None, None, None, trials


def _backtrack(objective, x, f0, g0, d, alpha0, c1, max_trials):
    dg0 = float(g0 @ d)
    a = alpha0
    for _ in range(max_trials):
        f, g = _safe_eval(objective, x + a * d)
        if g is not None and f <= f0 + c1 * a * dg0:
            return a, f, g
        a *= 0.5
    return None, None, None


def lbfgs_minimize(objective: Callable, x0, max_iters=30, memory=10, c1=1e-4, c2=0.9,
                   max_trials=MAX_TRIALS, grad_tol=GRAD_TOL, step_tol=STEP_TOL):
    """Minimize a smooth function with limited-memory BFGS.

    Args:
        objective: maps a flat vector to (value, gradient).
        x0: starting point; the objective must be finite there.
        max_iters: iteration budget.
        memory: number of stored curvature pairs.
        c1, c2: strong Wolfe constants, 0 < c1 < c2 < 1.

    Returns:
        (x, Trace). ``Trace.energies`` starts with f(x0) and lists each accepted value.
    """
    if not 0 < c1 < c2 < 1:
        raise InvalidArgument("line-search constants need 0 < c1 < c2 < 1")
    if memory < 1 or max_iters < 0:
        raise InvalidArgument("memory must be >= 1 and max_iters >= 0")
    x = np.array(x0, dtype=float)
    f, g = _safe_eval(objective, x)
    if g is None:
        raise InvalidArgument("objective is not finite at the starting point")
    trace = Trace(energies=[f])
    S, Y = [], []
    for _ in range(max_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm < grad_tol:
            trace.reason = "gradient"
            break
        d = _two_loop(g, S, Y)
        if not float(g @ d) < 0:
            S.clear()
            Y.clear()
            d = -g
        alpha0 = 1.0 if S else min(1.0, 1.0 / gnorm)
        a, f_new, g_new, _ = _strong_wolfe(objective, x, f, g, d, alpha0, c1, c2, max_trials)
        kind = "wolfe"
        if a is None:
            d = -g
            kind = "backtrack"
            a, f_new, g_new = _backtrack(objective, x, f, g, d, min(1.0, 1.0 / gnorm), c1, max_trials)
            S.clear()
            Y.clear()
        trace.iterations += 1
        if a is None:
            trace.failures += 1
            trace.steps.append(StepRecord(f, float(g @ d), f, float(g @ d), 0.0, "failed"))
            trace.reason = "line-search"
            break
        trace.steps.append(StepRecord(f, float(g @ d), f_new, float(g_new @ d), a, kind))
        s = a * d
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        trace.energies.append(f)
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        if np.linalg.norm(s) < step_tol:
            trace.reason = "step"
            break
    else:
        trace.reason = "budget"
    if not trace.reason and max_iters == 0:
        trace.reason = "budget"
    return x, trace


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        q *= float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def restrict(objective, x_full, index):
    """Objective over ``x_full[index]`` with the rest held fixed."""
    def sub(z):
        x = x_full.copy()
        x[index] = z
        f, g = objective(x)
        return f, np.asarray(g)[index]
    return sub


def alternate_blocks(objective, x0, iterations, inner_block, blocks, memory=10, c1=1e-4, c2=0.9):
    """Alternate L-BFGS over two index blocks, resetting curvature memory at each switch.

    Even outer steps update ``blocks[0]``, odd steps ``blocks[1]``; each runs
    ``inner_block`` iterations. Entries outside the active block are never written.

    Returns:
        (x, Trace) with the traces of all outer steps concatenated.
    """
    if iterations < 0 or inner_block < 1:
        raise InvalidArgument("iterations must be >= 0 and inner_block >= 1")
    x = np.array(x0, dtype=float)
    trace = Trace()
    for i in range(iterations):
        index = np.asarray(blocks[i % 2])
        z, t = lbfgs_minimize(restrict(objective, x, index), x[index], inner_block, memory, c1, c2)
        x[index] = z
        trace.extend(t)
    if not trace.energies:
        f, _ = _safe_eval(objective, x)
        trace.energies.append(f)
    return x, trace


# Softness for fitting; tighter than the rasterizer default so thin limbs are not inflated.
FIT_TAU = 0.5


@dataclass(frozen=True)
class StageConfig:
    weights: TermWeights
    iterations: int = 30
    enable_virtual_joints: bool = False
    enable_silhouette: bool = False
    disentangled: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgument("stage iterations must be >= 1")


@dataclass(frozen=True)
class FitConfig:
    stages: tuple
    lbfgs_memory: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    inner_block: int = 5
    tau: float = FIT_TAU
    adf_lambda_o: float = DEFAULT_LAMBDA_OUTER
    adf_lambda_i: float = DEFAULT_LAMBDA_INNER
    virtual_joints: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise InvalidArgument("config needs 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.lbfgs_memory < 1 or self.inner_block < 1:
            raise InvalidArgument("lbfgs_memory and inner_block must be >= 1")
        if not self.tau > 0:
            raise InvalidArgument("tau must be positive")

    def with_stages(self, stages):
        return replace(self, stages=tuple(stages))


def default_config(iterations=30):
    """Three annealed stages: regular joints, then virtual joints, then silhouette."""
    return FitConfig(stages=(
        StageConfig(TermWeights(lambda_k=1.0, w_pose=1.0, w_shape=1.0), iterations),
        StageConfig(TermWeights(lambda_k=1.0, w_pose=0.3, w_shape=0.3), iterations,
                    enable_virtual_joints=True),
        StageConfig(TermWeights(lambda_k=1.0, lambda_m=1e-3, lambda_d=1e-2, w_pose=0.1, w_shape=0.1),
                    iterations, enable_virtual_joints=True, enable_silhouette=True, disentangled=True),
    ))


@dataclass
class FitReport:
    stages: list
    params: BodyParams
    iterations: list
    line_search_failures: int
    wall_time: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self):
        """Serializable form; wall time is left out so reruns are byte-identical."""
        return {
            "stages": [s.to_dict() for s in self.stages],
            "params": self.params.to_dict(),
            "iterations": list(self.iterations),
            "line_search_failures": self.line_search_failures,
            "warnings": list(self.warnings),
        }


def stage_objective(model, vjconfig, obs, field_, stage, tau):
    def objective(x):
        ev = evaluate(as_params(x, model), model, vjconfig, obs, field_, stage.weights, tau,
                      stage.enable_virtual_joints, stage.enable_silhouette)
        return ev.value, ev.grad
    return objective


def fit_staged(model, vjconfig, obs, config, init, field_=None):
    """Run the configured stages in order starting from ``init``.

    Args:
        field_: precomputed distance field; built once from ``obs.silhouette`` if omitted.

    Returns:
        (BodyParams, FitReport)
    """
    if not config.stages:
        raise InvalidArgument("fit needs at least one stage")
    start = time.perf_counter()
    vjconfig = vjconfig if vjconfig is not None else default_virtual_joints()
    has_kp = any(k.confidence > 0 for k in obs.keypoints)
    if not has_kp and obs.silhouette is None:
        log.warning("no confident keypoints and no silhouette; returning init unchanged")
        return init.copy(), FitReport([], init.copy(), [], 0, time.perf_counter() - start,
                                      ["degenerate-input"])
    uses_sil = any(s.enable_silhouette for s in config.stages) and obs.silhouette is not None
    if uses_sil and field_ is None and any(s.weights.lambda_d > 0 for s in config.stages):
        field_ = asymmetric_field(obs.silhouette, config.adf_lambda_o, config.adf_lambda_i)
    x = init.to_vector()
    sl = param_slices(model)
    idx = np.arange(model.param_count)
    beta_block = idx[sl["beta"]]
    pose_block = np.setdiff1d(idx, beta_block)
    traces, iters, failures = [], [], 0
    for stage in config.stages:
        objective = stage_objective(model, vjconfig, obs, field_, stage, config.tau)
        if stage.disentangled:
            outer = max(1, stage.iterations // config.inner_block)
            x, t = alternate_blocks(objective, x, outer, config.inner_block, (beta_block, pose_block),
                                    config.lbfgs_memory, config.wolfe_c1, config.wolfe_c2)
        else:
            x, t = lbfgs_minimize(objective, x, stage.iterations, config.lbfgs_memory,
                                  config.wolfe_c1, config.wolfe_c2)
        traces.append(t)
        iters.append(t.iterations)
        failures += t.failures
    params = as_params(x, model)
    return params, FitReport(traces, params.copy(), iters, failures, time.perf_counter() - start)


# Config text format

_GLOBAL_KEYS = {f.name: f.type for f in fields(FitConfig) if f.name != "stages"}
_WEIGHT_KEYS = [f.name for f in fields(TermWeights)]
_STAGE_FLAGS = ("enable_virtual_joints", "enable_silhouette", "disentangled")


def _parse_bool(value, key):
    v = value.lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise InvalidArgument(f"{key}: expected a boolean, got {value!r}")


def _parse_number(value, key, kind):
    try:
        return int(value) if kind is int else float(value)
    except ValueError:
        raise InvalidArgument(f"{key}: expected a number, got {value!r}") from None


def parse_config(text, base_dir=None):
    """Parse the ``key = value`` format with ``[stage]`` sections; unknown keys are errors."""
    glob = {}
    stages = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line != "[stage]":
                raise InvalidArgument(f"line {lineno}: unknown section {line}")
            current = {}
            stages.append(current)
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        target = glob if current is None else current
        if key in target:
            raise InvalidArgument(f"line {lineno}: duplicate key {key}")
        if current is None:
            if key not in _GLOBAL_KEYS:
                raise InvalidArgument(f"line {lineno}: unknown key {key}")
            if key == "virtual_joints":
                glob[key] = value
            else:
                kind = int if key in ("lbfgs_memory", "inner_block") else float
                glob[key] = _parse_number(value, key, kind)
        else:
            if key in _WEIGHT_KEYS:
                current[key] = _parse_number(value, key, float)
            elif key == "iterations":
                current[key] = _parse_number(value, key, int)
            elif key in _STAGE_FLAGS:
                current[key] = _parse_bool(value, key)
            else:
                raise InvalidArgument(f"line {lineno}: unknown stage key {key}")
    if not stages:
        raise InvalidArgument("config defines no [stage] sections")
    built = []
    for s in stages:
        w = TermWeights(**{k: s[k] for k in _WEIGHT_KEYS if k in s})
        built.append(StageConfig(w, **{k: s[k] for k in ("iterations",) + _STAGE_FLAGS if k in s}))
    if base_dir is not None and glob.get("virtual_joints"):
        path = glob["virtual_joints"]
        if not os.path.isabs(path):
            glob["virtual_joints"] = os.path.join(base_dir, path)
    return FitConfig(stages=tuple(built), **glob)


def format_config(config):
    """Inverse of ``parse_config``; floats use repr so values round-trip exactly."""
    lines = []
    for name in _GLOBAL_KEYS:
        value = getattr(config, name)
        if value is None:
            continue
        lines.append(f"{name} = {value!r}" if not isinstance(value, str) else f"{name} = {value}")
    for stage in config.stages:
        lines += ["", "[stage]"]
        for k in _WEIGHT_KEYS:
            lines.append(f"{k} = {getattr(stage.weights, k)!r}")
        lines.append(f"iterations = {stage.iterations}")
        for k in _STAGE_FLAGS:
            lines.append(f"{k} = {str(getattr(stage, k)).lower()}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))


def load_fit_virtual_joints(config):
    """Virtual-joint table named by the config, or the raw-joint encoding."""
    if not config.virtual_joints:
        return default_virtual_joints()
    from .io import read_json
    return VirtualJointConfig.from_list(read_json(config.virtual_joints))
