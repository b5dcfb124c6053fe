"""Grasp planning by projected gradient ascent on a learned success probability.

Each iteration takes the gradient of ``f(theta)`` and tries steps
``alpha0 * shrink**k`` along it, projecting every candidate back into a
box, until one shows sufficient increase.  Patch gradients with respect to
``theta`` come from central differences of the patch extractor; everything
else comes from backpropagation.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import world
from .models import config_jacobian, encode_config


class PlanningError(RuntimeError):
    """Raised when the objective or its gradient is not finite."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be two vectors of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, theta):
        theta = np.asarray(theta)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def sample(self, rng, n):
        return rng.uniform(self.lower, self.upper, size=(n, len(self.lower)))

    @staticmethod
    def union(boxes):
        return BoxBounds(
            np.min([b.lower for b in boxes], axis=0), np.max([b.upper for b in boxes], axis=0)
        )


# the world's own limits on (gx, gy, psi, h)
WORLD_BOUNDS = BoxBounds(np.array([0.0, 0.0, -2 * math.pi, 0.01]), np.array([1.0, 1.0, 2 * math.pi, 0.3]))


def project(theta, bounds):
    return np.minimum(np.maximum(np.asarray(theta, dtype=np.float64), bounds.lower), bounds.upper)


@dataclass(frozen=True)
class PlannerConfig:
    max_iterations: int = 100
    step0: float = 0.001
    max_trials: int = 10
    shrink: float = 0.5
    armijo: float = 1e-4
    acceptance: str = "armijo"  # or "increase": plain f(theta') > f(theta)
    tolerance: float = 1e-6
    fd_eps: float = 1e-3
    gradient_mode: str = "config-only"  # or "full-chain"
    translation: float = 0.1
    angle: float = 0.3
    opening: float = 0.05
    heuristic_opening: bool = True  # also keep h inside the heuristic's own range

    def __post_init__(self):
        for name in ("step0", "shrink", "fd_eps", "tolerance", "translation", "angle", "opening"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations < 0 or self.max_trials < 1:
            raise ValueError("iteration counts must be positive")
        if self.acceptance not in ("armijo", "increase"):
            raise ValueError(f"unknown acceptance rule {self.acceptance!r}")
        if self.gradient_mode not in ("config-only", "full-chain"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")


def inference_bounds(theta0, cfg=PlannerConfig(), limits=WORLD_BOUNDS, grid=None):
    """Box around an initial grasp, clipped to the world's limits.

    Given the observation and ``cfg.heuristic_opening``, the opening is
    further limited to the range the heuristic generator draws from.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    radius = np.array([cfg.translation, cfg.translation, cfg.angle, cfg.opening])
    lo = np.maximum(theta0 - radius, limits.lower)
    hi = np.minimum(theta0 + radius, limits.upper)
    if grid is not None and cfg.heuristic_opening:
        h_lo, h_hi = world.opening_limits(grid, theta0[2])
        lo[3], hi[3] = max(lo[3], h_lo), min(hi[3], h_hi)
    return BoxBounds(np.minimum(lo, hi), hi)


# ---------------------------------------------------------------------------
# Patch gradients by central differences
# ---------------------------------------------------------------------------


class PatchJacobian:
    """Directional derivatives of extracted patches with respect to theta.

    Never materializes the full Jacobian: ``jvp`` costs two extractions and
    ``vjp`` costs two per theta coordinate.
    """

    def __init__(self, extractor, grid, theta, eps):
        if not eps > 0:
            raise ValueError("finite-difference step must be positive")
        self.extractor = extractor
        self.grid = grid
        self.theta = np.asarray(theta, dtype=np.float64)
        self.eps = eps

    def jvp(self, direction):
        d = np.asarray(direction, dtype=np.float64)
        plus = self.extractor(self.grid, self.theta + self.eps * d)
        minus = self.extractor(self.grid, self.theta - self.eps * d)
        return [(p - m) / (2.0 * self.eps) for p, m in zip(plus, minus)]

    def vjp(self, cotangents):
        """``sum_i <cotangent_i, d patch_i / d theta>`` as a theta-sized vector."""
        out = np.zeros(len(self.theta))
        for k in range(len(self.theta)):
            e = np.zeros(len(self.theta))
            e[k] = 1.0
            for dp, ct in zip(self.jvp(e), cotangents):
                out[k] += float(np.vdot(dp, ct))
        return out


def finite_diff_patch_grad(extractor, grid, theta, eps=1e-3):
    return PatchJacobian(extractor, grid, theta, eps)


def interior_patch(extractor, grid, theta, eps=1e-3, tol=1e-5):
    """True when no patch sample crosses a cell boundary within +-eps.

    Bilinear sampling is only piecewise smooth.  Away from crossings the
    central differences at eps and eps/2 agree up to the (tiny) curvature
    of rotation; a crossing makes them disagree by a sizeable fraction.
    """
    full = PatchJacobian(extractor, grid, theta, eps)
    half = PatchJacobian(extractor, grid, theta, eps / 2)
    for k in range(len(full.theta)):
        e = np.zeros(len(full.theta))
        e[k] = 1.0
        for a, b in zip(full.jvp(e), half.jvp(e)):
            if not np.allclose(a, b, rtol=0.0, atol=tol * max(1.0, float(np.abs(a).max()))):
                return False
    return True


# ---------------------------------------------------------------------------
# Objectives: f(theta) and its gradient for one observation
# ---------------------------------------------------------------------------


class ConfigNetObjective:
    def __init__(self, model, grid, mode="config-only", eps=1e-3):
        if getattr(model, "arch", None) != "config-net":
            raise TypeError("config-net gradients need a config-net model")
        self.model = model
        self.grid = np.asarray(grid, dtype=np.float64)
        self.mode = mode
        self.eps = eps
        self.frame = model.frame(self.grid)
        self.graph = model.graph
        self.jac = config_jacobian(self.frame, model.dim_theta)
        self._base = None
        if not model.extractor.theta_dependent:
            # the image branch never changes; evaluate it once
            self._fixed_image = model.image(self.grid, None)
            self._base = self.graph.workspace()
            self._base.forward(
                {"image": self._fixed_image[None], "config": np.zeros((1, model.dim_theta))}
            )

    def _inputs(self, thetas):
        if self._base is not None:
            images = np.broadcast_to(self._fixed_image, (len(thetas),) + self._fixed_image.shape)
        else:
            images = np.stack([self.model.image(self.grid, t) for t in thetas])
        return {"image": images, "config": encode_config(thetas, self.frame)}

    def _forward(self, ws, thetas):
        reuse = (self._base, ("config",)) if self._base is not None else None
        return ws.forward(self._inputs(thetas), reuse=reuse)[:, 0]

    def values(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        return self._forward(self.graph.workspace(), thetas)

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        ws = self.graph.workspace()
        p = float(self._forward(ws, theta[None])[0])
        full = self.mode == "full-chain" and self.model.extractor.theta_dependent
        slots = ("config", "image") if full else ("config",)
        grads = ws.backward_inputs(slots=slots)
        g = grads["config"][0] @ self.jac
        if full:
            jac = finite_diff_patch_grad(self.model.extractor, self.grid, theta, self.eps)
            g = g + jac.vjp([grads["image"][0]])
        return p, g


class PatchNetObjective:
    def __init__(self, model, grid, mode="full-chain", eps=1e-3):
        if getattr(model, "arch", None) != "patch-net":
            raise TypeError("patch-net gradients need a patch-net model")
        self.model = model
        self.grid = np.asarray(grid, dtype=np.float64)
        self.eps = eps
        self.graph = model.graph

    def values(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        return self.graph.forward(self.model.patch_inputs(self.grid, thetas))[:, 0]

    def patch_terms(self, theta):
        """Per-patch contributions ``(df/dp_i)(dp_i/dtheta)``, palm first."""
        theta = np.asarray(theta, dtype=np.float64)
        ws = self.graph.workspace()
        p = float(ws.forward(self.model.patch_inputs(self.grid, theta[None]))[0, 0])
        grads = ws.backward_inputs()
        jac = finite_diff_patch_grad(self.model.extractor, self.grid, theta, self.eps)
        terms = []
        for i, name in enumerate(self.model.slot_names):
            cot = [grads[n][0] if j == i else np.zeros_like(grads[n][0]) for j, n in enumerate(self.model.slot_names)]
            terms.append(jac.vjp(cot))
        return p, terms

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        ws = self.graph.workspace()
        p = float(ws.forward(self.model.patch_inputs(self.grid, theta[None]))[0, 0])
        grads = ws.backward_inputs()
        jac = finite_diff_patch_grad(self.model.extractor, self.grid, theta, self.eps)
        return p, jac.vjp([grads[n][0] for n in self.model.slot_names])


def make_objective(model, grid, mode="config-only", eps=1e-3):
    if hasattr(model, "objective"):
        return model.objective(grid, mode, eps)
    arch = getattr(model, "arch", None)
    if arch == "config-net":
        return ConfigNetObjective(model, grid, mode, eps)
    if arch == "patch-net":
        return PatchNetObjective(model, grid, mode, eps)
    raise TypeError(f"cannot plan with a {arch!r} model")


def grad_config_net(model, grid, theta, mode="config-only", eps=1e-3):
    return ConfigNetObjective(model, grid, mode, eps).value_and_grad(theta)[1]


def grad_patch_net(model, grid, theta, eps=1e-3):
    return PatchNetObjective(model, grid, eps=eps).value_and_grad(theta)[1]


# ---------------------------------------------------------------------------
# Ascent
# ---------------------------------------------------------------------------


@dataclass
class PlanResult:
    theta: np.ndarray
    p: float
    p0: float
    theta0: np.ndarray
    trace: list = field(default_factory=list)  # (theta, p, step) per accepted step
    reason: str = ""
    ms: float = 0.0
    init_index: int = 0

    @property
    def iterations(self):
        return len(self.trace) - 1

    def record(self):
        theta = ",".join(f"{v:.6f}" for v in self.theta)
        return (
            f"init={self.init_index} iters={self.iterations} p0={self.p0:.6f} "
            f"p={self.p:.6f} theta={theta} reason={self.reason} ms={self.ms:.1f}"
        )


def _check_finite(p, g, trace):
    if not math.isfinite(p) or not np.all(np.isfinite(g)):
        raise PlanningError("objective or gradient is not finite", trace)


def ascend(model, grid, theta0, cfg=PlannerConfig(), bounds=None, objective=None):
    """Maximize the predicted success probability from ``theta0``.

    ``bounds`` defaults to the inference box around ``theta0``.  Termination
    reasons: ``converged`` (step below tolerance), ``line-search`` (no
    candidate step was accepted) and ``max-iterations``.
    """
    start = time.perf_counter()
    bounds = bounds or inference_bounds(theta0, cfg, grid=grid)
    obj = objective or make_objective(model, grid, cfg.gradient_mode, cfg.fd_eps)
    theta = project(theta0, bounds)
    p, g = obj.value_and_grad(theta)
    p0 = p
    trace = [(theta.copy(), p, 0.0)]
    _check_finite(p, g, trace)
    reason = "max-iterations"
    steps = cfg.step0 * cfg.shrink ** np.arange(cfg.max_trials)
    for _ in range(cfg.max_iterations):
        accepted = None
        for alpha in steps:
            cand = project(theta + alpha * g, bounds)
            pc = float(obj.values(cand[None])[0])
            if not math.isfinite(pc):
                raise PlanningError("objective is not finite", trace)
            if cfg.acceptance == "armijo":
                ok = pc >= p + cfg.armijo * float(g @ (cand - theta))
            else:
                ok = pc > p
            if ok:
                accepted = (cand, pc, alpha)
                break
        if accepted is None:
            reason = "line-search"
            break
        cand, pc, alpha = accepted
        moved = float(np.max(np.abs(cand - theta))) if len(theta) else 0.0
        theta, p = cand, pc
        trace.append((theta.copy(), p, float(alpha)))
        if moved < cfg.tolerance:
            reason = "converged"
            break
        p, g = obj.value_and_grad(theta)
        _check_finite(p, g, trace)
    ms = 1000.0 * (time.perf_counter() - start)
    return PlanResult(theta, p, p0, np.asarray(theta0, dtype=np.float64), trace, reason, ms)


def plan_multi_init(model, grid, inits, cfg=PlannerConfig(), workers=1):
    """Ascend from every initialization; return the best result and all of them.

    Ties on the final probability go to the lowest initialization index.
    """
    if len(inits) == 0:
        raise ValueError("need at least one initialization")

    def run(item):
        i, theta0 = item
        res = ascend(model, grid, theta0, cfg)
        res.init_index = i
        return res

    items = list(enumerate(inits))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]
    best = max(range(len(results)), key=lambda i: (results[i].p, -i))
    return results[best], results


def max_eval(model, grid, inits):
    """Score the given grasps once and return ``(index, theta, p)`` of the best."""
    if len(inits) == 0:
        raise ValueError("need at least one initialization")
    thetas = np.atleast_2d(np.asarray(inits, dtype=np.float64))
    values = make_objective(model, grid).values(thetas)
    i = int(np.argmax(values))  # first index wins ties
    return i, thetas[i], float(values[i])


def sample_and_rank(model, grid, bounds, n=150, rng=None):
    """Best of ``n`` uniform draws in ``bounds``: ``(theta, p, draws)``."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = rng if rng is not None else np.random.default_rng()
    draws = bounds.sample(rng, n)
    values = make_objective(model, grid).values(draws)
    i = int(np.argmax(values))  # first index wins ties
    return draws[i], float(values[i]), draws


def scene_bounds(inits, cfg=PlannerConfig(), grid=None):
    """Smallest box holding the inference boxes of all initializations."""
    return BoxBounds.union([inference_bounds(t, cfg, grid=grid) for t in inits])


def with_mode(cfg, mode):
    return replace(cfg, gradient_mode=mode)
