"""Pose recovery by maximizing descriptor similarity of a warped template.

The score of a pose is the dot product between the HOG descriptor of the
similarity-transformed template and the descriptor of an observed patch.
Multi-start momentum ascent climbs the score: restarts differ in their
initial rotation, spread equidistantly over the circle, and blocks of
(tx, ty, r) updates are interleaved with shorter scale-only blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Node
from .hog import GRAY_WEIGHTS, HogConfig, HogDescriptor, hog_forward
from .preimage import OptimizerConfig

__all__ = [
    "Pose2D",
    "AlignmentProblem",
    "AscentRow",
    "RestartTrace",
    "AlignmentDivergence",
    "PARAM_NAMES",
    "similarity",
    "pose_gradient",
    "sweep",
    "estimate_pose",
]

PARAM_NAMES = ("tx", "ty", "r", "sigma")

# step multipliers per pose parameter on top of OptimizerConfig.step_size;
# rotation gradients are per-degree and roughly two orders of magnitude
# smaller than the per-pixel translation ones, log-scale gradients are a
# whole-image sum and much larger
STEP_SCALES = np.array([1.0, 1.0, 20.0, 0.15])

# a restart whose pose leaves these bounds is abandoned as diverged
_MAX_SHIFT_FACTOR = 4.0
_MAX_LOG_SCALE = 3.0

# bilinear resampling makes S ripple with a one pixel period; the first
# fraction of each restart ascends with a blurred template, which flattens
# the ripples and leaves the broad basin, before refining on the sharp one
_TRAVEL_BLUR = 1.0
_TRAVEL_FRACTION = 0.5


@dataclass(frozen=True)
class Pose2D:
    """2D similarity-transform pose: translation, rotation, log-scale."""

    tx: float = 0.0
    ty: float = 0.0
    r: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.r, self.sigma)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"pose parameters must be finite, got {vals}")

    @property
    def scale(self) -> float:
        return math.exp(self.sigma)

    def canonical(self) -> "Pose2D":
        """Same transform with the rotation reduced to [0, 360)."""
        return replace(self, r=self.r % 360.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.r, self.sigma], dtype=np.float64)


@dataclass
class AlignmentProblem:
    """A template, the descriptor of the patch it should match, and knobs.

    The template may be larger than the patch; the warp samples it about
    its center onto the patch grid, so generous margins keep all samples
    in bounds over the pose range of interest.
    """

    template: np.ndarray
    target: HogDescriptor
    cfg: HogConfig
    patch_shape: tuple
    restarts: int = 8

    def __post_init__(self):
        t = np.asarray(self.template, dtype=np.float64)
        if t.ndim == 3 and t.shape[-1] == 3:
            t = t @ np.asarray(GRAY_WEIGHTS)
        if t.ndim != 2:
            raise ValueError(f"template must be (h, w) or (h, w, 3), got {t.shape}")
        self.template = t
        self.patch_shape = (int(self.patch_shape[0]), int(self.patch_shape[1]))
        ph, pw = self.patch_shape
        if ph % self.cfg.cell or pw % self.cfg.cell:
            raise ValueError(
                f"patch extents {self.patch_shape} must be divisible by the cell size {self.cfg.cell}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.target.config != self.cfg:
            raise ValueError("target descriptor config differs from the problem config")
        if self.target.image_shape != self.patch_shape:
            raise ValueError(
                f"target descriptor covers {self.target.image_shape}, patch shape is {self.patch_shape}")


@dataclass(frozen=True)
class AscentRow:
    """One ascent evaluation: phase is 'main' for (tx, ty, r), 'scale' for sigma."""

    restart: int
    iteration: int
    phase: str
    similarity: float
    tx: float
    ty: float
    r: float
    sigma: float


@dataclass
class RestartTrace:
    restart: int
    start: Pose2D
    pose: Pose2D
    similarity: float
    diverged: bool
    rows: list = field(default_factory=list)


class AlignmentDivergence(RuntimeError):
    """Every restart aborted with a non-finite score or an absurd pose."""


def _similarity_node(problem: AlignmentProblem, tx, ty, r, sigma, template=None) -> Node:
    template = problem.template if template is None else template
    warped = ad.warp_bilinear(Node(template), tx, ty, r, sigma, problem.patch_shape)
    phi = hog_forward(warped, problem.cfg)
    return ad.dot(phi, problem.target.grid)


def similarity(pose: Pose2D, problem: AlignmentProblem) -> Node:
    """S(pose) = phi(warp(template, pose)) . phi(patch) as a scalar node."""
    return _similarity_node(problem, pose.tx, pose.ty, pose.r, pose.sigma)


def pose_gradient(pose: Pose2D, problem: AlignmentProblem, template=None):
    """Score and dS/d(tx, ty, r, sigma) from one backward pass."""
    nodes = [Node(np.asarray(float(v))) for v in (pose.tx, pose.ty, pose.r, pose.sigma)]
    s = _similarity_node(problem, *nodes, template=template)
    ad.backward(s)
    grad = np.array([float(n.adjoint.reshape(())) for n in nodes])
    return float(s.value.reshape(())), grad


def sweep(problem: AlignmentProblem, param: str, grid, base: Pose2D | None = None):
    """(value, S, dS/dparam) rows along one pose axis, others held at ``base``."""
    if param not in PARAM_NAMES:
        raise ValueError(f"unknown pose parameter {param!r}")
    values = [float(v) for v in np.asarray(grid, dtype=np.float64).ravel()]
    if not values:
        raise ValueError("sweep grid is empty")
    base = base or Pose2D()
    idx = PARAM_NAMES.index(param)
    rows = []
    for v in values:
        s, g = pose_gradient(replace(base, **{param: v}), problem)
        rows.append((v, s, g[idx]))
    return rows


def _ascend(problem, start: Pose2D, opt: OptimizerConfig, restart: int,
            block_main: int, block_sigma: int) -> RestartTrace:
    p = start.as_array()
    v = np.zeros(4)
    rows = []
    best_hist = []
    travel_hist = []
    best_s, best_p = -math.inf, p.copy()
    max_shift = _MAX_SHIFT_FACTOR * max(problem.patch_shape)
    cycle = block_main + block_sigma
    travel_end = int(_TRAVEL_FRACTION * opt.max_iterations)
    blurred = gaussian_filter(problem.template, _TRAVEL_BLUR)
    i = 0
    while i < opt.max_iterations:
        # guard before evaluating: an absurd pose would overflow the warp
        if (not np.all(np.isfinite(p)) or max(abs(p[0]), abs(p[1])) > max_shift
                or abs(p[3]) > _MAX_LOG_SCALE):
            return RestartTrace(restart, start, Pose2D(*np.nan_to_num(p)), -math.inf, True, rows)
        travel = i < travel_end
        if travel:
            # the blurred surface is smooth in every direction, so travel
            # moves all four parameters at once; the main/scale interleave
            # governs the sharp refinement
            mask = np.ones(4, dtype=bool)
        else:
            if i == travel_end:
                v[:] = 0.0
            main = ((i - travel_end) % cycle) < block_main
            mask = np.array([main, main, main, not main], dtype=bool)
        s, g = pose_gradient(Pose2D(*p), problem, template=blurred if travel else None)
        phase = "travel" if travel else ("main" if mask[0] else "scale")
        rows.append(AscentRow(restart, i, phase, s, *p))
        if not np.isfinite(s):
            return RestartTrace(restart, start, Pose2D(*p), -math.inf, True, rows)
        if travel:
            # blurred and sharp scores are not comparable; travel plateaus on
            # its own history and hands over to the sharp phase early
            travel_hist.append(max(travel_hist[-1], s) if travel_hist else s)
            if len(travel_hist) > max(opt.window, 2 * cycle):
                prev = travel_hist[-opt.window - 1]
                if travel_hist[-1] - prev < opt.tolerance * max(abs(prev), 1e-30):
                    travel_end = i + 1
        else:
            if s > best_s:
                best_s, best_p = s, p.copy()
            best_hist.append(max(best_hist[-1], s) if best_hist else s)
            if len(best_hist) > max(opt.window, 2 * cycle):
                prev = best_hist[-opt.window - 1]
                if best_hist[-1] - prev < opt.tolerance * max(abs(prev), 1e-30):
                    break
        v = np.where(mask, opt.momentum * v + opt.step_size * STEP_SCALES * g, v)
        p = p + np.where(mask, v, 0.0)
        i += 1
    # momentum orbits the optimum, so report the best pose seen, not the last
    rows.append(AscentRow(restart, i, "best", best_s, *best_p))
    return RestartTrace(restart, start, Pose2D(*best_p), best_s, False, rows)


def estimate_pose(problem: AlignmentProblem, opt: OptimizerConfig | None = None,
                  seed_pose: Pose2D | None = None,
                  block_main: int = 10, block_sigma: int = 5):
    """Multi-start momentum ascent over the pose; returns (pose, traces).

    Restart k starts from the seed pose (identity if none) with the
    rotation offset by k * 360 / restarts. The returned pose is the
    restart with the highest final score, ties broken by the lowest
    restart index; its rotation is reported modulo 360.
    """
    if opt is None:
        opt = OptimizerConfig(method="momentum-gd", step_size=1e-2, momentum=0.95,
                              max_iterations=150, tolerance=1e-5, window=20)
    if block_main < 1 or block_sigma < 0:
        raise ValueError("block lengths must be >= 1 main, >= 0 sigma")
    seed = seed_pose or Pose2D()
    traces = []
    for k in range(problem.restarts):
        start = replace(seed, r=seed.r + 360.0 * k / problem.restarts)
        traces.append(_ascend(problem, start, opt, k, block_main, block_sigma))
    alive = [t for t in traces if not t.diverged]
    if not alive:
        raise AlignmentDivergence(f"all {problem.restarts} restarts diverged")
    best = max(alive, key=lambda t: (t.similarity, -t.restart))
    return best.pose.canonical(), traces
