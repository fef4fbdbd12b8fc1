"""Descriptor inversion: recover an image whose HOG descriptor matches a target.

The objective is the euclidean feature distance plus a smoothed
total-variation prior, minimized either by clamped momentum gradient
descent (default) or by a dogleg trust-region Gauss-Newton method on the
equivalent least-squares residual vector. Three schedules are provided:
single-scale, a coarse-to-fine ladder against one full-resolution target
(multi-scale), and the same ladder against per-scale targets extracted
from downsampled originals (multi-scale-more).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Node
from .hog import HogConfig, HogDescriptor, compute_hog, hog_forward

__all__ = [
    "SMOOTH_DELTA",
    "MULTISCALE_FACTORS",
    "TraceRow",
    "DivergenceError",
    "OptimizerConfig",
    "ReconstructionProblem",
    "objective",
    "minimize",
    "reconstruct_multiscale",
    "reconstruct_multiscale_more",
    "reconstruct",
    "build_targets",
    "multiscale_plan",
    "initial_estimate",
    "boundary_dc_field",
]

# keeps the absolute-difference prior differentiable at zero
SMOOTH_DELTA = 1e-9

MULTISCALE_FACTORS = (64, 16, 4, 1)


@dataclass(frozen=True)
class TraceRow:
    """One objective evaluation: stage scale factor, iteration, and terms."""

    stage: int
    iteration: int
    energy: float
    feature: float
    smoothness: float


class DivergenceError(RuntimeError):
    """The objective exploded past 1e6 times its initial value."""

    def __init__(self, stage, iteration, energy, initial):
        super().__init__(
            f"diverged at stage {stage} iteration {iteration}: "
            f"E={energy:.6g} exceeds 1e6 x initial {initial:.6g}")
        self.stage = stage
        self.iteration = iteration
        self.energy = energy
        self.initial = initial


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "momentum-gd"  # or "dogleg"
    step_size: float = 5e-6
    momentum: float = 0.9
    max_iterations: int = 300
    tolerance: float = 1e-6  # relative best-energy decrease over the window
    window: int = 10
    trust_radius: float = 1.0  # dogleg only
    cg_iterations: int = 12  # dogleg only

    def __post_init__(self):
        if self.method not in ("momentum-gd", "dogleg"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_iterations < 0:
            raise ValueError("iteration cap must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.window < 1 or self.trust_radius <= 0 or self.cg_iterations < 1:
            raise ValueError("bad optimizer configuration")


@dataclass
class ReconstructionProblem:
    """Targets plus the knobs that define one inversion run."""

    targets: dict  # scale factor -> HogDescriptor
    cfg: HogConfig
    xi: float = 100.0
    schedule: str = "single"  # single | multi-scale | multi-scale-more
    init: str = "mid-gray"  # mid-gray | noise
    seed: int = 0
    x0: np.ndarray | None = None  # explicit initial estimate, overrides init
    xi_decay: bool = False  # linearly anneal xi to 0 over each stage
    dc_correct: str = "auto"  # auto | on | off, see boundary_dc_field

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("smoothness weight must be >= 0")
        if self.schedule not in ("single", "multi-scale", "multi-scale-more"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.init not in ("mid-gray", "noise"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.dc_correct not in ("auto", "on", "off"):
            raise ValueError(f"unknown dc_correct mode {self.dc_correct!r}")
        bad = set(self.targets) - set(MULTISCALE_FACTORS)
        if bad:
            raise ValueError(f"scale factors must be among {MULTISCALE_FACTORS}, got {sorted(bad)}")
        if 1 not in self.targets:
            raise ValueError("a full-resolution target (scale factor 1) is required")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=np.float64)
            if self.x0.shape != self.full_shape:
                raise ValueError(
                    f"initial estimate shape {self.x0.shape} does not match "
                    f"target image shape {self.full_shape}")

    @property
    def full_shape(self):
        return self.targets[1].image_shape


def initial_estimate(shape, mode: str, seed: int = 0) -> np.ndarray:
    """Mid-gray plane or seeded uniform noise in [0.4, 0.6]."""
    if mode == "mid-gray":
        return np.full(shape, 0.5)
    if mode == "noise":
        return np.random.default_rng(seed).uniform(0.4, 0.6, shape)
    raise ValueError(f"unknown init {mode!r}")


# ---------------------------------------------------------------------------
# boundary luminance recovery
#
# The gradient masks are zero padded, so the outermost pixel ring's gradient
# equals the absolute intensity of the adjacent ring and points into the
# image. Boundary cells therefore carry luminance information the interior
# cells, being derivative based, do not; in unsigned mode the interior is
# exactly blind to smooth luminance fields (a contrast flip leaves every
# interior cell unchanged), which leaves the smooth component of an estimate
# wherever the initialization put it. Re-estimating it from the boundary
# cells removes that arbitrariness.

def _unnormalize_grid(grid: np.ndarray, cfg: HogConfig) -> np.ndarray:
    """Invert the global contrast normalization, recovering raw votes."""
    if not cfg.normalize:
        return grid
    n = float(np.linalg.norm(grid))
    if cfg.norm_style == "paper":
        # n = u / sqrt(u + eps) with u the raw grid norm
        u = 0.5 * (n ** 2 + math.sqrt(n ** 4 + 4.0 * cfg.epsilon * n ** 2))
        factor = math.sqrt(u + cfg.epsilon)
    else:
        # n^2 = u^2 / (u^2 + eps)
        factor = math.sqrt(cfg.epsilon / max(1.0 - n ** 2, 1e-12))
    return grid * factor


def _side_bin_weights(theta: float, bins: int, orientation_range: float):
    """Vote split of an orientation over its two adjacent bins (centers at b*R/B)."""
    pos = theta / (orientation_range / bins)
    left = math.floor(pos)
    frac = pos - left
    pairs = [(left % bins, 1.0 - frac), ((left + 1) % bins, frac)]
    return [(b, w) for b, w in pairs if w > 1e-12]


def boundary_dc_field(target: HogDescriptor) -> np.ndarray:
    """Smooth luminance field consistent with the descriptor's boundary cells.

    Each side's cells are read at the orientation the zero-padding ring
    produces (horizontal-in for the vertical sides, vertical-in for the
    horizontal ones); the matching bins of the adjacent interior cells are
    subtracted to cancel genuine image edges, the per-cell estimates are
    converted to intensities, and the interior is filled with the harmonic
    interpolant of the border profiles (their unique minimal-Laplacian
    continuation), upsampled and blurred to image resolution.
    """
    cfg = target.config
    c = cfg.cell
    grid = _unnormalize_grid(target.grid, cfg)
    gh, gw, nbins = grid.shape
    full = cfg.orientation_range
    # ring tent mass per side: the even 2c-tap tent anchors half a pixel off
    # center, so the near sides weigh the ring by (c-1)/2c and the far sides
    # by (c+3)/2c, times the tangential tent mass c
    mass_near = (c - 1) / 2.0
    mass_far = (c + 3) / 2.0

    def side(outer, inner, theta, mass):
        pairs = _side_bin_weights(theta, nbins, full)
        votes = sum(w * outer[:, b] for b, w in pairs)
        if inner is not None:
            votes = votes - sum(w * inner[:, b] for b, w in pairs)
        scale = mass * sum(w * w for _, w in pairs)
        est = np.clip(votes / scale, 0.0, 1.0)
        # corner cells lose part of their tangential tent to the image edge;
        # drop them when enough interior cells remain
        if est.shape[0] > 2:
            est = est.copy()
            est[0] = est[-1] = np.nan
        return est

    # leakage subtraction needs an interior ring that is not itself a border;
    # on 2-cell-wide grids the opposite side would cancel its own signal
    left = side(grid[:, 0], grid[:, 1] if gw > 2 else None, 0.0, mass_near)
    right = side(grid[:, -1], grid[:, -2] if gw > 2 else None, 180.0, mass_far)
    top = side(grid[0], grid[1] if gh > 2 else None, 90.0, mass_near)
    bottom = side(grid[-1], grid[-2] if gh > 2 else None,
                  270.0 if cfg.signed else 90.0, mass_far)

    prof = np.full((gh, gw), np.nan)
    prof[:, 0] = left
    prof[:, -1] = right
    prof[0, :] = top
    prof[-1, :] = bottom
    known = np.isfinite(prof)
    f = np.where(known, prof, np.mean(prof[known]))
    # Jacobi relaxation toward the harmonic interpolant of the known cells
    for _ in range(100 * max(gh, gw)):
        p = np.pad(f, 1, mode="edge")
        avg = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
        f = np.where(known, f, avg)
    field = np.kron(f, np.ones((c, c)))
    return gaussian_filter(field, 1.5 * c)


def _should_dc_correct(problem: "ReconstructionProblem") -> bool:
    # unsigned interiors are exactly blind to the smooth field and signed
    # ones merely near-blind, so the recalibration helps either mode
    return problem.dc_correct != "off"


def _dc_corrected(x: np.ndarray, target: HogDescriptor, field=None) -> np.ndarray:
    sigma = 1.5 * target.config.cell
    if field is None:
        field = boundary_dc_field(target)
    return np.clip(x - gaussian_filter(x, sigma) + field, 0.0, 1.0)


def _fused_dc_field(targets: dict, scale: int, shape) -> np.ndarray:
    """Mean of the boundary fields of every target at `scale` or coarser.

    Each scale reads the same border luminance with a different effective
    cell size and harmonic support, so averaging them cancels a good part
    of the per-scale estimation error.
    """
    fields = [_resize_to(boundary_dc_field(t), shape)
              for s, t in sorted(targets.items()) if s >= scale]
    return np.mean(fields, axis=0)


def _maybe_dc_correct(x, trace, problem, opt, stage, target=None, field=None):
    # a zero-iteration run must hand back the untouched initialization
    if opt.max_iterations == 0 or not _should_dc_correct(problem):
        return x
    if target is None:
        target = problem.targets[1]
    x = _dc_corrected(x, target, field)
    iteration = trace[-1].iteration + 1 if trace else 0
    if opt.method == "dogleg":
        r = _residual_node(Node(x), target, problem.xi).value
        nf = int(np.prod(target.grid.shape))
        feat = 0.5 * float(np.vdot(r[:nf], r[:nf]))
        smooth = 0.5 * float(np.vdot(r[nf:], r[nf:]))
        trace.append(TraceRow(stage, iteration, feat + smooth, feat, smooth))
    else:
        energy, feat, smooth = _objective_parts(Node(x), target, problem.xi)
        trace.append(TraceRow(stage, iteration, float(energy.value.reshape(())),
                              float(feat.value.reshape(())), float(smooth.value.reshape(()))))
    return x


# ---------------------------------------------------------------------------
# objective

def _neighbor_diffs(img: Node):
    h, w = img.value.shape
    rows, cols = np.arange(h), np.arange(w)
    right = ad.sub(ad.subsample(img, rows, cols[1:]), ad.subsample(img, rows, cols[:-1]))
    down = ad.sub(ad.subsample(img, rows[1:], cols), ad.subsample(img, rows[:-1], cols))
    return right, down


def _objective_parts(img: Node, target: HogDescriptor, xi: float):
    if img.value.ndim != 2 or img.value.shape != target.image_shape:
        raise ValueError(
            f"estimate shape {img.value.shape} does not match target image shape {target.image_shape}")
    phi = hog_forward(img, target.config)
    feature = ad.l2norm(ad.sub(phi, target.grid))
    right, down = _neighbor_diffs(img)
    smooth = ad.add(
        ad.reduce_sum(ad.sqrt(ad.add(ad.square(right), SMOOTH_DELTA ** 2))),
        ad.reduce_sum(ad.sqrt(ad.add(ad.square(down), SMOOTH_DELTA ** 2))))
    return ad.add(feature, ad.mul(smooth, xi)), feature, smooth


def objective(img: Node, target: HogDescriptor, xi: float) -> Node:
    """E(Î) = ||phi(Î) - target|| + xi * sum of smoothed neighbor differences."""
    energy, _, _ = _objective_parts(img, target, xi)
    return energy


# ---------------------------------------------------------------------------
# momentum descent

def _run_momentum(x0, target, xi, opt: OptimizerConfig, stage: int, xi_decay: bool):
    x = x0.copy()
    v = np.zeros_like(x)
    trace = []
    best_hist = []
    best_x, best_e = x0.copy(), math.inf
    e0 = None
    for i in range(opt.max_iterations + 1):
        decay = max(0.0, 1.0 - i / opt.max_iterations) if (xi_decay and opt.max_iterations) else 1.0
        img = Node(x)
        energy, feat, smooth = _objective_parts(img, target, xi * decay)
        e = float(energy.value.reshape(()))
        trace.append(TraceRow(stage, i, e, float(feat.value.reshape(())),
                              float(smooth.value.reshape(()))))
        if e0 is None:
            e0 = e
        if not np.isfinite(e) or e > 1e6 * e0:
            raise DivergenceError(stage, i, e, e0)
        if e < best_e:
            best_e, best_x = e, x.copy()
        best_hist.append(min(best_hist[-1], e) if best_hist else e)
        # the window only becomes meaningful once the velocity has built up,
        # about 1/(1-beta) iterations, or a warm start stops at the gate
        warmup = int(round(1.0 / (1.0 - opt.momentum)))
        if i >= opt.window + warmup:
            prev = best_hist[-opt.window - 1]
            if prev - best_hist[-1] < opt.tolerance * max(prev, 1e-30):
                break
        if i == opt.max_iterations:
            break
        ad.backward(energy)
        v = opt.momentum * v - opt.step_size * img.adjoint
        x = np.clip(x + v, 0.0, 1.0)
    # fixed-step momentum orbits the L1 prior's kinks, so the last iterate
    # can sit above the floor it passed through; hand back the best one
    return best_x, trace


# ---------------------------------------------------------------------------
# dogleg trust region on the least-squares residuals

def _residual_node(img: Node, target: HogDescriptor, xi: float) -> Node:
    """[phi(Î) - target, sqrt(xi) * right diffs, sqrt(xi) * down diffs], flattened."""
    phi = hog_forward(img, target.config)
    right, down = _neighbor_diffs(img)
    w = math.sqrt(xi)
    return ad.concat_flat([ad.sub(phi, target.grid), ad.mul(right, w), ad.mul(down, w)])


def _run_dogleg(x0, target, xi, opt: OptimizerConfig, stage: int):
    if x0.shape != target.image_shape:
        raise ValueError(
            f"estimate shape {x0.shape} does not match target image shape {target.image_shape}")
    shape = x0.shape
    n_feat = int(np.prod(target.grid.shape))

    # the residual graph at the current iterate is reused for the gradient
    # and every J^T product of the CG solve (backward passes only)
    cache = {}

    def _graph_at(x):
        if cache.get("x") is not x:
            img = Node(x)
            cache.update(x=x, img=img, res=_residual_node(img, target, xi))
        return cache["img"], cache["res"]

    def residual(x):
        return _residual_node(Node(x), target, xi).value

    def grad_and_residual(x):
        img, r = _graph_at(x)
        ad.backward(ad.mul(ad.square(ad.l2norm(r)), 0.5))
        return img.adjoint.copy(), r.value

    def jt_product(x, u):
        img, r = _graph_at(x)
        ad.backward(ad.dot(r, u))
        return img.adjoint.ravel()

    def j_product(x, v):
        vmax = np.max(np.abs(v))
        if vmax == 0.0:
            return np.zeros_like(residual(x))
        eps = 1e-6 / vmax
        dv = (eps * v).reshape(shape)
        return (residual(x + dv) - residual(x - dv)) / (2.0 * eps)

    def cost_terms(r):
        feat = 0.5 * float(np.vdot(r[:n_feat], r[:n_feat]))
        smooth = 0.5 * float(np.vdot(r[n_feat:], r[n_feat:]))
        return feat + smooth, feat, smooth

    def gauss_newton_step(x, g):
        # CG on the normal equations with matrix-free J^T J products
        p = np.zeros_like(g)
        resid = -g
        d = resid.copy()
        rs = float(np.vdot(resid, resid))
        stop = max(1e-2 * math.sqrt(rs), 1e-14)
        for _ in range(opt.cg_iterations):
            if math.sqrt(rs) <= stop:
                break
            jd = j_product(x, d)
            hd = jt_product(x, jd)
            dhd = float(np.vdot(d, hd))
            if dhd <= 0.0:
                break
            alpha = rs / dhd
            p = p + alpha * d
            resid = resid - alpha * hd
            rs_new = float(np.vdot(resid, resid))
            d = resid + (rs_new / rs) * d
            rs = rs_new
        return p

    def dogleg_step(p_gn, p_sd, radius):
        if np.linalg.norm(p_gn) <= radius:
            return p_gn
        n_sd = np.linalg.norm(p_sd)
        if n_sd >= radius:
            return (radius / n_sd) * p_sd
        # intersection of the segment p_sd -> p_gn with the radius sphere
        d = p_gn - p_sd
        a = float(np.vdot(d, d))
        b = 2.0 * float(np.vdot(p_sd, d))
        c = float(np.vdot(p_sd, p_sd)) - radius * radius
        t = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2.0 * a)
        return p_sd + t * d

    x = x0.copy()
    radius = opt.trust_radius
    trace = []
    best_hist = []
    g, r = grad_and_residual(x)
    cost, feat, smooth = cost_terms(r)
    c0 = cost
    for i in range(opt.max_iterations + 1):
        trace.append(TraceRow(stage, i, cost, feat, smooth))
        if not np.isfinite(cost) or cost > 1e6 * c0:
            raise DivergenceError(stage, i, cost, c0)
        best_hist.append(min(best_hist[-1], cost) if best_hist else cost)
        if i >= opt.window:
            prev = best_hist[-opt.window - 1]
            if prev - best_hist[-1] < opt.tolerance * max(prev, 1e-30):
                break
        if i == opt.max_iterations or np.max(np.abs(g)) < 1e-12 or radius < 1e-12:
            break
        gf = g.ravel()
        jg = j_product(x, gf)
        jg2 = float(np.vdot(jg, jg))
        if jg2 == 0.0:
            break
        p_sd = -(float(np.vdot(gf, gf)) / jg2) * gf
        p_gn = gauss_newton_step(x, gf).ravel()
        p = dogleg_step(p_gn, p_sd, radius)
        jp = j_product(x, p.reshape(shape))
        predicted = -float(np.vdot(gf, p)) - 0.5 * float(np.vdot(jp, jp))
        x_new = np.clip(x + p.reshape(shape), 0.0, 1.0)
        r_new = residual(x_new)
        cost_new = cost_terms(r_new)[0]
        actual = cost - cost_new
        rho = actual / predicted if predicted > 0 else -1.0
        if rho > 0.75:
            radius *= 2.0
        elif rho < 0.25:
            radius *= 0.25
        if actual > 0.0:
            x = x_new
            g, r = grad_and_residual(x)
            cost, feat, smooth = cost_terms(r)
    return x, trace


# ---------------------------------------------------------------------------
# schedules

def _minimize_stage(x0, target, xi, opt, stage, xi_decay):
    if opt.method == "momentum-gd":
        return _run_momentum(x0, target, xi, opt, stage, xi_decay)
    return _run_dogleg(x0, target, xi, opt, stage)


def _check_target_config(problem, target):
    if target.config != problem.cfg:
        raise ValueError(
            f"target config {target.config} inconsistent with problem config {problem.cfg}")


def minimize(problem: ReconstructionProblem, opt: OptimizerConfig):
    """Single-scale inversion of the full-resolution target.

    Returns the estimate in [0, 1] and the per-iteration trace.
    """
    target = problem.targets[1]
    _check_target_config(problem, target)
    x0 = _initial_full(problem, problem.full_shape)
    x, trace = _minimize_stage(x0, target, problem.xi, opt, 1, problem.xi_decay)
    x = _maybe_dc_correct(x, trace, problem, opt, 1)
    return x, trace


def multiscale_plan(shape, cfg: HogConfig):
    """Feasible (scale factor, root, cell) stages, coarse to fine.

    A stage is skipped when the reduced cell size would degenerate below 2
    or the reduced extents are not divisible by it.
    """
    h, w = shape
    stages = []
    for s in MULTISCALE_FACTORS:
        rt = math.isqrt(s)
        cell = cfg.cell // rt
        if cfg.cell % rt or cell < 2:
            continue
        if h % rt or w % rt or (h // rt) % cell or (w // rt) % cell:
            continue
        stages.append((s, rt, cell))
    return stages


def _resize_to(x, shape):
    if x.shape == tuple(shape):
        return x
    return ad.resize_bilinear(Node(x), shape).value


def _initial_full(problem, shape):
    if problem.x0 is not None:
        return np.clip(_resize_to(problem.x0, shape), 0.0, 1.0)
    return initial_estimate(shape, problem.init, problem.seed)


def reconstruct_multiscale(problem: ReconstructionProblem, opt: OptimizerConfig):
    """Coarse-to-fine ladder against the single full-resolution target.

    Stage s runs at extents divided by sqrt(s) with cell size divided by
    sqrt(s), so every stage shares the target's descriptor grid; the
    estimate is bilinearly upsampled between stages.
    """
    target = problem.targets[1]
    _check_target_config(problem, target)
    h, w = problem.full_shape
    stages = multiscale_plan((h, w), problem.cfg)
    x = None
    trace = []
    for s, rt, cell in stages:
        stage_shape = (h // rt, w // rt)
        if x is None:
            x = _initial_full(problem, stage_shape)
        else:
            x = np.clip(_resize_to(x, stage_shape), 0.0, 1.0)
        stage_cfg = problem.cfg.with_cell(cell)
        stage_target = HogDescriptor(target.grid, stage_cfg)
        x, rows = _minimize_stage(x, stage_target, problem.xi, opt, s, problem.xi_decay)
        trace.extend(rows)
    x = _maybe_dc_correct(x, trace, problem, opt, stages[-1][0] if stages else 1)
    return x, trace


def reconstruct_multiscale_more(problem: ReconstructionProblem, opt: OptimizerConfig):
    """Same ladder, but each stage matches the descriptor of the downsampled
    original at the full cell size, so coarse stages see coarse targets."""
    h, w = problem.full_shape
    stages = _more_plan((h, w), problem.cfg)
    x = None
    trace = []
    for s, rt in stages:
        if s not in problem.targets:
            raise ValueError(f"missing target for scale factor {s}")
        stage_target = problem.targets[s]
        _check_target_config(problem, stage_target)
        stage_shape = (h // rt, w // rt)
        if stage_target.image_shape != stage_shape:
            raise ValueError(
                f"target for scale {s} has image shape {stage_target.image_shape}, expected {stage_shape}")
        if x is None:
            x = _initial_full(problem, stage_shape)
        else:
            x = np.clip(_resize_to(x, stage_shape), 0.0, 1.0)
        x, rows = _minimize_stage(x, stage_target, problem.xi, opt, s, problem.xi_decay)
        trace.extend(rows)
        # every stage target is a true descriptor of a downsampling of the
        # original, so the luminance gauge is recalibrated against the fused
        # boundary fields of every target at this scale or coarser
        fused = _fused_dc_field(problem.targets, s, stage_shape) if _should_dc_correct(problem) else None
        x = _maybe_dc_correct(x, trace, problem, opt, s, stage_target, fused)
    return x, trace


def _more_plan(shape, cfg: HogConfig):
    """Stages for the per-scale-target ladder: fixed cell, shrinking extents."""
    h, w = shape
    stages = []
    for s in MULTISCALE_FACTORS:
        rt = math.isqrt(s)
        if h % rt or w % rt:
            continue
        hs, ws = h // rt, w // rt
        if hs % cfg.cell or ws % cfg.cell or min(hs, ws) < max(cfg.cell, 3):
            continue
        # a single-cell descriptor carries no spatial structure
        if hs // cfg.cell < 2 or ws // cfg.cell < 2:
            continue
        stages.append((s, rt))
    return stages


def build_targets(img: np.ndarray, cfg: HogConfig, schedule: str = "single") -> dict:
    """Descriptors an inversion needs: s=1 always, plus per-scale descriptors
    of the bilinearly downsampled image for multi-scale-more."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("targets are built from grayscale images")
    targets = {1: compute_hog(img, cfg)}
    if schedule == "multi-scale-more":
        for s, rt in _more_plan(img.shape, cfg):
            if s == 1:
                continue
            small = _resize_to(img, (img.shape[0] // rt, img.shape[1] // rt))
            targets[s] = compute_hog(np.clip(small, 0.0, 1.0), cfg)
    return targets


def reconstruct(problem: ReconstructionProblem, opt: OptimizerConfig):
    """Dispatch on the problem's schedule. Returns (estimate, trace)."""
    if problem.schedule == "single":
        return minimize(problem, opt)
    if problem.schedule == "multi-scale":
        return reconstruct_multiscale(problem, opt)
    return reconstruct_multiscale_more(problem, opt)
