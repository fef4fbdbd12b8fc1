"""Command-line front end: extraction, inversion, alignment, gradient
checking and metrics, with deterministic seeding and atomic outputs.

Exit codes: 0 success, 2 I/O error, 3 configuration error, 4 divergence,
5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .align import (AlignmentDivergence, AlignmentProblem, PARAM_NAMES, Pose2D,
                    estimate_pose, pose_gradient, sweep)
from .hog import HogConfig, HogDescriptor, compute_hog, hog_forward
from .image_io import FormatError, Image, load_image, read_descriptor, save_image, write_descriptor
from .metrics import compare_images
from .preimage import (DivergenceError, OptimizerConfig, ReconstructionProblem,
                       objective, reconstruct)

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5

_SWEEP_GRIDS = {
    "tx": np.arange(-8.0, 8.01, 0.5),
    "ty": np.arange(-8.0, 8.01, 0.5),
    "r": np.arange(-180.0, 180.01, 2.0),
    "sigma": np.arange(-0.3, 0.301, 0.02),
}


def _atomic_text(path, text: str):
    # same temp-then-rename discipline as the binary writers: no partial
    # files are left behind on error
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _cell_text(v) -> str:
    # floats through repr(float(.)) so numpy scalars do not leak their type
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell_text(v) for v in row))
    return "\n".join(lines) + "\n"


def _gray(img: Image) -> np.ndarray:
    a = img.data
    if a.ndim == 3:
        from .hog import GRAY_WEIGHTS
        a = a @ np.asarray(GRAY_WEIGHTS)
    return a


def _center_crop(a: np.ndarray, cell: int, label: str) -> np.ndarray:
    h, w = a.shape[:2]
    ch, cw = h - h % cell, w - w % cell
    if ch < cell or cw < cell:
        raise ValueError(f"{label}: extents {h}x{w} too small for cell size {cell}")
    if (ch, cw) != (h, w):
        print(f"warning: {label} extents {h}x{w} not divisible by {cell}, "
              f"center-cropping to {ch}x{cw}", file=sys.stderr)
        a = a[(h - ch) // 2:(h - ch) // 2 + ch, (w - cw) // 2:(w - cw) // 2 + cw]
    return a


def _hog_config(args) -> HogConfig:
    return HogConfig(cell=args.cell, bins=args.bins, signed=args.mode == "signed",
                     normalize=not getattr(args, "no_normalize", False))


# ---------------------------------------------------------------------------
# subcommands

def cmd_extract(args) -> int:
    cfg = _hog_config(args)
    img = _center_crop(_gray(load_image(args.input)), cfg.cell, args.input)
    write_descriptor(compute_hog(img, cfg), args.output)
    if args.verbose:
        gh, gw, nb = cfg.grid_shape(img.shape)
        print(f"wrote {gh}x{gw}x{nb} descriptor to {args.output}", file=sys.stderr)
    return EXIT_OK


def _scale_factor(full_shape, shape) -> int:
    rh, rem_h = divmod(full_shape[0], shape[0])
    rw, rem_w = divmod(full_shape[1], shape[1])
    if rem_h or rem_w or rh != rw:
        raise ValueError(f"target image shape {shape} is not an integer "
                         f"root-scale reduction of {full_shape}")
    return rh * rh


def cmd_invert(args) -> int:
    schedule = {"single": "single", "multi": "multi-scale",
                "multi-more": "multi-scale-more"}[args.schedule]
    if schedule != "multi-scale-more" and len(args.target) != 1:
        raise ValueError(f"schedule {args.schedule!r} takes exactly one target file")
    descs = [read_descriptor(p) for p in args.target]
    full = max(descs, key=lambda d: d.image_shape[0] * d.image_shape[1])
    targets = {}
    for d in descs:
        s = _scale_factor(full.image_shape, d.image_shape)
        if s in targets:
            raise ValueError(f"duplicate target for scale factor {s}")
        targets[s] = d
    init = {"gray": "mid-gray", "noise": "noise"}[args.init]
    problem = ReconstructionProblem(targets=targets, cfg=full.config, xi=args.xi,
                                    schedule=schedule, init=init, seed=args.seed,
                                    dc_correct=args.dc_correct)
    method = {"momentum": "momentum-gd", "dogleg": "dogleg"}[args.opt]
    opt = OptimizerConfig(method=method, max_iterations=args.iters)
    x, trace = reconstruct(problem, opt)
    save_image(Image(np.clip(x, 0.0, 1.0)), args.output)
    if args.trace:
        _atomic_text(args.trace, _csv(
            ("iteration", "stage", "energy", "feature", "smoothness"),
            [(r.iteration, r.stage, r.energy, r.feature, r.smoothness) for r in trace]))
    if args.verbose:
        e = trace[-1].energy if trace else math.nan
        print(f"reconstructed {x.shape[0]}x{x.shape[1]} image, final E={e:.6g}",
              file=sys.stderr)
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = _hog_config(args)
    template = _gray(load_image(args.template))
    patch = _gray(load_image(args.target_patch))
    problem = AlignmentProblem(template=template, target=compute_hog(patch, cfg),
                               cfg=cfg, patch_shape=patch.shape, restarts=args.restarts)
    if args.sweep:
        rows = sweep(problem, args.sweep, _SWEEP_GRIDS[args.sweep])
        text = _csv(("param", "value", "similarity", "gradient"),
                    [(args.sweep, v, s, g) for v, s, g in rows])
        if args.output:
            _atomic_text(args.output, text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    opt = OptimizerConfig(method="momentum-gd", step_size=1e-2, momentum=0.95,
                          max_iterations=args.iters, tolerance=1e-5, window=20)
    pose, traces = estimate_pose(problem, opt=opt)
    best = max((t.similarity for t in traces if not t.diverged), default=-math.inf)
    doc = {"tx": pose.tx, "ty": pose.ty, "r": pose.r, "sigma": pose.sigma,
           "scale": pose.scale, "similarity": best, "restarts": args.restarts,
           "diverged": sum(t.diverged for t in traces)}
    text = json.dumps(doc, indent=2) + "\n"
    if args.output:
        _atomic_text(args.output, text)
    else:
        sys.stdout.write(text)
    if args.trace:
        _atomic_text(args.trace, _csv(
            ("restart", "iteration", "phase", "similarity", "tx", "ty", "r", "sigma"),
            [(r.restart, r.iteration, r.phase, r.similarity, r.tx, r.ty, r.r, r.sigma)
             for t in traces for r in t.rows]))
    return EXIT_OK


def _worst(reports):
    # aggregate so the printed line covers every probe of the run
    return ad.GradcheckReport(
        max_rel_error=max(r.max_rel_error for r in reports),
        n_checked=sum(r.n_checked for r in reports),
        n_excluded=sum(r.n_excluded for r in reports),
        tol=reports[0].tol,
        failures=[f for r in reports for f in r.failures])


def _gradcheck_primitives(trials, h, tol, seed):
    reports = []
    for t in range(trials):
        rng = np.random.default_rng(seed + t)
        a = rng.uniform(0.1, 0.9, (6, 6))
        b = rng.uniform(0.1, 0.9, (6, 6))
        w = rng.normal(size=(6, 6))
        w4 = rng.normal(size=(4, 4))
        wc = rng.normal(size=(3, 3))
        k = ad.Kernel(rng.normal(size=(3, 3)))
        cases = [
            lambda x: ad.dot(ad.add(x, b), w),
            lambda x: ad.dot(ad.mul(x, b), w),
            lambda x: ad.dot(ad.div(x, ad.add(ad.Node(b), 0.5)), w),
            lambda x: ad.dot(ad.square(x), w),
            lambda x: ad.dot(ad.sqrt(ad.add(x, 0.2)), w),
            lambda x: ad.dot(ad.atan2_deg(x, ad.Node(b)), w),
            lambda x: ad.dot(ad.conv2d_same(x, k), w),
            lambda x: ad.dot(ad.subsample(x, [0, 2, 4], [1, 3, 5]), wc),
            lambda x: ad.dot(ad.resize_bilinear(x, (3, 3)), wc),
            lambda x: ad.dot(ad.warp_bilinear(x, 0.3, -0.2, 10.0, 0.02, (4, 4)), w4),
            lambda x: ad.l2norm(x),
        ]
        for f in cases:
            reports.append(ad.gradcheck(f, a, h=h, tol=tol, n_coords=12, seed=seed + t))
    return _worst(reports)


def _gradcheck_hog(trials, h, tol, seed):
    cfg = HogConfig(cell=8)
    reports = []
    for t in range(trials):
        rng = np.random.default_rng(seed + t)
        img = rng.uniform(0.05, 0.95, (64, 64))
        w = rng.normal(size=(8, 8, cfg.bins))
        f = lambda x: ad.dot(hog_forward(x, cfg), w)
        reports.append(ad.gradcheck(f, img, h=h, tol=tol, n_coords=24, seed=seed + t))
    return _worst(reports)


def _gradcheck_objective(trials, h, tol, seed):
    cfg = HogConfig(cell=8)
    reports = []
    for t in range(trials):
        rng = np.random.default_rng(seed + 100 + t)
        img = rng.uniform(0.05, 0.95, (64, 64))
        target = compute_hog(rng.uniform(0.05, 0.95, (64, 64)), cfg)
        f = lambda x: objective(x, target, 100.0)
        reports.append(ad.gradcheck(f, img, h=h, tol=tol, n_coords=24, seed=seed + t))
    return _worst(reports)


def _gradcheck_pose(trials, h, tol, seed):
    cfg = HogConfig(cell=8)
    reports = []
    for t in range(trials):
        rng = np.random.default_rng(seed + 200 + t)
        template = rng.uniform(0.05, 0.95, (96, 96))
        patch = ad.warp_bilinear(Node(template), 0.8, -0.6, 12.0, 0.03, (64, 64)).value
        problem = AlignmentProblem(template=template,
                                   target=compute_hog(np.clip(patch, 0.0, 1.0), cfg),
                                   cfg=cfg, patch_shape=(64, 64), restarts=1)

        def f(p):
            # the leaf is the 4-vector (tx, ty, r, sigma); slice it into the
            # scalar-shaped pose nodes the warp expects
            parts = [ad.subsample(p, [j]) for j in range(4)]
            warped = ad.warp_bilinear(Node(problem.template), *parts, problem.patch_shape)
            return ad.dot(hog_forward(warped, problem.cfg), problem.target.grid)

        p0 = np.array([0.3, -0.2, 20.0, 0.02]) + rng.uniform(-0.05, 0.05, 4)
        reports.append(ad.gradcheck(f, p0, h=h, tol=tol, n_coords=4, seed=seed + t))
    return _worst(reports)


# a pose perturbation moves every sample at once, so at the image-valued
# step some warp cell or orientation fold almost always flips and the
# coordinate is excluded; a finer step keeps most probes branch-clean
POSE_STEP = 1e-6


def cmd_gradcheck(args) -> int:
    tol = 1e-4
    whats = ["primitives", "hog", "objective", "pose"] if args.what == "all" else [args.what]
    runners = {"primitives": _gradcheck_primitives, "hog": _gradcheck_hog,
               "objective": _gradcheck_objective, "pose": _gradcheck_pose}
    ok = True
    for what in whats:
        step = min(args.step, POSE_STEP) if what == "pose" else args.step
        rep = runners[what](args.trials, step, tol, args.seed)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{what}: max_rel_error={rep.max_rel_error:.3e} "
              f"checked={rep.n_checked} excluded={rep.n_excluded} {status}")
        ok = ok and rep.passed
    return EXIT_OK if ok else EXIT_GRADCHECK


def _metric_row(name, a_path, b_path, mi_bins):
    a = _gray(load_image(a_path))
    b = _gray(load_image(b_path))
    rep = compare_images(a, b, mi_bins=mi_bins)
    return (name, rep.cross_correlation, rep.cross_correlation_raw,
            rep.mutual_information, rep.ssim)


def cmd_metrics(args) -> int:
    if bool(args.suite) == bool(args.a):
        raise ValueError("give either --a/--b or --suite, not both")
    if args.a:
        if not args.b:
            raise ValueError("--a needs --b")
        pairs = [(os.path.basename(args.a), args.a, args.b)]
    else:
        da, db = os.path.join(args.suite, "a"), os.path.join(args.suite, "b")
        if not (os.path.isdir(da) and os.path.isdir(db)):
            raise ValueError(f"--suite expects {args.suite}/a and {args.suite}/b directories")
        names = sorted(os.listdir(da))
        missing = [n for n in names if not os.path.exists(os.path.join(db, n))]
        if missing:
            raise ValueError(f"missing counterparts under {db}: {missing[:3]}")
        pairs = [(n, os.path.join(da, n), os.path.join(db, n)) for n in names]
    if not pairs:
        raise ValueError("empty suite")

    def work(item):
        name, pa, pb = item
        return _metric_row(name, pa, pb, args.mi_bins)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            rows = list(pool.map(work, pairs))
    else:
        rows = [work(p) for p in pairs]
    cols = np.array([r[1:] for r in rows], dtype=np.float64)
    mean = ("mean",) + tuple(float(v) for v in cols.mean(axis=0))
    header = ("name", "cross_correlation", "cross_correlation_raw",
              "mutual_information", "ssim")
    if args.format == "csv":
        text = _csv(header, rows + [mean])
    else:
        doc = {"pairs": [dict(zip(header, r)) for r in rows],
               "mean": dict(zip(header[1:], mean[1:]))}
        text = json.dumps(doc, indent=2) + "\n"
    if args.output:
        _atomic_text(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch

class _Parser(argparse.ArgumentParser):
    """Argument errors are configuration errors, so they exit with code 3."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _add_hog_flags(p):
    p.add_argument("--cell", type=int, default=8, help="cell size in pixels")
    p.add_argument("--bins", type=int, default=None,
                   help="orientation bins (default 9 unsigned, 18 signed)")
    p.add_argument("--mode", choices=("unsigned", "signed"), default="unsigned")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gradhog", description="differentiable HOG toolkit")
    ap.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    ap.add_argument("--threads", type=int, default=1,
                    help="parallelism across independent units")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute a descriptor file from an image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="GHOG descriptor file")
    _add_hog_flags(p)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("invert", help="reconstruct an image from descriptors")
    p.add_argument("--target", required=True, nargs="+",
                   help="GHOG file, or one per scale for multi-more")
    p.add_argument("--schedule", choices=("single", "multi", "multi-more"),
                   default="single")
    p.add_argument("--xi", type=float, default=1e2, help="smoothness weight")
    p.add_argument("--opt", choices=("momentum", "dogleg"), default="momentum")
    p.add_argument("--init", choices=("gray", "noise"), default="gray")
    p.add_argument("--iters", type=int, default=300, help="iteration cap per stage")
    p.add_argument("--dc-correct", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--output", required=True, help="reconstructed image file")
    p.add_argument("--trace", help="energy trace CSV")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("align", help="estimate the pose of a patch in a template")
    p.add_argument("--template", required=True)
    p.add_argument("--target-patch", required=True)
    _add_hog_flags(p)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--iters", type=int, default=150)
    p.add_argument("--sweep", choices=PARAM_NAMES,
                   help="emit a 1D similarity sweep instead of estimating")
    p.add_argument("--output", help="pose JSON or sweep CSV (default stdout)")
    p.add_argument("--trace", help="ascent trace CSV")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("gradcheck", help="finite-difference gate for the tape")
    p.add_argument("--what", choices=("primitives", "hog", "objective", "pose", "all"),
                   default="all")
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("metrics", help="compare images")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--suite", help="directory with a/ and b/ subdirectories "
                                   "holding same-named image pairs")
    p.add_argument("--mi-bins", type=int, default=32)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--output", help="report file (default stdout)")
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse error or --help
        return int(exc.code or 0)
    try:
        if args.threads < 1:
            raise ValueError(f"--threads must be >= 1, got {args.threads}")
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, AlignmentDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
