"""Reverse-mode automatic differentiation over dense 1D/2D/3D float64 tensors.

The operation set is deliberately small: exactly the pointwise, convolution,
sampling, warping, and reduction primitives needed to express an oriented-
gradient descriptor pipeline and the optimization objectives built on it.
Tensors are plain ``numpy.ndarray`` of dtype float64 (0-d arrays serve as
scalars); a :class:`Node` wraps one tensor together with its place in the
computation graph and a lazily allocated adjoint slot.

Graphs are rebuilt per evaluation (no in-place mutation), so piecewise
operations may freeze their branch choice at the current input values.
Branch choices are logged while a :func:`record_branches` context is active,
which lets the finite-difference checker exclude perturbations that cross a
clip or binning boundary instead of reporting them as gradient errors.

A graph and its nodes are confined to one thread; independent graphs may run
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import signal

__all__ = [
    "Node",
    "Kernel",
    "as_node",
    "add",
    "sub",
    "mul",
    "div",
    "square",
    "sqrt",
    "clip",
    "atan2_deg",
    "conv2d_same",
    "subsample",
    "resize_bilinear",
    "warp_bilinear",
    "reduce_sum",
    "dot",
    "l2norm",
    "stack_channels",
    "channel",
    "concat_flat",
    "backward",
    "gradcheck",
    "GradcheckReport",
    "record_branches",
    "log_branch",
]

_DEG_PER_RAD = 180.0 / math.pi


class Node:
    """A value in the computation graph: tensor, parents, and adjoint slot."""

    __slots__ = ("value", "parents", "op", "adjoint", "_backward")

    def __init__(self, value, parents=(), op="leaf", backward_fn=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 3:
            raise ValueError(f"tensors are limited to 3 dimensions, got {value.ndim}")
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values produced by op '{op}'")
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.adjoint = None
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar; scalars and arrays are promoted to constant nodes
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass(frozen=True)
class Kernel:
    """Fixed (non-differentiated) 2D correlation weights."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError(f"kernel must be 2D with positive extents, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def shape(self):
        return self.weights.shape


def as_node(x) -> Node:
    """Wrap an array or scalar as a leaf node (no parents)."""
    return x if isinstance(x, Node) else Node(x)


# ---------------------------------------------------------------------------
# branch logging (consumed by gradcheck to exclude boundary-crossing coords)

_BRANCH_LOG: list | None = None


class record_branches:
    """Context manager collecting branch signatures of ops evaluated inside."""

    def __enter__(self):
        global _BRANCH_LOG
        self._prev = _BRANCH_LOG
        _BRANCH_LOG = []
        return _BRANCH_LOG

    def __exit__(self, *exc):
        global _BRANCH_LOG
        _BRANCH_LOG = self._prev
        return False


def log_branch(arr):
    """Record a piecewise-branch signature (any integer/bool array)."""
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(np.asarray(arr).copy())


def _same_branches(log_a, log_b):
    if len(log_a) != len(log_b):
        return False
    return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(log_a, log_b))


# ---------------------------------------------------------------------------
# elementwise ops

def _accumulate(node: Node, grad: np.ndarray):
    """Add ``grad`` into a parent's adjoint, reducing a broadcast scalar."""
    if node.adjoint is None:
        return
    if node.value.shape != grad.shape:
        # only scalar broadcasting is supported, so the mismatch is scalar-vs-array
        grad = np.asarray(grad.sum()).reshape(node.value.shape)
    node.adjoint += grad


def _binary_operands(a, b, op_name):
    """Validate operand shapes for a pointwise binary op (equal or scalar)."""
    a_val = a.value if isinstance(a, Node) else np.asarray(a, dtype=np.float64)
    b_val = b.value if isinstance(b, Node) else np.asarray(b, dtype=np.float64)
    if a_val.shape != b_val.shape and a_val.size != 1 and b_val.size != 1:
        raise ValueError(f"{op_name}: shape mismatch {a_val.shape} vs {b_val.shape}")
    return a_val, b_val


def add(a, b) -> Node:
    a_val, b_val = _binary_operands(a, b, "add")
    parents = tuple(x for x in (a, b) if isinstance(x, Node))
    out = Node(a_val + b_val, parents, "add")

    def backward_fn(adj):
        if isinstance(a, Node):
            _accumulate(a, adj)
        if isinstance(b, Node):
            _accumulate(b, adj)

    out._backward = backward_fn
    return out


def sub(a, b) -> Node:
    a_val, b_val = _binary_operands(a, b, "sub")
    parents = tuple(x for x in (a, b) if isinstance(x, Node))
    out = Node(a_val - b_val, parents, "sub")

    def backward_fn(adj):
        if isinstance(a, Node):
            _accumulate(a, adj)
        if isinstance(b, Node):
            _accumulate(b, -adj)

    out._backward = backward_fn
    return out


def mul(a, b) -> Node:
    a_val, b_val = _binary_operands(a, b, "mul")
    parents = tuple(x for x in (a, b) if isinstance(x, Node))
    out = Node(a_val * b_val, parents, "mul")

    def backward_fn(adj):
        if isinstance(a, Node):
            _accumulate(a, adj * b_val)
        if isinstance(b, Node):
            _accumulate(b, adj * a_val)

    out._backward = backward_fn
    return out


def div(a, b) -> Node:
    a_val, b_val = _binary_operands(a, b, "div")
    if np.any(b_val == 0.0):
        raise ZeroDivisionError("div: zero element in denominator (guard with an epsilon)")
    parents = tuple(x for x in (a, b) if isinstance(x, Node))
    out = Node(a_val / b_val, parents, "div")

    def backward_fn(adj):
        if isinstance(a, Node):
            _accumulate(a, adj / b_val)
        if isinstance(b, Node):
            _accumulate(b, -adj * a_val / (b_val * b_val))

    out._backward = backward_fn
    return out


def square(a: Node) -> Node:
    a = as_node(a)
    out = Node(a.value * a.value, (a,), "square")

    def backward_fn(adj):
        _accumulate(a, adj * (2.0 * a.value))

    out._backward = backward_fn
    return out


def sqrt(a: Node) -> Node:
    a = as_node(a)
    if np.any(a.value < 0.0):
        raise ValueError("sqrt: negative input element")
    root = np.sqrt(a.value)
    out = Node(root, (a,), "sqrt")

    def backward_fn(adj):
        _accumulate(a, adj / (2.0 * root))

    out._backward = backward_fn
    return out


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; adjoint is 1 strictly inside, 0 outside and at boundaries."""
    a = as_node(a)
    if not lo < hi:
        raise ValueError(f"clip: need lo < hi, got [{lo}, {hi}]")
    inside = (a.value > lo) & (a.value < hi)
    log_branch(inside)
    out = Node(np.clip(a.value, lo, hi), (a,), "clip")

    def backward_fn(adj):
        _accumulate(a, adj * inside)

    out._backward = backward_fn
    return out


def atan2_deg(y: Node, x: Node) -> Node:
    """Two-argument arctangent in degrees, range (-180, 180]; 0 at the origin."""
    y, x = as_node(y), as_node(x)
    if y.value.shape != x.value.shape:
        raise ValueError(f"atan2: shape mismatch {y.value.shape} vs {x.value.shape}")
    theta = np.degrees(np.arctan2(y.value, x.value))
    # numpy maps (-0.0, negative) to -180; fold onto +180 to keep the stated range
    theta = np.where(theta == -180.0, 180.0, theta)
    denom = x.value * x.value + y.value * y.value
    nonzero = denom > 0.0
    safe = np.where(nonzero, denom, 1.0)
    out = Node(theta, (y, x), "atan2_deg")

    def backward_fn(adj):
        _accumulate(y, adj * np.where(nonzero, _DEG_PER_RAD * x.value / safe, 0.0))
        _accumulate(x, adj * np.where(nonzero, -_DEG_PER_RAD * y.value / safe, 0.0))

    out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# structured ops

def conv2d_same(a: Node, k: Kernel) -> Node:
    """Zero-padded correlation with output shape equal to the input shape.

    For even kernel extents the anchor sits at index (ceil(kh/2)-1, ceil(kw/2)-1),
    i.e. out[i,j] = sum_{u,v} a[i+u-au, j+v-av] * k[u,v] with zeros outside.
    """
    a = as_node(a)
    if isinstance(k, np.ndarray):
        k = Kernel(k)
    if a.value.ndim != 2:
        raise ValueError(f"conv2d_same: input must be 2D, got {a.value.ndim}D")
    h, w = a.value.shape
    kh, kw = k.shape
    if kh > 2 * h or kw > 2 * w:
        raise ValueError(f"conv2d_same: kernel {k.shape} larger than twice input {a.value.shape}")
    au, av = (kh + 1) // 2 - 1, (kw + 1) // 2 - 1
    weights = k.weights

    padded = np.pad(a.value, ((au, kh - 1 - au), (av, kw - 1 - av)))
    out = Node(signal.correlate(padded, weights, mode="valid", method="auto"), (a,), "conv2d_same")

    def backward_fn(adj):
        # transposed convolution: flipped kernel, swapped padding
        adj_padded = np.pad(adj, ((kh - 1 - au, au), (kw - 1 - av, av)))
        _accumulate(a, signal.correlate(adj_padded, weights[::-1, ::-1], mode="valid", method="auto"))

    out._backward = backward_fn
    return out


def _check_indices(idx, extent, what):
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"subsample: {what} indices must be a flat list")
    if idx.size == 0:
        raise ValueError(f"subsample: empty {what} index list")
    if np.any(idx < 0) or np.any(idx >= extent):
        raise IndexError(f"subsample: {what} index out of range [0, {extent})")
    return idx


def subsample(a: Node, rows, cols=None) -> Node:
    """Gather a[rows x cols] (outer-product indexing); 1D inputs take rows only."""
    a = as_node(a)
    if a.value.ndim == 1:
        if cols is not None:
            raise ValueError("subsample: cols given for a 1D input")
        rows = _check_indices(rows, a.value.shape[0], "row")
        out = Node(a.value[rows], (a,), "subsample")

        def backward_fn(adj):
            if a.adjoint is not None:
                np.add.at(a.adjoint, rows, adj)

        out._backward = backward_fn
        return out

    if a.value.ndim != 2:
        raise ValueError(f"subsample: input must be 1D or 2D, got {a.value.ndim}D")
    rows = _check_indices(rows, a.value.shape[0], "row")
    cols = _check_indices(cols, a.value.shape[1], "col")
    out = Node(a.value[np.ix_(rows, cols)], (a,), "subsample")

    def backward_fn(adj):
        if a.adjoint is not None:
            np.add.at(a.adjoint, np.ix_(rows, cols), adj)

    out._backward = backward_fn
    return out


def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights for center-aligned bilinear resampling on one axis."""
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x0 = np.floor(x).astype(np.intp)
    t = x - x0
    i0 = np.clip(x0, 0, n_in - 1)
    i1 = np.clip(x0 + 1, 0, n_in - 1)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - t)
    np.add.at(mat, (np.arange(n_out), i1), t)
    return mat


def resize_bilinear(a: Node, new_shape) -> Node:
    """Bilinear resampling with pixel centers aligned at (i+0.5)/extent."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ValueError(f"resize_bilinear: input must be 2D, got {a.value.ndim}D")
    new_h, new_w = int(new_shape[0]), int(new_shape[1])
    if new_h < 1 or new_w < 1:
        raise ValueError(f"resize_bilinear: extents must be >= 1, got {new_shape}")
    h, w = a.value.shape
    w_rows = _resize_matrix(new_h, h)
    w_cols = _resize_matrix(new_w, w)
    out = Node(w_rows @ a.value @ w_cols.T, (a,), "resize_bilinear")

    def backward_fn(adj):
        _accumulate(a, w_rows.T @ adj @ w_cols)

    out._backward = backward_fn
    return out


def _pose_scalar(p):
    if isinstance(p, Node):
        if p.value.size != 1:
            raise ValueError("warp_bilinear: pose parameters must be scalar-shaped")
        return float(p.value.reshape(()))
    return float(p)


def warp_bilinear(a, tx, ty, rot_deg, log_scale, out_shape) -> Node:
    """Inverse-similarity-transform sampling of ``a`` onto an out_shape grid.

    The pose maps template points p (about the source center) to output points
    q = R(rot) * e^log_scale * p + (tx, ty) (about the output center); sampling
    therefore reads a at p = e^-log_scale * R(-rot) * (q - t). Out-of-bounds
    samples read 0. Differentiable w.r.t. the image values and all four pose
    scalars.
    """
    a = as_node(a)
    if a.value.ndim != 2:
        raise ValueError(f"warp_bilinear: image must be 2D, got {a.value.ndim}D")
    out_h, out_w = int(out_shape[0]), int(out_shape[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"warp_bilinear: extents must be >= 1, got {out_shape}")
    h, w = a.value.shape
    tx_v, ty_v = _pose_scalar(tx), _pose_scalar(ty)
    rot_v, sig_v = _pose_scalar(rot_deg), _pose_scalar(log_scale)

    cy_out, cx_out = (out_h - 1) / 2.0, (out_w - 1) / 2.0
    cy_src, cx_src = (h - 1) / 2.0, (w - 1) / 2.0
    qy, qx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    qy -= cy_out + ty_v
    qx -= cx_out + tx_v
    rad = math.radians(rot_v % 360.0)  # canonical angle keeps r -> r+360 exact
    cos_r, sin_r = math.cos(rad), math.sin(rad)
    scale = math.exp(-sig_v)
    x_rel = scale * (cos_r * qx + sin_r * qy)
    y_rel = scale * (-sin_r * qx + cos_r * qy)
    x_src = x_rel + cx_src
    y_src = y_rel + cy_src

    x0 = np.floor(x_src).astype(np.intp)
    y0 = np.floor(y_src).astype(np.intp)
    fx = x_src - x0
    fy = y_src - y0
    log_branch(x0)
    log_branch(y0)

    corners = []
    for dy, wy, dwy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx, wx, dwx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = np.where(valid, a.value[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
            corners.append((yi, xi, valid, wy, wx, dwy, dwx, vals))
    value = sum(wy * wx * vals for _, _, _, wy, wx, _, _, vals in corners)
    parents = tuple(p for p in (a, tx, ty, rot_deg, log_scale) if isinstance(p, Node))
    out = Node(value, parents, "warp_bilinear")

    def backward_fn(adj):
        if isinstance(a, Node) and a.adjoint is not None:
            for yi, xi, valid, wy, wx, _, _, _ in corners:
                weight = adj * wy * wx
                np.add.at(
                    a.adjoint,
                    (np.clip(yi, 0, h - 1)[valid], np.clip(xi, 0, w - 1)[valid]),
                    weight[valid],
                )
        if any(isinstance(p, Node) for p in (tx, ty, rot_deg, log_scale)):
            # d value / d sampling coordinate, then chain into each pose scalar
            d_dx = sum(wy * dwx * vals for _, _, _, wy, _, _, dwx, vals in corners)
            d_dy = sum(dwy * wx * vals for _, _, _, _, wx, dwy, _, vals in corners)
            gx = adj * d_dx
            gy = adj * d_dy
            if isinstance(tx, Node):
                _accumulate(tx, np.asarray(np.sum(gx * (-scale * cos_r) + gy * (scale * sin_r))).reshape(tx.value.shape))
            if isinstance(ty, Node):
                _accumulate(ty, np.asarray(np.sum(gx * (-scale * sin_r) + gy * (-scale * cos_r))).reshape(ty.value.shape))
            if isinstance(rot_deg, Node):
                grad_r = np.sum(gx * y_rel - gy * x_rel) * (math.pi / 180.0)
                _accumulate(rot_deg, np.asarray(grad_r).reshape(rot_deg.value.shape))
            if isinstance(log_scale, Node):
                _accumulate(log_scale, np.asarray(np.sum(-gx * x_rel - gy * y_rel)).reshape(log_scale.value.shape))

    out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# reductions and shape plumbing

def reduce_sum(a: Node) -> Node:
    a = as_node(a)
    out = Node(np.asarray(a.value.sum()), (a,), "sum")

    def backward_fn(adj):
        _accumulate(a, np.full_like(a.value, float(adj)))

    out._backward = backward_fn
    return out


def dot(a: Node, b) -> Node:
    a = as_node(a)
    b_is_node = isinstance(b, Node)
    b_val = b.value if b_is_node else np.asarray(b, dtype=np.float64)
    if a.value.shape != b_val.shape:
        raise ValueError(f"dot: shape mismatch {a.value.shape} vs {b_val.shape}")
    parents = (a, b) if b_is_node else (a,)
    out = Node(np.asarray(np.vdot(a.value, b_val)), parents, "dot")

    def backward_fn(adj):
        s = float(adj)
        _accumulate(a, s * b_val)
        if b_is_node:
            _accumulate(b, s * a.value)

    out._backward = backward_fn
    return out


def l2norm(a: Node) -> Node:
    """Euclidean norm over all elements; the zero vector gets a zero adjoint."""
    a = as_node(a)
    n = float(np.sqrt(np.vdot(a.value, a.value)))
    out = Node(np.asarray(n), (a,), "l2norm")

    def backward_fn(adj):
        if n > 0.0:
            _accumulate(a, (float(adj) / n) * a.value)

    out._backward = backward_fn
    return out


def stack_channels(nodes: Sequence[Node]) -> Node:
    """Stack same-shape 2D nodes into an (h, w, B) tensor along the last axis."""
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("stack_channels: empty input")
    shape = nodes[0].value.shape
    if any(n.value.ndim != 2 or n.value.shape != shape for n in nodes):
        raise ValueError("stack_channels: inputs must be 2D with identical shapes")
    out = Node(np.stack([n.value for n in nodes], axis=-1), tuple(nodes), "stack_channels")

    def backward_fn(adj):
        for b, n in enumerate(nodes):
            _accumulate(n, adj[:, :, b])

    out._backward = backward_fn
    return out


def channel(a: Node, index: int) -> Node:
    """Extract 2D channel ``index`` from an (h, w, C) tensor."""
    a = as_node(a)
    if a.value.ndim != 3:
        raise ValueError(f"channel: input must be 3D, got {a.value.ndim}D")
    if not 0 <= index < a.value.shape[2]:
        raise IndexError(f"channel: index {index} out of range for {a.value.shape}")
    out = Node(a.value[:, :, index].copy(), (a,), "channel")

    def backward_fn(adj):
        if a.adjoint is not None:
            a.adjoint[:, :, index] += adj

    out._backward = backward_fn
    return out


def concat_flat(nodes: Sequence[Node]) -> Node:
    """Concatenate the raveled elements of several nodes into one 1D tensor."""
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("concat_flat: empty input")
    sizes = [n.value.size for n in nodes]
    offsets = np.cumsum([0] + sizes)
    out = Node(np.concatenate([n.value.ravel() for n in nodes]), tuple(nodes), "concat_flat")

    def backward_fn(adj):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            _accumulate(n, adj[lo:hi].reshape(n.value.shape))

    out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# backward pass

def _toposort(seed: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(seed, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def backward(seed: Node):
    """Populate adjoints of all ancestors of a scalar-shaped seed node.

    Re-zeroes the adjoints of every reachable node first, so repeated calls
    on rebuilt graphs are safe. Runs in reverse topological order, which
    guarantees each node's backward fires after all of its consumers.
    """
    if seed.value.size != 1:
        raise ValueError(f"backward: seed must be scalar-shaped, got shape {seed.value.shape}")
    order = _toposort(seed)
    for node in order:
        node.adjoint = np.zeros_like(node.value)
    seed.adjoint = np.ones_like(seed.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.adjoint)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class GradcheckReport:
    """Outcome of comparing backward-pass adjoints against central differences."""

    max_rel_error: float
    n_checked: int
    n_excluded: int
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"max_rel_error={self.max_rel_error:.3e} checked={self.n_checked} "
            f"excluded={self.n_excluded} tol={self.tol:.1e} [{status}]"
        )


def gradcheck(f: Callable[[Node], Node], x: np.ndarray, h: float = 1e-4,
              tol: float = 1e-4, n_coords: int = 64, seed: int = 0) -> GradcheckReport:
    """Check the adjoint of a scalar graph builder against central differences.

    ``f`` maps a leaf node of x's shape to a scalar node. A random subset of
    coordinates (at most ``n_coords``) is probed with step ``h``; relative
    error uses denominator max(|analytic|, |numeric|, 1e-8). Coordinates whose
    perturbation crosses a clip/bin branch boundary (the branch signatures of
    f(x+h e) and f(x-h e) differ) are excluded and counted separately.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Node(x.copy())
    out = f(leaf)
    if out.value.size != 1:
        raise ValueError("gradcheck: f must build a scalar objective")
    backward(out)
    analytic = leaf.adjoint.copy()

    rng = np.random.default_rng(seed)
    n_total = x.size
    coords = rng.permutation(n_total)[: min(n_coords, n_total)]

    def eval_with_branches(xv):
        with record_branches() as log:
            val = float(f(Node(xv)).value.reshape(()))
        return val, log

    max_rel = 0.0
    n_checked = 0
    n_excluded = 0
    failures = []
    flat = x.ravel()
    for c in coords:
        xp = flat.copy()
        xp[c] += h
        fp, log_p = eval_with_branches(xp.reshape(x.shape))
        xm = flat.copy()
        xm[c] -= h
        fm, log_m = eval_with_branches(xm.reshape(x.shape))
        if not _same_branches(log_p, log_m):
            n_excluded += 1
            continue
        numeric = (fp - fm) / (2.0 * h)
        ana = analytic.ravel()[c]
        rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        n_checked += 1
        if rel > max_rel:
            max_rel = rel
        if rel >= tol:
            failures.append((int(c), float(ana), float(numeric), float(rel)))
    return GradcheckReport(max_rel, n_checked, n_excluded, tol, failures)
