"""Differentiable histogram-of-oriented-gradients pipeline.

The descriptor is computed as a composition of autodiff primitives:
gray conversion, [-1, 0, 1] derivative filtering, per-bin orientation
weighting expressed as clipped tent filters, spatial binning as a tent
convolution followed by cell-center sampling, and global contrast
normalization. :func:`hog_reference` recomputes the same descriptor by
direct per-pixel voting and serves as the correctness oracle for the
filter-based formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Kernel, Node

__all__ = [
    "HogConfig",
    "HogDescriptor",
    "to_gray",
    "gradients",
    "orientation_filters",
    "make_spatial_kernel",
    "spatial_binning",
    "normalize",
    "hog_forward",
    "compute_hog",
    "hog_reference",
]

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# keeps the square-root adjoint finite where the gradient vanishes
MAG_EPS = 1e-12

_DERIV_X = Kernel(np.array([[-1.0, 0.0, 1.0]]))
_DERIV_Y = Kernel(np.array([[-1.0], [0.0], [1.0]]))


@dataclass(frozen=True)
class HogConfig:
    """Descriptor parameters.

    ``bins=None`` resolves to 9 for unsigned orientations (folded to
    [0, 180)) and 18 for signed ones ([0, 360)).
    """

    cell: int = 8
    bins: Optional[int] = None
    signed: bool = False
    epsilon: float = 1e-4
    normalize: bool = True
    norm_style: str = "paper"  # "paper": v/sqrt(|v|+eps); "squared": v/sqrt(|v|^2+eps)

    def __post_init__(self):
        if self.bins is None:
            object.__setattr__(self, "bins", 18 if self.signed else 9)
        if self.cell < 2 or self.cell % 2 != 0:
            raise ValueError(f"cell size must be even and >= 2, got {self.cell}")
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.norm_style not in ("paper", "squared"):
            raise ValueError(f"unknown norm_style {self.norm_style!r}")

    @property
    def orientation_range(self) -> float:
        """Full orientation span in degrees (180 unsigned, 360 signed)."""
        return 360.0 if self.signed else 180.0

    def bin_centers(self) -> np.ndarray:
        return np.arange(self.bins) * (self.orientation_range / self.bins)

    def grid_shape(self, image_shape) -> tuple[int, int, int]:
        h, w = image_shape[:2]
        if h % self.cell or w % self.cell:
            raise ValueError(f"image extents {h}x{w} not divisible by cell size {self.cell}")
        return h // self.cell, w // self.cell, self.bins

    def with_cell(self, cell: int) -> "HogConfig":
        return replace(self, cell=cell)


@dataclass
class HogDescriptor:
    """Cell grid of orientation-histogram values plus the config that made it."""

    grid: np.ndarray  # (cells_y, cells_x, bins)
    config: HogConfig

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[2] != self.config.bins:
            raise ValueError(f"grid shape {self.grid.shape} inconsistent with {self.config.bins} bins")

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid.shape[0] * self.config.cell, self.grid.shape[1] * self.config.cell


def to_gray(img: Node) -> Node:
    """Luma conversion 0.299 R + 0.587 G + 0.114 B of an (h, w, 3) node."""
    if img.value.ndim != 3 or img.value.shape[2] != 3:
        raise ValueError(f"to_gray: expected (h, w, 3), got {img.value.shape}")
    r, g, b = (ad.channel(img, i) for i in range(3))
    return ad.add(ad.add(ad.mul(r, GRAY_WEIGHTS[0]), ad.mul(g, GRAY_WEIGHTS[1])),
                  ad.mul(b, GRAY_WEIGHTS[2]))


def gradients(gray: Node, cfg: HogConfig) -> tuple[Node, Node]:
    """Gradient magnitude and folded orientation of a 2D node.

    Central-difference [-1, 0, 1] masks with zero padding; magnitude is
    sqrt(gx^2 + gy^2 + MAG_EPS^2); the arctangent is folded into
    [0, 180) or [0, 360) by adding the range to negative angles.
    """
    if gray.value.ndim != 2:
        raise ValueError(f"gradients: expected 2D input, got {gray.value.shape}")
    if min(gray.value.shape) < 3:
        raise ValueError(f"gradients: extents must be >= 3, got {gray.value.shape}")
    gx = ad.conv2d_same(gray, _DERIV_X)
    gy = ad.conv2d_same(gray, _DERIV_Y)
    mag = ad.sqrt(ad.add(ad.add(ad.square(gx), ad.square(gy)), MAG_EPS * MAG_EPS))
    theta = ad.atan2_deg(gy, gx)
    fold = cfg.orientation_range if cfg.signed else 180.0
    negative = theta.value < 0.0
    ad.log_branch(negative)
    theta = ad.add(theta, fold * negative)
    return mag, theta


def _tent_weight(delta: Node, slope: float) -> Node:
    # triangular bump of unit height and half-width 1/slope, built from two
    # clips so the adjoint is the correct piecewise constant everywhere
    rising = ad.clip(ad.add(ad.mul(delta, slope), 1.0), 0.0, 1.0)
    falling = ad.clip(ad.add(ad.mul(delta, -slope), 1.0), 0.0, 1.0)
    return ad.sub(ad.add(rising, falling), 1.0)


def orientation_filters(mag: Node, theta: Node, cfg: HogConfig) -> Node:
    """Per-bin magnitude maps, (h, w, B): gradient magnitude times the
    bilinear orientation-interpolation weight of each bin center.

    The weight of bin b is clip(1 - d * B/R, 0, 1) with d the circular
    distance of theta to the bin center modulo the orientation range R;
    the wrap-around tent covers angles near R falling back onto bin 0.
    """
    if mag.value.shape != theta.value.shape:
        raise ValueError("orientation_filters: magnitude/orientation shape mismatch")
    full = cfg.orientation_range
    slope = cfg.bins / full
    maps = []
    for mu in cfg.bin_centers():
        weight = _tent_weight(ad.sub(theta, mu), slope)
        # folded angles live in [0, R]; values near R wrap onto low centers
        weight = ad.add(weight, _tent_weight(ad.sub(theta, mu + full), slope))
        maps.append(ad.mul(mag, weight))
    return ad.stack_channels(maps)


def make_spatial_kernel(cell: int) -> Kernel:
    """Separable 2c x 2c tent t(k) = 1 - |k + 0.5 - c| / c; 1-D mass c, 2-D mass c^2."""
    if cell < 2 or cell % 2 != 0:
        raise ValueError(f"cell size must be even and >= 2, got {cell}")
    k = np.arange(2 * cell, dtype=np.float64)
    t = 1.0 - np.abs(k + 0.5 - cell) / cell
    return Kernel(np.outer(t, t))


def _cell_centers(extent: int, cell: int) -> np.ndarray:
    return np.arange(extent // cell) * cell + cell // 2


def spatial_binning(oriented: Node, cfg: HogConfig) -> Node:
    """Tent-convolve each orientation map and sample at the cell centers.

    Output is the (cells_y, cells_x, B) descriptor grid before contrast
    normalization. Image extents must be divisible by the cell size.
    """
    if oriented.value.ndim != 3:
        raise ValueError(f"spatial_binning: expected (h, w, B), got {oriented.value.shape}")
    h, w, nbins = oriented.value.shape
    if h % cfg.cell or w % cfg.cell:
        raise ValueError(f"image extents {h}x{w} not divisible by cell size {cfg.cell}")
    kernel = make_spatial_kernel(cfg.cell)
    rows = _cell_centers(h, cfg.cell)
    cols = _cell_centers(w, cfg.cell)
    cells = [
        ad.subsample(ad.conv2d_same(ad.channel(oriented, b), kernel), rows, cols)
        for b in range(nbins)
    ]
    return ad.stack_channels(cells)


def normalize(grid: Node, cfg: HogConfig) -> Node:
    """Global contrast normalization v / sqrt(|v| + eps).

    ``norm_style="squared"`` uses the conventional v / sqrt(|v|^2 + eps)
    instead of the un-squared norm under the root.
    """
    n = ad.l2norm(grid)
    if cfg.norm_style == "paper":
        denom = ad.sqrt(ad.add(n, cfg.epsilon))
    else:
        denom = ad.sqrt(ad.add(ad.square(n), cfg.epsilon))
    return ad.div(grid, denom)


def hog_forward(img: Node, cfg: HogConfig) -> Node:
    """Full differentiable descriptor of a gray (h, w) or color (h, w, 3) node."""
    gray = to_gray(img) if img.value.ndim == 3 else img
    mag, theta = gradients(gray, cfg)
    oriented = orientation_filters(mag, theta, cfg)
    grid = spatial_binning(oriented, cfg)
    if cfg.normalize:
        grid = normalize(grid, cfg)
    return grid


def compute_hog(img: np.ndarray, cfg: HogConfig) -> HogDescriptor:
    """Run the differentiable pipeline on a plain array and box the values."""
    grid = hog_forward(Node(np.asarray(img, dtype=np.float64)), cfg)
    return HogDescriptor(grid.value, cfg)


def hog_reference(img: np.ndarray, cfg: HogConfig) -> HogDescriptor:
    """Direct per-pixel voting oracle, sharing no code with the filter path.

    Each pixel's gradient magnitude is split across the two circularly
    adjacent orientation bins and the four spatially adjacent cells using
    bilinear weights; the filter-based :func:`hog_forward` must reproduce
    this elementwise.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = GRAY_WEIGHTS[0] * img[:, :, 0] + GRAY_WEIGHTS[1] * img[:, :, 1] + GRAY_WEIGHTS[2] * img[:, :, 2]
    h, w = img.shape
    cells_y, cells_x, nbins = cfg.grid_shape(img.shape)
    full = cfg.orientation_range

    gx = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    gx[:, 0] = img[:, 1]
    gx[:, -1] = -img[:, -2]
    gy = np.zeros_like(img)
    gy[1:-1, :] = img[2:, :] - img[:-2, :]
    gy[0, :] = img[1, :]
    gy[-1, :] = -img[-2, :]
    mag = np.sqrt(gx * gx + gy * gy + MAG_EPS * MAG_EPS)
    theta = np.degrees(np.arctan2(gy, gx))
    theta = np.where(theta == -180.0, 180.0, theta)
    theta = np.where(theta < 0.0, theta + (full if cfg.signed else 180.0), theta)

    # orientation vote: linear interpolation between the two nearest centers
    pos = theta / (full / nbins)
    low = np.floor(pos).astype(np.intp)
    w_high = pos - low
    votes = np.zeros((h, w, nbins))
    rows, cols = np.indices(img.shape)
    np.add.at(votes, (rows, cols, low % nbins), mag * (1.0 - w_high))
    np.add.at(votes, (rows, cols, (low + 1) % nbins), mag * w_high)

    # spatial vote: tent weight of each pixel around each cell center
    def axis_weights(n_cells, extent):
        centers = np.arange(n_cells) * cfg.cell + cfg.cell / 2.0 + 0.5
        return np.maximum(0.0, 1.0 - np.abs(np.arange(extent)[None, :] - centers[:, None]) / cfg.cell)

    w_rows = axis_weights(cells_y, h)
    w_cols = axis_weights(cells_x, w)
    grid = np.einsum("iy,yxb->ixb", w_rows, votes)
    grid = np.einsum("jx,ixb->ijb", w_cols, grid)

    if cfg.normalize:
        n = float(np.sqrt(np.vdot(grid, grid)))
        if cfg.norm_style == "paper":
            grid = grid / np.sqrt(n + cfg.epsilon)
        else:
            grid = grid / np.sqrt(n * n + cfg.epsilon)
    return HogDescriptor(grid, cfg)
