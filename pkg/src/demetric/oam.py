"""Parameter-free object attention by random-walk graph propagation.

A feature map is turned into a fully connected directed graph over its
spatial locations, edge weights proportional to feature dissimilarity.
Iterating the stationary-distribution update concentrates mass on
locations that differ most from their surroundings; the fused mass map
then drives a crop-and-zoom of the input image.

Everything here operates on plain numpy arrays and never touches
trainable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor

MIN_CROP_SIDE = 8
_DEGENERATE_ROW_SUM = 1e-12


@dataclass
class WeightMatrix:
    """Row-stochastic transition matrix over the H*W grid locations."""

    matrix: np.ndarray  # (H*W, H*W)
    height: int
    width: int
    layer_id: str = ""


@dataclass
class AttentionProposal:
    """Nonnegative mass map over a grid, summing to one."""

    mass: np.ndarray  # (H, W)
    source: str = ""


@dataclass(frozen=True)
class CropBox:
    """A square region, clamped inside the image at construction."""

    center_row: int
    center_col: int
    side: int

    @property
    def top(self) -> int:
        return self.center_row - self.side // 2

    @property
    def left(self) -> int:
        return self.center_col - self.side // 2


def build_weight_matrix(u: np.ndarray, layer_id: str = "") -> WeightMatrix:
    """Dissimilarity graph of a (C, H, W) feature map, row-normalized.

    Entry (a, b) is the Euclidean distance between the feature vectors
    at locations a and b (diagonal zero), divided by the row sum.  Rows
    whose sum underflows (all features identical) fall back to the
    uniform distribution, keeping the matrix stochastic.
    """
    if isinstance(u, Tensor):
        u = u.data
    if u.ndim != 3:
        raise DimensionError(f"feature map must be (C, H, W), got shape {u.shape}")
    c, h, w = u.shape
    n = h * w
    if n < 2:
        raise DimensionError("feature map needs at least 2 spatial locations")
    feats = u.reshape(c, n).T  # (n, c)
    sq = (feats * feats).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * feats @ feats.T
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    sums = d.sum(axis=1)
    degenerate = sums < _DEGENERATE_ROW_SUM
    sums[degenerate] = 1.0
    d /= sums[:, None]
    d[degenerate] = 1.0 / n
    return WeightMatrix(matrix=d, height=h, width=w, layer_id=layer_id)


def propagate(d: WeightMatrix, t: int = 10) -> AttentionProposal:
    """Random-walk mass propagation to a (near-)stationary proposal.

    Mass starts uniform at 1/(H*W) and is pushed along the edges T
    times; because each node diffuses all of its mass to its outbound
    edges, the update is the transpose chain ``M <- D^T M``, whose fixed
    point is the walk's stationary distribution.  Total mass is
    conserved exactly at every iteration.
    """
    if t < 1:
        raise ParameterError(f"iteration count must be >= 1, got {t}")
    n = d.height * d.width
    m = np.full(n, 1.0 / n)
    dt = d.matrix.T
    for _ in range(t):
        m = dt @ m
    return AttentionProposal(mass=m.reshape(d.height, d.width), source=d.layer_id)


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2D grid with corner-aligned bilinear sampling."""
    h, w = grid.shape
    rows = _sample_coords(0.0, float(h - 1), out_h)
    cols = _sample_coords(0.0, float(w - 1), out_w)
    return _bilinear_gather(grid, rows, cols)


def _sample_coords(lo: float, hi: float, count: int) -> np.ndarray:
    if count == 1:
        return np.array([(lo + hi) / 2.0])
    return lo + np.arange(count) * ((hi - lo) / (count - 1))


def _bilinear_gather(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = grid.shape[-2:]
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    g00 = grid[..., r0[:, None], c0[None, :]]
    g01 = grid[..., r0[:, None], c1[None, :]]
    g10 = grid[..., r1[:, None], c0[None, :]]
    g11 = grid[..., r1[:, None], c1[None, :]]
    top = g00 * (1.0 - fc) + g01 * fc
    bot = g10 * (1.0 - fc) + g11 * fc
    return top * (1.0 - fr) + bot * fr


def fuse_proposals(proposals: list[AttentionProposal], out_h: int, out_w: int) -> AttentionProposal:
    """Resize each proposal to the target grid, average, renormalize."""
    if not proposals:
        raise ParameterError("fuse_proposals needs at least one proposal")
    acc = np.zeros((out_h, out_w))
    for p in proposals:
        acc += bilinear_resize(p.mass, out_h, out_w)
    acc /= len(proposals)
    total = acc.sum()
    if total > 0:
        acc /= total
    return AttentionProposal(mass=acc, source="fused")


def crop_box(m: AttentionProposal, image_h: int, image_w: int) -> CropBox:
    """Square crop around the super-threshold mass region.

    Threshold is mean + 0.5 * (max - mean); the tight bounding box of
    cells at or above it is scaled to pixel coordinates, squared up to
    the longer edge, floored at MIN_CROP_SIDE, and clamped inside the
    image.
    """
    mass = m.mass
    mh, mw = mass.shape
    tau = mass.mean() + 0.5 * (mass.max() - mass.mean())
    hot = mass >= tau
    if not hot.any():
        # only reachable for a constant map; use the whole image
        hot = np.ones_like(hot)
    rows = np.flatnonzero(hot.any(axis=1))
    cols = np.flatnonzero(hot.any(axis=0))
    r0, r1 = rows[0], rows[-1]
    c0, c1 = cols[0], cols[-1]

    scale_r = image_h / mh
    scale_c = image_w / mw
    top = int(np.floor(r0 * scale_r))
    bottom = int(np.floor((r1 + 1) * scale_r)) - 1
    left = int(np.floor(c0 * scale_c))
    right = int(np.floor((c1 + 1) * scale_c)) - 1

    side = int(min(max(bottom - top + 1, right - left + 1, MIN_CROP_SIDE), image_h, image_w))
    center_r = (top + bottom + 1) // 2
    center_c = (left + right + 1) // 2
    center_r = int(min(max(center_r, side // 2), image_h - side + side // 2))
    center_c = int(min(max(center_c, side // 2), image_w - side + side // 2))
    return CropBox(center_row=center_r, center_col=center_c, side=side)


def crop_and_zoom(image, box: CropBox):
    """Resample the boxed region back to the full image size.

    Accepts a (C, H, W) Tensor or numpy array and returns the same
    kind.  The result is a constant: no gradients flow through the
    resampling (the box itself is already non-differentiable).
    """
    is_tensor = isinstance(image, Tensor)
    data = image.data if is_tensor else np.asarray(image, dtype=np.float64)
    if data.ndim != 3:
        raise DimensionError(f"image must be (C, H, W), got shape {data.shape}")
    _, h, w = data.shape
    if box.top < 0 or box.left < 0 or box.top + box.side > h or box.left + box.side > w:
        raise ParameterError(f"crop box {box} exceeds image {h}x{w}")
    rows = _sample_coords(float(box.top), float(box.top + box.side - 1), h)
    cols = _sample_coords(float(box.left), float(box.left + box.side - 1), w)
    out = _bilinear_gather(data, rows, cols)
    return Tensor(out) if is_tensor else out
