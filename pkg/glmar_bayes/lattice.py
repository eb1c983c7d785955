"""Voxel masks on 2-D/3-D lattices and the fixed-diagonal Laplacian kernel.

The kernel ``S`` has ``deg`` (4 in 2-D, 6 in 3-D) on every diagonal entry and
``-1`` between axis-adjacent voxels of the mask.  ``StS = S.T @ S`` is the
prior precision structure shared by the W and A rows.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import MaskError

logger = logging.getLogger(__name__)

DEGREE = {2: 4, 3: 6}


@dataclass(frozen=True)
class Mask:
    dims: tuple
    inside: np.ndarray
    voxel_index: np.ndarray = field(repr=False)
    centroid: np.ndarray = field(repr=False)

    @property
    def n_voxels(self):
        return int(self.centroid.shape[0])

    @property
    def ndim(self):
        return len(self.dims)

    @classmethod
    def from_array(cls, inside):
        inside = np.asarray(inside, dtype=bool)
        if inside.ndim not in (2, 3):
            raise MaskError(f"mask must be 2-D or 3-D, got {inside.ndim} dimensions")
        if not inside.any():
            raise MaskError("mask has no voxels inside")
        voxel_index = np.full(inside.shape, -1, dtype=np.int64)
        # np.nonzero walks the grid in row-major order, which fixes the scan order.
        cells = np.nonzero(inside)
        voxel_index[cells] = np.arange(cells[0].size)
        centroid = np.column_stack(cells).astype(float)
        return cls(tuple(int(d) for d in inside.shape), inside, voxel_index, centroid)

    def to_image(self, values, fill=np.nan):
        """Scatter a length-N vector back onto the grid."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_voxels,):
            raise MaskError(f"expected {self.n_voxels} values, got shape {values.shape}")
        image = np.full(self.dims, fill, dtype=float)
        image[self.inside] = values
        return image


def block_mask(*dims):
    return Mask.from_array(np.ones(dims, dtype=bool))


def ellipse_mask(dims=(53, 63), n_voxels=2087):
    """Elliptical, brain-shaped mask holding exactly ``n_voxels`` cells.

    Cells are ranked by normalized elliptical radius from the grid centre and the
    ``n_voxels`` innermost are kept; ties fall back to scan order.
    """
    total = int(np.prod(dims))
    if not 1 <= n_voxels <= total:
        raise MaskError(f"cannot place {n_voxels} voxels on a {dims} grid")
    grids = np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij")
    radius = np.zeros(dims)
    for axis, g in zip(dims, grids):
        centre = (axis - 1) / 2.0
        radius += ((g - centre) / (axis / 2.0)) ** 2
    order = np.argsort(radius.ravel(), kind="stable")
    inside = np.zeros(total, dtype=bool)
    inside[order[:n_voxels]] = True
    return Mask.from_array(inside.reshape(dims))


def read_mask(path):
    """Parse the plain-text grid format: a ``dims:`` header then rows of 0/1."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MaskError(f"{path}: cannot read mask ({exc})") from exc
    rows = [(i + 1, ln.strip()) for i, ln in enumerate(lines) if ln.strip()]
    if not rows or not rows[0][1].startswith("dims:"):
        raise MaskError(f"{path}:1: first line must be 'dims: d1 d2 [d3]'")
    try:
        dims = tuple(int(tok) for tok in rows[0][1][len("dims:"):].split())
    except ValueError as exc:
        raise MaskError(f"{path}:{rows[0][0]}: bad dims header") from exc
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise MaskError(f"{path}:{rows[0][0]}: dims must be 2 or 3 positive integers")

    width = dims[-1]
    expected_rows = int(np.prod(dims[:-1]))
    body = rows[1:]
    if len(body) != expected_rows:
        raise MaskError(f"{path}: expected {expected_rows} grid rows, found {len(body)}")
    grid = np.zeros((expected_rows, width), dtype=bool)
    for r, (lineno, text) in enumerate(body):
        tokens = text.split()
        if len(tokens) != width or any(tok not in ("0", "1") for tok in tokens):
            raise MaskError(f"{path}:{lineno}: expected {width} values of 0/1")
        grid[r] = [tok == "1" for tok in tokens]
    return Mask.from_array(grid.reshape(dims))


def write_mask(mask, path):
    grid = mask.inside.reshape(-1, mask.dims[-1]).astype(int)
    lines = ["dims: " + " ".join(str(d) for d in mask.dims)]
    lines += [" ".join(str(v) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class SpatialKernel:
    S: sparse.csr_matrix
    StS: sparse.csr_matrix
    deg: int

    @property
    def n_voxels(self):
        return self.S.shape[0]

    @property
    def diagonal(self):
        return self.StS.diagonal()


def _sorted_csr(matrix):
    out = sparse.csr_matrix(matrix)
    out.sum_duplicates()
    out.sort_indices()
    return out


def build_kernel(mask, dimensionality=None):
    """Build ``S`` and ``StS`` for ``mask``.

    Boundary voxels keep the full ``deg`` on the diagonal, so ``S`` is strictly
    diagonally dominant and ``StS`` positive definite.
    """
    dimensionality = mask.ndim if dimensionality is None else dimensionality
    if dimensionality not in DEGREE:
        raise MaskError(f"dimensionality must be 2 or 3, got {dimensionality}")
    if dimensionality != mask.ndim:
        raise MaskError(f"mask has {mask.ndim} dims but dimensionality {dimensionality} requested")
    n = mask.n_voxels
    if n < 1:
        raise MaskError("mask has no voxels inside")
    deg = DEGREE[dimensionality]

    rows, cols = [], []
    for axis in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a = mask.voxel_index[tuple(lo)]
        b = mask.voxel_index[tuple(hi)]
        both = (a >= 0) & (b >= 0)
        rows.append(a[both])
        cols.append(b[both])
    i = np.concatenate(rows)
    j = np.concatenate(cols)

    r = np.concatenate([np.arange(n), i, j])
    c = np.concatenate([np.arange(n), j, i])
    v = np.concatenate([np.full(n, float(deg)), -np.ones(2 * i.size)])
    S = _sorted_csr(sparse.coo_matrix((v, (r, c)), shape=(n, n)))
    StS = _sorted_csr(S.T @ S)
    logger.debug("kernel: N=%d deg=%d nnz(S)=%d nnz(StS)=%d", n, deg, S.nnz, StS.nnz)
    return SpatialKernel(S=S, StS=StS, deg=deg)


def quad_form(kernel, v):
    v = np.asarray(v, dtype=float)
    if v.shape != (kernel.n_voxels,):
        raise ValueError(f"vector length {v.shape} does not match N={kernel.n_voxels}")
    return float(v @ (kernel.StS @ v))


def quad_forms(kernel, rows):
    """Row-wise ``r StS r^T`` for a (M, N) array."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return np.einsum("mn,mn->m", rows, (kernel.StS @ rows.T).T)


def precision_row(kernel, n):
    if not 0 <= n < kernel.n_voxels:
        raise IndexError(f"voxel index {n} out of range for N={kernel.n_voxels}")
    start, stop = kernel.StS.indptr[n], kernel.StS.indptr[n + 1]
    return [
        (int(j), float(v))
        for j, v in zip(kernel.StS.indices[start:stop], kernel.StS.data[start:stop])
    ]


def color_voxels(kernel):
    """Greedy coloring of the ``StS`` graph in scan order.

    Voxels sharing a color have no ``StS`` coupling, so their VB factors can be
    updated together.  Returns a list of index arrays, one per color.
    """
    n = kernel.n_voxels
    colors = np.full(n, -1, dtype=np.int64)
    indptr, indices = kernel.StS.indptr, kernel.StS.indices
    for v in range(n):
        taken = {colors[u] for u in indices[indptr[v]:indptr[v + 1]] if colors[u] >= 0}
        c = 0
        while c in taken:
            c += 1
        colors[v] = c
    return [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]