"""TOF-weighted Joseph projector for list-mode events.

Each event row is built independently: the LOR is stepped along its driving
axis (the axis it is most aligned with), one step per line of pixel centers.
At every step the crossing point is linearly interpolated between the two
neighbouring pixels, and each pixel receives ``eps * rho * ds`` where ``eps``
is the TOF weight at the crossing, ``rho`` the interpolation coefficient and
``ds`` the path length of one step.

Rows are stored in a CSR matrix (events x pixels, pixel index ``j = y*W + x``).
Event chunks have a fixed size, so results never depend on the worker count.
Back projection reduces over events in a canonical event order, which makes it
bit-identical under permutations of the event list as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from ._parallel import ordered_map
from .geometry import Lor, ScannerConfig, crystal_position, tof_bin_offset

CHUNK_EVENTS = 2048
# LORs whose |ux| and |uy| agree this closely are driven along both axes (averaged)
DIAGONAL_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    width: int
    height: int
    pixel_size: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(H, W)``."""
        return (self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates (mm) of pixel centers as two ``(H, W)`` arrays."""
        xs = (np.arange(self.width) - (self.width - 1) / 2) * self.pixel_size
        ys = (np.arange(self.height) - (self.height - 1) / 2) * self.pixel_size
        return np.meshgrid(xs, ys)


@dataclass
class Image2D:
    values: np.ndarray
    pixel_size: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("image values must be a 2D (H, W) array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image values must be finite")

    @classmethod
    def zeros(cls, grid: Grid) -> "Image2D":
        return cls(np.zeros(grid.shape), grid.pixel_size)

    @property
    def grid(self) -> Grid:
        h, w = self.values.shape
        return Grid(w, h, self.pixel_size)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass
class EventList:
    """List-mode events as parallel arrays; order is significant."""

    c1: np.ndarray
    c2: np.ndarray
    tof: np.ndarray

    def __post_init__(self):
        self.c1 = np.asarray(self.c1, dtype=np.int64).reshape(-1)
        self.c2 = np.asarray(self.c2, dtype=np.int64).reshape(-1)
        self.tof = np.asarray(self.tof, dtype=np.int64).reshape(-1)
        if not (self.c1.size == self.c2.size == self.tof.size):
            raise ValueError("c1, c2 and tof must have equal length")

    @classmethod
    def empty(cls) -> "EventList":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    @property
    def n(self) -> int:
        return int(self.c1.size)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, idx) -> "EventList":
        return EventList(self.c1[idx], self.c2[idx], self.tof[idx])

    def validate(self, cfg: ScannerConfig) -> None:
        nc = cfg.n_crystals
        for name, arr, hi in (("c1", self.c1, nc), ("c2", self.c2, nc), ("tof", self.tof, cfg.n_tof_bins)):
            bad = np.flatnonzero((arr < 0) | (arr >= hi))
            if bad.size:
                raise ValueError(f"event {bad[0]}: {name}={arr[bad[0]]} out of range [0, {hi})")
        same = np.flatnonzero(self.c1 == self.c2)
        if same.size:
            raise ValueError(f"event {same[0]}: degenerate LOR (c1 == c2 == {self.c1[same[0]]})")

    def keys(self) -> np.ndarray:
        """Canonical event order (stable lexicographic in c1, c2, tof)."""
        return np.lexsort((self.tof, self.c2, self.c1))


class SparseRow(NamedTuple):
    indices: np.ndarray
    weights: np.ndarray


def tof_weight(cfg: ScannerConfig, s_mid_offset, tof) -> np.ndarray:
    """Truncated Gaussian TOF weight.

    ``s_mid_offset`` is the signed distance (mm) from the LOR midpoint toward c2.
    Weights are exactly zero beyond three standard deviations.
    """
    sigma = cfg.tof_sigma
    d = np.asarray(s_mid_offset, dtype=np.float64) - tof_bin_offset(cfg, tof)
    w = np.exp(-(d * d) / (2 * sigma * sigma))
    return np.where(np.abs(d) > 3 * sigma, 0.0, w)


def _drive(p1a, p1b, ua, ub, length, tof_center, sigma, n_drive, n_other, ps):
    """Joseph steps along axis ``a`` with interpolation along axis ``b``.

    Returns (event, drive index, other index, weight) for all nonzero entries.
    """
    m = p1a.size
    if m == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e, np.zeros(0)
    a_w = (np.arange(n_drive) - (n_drive - 1) / 2) * ps
    s = (a_w[None, :] - p1a[:, None]) / ua[:, None]
    b_w = p1b[:, None] + s * ub[:, None]
    b_c = b_w / ps + (n_other - 1) / 2
    b_l = np.floor(b_c)
    frac = b_c - b_l
    d = s - (length / 2)[:, None] - tof_center[:, None]
    if sigma is None:
        eps = np.ones_like(d)
    else:
        eps = np.exp(-(d * d) / (2 * sigma * sigma))
        eps[np.abs(d) > 3 * sigma] = 0.0
    ds = ps / np.abs(ua)
    base = eps * ds[:, None]
    inside = (s >= 0) & (s <= length[:, None])
    w_l = base * (1 - frac)
    w_r = base * frac
    b_l = b_l.astype(np.int64)
    ev = np.broadcast_to(np.arange(m)[:, None], s.shape)
    k = np.broadcast_to(np.arange(n_drive)[None, :], s.shape)
    out = []
    for idx, w in ((b_l, w_l), (b_l + 1, w_r)):
        keep = inside & (idx >= 0) & (idx < n_other) & (w > 0)
        out.append((ev[keep], k[keep], idx[keep], w[keep]))
    return tuple(np.concatenate(parts) for parts in zip(*out))


def segment_rows(grid: Grid, p1, p2, tof_center, sigma) -> sp.csr_matrix:
    """Joseph rows for arbitrary segments ``p1 -> p2`` (arrays of shape ``(m, 2)``).

    ``tof_center`` is the TOF-bin center offset from each segment's midpoint
    (toward ``p2``); ``sigma=None`` disables TOF weighting (``eps = 1``).
    """
    p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
    p2 = np.atleast_2d(np.asarray(p2, dtype=np.float64))
    m = p1.shape[0]
    tof_center = np.broadcast_to(np.asarray(tof_center, dtype=np.float64), (m,))
    delta = p2 - p1
    length = np.hypot(delta[:, 0], delta[:, 1])
    bad = np.flatnonzero(length <= 0)
    if bad.size:
        raise ValueError(f"segment {bad[0]}: degenerate LOR of zero length")
    u = delta / length[:, None]
    ax, ay = np.abs(u[:, 0]), np.abs(u[:, 1])
    y_drive = ay >= ax - DIAGONAL_TOL
    x_drive = ax >= ay - DIAGONAL_TOL
    tie = y_drive & x_drive
    W, H, ps = grid.width, grid.height, grid.pixel_size

    rows, cols, vals = [], [], []
    sel = np.flatnonzero(y_drive)
    ev, k, o, w = _drive(p1[sel, 1], p1[sel, 0], u[sel, 1], u[sel, 0], length[sel],
                         tof_center[sel], sigma, H, W, ps)
    rows.append(sel[ev]); cols.append(k * W + o); vals.append(np.where(tie[sel[ev]], 0.5 * w, w))
    sel = np.flatnonzero(x_drive)
    ev, k, o, w = _drive(p1[sel, 0], p1[sel, 1], u[sel, 0], u[sel, 1], length[sel],
                         tof_center[sel], sigma, W, H, ps)
    rows.append(sel[ev]); cols.append(o * W + k); vals.append(np.where(tie[sel[ev]], 0.5 * w, w))

    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, grid.n_pixels),
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _event_rows(cfg: ScannerConfig, grid: Grid, events: EventList) -> sp.csr_matrix:
    p1 = crystal_position(cfg, events.c1).reshape(-1, 2)
    p2 = crystal_position(cfg, events.c2).reshape(-1, 2)
    return segment_rows(grid, p1, p2, tof_bin_offset(cfg, events.tof), cfg.tof_sigma)


def joseph_row(cfg: ScannerConfig, grid: Grid, lor: Lor, tof: int) -> SparseRow:
    mat = segment_rows(grid, [lor.p1], [lor.p2], float(tof_bin_offset(cfg, tof)), cfg.tof_sigma)
    return SparseRow(mat.indices.astype(np.int64), mat.data.copy())


@dataclass
class ProjectionMatrix:
    """Sparse list-mode projection matrix, one row per event."""

    grid: Grid
    matrix: sp.csr_matrix
    order: np.ndarray | None = None
    workers: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        if self.matrix.shape[1] != self.grid.n_pixels:
            raise ValueError("matrix column count does not match grid")
        if self.order is None:
            self.order = np.arange(self.n)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def row(self, i: int) -> SparseRow:
        start, stop = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return SparseRow(
            self.matrix.indices[start:stop].astype(np.int64), self.matrix.data[start:stop].copy()
        )

    def take(self, idx) -> "ProjectionMatrix":
        """Sub-matrix of the selected events (used for ordered subsets)."""
        idx = np.asarray(idx)
        sub = self.matrix[idx]
        order = np.argsort(np.argsort(self.order)[idx], kind="stable")
        return ProjectionMatrix(self.grid, sub, order, self.workers)

    @cached_property
    def _row_chunks(self) -> list[sp.csr_matrix]:
        return [self.matrix[a:a + CHUNK_EVENTS] for a in range(0, self.n, CHUNK_EVENTS)]

    @cached_property
    def _bp_chunks(self) -> list[tuple[np.ndarray, sp.csc_matrix]]:
        out = []
        for a in range(0, self.n, CHUNK_EVENTS):
            idx = self.order[a:a + CHUNK_EVENTS]
            out.append((idx, self.matrix[idx].T.tocsc()))
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``P @ x`` for ``x`` of shape ``(W*H,)`` or ``(W*H, B)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.grid.n_pixels:
            raise ValueError(f"expected {self.grid.n_pixels} pixels, got {x.shape[0]}")
        if self.n == 0:
            return np.zeros((0,) + x.shape[1:])
        parts = ordered_map(lambda m: m @ x, self._row_chunks, self.workers)
        return np.concatenate(parts, axis=0)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """``P.T @ y`` for ``y`` of shape ``(n,)`` or ``(n, B)``."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != self.n:
            raise ValueError(f"expected {self.n} event values, got {y.shape[0]}")
        out = np.zeros((self.grid.n_pixels,) + y.shape[1:])
        parts = ordered_map(lambda c: c[1] @ y[c[0]], self._bp_chunks, self.workers)
        for p in parts:
            out += p
        return out

    def todense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_projection_matrix(
    cfg: ScannerConfig, grid: Grid, events: EventList, workers: int | None = None
) -> ProjectionMatrix:
    """Projection matrix for ``events``; rows are computed chunk-wise in parallel."""
    events.validate(cfg)
    n = events.n
    if n == 0:
        return ProjectionMatrix(grid, sp.csr_matrix((0, grid.n_pixels)), np.zeros(0, dtype=np.int64), workers)

    def chunk(a):
        return _event_rows(cfg, grid, events[a:a + CHUNK_EVENTS])

    blocks = ordered_map(chunk, range(0, n, CHUNK_EVENTS), workers)
    mat = blocks[0] if len(blocks) == 1 else sp.vstack(blocks, format="csr")
    return ProjectionMatrix(grid, mat, events.keys(), workers)


def _check_grid(P: ProjectionMatrix, f: Image2D) -> None:
    if f.grid != P.grid:
        raise ValueError(f"image grid {f.grid} does not match projector grid {P.grid}")


def forward_project(P: ProjectionMatrix, f: Image2D) -> np.ndarray:
    _check_grid(P, f)
    return P.apply(f.values.reshape(-1))


def back_project(P: ProjectionMatrix, h) -> Image2D:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.size != P.n:
        raise ValueError(f"expected {P.n} event values, got {h.size}")
    return Image2D(P.adjoint(h).reshape(P.grid.shape), P.grid.pixel_size)


def estimate_memory(mode: str, dims) -> int:
    """Dense float32 footprint in bytes of a sinogram system matrix or list-mode matrix.

    ``dims`` is ``(rad, view, tofbin, W, H)`` for ``"sinogram"`` and ``(n, W, H)``
    for ``"listmode"``.
    """
    dims = tuple(int(d) for d in dims)
    if mode == "sinogram":
        if len(dims) != 5:
            raise ValueError("sinogram dims are (rad, view, tofbin, W, H)")
    elif mode == "listmode":
        if len(dims) != 3:
            raise ValueError("listmode dims are (n, W, H)")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return int(np.prod(dims, dtype=np.int64)) * 4
