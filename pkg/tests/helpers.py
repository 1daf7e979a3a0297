"""Shared oracles and generators for the test-suite."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from lmpet.geometry import ScannerConfig, make_lor, tof_bin_offset
from lmpet.projector import EventList, Grid, build_projection_matrix

N_SUBSTEPS = 10_000


def random_events(cfg: ScannerConfig, n: int, rng: np.random.Generator, grid: Grid | None = None) -> EventList:
    """Uniform random events; with ``grid`` given, only events whose row is nonempty."""
    out = ([], [], [])
    while len(out[0]) < n:
        m = 2 * (n - len(out[0])) + 8
        a = rng.integers(0, cfg.n_crystals, m)
        b = (a + rng.integers(1, cfg.n_crystals, m)) % cfg.n_crystals
        t = rng.integers(0, cfg.n_tof_bins, m)
        ev = EventList(a, b, t)
        if grid is not None:
            P = build_projection_matrix(cfg, grid, ev)
            keep = np.diff(P.matrix.indptr) > 0
            ev = ev[keep]
        for dst, src in zip(out, (ev.c1, ev.c2, ev.tof)):
            dst.extend(src.tolist())
    return EventList(*(np.asarray(v[:n]) for v in out))


def smooth_image(grid: Grid, rng: np.random.Generator, n_blobs: int = 4) -> np.ndarray:
    """Sum of Gaussian blobs on a positive floor, tapered to zero one pixel inside the border."""
    x, y = grid.pixel_centers()
    half = 0.5 * min(grid.width, grid.height) * grid.pixel_size
    f = np.full(grid.shape, 0.5)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(-0.5, 0.5, 2) * half
        s = rng.uniform(0.15, 0.35) * half
        f += rng.uniform(0.5, 2.0) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    r = np.hypot(x, y) / (half - grid.pixel_size)
    taper = np.clip(1.0 - r ** 4, 0.0, None)
    return f * taper


def line_integral(cfg: ScannerConfig, grid: Grid, f: np.ndarray, c1: int, c2: int, tof: int,
                  n_sub: int = N_SUBSTEPS) -> float:
    """TOF-weighted line integral of bilinearly interpolated ``f`` along LOR (c1, c2).

    Midpoint rule with ``n_sub`` uniform sub-steps over the whole LOR; ``f`` is
    zero beyond its pixel centers' hull. The TOF kernel is the truncated
    Gaussian, evaluated independently of the projector code.
    """
    lor = make_lor(cfg, c1, c2)
    p1, p2 = np.asarray(lor.p1), np.asarray(lor.p2)
    L = lor.length
    s = (np.arange(n_sub) + 0.5) * (L / n_sub)
    pts = p1[None, :] + (s / L)[:, None] * (p2 - p1)[None, :]
    col = pts[:, 0] / grid.pixel_size + (grid.width - 1) / 2
    row = pts[:, 1] / grid.pixel_size + (grid.height - 1) / 2
    padded = np.pad(f, 1)
    vals = ndimage.map_coordinates(padded, [row + 1, col + 1], order=1, mode="constant", cval=0.0)
    sigma = (0.2998 * cfg.tof_resolution / 2) / 2.3548
    d = s - L / 2 - float(tof_bin_offset(cfg, tof))
    eps = np.where(np.abs(d) > 3 * sigma, 0.0, np.exp(-d * d / (2 * sigma * sigma)))
    return float(np.sum(eps * vals) * (L / n_sub))


def desk_instance(grid: Grid, n_events: int, seed: int):
    """Desk scanner, ``n_events`` random in-image events and their projection matrix."""
    cfg = ScannerConfig.desk()
    rng = np.random.default_rng(seed)
    ev = random_events(cfg, n_events, rng, grid)
    return cfg, ev, build_projection_matrix(cfg, grid, ev)
