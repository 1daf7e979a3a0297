"""Phantoms, noisy TOF sinograms and their conversion to list-mode data.

Sinogram bins enumerate every crystal pair (c1 < c2) crossed with every TOF
bin, in the order of :func:`lmpet.geometry.all_lor_tof_pairs`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import fileio
from ._parallel import ordered_map
from .geometry import ScannerConfig, all_lor_tof_pairs
from .projector import EventList, Grid, Image2D, ProjectionMatrix, build_projection_matrix

LESION_RADIUS_MM = (2.0, 4.0)
REFERENCE_SPLIT = (400, 40, 40)


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    activity: float

    def contains(self, x, y):
        return ((x - self.center[0]) / self.axes[0]) ** 2 + ((y - self.center[1]) / self.axes[1]) ** 2 <= 1.0


@dataclass(frozen=True)
class HotDisk:
    center: tuple[float, float]
    radius: float
    multiplier: float

    def contains(self, x, y):
        return (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2 <= self.radius ** 2


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple[Ellipse, ...] = ()
    disks: tuple[HotDisk, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        for e in self.ellipses:
            if e.activity < 0 or min(e.axes) <= 0:
                raise ValueError(f"invalid ellipse {e}")
        for d in self.disks:
            lo, hi = LESION_RADIUS_MM
            if not lo <= d.radius <= hi:
                raise ValueError(f"lesion radius {d.radius} mm outside [{lo}, {hi}]")
            if d.multiplier < 0:
                raise ValueError("lesion multiplier must be nonnegative")
            if not any(e.contains(*d.center) for e in self.ellipses):
                raise ValueError(f"lesion at {d.center} lies outside every ellipse")


def random_phantom_spec(grid: Grid, rng: np.random.Generator, n_lesions: int | tuple[int, int] = (1, 3),
                        seed: int | None = None) -> PhantomSpec:
    """Body ellipse with a few organ-like inserts and hot lesions of radius 2-4 mm."""
    half = 0.5 * min(grid.width, grid.height) * grid.pixel_size
    body = Ellipse(
        (rng.uniform(-0.05, 0.05) * half, rng.uniform(-0.05, 0.05) * half),
        (rng.uniform(0.70, 0.88) * half, rng.uniform(0.55, 0.80) * half),
        1.0,
    )
    ellipses = [body]
    for _ in range(rng.integers(1, 4)):
        ax = (rng.uniform(0.12, 0.3) * half, rng.uniform(0.12, 0.3) * half)
        r = rng.uniform(0, 0.45)
        t = rng.uniform(0, 2 * np.pi)
        c = (body.center[0] + r * body.axes[0] * np.cos(t), body.center[1] + r * body.axes[1] * np.sin(t))
        ellipses.append(Ellipse(c, ax, rng.uniform(0.3, 1.5)))
    if isinstance(n_lesions, tuple):
        n_lesions = int(rng.integers(n_lesions[0], n_lesions[1] + 1))
    disks = []
    for _ in range(n_lesions):
        radius = rng.uniform(*LESION_RADIUS_MM)
        # rejection-sample a center well inside the body
        while True:
            u = rng.uniform(-1, 1, size=2)
            if u @ u <= 0.6 ** 2:
                break
        c = (body.center[0] + u[0] * body.axes[0], body.center[1] + u[1] * body.axes[1])
        disks.append(HotDisk(c, radius, rng.uniform(2.0, 4.0)))
    return PhantomSpec(tuple(ellipses), tuple(disks), seed)


def generate_phantom(spec: PhantomSpec, grid: Grid) -> Image2D:
    x, y = grid.pixel_centers()
    values = np.zeros(grid.shape)
    for e in spec.ellipses:
        values += np.where(e.contains(x, y), e.activity, 0.0)
    for d in spec.disks:
        values = np.where(d.contains(x, y), values * d.multiplier, values)
    return Image2D(values, grid.pixel_size)


@dataclass
class Sinogram:
    """TOF sinogram over all crystal pairs; ``values`` has shape ``(n_lor, n_tof)``."""

    values: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    coverage: np.ndarray = field(repr=False)

    @property
    def n_lor(self) -> int:
        return self.values.shape[0]

    @property
    def n_tof(self) -> int:
        return self.values.shape[1]

    def bins(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(c1, c2, tof) of every bin, flattened in bin order."""
        nt = self.n_tof
        return (np.repeat(self.c1, nt), np.repeat(self.c2, nt), np.tile(np.arange(nt), self.n_lor))

    def total(self):
        return self.values.sum()


@lru_cache(maxsize=8)
def system_matrix(cfg: ScannerConfig, grid: Grid) -> ProjectionMatrix:
    """Projection matrix over every sinogram bin (cached per geometry)."""
    c1, c2, t = all_lor_tof_pairs(cfg)
    return build_projection_matrix(cfg, grid, EventList(c1, c2, t))


def _empty_sinogram_like(cfg: ScannerConfig, grid: Grid) -> Sinogram:
    P = system_matrix(cfg, grid)
    nt = cfg.n_tof_bins
    c1, c2 = np.triu_indices(cfg.n_crystals, k=1)
    coverage = (np.diff(P.matrix.indptr) > 0).reshape(-1, nt)
    return Sinogram(np.zeros((c1.size, nt)), c1.astype(np.int64), c2.astype(np.int64), coverage)


def simulate_sinogram(cfg: ScannerConfig, f: Image2D) -> Sinogram:
    """Noise-free TOF sinogram ``P_all f``."""
    if np.any(f.values < 0):
        raise ValueError("activity image must be nonnegative")
    sino = _empty_sinogram_like(cfg, f.grid)
    P = system_matrix(cfg, f.grid)
    sino.values = P.apply(f.values.reshape(-1)).reshape(sino.values.shape)
    return sino


def scale_and_noise(s: Sinogram, total_counts: float, background_fraction: float = 0.15,
                    seed=None) -> Sinogram:
    """Scale to ``total_counts`` expected counts, add a uniform background, Poisson-sample.

    The background carries ``background_fraction`` of the expected counts and is
    spread evenly over bins that some LOR-TOF kernel maps into the image.
    """
    if not 0 <= background_fraction < 1:
        raise ValueError("background_fraction must lie in [0, 1)")
    if total_counts < 0:
        raise ValueError("total_counts must be nonnegative")
    total = float(s.values.sum())
    if total_counts == 0:
        return Sinogram(np.zeros(s.values.shape, dtype=np.int64), s.c1, s.c2, s.coverage)
    if total <= 0:
        raise ValueError("cannot scale a sinogram with zero total")
    mean = s.values * (total_counts * (1 - background_fraction) / total)
    n_cov = int(s.coverage.sum())
    if background_fraction > 0 and n_cov:
        mean = mean + np.where(s.coverage, total_counts * background_fraction / n_cov, 0.0)
    rng = np.random.default_rng(seed)
    return Sinogram(rng.poisson(mean).astype(np.int64), s.c1, s.c2, s.coverage)


def sinogram_to_listmode(s: Sinogram) -> EventList:
    """One event per count, bins visited in bin order."""
    v = s.values.reshape(-1)
    if v.dtype.kind not in "iu":
        if not np.all(v == np.floor(v)):
            raise ValueError("sinogram must be integer-valued to convert to list-mode")
        v = v.astype(np.int64)
    if np.any(v < 0):
        raise ValueError("negative bin count")
    c1, c2, t = s.bins()
    return EventList(np.repeat(c1, v), np.repeat(c2, v), np.repeat(t, v))


# -- datasets ---------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sum(len(s) for s in sets) != len(sets[0] | sets[1] | sets[2]):
            raise ValueError("dataset splits overlap")

    @property
    def all(self) -> list[int]:
        return sorted(self.train + self.val + self.test)

    def to_text(self) -> str:
        return "".join(" ".join(str(i) for i in part) + "\n" for part in (self.train, self.val, self.test))

    @classmethod
    def from_text(cls, text: str) -> "DatasetSplit":
        lines = text.split("\n")
        if len(lines) < 3:
            raise ValueError("split file needs three lines (train, val, test)")
        return cls(*[[int(t) for t in line.split()] for line in lines[:3]])


def split_sizes(n: int) -> tuple[int, int, int]:
    """400:40:40 proportions with floors; every split gets at least one item."""
    if n < 3:
        raise ValueError("need at least 3 phantoms")
    total = sum(REFERENCE_SPLIT)
    n_val = max(1, n * REFERENCE_SPLIT[1] // total)
    n_test = max(1, n * REFERENCE_SPLIT[2] // total)
    return n - n_val - n_test, n_val, n_test


def simulate_pair(cfg: ScannerConfig, grid: Grid, counts: float, background_fraction: float,
                  seed: int, index: int, n_lesions=(1, 3)):
    """One (ground truth, events, noisy sinogram) triple.

    The ground truth is the phantom rescaled to expected-count units, i.e. the
    image whose noise-free projection carries the non-background counts.
    """
    rng = np.random.default_rng([seed, index])
    spec = random_phantom_spec(grid, rng, n_lesions, seed=seed)
    phantom = generate_phantom(spec, grid)
    clean = simulate_sinogram(cfg, phantom)
    noise_seed = int(rng.integers(2**63))
    noisy = scale_and_noise(clean, counts, background_fraction, noise_seed)
    events = sinogram_to_listmode(noisy)
    events = events[rng.permutation(events.n)]
    scale = counts * (1 - background_fraction) / clean.total()
    truth = Image2D(phantom.values * scale, grid.pixel_size)
    return truth, events, noisy


def _grid_text(grid: Grid) -> str:
    return f"{grid.width}x{grid.height}"


def make_dataset(out_dir, n_phantoms: int, grid: Grid, cfg: ScannerConfig, counts: float, seed: int,
                 background_fraction: float = 0.15, split: tuple[int, int, int] | None = None,
                 scanner_path=None, workers: int | None = None) -> DatasetSplit:
    """Simulate ``n_phantoms`` (activity map, list-mode) pairs and write them to ``out_dir``.

    Layout: ``pairs/<idx>.img2``, ``pairs/<idx>.lmev``, ``split.txt``, ``meta.txt``
    and a copy of the scanner configuration in ``scanner.txt``.
    """
    if split is None:
        split = split_sizes(n_phantoms)
    if sum(split) != n_phantoms or min(split) < 0:
        raise ValueError(f"split {split} does not partition {n_phantoms} phantoms")
    out = Path(out_dir)
    pairs = out / "pairs"
    try:
        pairs.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {pairs}: {exc}") from exc

    # warm the shared system-matrix cache before fanning out
    system_matrix(cfg, grid)

    def one(idx):
        truth, events, _ = simulate_pair(cfg, grid, counts, background_fraction, seed, idx)
        try:
            fileio.write_image(pairs / f"{idx}.img2", truth)
            fileio.write_events(pairs / f"{idx}.lmev", events)
        except OSError as exc:
            raise OSError(f"failed writing pair {idx} under {pairs}: {exc}") from exc
        return events.n

    ordered_map(one, range(n_phantoms), workers)
    n_train, n_val, _ = split
    ids = list(range(n_phantoms))
    result = DatasetSplit(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])
    (out / "split.txt").write_text(result.to_text(), encoding="utf-8")
    cfg.save(out / "scanner.txt")
    meta = {
        "seed": seed,
        "counts": counts,
        "background_fraction": background_fraction,
        "n_phantoms": n_phantoms,
        "scanner": "scanner.txt",
        "scanner_source": str(scanner_path) if scanner_path is not None else "",
        "grid": _grid_text(grid),
        "pixel_mm": grid.pixel_size,
    }
    (out / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")
    return result


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


@dataclass
class Dataset:
    root: Path
    cfg: ScannerConfig
    grid: Grid
    split: DatasetSplit
    meta: dict

    @property
    def counts(self) -> float:
        return float(self.meta["counts"])

    def truth(self, idx: int) -> Image2D:
        return fileio.read_image(self.root / "pairs" / f"{idx}.img2")

    def events(self, idx: int) -> EventList:
        return fileio.read_events(self.root / "pairs" / f"{idx}.lmev")


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        meta = read_keyvalue(root / "meta.txt")
        split = DatasetSplit.from_text((root / "split.txt").read_text(encoding="utf-8"))
        cfg = ScannerConfig.load(root / meta.get("scanner", "scanner.txt"))
    except OSError as exc:
        raise OSError(f"cannot read dataset at {root}: {exc}") from exc
    w, h = (int(v) for v in meta["grid"].split("x"))
    return Dataset(root, cfg, Grid(w, h, float(meta["pixel_mm"])), split, meta)
