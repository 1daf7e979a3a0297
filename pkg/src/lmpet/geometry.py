"""Scanner geometry for a 2D cylindrical TOF-PET ring.

Crystals are points at the arc centers of a uniformly tiled ring. All functions
here are pure and operate on an immutable :class:`ScannerConfig`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT_MM_PER_PS = 0.2998


@dataclass(frozen=True)
class ScannerConfig:
    n_modules: int = 8
    crystals_per_module: int = 8
    crystal_pitch: float = 4.0
    ring_radius: float | None = None
    n_tof_bins: int = 9
    tof_bin_length: float = 15.0
    tof_resolution: float = 400.0

    def __post_init__(self):
        if self.n_modules < 1 or self.crystals_per_module < 1:
            raise ValueError("n_modules and crystals_per_module must be >= 1")
        if self.n_crystals < 8:
            raise ValueError(f"need at least 8 crystals, got {self.n_crystals}")
        if self.n_tof_bins < 1 or self.n_tof_bins % 2 == 0:
            raise ValueError(f"n_tof_bins must be odd, got {self.n_tof_bins}")
        if self.tof_bin_length <= 0 or self.tof_resolution <= 0:
            raise ValueError("tof_bin_length and tof_resolution must be positive")
        if self.crystal_pitch <= 0:
            raise ValueError("crystal_pitch must be positive")
        if self.ring_radius is None:
            object.__setattr__(
                self, "ring_radius", self.n_crystals * self.crystal_pitch / (2 * math.pi)
            )
        elif self.ring_radius <= 0:
            raise ValueError("ring_radius must be positive")

    @property
    def n_crystals(self) -> int:
        return self.n_modules * self.crystals_per_module

    @property
    def center_bin(self) -> int:
        return (self.n_tof_bins - 1) // 2

    @property
    def tof_sigma(self) -> float:
        """Spatial standard deviation (mm) of the TOF kernel along the LOR."""
        fwhm = SPEED_OF_LIGHT_MM_PER_PS * self.tof_resolution / 2
        return fwhm / 2.3548

    @classmethod
    def full(cls) -> "ScannerConfig":
        """28 modules x 16 crystals, 4 mm pitch, 17 TOF bins of 15 mm, 400 ps."""
        return cls(n_modules=28, crystals_per_module=16, n_tof_bins=17)

    @classmethod
    def desk(cls) -> "ScannerConfig":
        return cls()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "ScannerConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown scanner key {key!r}")
            if key == "ring_radius" and value in ("None", ""):
                kwargs[key] = None
            elif types[key] in ("int", int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ScannerConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Lor:
    """Line of response between two crystals; ``p1``/``p2`` are derived endpoints in mm."""

    c1: int
    c2: int
    p1: tuple[float, float]
    p2: tuple[float, float]

    @property
    def length(self) -> float:
        return math.dist(self.p1, self.p2)

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.p2, self.p1)
        return d / np.linalg.norm(d)

    @property
    def midpoint(self) -> np.ndarray:
        return (np.asarray(self.p1) + np.asarray(self.p2)) / 2


def _check_crystal(cfg: ScannerConfig, c) -> None:
    c = np.asarray(c)
    if np.any(c < 0) or np.any(c >= cfg.n_crystals):
        raise IndexError(f"crystal index out of range [0, {cfg.n_crystals})")


def crystal_angles(cfg: ScannerConfig, c) -> np.ndarray:
    _check_crystal(cfg, c)
    return 2 * np.pi * (np.asarray(c, dtype=np.float64) + 0.5) / cfg.n_crystals


def crystal_position(cfg: ScannerConfig, c):
    """Position (mm) of crystal ``c``; accepts a scalar or an integer array.

    Returns an array of shape ``(2,)`` for a scalar index, ``(..., 2)`` otherwise.
    """
    phi = crystal_angles(cfg, c)
    return np.stack([cfg.ring_radius * np.cos(phi), cfg.ring_radius * np.sin(phi)], axis=-1)


def make_lor(cfg: ScannerConfig, c1: int, c2: int) -> Lor:
    c1, c2 = int(c1), int(c2)
    if c1 == c2:
        raise ValueError(f"degenerate LOR: both ends on crystal {c1}")
    p1 = crystal_position(cfg, c1)
    p2 = crystal_position(cfg, c2)
    return Lor(c1, c2, (float(p1[0]), float(p1[1])), (float(p2[0]), float(p2[1])))


def tof_bin_offset(cfg: ScannerConfig, t) -> np.ndarray:
    """Signed distance (mm) of TOF bin ``t``'s center from the LOR midpoint, toward c2."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= cfg.n_tof_bins):
        raise IndexError(f"TOF bin out of range [0, {cfg.n_tof_bins})")
    return (t - cfg.center_bin) * cfg.tof_bin_length


def tof_bin_center(cfg: ScannerConfig, lor: Lor, t: int) -> np.ndarray:
    return lor.midpoint + float(tof_bin_offset(cfg, t)) * lor.direction


def all_lor_tof_pairs(cfg: ScannerConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every unordered crystal pair (c1 < c2) crossed with every TOF bin.

    Ordering is lexicographic in ``(c1, c2, tof)``. Returns three int64 arrays of
    length ``C(N_c, 2) * n_tof_bins``.
    """
    c1, c2 = np.triu_indices(cfg.n_crystals, k=1)
    nt = cfg.n_tof_bins
    return (
        np.repeat(c1, nt).astype(np.int64),
        np.repeat(c2, nt).astype(np.int64),
        np.tile(np.arange(nt, dtype=np.int64), c1.size),
    )
