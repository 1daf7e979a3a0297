"""Classical list-mode baselines: MLEM/OSEM, OSEM+TV and SPDHG+TV.

All reconstructors minimise (or, for plain OSEM, approach the minimiser of)
the list-mode Poisson objective

    L(f) = <sens, f> - sum_i log((P f)_i + eta)  [+ lambda * TV(f)]

with ``f >= 0``. ``sens`` is the back projection of ones over every LOR/TOF
bin of the scanner, so it includes the TOF kernel just like ``P``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .geometry import ScannerConfig
from .projector import Grid, Image2D, ProjectionMatrix

ETA = 1e-12
TV_SMOOTHING = 1e-8


@dataclass(frozen=True)
class ReconConfig:
    n_iter: int = 30
    n_subsets: int = 4
    tv_weight: float = 0.0
    tv_inner_steps: int = 10
    sigma: float | None = None
    tau: float | None = None
    gamma: float = 0.05
    rho: float = 0.99
    power_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be nonnegative")
        if self.tv_inner_steps < 0:
            raise ValueError("tv_inner_steps must be nonnegative")


# -- sensitivity ------------------------------------------------------------


def _geometry_key(cfg: ScannerConfig, grid: Grid) -> str:
    text = cfg.to_text() + f"{grid.width}x{grid.height}@{grid.pixel_size!r}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def sensitivity_image(cfg: ScannerConfig, grid: Grid, cache_dir=None) -> Image2D:
    """Back projection of ones over every (LOR, TOF bin) of the scanner.

    With ``cache_dir`` the image is stored as ``sens_<hash>.img2`` keyed by the
    scanner configuration and grid, and reused on later calls.
    """
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"sens_{_geometry_key(cfg, grid)}.img2"
        if path.exists():
            return fileio.read_image(path)
    from .phantom_sim import system_matrix

    P = system_matrix(cfg, grid)
    sens = Image2D(P.adjoint(np.ones(P.n)).reshape(grid.shape), grid.pixel_size)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fileio.write_image(path, sens)
    return sens


def fov_mask(sens: Image2D) -> np.ndarray:
    return sens.values > 0


# -- objective --------------------------------------------------------------


def _arr(f) -> np.ndarray:
    return f.values if isinstance(f, Image2D) else np.asarray(f, dtype=np.float64)


def neg_log_likelihood(P: ProjectionMatrix, f, sens) -> float:
    x = _arr(f)
    if np.any(x < 0):
        raise ValueError("neg_log_likelihood needs a nonnegative image")
    s = _arr(sens)
    val = float(np.sum(s * x))
    if P.n:
        val -= float(np.sum(np.log(P.apply(x.reshape(-1)) + ETA)))
    return val


def neg_log_likelihood_grad(P: ProjectionMatrix, f, sens) -> np.ndarray:
    x = _arr(f)
    s = _arr(sens)
    if P.n == 0:
        return s.copy()
    ratio = 1.0 / (P.apply(x.reshape(-1)) + ETA)
    return s - P.adjoint(ratio).reshape(x.shape)


def _grad2d(x):
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    dy[:-1, :] = x[1:, :] - x[:-1, :]
    return dx, dy


def _div2d(px, py):
    """Negative adjoint of :func:`_grad2d`."""
    d = np.zeros_like(px)
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    return d


def tv_value_and_subgradient(f, mu: float = TV_SMOOTHING):
    """Smoothed isotropic TV (forward differences, mirrored boundary) and its gradient."""
    x = _arr(f)
    dx, dy = _grad2d(x)
    norm = np.sqrt(dx * dx + dy * dy + mu * mu)
    value = float(np.sum(norm - mu))
    grad = -_div2d(dx / norm, dy / norm)
    if isinstance(f, Image2D):
        return value, Image2D(grad, f.pixel_size)
    return value, grad


def objective(P: ProjectionMatrix, f, sens, tv_weight: float = 0.0) -> float:
    val = neg_log_likelihood(P, f, sens)
    if tv_weight:
        val += tv_weight * tv_value_and_subgradient(f)[0]
    return val


def tv_prox(v: np.ndarray, weight: float, n_iter: int = 20, nonneg: bool = True) -> np.ndarray:
    """``argmin_x 0.5||x - v||^2 + weight*TV(x)`` (+ ``x >= 0``) by fast gradient projection."""
    v = np.asarray(v, dtype=np.float64)
    clip = (lambda a: np.maximum(a, 0.0)) if nonneg else (lambda a: a)
    if weight <= 0 or n_iter == 0:
        return clip(v)
    px = np.zeros_like(v)
    py = np.zeros_like(v)
    rx, ry = px.copy(), py.copy()
    t = 1.0
    for _ in range(n_iter):
        x = clip(v + weight * _div2d(rx, ry))
        gx, gy = _grad2d(x)
        qx = rx + gx / (8.0 * weight)
        qy = ry + gy / (8.0 * weight)
        norm = np.maximum(1.0, np.sqrt(qx * qx + qy * qy))
        qx, qy = qx / norm, qy / norm
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        rx = qx + (t - 1) / t_next * (qx - px)
        ry = qy + (t - 1) / t_next * (qy - py)
        px, py, t = qx, qy, t_next
    return clip(v + weight * _div2d(px, py))


# -- EM ---------------------------------------------------------------------


def subset_indices(n: int, n_subsets: int) -> list[np.ndarray]:
    return [np.arange(k, n, n_subsets) for k in range(n_subsets)]


def _subsets(P: ProjectionMatrix, n_subsets: int) -> list[ProjectionMatrix | None]:
    out = []
    for k, idx in enumerate(subset_indices(P.n, n_subsets)):
        if idx.size == 0:
            warnings.warn(f"subset {k} of {n_subsets} is empty and will be skipped", stacklevel=3)
            out.append(None)
        else:
            out.append(P if n_subsets == 1 else P.take(idx))
    return out


def _em_loop(P, sens, cfg, tv_weight, callback):
    s = _arr(sens)
    mask = s > 0
    f = mask.astype(np.float64)
    subs = _subsets(P, cfg.n_subsets)
    s_sub = s / cfg.n_subsets
    safe = np.where(mask, s_sub, 1.0)
    for it in range(1, cfg.n_iter + 1):
        for Pk in subs:
            if Pk is None:
                continue
            ratio = 1.0 / (Pk.apply(f.reshape(-1)) + ETA)
            f = np.where(mask, f * Pk.adjoint(ratio).reshape(f.shape) / safe, 0.0)
            if tv_weight > 0 and cfg.tv_inner_steps:
                step = 1.0 / cfg.tv_inner_steps
                for _ in range(cfg.tv_inner_steps):
                    _, g = tv_value_and_subgradient(f)
                    f = np.where(mask, np.maximum(f - step * tv_weight * f / safe * g, 0.0), 0.0)
        if callback is not None:
            callback(it, f)
    return Image2D(f, P.grid.pixel_size)


def osem(P: ProjectionMatrix, sens: Image2D, cfg: ReconConfig = ReconConfig(), callback=None) -> Image2D:
    """List-mode OSEM with stride subsets (``n_subsets=1`` is MLEM).

    Starts from ones inside the field of view (``sens > 0``).
    ``callback(iteration, image_array)`` runs after every full iteration.
    """
    return _em_loop(P, sens, cfg, 0.0, callback)


def osem_tv(P: ProjectionMatrix, sens: Image2D, cfg: ReconConfig, callback=None) -> Image2D:
    """OSEM where each subset update is followed by ``tv_inner_steps`` TV descent steps.

    The TV steps use the EM preconditioner ``f / (sens / n_subsets)`` and are
    projected onto ``f >= 0``; together they amount to one preconditioned step
    on ``tv_weight * TV``.
    """
    return _em_loop(P, sens, cfg, cfg.tv_weight, callback)


# -- SPDHG ------------------------------------------------------------------


def operator_norm(P: ProjectionMatrix, n_iter: int = 50, seed: int = 0) -> float:
    """Largest singular value of ``P`` by power iteration on ``P^T P``."""
    if P.n == 0:
        return 0.0
    x = np.random.default_rng(seed).random(P.grid.n_pixels) + 0.5
    x /= np.linalg.norm(x)
    norm = 0.0
    for _ in range(n_iter):
        y = P.adjoint(P.apply(x))
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
    return float(np.sqrt(norm))


def _poisson_dual_prox(v, sigma):
    """prox of sigma*F* for F(y) = -log(y): the negative root of z^2 - v z - sigma = 0."""
    return 0.5 * (v - np.sqrt(v * v + 4 * sigma))


def _scaled_norm(Pk: ProjectionMatrix, row_scale, col_scale, n_iter: int, seed: int) -> float:
    """Power-iteration norm of ``diag(row_scale)^(1/2) P diag(col_scale)^(1/2)``."""
    rs, cs = np.sqrt(row_scale), np.sqrt(col_scale)
    x = np.random.default_rng(seed).random(cs.size) + 0.5
    x /= np.linalg.norm(x)
    norm = 0.0
    for _ in range(n_iter):
        y = cs * Pk.adjoint(rs * rs * Pk.apply(cs * x))
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
    return float(np.sqrt(norm))


def spdhg_tv(P: ProjectionMatrix, sens: Image2D, cfg: ReconConfig, callback=None) -> Image2D:
    """Stochastic primal-dual hybrid gradient for the list-mode Poisson objective + TV.

    One dual variable per event; each subset (event stride) is drawn uniformly
    with probability ``p = 1/n_subsets`` and an iteration is ``n_subsets`` draws.
    The sensitivity term, positivity and TV form the primal function, whose prox
    is computed by fast gradient projection.

    Steps are diagonally preconditioned: event ``i`` uses ``sigma / (P 1)_i`` and
    pixel ``j`` uses ``tau / max_k (P_k^T 1)_j``. The scalars must satisfy
    ``sigma * tau * ||P_k||^2 < p`` with the norm of the preconditioned subset
    operator estimated by power iteration; otherwise a ValueError is raised.

    Unless ``sigma`` and ``tau`` are given, their ratio is set by
    ``gamma * mean(1 / P x0) / max(x0)``, the ratio of the initial dual and
    primal magnitudes, so the default behaves alike across count levels.
    """
    s = _arr(sens)
    mask = s > 0
    m = cfg.n_subsets
    p = 1.0 / m
    subs = _subsets(P, m)
    active = [k for k, Pk in enumerate(subs) if Pk is not None]
    if not active:
        return Image2D(np.zeros(s.shape), P.grid.pixel_size)

    ones = np.ones(P.grid.n_pixels)
    row_pre = [None if Pk is None else 1.0 / np.maximum(Pk.apply(ones), ETA) for Pk in subs]
    col_sum = np.max([subs[k].adjoint(np.ones(subs[k].n)) for k in active], axis=0)
    reached = col_sum > 0
    col_pre = np.where(reached, 1.0 / np.where(reached, col_sum, 1.0), 0.0)
    norms = [_scaled_norm(subs[k], row_pre[k], col_pre, cfg.power_iters, cfg.seed) for k in active]
    max_norm = max(norms)

    # scaled uniform start: the ML solution among constant-in-FOV images
    x = mask * (P.n / max(float(s[mask].sum()), ETA))
    if cfg.sigma is None or cfg.tau is None:
        # balance primal and dual scales: |y| ~ 1/(P x) at the start, |x| ~ x.max()
        y_scale = float(np.mean(1.0 / (P.apply(x.reshape(-1)) + ETA)))
        gamma = cfg.gamma * y_scale / float(x.max())
        sigma = gamma * cfg.rho / max_norm
        tau = cfg.rho * p / (gamma * max_norm)
    else:
        sigma, tau = cfg.sigma, cfg.tau
    if sigma <= 0 or tau <= 0:
        raise ValueError("SPDHG step sizes must be positive")
    worst = sigma * tau * max_norm ** 2
    if worst >= p:
        raise ValueError(f"step sizes violate sigma*tau*||P_k||^2 < 1/n_subsets ({worst:.4g} >= {p:.4g})")
    tau_j = (tau * col_pre).reshape(s.shape)
    free = mask & ~reached.reshape(s.shape)
    x = np.where(free, 0.0, x)

    ys, z = [], np.zeros(s.size)
    for Pk in subs:
        if Pk is None:
            ys.append(None)
            continue
        yk = -1.0 / (Pk.apply(x.reshape(-1)) + ETA)
        ys.append(yk)
        z += Pk.adjoint(yk)
    zbar = z.copy()
    rng = np.random.default_rng(cfg.seed)
    for it in range(1, cfg.n_iter + 1):
        for _ in range(m):
            v = x - tau_j * (zbar.reshape(s.shape) + s)
            if cfg.tv_weight > 0:
                # TV prox with a scalar step: use the mean pixel step inside the FOV
                v = tv_prox(v, float(tau_j[mask & ~free].mean()) * cfg.tv_weight, cfg.tv_inner_steps)
            x = np.where(mask & ~free, np.maximum(v, 0.0), 0.0)
            k = active[rng.integers(len(active))] if m > 1 else active[0]
            Pk = subs[k]
            sig = sigma * row_pre[k]
            y_new = _poisson_dual_prox(ys[k] + sig * Pk.apply(x.reshape(-1)), sig)
            dz = Pk.adjoint(y_new - ys[k])
            ys[k] = y_new
            z += dz
            zbar = z + dz / p
        if callback is not None:
            callback(it, x)
    return Image2D(x, P.grid.pixel_size)


# -- TV weight selection and reporting --------------------------------------

TV_FACTORS = (1e-3, 1e-2, 1e-1, 1.0)


def data_term_scale(sens) -> float:
    """Mean sensitivity inside the field of view.

    The data-term gradient ``sens - P^T(1/Pf)`` has this magnitude per pixel,
    while the TV gradient is O(1), so ``lambda = factor * scale`` puts both on
    a comparable footing.
    """
    s = _arr(sens)
    mask = s > 0
    return float(s[mask].mean()) if mask.any() else 0.0


def select_tv_weight(pairs, sens, cfg: ReconConfig, algo: str = "osem-tv",
                     factors=TV_FACTORS) -> tuple[float, dict[float, float]]:
    """Pick the TV weight with the best mean PSNR over validation pairs.

    ``pairs`` is a sequence of ``(P, target)``; candidates are
    ``factor * data_term_scale(sens)``. Returns the chosen weight and the mean
    PSNR for every candidate. Ties go to the smaller weight.
    """
    from .metrics import psnr

    if not pairs:
        raise ValueError("need at least one validation pair")
    recon = {"osem-tv": osem_tv, "spdhg-tv": spdhg_tv}.get(algo)
    if recon is None:
        raise ValueError(f"unknown TV algorithm {algo!r}")
    scale = data_term_scale(sens)
    scores = {}
    for factor in factors:
        weight = factor * scale
        c = ReconConfig(**{**cfg.__dict__, "tv_weight": weight})
        scores[weight] = float(np.mean([psnr(recon(P, sens, c), target) for P, target in pairs]))
    best = max(scores, key=lambda w: (scores[w], -w))
    return best, scores


def write_objective_csv(path, values) -> None:
    """``iter,objective`` rows for a sequence of per-iteration objective values."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,objective\n")
        for it, val in enumerate(values, 1):
            fh.write(f"{it},{val!r}\n")
