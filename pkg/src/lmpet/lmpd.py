"""LMPDNet: unrolled learned primal-dual reconstruction for list-mode data.

Each of the K layers runs

    h_k = h_{k-1} + DualNet_k(h_{k-1}, P f_{k-1}, 1)      (per event)
    f_k = f_{k-1} + PrimalNet_k(f_{k-1}, P^T h_k)          (per image)

from ``f_0 = 0`` and ``h_0 = 0``. The dual network is a small fully connected
net applied to every event independently (the event axis acts as a batch
axis); the constant third input stands in for the measurement, since every
list-mode event carries a count of one. Layers do not share parameters.

The projector enters autograd as a linear operator whose input gradient is
its adjoint, so reverse-mode differentiation runs through the full unroll.
"""

from __future__ import annotations

import copy
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .metrics import psnr
from .projector import Grid, Image2D, ProjectionMatrix

CHECKPOINT_MAGIC = b"LMPD"
CHECKPOINT_VERSION = 1


# -- projector as an autograd op -------------------------------------------


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64, copy=False)


class _ForwardProjection(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f, P):
        ctx.P = P
        ctx.shape = f.shape
        x = _to_numpy(f).reshape(f.shape[0], -1).T
        return torch.from_numpy(np.ascontiguousarray(P.apply(x).T)).to(f.dtype)

    @staticmethod
    def backward(ctx, grad):
        g = _to_numpy(grad).T
        out = ctx.P.adjoint(g).T.reshape(ctx.shape)
        return torch.from_numpy(np.ascontiguousarray(out)).to(grad.dtype), None


class _BackProjection(torch.autograd.Function):
    @staticmethod
    def forward(ctx, h, P):
        ctx.P = P
        g = P.grid
        out = P.adjoint(_to_numpy(h).T).T.reshape(h.shape[0], 1, g.height, g.width)
        return torch.from_numpy(np.ascontiguousarray(out)).to(h.dtype)

    @staticmethod
    def backward(ctx, grad):
        x = _to_numpy(grad).reshape(grad.shape[0], -1).T
        return torch.from_numpy(np.ascontiguousarray(ctx.P.apply(x).T)).to(grad.dtype), None


def project(f: torch.Tensor, P: ProjectionMatrix) -> torch.Tensor:
    """``(B, 1, H, W) -> (B, n)``."""
    return _ForwardProjection.apply(f, P)


def backproject(h: torch.Tensor, P: ProjectionMatrix) -> torch.Tensor:
    """``(B, n) -> (B, 1, H, W)``."""
    return _BackProjection.apply(h, P)


# -- modules ----------------------------------------------------------------


class DualNet(nn.Module):
    """3 -> 32 -> 32 -> 1 per-event MLP with PReLU on the hidden layers, residual output."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(3, hidden), nn.PReLU(),
            nn.Linear(hidden, hidden), nn.PReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, h, proj):
        if h.shape != proj.shape:
            raise ValueError(f"dual inputs differ in shape: {tuple(h.shape)} vs {tuple(proj.shape)}")
        x = torch.stack([h, proj, torch.ones_like(h)], dim=-1)
        return h + self.net(x).squeeze(-1)


class PrimalNet(nn.Module):
    """Four 3x3 convolutions (2 -> 64 -> 64 -> 64 -> 1) with PReLU, residual output.

    The last convolution starts at zero so a fresh layer is the identity map.
    """

    def __init__(self, channels: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(2, channels, 3, padding=1), nn.PReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.PReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.PReLU(),
            nn.Conv2d(channels, 1, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, f, bp):
        if f.shape != bp.shape:
            raise ValueError(f"primal inputs differ in shape: {tuple(f.shape)} vs {tuple(bp.shape)}")
        return f + self.net(torch.cat([f, bp], dim=1))


class LmpdLayer(nn.Module):
    def __init__(self, dual_hidden: int = 32, primal_channels: int = 64):
        super().__init__()
        self.dual = DualNet(dual_hidden)
        self.primal = PrimalNet(primal_channels)


class LmpdNet(nn.Module):
    def __init__(self, grid: Grid, n_layers: int = 7, seed: int = 0, dtype=torch.float64,
                 dual_hidden: int = 32, primal_channels: int = 64):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one layer")
        self.grid = grid
        self.dual_hidden = dual_hidden
        self.primal_channels = primal_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.layers = nn.ModuleList(LmpdLayer(dual_hidden, primal_channels) for _ in range(n_layers))
        self.to(dtype)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def unroll(self, P: ProjectionMatrix, batch: int = 1):
        """Run every layer; returns the lists ``[f_1..f_K]`` and ``[h_1..h_K]``."""
        if P.grid != self.grid:
            raise ValueError(f"projector grid {P.grid} does not match model grid {self.grid}")
        f = torch.zeros(batch, 1, self.grid.height, self.grid.width, dtype=self.dtype)
        h = torch.zeros(batch, P.n, dtype=self.dtype)
        fs, hs = [], []
        for layer in self.layers:
            h = layer.dual(h, project(f, P))
            f = layer.primal(f, backproject(h, P))
            fs.append(f)
            hs.append(h)
        return fs, hs

    def forward(self, P: ProjectionMatrix) -> torch.Tensor:
        return self.unroll(P)[0][-1]


def _as_image(t: torch.Tensor, grid: Grid) -> Image2D:
    return Image2D(_to_numpy(t).reshape(grid.shape), grid.pixel_size)


def dual_forward(dual: DualNet, h, proj) -> np.ndarray:
    """Apply one dual module to per-event arrays of equal length."""
    h = np.asarray(h, dtype=np.float64)
    proj = np.asarray(proj, dtype=np.float64)
    if h.shape != proj.shape:
        raise ValueError(f"length mismatch: {h.shape} vs {proj.shape}")
    dt = next(dual.parameters()).dtype
    with torch.no_grad():
        out = dual(torch.as_tensor(h, dtype=dt)[None], torch.as_tensor(proj, dtype=dt)[None])
    return _to_numpy(out[0])


def primal_forward(primal: PrimalNet, f: Image2D, bp: Image2D) -> Image2D:
    if f.grid != bp.grid:
        raise ValueError(f"grid mismatch: {f.grid} vs {bp.grid}")
    dt = next(primal.parameters()).dtype
    with torch.no_grad():
        out = primal(torch.as_tensor(f.values, dtype=dt)[None, None], torch.as_tensor(bp.values, dtype=dt)[None, None])
    return _as_image(out, f.grid)


def model_forward(model: LmpdNet, P: ProjectionMatrix) -> tuple[Image2D, list[Image2D]]:
    """Final image and the per-layer outputs ``f_1..f_K``."""
    with torch.no_grad():
        fs, _ = model.unroll(P)
    images = [_as_image(f, model.grid) for f in fs]
    return images[-1], images


def _target_tensor(model: LmpdNet, target) -> torch.Tensor:
    values = target.values if isinstance(target, Image2D) else np.asarray(target)
    if values.shape != model.grid.shape:
        raise ValueError(f"target shape {values.shape} does not match grid {model.grid.shape}")
    return torch.as_tensor(values, dtype=model.dtype)[None, None]


def loss_and_gradients(model: LmpdNet, P: ProjectionMatrix, target) -> tuple[float, dict[str, np.ndarray]]:
    """Pixel-mean squared error of ``f_K`` and its gradient for every parameter."""
    model.zero_grad(set_to_none=True)
    fs, hs = model.unroll(P)
    for k, (f, h) in enumerate(zip(fs, hs), 1):
        if not (torch.isfinite(f).all() and torch.isfinite(h).all()):
            raise FloatingPointError(f"non-finite values in layer {k}")
    loss = torch.mean((fs[-1] - _target_tensor(model, target)) ** 2)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = np.zeros(p.shape) if p.grad is None else _to_numpy(p.grad).copy()
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        grads[name] = g
    return float(loss.detach()), grads


def layer_ablation_report(model: LmpdNet, P: ProjectionMatrix, target: Image2D) -> list[float]:
    """PSNR of every intermediate output ``f_k`` against ``target``."""
    _, images = model_forward(model, P)
    return [psnr(f, target) for f in images]


def write_ablation_csv(path, psnrs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "psnr"])
        for k, p in enumerate(psnrs, 1):
            w.writerow([k, f"{p:.6f}"])


# -- checkpoints ------------------------------------------------------------
#
# Header: b"LMPD", u32 version, u32 K, u32 W, u32 H, f64 pixel_size,
#         u32 dual_hidden, u32 primal_channels, u32 n_blocks
# Blocks, in state_dict order (per layer k: dual.net.{0,1,2,3,4}, then
# primal.net.{0..6}; weight before bias):
#         u32 name_len, UTF-8 name, u64 count, count x f64


_HEADER = struct.Struct("<4sIIIIdIII")


def save_checkpoint(path, model: LmpdNet) -> None:
    state = model.state_dict()
    g = model.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.n_layers, g.width, g.height,
                              g.pixel_size, model.dual_hidden, model.primal_channels, len(state)))
        for name, t in state.items():
            raw = name.encode("utf-8")
            values = _to_numpy(t).reshape(-1)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", values.size))
            fh.write(values.astype("<f8").tobytes())


def load_checkpoint(path, dtype=torch.float64) -> LmpdNet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, K, W, H, ps, hidden, channels, n_blocks = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    model = LmpdNet(Grid(W, H, ps), K, dtype=dtype, dual_hidden=hidden, primal_channels=channels)
    state = model.state_dict()
    pos = _HEADER.size
    loaded = {}
    for _ in range(n_blocks):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        values = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        if name not in state:
            raise ValueError(f"{path}: unexpected parameter block {name!r}")
        if values.size != state[name].numel():
            raise ValueError(f"{path}: block {name!r} has {values.size} values, expected {state[name].numel()}")
        loaded[name] = torch.from_numpy(values.copy()).reshape(state[name].shape).to(dtype)
    missing = set(state) - set(loaded)
    if missing:
        raise ValueError(f"{path}: missing parameter blocks {sorted(missing)}")
    model.load_state_dict(loaded)
    return model


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 500
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainResult:
    model: LmpdNet
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse"])
            for epoch, tr, va in self.curve:
                w.writerow([epoch, repr(tr), repr(va)])


@dataclass
class TrainingPair:
    P: ProjectionMatrix
    target: Image2D


def mean_mse(model: LmpdNet, pairs: list[TrainingPair]) -> float:
    if not pairs:
        return float("nan")
    with torch.no_grad():
        vals = [float(torch.mean((model(p.P) - _target_tensor(model, p.target)) ** 2)) for p in pairs]
    return float(np.mean(vals))


def train(model: LmpdNet, train_pairs: list[TrainingPair], val_pairs: list[TrainingPair],
          cfg: TrainConfig, checkpoint=None, progress=None) -> TrainResult:
    """Adam on the pixel MSE of ``f_K``, one pair per step, shuffled each epoch.

    The curve has one row per epoch (row 0 evaluates the untrained model); the
    training column is the mean step loss of that epoch. The model that scores
    best on the validation pairs is kept (and written to ``checkpoint``) and
    returned in ``TrainResult.model``; the live model holds the final weights.
    """
    if not train_pairs:
        raise ValueError("training split is empty")
    if cfg.learning_rate == 0:
        opt = None
    else:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    val0 = mean_mse(model, val_pairs)
    result = TrainResult(copy.deepcopy(model), [(0, mean_mse(model, train_pairs), val0)], 0,
                         val0 if val_pairs else float("inf"))
    if checkpoint is not None:
        save_checkpoint(checkpoint, model)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in rng.permutation(len(train_pairs)):
            pair = train_pairs[idx]
            f_k = model(pair.P)
            loss = torch.mean((f_k - _target_tensor(model, pair.target)) ** 2)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            losses.append(float(loss.detach()))
        val = mean_mse(model, val_pairs)
        result.curve.append((epoch, float(np.mean(losses)), val))
        if val_pairs and val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            result.model = copy.deepcopy(model)
            if checkpoint is not None:
                save_checkpoint(checkpoint, model)
        if progress is not None:
            progress(epoch, result.curve[-1])
    if not val_pairs:
        result.model = copy.deepcopy(model)
        result.best_epoch = cfg.epochs
        if checkpoint is not None:
            save_checkpoint(checkpoint, model)
    return result


def load_pairs(dataset, ids, workers: int | None = None) -> list[TrainingPair]:
    """Projection matrices (built once) and targets for the given dataset items."""
    from .projector import build_projection_matrix

    out = []
    for idx in ids:
        events = dataset.events(idx)
        out.append(TrainingPair(build_projection_matrix(dataset.cfg, dataset.grid, events, workers),
                                dataset.truth(idx)))
    return out
