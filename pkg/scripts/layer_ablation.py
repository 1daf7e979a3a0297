"""Per-layer PSNR of a K=10 LMPDNet trained at desk scale.

Trains on a simulated dataset and writes ``ablation.csv`` with the mean test
PSNR of every intermediate output f_1..f_K, plus the training curve.

    python3 scripts/layer_ablation.py --out runs/ablation --lr 1e-5 --epochs 500
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from lmpet.geometry import ScannerConfig
from lmpet.lmpd import LmpdNet, TrainConfig, layer_ablation_report, load_pairs, train, write_ablation_csv
from lmpet.phantom_sim import load_dataset, make_dataset
from lmpet.projector import Grid


@dataclass
class AblationConfig:
    layers: int = 10
    grid: int = 32
    pixel_mm: float = 1.5
    split: tuple[int, int, int] = (20, 4, 4)
    counts: float = 2000.0
    seed: int = 7
    lr: float = 1e-4
    epochs: int = 200


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/ablation"))
    parser.add_argument("--layers", type=int, default=AblationConfig.layers)
    parser.add_argument("--lr", type=float, default=AblationConfig.lr)
    parser.add_argument("--epochs", type=int, default=AblationConfig.epochs)
    parser.add_argument("--every", type=int, default=50, help="print per-layer PSNR every N epochs")
    args = parser.parse_args(argv)
    cfg = AblationConfig(layers=args.layers, lr=args.lr, epochs=args.epochs)

    args.out.mkdir(parents=True, exist_ok=True)
    grid = Grid(cfg.grid, cfg.grid, cfg.pixel_mm)
    make_dataset(args.out / "data", sum(cfg.split), grid, ScannerConfig.desk(), cfg.counts, cfg.seed, split=cfg.split)
    ds = load_dataset(args.out / "data")
    tr, va, te = (load_pairs(ds, ids) for ids in (ds.split.train, ds.split.val, ds.split.test))
    model = LmpdNet(grid, cfg.layers, seed=0, dtype=torch.float32)

    def per_layer(m):
        return np.mean([layer_ablation_report(m, p.P, p.target) for p in te], axis=0)

    def progress(epoch, row):
        if epoch % args.every == 0:
            print(f"epoch {epoch:4d}  train {row[1]:.3e}  val {row[2]:.3e}  "
                  + " ".join(f"{v:.2f}" for v in per_layer(model)), flush=True)

    result = train(model, tr, va, TrainConfig(learning_rate=cfg.lr, epochs=cfg.epochs, seed=0), progress=progress)
    result.write_curve(args.out / "loss.csv")
    psnrs = per_layer(result.model)
    write_ablation_csv(args.out / "ablation.csv", psnrs)
    gap = psnrs.max() - psnrs[-3:].min()
    print(f"best epoch {result.best_epoch}; per-layer PSNR " + " ".join(f"{v:.2f}" for v in psnrs))
    print(f"last three layers within {gap:.2f} dB of the maximum")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
