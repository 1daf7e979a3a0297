"""Desk-scale comparison of OSEM, OSEM+TV, SPDHG+TV and LMPDNet.

Simulates a small dataset, trains LMPDNet on its training split, reconstructs
the test split with every method and prints PSNR/SSIM as mean +- std. Absolute
values depend on the desk-scale geometry and training budget; the ordering of
methods is the quantity of interest.

    python3 scripts/desk_comparison.py --out runs/comparison
"""

from __future__ import annotations

import argparse
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from lmpet.geometry import ScannerConfig
from lmpet.lmpd import LmpdNet, TrainConfig, load_pairs, model_forward, train
from lmpet.metrics import MetricReport
from lmpet.phantom_sim import load_dataset, make_dataset
from lmpet.projector import Grid
from lmpet.recon_classic import ReconConfig, osem, osem_tv, select_tv_weight, sensitivity_image, spdhg_tv


@dataclass
class ComparisonConfig:
    grid: int = 32
    pixel_mm: float = 1.5
    split: tuple[int, int, int] = (20, 4, 4)
    counts: tuple[float, ...] = (2000.0, 6000.0)
    seed: int = 7
    layers: int = 3
    lr: float = 1e-4
    epochs: int = 200
    iters: int = 30
    subsets: int = 4


def run(cfg: ComparisonConfig, out: Path) -> MetricReport:
    scanner = ScannerConfig.desk()
    grid = Grid(cfg.grid, cfg.grid, cfg.pixel_mm)
    sens = sensitivity_image(scanner, grid)
    recon_cfg = ReconConfig(n_iter=cfg.iters, n_subsets=cfg.subsets)
    report = MetricReport()
    for counts in cfg.counts:
        root = out / f"data_{counts:g}"
        make_dataset(root, sum(cfg.split), grid, scanner, counts, cfg.seed, split=cfg.split)
        ds = load_dataset(root)
        tr, va, te = (load_pairs(ds, ids) for ids in (ds.split.train, ds.split.val, ds.split.test))
        t0 = time.perf_counter()
        model = LmpdNet(grid, cfg.layers, seed=cfg.seed, dtype=torch.float32)
        result = train(model, tr, va, TrainConfig(learning_rate=cfg.lr, epochs=cfg.epochs, seed=cfg.seed))
        print(f"counts {counts:g}: trained K={cfg.layers} in {time.perf_counter() - t0:.0f} s "
              f"(best epoch {result.best_epoch})")
        val_pairs = [(p.P, p.target) for p in va]
        weights = {algo: select_tv_weight(val_pairs, sens, recon_cfg, algo)[0] for algo in ("osem-tv", "spdhg-tv")}
        for idx, pair in zip(ds.split.test, te):
            images = {
                "osem": osem(pair.P, sens, recon_cfg),
                "osem-tv": osem_tv(pair.P, sens, ReconConfig(**{**asdict(recon_cfg), "tv_weight": weights["osem-tv"]})),
                "spdhg-tv": spdhg_tv(pair.P, sens, ReconConfig(**{**asdict(recon_cfg), "tv_weight": weights["spdhg-tv"]})),
                "lmpd": model_forward(result.model, pair.P)[0],
            }
            for algo, image in images.items():
                report.add(idx, algo, counts, image, pair.target)
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/comparison"))
    parser.add_argument("--epochs", type=int, default=ComparisonConfig.epochs)
    parser.add_argument("--counts", type=float, nargs="+", default=list(ComparisonConfig.counts))
    args = parser.parse_args(argv)
    cfg = ComparisonConfig(epochs=args.epochs, counts=tuple(args.counts))
    args.out.mkdir(parents=True, exist_ok=True)
    report = run(cfg, args.out)
    report.write_csv(args.out / "comparison.csv")
    print(f"\n{'counts':>8s} {'method':>9s} {'PSNR (dB)':>16s} {'SSIM':>16s}")
    for (algo, counts), agg in sorted(report.aggregate().items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"{counts:8g} {algo:>9s} {agg['psnr_mean']:8.2f} +- {agg['psnr_std']:4.2f} "
              f"{agg['ssim_mean']:8.3f} +- {agg['ssim_std']:5.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
