"""Command-line entry point: ``lmpet {simulate,reconstruct,train,bench,rerun}``.

Every run writes one ``manifest.json`` beside its outputs. The manifest holds
the resolved arguments (``argv``), input/output paths, the seed, the tool
version and wall-clock timings per phase; ``lmpet rerun manifest.json`` replays
it. Timings are the only fields that differ between identical runs.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, fileio
from ._parallel import get_workers, set_workers
from .geometry import ScannerConfig
from .projector import EventList, Grid, build_projection_matrix, estimate_memory

ALGOS = ("osem", "osem-tv", "spdhg-tv", "lmpd")
SCANNER_PRESETS = {"desk": ScannerConfig.desk, "full": ScannerConfig.full}
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Raised for flag combinations argparse cannot express; maps to exit code 2."""


# -- manifest ---------------------------------------------------------------


class Manifest:
    def __init__(self, subcommand: str, argv: list[str], args: argparse.Namespace):
        self.data = {
            "subcommand": subcommand,
            "version": __version__,
            "argv": argv,
            "config": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "threads")},
            "seed": getattr(args, "seed", None),
            "inputs": {},
            "outputs": [],
            "timings": {},
        }

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.data["timings"][name] = round(time.perf_counter() - t0, 6)

    def output(self, path) -> Path:
        self.data["outputs"].append(str(path))
        return Path(path)

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def strip_timings(manifest: dict) -> dict:
    """Manifest content that must match between identical runs."""
    return {k: v for k, v in manifest.items() if k != "timings"}


# -- argument helpers -------------------------------------------------------


def _grid_arg(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"grid dimensions must be positive, got {text!r}")
    return w, h


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {v}")
    return v


def load_scanner(spec: str) -> ScannerConfig:
    """A preset name (``desk``, ``full``) or a ``key = value`` scanner file."""
    if spec in SCANNER_PRESETS:
        return SCANNER_PRESETS[spec]()
    return ScannerConfig.load(spec)


def _threads(args) -> int:
    """``--threads``, else ``$LMPET_THREADS``, else 1; installed as the process-wide cap."""
    n = args.threads
    if n is None:
        env = os.environ.get("LMPET_THREADS", "").strip()
        if env:
            try:
                n = _positive_int(env)
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"LMPET_THREADS: {exc}") from exc
    n = get_workers(n) if n is not None else 1
    set_workers(n)
    return n


# -- simulate ---------------------------------------------------------------


def cmd_simulate(args, manifest: Manifest) -> int:
    from .phantom_sim import make_dataset

    cfg = load_scanner(args.scanner)
    grid = Grid(*args.grid, args.pixel_mm)
    out = Path(args.out)
    manifest.data["inputs"]["scanner"] = args.scanner
    with manifest.phase("simulate"):
        split = make_dataset(out, args.phantoms, grid, cfg, args.counts, args.seed,
                             background_fraction=args.background_fraction,
                             scanner_path=None if args.scanner in SCANNER_PRESETS else args.scanner,
                             workers=_threads(args))
    for idx in split.all:
        manifest.output(out / "pairs" / f"{idx}.img2")
        manifest.output(out / "pairs" / f"{idx}.lmev")
    for name in ("split.txt", "scanner.txt", "meta.txt"):
        manifest.output(out / name)
    manifest.data["split"] = [len(split.train), len(split.val), len(split.test)]
    manifest.write(out)
    print(f"wrote {len(split.all)} pairs to {out} "
          f"(train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)})")
    return 0


# -- reconstruct ------------------------------------------------------------


def _recon_items(args):
    """Yield ``(image_id, cfg, grid, events, truth_or_None)`` for the requested inputs."""
    from .phantom_sim import load_dataset

    if args.dataset is not None:
        ds = load_dataset(args.dataset)
        ids = ds.split.all if args.split == "all" else getattr(ds.split, args.split)
        if args.index is not None:
            if args.index not in ds.split.all:
                raise UsageError(f"pair {args.index} is not in dataset {args.dataset}")
            ids = [args.index]
        for idx in ids:
            yield str(idx), ds.cfg, ds.grid, ds.events(idx), ds.truth(idx)
        return
    cfg = load_scanner(args.scanner)
    truth = fileio.read_image(args.truth) if args.truth else None
    grid = truth.grid if truth is not None else Grid(*args.grid, args.pixel_mm)
    yield Path(args.events).stem, cfg, grid, fileio.read_events(args.events), truth


def _tv_weight(args, sens, recon_cfg, workers):
    """Explicit ``--tv-weight`` or a validation-split grid search."""
    from .phantom_sim import load_dataset
    from .recon_classic import TV_FACTORS, data_term_scale, select_tv_weight

    if args.tv_weight is not None:
        return args.tv_weight, None
    if args.dataset is not None:
        ds = load_dataset(args.dataset)
        if ds.split.val:
            pairs = [(build_projection_matrix(ds.cfg, ds.grid, ds.events(i), workers), ds.truth(i))
                     for i in ds.split.val]
            return select_tv_weight(pairs, sens, recon_cfg, args.algo)
    return TV_FACTORS[1] * data_term_scale(sens), None


def cmd_reconstruct(args, manifest: Manifest) -> int:
    from .metrics import MetricReport
    from .recon_classic import ReconConfig, objective, osem, osem_tv, sensitivity_image, spdhg_tv, write_objective_csv

    if args.algo == "lmpd" and args.model is None:
        raise UsageError("--algo lmpd requires --model")
    if args.dataset is None and args.events is None:
        raise UsageError("give --dataset DIR or --events FILE")
    if args.dataset is not None and args.events is not None:
        raise UsageError("--dataset and --events are mutually exclusive")
    if args.events is not None and args.scanner is None:
        raise UsageError("--events requires --scanner")
    if args.events is not None and args.truth is None and args.grid is None:
        raise UsageError("--events requires --grid (or --truth to take the grid from)")

    workers = _threads(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.data["inputs"].update({k: getattr(args, k) for k in ("dataset", "events", "truth", "model")
                                    if getattr(args, k) is not None})
    report = MetricReport()
    model = None
    if args.algo == "lmpd":
        from .lmpd import load_checkpoint
        with manifest.phase("load_model"):
            model = load_checkpoint(args.model)
    recon_cfg = ReconConfig(n_iter=args.iters, n_subsets=args.subsets, seed=args.seed)
    sens_cache = {}
    for image_id, cfg, grid, events, truth in _recon_items(args):
        events.validate(cfg)
        with manifest.phase(f"{image_id}/projection_matrix"):
            P = build_projection_matrix(cfg, grid, events, workers)
        if args.algo == "lmpd":
            from .lmpd import model_forward
            if model.grid != grid:
                raise UsageError(f"model grid {model.grid} does not match data grid {grid}")
            with manifest.phase(f"{image_id}/reconstruct"):
                image, _ = model_forward(model, P)
        else:
            key = (cfg, grid)
            if key not in sens_cache:
                with manifest.phase("sensitivity"):
                    sens_cache[key] = sensitivity_image(cfg, grid)
            sens = sens_cache[key]
            c = recon_cfg
            if args.algo != "osem":
                if "tv_weight" not in manifest.data:
                    with manifest.phase("tv_weight_search"):
                        weight, scores = _tv_weight(args, sens, recon_cfg, workers)
                    manifest.data["tv_weight"] = weight
                    if scores is not None:
                        manifest.data["tv_weight_scores"] = {repr(k): v for k, v in scores.items()}
                c = ReconConfig(**{**recon_cfg.__dict__, "tv_weight": manifest.data["tv_weight"]})
            trace = []
            callback = None
            if args.objective_csv:
                callback = lambda it, f: trace.append(objective(P, f, sens, c.tv_weight))  # noqa: E731
            recon = {"osem": osem, "osem-tv": osem_tv, "spdhg-tv": spdhg_tv}[args.algo]
            with manifest.phase(f"{image_id}/reconstruct"):
                image = recon(P, sens, c, callback)
            if trace:
                write_objective_csv(manifest.output(out / f"{image_id}_{args.algo}_objective.csv"), trace)
        fileio.write_image(manifest.output(out / f"{image_id}_{args.algo}.img2"), image)
        if truth is not None:
            p, s = report.add(image_id, args.algo, float(events.n), image, truth)
            print(f"{image_id}: {args.algo} psnr={p:.3f} dB ssim={s:.4f}")
    if report.rows:
        report.write_csv(manifest.output(out / f"metrics_{args.algo}.csv"))
    manifest.write(out)
    return 0


# -- train ------------------------------------------------------------------


def cmd_train(args, manifest: Manifest) -> int:
    import torch

    from .lmpd import LmpdNet, TrainConfig, layer_ablation_report, load_pairs, train, write_ablation_csv
    from .phantom_sim import load_dataset

    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    if args.lr < 0:
        raise UsageError("--lr must be nonnegative")
    workers = _threads(args)
    ds = load_dataset(args.dataset)
    if not ds.split.train:
        raise UsageError(f"dataset {args.dataset} has an empty training split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.data["inputs"]["dataset"] = args.dataset
    with manifest.phase("projection_matrices"):
        tr = load_pairs(ds, ds.split.train, workers)
        va = load_pairs(ds, ds.split.val, workers)
    dtype = {"float32": torch.float32, "float64": torch.float64}[args.dtype]
    model = LmpdNet(ds.grid, args.layers, seed=args.seed, dtype=dtype)
    ckpt = manifest.output(out / "model.lmpd")
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed)

    def progress(epoch, row):
        if args.verbose and (epoch % max(1, args.epochs // 20) == 0 or epoch == args.epochs):
            print(f"epoch {epoch}: train {row[1]:.6g} val {row[2]:.6g}", flush=True)

    try:
        with manifest.phase("train"):
            result = train(model, tr, va, cfg, checkpoint=ckpt, progress=progress)
    except FloatingPointError as exc:
        manifest.data["error"] = str(exc)
        manifest.write(out)
        raise
    result.write_curve(manifest.output(out / "loss.csv"))
    manifest.data["best_epoch"] = result.best_epoch
    manifest.data["best_val_mse"] = result.best_val
    if va:
        with manifest.phase("ablation"):
            per_layer = np.mean([layer_ablation_report(result.model, p.P, p.target) for p in va], axis=0)
        write_ablation_csv(manifest.output(out / "ablation.csv"), per_layer)
    manifest.write(out)
    print(f"best validation MSE {result.best_val:.6g} at epoch {result.best_epoch}; checkpoint {ckpt}")
    return 0


# -- bench ------------------------------------------------------------------

FULL_SINOGRAM_DIMS = (357, 224, 17, 128, 128)
FULL_LISTMODE_DIMS = ((100_000, 128, 128), (300_000, 128, 128))


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def random_events(cfg: ScannerConfig, n: int, seed: int) -> EventList:
    """Uniformly drawn crystal pairs (c1 < c2) and TOF bins."""
    rng = np.random.default_rng(seed)
    a = rng.integers(0, cfg.n_crystals, n)
    b = (a + rng.integers(1, cfg.n_crystals, n)) % cfg.n_crystals
    return EventList(np.minimum(a, b), np.maximum(a, b), rng.integers(0, cfg.n_tof_bins, n))


def bench_rows(cfg: ScannerConfig, grid: Grid, event_counts, repeat: int, seed: int, workers: int) -> list[dict]:
    """Timing rows (median seconds) per event count, then dense-equivalent memory rows."""
    rows = []
    for n in event_counts:
        events = random_events(cfg, n, seed)
        P = build_projection_matrix(cfg, grid, events, workers)
        f = np.random.default_rng(seed).random(grid.n_pixels)
        h = np.random.default_rng(seed + 1).random(n)
        for name, fn in (("build", lambda: build_projection_matrix(cfg, grid, events, workers)),
                         ("forward", lambda: P.apply(f)),
                         ("backward", lambda: P.adjoint(h))):
            rows.append({"kind": "time", "operation": name, "dims": f"n={n};{grid.width}x{grid.height}",
                         "value": _median_time(fn, repeat), "unit": "s"})
    for mode, dims in [("sinogram", FULL_SINOGRAM_DIMS)] + [("listmode", d) for d in FULL_LISTMODE_DIMS]:
        b = estimate_memory(mode, dims)
        rows.append({"kind": "memory", "operation": mode, "dims": "x".join(str(d) for d in dims),
                     "value": b / 2**30, "unit": "GiB"})
    return rows


def cmd_bench(args, manifest: Manifest) -> int:
    workers = _threads(args)
    cfg = load_scanner(args.scanner)
    grid = Grid(*args.grid, args.pixel_mm)
    counts = args.events or [1000, 2000]
    with manifest.phase("bench"):
        rows = bench_rows(cfg, grid, counts, args.repeat, args.seed, workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest.output(out), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["kind", "operation", "dims", "value", "unit"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": f"{r['value']:.6g}"})
    for r in rows:
        print(f"{r['kind']:7s} {r['operation']:9s} {r['dims']:22s} {r['value']:.6g} {r['unit']}")
    manifest.write(out.parent)
    return 0


# -- rerun ------------------------------------------------------------------


def cmd_rerun(args, manifest: Manifest) -> int:
    try:
        data = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read manifest {args.manifest}: {exc}") from exc
    argv = data.get("argv")
    if not isinstance(argv, list) or not argv or argv[0] == "rerun":
        raise UsageError(f"{args.manifest} has no replayable argv")
    if args.threads is not None:
        argv = argv + ["--threads", str(args.threads)]
    return main(argv)


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads for projection and simulation (default: $LMPET_THREADS or 1)")
    common.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")

    parser = argparse.ArgumentParser(prog="lmpet", description="List-mode TOF-PET simulation, "
                                     "reconstruction and LMPDNet training at desk scale.")
    parser.add_argument("--version", action="version", version=f"lmpet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", parents=[common], help="simulate a dataset of phantom/list-mode pairs")
    p.add_argument("--scanner", required=True, help="scanner file or preset (desk, full)")
    p.add_argument("--grid", type=_grid_arg, default=(32, 32), help="image grid WxH (default: 32x32)")
    p.add_argument("--pixel-mm", type=_positive_float, default=1.5, help="pixel size in mm (default: 1.5)")
    p.add_argument("--phantoms", type=_positive_int, required=True, help="number of phantoms")
    p.add_argument("--counts", type=_positive_float, default=1e5, help="expected counts per pair (default: 1e5)")
    p.add_argument("--background-fraction", type=_fraction, default=0.15,
                   help="share of counts from uniform background (default: 0.15)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct list-mode data")
    p.add_argument("--algo", choices=ALGOS, required=True, help="reconstruction algorithm")
    p.add_argument("--iters", type=_positive_int, default=30, help="iterations (default: 30)")
    p.add_argument("--subsets", type=_positive_int, default=4, help="subsets (default: 4)")
    p.add_argument("--tv-weight", type=float, default=None,
                   help="TV weight; default is a validation grid search (or 1e-2 x data scale)")
    p.add_argument("--model", default=None, help="LMPDNet checkpoint (required for --algo lmpd)")
    p.add_argument("--dataset", default=None, help="dataset directory written by simulate")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="dataset split to reconstruct (default: test)")
    p.add_argument("--index", type=int, default=None, help="reconstruct a single dataset pair")
    p.add_argument("--events", default=None, help="single list-mode file (.lmev) instead of a dataset")
    p.add_argument("--truth", default=None, help="ground-truth image (.img2) for --events")
    p.add_argument("--scanner", default=None, help="scanner file or preset for --events")
    p.add_argument("--grid", type=_grid_arg, default=None, help="grid WxH for --events")
    p.add_argument("--pixel-mm", type=_positive_float, default=1.5, help="pixel size for --events (default: 1.5)")
    p.add_argument("--objective-csv", action="store_true", help="write per-iteration objective values")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", parents=[common], help="train LMPDNet on a simulated dataset")
    p.add_argument("--dataset", required=True, help="dataset directory written by simulate")
    p.add_argument("--layers", type=int, default=7, help="unrolled layers K (default: 7)")
    p.add_argument("--lr", type=float, default=1e-5, help="Adam learning rate (default: 1e-5)")
    p.add_argument("--epochs", type=int, default=500, help="training epochs (default: 500)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="network precision (default: float32)")
    p.add_argument("--verbose", action="store_true", help="print progress")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", parents=[common], help="projector timings and memory arithmetic")
    p.add_argument("--scanner", default="desk", help="scanner file or preset (default: desk)")
    p.add_argument("--grid", type=_grid_arg, default=(32, 32), help="image grid WxH (default: 32x32)")
    p.add_argument("--pixel-mm", type=_positive_float, default=1.5, help="pixel size in mm (default: 1.5)")
    p.add_argument("--events", type=_positive_int, action="append",
                   help="event count to time; repeatable (default: 1000 and 2000)")
    p.add_argument("--repeat", type=_positive_int, default=5, help="timing repeats, median kept (default: 5)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    p.add_argument("manifest", help="manifest.json written by an earlier run")
    p.add_argument("--threads", type=_positive_int, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = Manifest(args.command, _canonical_argv(argv), args)
    try:
        return args.func(args, manifest)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lmpet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"lmpet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _canonical_argv(argv: list[str]) -> list[str]:
    """The argv to replay, without ``--threads`` (worker count never changes outputs)."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--threads":
            skip = True
            continue
        if tok.startswith("--threads="):
            continue
        out.append(tok)
    return out


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
