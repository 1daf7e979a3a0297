import csv
import json
import time

import numpy as np
import pytest

from lmpet import cli, fileio
from lmpet.cli import bench_rows, main, strip_timings
from lmpet.geometry import ScannerConfig
from lmpet.projector import Grid, build_projection_matrix

SIM = ["--scanner", "desk", "--grid", "16x16", "--pixel-mm", "3", "--counts", "1000"]


def read_manifest(directory):
    return json.loads((directory / "manifest.json").read_text())


def snapshot(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["simulate", *SIM, "--phantoms", "5", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_simulate_split_and_manifest(tmp_path):
    out = tmp_path / "ds12"
    assert main(["simulate", *SIM, "--phantoms", "12", "--out", str(out)]) == 0
    m = read_manifest(out)
    assert m["split"] == [10, 1, 1]
    assert m["subcommand"] == "simulate"
    assert m["config"]["phantoms"] == 12 and m["seed"] == 0
    assert len(list((out / "pairs").glob("*.lmev"))) == 12
    assert len(list(out.rglob("manifest.json"))) == 1


@pytest.mark.parametrize("argv", [
    ["simulate", "--phantoms", "3", "--out", "x"],
    ["simulate", "--scanner", "desk", "--phantoms", "0", "--out", "x"],
    ["simulate", "--scanner", "desk", "--phantoms", "3", "--grid", "16", "--out", "x"],
    ["simulate", "--scanner", "desk", "--phantoms", "3", "--background-fraction", "1.5", "--out", "x"],
    ["reconstruct", "--algo", "fbp", "--dataset", "d", "--out", "x"],
    ["train", "--dataset", "d", "--epochs", "0", "--out", "x"],
    ["bench", "--repeat", "0", "--out", "x.csv"],
    ["nonsense"],
    [],
])
def test_usage_errors_exit_2(tmp_path, argv):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert main(argv) == 2


def test_lmpd_without_model_exit_2(dataset, tmp_path):
    assert main(["reconstruct", "--algo", "lmpd", "--dataset", str(dataset), "--out", str(tmp_path)]) == 2


def test_runtime_errors_exit_1(tmp_path):
    assert main(["simulate", "--scanner", str(tmp_path / "missing.txt"), "--phantoms", "3",
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["reconstruct", "--algo", "osem", "--dataset", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.lmev"
    bad.write_bytes(b"garbage")
    assert main(["reconstruct", "--algo", "osem", "--events", str(bad), "--scanner", "desk",
                 "--grid", "16x16", "--out", str(tmp_path / "o")]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", *SIM, "--phantoms", "3", "--out", str(blocker / "ds")]) == 1


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert main(["reconstruct", "--help"]) == 0
    assert "--objective-csv" in capsys.readouterr().out


def test_reconstruct_osem_and_rerun(dataset, tmp_path):
    out = tmp_path / "rec"
    argv = ["reconstruct", "--algo", "osem", "--iters", "3", "--dataset", str(dataset),
            "--split", "all", "--objective-csv", "--out", str(out)]
    assert main(argv + ["--threads", "4"]) == 0
    m = read_manifest(out)
    assert m["config"]["iters"] == 3 and m["config"]["subsets"] == 4
    assert "--threads" not in m["argv"]
    files = snapshot(out)
    assert len([p for p in files if p.suffix == ".img2"]) == 5
    rows = list(csv.reader((out / "metrics_osem.csv").open()))
    assert rows[0] == ["image_id", "algo", "counts", "psnr", "ssim"]
    obj = (out / "0_osem_objective.csv").read_text().splitlines()
    assert obj[0] == "iter,objective" and len(obj) == 4
    assert main(["rerun", str(out / "manifest.json")]) == 0
    assert snapshot(out) == files
    assert strip_timings(read_manifest(out)) == strip_timings(m)


def test_reconstruct_defaults_mirror_baseline(dataset, tmp_path):
    out = tmp_path / "rec"
    assert main(["reconstruct", "--algo", "osem", "--dataset", str(dataset), "--index", "0",
                 "--out", str(out)]) == 0
    cfg = read_manifest(out)["config"]
    assert (cfg["iters"], cfg["subsets"]) == (30, 4)


def test_reconstruct_tv_weight_search(dataset, tmp_path):
    out = tmp_path / "tv"
    assert main(["reconstruct", "--algo", "osem-tv", "--iters", "2", "--dataset", str(dataset),
                 "--out", str(out)]) == 0
    m = read_manifest(out)
    assert m["tv_weight"] > 0 and len(m["tv_weight_scores"]) == 4


def test_reconstruct_single_events_file(dataset, tmp_path):
    out = tmp_path / "single"
    assert main(["reconstruct", "--algo", "spdhg-tv", "--iters", "2", "--tv-weight", "0.1",
                 "--events", str(dataset / "pairs" / "0.lmev"), "--truth", str(dataset / "pairs" / "0.img2"),
                 "--scanner", str(dataset / "scanner.txt"), "--pixel-mm", "3", "--out", str(out)]) == 0
    img = next(out.glob("*_spdhg-tv.img2"))
    assert np.all(fileio.read_image(img).values >= 0)


def test_train_then_lmpd_reconstruct(dataset, tmp_path):
    out = tmp_path / "train"
    argv = ["train", "--dataset", str(dataset), "--layers", "2", "--epochs", "2", "--lr", "1e-4",
            "--seed", "3", "--out", str(out)]
    assert main(argv) == 0
    m = read_manifest(out)
    assert m["config"]["layers"] == 2
    for name in ("model.lmpd", "loss.csv", "ablation.csv"):
        assert (out / name).exists()
    assert len((out / "loss.csv").read_text().splitlines()) == 1 + 3
    files = snapshot(out)
    assert main(["rerun", str(out / "manifest.json")]) == 0
    assert snapshot(out) == files
    rec = tmp_path / "lmpd"
    assert main(["reconstruct", "--algo", "lmpd", "--model", str(out / "model.lmpd"),
                 "--dataset", str(dataset), "--out", str(rec)]) == 0
    assert (rec / "metrics_lmpd.csv").exists()


def test_train_defaults_in_manifest(tmp_path):
    from lmpet.cli import build_parser

    args = build_parser().parse_args(["train", "--dataset", "d", "--out", str(tmp_path)])
    assert (args.layers, args.lr, args.epochs) == (7, 1e-5, 500)


def test_bench_repeat_one_emits_all_rows(tmp_path):
    path = tmp_path / "bench.csv"
    assert main(["bench", "--grid", "16x16", "--pixel-mm", "3", "--events", "200", "--events", "400",
                 "--repeat", "1", "--out", str(path)]) == 0
    rows = list(csv.DictReader(path.open()))
    assert [r["operation"] for r in rows if r["kind"] == "time"] == ["build", "forward", "backward"] * 2
    mem = {r["dims"]: float(r["value"]) for r in rows if r["kind"] == "memory"}
    assert mem["357x224x17x128x128"] == pytest.approx(83.0, abs=0.5)
    assert mem["100000x128x128"] == pytest.approx(6.1, abs=0.05)
    assert (tmp_path / "manifest.json").exists()


def _forward_seconds(cfg, grid, n, batch=20, repeat=9):
    """Best-of-repeat wall time for a batch of forward projections of n events."""
    P = build_projection_matrix(cfg, grid, cli.random_events(cfg, n, 0), 1)
    f = np.random.default_rng(0).random(grid.n_pixels)
    best = np.inf
    for _ in range(repeat):
        start = time.perf_counter()
        for _ in range(batch):
            P.apply(f)
        best = min(best, time.perf_counter() - start)
    return best


def test_forward_time_scales_linearly():
    cfg, grid = ScannerConfig.desk(), Grid(32, 32, 1.5)
    ratio = _forward_seconds(cfg, grid, 50_000) / _forward_seconds(cfg, grid, 25_000)
    assert 1.6 <= ratio <= 2.6


def test_threads_env_fallback(dataset, tmp_path, monkeypatch):
    argv = ["reconstruct", "--algo", "osem", "--iters", "1", "--dataset", str(dataset), "--index", "0"]
    monkeypatch.setenv("LMPET_THREADS", "3")
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    from lmpet import _parallel
    assert _parallel.get_workers() == 3
    monkeypatch.setenv("LMPET_THREADS", "many")
    assert main(argv + ["--out", str(tmp_path / "b")]) == 2
    monkeypatch.delenv("LMPET_THREADS")
    assert main(argv + ["--out", str(tmp_path / "c")]) == 0
    assert _parallel.get_workers() == 1
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "c")
