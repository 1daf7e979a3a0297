import filecmp

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmpet.geometry import ScannerConfig
from lmpet.phantom_sim import (
    DatasetSplit,
    Ellipse,
    HotDisk,
    PhantomSpec,
    Sinogram,
    generate_phantom,
    load_dataset,
    make_dataset,
    random_phantom_spec,
    scale_and_noise,
    simulate_pair,
    simulate_sinogram,
    sinogram_to_listmode,
    split_sizes,
)
from lmpet.projector import Grid, Image2D

GRID = Grid(32, 32, 1.5)


def disk_phantom(grid, radius):
    spec = PhantomSpec((Ellipse((0.0, 0.0), (radius, radius), 1.0),))
    return generate_phantom(spec, grid)


def test_empty_spec_is_zero():
    assert not np.any(generate_phantom(PhantomSpec(), GRID).values)


def test_covering_ellipse_is_constant():
    img = generate_phantom(PhantomSpec((Ellipse((0, 0), (1e3, 1e3), 2.5),)), GRID)
    assert np.all(img.values == 2.5)


def test_hot_disk_multiplies():
    spec = PhantomSpec((Ellipse((0, 0), (20, 20), 1.0),), (HotDisk((0.75, 0.75), 3.0, 4.0),))
    img = generate_phantom(spec, GRID)
    assert img.values.max() == 4.0
    assert set(np.unique(img.values)) <= {0.0, 1.0, 4.0}


@pytest.mark.parametrize("disk", [
    HotDisk((0, 0), 1.0, 2.0),
    HotDisk((0, 0), 5.0, 2.0),
    HotDisk((100, 0), 3.0, 2.0),
    HotDisk((0, 0), 3.0, -1.0),
])
def test_invalid_disks(disk):
    with pytest.raises(ValueError):
        PhantomSpec((Ellipse((0, 0), (20, 20), 1.0),), (disk,))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_random_phantoms_valid(seed):
    spec = random_phantom_spec(GRID, np.random.default_rng(seed), (1, 3))
    assert 1 <= len(spec.disks) <= 3
    assert all(2.0 <= d.radius <= 4.0 for d in spec.disks)
    img = generate_phantom(spec, GRID)
    assert np.all(img.values >= 0) and np.all(np.isfinite(img.values))
    again = generate_phantom(random_phantom_spec(GRID, np.random.default_rng(seed), (1, 3)), GRID)
    np.testing.assert_array_equal(img.values, again.values)


def test_sinogram_zero_and_linear(desk):
    grid = Grid(16, 16, 3.0)
    f = disk_phantom(grid, 15.0)
    s = simulate_sinogram(desk, f)
    assert s.values.shape == (64 * 63 // 2, 9)
    assert np.all(s.values >= 0)
    assert not np.any(simulate_sinogram(desk, Image2D.zeros(grid)).values)
    s2 = simulate_sinogram(desk, Image2D(2 * f.values, f.pixel_size))
    np.testing.assert_allclose(s2.values, 2 * s.values, rtol=1e-15, atol=0)
    with pytest.raises(ValueError):
        simulate_sinogram(desk, Image2D(-f.values, f.pixel_size))


def test_sinogram_binning_injective(desk):
    s = simulate_sinogram(desk, disk_phantom(Grid(8, 8, 4.0), 10.0))
    triples = set(zip(*(a.tolist() for a in s.bins())))
    assert len(triples) == s.values.size


def test_sinogram_rotational_symmetry(desk):
    """A centered disk gives a sinogram invariant under a quarter-turn of the ring.

    A quarter-turn is the smallest rotation that maps both the crystal ring and
    the square pixel grid onto themselves.
    """
    s = simulate_sinogram(desk, disk_phantom(GRID, 18.0))
    nc, nt = desk.n_crystals, desk.n_tof_bins
    shift = nc // 4
    index = {(a, b): i for i, (a, b) in enumerate(zip(s.c1.tolist(), s.c2.tolist()))}
    rotated = np.empty_like(s.values)
    for i, (a, b) in enumerate(zip(s.c1.tolist(), s.c2.tolist())):
        ra, rb = (a + shift) % nc, (b + shift) % nc
        if ra < rb:
            rotated[index[(ra, rb)]] = s.values[i]
        else:  # endpoint order flips, so does the TOF axis
            rotated[index[(rb, ra)]] = s.values[i, ::-1]
    scale = s.values.max()
    assert np.max(np.abs(rotated - s.values)) <= 1e-6 * scale


def test_scale_and_noise_total(desk):
    s = simulate_sinogram(desk, disk_phantom(GRID, 18.0))
    noisy = scale_and_noise(s, 3e5, 0.0, seed=1)
    assert abs(noisy.total() / 3e5 - 1) <= 0.02
    assert noisy.values.dtype.kind == "i"
    again = scale_and_noise(s, 3e5, 0.0, seed=1)
    np.testing.assert_array_equal(noisy.values, again.values)
    assert not np.any(scale_and_noise(s, 0, 0.15, seed=1).values)


def test_background_only_on_covered_bins(desk):
    s = simulate_sinogram(desk, disk_phantom(GRID, 3.0))
    noisy = scale_and_noise(s, 1e5, 0.5, seed=2)
    assert not np.any(noisy.values[~s.coverage])
    assert np.any(noisy.values[(s.values == 0) & s.coverage])


def test_scale_and_noise_errors(desk):
    s = simulate_sinogram(desk, disk_phantom(GRID, 18.0))
    zero = Sinogram(np.zeros_like(s.values), s.c1, s.c2, s.coverage)
    with pytest.raises(ValueError):
        scale_and_noise(zero, 100, 0.1)
    with pytest.raises(ValueError):
        scale_and_noise(s, 100, 1.0)


def test_listmode_conversion():
    c1, c2 = np.array([0, 0]), np.array([1, 2])
    values = np.zeros((2, 3), dtype=np.int64)
    s = Sinogram(values, c1, c2, np.ones((2, 3), bool))
    assert sinogram_to_listmode(s).n == 0
    values[1, 2] = 3
    ev = sinogram_to_listmode(s)
    assert ev.n == 3
    assert set(zip(ev.c1.tolist(), ev.c2.tolist(), ev.tof.tolist())) == {(0, 2, 2)}
    s.values = values + 0.5
    with pytest.raises(ValueError, match="integer"):
        sinogram_to_listmode(s)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=6, max_size=6))
def test_listmode_sum_preserved(counts):
    s = Sinogram(np.array(counts).reshape(2, 3), np.array([0, 1]), np.array([2, 3]), np.ones((2, 3), bool))
    assert sinogram_to_listmode(s).n == sum(counts)


def test_count_conservation_over_seeds(desk):
    grid = Grid(16, 16, 3.0)
    counts = 2000.0
    totals = []
    for seed in range(20):
        truth, events, noisy = simulate_pair(desk, grid, counts, 0.15, seed=seed, index=0)
        assert events.n == noisy.total()
        events.validate(desk)
        assert np.all(truth.values >= 0)
        totals.append(events.n)
    # the mean of 20 Poisson totals lies within 3 standard errors of the target
    assert abs(np.mean(totals) - counts) <= 3 * np.sqrt(counts / 20)


@pytest.mark.parametrize("n, expected", [(480, (400, 40, 40)), (12, (10, 1, 1)), (3, (1, 1, 1))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


def test_split_sizes_rejects_small():
    with pytest.raises(ValueError):
        split_sizes(2)


def test_split_overlap_rejected():
    with pytest.raises(ValueError):
        DatasetSplit([0, 1], [1], [2])


def test_make_dataset_deterministic(tmp_path, desk):
    grid = Grid(16, 16, 3.0)
    a = make_dataset(tmp_path / "a", 4, grid, desk, 500, seed=3, workers=1)
    b = make_dataset(tmp_path / "b", 4, grid, desk, 500, seed=3, workers=4)
    assert a == b
    assert sorted(a.train + a.val + a.test) == [0, 1, 2, 3]
    names = ["split.txt", "meta.txt", "scanner.txt"] + [f"pairs/{i}.{e}" for i in range(4) for e in ("img2", "lmev")]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors
    ds = load_dataset(tmp_path / "a")
    assert ds.grid == grid and ds.cfg == desk and ds.counts == 500
    assert ds.truth(0).values.shape == (16, 16)
    ds.events(0).validate(desk)


def test_make_dataset_io_error(tmp_path, desk):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        make_dataset(blocker / "sub", 3, Grid(8, 8, 4.0), desk, 100, seed=0)
