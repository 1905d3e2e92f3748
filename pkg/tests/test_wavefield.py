import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavedict.wavefield import (CubeFormatError, CubeTruncatedError, GridSpec, InvariantError,
                                MaskedCube, WavefieldCube, bandpass_time, exclude_boundary_layer,
                                export_csv, load_cube, load_masked, normalize, save_cube,
                                save_masked, truncate_early)


def make_cube(nx=5, ny=4, t=7, seed=0, dt=1e-3):
    rng = np.random.default_rng(seed)
    grid = GridSpec(nx, ny, 0.1, 0.2, origin_x=-0.3, origin_y=1.5)
    return WavefieldCube(grid, dt, rng.standard_normal((nx * ny, t)))


# -- grid ---------------------------------------------------------------------------

def test_grid_invariants():
    with pytest.raises(InvariantError):
        GridSpec(1, 5, 0.1, 0.1)
    with pytest.raises(InvariantError):
        GridSpec(3, 5, 0.0, 0.1)
    g = GridSpec.spanning(1.0, 0.5, 100, 50)
    assert g.n_points == 5000
    assert g.dx == pytest.approx(1 / 99)
    assert g.extent_x == pytest.approx(1.0)


def test_flat_index_is_row_major_with_y_slow():
    g = GridSpec(4, 3, 1.0, 1.0)
    x, y = g.coords()
    assert g.flat_index(2, 1) == 6
    assert (x[6], y[6]) == (2.0, 1.0)
    assert g.nearest_index(2.2, 0.9) == 6


# -- file format -------------------------------------------------------------------

def test_round_trip_is_bit_exact(tmp_path):
    c = make_cube()
    save_cube(c, tmp_path / "c.wfc")
    back = load_cube(tmp_path / "c.wfc")
    assert back == c
    assert back.data.tobytes() == c.data.tobytes()


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(2, 6), ny=st.integers(2, 6), t=st.integers(1, 5),
       seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(tmp_path_factory, nx, ny, t, seed):
    c = make_cube(nx, ny, t, seed)
    p = tmp_path_factory.mktemp("rt") / "c.wfc"
    save_cube(c, p)
    assert load_cube(p) == c


def test_tiny_payload_layout(tmp_path):
    g = GridSpec(2, 2, 1.0, 1.0)
    save_cube(WavefieldCube(g, 0.5, np.array([[1.0], [2.0], [3.0], [4.0]])), tmp_path / "t.wfc")
    raw = (tmp_path / "t.wfc").read_bytes()
    header = struct.calcsize("<4s3I5d")
    assert raw[:4] == b"WFC1"
    assert len(raw) == header + 32
    assert np.frombuffer(raw[header:], "<f8").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_point_major_payload(tmp_path):
    g = GridSpec(2, 2, 1.0, 1.0)
    data = np.arange(8, dtype=float).reshape(4, 2)
    save_cube(WavefieldCube(g, 1.0, data), tmp_path / "p.wfc")
    payload = np.frombuffer((tmp_path / "p.wfc").read_bytes()[struct.calcsize("<4s3I5d"):], "<f8")
    # all samples of point 0 first, then point 1, ...
    assert payload.tolist() == [0, 1, 2, 3, 4, 5, 6, 7]


def test_header_nx_zero_is_format_error(tmp_path):
    p = tmp_path / "bad.wfc"
    p.write_bytes(struct.pack("<4s3I5d", b"WFC1", 0, 2, 1, 1.0, 1.0, 0.0, 0.0, 1.0))
    with pytest.raises(CubeFormatError, match="nx"):
        load_cube(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.wfc"
    p.write_bytes(struct.pack("<4s3I5d", b"NOPE", 2, 2, 1, 1.0, 1.0, 0.0, 0.0, 1.0) + bytes(32))
    with pytest.raises(CubeFormatError, match="magic"):
        load_cube(p)


def test_short_payload_is_truncation_error(tmp_path):
    c = make_cube()
    save_cube(c, tmp_path / "c.wfc")
    raw = (tmp_path / "c.wfc").read_bytes()
    (tmp_path / "short.wfc").write_bytes(raw[:-8])
    with pytest.raises(CubeTruncatedError):
        load_cube(tmp_path / "short.wfc")


def test_nan_cube_rejected():
    g = GridSpec(2, 2, 1.0, 1.0)
    with pytest.raises(InvariantError):
        WavefieldCube(g, 1.0, np.array([[1.0], [np.nan], [0.0], [0.0]]))


def test_masked_save_load_and_csv(tmp_path):
    c = make_cube(t=8)
    m = exclude_boundary_layer(truncate_early(c, 0.25), "left", 0.05)
    save_masked(m, tmp_path / "m.wfc")
    back = load_masked(tmp_path / "m.wfc")
    assert np.array_equal(back.active, m.active)
    assert np.array_equal(back.x_block(), m.x_block())
    export_csv(c, tmp_path / "c.csv")
    table = np.loadtxt(tmp_path / "c.csv", delimiter=",", skiprows=1)
    assert table.shape == (20, 2 + 8)
    assert np.array_equal(table[:, 2:], c.data)


# -- preprocessing -----------------------------------------------------------------

@pytest.mark.parametrize("t,frac,start", [(100, 0.25, 25), (100, 0.0, 0), (7, 0.25, 1)])
def test_truncate_early(t, frac, start):
    g = GridSpec(2, 2, 1.0, 1.0)
    m = truncate_early(WavefieldCube(g, 1.0, np.ones((4, t))), frac)
    assert m.t_start == start
    assert m.n_retained == t - start
    assert m.active.all()


def test_truncate_rejects_fraction_one():
    with pytest.raises(ValueError):
        truncate_early(make_cube(), 1.0)


def test_exclusion_first_column_on_reference_grid():
    g = GridSpec.spanning(1.0, 0.5, 100, 50)
    c = WavefieldCube(g, 1.0, np.zeros((g.n_points, 1)))
    m = exclude_boundary_layer(MaskedCube.unmasked(c), "left", 0.01)
    cols = m.active.reshape(50, 100)
    assert not cols[:, 0].any()
    assert cols[:, 1:].all()


def test_exclusion_identity_idempotence_and_errors():
    c = make_cube()
    m = MaskedCube.unmasked(c)
    assert exclude_boundary_layer(m, "top", 0.0) == m
    once = exclude_boundary_layer(m, "right", 0.15)
    assert exclude_boundary_layer(once, "right", 0.15) == once
    with pytest.raises(ValueError):
        exclude_boundary_layer(m, "left", c.grid.extent_x)
    with pytest.raises(ValueError):
        exclude_boundary_layer(m, "north", 0.1)


@pytest.mark.parametrize("side", ["left", "right", "bottom", "top"])
def test_exclusion_distance_rule(side):
    c = make_cube(nx=6, ny=5)
    g = c.grid
    m = exclude_boundary_layer(c, side, 0.25)
    x, y = g.coords()
    dist = {"left": x - g.origin_x, "right": g.origin_x + g.extent_x - x,
            "bottom": y - g.origin_y, "top": g.origin_y + g.extent_y - y}[side]
    assert np.array_equal(m.active, ~(dist < 0.25))


@settings(max_examples=40, deadline=None)
@given(frac=st.floats(0, 0.9), sides=st.lists(st.sampled_from(["left", "right", "bottom", "top"]),
                                              max_size=4),
       th=st.floats(0, 0.15))  # two layers always leave a strip of the 0.5 m grid
def test_truncation_and_exclusion_commute(frac, sides, th):
    c = make_cube(nx=6, ny=5, t=10)
    a = truncate_early(c, frac)
    b = MaskedCube.unmasked(c)
    counts = [a.n_active]
    for s in sides:
        a = exclude_boundary_layer(a, s, th)
        b = exclude_boundary_layer(b, s, th)
        counts.append(a.n_active)
    b = truncate_early(b, frac)
    assert a == b
    assert counts == sorted(counts, reverse=True)


def _tone(f, dt=1e-4, t=2000):
    g = GridSpec(2, 2, 1.0, 1.0)
    s = np.sin(2 * np.pi * f * dt * np.arange(t))
    return WavefieldCube(g, dt, np.tile(s, (4, 1)))


def test_bandpass_keeps_center_tone():
    out = bandpass_time(_tone(500.0), 500.0, 250.0, taps=101)
    steady = out.data[0, 200:-200]
    assert np.max(np.abs(steady)) == pytest.approx(1.0, rel=0.05)


def test_bandpass_rejects_far_tone():
    out = bandpass_time(_tone(2000.0), 500.0, 250.0, taps=101)
    steady = out.data[0, 200:-200]
    assert 20 * np.log10(np.max(np.abs(steady))) <= -20.0


def test_bandpass_zero_and_linearity():
    g = GridSpec(3, 2, 1.0, 1.0)
    z = WavefieldCube(g, 1e-4, np.zeros((6, 300)))
    assert not bandpass_time(z, 500.0, 250.0, 51).data.any()
    rng = np.random.default_rng(3)
    u, v = rng.standard_normal((2, 6, 300))
    fu = bandpass_time(WavefieldCube(g, 1e-4, u), 500.0, 250.0, 51).data
    fv = bandpass_time(WavefieldCube(g, 1e-4, v), 500.0, 250.0, 51).data
    fw = bandpass_time(WavefieldCube(g, 1e-4, 2.5 * u - 0.7 * v), 500.0, 250.0, 51).data
    assert np.linalg.norm(fw - (2.5 * fu - 0.7 * fv)) <= 1e-12 * np.linalg.norm(fw)


def test_bandpass_argument_errors():
    with pytest.raises(ValueError):
        bandpass_time(_tone(500.0), 4900.0, 400.0)  # crosses Nyquist (5 kHz)
    with pytest.raises(ValueError):
        bandpass_time(_tone(500.0), 500.0, 250.0, taps=100)


def test_bandpass_is_zero_phase():
    out = bandpass_time(_tone(500.0), 500.0, 250.0, taps=101)
    ref = _tone(500.0).data[0]
    lag = np.argmax(np.correlate(out.data[0, 300:-300], ref[300:-300], "full")) - (len(ref) - 601)
    assert lag == 0


def test_normalize_unit_mean_column_norm():
    c = make_cube(t=9)
    m = exclude_boundary_layer(truncate_early(c, 0.25), "left", 0.05)
    out, scale = normalize(m)
    assert np.mean(np.linalg.norm(out.x_block(), axis=0)) == pytest.approx(1.0)
    assert np.allclose(m.x_block() * scale, out.x_block())
