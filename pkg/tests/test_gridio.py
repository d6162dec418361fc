import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvfm.gridio import (
    GridDimensionError, GridFormatError, GridMeta, GridTruncatedError, SplitSpec, STGrid,
    derive_flow, fit_normalizer, load_grid, make_windows, save_grid, split_by_time, synthesize,
)


def random_grid(seed, C=1, H=3, W=3, T=5):
    return STGrid(np.random.default_rng(seed).normal(size=(T, C, H, W)))


def ramp_grid(T, C=1, H=2, W=2):
    return STGrid(np.broadcast_to(np.arange(T, dtype=np.float32)[:, None, None, None], (T, C, H, W)))


def flow_oracle(values):
    T, C, H, W = values.shape
    out = np.zeros_like(values)
    for t in range(1, T):
        for c in range(C):
            for h in range(H):
                for w in range(W):
                    out[t, c, h, w] = values[t, c, h, w] - values[t - 1, c, h, w]
    return out


# --- STGrid -----------------------------------------------------------------

def test_grid_rejects_nonfinite_and_is_immutable():
    with pytest.raises(ValueError):
        STGrid(np.full((2, 1, 2, 2), np.nan))
    g = random_grid(0)
    with pytest.raises(ValueError):
        g.values[0, 0, 0, 0] = 1.0
    assert g.shape == (1, 3, 3, 5)


# --- derive_flow ------------------------------------------------------------

def test_flow_of_constant_is_zero():
    g = STGrid(np.full((4, 1, 3, 3), 5.0))
    assert not derive_flow(g).values.any()


def test_flow_of_ramp():
    f = derive_flow(ramp_grid(3)).values
    np.testing.assert_array_equal(f[:, 0, 0, 0], [0.0, 1.0, 1.0])


def test_flow_rejects_single_step():
    with pytest.raises(ValueError):
        derive_flow(STGrid(np.zeros((1, 1, 2, 2))))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), C=st.integers(1, 3), H=st.integers(1, 5),
       W=st.integers(1, 5), T=st.integers(2, 8))
def test_flow_matches_loop_oracle(seed, C, H, W, T):
    g = random_grid(seed, C, H, W, T)
    f = derive_flow(g)
    assert f.values.shape == g.values.shape
    np.testing.assert_array_equal(f.values, flow_oracle(g.values))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), T=st.integers(2, 30))
def test_flow_cumsum_reconstructs(seed, T):
    g = random_grid(seed, 2, 3, 4, T)
    f = derive_flow(g).values.astype(np.float64)
    rec = g.values[0].astype(np.float64) + np.cumsum(f, axis=0)
    scale = np.abs(g.values).max()
    assert np.abs(rec - g.values).max() <= 1e-5 * scale


# --- windows ----------------------------------------------------------------

@pytest.mark.parametrize("T,count", [(12, 1), (14, 3), (20, 9)])
def test_window_count(T, count):
    ws = make_windows(ramp_grid(T), 6, 6, 1)
    assert len(ws) == count
    assert [w.start for w in ws] == list(range(count))


def test_window_count_with_stride():
    assert len(make_windows(ramp_grid(20), 3, 2, 4)) == (20 - 5) // 4 + 1


def test_ramp_flow_targets_are_ones():
    for w in make_windows(ramp_grid(8), 2, 2):
        np.testing.assert_array_equal(w.flow_target.values, 1.0)
        np.testing.assert_array_equal(w.target.values[0], w.history.values[-1] + 1)


def test_window_flow_boundary():
    g = random_grid(3, T=9)
    ws = make_windows(g, 3, 2)
    x = g.values
    assert not ws[0].flow_history.values[0].any()
    np.testing.assert_array_equal(ws[2].flow_history.values[0], x[2] - x[1])
    np.testing.assert_array_equal(ws[2].flow_target.values[0], x[5] - x[4])
    for w in ws:
        assert w.flow_history.values.shape == w.history.values.shape
        assert w.flow_target.values.shape == w.target.values.shape


def test_windows_reject_too_long_horizon():
    with pytest.raises(ValueError):
        make_windows(ramp_grid(5), 3, 3)


@settings(max_examples=50, deadline=None)
@given(T=st.integers(2, 40), P=st.integers(1, 8), Q=st.integers(1, 8))
def test_every_target_frame_is_covered(T, P, Q):
    if P + Q > T:
        return
    ws = make_windows(ramp_grid(T, H=1, W=1), P, Q)
    covered = {int(v) for w in ws for v in w.target.values[:, 0, 0, 0]}
    assert covered == set(range(P, T))


# --- splits -----------------------------------------------------------------

@pytest.mark.parametrize("T,fracs,lengths", [
    (100, (0.7, 0.15, 0.15), (70, 15, 15)),
    (101, (0.7, 0.15, 0.15), (70, 15, 16)),
    (20, (0.5, 0.25, 0.25), (10, 5, 5)),
])
def test_split_lengths(T, fracs, lengths):
    parts = split_by_time(ramp_grid(T), SplitSpec(*fracs))
    assert tuple(p.steps for p in parts) == lengths
    np.testing.assert_array_equal(np.concatenate([p.values for p in parts]), ramp_grid(T).values)


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        SplitSpec(0.7, 0.2, 0.2)
    with pytest.raises(ValueError):
        SplitSpec(1.2, -0.1, -0.1)


@settings(max_examples=50, deadline=None)
@given(T=st.integers(10, 500))
def test_splits_disjoint_ordered_exhaustive(T):
    tr, va, te = split_by_time(ramp_grid(T, H=1, W=1))
    idx = [p.values[:, 0, 0, 0].astype(int).tolist() for p in (tr, va, te)]
    assert idx[0] + idx[1] + idx[2] == list(range(T))
    assert tr.steps == int(0.7 * T + 1e-9)


# --- normaliser -------------------------------------------------------------

def test_two_point_stats():
    g = STGrid(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    n = fit_normalizer(g)
    assert n.mean[0] == 2.0 and n.std[0] == 1.0


def test_normalizer_round_trip():
    g = STGrid(np.random.default_rng(5).normal(3.0, 10.0, size=(20, 3, 4, 5)))
    n = fit_normalizer(g)
    z = n.apply(g).values.astype(np.float64)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, atol=1e-5)
    back = n.invert(n.apply(g)).values
    assert np.abs(back - g.values).max() < 1e-6 * np.abs(g.values).max()


def test_constant_channel_is_floored(caplog):
    g = STGrid(np.full((4, 1, 2, 2), 7.0))
    with caplog.at_level(logging.WARNING):
        n = fit_normalizer(g)
    assert "constant" in caplog.text
    assert n.std[0] == 1e-6
    assert not n.apply(g).values.any()


# --- synthesis --------------------------------------------------------------

def test_advection_moves_peak_one_column():
    g = synthesize("advection", dict(height=6, width=7, steps=3, velocities=[[1, 0]],
                                     centers=[[2, 2]]), seed=0)
    f0, f1 = g.values[0, 0], g.values[1, 0]
    assert np.unravel_index(f0.argmax(), f0.shape) == (2, 2)
    assert np.unravel_index(f1.argmax(), f1.shape) == (2, 3)


def test_periodic_repeats_exactly():
    p = 5
    g = synthesize("periodic", dict(channels=2, height=4, width=4, steps=23, period=p), seed=1)
    for t in range(23 - p):
        np.testing.assert_array_equal(g.values[t], g.values[t + p])


def test_diffusion_conserves_mass():
    g = synthesize("diffusion", dict(height=8, width=9, steps=30, diffusion_iters=2), seed=2)
    mass = g.values.astype(np.float64).sum(axis=(1, 2, 3))
    assert np.abs(mass / mass[0] - 1.0).max() < 1e-5
    assert g.values[-1].max() < g.values[0].max()


@pytest.mark.parametrize("kind", ["advection", "diffusion", "periodic"])
def test_synthesis_is_deterministic(kind):
    a = synthesize(kind, dict(steps=12, noise=0.1), seed=9)
    b = synthesize(kind, dict(steps=12, noise=0.1), seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.isfinite(a.values).all()


def test_synthesis_rejects_bad_dims():
    with pytest.raises(ValueError):
        synthesize("advection", dict(height=0))
    with pytest.raises(ValueError):
        synthesize("sideways", dict())


# --- STG1 files -------------------------------------------------------------

def test_stg1_round_trip(tmp_path):
    g = STGrid(np.random.default_rng(4).normal(size=(6, 2, 4, 4)),
               GridMeta(name="x", interval_minutes=15.0, scale_factor=1000.0))
    save_grid(g, tmp_path / "g.stg")
    h = load_grid(tmp_path / "g.stg")
    assert h.values.tobytes() == g.values.tobytes()
    assert h.meta == g.meta
    raw = (tmp_path / "g.stg").read_bytes()
    assert raw[:4] == b"STG1" and struct.unpack("<4I", raw[4:20]) == (2, 4, 4, 6)
    assert len(raw) == 20 + 4 * 2 * 4 * 4 * 6


def test_stg1_errors(tmp_path):
    p = tmp_path / "bad.stg"
    p.write_bytes(b"XXXX" + struct.pack("<4I", 1, 1, 1, 2) + b"\0" * 8)
    with pytest.raises(GridFormatError):
        load_grid(p)
    p.write_bytes(b"STG1" + struct.pack("<4I", 1, 2, 2, 3) + b"\0" * 8)
    with pytest.raises(GridTruncatedError):
        load_grid(p)
    p.write_bytes(b"STG1" + struct.pack("<4I", 65535, 65535, 65535, 2))
    with pytest.raises(GridDimensionError):
        load_grid(p)
    assert not issubclass(GridTruncatedError, GridFormatError)
