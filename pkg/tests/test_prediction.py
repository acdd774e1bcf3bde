import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phymt.channel import SceneConfig
from phymt.errors import DegenerateStatsError, InvalidInputError
from phymt.prediction import (NMSE_FLOOR_DB, ar_predict, denormalize, nmse_db, normalize, patchify,
                              to_complex, to_real)
from phymt.training.data import make_cp


def test_normalize_fixed_point_and_mean_recovery():
    x = np.array([-1.0, 1.0, -1.0, 1.0])
    xn, st_ = normalize(x)
    assert st_.mu == pytest.approx(0) and st_.sigma == pytest.approx(1)
    np.testing.assert_allclose(xn, x)
    g = np.random.default_rng(0)
    _, s = normalize(5 + g.standard_normal(10_000))
    assert s.mu == pytest.approx(5, abs=0.05)
    with pytest.raises(DegenerateStatsError):
        normalize(np.full((3, 3), 2.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50), st.floats(0.01, 100))
def test_normalize_round_trip_property(seed, mu, sd):
    x = mu + sd * np.random.default_rng(seed).standard_normal((16, 16))
    xn, s = normalize(x)
    assert abs(xn.mean()) < 1e-12 and abs(xn.std() - 1) < 1e-12
    np.testing.assert_allclose(denormalize(xn, s), x, atol=1e-12 * max(1, abs(mu) + sd))


def test_patchify_shapes():
    x = np.arange(16 * 16, dtype=float).reshape(16, 16)
    assert patchify(x, 4).shape == (4, 64)
    np.testing.assert_array_equal(patchify(x, 1), x)
    p = patchify(x, 5)
    assert p.shape == (4, 80)
    np.testing.assert_array_equal(p[-1, 16:], 0)
    np.testing.assert_array_equal(p[0, :16], x[0])


def test_nmse_db_cases():
    t = np.random.default_rng(1).standard_normal((4, 8))
    assert nmse_db(t, t) == NMSE_FLOOR_DB
    assert nmse_db(np.zeros_like(t), t) == pytest.approx(0.0, abs=1e-12)
    e = np.random.default_rng(2).standard_normal(t.shape)
    e *= 0.1 * np.linalg.norm(t) / np.linalg.norm(e)
    assert nmse_db(t + e, t) == pytest.approx(-20.0, abs=1e-9)
    with pytest.raises(InvalidInputError):
        nmse_db(t, np.zeros_like(t))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_nmse_scale_invariance_property(seed, a):
    g = np.random.default_rng(seed)
    p, t = g.standard_normal(10), g.standard_normal(10)
    assert nmse_db(a * p, a * t) == pytest.approx(nmse_db(p, t), abs=1e-9)


def test_real_complex_round_trip():
    h = np.random.default_rng(3).standard_normal((5, 4)) + 1j
    np.testing.assert_array_equal(to_complex(to_real(h)), h)


def test_ar_constant_and_sinusoid():
    const = np.full((16, 2), 3.0)
    np.testing.assert_allclose(ar_predict(const, 2, 4), 3.0)
    t = np.arange(20)
    z = np.exp(1j * 0.37 * t)
    hist = np.stack([z.real[:16], z.imag[:16]], axis=1)
    fut = np.stack([z.real[16:], z.imag[16:]], axis=1)
    assert nmse_db(ar_predict(hist, 2, 4), fut) < -40


def test_ar_white_noise_is_uninformative():
    vals = []
    for s in range(200):
        x = np.random.default_rng(s).standard_normal((20, 1))
        vals.append(nmse_db(ar_predict(x[:16], 2, 4), x[16:]))
    assert abs(np.mean(vals)) < 1.5


def test_ar_nmse_degrades_with_velocity():
    data = make_cp(300, SceneConfig(), seed=5, velocities_kmh=(10.0, 50.0, 100.0))
    res = {}
    for v in (10.0, 50.0, 100.0):
        d = data.where("velocity_kmh", v)
        pred = np.array([ar_predict(h, 2, 4) for h in d.inputs[0]])
        fut = np.concatenate([d.target[..., 0], d.target[..., 1]], axis=-1)
        res[v] = nmse_db(pred, fut)
    assert res[10.0] < res[50.0] < res[100.0]
