import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phymt.channel import (KMH, CsiSequence, PathSet, SceneConfig, add_awgn, csi_sequence,
                           draw_paths, load_dataset, read_header, save_dataset, upa_steering)
from phymt.errors import CorruptFileError, FormatError, InvalidInputError
from phymt.numerics import SeededRng


def test_steering_broadside_and_endfire():
    np.testing.assert_allclose(upa_steering(4, 4, 0.0, 0.0), np.ones(16))
    np.testing.assert_allclose(upa_steering(2, 1, math.pi / 2, 0.0), [1, -1], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(-math.pi, math.pi), st.floats(-1.5, 1.5))
def test_steering_norm_property(nh, nv, az, el):
    a = upa_steering(nh, nv, az, el)
    assert abs(np.linalg.norm(a) - math.sqrt(nh * nv)) < 1e-12


def test_draw_paths_counts_and_determinism():
    sc = SceneConfig()
    p1, p2 = draw_paths(sc, SeededRng(3)), draw_paths(sc, SeededRng(3))
    assert len(p1) == 21 * 20 == 420
    for name in ("gains", "delays", "azimuth", "elevation", "doppler"):
        np.testing.assert_array_equal(getattr(p1, name), getattr(p2, name))
    assert sc.velocity_range[0] <= p1.velocity <= sc.velocity_range[1]


def test_channel_energy_is_unit():
    sc = SceneConfig(clusters=4, paths_per_cluster=5)
    e = [np.mean(np.abs(csi_sequence(draw_paths(sc, SeededRng(9, i)), sc, 1).slots) ** 2)
         for i in range(10_000)]
    assert abs(np.mean(e) - 1) < 0.03


def _single_path(doppler=0.0, delay=0.0):
    return PathSet(np.array([0.6 - 0.3j]), np.array([delay]), np.array([0.4]), np.array([0.1]),
                   np.array([doppler]))


def test_single_static_path():
    sc = SceneConfig()
    seq = csi_sequence(_single_path(), sc, 3)
    ref = (0.6 - 0.3j) * upa_steering(4, 4, 0.4, 0.1)
    for t in range(3):
        for m in range(sc.n_subcarriers):
            np.testing.assert_allclose(seq.slots[t, :, m], ref, atol=1e-14)


def test_single_path_doppler_rotation_and_linear_phase():
    sc = SceneConfig()
    nu, tau = 150.0, 40e-9
    seq = csi_sequence(_single_path(nu, tau), sc, 4)
    ratio = seq.slots[1:] / seq.slots[:-1]
    np.testing.assert_allclose(ratio, np.exp(2j * np.pi * nu * sc.slot_duration), atol=1e-12)
    fr = seq.slots[0, 0, 1:] / seq.slots[0, 0, :-1]
    np.testing.assert_allclose(fr, np.exp(-2j * np.pi * tau * sc.subcarrier_spacing), atol=1e-12)


def test_correlation_drops_with_velocity():
    sc = SceneConfig()

    def corr(v):
        c = []
        for i in range(200):
            s = csi_sequence(draw_paths(sc, SeededRng(4, i), velocity=v * KMH), sc, 2).slots
            a, b = s[0].ravel(), s[1].ravel()
            c.append(abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
        return np.mean(c)

    assert corr(10) > corr(100)


def test_awgn_passthrough_energy_determinism():
    H = np.ones((100, 100), dtype=complex)
    np.testing.assert_array_equal(add_awgn(H, math.inf, SeededRng(0)), H)
    noisy = add_awgn(H, 0.0, SeededRng(0))
    assert abs(np.mean(np.abs(noisy - H) ** 2) - 1) < 0.05
    np.testing.assert_array_equal(noisy, add_awgn(H, 0.0, SeededRng(0)))
    with pytest.raises(InvalidInputError):
        add_awgn(np.zeros((2, 2)), 10, SeededRng(0))


def test_dataset_round_trip(tmp_path):
    sc = SceneConfig()
    seqs = [csi_sequence(draw_paths(sc, SeededRng(1, i)), sc, 5, user=i % 4) for i in range(10)]
    path = tmp_path / "d.bin"
    save_dataset(path, seqs, {"note": "x"}, {"v": np.arange(3.0)}, sc)
    ds = load_dataset(path)
    assert len(ds.sequences) == 10
    for a, b in zip(seqs, ds.sequences):
        np.testing.assert_array_equal(a.slots, b.slots)
        assert a.user == b.user
    np.testing.assert_array_equal(ds.arrays["v"], np.arange(3.0))
    assert ds.scene == sc
    head = read_header(path)
    assert head["scene"]["n_users"] == 4 and head["sequences"][0]["shape"] == [5, 16, 8]


def test_dataset_bad_magic_and_truncation(tmp_path):
    sc = SceneConfig()
    path = tmp_path / "d.bin"
    save_dataset(path, [csi_sequence(draw_paths(sc, SeededRng(1)), sc, 2)], scene=sc)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTPHYMT" + raw[8:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-5])
    with pytest.raises(CorruptFileError):
        load_dataset(tmp_path / "short.bin")


def test_csi_sequence_rejects_bad_shapes():
    with pytest.raises(Exception):
        CsiSequence(0, np.zeros((2, 3)))
