import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from phymt.errors import InvalidRankError, ShapeError
from phymt.lora import (LoRALinear, LoraAdapter, QuantizedMatrix, attach_adapters, loftq_init,
                        lora_forward, lora_init, lora_layers, merge_adapters, merge_model,
                        nf4_codebook, nf4_dequantize, nf4_quantize, pack_nibbles,
                        quantization_error, storage_ratio_vs_fp16, unpack_nibbles)
from phymt.nn.gradcheck import grad_check
from phymt.nn.model import Backbone, BackboneConfig
from phymt.numerics import SeededRng


def _W(seed, d1=64, d2=64):
    return np.random.default_rng(seed).standard_normal((d1, d2))


# ---------------------------------------------------------------- NF4

def test_codebook_levels():
    c = nf4_codebook()
    assert c.size == 16 and np.all(np.diff(c) > 0)
    np.testing.assert_allclose(c, -c[::-1], atol=1e-12)
    # independent oracle: Gaussian quantiles at the clamped grid
    p = np.clip(np.arange(16) / 15, 1 / 30, 29 / 30)
    np.testing.assert_allclose(c, norm.ppf(p), atol=1e-12)


def test_codebook_center_is_zero_for_odd_levels():
    # with 2^N - 1 even the central index maps to exactly 0.5
    c = nf4_codebook(bits=1)
    assert c.size == 2 and c[0] == -c[1]
    q = QuantizedMatrix(np.array([[1]]), 1.0, bits=1)
    assert nf4_dequantize(q)[0, 0] == pytest.approx(-nf4_dequantize(QuantizedMatrix([[0]], 1.0, 1))[0, 0])


def test_quantize_index_identity_on_all_levels():
    W = _W(0)
    Q = nf4_quantize(W)
    levels = nf4_codebook(4, Q.sigma)
    back = nf4_quantize(levels[None, :], sigma=Q.sigma)
    np.testing.assert_array_equal(back.indices[0], np.arange(16))


def test_quantize_degenerate_and_saturation():
    Q = nf4_quantize(np.zeros((4, 4)))
    assert Q.sigma == 0 and np.all(Q.indices == 8)
    np.testing.assert_array_equal(nf4_dequantize(Q), 0.0)
    W = np.zeros((2, 8))
    W[0, 0] = 1.0
    s = W.std()
    W[0, 0] = 10 * s
    W[0, 0] = 10 * W.std()
    assert nf4_quantize(W).indices[0, 0] == 15


def test_dequantization_error_bound():
    x = np.random.default_rng(1).standard_normal((100, 1000))
    Q = nf4_quantize(x, sigma=1.0)
    err = np.abs(nf4_dequantize(Q) - x)
    inside = np.abs(x) <= nf4_codebook()[-1]
    assert err[inside].max() < np.diff(nf4_codebook()).max()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100))
def test_quantize_idempotent_property(seed, scale):
    W = scale * np.random.default_rng(seed).standard_normal((8, 8))
    Q = nf4_quantize(W)
    Q2 = nf4_quantize(nf4_dequantize(Q), sigma=Q.sigma)
    np.testing.assert_array_equal(Q.indices, Q2.indices)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_quantize_odd_symmetry_property(seed):
    W = np.random.default_rng(seed).standard_normal((6, 6))
    np.testing.assert_array_equal(nf4_quantize(-W).indices, 15 - nf4_quantize(W).indices)


def test_nibble_packing_round_trip():
    idx = np.random.default_rng(2).integers(0, 16, size=(7, 9)).astype(np.uint8)
    buf = pack_nibbles(idx)
    assert len(buf) == 32
    np.testing.assert_array_equal(unpack_nibbles(buf, idx.size).reshape(7, 9), idx)
    assert pack_nibbles([1, 2]) == bytes([0x21])
    assert storage_ratio_vs_fp16(nf4_quantize(_W(3))) == 0.25


# ---------------------------------------------------------------- adapters

def test_lora_init_contract():
    ad = lora_init(64, 64, 8, SeededRng(0))
    assert not np.any(ad.B) and ad.n_params() == 8 * (64 + 64) == 1024
    assert abs(ad.A.std() - 0.02) < 0.003
    x = np.random.default_rng(0).standard_normal((5, 64))
    W = _W(4)
    np.testing.assert_allclose(lora_forward(W, ad, x), x @ W.T, atol=1e-14)
    np.testing.assert_array_equal(merge_adapters(W, ad), W)
    with pytest.raises(InvalidRankError):
        lora_init(4, 6, 5, SeededRng(0))


def test_rank_one_outer_product():
    u, v = np.arange(3.0), np.array([1.0, -1.0])
    ad = LoraAdapter(u[:, None], v[:, None])
    W = np.ones((3, 2))
    x = np.array([[2.0, 5.0]])
    np.testing.assert_allclose(lora_forward(W, ad, x), x @ W.T + np.outer(x @ v, u), atol=1e-14)
    with pytest.raises(ShapeError):
        lora_forward(np.ones((3, 4)), ad, np.ones((1, 4)))


def test_lora_linear_gradcheck_tight():
    ad = LoraAdapter(0.1 * _W(5, 6, 2), 0.1 * _W(6, 5, 2))
    lin = LoRALinear(_W(7, 6, 5), np.zeros(6), ad)
    assert grad_check(lin, np.random.default_rng(0).standard_normal((3, 5))) < 1e-6
    names = {n for n, p in lin.named_params() if p.trainable}
    assert names == {"adapter.A", "adapter.B"}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_merge_equals_adapter_forward_property(seed, quantized):
    g = np.random.default_rng(seed)
    W = g.standard_normal((16, 12))
    ad = LoraAdapter(g.standard_normal((16, 3)), g.standard_normal((12, 3)))
    base = nf4_quantize(W) if quantized else W
    x = g.standard_normal((4, 12))
    assert np.abs(x @ merge_adapters(base, ad).T - lora_forward(base, ad, x)).max() < 1e-12


# ---------------------------------------------------------------- alternating initialization

def test_loftq_full_rank_and_single_iteration():
    W = _W(8, 16, 16)
    assert loftq_init(W, 16, iters=1).trace[0] < 1e-9
    res = loftq_init(W, 4, iters=1)
    assert res.trace[0] <= res.naive_error
    # one iteration = naive quantization plus the rank-4 truncation of its residual
    R = W - nf4_dequantize(nf4_quantize(W))
    s = np.linalg.svd(R, compute_uv=False)
    assert res.trace[0] == pytest.approx(np.sqrt(np.sum(s[4:] ** 2)), rel=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_loftq_keep_best_and_eckart_young_property(seed):
    res = loftq_init(_W(seed, 32, 24), 4, iters=4)
    assert all(post <= pre + 1e-9 for pre, post in zip(res.pre_svd, res.trace))
    assert res.error == min(res.trace) <= res.trace[0] <= res.naive_error + 1e-12
    Wq = nf4_dequantize(res.Q)
    assert np.linalg.norm(_W(seed, 32, 24) - Wq - res.A @ res.B.T) == pytest.approx(res.error, rel=1e-12)


def test_loftq_beats_naive_on_gaussian():
    wins = sum(loftq_init(_W(s), 8).error < quantization_error(_W(s), nf4_quantize(_W(s)))
               for s in range(10))
    assert wins == 10


# ---------------------------------------------------------------- backbone wiring

@pytest.mark.parametrize("mode", ["none", "nf4", "loftq"])
def test_attach_adapters(mode):
    bb = Backbone(BackboneConfig(), SeededRng(0))
    x = np.random.default_rng(0).standard_normal((2, 5, 64))
    y0 = bb(x)
    attach_adapters(bb, SeededRng(1), r=8, mode=mode)
    layers = lora_layers(bb)
    assert len(layers) == 2 * bb.cfg.depth
    trainable = [n for n, p in bb.named_params() if p.trainable]
    assert trainable and all(".adapter." in n for n in trainable)
    if mode == "none":
        np.testing.assert_allclose(bb(x), y0, atol=1e-12)
    else:
        assert all(lin.quant is not None for _, lin in layers)
    with pytest.raises(Exception):
        attach_adapters(bb, SeededRng(1), mode=mode)


def test_merge_model_matches_adapted_forward():
    bb = Backbone(BackboneConfig(), SeededRng(2))
    attach_adapters(bb, SeededRng(3), mode="nf4")
    for _, lin in lora_layers(bb):
        lin.adapter.params["B"].value[...] = 0.05 * np.random.default_rng(4).standard_normal(lin.adapter.B.shape)
    x = np.random.default_rng(5).standard_normal((3, 7, 64))
    y = bb(x)
    merge_model(bb)
    assert not lora_layers(bb)
    assert np.abs(bb(x) - y).max() < 1e-12
