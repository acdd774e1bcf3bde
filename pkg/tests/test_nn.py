import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phymt.errors import DegenerateStatsError, ShapeError
from phymt.nn.gradcheck import grad_check
from phymt.nn.layers import (GELU, MLP, LayerNorm, Linear, MultiHeadAttention, PositionalEmbedding,
                             PostNormBlock, PreNormBlock, Softplus, SqueezeExcite)
from phymt.nn.model import (DEFAULT_TASKS, Backbone, BackboneConfig, DecoderCp, DecoderDet,
                            DecoderPre, EncoderCp, EncoderDet, EncoderPre, ModelConfig,
                            MultiTaskModel, PromptEmbedder, TaskSpec, fnv1a64)
from phymt.numerics import SeededRng


def _x(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class _Whole:
    """Adapter exposing one task of the full model to grad_check."""

    def __init__(self, model, task):
        self.model, self.task = model, task

    def named_params(self):
        return self.model.task_params(self.task)

    def zero_grad(self):
        self.model.zero_grad()

    def forward(self, *inputs):
        return self.model.forward(self.task, inputs)

    def backward(self, dy):
        return self.model.backward(dy)


# ---------------------------------------------------------------- layer contracts

def test_linear_identity():
    lin = Linear(4, 4, SeededRng(0))
    lin.params["W"].value[...] = np.eye(4)
    lin.params["b"].value[...] = 0
    x = _x(3, 4)
    y = lin(x)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_allclose(lin.backward(y), x)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        Linear(4, 3, SeededRng(0))(np.ones((2, 5)))


def test_layernorm_constant_row_is_zero():
    ln = LayerNorm(6)
    np.testing.assert_allclose(ln(np.full((2, 6), 3.7)), 0.0, atol=1e-12)


def test_single_token_attention_is_value_projection():
    att = MultiHeadAttention(8, 2, SeededRng(1))
    x = _x(1, 8)
    np.testing.assert_allclose(att(x), att.wo(att.wv(x)), atol=1e-12)


def test_nan_activation_raises():
    from phymt.errors import NumericalFailure

    lin = Linear(3, 3, SeededRng(0))
    with pytest.raises(NumericalFailure):
        lin(np.array([[np.nan, 0, 0]]))


# ---------------------------------------------------------------- gradient checks

def test_linear_gradcheck_tight():
    assert grad_check(Linear(6, 5, SeededRng(0)), _x(4, 6)) < 1e-6


@pytest.mark.parametrize("make,shape", [
    (lambda r: LayerNorm(8), (3, 5, 8)),
    (lambda r: GELU(), (3, 7)),
    (lambda r: Softplus(), (3, 7)),
    (lambda r: MLP(8, 16, 4, r), (2, 3, 8)),
    (lambda r: MultiHeadAttention(8, 2, r), (2, 5, 8)),
    (lambda r: MultiHeadAttention(8, 2, r, causal=True), (2, 5, 8)),
    (lambda r: PostNormBlock(8, 2, 16, r), (2, 5, 8)),
    (lambda r: PreNormBlock(8, 2, 16, r), (2, 5, 8)),
    (lambda r: SqueezeExcite(12, r), (2, 4, 12)),
    (lambda r: PositionalEmbedding(6, 8, r), (2, 5, 8)),
])
def test_layer_gradchecks(make, shape):
    assert grad_check(make(SeededRng(3)), _x(*shape)) < 1e-4


def test_frozen_layer_is_skipped():
    lin = Linear(4, 4, SeededRng(0))
    lin.freeze()
    assert grad_check(lin, _x(2, 4), check_inputs=False) == 0.0
    lin.forward(_x(2, 4))
    lin.backward(_x(2, 4))
    assert not np.any(lin.params["W"].grad)


def test_head_gradchecks():
    r = SeededRng(5)
    assert grad_check(EncoderPre(4, 16, r, n_blocks=2), _x(2, 3, 8)) < 1e-4
    assert grad_check(EncoderDet(4, 2, 16, r), (_x(2, 2, 8), _x(2, 8, 8, seed=1))) < 1e-4
    assert grad_check(EncoderCp(8, 4, 16, r, patch=4, n_blocks=2), _x(2, 8, 8)) < 1e-4
    assert grad_check(DecoderPre(16, r), _x(2, 3, 16)) < 1e-4
    assert grad_check(DecoderDet(16, 2, r), _x(2, 9, 16)) < 1e-4
    stats = (np.array([0.3, -0.2]), np.array([1.5, 0.7]))
    assert grad_check(DecoderCp(2, 16, 4, 4, r), _x(2, 2, 16), extras={"stats": stats}) < 1e-4


def test_backbone_gradcheck():
    bb = Backbone(BackboneConfig(depth=2, d_model=16, n_heads=2, d_ff=32, max_len=16), SeededRng(6))
    assert grad_check(bb, _x(2, 7, 16)) < 1e-4


@pytest.mark.parametrize("task", ["CP", "DET", "PRE"])
def test_whole_model_gradcheck(task):
    cfg = ModelConfig(n_t=4, n_users=2, n_subcarriers=4, t1=8, t2=2, patch=4, n_slots=3,
                      backbone=BackboneConfig(depth=1, d_model=16, n_heads=2, d_ff=32),
                      enc_blocks=1, se_blocks=1, d_hidden=24)
    model = MultiTaskModel(cfg, SeededRng(7))
    inputs = {"CP": (_x(2, 8, 8),), "DET": (_x(2, 2, 8), _x(2, 3, 8, seed=1)), "PRE": (_x(2, 2, 8),)}[task]
    assert grad_check(_Whole(model, task), inputs) < 1e-4


# ---------------------------------------------------------------- model contracts

def test_encoder_pre_permutation_equivariance():
    enc = EncoderPre(4, 16, SeededRng(8), n_blocks=2)
    x = _x(5, 8)
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(enc(x[perm]), enc(x)[perm], atol=1e-12)
    assert enc(_x(7, 8)).shape == (7, 16)


def test_encoder_det_tokens_and_zero_input():
    enc = EncoderDet(16, 4, 64, SeededRng(9))
    out = enc(np.zeros((4, 32)), np.zeros((8, 32)))
    assert out.shape == (9, 64) and np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, enc(np.zeros((4, 32)), np.zeros((8, 32))))


def test_encoder_cp_tokens_and_degenerate():
    enc = EncoderCp(16, 8, 64, SeededRng(10))
    assert enc(_x(16, 16)).shape == (4, 64)
    with pytest.raises(DegenerateStatsError):
        enc(np.ones((16, 16)))


def test_decoder_pre_budget():
    dec = DecoderPre(16, SeededRng(11), p_max=2.0)
    out = dec(_x(3, 4, 16))
    assert out.shape == (3, 4, 2)
    np.testing.assert_allclose(out.sum(axis=-2), 2.0, atol=1e-9)
    assert np.all(out >= 0)


def test_decoder_cp_identity_stats_and_shape():
    dec = DecoderCp(4, 16, 4, 8, SeededRng(12))
    x = _x(4, 16)
    a = dec(x, (np.array(0.0), np.array(1.0)))
    b = dec(x, (np.array(2.0), np.array(3.0)))
    assert a.shape == (4, 8, 2)
    np.testing.assert_allclose(b, 2.0 + 3.0 * a, atol=1e-12)


def test_backbone_depth_zero_identity_and_finite():
    x = _x(2, 5, 16)
    np.testing.assert_array_equal(Backbone(BackboneConfig(depth=0, d_model=16, n_heads=2), SeededRng(0))(x), x)
    bb = Backbone(BackboneConfig(), SeededRng(1))
    for n in (1, 9, 40):
        big = np.random.default_rng(n).uniform(-10, 10, (n, 64))
        y = bb(big)
        assert y.shape == big.shape and np.all(np.isfinite(y))


def test_backbone_is_causal():
    bb = Backbone(BackboneConfig(d_model=16, n_heads=2, d_ff=32), SeededRng(2))
    x = _x(6, 16)
    y1 = bb(x)
    x2 = x.copy()
    x2[4:] += 1.0
    np.testing.assert_allclose(bb(x2)[:4], y1[:4], atol=1e-12)


def test_prompt_hashing():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C
    ids = {t: s.token_ids() for t, s in DEFAULT_TASKS.items()}
    assert len({v[0] for v in ids.values()}) == 3
    emb = PromptEmbedder(4096, 8, SeededRng(0))
    np.testing.assert_array_equal(emb(ids["CP"]), emb(ids["CP"]))
    base = DEFAULT_TASKS["DET"]
    alt = TaskSpec("DET", base.identifier, base.description, base.instruction.replace("Recover", "Find"))
    a, b = base.token_ids(), alt.token_ids()
    assert sum(x != y for x, y in zip(a, b)) == 1 and len(a) == len(b)


@settings(max_examples=30, deadline=None)
@given(st.text(min_size=1, max_size=40))
def test_prompt_embedding_pure_function_property(text):
    spec = TaskSpec("X", "[X]", text, "go")
    assert spec.token_ids() == TaskSpec("X", "[X]", text, "go").token_ids()
    assert all(0 <= i < 4096 for i in spec.token_ids())


def test_model_routes_tasks_and_shapes():
    model = MultiTaskModel(ModelConfig(), SeededRng(3))
    assert set(model.encoders) == set(model.decoders) == {"CP", "DET", "PRE"}
    assert model.forward("CP", (_x(2, 16, 16),)).shape == (2, 4, 8, 2)
    assert model.forward("DET", (_x(2, 4, 32), _x(2, 8, 32))).shape == (2, 8, 4, 2)
    assert model.forward("PRE", (_x(2, 4, 32),)).shape == (2, 4, 2)
    off = model.forward("PRE", (_x(2, 4, 32),), use_prompt=False)
    assert off.shape == (2, 4, 2) and np.all(np.isfinite(off))


def test_task_params_are_disjoint_across_heads():
    model = MultiTaskModel(ModelConfig(), SeededRng(4))
    names = {t: {n for n, _ in model.task_params(t)} for t in ("CP", "DET", "PRE")}
    heads = {t: {n for n in names[t] if n.startswith(("encoders", "decoders"))} for t in names}
    assert not heads["CP"] & heads["DET"] and not heads["DET"] & heads["PRE"]
    assert all(n.split(".")[1] == t for t in heads for n in heads[t])
