"""Task encoders and decoders, the shared causal backbone, and prompt routing.

Data flow for one task::

    prompt tokens --embed--+
                           +--concat--> backbone --drop prompt--> decoder
    task input --encoder---+

Each task owns its encoder/decoder pair; the backbone and prompt table are
shared. Only the chosen task's modules run in a given step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import DegenerateOutputError, DegenerateStatsError, ShapeError, ValidationError
from ..prediction import patchify
from .layers import (
    MLP, LayerNorm, Linear, Module, Param, PositionalEmbedding, PostNormBlock, PreNormBlock,
    Softplus, SqueezeExcite,
)

TASKS = ("CP", "DET", "PRE")


# ---------------------------------------------------------------- prompts

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class TaskSpec:
    """Instruction template ``[identifier] description <Instruction> text``."""

    task: str
    identifier: str
    description: str
    instruction: str

    @property
    def prompt(self) -> str:
        return f"{self.identifier} {self.description} <Instruction> {self.instruction}"

    def token_ids(self, vocab: int = 4096) -> list[int]:
        return [fnv1a64(tok) % vocab for tok in self.prompt.split()]


DEFAULT_TASKS = {
    "CP": TaskSpec(
        "CP", "[CHANNEL-PREDICTION]", "Forecast mobile user CSI.",
        "Predict future channel slots."),
    "DET": TaskSpec(
        "DET", "[SIGNAL-DETECTION]", "Uplink multi-user QAM detection.",
        "Recover transmitted user symbols."),
    "PRE": TaskSpec(
        "PRE", "[MULTIUSER-PRECODING]", "Downlink multi-user beamforming.",
        "Maximize the sum rate."),
}


class PromptEmbedder(Module):
    """Hashed whitespace tokens looked up in a trainable table."""

    def __init__(self, vocab: int, d: int, rng, std: float = 0.02):
        super().__init__()
        self.vocab = vocab
        self.params["E"] = Param(std * rng.gen.standard_normal((vocab, d)))

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ValidationError("empty prompt")
        self._ids = ids
        return self.params["E"].value[ids]

    def backward(self, dy):
        E = self.params["E"]
        if E.trainable:
            np.add.at(E.grad, self._ids, dy)
        return None


# ---------------------------------------------------------------- encoders

class EncoderPre(Module):
    """Post-norm transformer over user tokens (no positions), then a projection.

    Input ``(..., K, 2 N_T)``; output ``(..., K, d_model)``.
    """

    def __init__(self, n_t: int, d_model: int, rng, n_blocks: int = 3, n_heads: int = 4,
                 d_ff: int | None = None):
        super().__init__()
        w = 2 * n_t
        self.width = w
        self.blocks = [PostNormBlock(w, n_heads, d_ff or 4 * w, rng) for _ in range(n_blocks)]
        self.proj = Linear(w, d_model, rng)

    def forward(self, x):
        if x.shape[-1] != self.width:
            raise ShapeError(f"precoding input width {x.shape[-1]} != {self.width}")
        for b in self.blocks:
            x = b(x)
        return self.proj(x)

    def backward(self, dy):
        d = self.proj.backward(dy)
        for b in reversed(self.blocks):
            d = b.backward(d)
        return d


class EncoderDet(Module):
    """Channel token plus one token per received slot.

    ``H`` is ``(..., K, 2 N_T)`` and is flattened into a single token;
    ``Y`` is ``(..., L0, 2 N_T)``. Output has ``1 + L0`` tokens.
    """

    def __init__(self, n_t: int, n_users: int, d_model: int, rng, d_hidden: int | None = None):
        super().__init__()
        hid = d_hidden or 4 * d_model
        self.n_t, self.k = n_t, n_users
        self.mlp_h = MLP(2 * n_t * n_users, hid, d_model, rng)
        self.mlp_y = MLP(2 * n_t, hid, d_model, rng)
        self.proj = Linear(d_model, d_model, rng)

    def forward(self, H, Y):
        if H.shape[-2:] != (self.k, 2 * self.n_t) or Y.shape[-1] != 2 * self.n_t:
            raise ShapeError(f"detection inputs {H.shape}, {Y.shape} do not match "
                             f"K={self.k}, N_T={self.n_t}")
        lead = H.shape[:-2]
        fh = self.mlp_h(H.reshape(*lead, 1, -1))
        fy = self.mlp_y(Y)
        self._l0 = Y.shape[-2]
        return self.proj(np.concatenate([fh, fy], axis=-2))

    def backward(self, dy):
        d = self.proj.backward(dy)
        dh = self.mlp_h.backward(d[..., :1, :])
        dY = self.mlp_y.backward(d[..., 1:, :])
        return dh.reshape(*dh.shape[:-2], self.k, 2 * self.n_t), dY


class EncoderCp(Module):
    """Per-sample normalization, patching, squeeze-excitation stack, projection.

    Input ``(..., T1, 2M)``; output ``(..., ceil(T1/N), d_model)``. The
    normalization statistics of the last call are kept in ``self.stats`` as
    ``(mu, sigma)`` arrays over the leading axes for the decoder.
    """

    def __init__(self, t1: int, m: int, d_model: int, rng, patch: int = 4, n_blocks: int = 3):
        super().__init__()
        self.t1, self.m, self.patch = t1, m, patch
        self.n_tok = -(-t1 // patch)
        c = patch * 2 * m
        self.se = [SqueezeExcite(c, rng) for _ in range(n_blocks)]
        self.proj = Linear(c, d_model, rng)
        self.pos = PositionalEmbedding(self.n_tok, d_model, rng)

    def forward(self, x):
        if x.shape[-2:] != (self.t1, 2 * self.m):
            raise ShapeError(f"prediction input {x.shape[-2:]} != {(self.t1, 2 * self.m)}")
        mu = x.mean(axis=(-2, -1), keepdims=True)
        sigma = x.std(axis=(-2, -1), keepdims=True)
        if np.any(np.ptp(x.reshape(*x.shape[:-2], -1), axis=-1) == 0):
            raise DegenerateStatsError("cannot normalize a constant history")
        xn = (x - mu) / sigma
        self._xn, self._sigma = xn, sigma
        self.stats = (mu[..., 0, 0], sigma[..., 0, 0])
        z = patchify(xn, self.patch)
        for b in self.se:
            z = b(z)
        return self.pos(self.proj(z))

    def backward(self, dy, dstats=None):
        """Input gradient; ``dstats = (dmu, dsigma)`` adds the path through the
        statistics when a downstream decoder de-normalizes with them."""
        d = self.proj.backward(self.pos.backward(dy))
        for b in reversed(self.se):
            d = b.backward(d)
        lead = d.shape[:-2]
        d = d.reshape(*lead, self.n_tok * self.patch, 2 * self.m)[..., : self.t1, :]
        xn = self._xn
        dx = (d - d.mean(axis=(-2, -1), keepdims=True)
              - xn * (d * xn).mean(axis=(-2, -1), keepdims=True)) / self._sigma
        if dstats is not None:
            dmu, dsig = (np.asarray(v)[..., None, None] for v in dstats)
            n = self.t1 * 2 * self.m
            dx = dx + (dmu + dsig * xn) / n
        return dx


# ---------------------------------------------------------------- decoders

class DecoderPre(Module):
    """Per-user MLP -> softplus -> rescale each column to sum to ``p_max``.

    Output ``(..., K, 2)`` with column 0 = lambda, column 1 = p.
    """

    def __init__(self, d_model: int, rng, p_max: float = 1.0, d_hidden: int | None = None):
        super().__init__()
        self.p_max = p_max
        self.mlp = MLP(d_model, d_hidden or 4 * d_model, 2, rng)
        self.act = Softplus()

    def forward(self, x):
        z = self.act(self.mlp(x))
        s = z.sum(axis=-2, keepdims=True)
        if np.any(s <= 0):
            raise DegenerateOutputError("all-zero power output")
        self._z, self._s = z, s
        return self.p_max * z / s

    def backward(self, dy):
        z, s = self._z, self._s
        dz = self.p_max / s * (dy - (dy * z).sum(axis=-2, keepdims=True) / s)
        return self.mlp.backward(self.act.backward(dz))


class DecoderDet(Module):
    """Per-slot MLP to ``2K`` values, reshaped to ``(..., L0, K, 2)`` = (re, im).

    The leading channel token is dropped; each received-slot token decodes
    the symbols sent in that slot.
    """

    def __init__(self, d_model: int, n_users: int, rng, d_hidden: int | None = None):
        super().__init__()
        self.k = n_users
        self.mlp = MLP(d_model, d_hidden or 4 * d_model, 2 * n_users, rng)

    def forward(self, x):
        self._shape = x.shape
        out = self.mlp(x[..., 1:, :])
        return out.reshape(*out.shape[:-1], self.k, 2)

    def backward(self, dy):
        d = self.mlp.backward(dy.reshape(*dy.shape[:-2], 2 * self.k))
        dx = np.zeros(self._shape)
        dx[..., 1:, :] = d
        return dx


class DecoderCp(Module):
    """Flatten tokens, MLP to ``T2 x 2M``, de-normalize, split re/im.

    Output ``(..., T2, M, 2)``.
    """

    def __init__(self, n_tok: int, d_model: int, t2: int, m: int, rng, d_hidden: int | None = None):
        super().__init__()
        self.n_tok, self.t2, self.m = n_tok, t2, m
        self.mlp = MLP(n_tok * d_model, d_hidden or 4 * d_model, t2 * 2 * m, rng)

    def forward(self, x, stats):
        mu, sigma = (np.asarray(s, dtype=float) for s in stats)
        if x.shape[-2] != self.n_tok:
            raise ShapeError(f"expected {self.n_tok} tokens, got {x.shape[-2]}")
        lead = x.shape[:-2]
        self._xshape = x.shape
        self._sigma = sigma
        raw = self.mlp(x.reshape(*lead, -1)).reshape(*lead, self.t2, 2 * self.m)
        self._raw = raw
        out = raw * sigma[..., None, None] + mu[..., None, None]
        return np.stack([out[..., : self.m], out[..., self.m:]], axis=-1)

    def backward(self, dy):
        """Gradient w.r.t. the tokens; the statistics' gradients go to ``self.dstats``."""
        d = np.concatenate([dy[..., 0], dy[..., 1]], axis=-1)
        self.dstats = (d.sum(axis=(-2, -1)), (d * self._raw).sum(axis=(-2, -1)))
        d = d * self._sigma[..., None, None]
        d = self.mlp.backward(d.reshape(*d.shape[:-2], -1))
        return d.reshape(self._xshape)


# ---------------------------------------------------------------- backbone

@dataclass
class BackboneConfig:
    depth: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must be divisible by n_heads")


class Backbone(Module):
    """Learned positions, ``depth`` causal pre-norm blocks, final LayerNorm.

    ``depth == 0`` is the identity map (no positions, no final norm).
    """

    def __init__(self, cfg: BackboneConfig, rng):
        super().__init__()
        self.cfg = cfg
        if cfg.depth > 0:
            self.pos = PositionalEmbedding(cfg.max_len, cfg.d_model, rng)
            self.blocks = [PreNormBlock(cfg.d_model, cfg.n_heads, cfg.d_ff, rng)
                           for _ in range(cfg.depth)]
            self.ln_f = LayerNorm(cfg.d_model)
        else:
            self.blocks = []

    def attention_layers(self):
        return [b.att for b in self.blocks]

    def forward(self, x):
        if x.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"backbone width {self.cfg.d_model}, got {x.shape[-1]}")
        if not self.blocks:
            return x
        x = self.pos(x)
        for b in self.blocks:
            x = b(x)
        return self.ln_f(x)

    def backward(self, dy):
        if not self.blocks:
            return dy
        d = self.ln_f.backward(dy)
        for b in reversed(self.blocks):
            d = b.backward(d)
        return self.pos.backward(d)


# ---------------------------------------------------------------- model

@dataclass
class ModelConfig:
    n_t: int = 16
    n_users: int = 4
    n_subcarriers: int = 8
    t1: int = 16
    t2: int = 4
    patch: int = 4
    n_slots: int = 8
    p_max: float = 1.0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    enc_blocks: int = 3
    enc_heads: int = 4
    se_blocks: int = 3
    d_hidden: int | None = None
    vocab: int = 4096

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


class MultiTaskModel(Module):
    """Shared backbone, prompt table and one encoder/decoder pair per task."""

    def __init__(self, cfg: ModelConfig, rng, tasks: dict | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.backbone.d_model
        self.tasks = dict(tasks or DEFAULT_TASKS)
        ids = [s.identifier for s in self.tasks.values()]
        if len(set(ids)) != len(ids):
            raise ValidationError("task identifiers must be distinct")
        self.backbone = Backbone(cfg.backbone, rng.spawn(1))
        self.embedder = PromptEmbedder(cfg.vocab, d, rng.spawn(2))
        er, dr = rng.spawn(3), rng.spawn(4)
        self.encoders = {
            "CP": EncoderCp(cfg.t1, cfg.n_subcarriers, d, er, cfg.patch, cfg.se_blocks),
            "DET": EncoderDet(cfg.n_t, cfg.n_users, d, er, cfg.d_hidden),
            "PRE": EncoderPre(cfg.n_t, d, er, cfg.enc_blocks, cfg.enc_heads),
        }
        n_tok = self.encoders["CP"].n_tok
        self.decoders = {
            "CP": DecoderCp(n_tok, d, cfg.t2, cfg.n_subcarriers, dr, cfg.d_hidden),
            "DET": DecoderDet(d, cfg.n_users, dr, cfg.d_hidden),
            "PRE": DecoderPre(d, dr, cfg.p_max, cfg.d_hidden),
        }
        self._ids = {t: s.token_ids(cfg.vocab) for t, s in self.tasks.items()}

    def prompt_ids(self, task: str) -> list[int]:
        return self._ids[task]

    def forward(self, task: str, inputs: tuple, use_prompt: bool = True):
        """Run one task on a batch; ``inputs`` is the encoder's argument tuple."""
        if task not in self.encoders:
            raise ValidationError(f"unknown task {task!r}")
        enc, dec = self.encoders[task], self.decoders[task]
        data = enc(*inputs)
        lead = data.shape[:-2]
        n_p = len(self._ids[task])
        if use_prompt:
            prompt = self.embedder(self._ids[task])
        else:
            prompt = np.zeros((n_p, data.shape[-1]))
        x = np.concatenate([np.broadcast_to(prompt, (*lead, *prompt.shape)), data], axis=-2)
        out = self.backbone(x)[..., n_p:, :]
        self._ctx = (task, n_p, use_prompt, x.shape)
        if task == "CP":
            return dec(out, enc.stats)
        return dec(out)

    def backward(self, dy):
        task, n_p, use_prompt, shape = self._ctx
        d_out = self.decoders[task].backward(dy)
        dx = np.zeros(shape)
        dx[..., n_p:, :] = d_out
        dx = self.backbone.backward(dx)
        if use_prompt:
            dp = dx[..., :n_p, :].reshape(-1, n_p, shape[-1]).sum(axis=0)
            self.embedder.backward(dp)
        if task == "CP":
            return self.encoders[task].backward(dx[..., n_p:, :], self.decoders[task].dstats)
        return self.encoders[task].backward(dx[..., n_p:, :])

    def task_params(self, task: str):
        """Parameters touched by ``task``: its encoder/decoder, prompt table, adapters."""
        for name, p in self.named_params():
            head = name.split(".")[0]
            if head in ("encoders", "decoders"):
                if name.split(".")[1] == task:
                    yield name, p
            else:
                yield name, p
