"""Bilateral cross-prompt coordination, temporal decoder and output heads.

Cross-prompt attention extends a branch's key/value set with prompt tokens
pooled from the *other* branch and normalises over both supports jointly::

    A[i, j] = exp(q_i . s_j) / (sum_k exp(q_i . K_k) + sum_k exp(q_i . P_k))

where ``s_j`` ranges over the m token keys followed by the L_p prompt keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, attend, _normal
from .prevfm import PatchLayout, unpatchify


@dataclass
class PromptSet:
    values: Tensor | None  # [B, L_p, D], None when L_p == 0
    source: str

    def __len__(self) -> int:
        return 0 if self.values is None else self.values.shape[-2]


class PromptPool(Module):
    """L_p learned queries attention-pool a branch's feature tokens into prompts."""

    def __init__(self, dim: int, length: int, rng: np.random.Generator):
        self.dim, self.length = dim, length
        if length:
            self.param("queries", rng.normal(0.0, 1.0, size=(length, dim)))
            self.param("w_k", _normal(rng, (dim, dim), dim ** -0.5))
            self.param("w_v", _normal(rng, (dim, dim), dim ** -0.5))


def extract_prompts(features: Tensor, pool: PromptPool, source: str = "") -> PromptSet:
    """``features [B, ..., D]`` -> ``[B, L_p, D]``; pooling spans every token of an instance."""
    if pool.length == 0:
        return PromptSet(None, source)
    if features.ndim < 3:
        raise ad.ShapeError(f"expected batched features [B, ..., D], got {features.shape}")
    B, D = features.shape[0], features.shape[-1]
    if features.ndim != 3:
        features = ad.reshape(features, (B, -1, D))
    if D != pool.dim:
        raise ad.ShapeError(f"prompt pool dim {pool.dim} vs features {features.shape}")
    q = ad.broadcast_to(pool.queries, (B, pool.length, D))
    k = ad.matmul(features, pool.w_k)
    v = ad.matmul(features, pool.w_v)
    weights = ad.softmax(ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), D ** -0.5), axis=-1)
    return PromptSet(ad.matmul(weights, v), source)


class CrossPromptAttention(MultiHeadAttention):
    """Multi-head attention whose keys/values are extended by projected prompts.

    ``w_pk``/``w_pv`` project prompts to keys/values.  Both start at zero, so a
    fresh layer ignores the other branch (constant prompt logits, zero values).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_prompt_proj: bool = True):
        super().__init__(dim, heads, rng)
        shape = (dim, dim)
        self.param("w_pk", np.zeros(shape) if zero_prompt_proj else _normal(rng, shape, dim ** -0.5))
        self.param("w_pv", np.zeros(shape) if zero_prompt_proj else _normal(rng, shape, dim ** -0.5))

    def __call__(self, tokens: Tensor, prompts: PromptSet | None = None, return_weights: bool = False):
        if tokens.shape[-1] != self.dim:
            raise ad.ShapeError(f"attention dim {self.dim} vs tokens {tokens.shape}")
        q = ad.matmul(tokens, self.w_q)
        k = ad.matmul(tokens, self.w_k)
        v = ad.matmul(tokens, self.w_v)
        if prompts is not None and len(prompts):
            p = prompts.values
            lead, nl = p.shape[:-2], p.ndim - 2
            if p.shape[-1] != self.dim or p.ndim > tokens.ndim or tokens.shape[:nl] != lead:
                raise ad.ShapeError(f"prompts {p.shape} do not fit tokens {tokens.shape}")
            if p.ndim < tokens.ndim:
                # the same prompts serve every frame of an instance
                mid = tokens.shape[nl:-2]
                p = ad.reshape(p, (*lead, *(1,) * len(mid), *p.shape[-2:]))
                p = ad.broadcast_to(p, (*lead, *mid, *p.shape[-2:]))
            k = ad.concat([k, ad.matmul(p, self.w_pk)], axis=-2)
            v = ad.concat([v, ad.matmul(p, self.w_pv)], axis=-2)
        out, weights = attend(q, k, v, self.heads)
        out = ad.matmul(out, self.w_o)
        return (out, weights) if return_weights else out


def cross_prompt_attend(tokens: Tensor, other_prompts: PromptSet, attn: CrossPromptAttention,
                        return_weights: bool = False):
    return attn(tokens, other_prompts, return_weights=return_weights)


@dataclass
class CoordinationConfig:
    layers: int = 2
    prompt_len: int = 4
    heads: int = 4
    reextract: bool = True
    synchronous: bool = True
    zero_prompt_proj: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"coordination needs >= 1 layer, got {self.layers}")


class BranchLayer(Module):
    """Half of a coordination layer: one branch attending with the other's prompts."""

    def __init__(self, dim: int, cfg: CoordinationConfig, rng: np.random.Generator):
        self.pool = PromptPool(dim, cfg.prompt_len, rng)
        self.ln1 = LayerNorm(dim)
        self.attn = CrossPromptAttention(dim, cfg.heads, rng, cfg.zero_prompt_proj)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def __call__(self, x: Tensor, prompts: PromptSet) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), prompts))
        return ad.add(x, self.ffn(self.ln2(x)))


class Coordination(Module):
    def __init__(self, dim: int, cfg: CoordinationConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.st_layers = [BranchLayer(dim, cfg, rng) for _ in range(cfg.layers)]
        self.flow_layers = [BranchLayer(dim, cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, st: Tensor, flow: Tensor) -> tuple[Tensor, Tensor]:
        return coordinate(st, flow, self)


def coordinate(st: Tensor, flow: Tensor, coord: Coordination) -> tuple[Tensor, Tensor]:
    """Stacked bilateral updates of both branches.

    Features are ``[B, m, D]`` or frame-batched ``[B, T, N_s, D]``; attention
    runs over the second-to-last axis, prompts pool over the whole instance.
    """
    if st.shape != flow.shape:
        raise ad.ShapeError(f"branch shapes differ: {st.shape} vs {flow.shape}")
    cfg = coord.cfg
    p_st = p_flow = None
    for i, (st_layer, flow_layer) in enumerate(zip(coord.st_layers, coord.flow_layers)):
        if cfg.reextract or i == 0:
            p_st = extract_prompts(st, st_layer.pool, "st")
            p_flow = extract_prompts(flow, flow_layer.pool, "flow")
        new_st = st_layer(st, p_flow)
        if not cfg.synchronous and cfg.reextract:
            p_st = extract_prompts(new_st, st_layer.pool, "st")
        flow = flow_layer(flow, p_st)
        st = new_st
    return st, flow


class TemporalDecoder(Module):
    """Q learned queries cross-attend over each position's T history features.

    Each block is ``x + Attn(LN(x), LN(mem))`` then ``x + FFN(LN(x))``; history
    features receive learned step embeddings first.
    """

    def __init__(self, dim: int, horizon: int, history: int, blocks: int, heads: int,
                 rng: np.random.Generator):
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        self.horizon, self.history = horizon, history
        self.param("queries", rng.normal(0.0, 1.0, size=(horizon, dim)))
        self.param("step_embed", rng.normal(0.0, 0.02, size=(history, dim)))
        self.blocks = [_DecoderBlock(dim, heads, rng) for _ in range(blocks)]
        self.ln_out = LayerNorm(dim)

    def __call__(self, hist: Tensor) -> Tensor:
        return decode_future(hist, self)


class _DecoderBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln_q = LayerNorm(dim)
        self.ln_mem = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def __call__(self, x: Tensor, mem: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.ln_q(x), self.ln_mem(mem)))
        return ad.add(x, self.ffn(self.ln2(x)))


def decode_future(hist: Tensor, dec: TemporalDecoder) -> Tensor:
    """``[B, N_s, T, D]`` history -> ``[B, N_s, Q, D]`` future representations."""
    B, N, T, D = hist.shape
    if T == 0:
        raise ad.ShapeError("decoder needs at least one history step")
    if T > dec.history:
        raise ad.ShapeError(f"history of {T} steps exceeds decoder capacity {dec.history}")
    steps = ad.slice_(dec.step_embed, (slice(0, T),))
    mem = ad.add(hist, ad.broadcast_to(steps, hist.shape))
    x = ad.broadcast_to(dec.queries, (B, N, dec.horizon, D))
    for block in dec.blocks:
        x = block(x, mem)
    return dec.ln_out(x)


class MLPDecoder(Module):
    """Per-position MLP from the flattened history to Q future representations."""

    def __init__(self, dim: int, horizon: int, history: int, hidden: int, rng: np.random.Generator):
        self.dim, self.horizon, self.history = dim, horizon, history
        self.fc1 = Linear(history * dim, hidden, rng)
        self.fc2 = Linear(hidden, horizon * dim, rng)

    def __call__(self, hist: Tensor) -> Tensor:
        B, N, T, D = hist.shape
        if T != self.history:
            raise ad.ShapeError(f"MLP decoder expects {self.history} steps, got {T}")
        h = self.fc2(ad.gelu(self.fc1(ad.reshape(hist, (B, N, T * D)))))
        return ad.reshape(h, (B, N, self.horizon, D))


class OutputHead(Module):
    """Linear map D -> P_s*P_s*C per token, then unpatchify to frames."""

    def __init__(self, dim: int, layout: PatchLayout, rng: np.random.Generator):
        self.layout = layout
        self.proj = Linear(dim, layout.token_dim, rng)

    def __call__(self, future: Tensor) -> Tensor:
        return head_project(future, self)


def head_project(future: Tensor, head: OutputHead) -> Tensor:
    """``[B, N_s, Q, D]`` -> predicted frames ``[B, Q, C, H, W]``."""
    tokens = ad.transpose(head.proj(future), (0, 2, 1, 3))
    return unpatchify(tokens, head.layout)
