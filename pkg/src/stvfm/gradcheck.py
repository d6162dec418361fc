"""Finite-difference verification of every primitive, block and the full pipeline.

All checks run in float64 with central differences (h = 1e-4).  Each check
returns the worst relative error over the inspected coordinates of the input
and of every trainable parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .backbone import Backbone, BackboneConfig
from .model import STVFM, ModelConfig
from .nn import Adapter, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock
from .postvfm import (Coordination, CoordinationConfig, CrossPromptAttention, MLPDecoder,
                      OutputHead, PromptPool, TemporalDecoder, extract_prompts)
from .prevfm import BranchTokenizer, PatchLayout, TemporalContextEncoder, token_adapt

TOLERANCE = 1e-4
SCOPES = ("primitives", "blocks", "end2end")


@dataclass
class GradResult:
    scope: str
    name: str
    error: float
    checked: int
    tol: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return bool(self.error < self.tol)


def t64(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def project(y: Tensor, seed: int = 0) -> Tensor:
    """Scalarise with a fixed random projection so every output coordinate matters."""
    r = np.random.default_rng(seed).normal(size=y.shape)
    return ad.sum_(ad.mul(y, Tensor(r)))


# -- primitives -------------------------------------------------------------------

def _shape(rng, lo=1, hi=4, rank=None):
    rank = int(rng.integers(1, 4)) if rank is None else rank
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=rank))


def primitive_case(name: str, rng: np.random.Generator) -> tuple[Callable[[Tensor], Tensor], Tensor]:
    """``(f, x)`` for one seeded random instance of primitive ``name``."""
    if name == "matmul":
        n, k, p = (int(v) for v in rng.integers(1, 5, size=3))
        lead = _shape(rng, rank=int(rng.integers(0, 3))) if rng.random() < 0.6 else ()
        other = t64(rng.normal(size=(*lead, k, p) if rng.random() < 0.5 else (k, p)))
        x = t64(rng.normal(size=(*lead, n, k)))
        if rng.random() < 0.5:
            return (lambda v: project(ad.matmul(v, other))), x
        lhs = t64(rng.normal(size=(*lead, n, k)))
        return (lambda v: project(ad.matmul(lhs, v))), t64(rng.normal(size=(k, p)))
    shape = _shape(rng)
    x = t64(rng.normal(size=shape))
    other = t64(rng.normal(size=shape))
    bias = t64(rng.normal(size=shape[-1:]))
    axis = int(rng.integers(0, len(shape)))
    if name == "add":
        return (lambda v: project(ad.add(ad.add(v, other), bias))), x
    if name == "add_bias_operand":
        return (lambda v: project(ad.add(other, v))), bias
    if name == "sub":
        return (lambda v: project(ad.sub(other, v))), x
    if name == "mul":
        return (lambda v: project(ad.mul(v, other))), x
    if name == "scale":
        return (lambda v: project(ad.scale(v, -2.5))), x
    if name == "concat":
        return (lambda v: project(ad.concat([other, v, other], axis=axis))), x
    if name == "reshape":
        return (lambda v: project(ad.reshape(v, (-1,)))), x
    if name == "transpose":
        perm = tuple(int(i) for i in rng.permutation(len(shape)))
        return (lambda v: project(ad.transpose(v, perm))), x
    if name == "slice":
        idx = tuple(slice(0, max(1, d - 1)) for d in shape)
        return (lambda v: project(ad.slice_(v, idx))), x
    if name == "sum":
        return (lambda v: project(ad.sum_(v, axis=axis, keepdims=True))), x
    if name == "mean":
        return (lambda v: project(ad.mean(v, axis=axis))), x
    if name == "softmax":
        return (lambda v: project(ad.softmax(v, axis=axis))), x
    if name in ("layer_norm", "layer_norm_weight"):
        d = shape[-1] + 1
        xs = t64(rng.normal(size=(*shape[:-1], d)))
        w = t64(rng.normal(size=(d,)))
        b = t64(rng.normal(size=(d,)))
        if name == "layer_norm":
            return (lambda v: project(ad.layer_norm(v, w, b))), xs
        return (lambda v: project(ad.layer_norm(xs, v, b))), w
    if name == "gelu":
        return (lambda v: project(ad.gelu(v))), x
    if name == "exp":
        return (lambda v: project(ad.exp(v))), x
    if name == "square":
        return (lambda v: project(ad.square(v))), x
    if name == "sqrt":
        return (lambda v: project(ad.sqrt(v))), t64(rng.uniform(0.5, 3.0, size=shape))
    if name == "broadcast_to":
        small = t64(rng.normal(size=(1, *shape[1:])))
        return (lambda v: project(ad.broadcast_to(v, (2, 3, *shape)))), small
    raise KeyError(name)


PRIMITIVES = (
    "matmul", "add", "add_bias_operand", "sub", "mul", "scale", "concat", "reshape",
    "transpose", "slice", "sum", "mean", "softmax", "layer_norm", "layer_norm_weight",
    "gelu", "exp", "square", "sqrt", "broadcast_to",
)


def check_primitive(name: str, cases: int = 20, seed: int = 0) -> GradResult:
    worst, checked = 0.0, 0
    for i in range(cases):
        rng = np.random.default_rng([seed, PRIMITIVES.index(name), i])
        f, x = primitive_case(name, rng)
        worst = max(worst, finite_diff_check(f, x))
        checked += x.data.size
    return GradResult("primitives", name, worst, checked)


# -- modules ------------------------------------------------------------------------

def _activate(module: Module, rng: np.random.Generator, std: float = 0.3) -> None:
    """Replace all-zero trainable tensors by noise so every gradient path is live."""
    for _, p in module.named_parameters():
        if p.requires_grad and not p.data.any():
            p.data = rng.normal(0.0, std, size=p.shape)


def check_module(loss: Callable[[], Tensor], inputs: list[tuple[str, Tensor]],
                 max_coords: int | None = 6, seed: int = 0) -> tuple[float, int, str]:
    """Worst FD error of ``loss()`` w.r.t. each tensor; returns ``(error, coords, worst_name)``."""
    rng = np.random.default_rng(seed)
    worst, count, where = 0.0, 0, ""
    for name, t in inputs:
        n = t.data.size
        coords = None
        if max_coords is not None and n > max_coords:
            coords = sorted(int(i) for i in rng.choice(n, size=max_coords, replace=False))
        err = finite_diff_check(lambda _x: loss(), t, coords=coords)
        count += n if coords is None else len(coords)
        if err >= worst:
            worst, where = err, name
    return worst, count, where


def _block_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple]]:
    D, H = 8, 2

    def lin():
        m = Linear(D, 5, rng)
        _activate(m, rng)
        x = t64(rng.normal(size=(2, 3, D)))
        return m, x, lambda: project(m(x))

    def ln():
        m = LayerNorm(D)
        m.weight.data = rng.normal(size=D)
        m.bias.data = rng.normal(size=D)
        x = t64(rng.normal(size=(2, 3, D)))
        return m, x, lambda: project(m(x))

    def mha():
        m = MultiHeadAttention(D, H, rng)
        x = t64(rng.normal(size=(2, 4, D)))
        kv = t64(rng.normal(size=(2, 5, D)))
        return m, x, lambda: project(m(x, kv))

    def ffn():
        m = FeedForward(D, rng)
        x = t64(rng.normal(size=(2, 3, D)))
        return m, x, lambda: project(m(x))

    def adapter():
        m = Adapter(D, 2, rng)
        _activate(m, rng)
        x = t64(rng.normal(size=(2, 3, D)))
        return m, x, lambda: project(m(x))

    def block():
        m = TransformerBlock(D, H, rng)
        m.adapter = Adapter(D, 2, rng)
        _activate(m, rng)
        x = t64(rng.normal(size=(2, 4, D)))
        return m, x, lambda: project(m(x))

    def backbone():
        m = Backbone(BackboneConfig(depth=2, dim=D, heads=H, adapters_enabled=True, seed=3))
        _activate(m, rng)
        x = t64(rng.normal(size=(1, 2, 4, D)))
        return m, x, lambda: project(m(x))

    def temporal_encoder():
        m = TemporalContextEncoder(4, D, 2, H, 3, rng)
        x = t64(rng.normal(size=(1, 3, 4, 4)))
        return m, x, lambda: project(m(x))

    def token_adaptation():
        m = Module()
        m.param("w_adapt", rng.normal(size=(D, 6)))
        x = t64(rng.normal(size=(2, 4, 3, D)))
        return m, x, lambda: project(token_adapt(x, m.w_adapt))

    def tokenizer():
        layout = PatchLayout(4, 4, 1, 2)
        m = BranchTokenizer(layout, D, rng, d_temporal=D, blocks=1, heads=H, max_steps=2)
        x = t64(rng.normal(size=(1, 2, 1, 4, 4)))
        return m, x, lambda: project(m(x))

    def prompt_pool():
        m = PromptPool(D, 3, rng)
        x = t64(rng.normal(size=(2, 5, D)))
        return m, x, lambda: project(extract_prompts(x, m).values)

    def cross_prompt():
        m = CrossPromptAttention(D, H, rng, zero_prompt_proj=False)
        pool = PromptPool(D, 2, rng)
        x = t64(rng.normal(size=(2, 4, D)))
        other = t64(rng.normal(size=(2, 3, D)))
        m.pool = pool
        return m, x, lambda: project(m(x, extract_prompts(other, pool)))

    def coordination():
        m = Coordination(D, CoordinationConfig(layers=2, prompt_len=2, heads=H), rng)
        _activate(m, rng)
        x = t64(rng.normal(size=(1, 2, 3, D)))
        flow = t64(rng.normal(size=(1, 2, 3, D)))
        return m, x, lambda: project(ad.concat(list(m(x, flow)), axis=0))

    def decoder():
        m = TemporalDecoder(D, 2, 3, 2, H, rng)
        x = t64(rng.normal(size=(1, 2, 3, D)))
        return m, x, lambda: project(m(x))

    def mlp_decoder():
        m = MLPDecoder(D, 2, 3, 6, rng)
        x = t64(rng.normal(size=(1, 2, 3, D)))
        return m, x, lambda: project(m(x))

    def head():
        m = OutputHead(D, PatchLayout(3, 5, 2, 2), rng)
        x = t64(rng.normal(size=(1, 6, 2, D)))
        return m, x, lambda: project(m(x))

    return {f.__name__: f for f in (lin, ln, mha, ffn, adapter, block, backbone, temporal_encoder,
                                    token_adaptation, tokenizer, prompt_pool, cross_prompt,
                                    coordination, decoder, mlp_decoder, head)}


BLOCKS = ("lin", "ln", "mha", "ffn", "adapter", "block", "backbone", "temporal_encoder",
          "token_adaptation", "tokenizer", "prompt_pool", "cross_prompt", "coordination",
          "decoder", "mlp_decoder", "head")


def check_block(name: str, seed: int = 0, max_coords: int | None = 6) -> GradResult:
    with ad.default_dtype(np.float64):
        rng = np.random.default_rng([seed, BLOCKS.index(name)])
        module, x, loss = _block_cases(rng)[name]()
        tensors = [("input", x)] + [(n, p) for n, p in module.named_parameters() if p.requires_grad]
        err, count, where = check_module(loss, tensors, max_coords, seed)
    return GradResult("blocks", f"{name} (worst: {where})", err, count)


# -- end to end -------------------------------------------------------------------

def micro_model(seed: int = 0, **overrides) -> STVFM:
    """C=1, H=W=4, P=Q=2, D=8, L_p=2, every flag on, float64."""
    cfg = ModelConfig(d_temporal=8, temporal_blocks=1, temporal_heads=2, coord_layers=2,
                      prompt_len=2, coord_heads=2, decoder_blocks=1, decoder_heads=2, seed=seed,
                      **overrides)
    with ad.default_dtype(np.float64):
        return STVFM(cfg, BackboneConfig(depth=2, dim=8, heads=2, seed=seed + 1),
                     PatchLayout(4, 4, 1, 2), 2, 2)


def check_end_to_end(seed: int = 0, lam: float = 0.7, max_coords: int | None = 4) -> GradResult:
    from .train import loss_flow, loss_st, total_loss

    with ad.default_dtype(np.float64):
        model = micro_model(seed)
        rng = np.random.default_rng(seed + 100)
        _activate(model, rng, std=0.2)
        hist = t64(rng.normal(size=(2, 2, 1, 4, 4)))
        flow = t64(rng.normal(size=(2, 2, 1, 4, 4)))
        y = rng.normal(size=(2, 2, 1, 4, 4))
        fy = rng.normal(size=(2, 2, 1, 4, 4))

        def loss():
            st_pred, flow_pred = model(hist.data, flow.data)
            return total_loss(loss_st(st_pred, y), loss_flow(flow_pred, fy), lam)

        # inputs enter as arrays, so check trainable tensors; frozen ones get none
        tensors = [(n, p) for n, p in model.trainable()]
        err, count, where = check_module(loss, tensors, max_coords, seed)
    return GradResult("end2end", f"micro pipeline (worst: {where})", err, count)


def run(scope: str, seed: int = 0) -> list[GradResult]:
    if scope == "primitives":
        return [check_primitive(n, seed=seed) for n in PRIMITIVES]
    if scope == "blocks":
        return [check_block(n, seed=seed) for n in BLOCKS]
    if scope == "end2end":
        return [check_end_to_end(seed=seed)]
    raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")


def format_report(results: list[GradResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{status:4s} {r.scope:10s} {r.name:40s} max_rel_err={r.error:.3e} coords={r.checked}")
    failed = [r.name for r in results if not r.ok]
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed"
                 + (f"; failing: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
