"""Transformer building blocks on top of :mod:`stvfm.autodiff`.

All token tensors are ``[..., seq, dim]``; attention mixes along ``seq`` only,
so any leading axes act as independent batch items.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes flagged ``requires_grad`` at
    construction time (or frozen afterwards).  Registration order is the
    attribute assignment order, which fixes iteration order everywhere.
    """

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        # shared sub-modules are reported once, under their first name
        seen = set() if _seen is None else _seen
        own = vars(self).get("_param_names", ())
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and name in own:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(np.asarray(value, dtype=ad.get_default_dtype()), requires_grad=trainable)
        if "_param_names" not in vars(self):
            self._param_names: list[str] = []
        self._param_names.append(name)
        setattr(self, name, t)
        return t

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None, zero: bool = False):
        self.d_in, self.d_out = d_in, d_out
        w = np.zeros((d_in, d_out)) if zero else _normal(rng, (d_in, d_out), std or d_in ** -0.5)
        self.param("weight", w)
        if bias:
            self.param("bias", np.zeros(d_out))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return ad.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.param("weight", np.ones(dim))
        self.param("bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return ad.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = ad.transpose(x, (*range(k), k + 1, k, k + 2))
    return ad.reshape(x, (*lead, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention on already-projected ``q``, ``k``, ``v``.

    Returns the merged output ``[..., n, D]`` and the weights ``[..., heads, n, m]``.
    """
    dh = q.shape[-1] // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = ad.scale(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), dh ** -0.5)
    weights = ad.softmax(scores, axis=-1)
    return _merge_heads(ad.matmul(weights, vh)), weights


class MultiHeadAttention(Module):
    """Bias-free multi-head attention with projections ``W_Q, W_K, W_V, W_O``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_std: float | None = None,
                 zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        std = dim ** -0.5
        self.param("w_q", _normal(rng, (dim, dim), std))
        self.param("w_k", _normal(rng, (dim, dim), std))
        self.param("w_v", _normal(rng, (dim, dim), std))
        self.param("w_o", np.zeros((dim, dim)) if zero_out else _normal(rng, (dim, dim), out_std or std))

    def __call__(self, queries: Tensor, keys_values: Tensor | None = None,
                 return_weights: bool = False):
        kv = queries if keys_values is None else keys_values
        if queries.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ad.ShapeError(
                f"attention dim {self.dim} vs queries {queries.shape} / keys {kv.shape}"
            )
        q = ad.matmul(queries, self.w_q)
        k = ad.matmul(kv, self.w_k)
        v = ad.matmul(kv, self.w_v)
        out, weights = attend(q, k, v, self.heads)
        out = ad.matmul(out, self.w_o)
        return (out, weights) if return_weights else out


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None,
                 out_std: float | None = None, zero_out: bool = False):
        hidden = hidden or 4 * dim
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, std=out_std, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Adapter(Module):
    """Bottleneck residual adapter ``x + Up(gelu(Down(x)))``; identity at init."""

    def __init__(self, dim: int, bottleneck: int, rng: np.random.Generator):
        if bottleneck >= dim:
            raise ValueError(f"adapter bottleneck {bottleneck} must be < dim {dim}")
        self.down = Linear(dim, bottleneck, rng)
        self.up = Linear(bottleneck, dim, rng, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.up(ad.gelu(self.down(x))))


class TransformerBlock(Module):
    """Pre-norm encoder block: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))``.

    An optional adapter rewrites the attention output before its residual add.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_std: float | None = None,
                 zero_out: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, out_std=out_std, zero_out=zero_out)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng, out_std=out_std, zero_out=zero_out)
        self.adapter: Adapter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        a = self.attn(self.ln1(x))
        if self.adapter is not None:
            a = self.adapter(a)
        x = ad.add(x, a)
        return ad.add(x, self.ffn(self.ln2(x)))


def adapter_apply(attn_out: Tensor, adapter: Adapter) -> Tensor:
    return adapter(attn_out)
