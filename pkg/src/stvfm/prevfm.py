"""Temporal-aware token adapter: patch tokens -> temporal encoder -> backbone width.

Token tensors carry explicit axes.  Per frame layout is ``[B, T, N_s, d]``;
the temporal encoder works on ``[B, N_s, T, d]`` so its attention runs over T
independently for each spatial position.  Flattening ``[B, T, N_s, d]`` to
``[B, T*N_s, d]`` gives the frame-major row order ``t * N_s + n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, TransformerBlock


@dataclass(frozen=True)
class PatchLayout:
    """Spatial patching of an H x W grid with C channels into P_s x P_s patches."""

    height: int
    width: int
    channels: int
    patch: int = 2

    def __post_init__(self):
        if min(self.height, self.width, self.channels, self.patch) < 1:
            raise ValueError(f"invalid patch layout {self}")

    @property
    def rows(self) -> int:
        return -(-self.height // self.patch)

    @property
    def cols(self) -> int:
        return -(-self.width // self.patch)

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def padded(self) -> tuple[int, int]:
        return self.rows * self.patch, self.cols * self.patch


def patchify(frames, layout: PatchLayout) -> Tensor:
    """``[..., C, H, W]`` -> ``[..., N_s, P_s*P_s*C]`` (channel-major, then row-major).

    H and W are zero-padded at the bottom/right up to multiples of the patch size.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    *lead, C, H, W = x.shape
    if (C, H, W) != (layout.channels, layout.height, layout.width):
        raise ad.ShapeError(f"frames {x.shape} do not match layout {layout}")
    ph, pw = layout.padded
    if ph != H:
        x = ad.concat([x, ad.zeros((*lead, C, ph - H, W), dtype=x.dtype)], axis=-2)
    if pw != W:
        x = ad.concat([x, ad.zeros((*lead, C, ph, pw - W), dtype=x.dtype)], axis=-1)
    p, r, c, k = layout.patch, layout.rows, layout.cols, len(lead)
    x = ad.reshape(x, (*lead, C, r, p, c, p))
    # -> [..., r, c, C, p, p]
    x = ad.transpose(x, (*range(k), k + 1, k + 3, k, k + 2, k + 4))
    return ad.reshape(x, (*lead, r * c, layout.token_dim))


def unpatchify(tokens: Tensor, layout: PatchLayout) -> Tensor:
    """Exact inverse of :func:`patchify`; padding is stripped."""
    *lead, n, d = tokens.shape
    if n != layout.n_tokens or d != layout.token_dim:
        raise ad.ShapeError(
            f"tokens {tokens.shape} do not match layout ({layout.n_tokens}, {layout.token_dim})"
        )
    p, r, c, C, k = layout.patch, layout.rows, layout.cols, layout.channels, len(lead)
    x = ad.reshape(tokens, (*lead, r, c, C, p, p))
    # -> [..., C, r, p, c, p]
    x = ad.transpose(x, (*range(k), k + 2, k, k + 3, k + 1, k + 4))
    x = ad.reshape(x, (*lead, C, r * p, c * p))
    if (r * p, c * p) != (layout.height, layout.width):
        x = ad.slice_(x, (Ellipsis, slice(0, layout.height), slice(0, layout.width)))
    return x


class TemporalContextEncoder(Module):
    """Linear projection to D_T, learned step embeddings, then self-attention over T."""

    def __init__(self, token_dim: int, dim: int, blocks: int, heads: int, max_steps: int,
                 rng: np.random.Generator):
        self.max_steps = max_steps
        self.proj = Linear(token_dim, dim, rng)
        self.param("step_embed", rng.normal(0.0, 0.02, size=(max_steps, dim)))
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(blocks)]

    def __call__(self, tokens: Tensor) -> Tensor:
        """``[B, T, N_s, d]`` -> ``[B, N_s, T, D_T]``."""
        B, T, N, _ = tokens.shape
        if T > self.max_steps:
            raise ad.ShapeError(f"sequence of {T} steps exceeds encoder capacity {self.max_steps}")
        z = ad.transpose(self.proj(tokens), (0, 2, 1, 3))
        steps = ad.slice_(self.step_embed, (slice(0, T),))
        z = ad.add(z, ad.broadcast_to(steps, z.shape))
        for block in self.blocks:
            z = block(z)
        return z


def temporal_context_encode(tokens: Tensor, encoder: TemporalContextEncoder) -> Tensor:
    return encoder(tokens)


def token_adapt(z: Tensor, w_adapt: Tensor) -> Tensor:
    """``[B, N_s, T, D_T]`` -> ``[B, T, N_s, D_VFM]`` via one linear map (no bias)."""
    if z.shape[-1] != w_adapt.shape[0]:
        raise ad.ShapeError(f"token_adapt: features {z.shape} vs W_adapt {w_adapt.shape}")
    return ad.matmul(ad.transpose(z, (0, 2, 1, 3)), w_adapt)


def add_positional(z: Tensor, pos: Tensor) -> Tensor:
    """Add one embedding per spatial token, repeated for every frame of ``[B, T, N_s, D]``."""
    if pos.shape != z.shape[-2:]:
        raise ad.ShapeError(f"positional embedding {pos.shape} vs tokens {z.shape}")
    return ad.add(z, ad.broadcast_to(pos, z.shape))


class BranchTokenizer(Module):
    """Everything before the backbone for one branch (ST or flow)."""

    def __init__(self, layout: PatchLayout, d_vfm: int, rng: np.random.Generator,
                 temporal: bool = True, d_temporal: int = 64, blocks: int = 3, heads: int = 4,
                 max_steps: int = 6):
        self.layout = layout
        self.encoder = (TemporalContextEncoder(layout.token_dim, d_temporal, blocks, heads,
                                               max_steps, rng) if temporal else None)
        d_in = d_temporal if temporal else layout.token_dim
        self.param("w_adapt", rng.normal(0.0, d_in ** -0.5, size=(d_in, d_vfm)))
        self.param("pos", rng.normal(0.0, 0.02, size=(layout.n_tokens, d_vfm)))

    def __call__(self, frames) -> Tensor:
        """``[B, T, C, H, W]`` -> backbone-ready ``[B, T, N_s, D_VFM]``."""
        tokens = patchify(frames, self.layout)
        if self.encoder is not None:
            z = token_adapt(self.encoder(tokens), self.w_adapt)
        else:
            z = ad.matmul(tokens, self.w_adapt)
        return add_positional(z, self.pos)
