"""AdamW with decoupled weight decay over a registry of trainable tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
               lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> AdamState:
    """In-place update of ``params``; entries whose grad is ``None`` are skipped.

    ``p <- p*(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad for '{name}' has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer state for '{name}' has shape {m.shape}, param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params: dict[str, Tensor] = dict(named_params)
        frozen = [n for n, p in self.params.items() if not p.requires_grad]
        if frozen:
            raise ValueError(f"frozen tensors cannot be optimised: {frozen}")
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step({n: p.data for n, p in self.params.items()},
                   {n: p.grad for n, p in self.params.items()},
                   self.state, self.lr, self.betas, self.eps, self.weight_decay)
