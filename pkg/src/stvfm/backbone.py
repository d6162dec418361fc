"""Frozen vision-transformer stand-in with optional per-block adapters.

The "pretrained" weights are a seeded random pre-norm transformer whose
parameters never receive gradients.  Adapters (one per block, applied to the
attention output before its residual add) are the only trainable part.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ntc
from .autodiff import Tensor
from .nn import Adapter, Module, TransformerBlock


@dataclass
class BackboneConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    adapters_enabled: bool = False
    adapter_bottleneck: int | None = None  # dim // 4 when None
    seed: int = 1234
    zero_init_outputs: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"backbone depth must be >= 1, got {self.depth}")
        if self.dim % self.heads:
            raise ValueError(f"backbone dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def bottleneck(self) -> int:
        return self.adapter_bottleneck or max(1, self.dim // 4)


@dataclass
class FrozenReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


class Backbone(Module):
    def __init__(self, config: BackboneConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        out_std = (config.dim ** -0.5) / np.sqrt(2 * config.depth)
        self.blocks = [
            TransformerBlock(config.dim, config.heads, rng, out_std=out_std,
                             zero_out=config.zero_init_outputs)
            for _ in range(config.depth)
        ]
        for p in self.parameters():
            p.requires_grad = False
        if config.adapters_enabled:
            # separate stream so enabling adapters never changes the frozen weights
            arng = np.random.default_rng([config.seed, 1])
            for block in self.blocks:
                block.adapter = Adapter(config.dim, config.bottleneck, arng)

    def encode(self, tokens: Tensor) -> Tensor:
        """``[..., N_s, D]`` -> same shape; attention stays inside each frame."""
        if tokens.shape[-1] != self.config.dim:
            raise ad.ShapeError(f"backbone dim {self.config.dim} vs tokens {tokens.shape}")
        x = tokens
        for block in self.blocks:
            x = block(x)
        return x

    __call__ = encode

    def frozen_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if ".adapter." not in n]

    def adapter_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if ".adapter." in n]

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of every frozen tensor, keyed by name."""
        return {n: p.data.copy() for n, p in self.frozen_parameters()}


def assert_frozen(before: dict[str, np.ndarray], after: dict[str, np.ndarray] | Backbone) -> FrozenReport:
    """Bitwise comparison of frozen tensors; adapters are not part of a snapshot."""
    if isinstance(after, Backbone):
        after = {n: p.data for n, p in after.frozen_parameters()}
    report = FrozenReport()
    for name, value in before.items():
        other = after.get(name)
        if other is None or other.shape != value.shape or other.tobytes() != value.tobytes():
            report.violations.append(name)
    report.violations.extend(n for n in after if n not in before)
    return report


def save_weights(backbone: Backbone, path) -> None:
    tensors = [ntc.NamedTensor(n, p.data, frozen=not p.requires_grad)
               for n, p in backbone.named_parameters()]
    ntc.write(path, tensors, {"kind": "backbone", "config": asdict(backbone.config)})


def load_weights(path, config: BackboneConfig | None = None) -> Backbone:
    """Load a backbone; ``config`` (if given) must match every stored tensor shape."""
    tensors, meta = ntc.read(path)
    if config is None:
        config = BackboneConfig(**meta["config"])
    backbone = Backbone(config)
    assign(backbone, tensors)
    return backbone


def assign(module: Module, tensors: list[ntc.NamedTensor], strict: bool = True) -> None:
    """Copy stored tensors into ``module`` by name, checking shapes and frozen flags."""
    params = dict(module.named_parameters())
    stored = {t.name: t for t in tensors}
    if strict:
        missing = [n for n in params if n not in stored]
        extra = [n for n in stored if n not in params]
        if missing or extra:
            raise ntc.CheckpointError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        t = stored.get(name)
        if t is None:
            continue
        if t.value.shape != p.shape:
            raise ad.ShapeError(f"tensor '{name}': stored shape {t.value.shape} vs expected {p.shape}")
        if t.frozen == p.requires_grad:
            raise ntc.CheckpointError(f"tensor '{name}': frozen flag disagrees with the model")
        p.data = t.value.astype(p.dtype, copy=True)
