"""The full dual-branch forecaster and its ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig
from .nn import Module
from .postvfm import (Coordination, CoordinationConfig, MLPDecoder, OutputHead, TemporalDecoder)
from .prevfm import BranchTokenizer, PatchLayout


@dataclass
class ModelConfig:
    patch: int = 2
    temporal_patch: int = 1
    d_temporal: int = 64
    temporal_blocks: int = 3
    temporal_heads: int = 4
    coord_layers: int = 2
    prompt_len: int = 4
    coord_heads: int = 4
    decoder: str = "transformer"
    decoder_blocks: int = 3
    decoder_heads: int = 4
    mlp_hidden: int = 256
    use_vfm: bool = True
    use_temporal_encoder: bool = True
    use_adapters: bool = True
    use_flow_branch: bool = True
    use_cross_prompt: bool = True
    share_branch_weights: bool = False
    reextract_prompts: bool = True
    synchronous_update: bool = True
    zero_init_prompt_proj: bool = True
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.patch < 1:
            errors.append(f"patch must be >= 1, got {self.patch}")
        if self.temporal_patch != 1:
            errors.append("temporal_patch is reserved; only 1 (spatial-only patching) is supported")
        if self.decoder not in ("transformer", "mlp"):
            errors.append(f"decoder must be 'transformer' or 'mlp', got {self.decoder!r}")
        if self.use_cross_prompt and not self.use_flow_branch:
            errors.append("use_cross_prompt requires use_flow_branch")
        if self.use_cross_prompt and self.coord_layers < 1:
            errors.append("coord_layers must be >= 1")
        if self.prompt_len < 0:
            errors.append("prompt_len must be >= 0")
        return errors


# Ablation ladder: each step adds one component on top of the previous one.
VARIANTS: dict[str, dict] = {
    "1": dict(decoder="mlp", use_temporal_encoder=False, use_adapters=False,
              use_flow_branch=False, use_cross_prompt=False),
    "2": dict(decoder="transformer", use_temporal_encoder=False, use_adapters=False,
              use_flow_branch=False, use_cross_prompt=False),
    "3": dict(decoder="transformer", use_temporal_encoder=True, use_adapters=False,
              use_flow_branch=False, use_cross_prompt=False),
    "4": dict(decoder="transformer", use_temporal_encoder=True, use_adapters=True,
              use_flow_branch=False, use_cross_prompt=False),
    "full": dict(decoder="transformer", use_temporal_encoder=True, use_adapters=True,
                 use_flow_branch=True, use_cross_prompt=True),
}


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    key = variant.lstrip("#").lower()
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(config, **VARIANTS[key])


GROUPS = ("tokenizer", "temporal_encoder", "backbone", "adapters", "prompts", "decoder", "heads")


def parameter_group(name: str) -> str:
    if name.startswith("backbone."):
        return "adapters" if ".adapter." in name else "backbone"
    if ".encoder." in name and name.split(".")[0] in ("st_tok", "flow_tok"):
        return "temporal_encoder"
    if name.startswith(("st_tok.", "flow_tok.")):
        return "tokenizer"
    if name.startswith("coord."):
        return "prompts"
    if name.startswith(("st_dec.", "flow_dec.")):
        return "decoder"
    if name.startswith(("st_head.", "flow_head.")):
        return "heads"
    raise KeyError(name)


class STVFM(Module):
    """Dual-branch forecaster around a shared frozen backbone.

    ``forward`` takes normalised history frames ``[B, P, C, H, W]`` (and the
    matching flow frames) and returns ``(st_pred, flow_pred)`` of shape
    ``[B, Q, C, H, W]``; ``flow_pred`` is ``None`` without the flow branch.
    """

    def __init__(self, config: ModelConfig, backbone_config: BackboneConfig, layout: PatchLayout,
                 P: int, Q: int):
        errors = config.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.config, self.layout, self.P, self.Q = config, layout, P, Q
        self.backbone_config = replace(backbone_config, adapters_enabled=config.use_adapters)
        D = self.backbone_config.dim
        rng = np.random.default_rng(config.seed)

        def tokenizer():
            return BranchTokenizer(layout, D, rng, temporal=config.use_temporal_encoder,
                                   d_temporal=config.d_temporal, blocks=config.temporal_blocks,
                                   heads=config.temporal_heads, max_steps=P)

        def decoder():
            if config.decoder == "mlp":
                return MLPDecoder(D, Q, P, config.mlp_hidden, rng)
            return TemporalDecoder(D, Q, P, config.decoder_blocks, config.decoder_heads, rng)

        self.st_tok = tokenizer()
        if config.use_flow_branch:
            self.flow_tok = self.st_tok if config.share_branch_weights else tokenizer()
        self.backbone = Backbone(self.backbone_config)
        if config.use_cross_prompt:
            self.coord = Coordination(D, CoordinationConfig(
                layers=config.coord_layers, prompt_len=config.prompt_len, heads=config.coord_heads,
                reextract=config.reextract_prompts, synchronous=config.synchronous_update,
                zero_prompt_proj=config.zero_init_prompt_proj), rng)
        self.st_dec = decoder()
        self.st_head = OutputHead(D, layout, rng)
        if config.use_flow_branch:
            self.flow_dec = decoder()
            self.flow_head = OutputHead(D, layout, rng)

    # -- parameter registry --------------------------------------------------

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for name, _ in self.named_parameters():
            out[parameter_group(name)].append(name)
        return out

    # -- forward -------------------------------------------------------------

    def encode(self, hist, flow_hist=None) -> tuple[Tensor, Tensor | None]:
        """Pre-VFM, backbone and coordination; returns ``[B, T, N_s, D]`` features."""
        cfg = self.config
        st = self.st_tok(hist)
        flow = self.flow_tok(flow_hist) if cfg.use_flow_branch else None
        if cfg.use_vfm:
            if flow is None:
                st = self.backbone.encode(st)
            else:
                B = st.shape[0]
                both = self.backbone.encode(ad.concat([st, flow], axis=0))
                st, flow = both[:B], both[B:]
        if cfg.use_cross_prompt:
            st, flow = self.coord(st, flow)
        return st, flow

    def forward(self, hist, flow_hist=None) -> tuple[Tensor, Tensor | None]:
        hist = np.asarray(hist)
        if hist.ndim != 5 or hist.shape[1] != self.P:
            raise ad.ShapeError(f"expected history [B, {self.P}, C, H, W], got {hist.shape}")
        if self.config.use_flow_branch and flow_hist is None:
            raise ValueError("the flow branch needs flow_hist")
        dtype = self.st_head.proj.weight.dtype
        hist = hist.astype(dtype, copy=False)
        if flow_hist is not None:
            flow_hist = np.asarray(flow_hist).astype(dtype, copy=False)
        st, flow = self.encode(hist, flow_hist)
        st_pred = self.st_head(self.st_dec(ad.transpose(st, (0, 2, 1, 3))))
        flow_pred = None
        if flow is not None:
            flow_pred = self.flow_head(self.flow_dec(ad.transpose(flow, (0, 2, 1, 3))))
        return st_pred, flow_pred

    __call__ = forward

    def describe(self) -> dict:
        return {
            "model": asdict(self.config),
            "backbone": asdict(self.backbone_config),
            "layout": asdict(self.layout),
            "P": self.P,
            "Q": self.Q,
        }


def build_model(description: dict) -> STVFM:
    """Rebuild a model from :meth:`STVFM.describe` output."""
    return STVFM(_from_dict(ModelConfig, description["model"]),
                 _from_dict(BackboneConfig, description["backbone"]),
                 PatchLayout(**description["layout"]), description["P"], description["Q"])


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})
