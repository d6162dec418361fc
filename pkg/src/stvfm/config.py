"""JSON run configuration: validation, defaults and the desk-scale presets."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .gridio import SplitSpec, STGrid, SynthParams, load_grid, synthesize
from .model import VARIANTS, ModelConfig, apply_variant
from .train import TrainConfig

SEED_ENV = "STVFM_SEED"


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid run config:\n  " + "\n  ".join(errors))


@dataclass
class DataConfig:
    path: str | None = None
    synthetic: str | None = None  # advection | diffusion | periodic
    synth_params: dict = field(default_factory=dict)
    synth_seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: str | None = None
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train["lambda"] = train.pop("lam")
        train["betas"] = list(train["betas"])
        train.pop("seed")
        model = asdict(self.model)
        model.pop("seed")
        return {"data": asdict(self.data), "split": asdict(self.split), "train": train,
                "model": model, "backbone": asdict(self.backbone), "variant": self.variant,
                "seed": self.seed, "output_dir": self.output_dir}

    def load_data(self) -> STGrid:
        if self.data.path:
            return load_grid(self.data.path)
        return synthesize(self.data.synthetic, SynthParams(**self.data.synth_params), self.data.synth_seed)


def _section(cls, raw, name: str, errors: list[str], rename=None, exclude=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected an object, got {type(raw).__name__}")
        return None
    rename = rename or {}
    allowed = {f.name for f in fields(cls)} - set(exclude)
    kwargs = {}
    for key, value in raw.items():
        target = rename.get(key, key)
        if target not in allowed or key in rename.values():
            errors.append(f"{name}.{key}: unknown key")
        else:
            kwargs[target] = tuple(value) if isinstance(value, list) and target == "betas" else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{name}: {exc}")
        return None


def resolve(raw: dict, env: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from parsed JSON; every problem is reported at once."""
    env = os.environ if env is None else env
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError([f"top level: expected an object, got {type(raw).__name__}"])
    top = {f.name for f in fields(RunConfig)}
    errors += [f"{k}: unknown key" for k in raw if k not in top]

    data = _section(DataConfig, raw.get("data"), "data", errors)
    split = _section(SplitSpec, raw.get("split"), "split", errors)
    train = _section(TrainConfig, raw.get("train"), "train", errors, rename={"lambda": "lam"},
                     exclude=("seed",))
    model = _section(ModelConfig, raw.get("model"), "model", errors, exclude=("seed",))
    backbone = _section(BackboneConfig, raw.get("backbone"), "backbone", errors)

    seed = raw.get("seed", 0)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            errors.append(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer")
    if not isinstance(seed, int):
        errors.append(f"seed: expected an integer, got {seed!r}")

    variant = raw.get("variant")
    if variant is not None and str(variant).lstrip("#").lower() not in VARIANTS:
        errors.append(f"variant: unknown {variant!r}; choose from {sorted(VARIANTS)}")
    elif variant is not None and model is not None:
        model = apply_variant(model, str(variant))

    if data is not None:
        if bool(data.path) == bool(data.synthetic):
            errors.append("data: give exactly one of 'path' or 'synthetic'")
        elif data.synthetic and data.synthetic not in ("advection", "diffusion", "periodic"):
            errors.append(f"data.synthetic: unknown kind {data.synthetic!r}")
        if data.synthetic:
            try:
                SynthParams(**data.synth_params)
            except TypeError as exc:
                errors.append(f"data.synth_params: {exc}")
    if train is not None:
        errors += [f"train: {e}" for e in train.validate()]
    if model is not None:
        errors += [f"model: {e}" for e in model.validate()]
    output_dir = raw.get("output_dir", RunConfig.output_dir)
    if not isinstance(output_dir, str):
        errors.append("output_dir: expected a string")
    if errors:
        raise ConfigError(errors)
    return RunConfig(data, split, replace(train, seed=seed), replace(model, seed=seed), backbone,
                     variant, seed, output_dir)


def load(path, env: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    return resolve(raw, env)


def desk_preset(variant: str = "full", steps: int = 200, seed: int = 0) -> RunConfig:
    """Synthetic advection 1x16x20x400, P=Q=6, sized to train 200 steps in well under a minute."""
    model = apply_variant(ModelConfig(d_temporal=32, temporal_blocks=1, decoder_blocks=1, seed=seed),
                          variant)
    return RunConfig(
        data=DataConfig(synthetic="advection", synth_params={"channels": 1, "height": 16, "width": 20,
                                                             "steps": 400}, synth_seed=0),
        train=TrainConfig(P=6, Q=6, batch_size=4, epochs=100, max_steps=steps, seed=seed),
        model=model,
        backbone=BackboneConfig(dim=32),
        variant=variant,
        seed=seed,
        output_dir=f"runs/advection-{variant}",
    )
