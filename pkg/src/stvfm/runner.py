"""Glue between a :class:`RunConfig`, data files, training and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .gridio import SplitSpec, STGrid
from .metrics import MetricReport, baseline_predictor, evaluate
from .model import STVFM
from .prevfm import PatchLayout
from .train import (Checkpoint, Prepared, TrainResult, evaluate_checkpoint, prepare, predictor,
                    save_checkpoint, train)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def build_model(cfg: RunConfig, grid: STGrid) -> STVFM:
    T, C, H, W = grid.values.shape
    layout = PatchLayout(H, W, C, cfg.model.patch)
    return STVFM(cfg.model, cfg.backbone, layout, cfg.train.P, cfg.train.Q)


def prepare_run(cfg: RunConfig, grid: STGrid) -> Prepared:
    return prepare(grid, cfg.train.P, cfg.train.Q, cfg.split, cfg.train.stride)


@dataclass
class RunOutput:
    model: STVFM
    data: Prepared
    result: TrainResult
    checkpoint: Path | None


def run_training(cfg: RunConfig, grid: STGrid | None = None, out_dir=None, on_step=None) -> RunOutput:
    """Train per ``cfg``; with ``out_dir`` writes model.ntc, train_log.jsonl and config.json."""
    grid = cfg.load_data() if grid is None else grid
    data = prepare_run(cfg, grid)
    model = build_model(cfg, grid)
    ckpt = None
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        log_path = out_dir / "train_log.jsonl"
    result = train(model, data, cfg.train, log_path=log_path, on_step=on_step)
    if out_dir is not None:
        ckpt = out_dir / "model.ntc"
        # the output location is not part of the model, so moving a run keeps its bytes
        run = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
        save_checkpoint(ckpt, model, data.normalizer, result.best_val_rmse, cfg.train, grid.meta,
                        extra={"run": run})
    return RunOutput(model, data, result, ckpt)


def checkpoint_split(ckpt: Checkpoint) -> SplitSpec:
    run = ckpt.meta.get("run", {})
    return SplitSpec(**run["split"]) if "split" in run else SplitSpec()


def eval_checkpoint(ckpt: Checkpoint, grid: STGrid, split: str = "test") -> MetricReport:
    """Evaluate with the checkpoint's own normaliser and split fractions."""
    m = ckpt.model
    tc = ckpt.train_config
    stride = tc.stride if tc else 1
    data = prepare(grid, m.P, m.Q, checkpoint_split(ckpt), stride, normalizer=ckpt.normalizer)
    return evaluate_checkpoint(ckpt, getattr(data, split), grid.meta.scale_factor)


def eval_baseline(kind: str, grid: STGrid, P: int, Q: int, split: str = "test",
                  spec: SplitSpec = SplitSpec(), stride: int = 1) -> MetricReport:
    data = prepare(grid, P, Q, spec, stride)
    return evaluate(baseline_predictor(kind, Q, grid.meta), getattr(data, split), data.normalizer,
                    grid.meta.scale_factor)


def forecast(ckpt: Checkpoint, grid: STGrid, end: int | None = None) -> STGrid:
    """Predict the Q frames following ``grid[end - P:end]`` (default: the last P frames)."""
    m = ckpt.model
    end = grid.steps if end is None else end
    if end < m.P or end > grid.steps:
        raise ValueError(f"need {m.P} history frames ending at {end}, grid has {grid.steps}")
    x = ckpt.normalizer.apply_array(grid.values[end - m.P:end])
    prev = ckpt.normalizer.apply_array(grid.values[end - m.P - 1]) if end > m.P else x[0]
    flow = np.diff(np.concatenate([prev[None], x]), axis=0).astype(np.float32)
    pred = predictor(m)(x[None], flow[None])[0]
    return STGrid(ckpt.normalizer.invert_array(pred), grid.meta)
