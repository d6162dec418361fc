"""Joint ST/flow objective, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ntc
from .autodiff import Tensor
from .backbone import assert_frozen, assign
from .gridio import (GridMeta, Normalizer, SplitSpec, STGrid, fit_normalizer, make_windows,
                     split_by_time, window_arrays)
from .metrics import MetricReport, evaluate
from .model import STVFM, build_model
from .optim import AdamW

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# -- losses ---------------------------------------------------------------------

def _squared_error(pred: Tensor, target) -> Tensor:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.ndim < 4:
        raise ad.ShapeError(f"expected [..., Q, C, H, W], got {pred.shape}")
    d = ad.sub(pred, ad.tensor(target.astype(pred.dtype, copy=False)))
    # squared norm over C at every (window, t, h, w), averaged over those points
    n = pred.data.size // pred.shape[-3]
    return ad.scale(ad.sum_(ad.square(d)), 1.0 / n)


def loss_st(pred: Tensor, target) -> Tensor:
    """Mean over (window, step, h, w) of the squared channel-vector error."""
    return _squared_error(pred, target)


def loss_flow(pred: Tensor, target) -> Tensor:
    return _squared_error(pred, target)


@dataclass
class LossReport:
    l_st: float
    l_flow: float
    total: float
    lam: float


def total_loss(l_st, l_flow, lam: float):
    """``l_st + lam * l_flow`` for floats or tensors; ``lam`` must be >= 0."""
    if not lam >= 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if isinstance(l_st, Tensor):
        if l_flow is None:
            return l_st
        return ad.add(l_st, ad.scale(l_flow, lam))
    if not (np.isfinite(l_st) and np.isfinite(l_flow)):
        raise ValueError(f"non-finite loss terms {l_st}, {l_flow}")
    return l_st + lam * l_flow


# -- data -------------------------------------------------------------------------

@dataclass
class Prepared:
    normalizer: Normalizer
    meta: GridMeta
    train: dict[str, np.ndarray]
    val: dict[str, np.ndarray]
    test: dict[str, np.ndarray]


def prepare(grid: STGrid, P: int, Q: int, split: SplitSpec = SplitSpec(), stride: int = 1,
            normalizer: Normalizer | None = None) -> Prepared:
    """Split in time, fit the normaliser on train and cut windows from each part.

    Flow is taken on the normalised values, so it lives in the same units as the
    ST branch.  Pass ``normalizer`` to reuse a stored one instead of refitting.
    """
    parts = split_by_time(grid, split)
    for name, part in zip(("train", "val", "test"), parts):
        if part.steps < P + Q:
            raise ValueError(f"{name} split has {part.steps} steps, fewer than P+Q={P + Q}")
    norm = normalizer or fit_normalizer(parts[0])
    arrays = [window_arrays(make_windows(norm.apply(p), P, Q, stride)) for p in parts]
    return Prepared(norm, grid.meta, *arrays)


# -- config -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    P: int = 6
    Q: int = 6
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lam: float = 1.0
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 8
    seed: int = 0
    stride: int = 1

    def validate(self) -> list[str]:
        errors = []
        if self.P < 1 or self.Q < 1:
            errors.append(f"P and Q must be >= 1, got {self.P}, {self.Q}")
        if not self.lam >= 0:
            errors.append(f"lambda must be >= 0, got {self.lam}")
        if self.lr <= 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            errors.append(f"max_steps must be >= 1, got {self.max_steps}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stride < 1:
            errors.append(f"stride must be >= 1, got {self.stride}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            errors.append(f"betas must be two values in [0, 1), got {self.betas}")
        return errors


# -- training -------------------------------------------------------------------------

def batch_losses(model: STVFM, batch: dict[str, np.ndarray], lam: float):
    st, flow = model(batch["history"], batch["flow_history"])
    l_st = loss_st(st, batch["target"])
    l_flow = loss_flow(flow, batch["flow_target"]) if flow is not None else None
    return l_st, l_flow, total_loss(l_st, l_flow, lam)


def predictor(model: STVFM):
    def predict(hist, flow_hist):
        with ad.no_grad():
            st, _ = model(hist, flow_hist)
        return st.data
    return predict


def mean_loss(model: STVFM, split: dict[str, np.ndarray], lam: float, batch_size: int = 16,
              indices=None) -> LossReport:
    """Window-weighted mean of the losses over (a subset of) a split, without gradients."""
    idx = np.arange(split["history"].shape[0]) if indices is None else np.asarray(indices)
    sums = np.zeros(2)
    with ad.no_grad():
        for i in range(0, len(idx), batch_size):
            b = idx[i:i + batch_size]
            l_st, l_flow, _ = batch_losses(model, {k: v[b] for k, v in split.items()}, lam)
            sums += len(b) * np.array([l_st.item(), l_flow.item() if l_flow is not None else 0.0])
    l_st, l_flow = (sums / len(idx)).tolist()
    return LossReport(l_st, l_flow, total_loss(l_st, l_flow, lam), lam)


@dataclass
class TrainResult:
    best_val_rmse: float
    best_step: int
    steps: int
    history: list[dict] = field(default_factory=list)


def train(model: STVFM, data: Prepared, config: TrainConfig, log_path=None,
          on_step=None) -> TrainResult:
    """AdamW on the trainable registry; restores the best-validation weights at the end.

    ``on_step(step, l_st, l_flow, total, model)`` is called after every update.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    n = data.train["history"].shape[0]
    if n == 0:
        raise ValueError("training split has no windows")
    frozen_before = model.backbone.snapshot()
    opt = AdamW(model.trainable(), config.lr, config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    scale = data.meta.scale_factor
    max_steps = config.max_steps or config.epochs * -(-n // config.batch_size)
    best = (np.inf, 0, None)
    history = []
    step = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            sums = np.zeros(3)
            seen = 0
            for i in range(0, n, config.batch_size):
                b = order[i:i + config.batch_size]
                batch = {k: v[b] for k, v in data.train.items()}
                opt.zero_grad()
                try:
                    l_st, l_flow, total = batch_losses(model, batch, config.lam)
                except ad.NumericError as exc:
                    raise TrainingDiverged(f"NaN in forward pass at epoch {epoch} step {step + 1}: {exc}") from exc
                vals = (l_st.item(), l_flow.item() if l_flow is not None else 0.0, total.item())
                if not np.all(np.isfinite(vals)):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step + 1}: "
                        f"l_st={vals[0]}, l_flow={vals[1]}, total={vals[2]}")
                ad.backward(total)
                opt.step()
                step += 1
                sums += len(b) * np.asarray(vals)
                seen += len(b)
                if on_step is not None:
                    on_step(step, *vals, model)
                if step >= max_steps:
                    break
            val = evaluate(predictor(model), data.val, data.normalizer, scale)
            rec = {"epoch": epoch, "step": step, "l_st": sums[0] / seen, "l_flow": sums[1] / seen,
                   "total": sums[2] / seen, "val_mae": val.mae, "val_rmse": val.rmse}
            history.append(rec)
            log.info("epoch %d step %d total %.5f val_rmse %.5f", epoch, step, rec["total"], val.rmse)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if val.rmse < best[0]:
                best = (val.rmse, step, {n_: p.data.copy() for n_, p in model.trainable()})
            if step >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    for name, p in model.trainable():
        p.data = best[2][name]
    report = assert_frozen(frozen_before, model.backbone)
    if not report:
        raise RuntimeError(f"frozen backbone tensors changed: {report.violations}")
    return TrainResult(best[0], best[1], step, history)


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(path, model: STVFM, normalizer: Normalizer, val_rmse: float,
                    train_config: TrainConfig | None = None, meta: GridMeta | None = None,
                    extra: dict | None = None) -> None:
    tensors = [ntc.NamedTensor(n, p.data, frozen=not p.requires_grad)
               for n, p in model.named_parameters()]
    blob = {"kind": "stvfm", "model": model.describe(), "normalizer": normalizer.to_dict(),
            "val_rmse": float(val_rmse)}
    if train_config is not None:
        blob["train"] = asdict(train_config)
    if meta is not None:
        blob["grid_meta"] = asdict(meta)
    if extra:
        blob.update(extra)
    ntc.write(path, tensors, blob)


@dataclass
class Checkpoint:
    model: STVFM
    normalizer: Normalizer
    val_rmse: float
    train_config: TrainConfig | None
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    tensors, blob = ntc.read(path)
    if blob.get("kind") != "stvfm":
        raise ntc.CheckpointError(f"{path} is not a forecaster checkpoint")
    model = build_model(blob["model"])
    assign(model, tensors)
    tc = None
    if "train" in blob:
        names = {f.name for f in fields(TrainConfig)}
        d = {k: v for k, v in blob["train"].items() if k in names}
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        tc = TrainConfig(**d)
    return Checkpoint(model, Normalizer.from_dict(blob["normalizer"]), blob["val_rmse"], tc, blob)


def evaluate_checkpoint(ckpt: Checkpoint, split: dict[str, np.ndarray],
                        scale_factor: float = 1.0) -> MetricReport:
    return evaluate(predictor(ckpt.model), split, ckpt.normalizer, scale_factor)
