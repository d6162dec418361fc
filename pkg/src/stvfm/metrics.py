"""Forecast metrics, sanity baselines and split evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gridio import GridMeta, Normalizer

MINUTES_PER_DAY = 24 * 60


@dataclass
class MetricReport:
    mae: float
    rmse: float
    n_points: int
    per_step: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "n_points": self.n_points,
                "per_step": self.per_step}


def _errors(y, yhat) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs yhat {yhat.shape}")
    if y.size == 0:
        raise ValueError("metrics need at least one point")
    return (y - yhat).ravel()


def mae(y, yhat, scale: float = 1.0) -> float:
    """Mean absolute error; ``scale`` multiplies both series (reporting units)."""
    return float(np.mean(np.abs(_errors(y, yhat))) * scale)


def rmse(y, yhat, scale: float = 1.0) -> float:
    e = _errors(y, yhat)
    return float(np.sqrt(np.mean(e * e)) * scale)


# -- baselines ----------------------------------------------------------------

def baseline_persistence(history: np.ndarray, Q: int) -> np.ndarray:
    """Repeat the last history frame ``Q`` times; history is ``[..., P, C, H, W]``."""
    history = np.asarray(history)
    if history.ndim < 4 or history.shape[-4] == 0:
        raise ValueError(f"need a non-empty history [..., P, C, H, W], got {history.shape}")
    last = history[..., -1:, :, :, :]
    return np.repeat(last, Q, axis=-4)


def baseline_ha(history: np.ndarray, Q: int, meta: GridMeta | None = None) -> np.ndarray:
    """Historical average over the window.

    If the window spans at least one day (``meta.interval_minutes``), each
    future step averages the history frames at whole-day offsets before it;
    otherwise every step gets the per-cell mean of all ``P`` frames.
    """
    history = np.asarray(history)
    if history.ndim < 4 or history.shape[-4] == 0:
        raise ValueError(f"need a non-empty history [..., P, C, H, W], got {history.shape}")
    P = history.shape[-4]
    per_day = MINUTES_PER_DAY // meta.interval_minutes if meta and meta.interval_minutes else 0
    if per_day and P >= per_day:
        steps = []
        for q in range(Q):
            idx = [P + q - k * per_day for k in range(1, P // per_day + 2)]
            idx = [i for i in idx if 0 <= i < P]
            steps.append(history[..., idx, :, :, :].mean(axis=-4))
        return np.stack(steps, axis=-4).astype(history.dtype)
    mean = history.mean(axis=-4, keepdims=True)
    return np.repeat(mean, Q, axis=-4)


# -- evaluation -----------------------------------------------------------------

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluate(predict: Predictor, split: dict[str, np.ndarray], normalizer: Normalizer,
             scale_factor: float = 1.0, batch_size: int = 16) -> MetricReport:
    """Metrics of ``predict`` over every window of a normalised split.

    ``predict(history, flow_history)`` returns normalised ``[B, Q, C, H, W]``
    forecasts; errors are measured after denormalisation, accumulated in fixed
    window order.
    """
    hist, target = split["history"], split["target"]
    n = hist.shape[0]
    if n == 0:
        raise ValueError("split has no windows")
    Q = target.shape[1]
    abs_sum = np.zeros(Q)
    sq_sum = np.zeros(Q)
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        pred = np.asarray(predict(hist[sl], split["flow_history"][sl]))
        if pred.shape != target[sl].shape:
            raise ValueError(f"prediction shape {pred.shape} vs target {target[sl].shape}")
        e = (normalizer.invert_array(pred).astype(np.float64)
             - normalizer.invert_array(target[sl]).astype(np.float64))
        abs_sum += np.abs(e).sum(axis=(0, 2, 3, 4))
        sq_sum += (e * e).sum(axis=(0, 2, 3, 4))
    per_point = n * int(np.prod(target.shape[2:]))
    per_step = [{"step": q + 1, "mae": float(abs_sum[q] / per_point * scale_factor),
                 "rmse": float(np.sqrt(sq_sum[q] / per_point) * scale_factor)} for q in range(Q)]
    N = per_point * Q
    return MetricReport(float(abs_sum.sum() / N * scale_factor),
                        float(np.sqrt(sq_sum.sum() / N) * scale_factor), N, per_step)


def baseline_predictor(kind: str, Q: int, meta: GridMeta | None = None) -> Predictor:
    if kind == "ha":
        return lambda hist, _flow: baseline_ha(hist, Q, meta)
    if kind == "persistence":
        return lambda hist, _flow: baseline_persistence(hist, Q)
    raise ValueError(f"unknown baseline {kind!r}; choose 'ha' or 'persistence'")
