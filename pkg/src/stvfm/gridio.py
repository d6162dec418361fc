"""Spatio-temporal grids: storage, windowing, splits, normalisation, synthesis.

Grid values are float32 arrays indexed ``[t, c, h, w]``, which is also the
payload order of the STG1 file format:

    bytes 0-3   magic ``b"STG1"``
    16 bytes    C, H, W, T as little-endian uint32
    payload     C*H*W*T little-endian float32 in [t][c][h][w] order

An optional ``<file>.json`` sidecar carries the metadata.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"STG1"
_HEADER = struct.Struct("<4I")
# 2**31 float32 values is 8 GiB; anything larger is treated as a corrupt header
MAX_VALUES = 2**31


class GridFileError(ValueError):
    """Base class for STG1 read failures."""


class GridFormatError(GridFileError):
    """Wrong magic bytes or an unreadable header."""


class GridTruncatedError(GridFileError):
    """Payload shorter than the header declares."""


class GridDimensionError(GridFileError):
    """Header dimensions are zero or overflow the supported size."""


@dataclass(frozen=True)
class GridMeta:
    name: str = "grid"
    interval_minutes: float = 30.0
    scale_factor: float = 1.0


@dataclass(frozen=True)
class STGrid:
    """Dense C x H x W x T observations; ``values`` is read-only ``[T, C, H, W]`` float32."""

    values: np.ndarray
    meta: GridMeta = field(default_factory=GridMeta)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        if v.ndim != 4:
            raise ValueError(f"grid values must be [T, C, H, W], got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError(f"grid dimensions must be positive, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("grid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """(C, H, W, T) in the conventional order."""
        return self.channels, self.height, self.width, self.steps

    def with_values(self, values: np.ndarray) -> "STGrid":
        return STGrid(values, self.meta)

    def segment(self, start: int, stop: int) -> "STGrid":
        return STGrid(self.values[start:stop], self.meta)


@dataclass(frozen=True)
class WindowPair:
    history: STGrid
    target: STGrid
    flow_history: STGrid
    flow_target: STGrid
    start: int = 0


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fr):
            raise ValueError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)!r}")


@dataclass(frozen=True)
class Normalizer:
    """Per-channel z-score; ``std`` is already floored."""

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-6

    def apply(self, grid: STGrid) -> STGrid:
        return grid.with_values(self.apply_array(grid.values))

    def invert(self, grid: STGrid) -> STGrid:
        return grid.with_values(self.invert_array(grid.values))

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        """Normalise any ``[..., C, H, W]`` array."""
        m, s = self._bcast()
        return ((np.asarray(x, np.float64) - m) / s).astype(np.float32)

    def invert_array(self, x: np.ndarray) -> np.ndarray:
        m, s = self._bcast()
        return (np.asarray(x, np.float64) * s + m).astype(np.float32)

    def scale_array(self, x: np.ndarray) -> np.ndarray:
        """Map a normalised *difference* back to original units (no offset)."""
        _, s = self._bcast()
        return (np.asarray(x, np.float64) * s).astype(np.float32)

    def _bcast(self):
        m = np.asarray(self.mean, np.float64)[:, None, None]
        s = np.asarray(self.std, np.float64)[:, None, None]
        return m, s

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))


# ---------------------------------------------------------------------------
# flow, windows, splits


def derive_flow(grid: STGrid) -> STGrid:
    """Temporal difference ``X[t] - X[t-1]`` with a zero first frame."""
    if grid.steps < 2:
        raise ValueError(f"flow needs at least 2 steps, got T={grid.steps}")
    x = grid.values
    flow = np.zeros_like(x)
    flow[1:] = x[1:] - x[:-1]
    return grid.with_values(flow)


def make_windows(grid: STGrid, P: int, Q: int, stride: int = 1) -> list[WindowPair]:
    """Sliding (history, target) windows with matching flow tensors.

    ``flow_history[0]`` uses the frame before the window when the grid has one,
    otherwise it is zero.  ``flow_target[q] = X[P+q] - X[P+q-1]`` relative to the
    window start, so ``flow_target[0]`` is anchored at the last history frame.
    """
    if P < 1 or Q < 1 or stride < 1:
        raise ValueError(f"P, Q and stride must be >= 1, got {P}, {Q}, {stride}")
    T = grid.steps
    if P + Q > T:
        raise ValueError(f"P+Q={P + Q} exceeds the grid length T={T}")
    x = grid.values
    diff = np.zeros_like(x)
    diff[1:] = x[1:] - x[:-1]
    windows = []
    for s in range(0, T - P - Q + 1, stride):
        flow_hist = diff[s:s + P].copy()
        if s == 0:
            flow_hist[0] = 0.0
        windows.append(WindowPair(
            history=STGrid(x[s:s + P], grid.meta),
            target=STGrid(x[s + P:s + P + Q], grid.meta),
            flow_history=STGrid(flow_hist, grid.meta),
            flow_target=STGrid(diff[s + P:s + P + Q], grid.meta),
            start=s,
        ))
    return windows


def window_arrays(windows: list[WindowPair]) -> dict[str, np.ndarray]:
    """Stack windows into ``[B, steps, C, H, W]`` arrays."""
    return {
        "history": np.stack([w.history.values for w in windows]),
        "target": np.stack([w.target.values for w in windows]),
        "flow_history": np.stack([w.flow_history.values for w in windows]),
        "flow_target": np.stack([w.flow_target.values for w in windows]),
    }


def split_by_time(grid: STGrid, spec: SplitSpec = SplitSpec()) -> tuple[STGrid, STGrid, STGrid]:
    """Contiguous train/val/test segments; the rounding remainder goes to test."""
    T = grid.steps
    a = int(np.floor(spec.train_frac * T + 1e-9))
    b = int(np.floor((spec.train_frac + spec.val_frac) * T + 1e-9))
    return grid.segment(0, a), grid.segment(a, b), grid.segment(b, T)


def fit_normalizer(train: STGrid) -> Normalizer:
    x = train.values.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    low = std < Normalizer.STD_FLOOR
    if low.any():
        log.warning("channels %s are constant; std floored at %g",
                    np.flatnonzero(low).tolist(), Normalizer.STD_FLOOR)
    return Normalizer(mean, np.maximum(std, Normalizer.STD_FLOOR))


# ---------------------------------------------------------------------------
# STG1 files


def save_grid(grid: STGrid, path) -> None:
    path = Path(path)
    T, C, H, W = grid.values.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(C, H, W, T))
        fh.write(grid.values.astype("<f4").tobytes(order="C"))
    Path(str(path) + ".json").write_text(json.dumps(asdict(grid.meta), indent=2) + "\n")


def load_grid(path) -> STGrid:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise GridFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 4 + _HEADER.size:
        raise GridFormatError(f"{path}: header is truncated")
    C, H, W, T = _HEADER.unpack_from(raw, 4)
    if min(C, H, W, T) == 0:
        raise GridDimensionError(f"{path}: zero dimension in header {(C, H, W, T)}")
    n = C * H * W * T
    if n > MAX_VALUES:
        raise GridDimensionError(f"{path}: header declares {n} values (limit {MAX_VALUES})")
    payload = raw[4 + _HEADER.size:]
    if len(payload) < 4 * n:
        raise GridTruncatedError(f"{path}: payload has {len(payload)} bytes, header needs {4 * n}")
    values = np.frombuffer(payload, dtype="<f4", count=n).reshape(T, C, H, W).astype(np.float32)
    meta = GridMeta()
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = GridMeta(**json.loads(sidecar.read_text()))
    return STGrid(values, meta)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthParams:
    channels: int = 1
    height: int = 16
    width: int = 20
    steps: int = 200
    # advection: one (vx, vy) per blob, columns/rows moved per step
    velocities: list = field(default_factory=lambda: [[1, 0], [0, 1]])
    centers: list | None = None  # (row, col) per blob; random when None
    sigma: float = 1.5
    amplitude: float = 1.0
    noise: float = 0.0
    # diffusion: kernel applications per step
    diffusion_iters: int = 1
    # periodic
    period: int = 6
    offset: float = 1.0
    interval_minutes: float = 30.0


def _periodic_blob(H: int, W: int, center, sigma: float) -> np.ndarray:
    r = np.arange(H)[:, None] - center[0]
    c = np.arange(W)[None, :] - center[1]
    r = np.minimum(np.abs(r) % H, H - np.abs(r) % H)
    c = np.minimum(np.abs(c) % W, W - np.abs(c) % W)
    return np.exp(-(r**2 + c**2) / (2.0 * sigma**2))


def _smooth(frame: np.ndarray) -> np.ndarray:
    """One pass of a normalised 3x3 kernel with wraparound (mass preserving)."""
    k = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0
    out = np.zeros_like(frame)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out += k[dr + 1, dc + 1] * np.roll(frame, (dr, dc), axis=(-2, -1))
    return out


def synthesize(kind: str, params: SynthParams | dict | None = None, seed: int = 0) -> STGrid:
    """Deterministic synthetic grid of kind ``advection``, ``diffusion`` or ``periodic``."""
    p = params if isinstance(params, SynthParams) else SynthParams(**(params or {}))
    C, H, W, T = p.channels, p.height, p.width, p.steps
    if min(C, H, W, T) < 1:
        raise ValueError(f"dimensions must be positive, got C,H,W,T={(C, H, W, T)}")
    rng = np.random.default_rng(seed)
    x = np.zeros((T, C, H, W))

    if kind == "advection":
        vels = [tuple(int(v) for v in vel) for vel in p.velocities]
        centers = p.centers or [(int(rng.integers(H)), int(rng.integers(W))) for _ in vels]
        if len(centers) != len(vels):
            raise ValueError("need one center per velocity")
        gains = 1.0 + 0.5 * np.arange(C)
        for (vx, vy), ctr in zip(vels, centers):
            base = p.amplitude * _periodic_blob(H, W, ctr, p.sigma)
            for t in range(T):
                x[t] += gains[:, None, None] * np.roll(base, (vy * t, vx * t), axis=(0, 1))
    elif kind == "diffusion":
        centers = p.centers or [(int(rng.integers(H)), int(rng.integers(W)))
                                for _ in range(max(1, len(p.velocities)))]
        frame = np.zeros((C, H, W))
        for ctr in centers:
            frame += p.amplitude * _periodic_blob(H, W, ctr, p.sigma)
        for t in range(T):
            x[t] = frame
            for _ in range(p.diffusion_iters):
                frame = _smooth(frame)
    elif kind == "periodic":
        if int(p.period) != p.period or p.period < 1:
            raise ValueError(f"period must be a positive integer, got {p.period}")
        pattern = rng.uniform(0.5, 1.5, size=(C, H, W))
        for t in range(T):
            x[t] = p.offset + p.amplitude * pattern * np.sin(2.0 * np.pi * (t % p.period) / p.period)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    if p.noise > 0:
        x = x + rng.normal(0.0, p.noise, size=x.shape)
    meta = GridMeta(name=f"synthetic-{kind}", interval_minutes=p.interval_minutes, scale_factor=1.0)
    return STGrid(x.astype(np.float32), meta)
