"""Dense tensors with reverse-mode differentiation.

Every primitive records its parents and an adjoint closure on the result
tensor.  ``backward`` linearises the recorded graph into a :class:`ComputeTape`
(deterministic depth-first topological order) and replays the adjoints in
reverse.  Shapes are never broadcast implicitly, with one exception: ``add``
and ``sub`` accept a 1-D right operand matching the trailing axis (bias).
Everything else must be spelled out with :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeTape",
    "ShapeError",
    "NumericError",
    "BackwardError",
    "tensor",
    "zeros",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "reshape",
    "transpose",
    "swapaxes",
    "slice_",
    "sum_",
    "mean",
    "softmax",
    "layer_norm",
    "gelu",
    "exp",
    "square",
    "sqrt",
    "broadcast_to",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NumericError(ArithmeticError):
    """A primitive received or produced non-finite values."""


class BackwardError(RuntimeError):
    """Invalid use of :func:`backward`."""


_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (thread-local)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense array that may participate in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_adjoint", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __getitem__(self, index):
        return slice_(self, index)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or get_default_dtype()), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_nan(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        # a sum is NaN iff some element is NaN (or +inf and -inf mix)
        if np.isnan(a.sum()):
            raise NumericError(f"{op}: NaN in input")


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], adjoint) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._adjoint = adjoint
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., n, k] @ b[..., k, p]`` with identical leading dims, or ``b`` 2-D.

    A 2-D right operand is a weight shared over every leading index of ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    _check_nan("matmul", a.data, b.data)
    ad, bd = a.data, b.data
    if shared:
        # one large GEMM instead of numpy's loop over leading indices
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = ad @ bd

    def adjoint(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = a2.T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), adjoint)


def _check_elementwise(op: str, a: Tensor, b: Tensor, allow_bias: bool) -> bool:
    if a.shape == b.shape:
        return False
    if allow_bias and b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_elementwise("add", a, b, allow_bias=True)
    _check_nan("add", a.data, b.data)

    def adjoint(g):
        return g, (_reduce_bias(g) if bias else g)

    return _make("add", a.data + b.data, (a, b), adjoint)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_elementwise("sub", a, b, allow_bias=True)
    _check_nan("sub", a.data, b.data)

    def adjoint(g):
        return g, -(_reduce_bias(g) if bias else g)

    return _make("sub", a.data - b.data, (a, b), adjoint)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b, allow_bias=False)
    _check_nan("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def adjoint(g):
        return (g * bd if a.requires_grad else None), (g * ad if b.requires_grad else None)

    return _make("mul", ad * bd, (a, b), adjoint)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    _check_nan("scale", a.data)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat axis {axis}: shapes {ts[0].shape} and {t.shape} disagree")
    _check_nan("concat", *(t.data for t in ts))
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), tuple(ts), adjoint)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(
        "transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
        lambda g: (g.transpose(inverse),),
    )


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def slice_(a: Tensor, index) -> Tensor:
    """Basic indexing only (ints, slices, Ellipsis)."""
    a = _as_tensor(a)
    idx = index if isinstance(index, tuple) else (index,)
    for part in idx:
        if not (part is Ellipsis or isinstance(part, (int, np.integer, slice))):
            raise ShapeError(f"slice: only basic indexing is supported, got {part!r}")
    src_shape, dtype = a.shape, a.dtype

    def adjoint(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make("slice", np.array(a.data[index]), (a,), adjoint)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(sorted(x % ndim for x in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    _check_nan("sum", a.data)
    axes = _norm_axis(axis, a.ndim)
    src_shape = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(src_shape))

    def adjoint(g):
        return (np.broadcast_to(g.reshape(kept), src_shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), adjoint)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (a,), adjoint)


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional affine ``weight``/``bias``."""
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericError("layer_norm: non-finite input")
    d = a.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm {name}: expected {(d,)}, got {p.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (a, weight, bias) if p is not None)

    def adjoint(g):
        gx = g * weight.data if weight is not None else g
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [ga]
        if weight is not None:
            grads.append(_reduce_bias(g * xhat))
        if bias is not None:
            grads.append(_reduce_bias(g))
        return grads

    return _make("layer_norm", out.astype(x.dtype, copy=False), parents, adjoint)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    a = _as_tensor(a)
    _check_nan("gelu", a.data)
    x = a.data
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    y = 0.5 * x * (1.0 + t)
    return _make("gelu", y, (a,), lambda g: (g * _gelu_grad(x, t),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_nan("exp", a.data)
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_nan("square", a.data)
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_nan("sqrt", a.data)
    if (a.data < 0).any():
        raise NumericError("sqrt: negative input")
    y = np.sqrt(a.data)
    return _make("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly repeat ``a`` to ``shape`` (new leading axes or size-1 axes)."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None
    lead = len(shape) - a.ndim
    ones = tuple(i for i, d in enumerate(a.shape) if d == 1 and shape[lead + i] != 1)

    def adjoint(g):
        r = g.sum(axis=tuple(range(lead))) if lead else g
        if ones:
            r = r.sum(axis=ones, keepdims=True)
        return (r,)

    return _make("broadcast_to", out, (a,), adjoint)


# ---------------------------------------------------------------------------
# reverse pass


class ComputeTape:
    """Operations reachable from a root, in topological order (parents first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise BackwardError(
                    f"graph through '{node.op}' was already used by backward(); rebuild it first"
                )
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        if self.consumed:
            raise BackwardError("tape already replayed")
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._adjoint(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    pg = np.asarray(pg, dtype=parent.dtype)
                    if pg.shape != parent.shape:
                        raise ShapeError(
                            f"adjoint of '{node.op}' produced {pg.shape}, expected {parent.shape}"
                        )
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
            # free saved state; a second backward through this node is an error
            node._adjoint = None
            node._consumed = True
        self.consumed = True


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``."""
    if root.data.size != 1:
        raise BackwardError(f"backward() needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise BackwardError("backward() already ran on this graph; rebuild it first")
    if not root.requires_grad:
        raise BackwardError("root does not depend on any tensor that requires grad")
    tape = ComputeTape.from_root(root)
    tape.run(root, np.ones(root.shape, dtype=root.dtype))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                      coords: Iterable[int] | None = None) -> float:
    """Compare autodiff gradient of scalar ``f`` at ``x`` with central differences.

    ``x.data`` is perturbed in place (and restored), so ``f`` may either use its
    argument or read ``x`` through a closure.  Returns the maximum over checked
    coordinates of ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if x.dtype != np.float64:
        raise NumericError("finite_diff_check requires a float64 tensor")
    prev_flag, prev_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad, x.grad = prev_flag, prev_grad

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in (range(flat.size) if coords is None else coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"f is non-finite at x +/- h*e_{i}")
            g_fd = (fp - fm) / (2.0 * h)
            ga = float(g_ad.reshape(-1)[i])
            err = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
            worst = max(worst, err)
    return worst
