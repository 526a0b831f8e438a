"""Dense 2-D tensors with reverse-mode gradients, plus an AdamW optimizer.

Every differentiable operation records its parents and a backward rule on the
output tensor.  ``Tensor.backward`` replays the recorded graph in reverse
topological order.  All data is float64.

Only one kind of broadcasting exists: a 1xD row added to (or subtracted from)
an NxD tensor.  Scaling by a 1x1 tensor is a separate op (``scale``).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray) -> None:
    # cheap path first: a finite sum implies finite entries (barring overflow)
    if not math.isfinite(float(arr.sum())) and not np.isfinite(arr).all():
        raise NumericError("operation produced non-finite values")


class Tensor:
    """A rows x cols float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(mul_const(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self, grad: float | np.ndarray = 1.0) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        ``self`` must be 1x1 unless an explicit seed gradient array is given.
        """
        if isinstance(grad, np.ndarray):
            seed = np.array(grad, dtype=np.float64).reshape(self.shape)
        else:
            if self.shape != (1, 1):
                raise ShapeError(f"backward() on non-scalar tensor {self.shape}")
            seed = np.full((1, 1), float(grad))
        if not self.requires_grad:
            return
        order = _topo_order(self)
        # intermediate grads live only for the duration of this call
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
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
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.rows == 1 and b.cols == a.cols:
        return "b_row"
    if a.rows == 1 and a.cols == b.cols:
        return "a_row"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)

    def backward(g):
        ga, gb = g, g
        if kind == "b_row":
            gb = g.sum(axis=0, keepdims=True)
        elif kind == "a_row":
            ga = g.sum(axis=0, keepdims=True)
        return ga, gb

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)

    def backward(g):
        ga, gb = g, -g
        if kind == "b_row":
            gb = -g.sum(axis=0, keepdims=True)
        elif kind == "a_row":
            ga = g.sum(axis=0, keepdims=True)
        return ga, gb

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the 1x1 tensor ``s``."""
    if s.shape != (1, 1):
        raise ShapeError(f"scale factor must be 1x1, got {s.shape}")
    k = s.data[0, 0]
    return _make(a.data * k, (a, s), lambda g: (g * k, np.array([[np.sum(g * a.data)]])))


def add_const(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along each row, stabilised by subtracting the row max."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),))


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean: NxD -> 1xD."""
    n = a.rows
    return _make(a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows needs equal column counts, got {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.shape}")

    def backward(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop].copy(), (a,), backward)


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Replicate a 1xD tensor to NxD."""
    if a.rows != 1:
        raise ShapeError(f"repeat_rows needs a 1xD tensor, got {a.shape}")
    return _make(np.repeat(a.data, n, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),))


def upsample_grid(a: Tensor, grid: int, cell: int) -> Tensor:
    """Broadcast each row of a (grid*grid)xD tensor to a cell x cell block of pixels.

    Row ``r*grid + c`` of the input covers pixel rows ``r*cell .. r*cell+cell-1``
    and pixel columns ``c*cell ..``; the output is row-major over the
    (grid*cell) x (grid*cell) pixel raster.
    """
    if a.rows != grid * grid:
        raise ShapeError(f"upsample_grid expects {grid * grid} rows, got {a.rows}")
    d = a.cols
    blocks = a.data.reshape(grid, 1, grid, 1, d)
    out = np.broadcast_to(blocks, (grid, cell, grid, cell, d)).reshape(grid * cell * grid * cell, d)

    def backward(g):
        return (g.reshape(grid, cell, grid, cell, d).sum(axis=(1, 3)).reshape(grid * grid, d),)

    return _make(out.copy(), (a,), backward)


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row: NxD -> Nx1.  Zero rows get a zero subgradient."""
    n = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * a.data / safe, 0.0),)

    return _make(n, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row to zero mean and unit variance (no affine part)."""
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), backward)


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of matching rows: Nx1.  A zero row has similarity 0."""
    if a.shape != b.shape:
        raise ShapeError(f"row_cosine needs equal shapes, got {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=1, keepdims=True))
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=1, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def backward(g):
        ga = b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s)
        gb = a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s)
        return np.where(ok, g * ga, 0.0), np.where(ok, g * gb, 0.0)

    return _make(cos, (a, b), backward)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a 0/1 target."""
    x = logits.data
    t = np.asarray(target, dtype=np.float64).reshape(x.shape)
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    return _make(np.array([[loss.mean()]]), (logits,),
                 lambda g: (g[0, 0] * (_sigmoid(x) - t) / n,))


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s) with p = sigmoid(logits)."""
    p = _sigmoid(logits.data)
    t = np.asarray(target, dtype=np.float64).reshape(p.shape)
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum()) + smooth
    num = 2.0 * inter + smooth
    value = 1.0 - num / denom

    def backward(g):
        dp = -(2.0 * t * denom - num) / (denom * denom)
        return (g[0, 0] * dp * p * (1.0 - p),)

    return _make(np.array([[value]]), (logits,), backward)


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus AdamW moment state."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self.entries: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise StateError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self.entries[name] = t
        self.moment1[name] = np.zeros(t.shape)
        self.moment2[name] = np.zeros(t.shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def n_values(self) -> int:
        return sum(t.data.size for t in self.entries.values())

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def set_trainable(self, names: Iterable[str]) -> None:
        """Only the listed parameters record gradients."""
        keep = set(names)
        unknown = keep - set(self.entries)
        if unknown:
            raise StateError(f"unknown parameters {sorted(unknown)}")
        for name, t in self.entries.items():
            t.requires_grad = name in keep

    def reset_optimizer(self) -> None:
        for name, t in self.entries.items():
            self.moment1[name] = np.zeros(t.shape)
            self.moment2[name] = np.zeros(t.shape)
        self.step_count = 0

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.entries.items():
            out.add(name, t.data.copy())
            out.entries[name].requires_grad = t.requires_grad
            out.moment1[name] = self.moment1[name].copy()
            out.moment2[name] = self.moment2[name].copy()
        out.step_count = self.step_count
        return out


def adamw_step(params: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
               weight_decay: float = 0.01, eps: float = 1e-8,
               names: Iterable[str] | None = None) -> ParamStore:
    """One AdamW update (decoupled weight decay) on ``names`` (default: all)."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    names = list(params.entries) if names is None else list(names)
    for name in names:
        if params.entries[name].grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    b1, b2 = betas
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in names:
        p = params.entries[name]
        g = p.grad
        m = params.moment1[name] = b1 * params.moment1[name] + (1.0 - b1) * g
        v = params.moment2[name] = b2 * params.moment2[name] + (1.0 - b2) * g * g
        p.data = p.data * (1.0 - lr * weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` at step 0 towards 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def grad_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5,
               names: Iterable[str] | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The error for one entry is |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(params.entries) if names is None else list(names)
    params.zero_grad()
    loss = loss_fn(params)
    if not math.isfinite(loss.item()):
        raise NumericError("loss is not finite")
    loss.backward()
    worst = 0.0
    with no_grad():
        for name in names:
            p = params.entries[name]
            analytic = p.grad if p.grad is not None else np.zeros(p.shape)
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn(params).item()
                flat[i] = orig - eps
                down = loss_fn(params).item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError(f"loss not finite while perturbing {name}")
                numeric = (up - down) / (2.0 * eps)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    params.zero_grad()
    return worst
