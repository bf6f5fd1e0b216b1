"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op computes eagerly with numpy and, while a :class:`Tape` is active,
appends a record pairing the output node with a closure that pushes the
output adjoint onto the input adjoints.  Records accumulate in execution
order, which is a valid topological order, so the backward sweep is a single
reverse pass that visits each op exactly once.

Ops never broadcast beyond the leading batch dimension: operands are either
the same shape or an explicitly expanded row block (`expand_rows`).  All
values are 64-bit floats; shapes are fixed at creation.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "Tape",
    "backward",
    "no_tape",
    "affine",
    "activation",
    "relu",
    "tanh",
    "sigmoid",
    "maxpool_set",
    "fuse_max",
    "BatchNormState",
    "DualBatchNormState",
    "batchnorm",
    "dual_batchnorm",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "neg",
    "total",
    "mean",
    "abs_",
    "clamp",
    "log",
    "square",
    "norm2",
    "concat_cols",
    "expand_rows",
    "reshape",
]


class Tensor:
    """Dense float64 array with a shape and an adjoint slot.

    `value` is the contiguous numpy payload; `data` exposes the flat
    row-major view required by the serialization format.  `grad` is filled
    by :func:`backward` and holds d(loss)/d(self).
    """

    __slots__ = ("value", "grad")

    def __init__(self, value) -> None:
        v = np.asarray(value, dtype=np.float64)
        if v.ndim > 0 and not v.flags.c_contiguous:
            v = np.ascontiguousarray(v)
        self.value = v
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    def item(self) -> float:
        return float(self.value)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.value)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.value.shape})"


class ParamSet:
    """Named map of Tensors, each flagged trainable or frozen.

    Names are unique and shapes are fixed once an entry exists; updates go
    through :meth:`assign`, which writes in place.
    """

    def __init__(self) -> None:
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value)
        self._entries[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)

    def freeze_all(self) -> "ParamSet":
        for name in self._trainable:
            self._trainable[name] = False
        return self

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if self._trainable[n]]

    def assign(self, name: str, value: np.ndarray) -> None:
        t = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.value.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: have {t.value.shape}, got {value.shape}"
            )
        t.value[...] = value

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._entries.items():
            out.add(name, t.value.copy(), trainable=self._trainable[name])
        return out

    def equals_bitwise(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(t.value, other._entries[n].value)
            for n, t in self._entries.items()
        )

    def grads_from(self, gradmap: dict) -> dict[str, np.ndarray]:
        """Collect gradients for the trainable entries from a backward() map."""
        out = {}
        for name, t in self.trainable_items():
            g = gradmap.get(t)
            out[name] = np.zeros_like(t.value) if g is None else g
        return out


class Tape:
    """Ordered record of executed primitive ops.

    Used as a context manager; ops executed inside the `with` block are
    recorded.  The active tape is thread-local: a tape is confined to the
    thread that opened it, and tapes do not nest within a thread.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        if getattr(_STATE, "active", None) is not None:
            raise RuntimeError("tapes do not nest")
        _STATE.active = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.active = None

    def __len__(self) -> int:
        return len(self._records)


_STATE = threading.local()


class no_tape:
    """Context that suspends recording (pure inference inside a tape block)."""

    def __enter__(self):
        self._saved = getattr(_STATE, "active", None)
        _STATE.active = None
        return self

    def __exit__(self, *exc):
        _STATE.active = self._saved


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
    active = getattr(_STATE, "active", None)
    if active is not None:
        active._records.append((out, inputs, backward_fn))


def _accum(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over `tape` from scalar `loss`.

    Returns a map from every tensor touched by the tape (leaves included) to
    its gradient; tensors off the path to `loss` are absent.  Gradients are
    also left on `tensor.grad` for convenience.
    """
    if loss.value.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
    for out, inputs, _ in tape._records:
        out.grad = None
        for t in inputs:
            t.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for out, inputs, backward_fn in reversed(tape._records):
        if out.grad is None:
            continue
        backward_fn(out.grad)
    grads: dict[Tensor, np.ndarray] = {}
    for out, inputs, _ in tape._records:
        for t in (out, *inputs):
            if t.grad is not None and t not in grads:
                grads[t] = t.grad
    return grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def affine(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """y = x @ W.T + b for x of shape (n, in) or (in,)."""
    if W.value.ndim != 2 or b.value.ndim != 1:
        raise ValueError("affine expects W (out, in) and b (out,)")
    out_dim, in_dim = W.value.shape
    if b.value.shape[0] != out_dim:
        raise ValueError(f"bias size {b.value.shape[0]} != output size {out_dim}")
    if x.value.shape[-1] != in_dim:
        raise ValueError(
            f"affine input size {x.value.shape[-1]} != weight input size {in_dim}"
        )
    vec = x.value.ndim == 1
    xv = x.value[None, :] if vec else x.value
    y = Tensor((xv @ W.value.T + b.value)[0] if vec else xv @ W.value.T + b.value)

    def bwd(g: np.ndarray) -> None:
        gm = g[None, :] if vec else g
        _accum(W, gm.T @ xv)
        _accum(b, gm.sum(axis=0))
        _accum(x, (gm @ W.value)[0] if vec else gm @ W.value)

    _record(y, (W, b, x), bwd)
    return y


def relu(x: Tensor) -> Tensor:
    y = Tensor(np.maximum(x.value, 0.0))
    mask = x.value > 0.0

    def bwd(g):
        _accum(x, g * mask)

    _record(y, (x,), bwd)
    return y


def tanh(x: Tensor) -> Tensor:
    y = Tensor(np.tanh(x.value))

    def bwd(g):
        _accum(x, g * (1.0 - y.value * y.value))

    _record(y, (x,), bwd)
    return y


def sigmoid(x: Tensor) -> Tensor:
    y = Tensor(1.0 / (1.0 + np.exp(-x.value)))

    def bwd(g):
        _accum(x, g * y.value * (1.0 - y.value))

    _record(y, (x,), bwd)
    return y


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def maxpool_set(x: Tensor) -> Tensor:
    """Columnwise max of an (n, d) feature set; gradient to the first argmax row."""
    if x.value.ndim != 2 or x.value.shape[0] < 1:
        raise ValueError("maxpool_set expects a non-empty (n, d) tensor")
    idx = np.argmax(x.value, axis=0)  # first max per column
    y = Tensor(x.value[idx, np.arange(x.value.shape[1])])

    def bwd(g):
        gx = np.zeros_like(x.value)
        gx[idx, np.arange(x.value.shape[1])] = g
        _accum(x, gx)

    _record(y, (x,), bwd)
    return y


def fuse_max(parts: list[Tensor]) -> Tensor:
    """Elementwise max over equally shaped tensors; ties route to the earliest."""
    if not parts:
        raise ValueError("fuse_max of an empty list")
    out = parts[0]
    for p in parts[1:]:
        out = _max2(out, p)
    return out


def _max2(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ValueError("fuse_max operands must share a shape")
    mask = a.value >= b.value
    y = Tensor(np.where(mask, a.value, b.value))

    def bwd(g):
        _accum(a, g * mask)
        _accum(b, g * ~mask)

    _record(y, (a, b), bwd)
    return y


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm branch (mutable, not trained)."""

    def __init__(self, dim: int) -> None:
        self.mean = np.zeros(dim, dtype=np.float64)
        self.var = np.ones(dim, dtype=np.float64)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.mean.shape[0])
        out.mean[...] = self.mean
        out.var[...] = self.var
        return out


class DualBatchNormState:
    """Separate running statistics for the real and fake branches."""

    def __init__(self, dim: int) -> None:
        self.branches = {"real": BatchNormState(dim), "fake": BatchNormState(dim)}

    def __getitem__(self, branch: str) -> BatchNormState:
        if branch not in self.branches:
            raise ValueError(f"branch must be 'real' or 'fake', got {branch!r}")
        return self.branches[branch]


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool | None = None,
) -> Tensor:
    """Normalize rows of (n, d) by batch stats (training) or running stats.

    Training mode requires n >= 2 and, unless `update_stats` is False, folds
    the batch statistics into the running estimates (unbiased variance,
    torch-style exponential average).
    """
    if x.value.ndim != 2:
        raise ValueError("batchnorm expects an (n, d) tensor")
    n = x.value.shape[0]
    if training:
        if n < 2:
            raise ValueError("batchnorm in training mode needs n >= 2")
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        if update_stats is None or update_stats:
            unbiased = var * n / (n - 1)
            state.mean *= 1.0 - momentum
            state.mean += momentum * mu
            state.var *= 1.0 - momentum
            state.var += momentum * unbiased
    else:
        mu = state.mean
        var = state.var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * ivar
    y = Tensor(gamma.value * xhat + beta.value)

    def bwd(g):
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        dxhat = g * gamma.value
        if training:
            gx = (ivar / n) * (
                n * dxhat
                - dxhat.sum(axis=0)
                - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            gx = dxhat * ivar
        _accum(x, gx)

    _record(y, (x, gamma, beta), bwd)
    return y


def dual_batchnorm(
    x: Tensor,
    branch: str,
    gamma: Tensor,
    beta: Tensor,
    state: DualBatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool | None = None,
) -> Tensor:
    """Batch-norm whose running statistics never mix between real and fake."""
    return batchnorm(
        x, gamma, beta, state[branch], training, momentum, eps, update_stats
    )


# ---------------------------------------------------------------------------
# Elementwise / reduction primitives
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ValueError(
            f"{op} operands must share a shape: {a.value.shape} vs {b.value.shape}"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    y = Tensor(a.value + b.value)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    _record(y, (a, b), bwd)
    return y


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    y = Tensor(a.value - b.value)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    _record(y, (a, b), bwd)
    return y


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    y = Tensor(a.value * b.value)

    def bwd(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    _record(y, (a, b), bwd)
    return y


def scale(x: Tensor, c: float) -> Tensor:
    y = Tensor(x.value * c)

    def bwd(g):
        _accum(x, g * c)

    _record(y, (x,), bwd)
    return y


def add_scalar(x: Tensor, c: float) -> Tensor:
    y = Tensor(x.value + c)

    def bwd(g):
        _accum(x, g)

    _record(y, (x,), bwd)
    return y


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    y = Tensor(x.value.sum())

    def bwd(g):
        _accum(x, np.full_like(x.value, float(g)))

    _record(y, (x,), bwd)
    return y


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    y = Tensor(x.value.mean())

    def bwd(g):
        _accum(x, np.full_like(x.value, float(g) / n))

    _record(y, (x,), bwd)
    return y


def abs_(x: Tensor) -> Tensor:
    y = Tensor(np.abs(x.value))
    sgn = np.sign(x.value)

    def bwd(g):
        _accum(x, g * sgn)

    _record(y, (x,), bwd)
    return y


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    y = Tensor(np.clip(x.value, lo, hi))
    mask = (x.value > lo) & (x.value < hi)

    def bwd(g):
        _accum(x, g * mask)

    _record(y, (x,), bwd)
    return y


def log(x: Tensor) -> Tensor:
    y = Tensor(np.log(x.value))

    def bwd(g):
        _accum(x, g / x.value)

    _record(y, (x,), bwd)
    return y


def square(x: Tensor) -> Tensor:
    y = Tensor(x.value * x.value)

    def bwd(g):
        _accum(x, 2.0 * g * x.value)

    _record(y, (x,), bwd)
    return y


def norm2(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Euclidean norm with a zero (sub)gradient at the origin."""
    v = float(np.sqrt(np.sum(x.value * x.value)))
    y = Tensor(v)

    def bwd(g):
        _accum(x, float(g) * x.value / max(v, eps))

    _record(y, (x,), bwd)
    return y


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate (n, d_i) blocks along the feature axis."""
    if not parts:
        raise ValueError("concat_cols of an empty list")
    n = parts[0].value.shape[0]
    for p in parts:
        if p.value.ndim != 2 or p.value.shape[0] != n:
            raise ValueError("concat_cols expects (n, d_i) blocks with equal n")
    widths = [p.value.shape[1] for p in parts]
    y = Tensor(np.concatenate([p.value for p in parts], axis=1))
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    _record(y, tuple(parts), bwd)
    return y


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Tile a (d,) vector into (n, d); gradient sums over rows."""
    if v.value.ndim != 1:
        raise ValueError("expand_rows expects a (d,) vector")
    y = Tensor(np.tile(v.value, (n, 1)))

    def bwd(g):
        _accum(v, g.sum(axis=0))

    _record(y, (v,), bwd)
    return y


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    y = Tensor(x.value.reshape(shape))
    old = x.value.shape

    def bwd(g):
        _accum(x, g.reshape(old))

    _record(y, (x,), bwd)
    return y
