"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery for a small vision transformer: row-major numpy
storage, a recording tape, and backward rules for every primitive the
model uses. Training runs in float32; gradient checks cast everything
to float64 for headroom.

Conventions: tokens are rows, features are columns. Ops record onto the
innermost active ``Tape`` (opened as a context manager). With no active
tape the same functions run gradient-free, which is how the teacher
branch is evaluated.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ParameterError, ShapeError, TapeError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Inputs of every node were recorded before the node itself, so a
    single reverse sweep implements backpropagation. A tape is consumed
    by ``backward``; replaying it is an error.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grad buffers of every requires_grad leaf under ``loss``."""
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(n.out is loss for n in tape.nodes):
        raise TapeError("loss tensor is not an output recorded on this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            inp.accumulate_grad(ig)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a bias vector matching a's last axis, or a scalar."""
    if b.shape != a.shape and not (b.ndim == 1 and b.shape[0] == a.shape[-1]) and b.ndim != 0:
        raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        ga = g
        if b.shape == a.shape:
            gb = g
        elif b.ndim == 0:
            gb = g.sum().reshape(())
        else:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return ga, gb

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g):
        return (g * c,)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or 3-D with equal leading (batch) dims."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return g @ bt, at @ g

    return _record(out, (a, b), bwd)


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (a,), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select (and possibly reorder) rows of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    widths = {p.shape[-1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: mismatched widths {sorted(widths)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        grads = []
        off = 0
        for n in sizes:
            grads.append(g[off : off + n])
            off += n
        return tuple(grads)

    return _record(out, tuple(parts), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum().reshape(()))

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), bwd)


def sum_rows(a: Tensor) -> Tensor:
    """Column sums of a 2-D tensor (reduce over axis 0)."""
    if a.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-D tensor, got {a.shape}")
    out = Tensor(a.data.sum(axis=0))

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    e = erf(x * _INV_SQRT2)
    out = Tensor(0.5 * x * (1.0 + e))

    def bwd(g):
        d = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * d,)

    return _record(out, (a,), bwd)


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of x/temperature over the last axis.

    Max-subtraction keeps the exponentials bounded for inputs with
    magnitude up to ~1e4.
    """
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        s = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - s) / temperature,)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {n}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        dxhat = g * gain.data
        # standard layer-norm backward, reductions over the last axis
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm."""
    sq = (x.data * x.data).sum(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    y = x.data * inv
    out = Tensor(y)

    def bwd(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        return ((g - x.data * (dot * inv * inv)) * inv,)

    return _record(out, (x,), bwd)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -sum(target * log softmax(logits)).

    ``targets`` is either an int array of class indices (hard targets)
    or a row-stochastic float matrix (soft targets). Targets never
    receive gradients.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    m, n = logits.shape
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    p = np.exp(z - lse)

    t = np.asarray(targets)
    if np.issubdtype(t.dtype, np.integer):
        if t.shape != (m,):
            raise ShapeError(f"cross_entropy: index targets shape {t.shape}, expected ({m},)")
        if t.min(initial=0) < 0 or t.max(initial=0) >= n:
            raise IndexError(f"cross_entropy: class index outside [0, {n})")
        loss_rows = lse[:, 0] - z[np.arange(m), t]
        y = np.zeros_like(z)
        y[np.arange(m), t] = 1.0
    else:
        if t.shape != (m, n):
            raise ShapeError(f"cross_entropy: soft targets shape {t.shape}, expected {(m, n)}")
        sums = t.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-4):
            raise ParameterError("cross_entropy: soft target rows must sum to 1")
        y = t.astype(z.dtype)
        loss_rows = (y * (lse - z)).sum(axis=1)
    out = Tensor(np.asarray(loss_rows.mean(), dtype=z.dtype).reshape(()))

    def bwd(g):
        return ((p - y) * (g / m),)

    return _record(out, (logits,), bwd)


def assert_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Checked pass-through: raises if any value is NaN/Inf."""
    if not np.isfinite(t.data).all():
        raise ContractError(f"non-finite values in {name}")
    return t


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    coords: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic (verified with two baseline evaluations)
    and map a single tensor to a scalar. ``coords`` optionally restricts
    the sweep to a subset of flat coordinates, which keeps large
    parameter tensors tractable. Run this with float64 tensors.
    """
    if not (1e-6 <= eps <= 1e-2):
        raise ParameterError(f"finite-difference eps {eps} outside [1e-6, 1e-2]")
    base1 = f(Tensor(x.data.copy(), dtype=x.dtype)).item()
    base2 = f(Tensor(x.data.copy(), dtype=x.dtype)).item()
    if base1 != base2:
        raise ContractError("finite_difference_check: f is not deterministic")

    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        loss = f(probe)
    backward(tape, loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.reshape(-1)

    flat = x.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    worst = 0.0
    for i in np.asarray(coords, dtype=np.int64):
        pert = flat.copy()
        pert[i] = flat[i] + eps
        hi = f(Tensor(pert.reshape(x.shape), dtype=x.dtype)).item()
        pert[i] = flat[i] - eps
        lo = f(Tensor(pert.reshape(x.shape), dtype=x.dtype)).item()
        cd = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - cd) / (abs(analytic[i]) + abs(cd) + 1e-12)
        worst = max(worst, err)
    return worst
