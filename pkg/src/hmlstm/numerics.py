"""Dense tensors with a reverse-mode differentiation tape.

Every primitive computes its forward value with numpy and, when a tape is
active and any input requires a gradient, records a closure that maps the
output gradient to input gradients.  Activations look their derivative up in
``ACTIVATION_GRADS`` so tests can swap a rule out and watch gradcheck fail.

Arrays are either a single vector ``(n,)`` or a batch of row vectors
``(B, n)``; boundary values ride along as ``(1,)`` / ``(B, 1)`` columns and
broadcast against the rows.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError, UsageError

DEFAULT_DTYPE = np.float64

_tape_stack: list["Tape"] = []


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)


def _not_scalar(t: Tensor):
    raise UsageError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of primitive ops; use as a context manager.

    Ops are appended as they run, so inputs always precede their consumers and
    one reverse sweep visits each op exactly once.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable, name: str) -> None:
        self._ops.append((out, inputs, backward, name))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf that requires a gradient.

        Gradients are stored on ``leaf.grad`` (added to any existing value) and
        also returned keyed by leaf.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        owned: set[int] = set()  # buffers safe to accumulate into in place
        for out, inputs, backward_fn, _ in reversed(self._ops):
            g = grads.pop(id(out), None)
            leaves.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in grads:
                    grads[key] = gi
                    leaves[key] = t
                elif key in owned:
                    grads[key] += gi
                else:
                    grads[key] = grads[key] + gi
                    owned.add(key)
        # anything still holding a gradient was never produced by a recorded op
        result: dict[Tensor, np.ndarray] = {}
        for key, g in grads.items():
            leaf = leaves[key]
            if not leaf.requires_grad:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def apply(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward value and register its backward rule on the active tape."""
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"non-finite value produced by {name}")
    tape = _tape_stack[-1] if _tape_stack else None
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs_grad
    out.name = None
    if needs_grad:
        tape.record(out, tuple(inputs), backward_fn, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return apply("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    terms = [as_tensor(t) for t in terms]
    if not terms:
        raise UsageError("add_n needs at least one term")
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise DimensionError("add_n: all terms must share one shape")
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data
    return apply("add_n", out, terms, lambda g: (g,) * len(terms))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return apply("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return apply("mul", ad * bd, (a, b), backward_fn)


def affine(W: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x (+ b)`` for a vector ``x`` or each row of a batch ``x``."""
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: W {W.shape} incompatible with x {x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias {b.shape} does not match W {W.shape}")
    Wd, xd = W.data, x.data
    y = xd @ Wd.T
    if b is not None:
        y = y + b.data

    def backward_fn(g):
        if g.ndim == 1:
            dW = np.outer(g, xd) if W.requires_grad else None
        else:
            dW = g.T @ xd if W.requires_grad else None
        dx = g @ Wd if x.requires_grad else None
        if b is None:
            return dW, dx
        db = g if g.ndim == 1 else g.sum(axis=0)
        return dW, dx, db

    inputs = (W, x) if b is None else (W, x, b)
    return apply("affine", y, inputs, backward_fn)


def hard_sigm_value(x: np.ndarray, slope: float) -> np.ndarray:
    return np.clip((slope * x + 1.0) * 0.5, 0.0, 1.0)


def hard_sigm_grad(x: np.ndarray, slope: float) -> np.ndarray:
    """a/2 strictly inside (-1/a, 1/a), 0 elsewhere (kinks included)."""
    inside = (x > -1.0 / slope) & (x < 1.0 / slope)
    return np.where(inside, 0.5 * slope, 0.0)


def _sigm(x):
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


ACTIVATIONS: dict[str, Callable] = {
    "sigm": lambda x, a: _sigm(x),
    "tanh": lambda x, a: np.tanh(x),
    "relu": lambda x, a: np.maximum(x, 0.0),
    "hard_sigm": lambda x, a: hard_sigm_value(x, a),
}

# derivative rules as functions of (input, output, slope)
ACTIVATION_GRADS: dict[str, Callable] = {
    "sigm": lambda x, y, a: y * (1.0 - y),
    "tanh": lambda x, y, a: 1.0 - y * y,
    "relu": lambda x, y, a: (x > 0).astype(x.dtype),
    "hard_sigm": lambda x, y, a: hard_sigm_grad(x, a),
}


_activation_watchers: list[list] = []


@contextmanager
def watch_activations():
    """Collect ``(kind, input, slope)`` for every activation applied inside the block."""
    sink: list = []
    _activation_watchers.append(sink)
    try:
        yield sink
    finally:
        _activation_watchers.remove(sink)


def apply_activation(kind: str, x: Tensor, slope: float | None = None) -> Tensor:
    if kind not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}")
    if kind == "hard_sigm":
        if slope is None or not slope > 0:
            raise ConfigError(f"hard_sigm slope must be positive, got {slope}")
    x = as_tensor(x)
    xd = x.data
    for sink in _activation_watchers:
        sink.append((kind, xd, slope))
    y = ACTIVATIONS[kind](xd, slope)
    return apply(kind, y, (x,), lambda g: (g * ACTIVATION_GRADS[kind](xd, y, slope),))


def sigm(x: Tensor) -> Tensor:
    return apply_activation("sigm", x)


def tanh(x: Tensor) -> Tensor:
    return apply_activation("tanh", x)


def relu(x: Tensor) -> Tensor:
    return apply_activation("relu", x)


def hard_sigm(x: Tensor, slope: float) -> Tensor:
    return apply_activation("hard_sigm", x, slope)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice [{start}:{stop}] out of range for width {n}")
    shape, dtype = x.shape, x.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return apply("slice", x.data[..., start:stop], (x,), backward_fn)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    try:
        out = np.concatenate([p.data for p in parts], axis=-1)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None

    def backward_fn(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return apply("concat", out, parts, backward_fn)


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value`` in place of ``x``; backward passes the gradient unchanged."""
    if value.shape != x.shape:
        raise DimensionError("straight_through: replacement value must keep the shape")
    return apply("straight_through", np.asarray(value, dtype=x.dtype), (x,), lambda g: (g,))


def embedding(E: Tensor, symbols) -> Tensor:
    """Column lookup: ``E[:, s]`` for one symbol or a row per symbol in a batch."""
    idx = np.asarray(symbols)
    K = E.shape[1]
    if idx.dtype.kind not in "iu":
        raise UsageError("symbols must be integers")
    if np.any(idx < 0) or np.any(idx >= K):
        raise IndexError(f"symbol out of range for vocabulary of {K}")
    Ed = E.data

    def backward_fn(g):
        dE = np.zeros_like(Ed)
        if idx.ndim == 0:
            dE[:, int(idx)] += g
        else:
            np.add.at(dE.T, idx, g)
        return (dE,)

    return apply("embedding", Ed[:, idx].T.copy() if idx.ndim else Ed[:, int(idx)].copy(), (E,), backward_fn)


def layer_norm(v: Tensor, gain: Tensor, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    if gain.shape != (v.shape[-1],) or (bias is not None and bias.shape != gain.shape):
        raise DimensionError("layer_norm: gain/bias must match the normalized width")
    vd = v.data
    mu = vd.mean(axis=-1, keepdims=True)
    xc = vd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data
    if bias is not None:
        out = out + bias.data
    def backward_fn(g):
        dxhat = g * gain.data
        dv = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gx = g * xhat
        dgain = gx if gx.ndim == 1 else gx.sum(axis=0)
        if bias is None:
            return dv, dgain
        return dv, dgain, (g if g.ndim == 1 else g.sum(axis=0))

    inputs = (v, gain) if bias is None else (v, gain, bias)
    return apply("layer_norm", out, inputs, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return apply("sum", np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def scale(x: Tensor, factor: float) -> Tensor:
    return apply("scale", x.data * factor, (x,), lambda g: (g * factor,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, target, weight: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    For a batch the per-row losses are summed.  ``weight`` multiplies the
    returned loss (used to average over a window without extra ops).
    Returns the scalar loss tensor and the probabilities.
    """
    K = logits.shape[-1]
    if K < 2:
        raise UsageError("softmax_xent needs at least two classes")
    tgt = np.asarray(target)
    if np.any(tgt < 0) or np.any(tgt >= K):
        raise IndexError(f"target out of range for {K} classes")
    ld = logits.data
    shifted = ld - ld.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    if ld.ndim == 1:
        nll = -log_probs[int(tgt)]
    else:
        nll = -log_probs[np.arange(ld.shape[0]), tgt].sum()

    def backward_fn(g):
        d = probs.copy()
        if ld.ndim == 1:
            d[int(tgt)] -= 1.0
        else:
            d[np.arange(ld.shape[0]), tgt] -= 1.0
        return (d * (g * weight),)

    loss = apply("softmax_xent", np.asarray(nll * weight, dtype=ld.dtype), (logits,), backward_fn)
    return loss, probs


def zeros(shape: Iterable[int] | int, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


def no_grad_enabled() -> bool:
    return not _tape_stack
