"""One HM-LSTM layer: gates, boundary binarization and UPDATE/COPY/FLUSH.

Gate rows of the pre-activation are laid out as ``[f | i | o | g | z]``, each
``d`` wide except the single boundary row, which the top layer does not have.

In the hard modes (``step``/``sample``) the forward pass selects exactly one
branch per lane.  The backward pass of that selection uses the multilinear
form of the branch table, so together with the straight-through binarizer the
boundary decisions receive gradient both through the gated top-down and
bottom-up terms and through the choice of branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InvariantError, UsageError
from .numerics import Tensor

MODES = ("step", "sample", "soft")
HARD_MODES = ("step", "sample")


@dataclass
class LayerState:
    h: Tensor
    c: Tensor
    z: Tensor  # (1,) for a single sequence, (B, 1) for a batch

    def detach(self) -> "LayerState":
        return LayerState(self.h.detach(), self.c.detach(), self.z.detach())


@dataclass
class GateBundle:
    f: Tensor
    i: Tensor
    o: Tensor
    g: Tensor
    z_tilde: Tensor | None
    z_pre: Tensor | None


@dataclass
class LayerParams:
    U_recurrent: Tensor
    U_topdown: Tensor | None
    W_bottomup: Tensor
    b: Tensor
    ln_recurrent: Tensor | None = None
    ln_topdown: Tensor | None = None
    ln_bottomup: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.U_recurrent.shape[1]

    @property
    def is_top(self) -> bool:
        return self.U_topdown is None

    @property
    def layer_norm(self) -> bool:
        return self.ln_recurrent is not None

    def validate(self) -> None:
        d = self.dim
        rows = 4 * d + (0 if self.is_top else 1)
        mats = [self.U_recurrent, self.W_bottomup] + ([] if self.is_top else [self.U_topdown])
        if any(m.shape[0] != rows for m in mats) or self.b.shape != (rows,):
            raise ConfigError(f"layer of width {d} needs {rows} pre-activation rows")
        if self.U_recurrent.shape != (rows, d):
            raise ConfigError("recurrent matrix must be square in the hidden width")

    def tensors(self) -> dict[str, Tensor]:
        named = {
            "U_recurrent": self.U_recurrent,
            "U_topdown": self.U_topdown,
            "W_bottomup": self.W_bottomup,
            "b": self.b,
            "ln_recurrent": self.ln_recurrent,
            "ln_topdown": self.ln_topdown,
            "ln_bottomup": self.ln_bottomup,
        }
        return {k: v for k, v in named.items() if v is not None}


def init_layer_params(rng: np.random.Generator, dim: int, dim_below: int, dim_above: int | None,
                      layer_norm: bool = False, dtype=np.float64) -> LayerParams:
    """Uniform(+-sqrt(1/fan_in)) weights, forget-gate bias 1, everything else 0."""
    rows = 4 * dim + (0 if dim_above is None else 1)

    def uniform(fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=(rows, fan_in)), requires_grad=True, dtype=dtype)

    U_rec = uniform(dim)
    U_td = None if dim_above is None else uniform(dim_above)
    W_bu = uniform(dim_below)
    b = np.zeros(rows)
    b[:dim] = 1.0
    gains = [None, None, None]
    if layer_norm:
        gains = [Tensor(np.ones(4 * dim), requires_grad=True, dtype=dtype) for _ in range(3)]
        if dim_above is None:
            gains[1] = None
    return LayerParams(U_rec, U_td, W_bu, Tensor(b, requires_grad=True, dtype=dtype), *gains)


def boundary(value, like: Tensor) -> Tensor:
    """Coerce a boundary value to the ``(..., 1)`` column matching ``like``."""
    if isinstance(value, Tensor):
        if value.shape == like.shape[:-1] + (1,):
            return value
        value = value.data
    arr = np.broadcast_to(np.asarray(value, dtype=like.dtype), like.shape[:-1] + (1,))
    return Tensor(arr.copy(), dtype=like.dtype)


def _normalize_gate_rows(raw: Tensor, gain: Tensor | None, dim: int) -> Tensor:
    if gain is None:
        return raw
    if raw.shape[-1] == 4 * dim:
        return nx.layer_norm(raw, gain)
    # the boundary row stays un-normalized
    gates = nx.layer_norm(nx.slice_last(raw, 0, 4 * dim), gain)
    return nx.concat_last([gates, nx.slice_last(raw, 4 * dim, 4 * dim + 1)])


def preactivation(params: LayerParams, h_prev: Tensor, z_prev, h_below: Tensor, z_below,
                  h_above_prev: Tensor | None) -> Tensor:
    """Recurrent + z_prev-gated top-down + z_below-gated bottom-up terms plus bias."""
    if params.is_top != (h_above_prev is None):
        raise UsageError("top-down input is required for every layer except the top one")
    d = params.dim
    z_prev = boundary(z_prev, h_prev)
    z_below = boundary(z_below, h_prev)
    terms = [
        _normalize_gate_rows(nx.affine(params.U_recurrent, h_prev), params.ln_recurrent, d),
        nx.mul(z_below, _normalize_gate_rows(nx.affine(params.W_bottomup, h_below), params.ln_bottomup, d)),
    ]
    if not params.is_top:
        terms.append(nx.mul(z_prev, _normalize_gate_rows(nx.affine(params.U_topdown, h_above_prev),
                                                         params.ln_topdown, d)))
    return nx.add(nx.add_n(terms), params.b)


def compute_gates(params: LayerParams, h_prev: Tensor, z_prev, h_below: Tensor, z_below,
                  h_above_prev: Tensor | None, slope: float) -> GateBundle:
    if not slope > 0:
        raise ConfigError(f"slope must be positive, got {slope}")
    d = params.dim
    s = preactivation(params, h_prev, z_prev, h_below, z_below, h_above_prev)
    sig = nx.sigm(nx.slice_last(s, 0, 3 * d))
    f = nx.slice_last(sig, 0, d)
    i = nx.slice_last(sig, d, 2 * d)
    o = nx.slice_last(sig, 2 * d, 3 * d)
    g = nx.tanh(nx.slice_last(s, 3 * d, 4 * d))
    if params.is_top:
        return GateBundle(f, i, o, g, None, None)
    z_pre = nx.slice_last(s, 4 * d, 4 * d + 1)
    return GateBundle(f, i, o, g, nx.hard_sigm(z_pre, slope), z_pre)


def binarize(z_tilde, mode: str, rng: np.random.Generator | None = None):
    """Turn the boundary probability into a boundary value.

    ``step`` fires iff ``z_tilde > 0.5``; ``sample`` draws Bernoulli(z_tilde);
    ``soft`` returns ``z_tilde``.  Hard modes backpropagate straight through.
    Plain floats in give plain floats out.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown boundary mode {mode!r}")
    scalar = not isinstance(z_tilde, Tensor)
    zt = nx.as_tensor(np.atleast_1d(np.asarray(z_tilde, dtype=np.float64))) if scalar else z_tilde
    if np.any(zt.data < 0.0) or np.any(zt.data > 1.0):
        raise InvariantError("boundary probability outside [0, 1]")
    if mode == "soft":
        out = zt
    elif mode == "step":
        out = nx.straight_through(zt, (zt.data > 0.5).astype(zt.dtype))
    else:
        if rng is None:
            raise UsageError("sample mode needs a random generator")
        out = nx.straight_through(zt, (rng.random(zt.shape) < zt.data).astype(zt.dtype))
    return float(out.data.reshape(-1)[0]) if scalar else out


def straight_through_grad(upstream, z_pre, slope: float):
    """Gradient reaching the boundary pre-activation through step + hard sigmoid."""
    return np.asarray(upstream) * nx.hard_sigm_grad(np.asarray(z_pre, dtype=np.float64), slope)


def branch_select(z_prev: Tensor, z_below: Tensor, copy: Tensor, update: Tensor, flush: Tensor,
                  hard: bool) -> Tensor:
    """Pick COPY / UPDATE / FLUSH per lane.

    Hard: exact selection (COPY returns ``copy`` bit for bit).  Soft:
    ``(1-zp)*(zb*update + (1-zb)*copy) + zp*flush``.  The backward rule is the
    derivative of the soft form in both cases.
    """
    zp, zb = z_prev.data, z_below.data
    if hard:
        out = np.where(zp == 1.0, flush.data, np.where(zb == 1.0, update.data, copy.data))
    else:
        out = (1.0 - zp) * (zb * update.data + (1.0 - zb) * copy.data) + zp * flush.data
    cd, ud, fd = copy.data, update.data, flush.data

    def backward_fn(g):
        keep = 1.0 - zp
        d_zp = d_zb = None
        if z_prev.requires_grad:
            d_zp = nx._unbroadcast((g * (fd - zb * ud - (1.0 - zb) * cd)).sum(axis=-1, keepdims=True), zp.shape)
        if z_below.requires_grad:
            d_zb = nx._unbroadcast((g * keep * (ud - cd)).sum(axis=-1, keepdims=True), zb.shape)
        return (
            d_zp,
            d_zb,
            g * (keep * (1.0 - zb)) if copy.requires_grad else None,
            g * (keep * zb) if update.requires_grad else None,
            g * zp if flush.requires_grad else None,
        )

    return nx.apply("branch_select", out, (z_prev, z_below, copy, update, flush), backward_fn)


def _check_binary(z: Tensor, what: str) -> None:
    if not np.all((z.data == 0.0) | (z.data == 1.0)):
        raise UsageError(f"{what} must be 0 or 1 in hard boundary modes")


def cell_step(params: LayerParams, prev: LayerState, h_below: Tensor, z_below, h_above_prev: Tensor | None,
              mode: str, slope: float, rng: np.random.Generator | None = None,
              force_z: float | None = None) -> LayerState:
    """Advance one layer by one time step.

    ``force_z`` overrides the layer's own new boundary (used to pin a layer
    to plain LSTM behaviour).  The top layer's boundary is always 0.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown boundary mode {mode!r}")
    if prev.h.shape != prev.c.shape or prev.h.shape[-1] != params.dim:
        raise UsageError(f"state shape {prev.h.shape} does not match layer width {params.dim}")
    hard = mode in HARD_MODES
    z_prev = boundary(prev.z, prev.h)
    z_below = boundary(z_below, prev.h)
    if hard:
        _check_binary(z_prev, "previous boundary")
        _check_binary(z_below, "boundary from below")
        copying = (z_prev.data == 0.0) & (z_below.data == 0.0)
        # gates are only needed for a lane that updates/flushes, or for the
        # branch-choice gradient while a tape is recording
        if copying.all() and nx.no_grad_enabled():
            return LayerState(prev.h, prev.c, z_prev)

    gates = compute_gates(params, prev.h, z_prev, h_below, z_below, h_above_prev, slope)
    ig = nx.mul(gates.i, gates.g)
    c_update = nx.add(nx.mul(gates.f, prev.c), ig)
    c = branch_select(z_prev, z_below, prev.c, c_update, ig, hard)
    h_cand = nx.mul(gates.o, nx.tanh(c))
    h = branch_select(z_prev, z_below, prev.h, h_cand, h_cand, hard)

    if force_z is not None:
        z = boundary(float(force_z), prev.h)
    elif params.is_top:
        z = boundary(0.0, prev.h)
    else:
        z_hat = binarize(gates.z_tilde, mode, rng)
        z = branch_select(z_prev, z_below, z_prev, z_hat, z_hat, hard)
    return LayerState(h, c, z)
