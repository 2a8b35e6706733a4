"""Gradient checks, LSTM-equivalence oracles and boundary-trace introspection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .cell import LayerState, cell_step, init_layer_params
from .errors import UsageError
from .network import Model, initial_state, sequence_nll, step
from .numerics import Tensor
from .trace import BoundaryTrace

UPDATE, COPY, FLUSH = "UPDATE", "COPY", "FLUSH"


# -- operation counting -------------------------------------------------------

def classify_branch(z_prev: float, z_below: float) -> str:
    if z_prev == 1:
        return FLUSH
    return UPDATE if z_below == 1 else COPY


@dataclass
class OpCounts:
    update: np.ndarray
    copy: np.ndarray
    flush: np.ndarray
    steps: int

    @classmethod
    def from_update_totals(cls, totals, steps: int) -> "OpCounts":
        """Counts known only as UPDATE+FLUSH totals per layer."""
        totals = np.asarray(totals, dtype=np.int64)
        return cls(totals.copy(), steps - totals, np.zeros_like(totals), steps)

    @property
    def num_layers(self) -> int:
        return len(self.update)

    @property
    def updates(self) -> np.ndarray:
        """UPDATE + FLUSH per layer: the steps where a layer did any work."""
        return self.update + self.flush

    @property
    def total_updates(self) -> int:
        return int(self.updates.sum())

    @property
    def baseline(self) -> int:
        return self.num_layers * self.steps

    @property
    def reduction(self) -> float:
        return 1.0 - self.total_updates / self.baseline

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(self.update + other.update, self.copy + other.copy, self.flush + other.flush,
                        self.steps + other.steps)

    def as_dict(self) -> dict:
        return {"update": self.update.tolist(), "copy": self.copy.tolist(), "flush": self.flush.tolist(),
                "steps": self.steps, "total_updates": self.total_updates, "reduction": self.reduction}

    def summary(self) -> str:
        lines = [f"layer {k + 1}: UPDATE {u:5d}  COPY {c:5d}  FLUSH {f:5d}"
                 for k, (u, c, f) in enumerate(zip(self.update, self.copy, self.flush))]
        lines.append(f"total updates {self.total_updates} of {self.baseline} "
                     f"({100 * self.reduction:.1f}% reduction)")
        return "\n".join(lines)


def count_ops(trace: BoundaryTrace) -> OpCounts:
    if trace.mode == "soft":
        raise UsageError("operation counts need binary boundaries (step or sample mode)")
    L, T = trace.num_layers, trace.length
    counts = np.zeros((3, L), dtype=np.int64)
    for k in range(L):
        below = np.ones(T) if k == 0 else trace.z[k - 1]
        if k < L - 1:
            prev = np.concatenate([[trace.z_init[k]], trace.z[k, :-1]])
        else:
            prev = np.zeros(T)
        flush = prev == 1
        update = ~flush & (below == 1)
        counts[0, k] = update.sum()
        counts[2, k] = flush.sum()
        counts[1, k] = T - counts[0, k] - counts[2, k]
    return OpCounts(counts[0], counts[1], counts[2], T)


# -- rendering ------------------------------------------------------------------

_VISIBLE = {"\n": "¶", "\t": "→", "\r": "¶"}


def _text_row(trace: BoundaryTrace, decode) -> str:
    text = trace.text
    if not isinstance(text, str):
        text = decode(text) if decode is not None else "".join("?" for _ in text)
    text = "".join(_VISIBLE.get(ch, ch) for ch in text)
    return text.ljust(trace.length)[:trace.length]


def render_trace(trace: BoundaryTrace, width: int = 90, decode=None) -> str:
    """Boundary rows ('#' fired, '.' not), highest layer on top, above the text.

    Long traces wrap into panels of ``width`` columns separated by blank lines.
    """
    if width < 1:
        raise UsageError("width must be positive")
    fired = trace.z > 0.5
    rows = ["".join("#" if b else "." for b in fired[k]) for k in range(fired.shape[0] - 1, -1, -1)]
    text = _text_row(trace, decode)
    panels = []
    for start in range(0, trace.length, width):
        panel = [r[start:start + width] for r in rows] + [text[start:start + width]]
        panels.append("\n".join(panel))
    return "\n\n".join(panels)


def parse_rendered(block: str, boundary_rows: int) -> np.ndarray:
    """Recover the boundary bits from :func:`render_trace` output."""
    panels = block.split("\n\n") if block else []
    rows: list[list[str]] = [[] for _ in range(boundary_rows)]
    for panel in panels:
        lines = panel.split("\n")
        for k in range(boundary_rows):
            rows[k].append(lines[k])
    bits = [[ch == "#" for ch in "".join(r)] for r in rows]
    return np.array(bits[::-1], dtype=np.float64).reshape(boundary_rows, -1)


def norm_heatmap(trace: BoundaryTrace) -> np.ndarray:
    return trace.norms.copy()


def heatmap_table(matrix: np.ndarray, delimiter: str = "\t") -> str:
    """One line per layer; values printed with full round-trip precision."""
    return "\n".join(delimiter.join([f"layer{k + 1}"] + [repr(float(v)) for v in row])
                     for k, row in enumerate(np.asarray(matrix)))


def space_firing_rates(trace: BoundaryTrace, space_symbol: int, layer: int = 1) -> tuple[float, float]:
    """Firing rate of a layer's boundary at space-adjacent steps vs overall.

    A step is space-adjacent when its input is a space or the next input is.
    """
    text = np.asarray(trace.text)
    z = trace.z[layer - 1] > 0.5
    is_space = text == space_symbol
    adjacent = is_space.copy()
    adjacent[:-1] |= is_space[1:]
    if not adjacent.any():
        return float("nan"), float(z.mean())
    return float(z[adjacent].mean()), float(z.mean())


# -- gradient checking --------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    max_abs_error: float = 0.0
    skipped: list[tuple[str, int]] = field(default_factory=list)
    worst: list[tuple[str, int, float, float, float]] = field(default_factory=list)
    resampled: int = 0

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol

    def format(self, top: int = 5) -> str:
        lines = [f"checked {self.checked} coordinates, skipped {len(self.skipped)}, "
                 f"max relative error {self.max_rel_error:.3e} (max abs {self.max_abs_error:.3e})"]
        for name, idx, a, n, r in self.worst[:top]:
            lines.append(f"  {name}[{idx}]: analytic {a:+.10e} numeric {n:+.10e} rel {r:.3e}")
        return "\n".join(lines)


# Central differences at eps=1e-5 resolve a derivative only to about
# 2e-16 * |loss| / eps ~ 1e-11; below this scale the denominator is clamped,
# which turns the test into an absolute one (1e-10 at tol 1e-5).
REL_ERROR_FLOOR = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = REL_ERROR_FLOOR) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return 0.0 if scale == 0.0 else abs(analytic - numeric) / scale


def _kink_distance(watched) -> float:
    best = math.inf
    for kind, x, a in watched:
        if kind == "relu":
            best = min(best, float(np.abs(x).min()))
        elif kind == "hard_sigm":
            best = min(best, float(np.abs(np.abs(x) - 1.0 / a).min()))
    return best


def _kink_sides(watched) -> list[np.ndarray]:
    sides = []
    for kind, x, a in watched:
        if kind == "relu":
            sides.append(np.sign(x))
        elif kind == "hard_sigm":
            sides.append(np.sign(x - 1.0 / a) + np.sign(x + 1.0 / a))
    return sides


def gradcheck(model: Model, probes: int = 200, eps: float = 1e-5, window: int = 4, seed: int = 0,
              slope: float = 1.0, kink_margin: float = 1e-3, retries: int = 20) -> GradcheckReport:
    """Compare tape gradients of the window NLL with central differences.

    Runs in soft mode at float64.  Windows whose activations sit within
    ``kink_margin`` of a ReLU/hard-sigmoid kink are redrawn; a coordinate whose
    perturbation still moves an activation across a kink is skipped.
    """
    if model.config.mode != "soft":
        raise UsageError("gradcheck needs a soft-mode model; hard boundaries have no exact gradient")
    if model.config.dtype != "float64":
        raise UsageError("gradcheck needs float64 parameters")
    rng = np.random.default_rng(seed)
    K = model.config.vocab_size

    def run(symbols):
        with nx.watch_activations() as seen:
            loss = sequence_nll(model, symbols, None, slope, keep_trace=False).loss.item()
        return loss, seen

    resampled = 0
    symbols = rng.integers(0, K, size=window + 1)
    for _ in range(retries):
        if _kink_distance(run(symbols)[1]) >= kink_margin:
            break
        resampled += 1
        symbols = rng.integers(0, K, size=window + 1)

    params = model.parameters()
    for t in params.values():
        t.grad = None
    with nx.Tape() as tape:
        res = sequence_nll(model, symbols, None, slope, keep_trace=False)
    tape.backward(res.loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}

    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(probes, offsets[-1]), replace=False)

    report = GradcheckReport(0.0, 0, resampled=resampled)
    rows = []
    for flat in sorted(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[k], int(flat - offsets[k])
        view = params[name].data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        up, seen_up = run(symbols)
        view[idx] = orig - eps
        down, seen_down = run(symbols)
        view[idx] = orig
        if any(not np.array_equal(a, b) for a, b in zip(_kink_sides(seen_up), _kink_sides(seen_down))):
            report.skipped.append((name, idx))
            continue
        numeric = (up - down) / (2 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        rows.append((name, idx, a, numeric, relative_error(a, numeric)))
    rows.sort(key=lambda r: -r[4])
    report.worst = rows
    report.checked = len(rows)
    report.max_rel_error = rows[0][4] if rows else float("nan")
    report.max_abs_error = max((abs(r[2] - r[3]) for r in rows), default=float("nan"))
    return report


# -- LSTM equivalence oracles ---------------------------------------------------

def plain_lstm(W_x: np.ndarray, U: np.ndarray, b: np.ndarray, xs: np.ndarray,
               h0: np.ndarray | None = None, c0: np.ndarray | None = None):
    """Textbook LSTM with rows [f, i, o, g]; returns per-step h and c."""
    d = U.shape[1]
    h = np.zeros(d) if h0 is None else h0.copy()
    c = np.zeros(d) if c0 is None else c0.copy()
    hs, cs = [], []
    for x in xs:
        a = W_x @ x + U @ h + b
        f = 1.0 / (1.0 + np.exp(-a[:d]))
        i = 1.0 / (1.0 + np.exp(-a[d:2 * d]))
        o = 1.0 / (1.0 + np.exp(-a[2 * d:3 * d]))
        g = np.tanh(a[3 * d:4 * d])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs.append(h)
        cs.append(c)
    return np.array(hs), np.array(cs)


def lstm_oracle_compare(seed: int = 0, dim: int = 8, input_dim: int = 5, steps: int = 20,
                        force: bool = True, zero_params: bool = False) -> float:
    """Max |dh|, |dc| between a forced-UPDATE HM-LSTM layer and :func:`plain_lstm`.

    A middle layer is used with a random top-down input; with the layer's own
    boundary pinned to 0 the top-down term never opens.  ``force=False`` lets
    the boundary run free (the comparison should then diverge).
    """
    rng = np.random.default_rng(seed)
    params = init_layer_params(rng, dim, input_dim, dim, layer_norm=False)
    if zero_params:
        for t in params.tensors().values():
            t.data[...] = 0.0
    else:
        params.b.data[:] = rng.uniform(-1, 1, size=params.b.shape)
    xs = rng.normal(size=(steps, input_dim))
    h_above = rng.normal(size=(steps, dim))
    state = LayerState(Tensor(np.zeros(dim)), Tensor(np.zeros(dim)), Tensor(np.zeros(1)))
    hs, cs = [], []
    for t in range(steps):
        state = cell_step(params, state, Tensor(xs[t]), 1.0, Tensor(h_above[t]), "step", 1.0,
                          force_z=0.0 if force else None)
        hs.append(state.h.data.copy())
        cs.append(state.c.data.copy())
    rows = slice(0, 4 * dim)
    ref_h, ref_c = plain_lstm(params.W_bottomup.data[rows], params.U_recurrent.data[rows], params.b.data[rows], xs)
    return float(max(np.abs(np.array(hs) - ref_h).max(), np.abs(np.array(cs) - ref_c).max()))


def stacked_lstm_oracle_compare(model: Model, symbols) -> float:
    """Max state deviation between the forced-UPDATE stack and a plain stacked LSTM."""
    if model.config.layer_norm:
        raise UsageError("the stacked-LSTM oracle has no layer normalization")
    symbols = np.asarray(symbols)
    state = initial_state(model)
    ours_h = [[] for _ in model.layers]
    ours_c = [[] for _ in model.layers]
    for x in symbols:
        state, _, _ = step(model, int(x), state, 1.0, force_update=True, mode="step")
        for k, s in enumerate(state):
            ours_h[k].append(s.h.data.copy())
            ours_c[k].append(s.c.data.copy())
    inputs = model.embedding.data[:, symbols].T
    worst = 0.0
    for k, layer in enumerate(model.layers):
        rows = slice(0, 4 * layer.dim)
        ref_h, ref_c = plain_lstm(layer.W_bottomup.data[rows], layer.U_recurrent.data[rows],
                                  layer.b.data[rows], inputs)
        worst = max(worst, np.abs(np.array(ours_h[k]) - ref_h).max(), np.abs(np.array(ours_c[k]) - ref_c).max())
        inputs = ref_h
    return float(worst)
