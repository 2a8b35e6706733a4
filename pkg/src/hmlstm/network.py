"""Stacked HM-LSTM language model: embedding, layer schedule, output module.

Within a time step layers run bottom-up.  Layer ``l`` reads ``h`` and ``z``
of layer ``l-1`` from the current step and ``h`` of layer ``l+1`` from the
previous step, so there is no cyclic dependency.  The input embedding acts as
layer 0 with a boundary that is always 1.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cell import MODES, LayerParams, LayerState, boundary, cell_step, init_layer_params
from .errors import ConfigError, UsageError
from .numerics import Tensor
from .trace import BoundaryTrace

LN2 = math.log(2.0)


@dataclass
class ModelConfig:
    layers: int = 3
    dims: list[int] = field(default_factory=lambda: [128, 128, 128])
    embed_dim: int = 128
    out_embed_dim: int = 128
    vocab_size: int = 2
    mode: str = "step"
    layer_norm: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.dims, int):
            self.dims = [self.dims] * self.layers
        self.dims = [int(d) for d in self.dims]
        self.validate()

    def validate(self) -> None:
        if self.layers < 2:
            raise ConfigError("an HM-LSTM needs at least two layers")
        if len(self.dims) != self.layers:
            raise ConfigError(f"{self.layers} layers but {len(self.dims)} widths")
        if min(self.dims + [self.embed_dim, self.out_embed_dim]) < 1:
            raise ConfigError("all widths must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary needs at least two symbols")
        if self.mode not in MODES:
            raise ConfigError(f"boundary mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")


@dataclass
class OutputParams:
    gate: Tensor  # (L, sum(dims)); row l is the gate vector of layer l
    proj: list[Tensor]  # L matrices (out_embed_dim, d_l)
    W: Tensor  # (K, out_embed_dim)
    b: Tensor  # (K,)


@dataclass
class Model:
    config: ModelConfig
    embedding: Tensor  # (embed_dim, K)
    layers: list[LayerParams]
    output: OutputParams

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        dt = np.dtype(config.dtype)
        L, dims = config.layers, config.dims

        def uniform(shape, fan_in):
            bound = math.sqrt(1.0 / fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dt)

        embedding = uniform((config.embed_dim, config.vocab_size), 1)
        layers = []
        for k in range(L):
            below = config.embed_dim if k == 0 else dims[k - 1]
            above = dims[k + 1] if k + 1 < L else None
            layers.append(init_layer_params(rng, dims[k], below, above, config.layer_norm, dt))
        output = OutputParams(
            gate=uniform((L, sum(dims)), sum(dims)),
            proj=[uniform((config.out_embed_dim, d), d) for d in dims],
            W=uniform((config.vocab_size, config.out_embed_dim), config.out_embed_dim),
            b=Tensor(np.zeros(config.vocab_size), requires_grad=True, dtype=dt),
        )
        return cls(config, embedding, layers, output)

    def parameters(self) -> dict[str, Tensor]:
        params = {"embed": self.embedding}
        for k, layer in enumerate(self.layers, start=1):
            for name, t in layer.tensors().items():
                params[f"layer{k}.{name}"] = t
        params["out.gate"] = self.output.gate
        for k, t in enumerate(self.output.proj, start=1):
            params[f"out.proj{k}"] = t
        params["out.W"] = self.output.W
        params["out.b"] = self.output.b
        return params

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "Model":
        dt = np.dtype(config.dtype)

        def get(name):
            return Tensor(np.array(arrays[name], dtype=dt), requires_grad=True) if name in arrays else None

        layers = []
        for k in range(1, config.layers + 1):
            p = f"layer{k}."
            layers.append(LayerParams(get(p + "U_recurrent"), get(p + "U_topdown"), get(p + "W_bottomup"),
                                      get(p + "b"), get(p + "ln_recurrent"), get(p + "ln_topdown"),
                                      get(p + "ln_bottomup")))
        output = OutputParams(get("out.gate"), [get(f"out.proj{k}") for k in range(1, config.layers + 1)],
                              get("out.W"), get("out.b"))
        model = cls(config, get("embed"), layers, output)
        model.validate()
        return model

    def validate(self) -> None:
        cfg = self.config
        if self.embedding.shape != (cfg.embed_dim, cfg.vocab_size):
            raise ConfigError("embedding shape does not match the config")
        if len(self.layers) != cfg.layers or len(self.output.proj) != cfg.layers:
            raise ConfigError("exactly one layer, output gate and projection per level")
        for k, layer in enumerate(self.layers):
            layer.validate()
            if layer.is_top != (k == cfg.layers - 1):
                raise ConfigError("only the top layer drops its boundary row and top-down matrix")
        if self.output.gate.shape != (cfg.layers, sum(cfg.dims)):
            raise ConfigError("output gate matrix must be (L, sum of widths)")

    def copy(self) -> "Model":
        arrays = {k: v.data.copy() for k, v in self.parameters().items()}
        return Model.from_arrays(self.config, arrays)


def initial_state(model: Model, batch: int | None = None) -> list[LayerState]:
    """All-zero ``h`` and ``c`` with ``z = 0`` ("mid-segment") for every layer."""
    dt = np.dtype(model.config.dtype)
    lead = () if batch is None else (batch,)
    return [LayerState(Tensor(np.zeros(lead + (d,), dtype=dt)), Tensor(np.zeros(lead + (d,), dtype=dt)),
                       Tensor(np.zeros(lead + (1,), dtype=dt)))
            for d in model.config.dims]


def detach_state(state: list[LayerState]) -> list[LayerState]:
    return [s.detach() for s in state]


def embed(symbol, model: Model) -> Tensor:
    return nx.embedding(model.embedding, symbol)


def step(model: Model, x_t, state: list[LayerState], slope: float,
         rng: np.random.Generator | None = None, force_update: bool = False,
         mode: str | None = None) -> tuple[list[LayerState], list[Tensor], list[Tensor]]:
    """One time step through the whole stack.

    ``force_update`` pins every layer to the UPDATE branch (boundary from
    below 1, own boundary 0), which turns the stack into a plain stacked LSTM.
    """
    mode = mode or model.config.mode
    if len(state) != model.config.layers:
        raise UsageError(f"state has {len(state)} layers, model has {model.config.layers}")
    h_below = embed(x_t, model)
    z_below = boundary(1.0, state[0].h)
    new_state = []
    L = model.config.layers
    for k, (params, prev) in enumerate(zip(model.layers, state)):
        h_above = state[k + 1].h if k + 1 < L else None
        if force_update:
            z_below = boundary(1.0, prev.h)
        s = cell_step(params, prev, h_below, z_below, h_above, mode, slope, rng,
                      force_z=0.0 if force_update else None)
        new_state.append(s)
        h_below, z_below = s.h, s.z
    return new_state, [s.h for s in new_state], [s.z for s in new_state]


def output_logits(model: Model, hs: list[Tensor], gate_override=None) -> Tensor:
    """Gated sum of per-layer projections, ReLU, then the softmax affine map."""
    out = model.output
    if len(hs) != model.config.layers:
        raise UsageError(f"expected {model.config.layers} hidden vectors, got {len(hs)}")
    if gate_override is None:
        gates = nx.sigm(nx.affine(out.gate, nx.concat_last(hs)))
    else:
        lead = hs[0].shape[:-1]
        gates = Tensor(np.broadcast_to(np.asarray(gate_override, dtype=hs[0].dtype), lead + (len(hs),)).copy())
    terms = [nx.mul(nx.slice_last(gates, k, k + 1), nx.affine(out.proj[k], h)) for k, h in enumerate(hs)]
    h_e = nx.relu(nx.add_n(terms))
    return nx.affine(out.W, h_e, out.b)


def output_distribution(model: Model, hs: list[Tensor], gate_override=None) -> np.ndarray:
    return nx.softmax(output_logits(model, hs, gate_override).data)


@dataclass
class SequenceResult:
    loss: Tensor
    bpc: float
    state: list[LayerState]
    trace: BoundaryTrace | list[BoundaryTrace] | None
    step_nll: np.ndarray  # (T,) or (T, B)

    def __iter__(self):
        return iter((self.loss, self.bpc, self.state, self.trace))


def sequence_nll(model: Model, window, state: list[LayerState] | None, slope: float,
                 rng: np.random.Generator | None = None, force_update: bool = False,
                 keep_trace: bool = True) -> SequenceResult:
    """Mean next-symbol NLL over a window of ``T+1`` symbols (or a ``(B, T+1)`` batch).

    The loss tensor is recorded on the active tape, if any.
    """
    window = np.asarray(window)
    if window.ndim not in (1, 2) or window.shape[-1] < 2:
        raise UsageError("a window needs at least two symbols (one input, one target)")
    batched = window.ndim == 2
    B = window.shape[0] if batched else 1
    T = window.shape[-1] - 1
    if state is None:
        state = initial_state(model, B if batched else None)
    L = model.config.layers
    z_init = np.stack([s.z.data.reshape(B) for s in state[:-1]]) if keep_trace else None
    zs = np.zeros((L - 1, B, T))
    norms = np.zeros((L, B, T))
    losses = []
    step_nll = np.zeros((T, B))
    weight = 1.0 / (B * T)
    for t in range(T):
        x_t, target = window[..., t], window[..., t + 1]
        state, hs, z_list = step(model, x_t, state, slope, rng, force_update)
        loss_t, probs = nx.softmax_xent(output_logits(model, hs), target, weight)
        losses.append(loss_t)
        p = probs.reshape(B, -1)[np.arange(B), np.asarray(target).reshape(B)]
        step_nll[t] = -np.log(p)
        if keep_trace:
            for k in range(L):
                hk = hs[k].data.reshape(B, -1)
                norms[k, :, t] = np.sqrt((hk * hk).sum(axis=1))
                if k < L - 1:
                    zs[k, :, t] = z_list[k].data.reshape(B)
    loss = nx.add_n(losses)
    mean = float(step_nll.mean())
    trace = None
    if keep_trace:
        traces = [BoundaryTrace(zs[:, b], norms[:, b], list(window[b, :-1]) if batched else list(window[:-1]),
                                z_init[:, b], model.config.mode) for b in range(B)]
        trace = traces if batched else traces[0]
    return SequenceResult(loss, mean / LN2, state, trace, step_nll if batched else step_nll[:, 0])


def sample_text(model: Model, prime, n: int, temperature: float = 1.0,
                rng: np.random.Generator | None = None, slope: float = 1.0) -> list[int]:
    """Feed ``prime`` then draw ``n`` symbols; temperature 0 means argmax."""
    if model.config.vocab_size < 1:
        raise UsageError("empty vocabulary")
    if n < 0 or temperature < 0:
        raise UsageError("n and temperature must be non-negative")
    if n == 0:
        return []
    prime = list(prime)
    if not prime:
        raise UsageError("sampling needs at least one prime symbol")
    rng = rng if rng is not None else np.random.default_rng(0)
    state = initial_state(model)
    for sym in prime:
        state, hs, _ = step(model, int(sym), state, slope, rng)
    out = []
    for _ in range(n):
        logits = output_logits(model, hs).data
        if temperature == 0:
            sym = int(np.argmax(logits))
        else:
            probs = nx.softmax(logits / temperature)
            sym = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
            sym = min(sym, len(probs) - 1)
        out.append(sym)
        state, hs, _ = step(model, sym, state, slope, rng)
    return out


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"HMLSTMCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    arrays: dict[str, np.ndarray]  # everything stored, including optimizer moments
    meta: dict


def save_checkpoint(path, model: Model, meta: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write a self-describing checkpoint.

    Layout: magic, u32 version, u64 header length, UTF-8 JSON header, then the
    raw little-endian float64 arrays in header order.  The encoding is fully
    deterministic, so save -> load -> save reproduces the same bytes.
    """
    arrays = {k: v.data for k, v in model.parameters().items()}
    arrays.update(extra_arrays or {})
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        blob = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "arrays": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes))
                           + hbytes + b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise UsageError(f"{path} is not an HM-LSTM checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"]).copy()
    config = ModelConfig(**header["config"])
    model = Model.from_arrays(config, arrays)
    return Checkpoint(model, arrays, header["meta"])
