"""Truncated-BPTT training loop with Adam, clipping and slope annealing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import BatchPlan, Vocab, plan_batches
from .diagnostics import OpCounts, count_ops
from .errors import ConfigError, NonFiniteError, UsageError
from .network import LN2, Model, detach_state, initial_state, save_checkpoint, sequence_nll

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch: int = 32
    window: int = 100
    lr: float = 0.002
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    slope_rate: float = 0.04
    slope_cap: float = 5.0
    lr_decay: float = 50.0
    decay_repeat: bool = False
    epochs: int = 20
    seed: int = 0
    record_wall_time: bool = True

    def __post_init__(self):
        if self.batch < 1 or self.window < 1:
            raise ConfigError("batch size and window length must be at least 1")
        if not self.clip > 0:
            raise ConfigError("clip threshold must be positive")
        if self.slope_cap < 1 or self.slope_rate < 0:
            raise ConfigError("slope cap must be >= 1 and slope rate >= 0")
        if not self.lr_decay > 1:
            raise ConfigError("learning-rate decay factor must exceed 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 0.002
    slope: float = 1.0
    best_val: float = math.inf
    decays: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def meta(self) -> dict:
        return {"step": self.step, "lr": self.lr, "slope": self.slope,
                "best_val": None if math.isinf(self.best_val) else self.best_val, "decays": self.decays}

    @classmethod
    def restore(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "OptState":
        m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: a for k, a in arrays.items() if k.startswith("opt.v.")}
        best = meta.get("best_val")
        return cls(m, v, meta["step"], meta["lr"], meta["slope"], math.inf if best is None else best,
                   meta.get("decays", 0))


def adam_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], opt: OptState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptState:
    """In-place bias-corrected Adam update of ``params``; returns ``opt``."""
    bad = [name for name, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad)} at optimizer step {opt.step + 1}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (opt.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return opt


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    if not threshold > 0:
        raise ConfigError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    factor = threshold / norm
    return {k: g * factor for k, g in grads.items()}


def slope_schedule(epoch: int, rate: float, cap: float) -> float:
    """``min(cap, 1 + rate * epoch)``, epochs counted from 0."""
    if rate < 0 or cap < 1:
        raise ConfigError("slope rate must be >= 0 and cap >= 1")
    return min(cap, 1.0 + rate * epoch)


@dataclass
class Evaluation:
    nll: float
    bpc: float
    ops: OpCounts
    chars: int


def eval_plan(stream, batch: int, window: int) -> BatchPlan:
    """Batch geometry for held-out text; shrinks the lane count for short splits."""
    stream = np.asarray(stream)
    lanes = max(1, min(batch, len(stream) // (window + 1)))
    if len(stream) < window + 1:
        return plan_batches(stream, 1, len(stream) - 1)
    return plan_batches(stream, lanes, window)


def evaluate(model: Model, stream, batch: int, window: int, slope: float, seed: int = 0) -> Evaluation:
    """Mean NLL (nats/char) over a held-out stream with state carried across windows."""
    plan = eval_plan(stream, batch, window)
    rng = np.random.default_rng(seed)
    state = initial_state(model, plan.batch)
    total, count = 0.0, 0
    ops = None
    for w in plan:
        res = sequence_nll(model, w, state, slope, rng)
        state = res.state
        total += float(res.step_nll.sum())
        count += res.step_nll.size
        if model.config.mode != "soft":
            for tr in res.trace:
                ops = count_ops(tr) if ops is None else ops + count_ops(tr)
    nll = total / count
    L = model.config.layers
    if ops is None:
        ops = OpCounts(np.zeros(L, np.int64), np.zeros(L, np.int64), np.zeros(L, np.int64), 0)
    return Evaluation(nll, nll / LN2, ops, count)


@dataclass
class TrainResult:
    log: list[dict]
    opt: OptState
    best_checkpoint: Path | None
    best_model: Model


def _record(epoch, train_bpc, ev: Evaluation, slope, lr, started, cfg: TrainConfig) -> dict:
    rec = {
        "epoch": epoch,
        "train_bpc": train_bpc,
        "val_bpc": ev.bpc,
        "val_nll": ev.nll,
        "slope": slope,
        "lr": lr,
        "update_counts": ev.ops.update.tolist(),
        "copy_counts": ev.ops.copy.tolist(),
        "flush_counts": ev.ops.flush.tolist(),
    }
    if cfg.record_wall_time:
        rec["wall_time"] = round(time.perf_counter() - started, 3)
    return rec


def train(model: Model, train_stream, valid_stream, cfg: TrainConfig, out_dir=None,
          vocab: Vocab | None = None, opt: OptState | None = None) -> TrainResult:
    """Train ``model`` in place.

    Each epoch walks ``B`` lanes of ``T``-step windows with ``h``, ``c`` and
    ``z`` carried between windows (detached; reset at epoch start).  After
    every epoch the validation NLL is measured; the best model is kept and
    checkpointed, and the first non-improving epoch divides the learning rate
    by ``cfg.lr_decay`` (every such epoch if ``decay_repeat``).
    """
    started = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl" if out_dir else None
    ckpt_path = out_dir / "best.ckpt" if out_dir else None
    if log_path is not None and log_path.exists():
        log_path.unlink()

    plan = plan_batches(train_stream, cfg.batch, cfg.window)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = opt or OptState(lr=cfg.lr, slope=slope_schedule(0, cfg.slope_rate, cfg.slope_cap))
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log.info("epoch %s train_bpc %s val_bpc %.4f slope %.3f lr %.2e", rec["epoch"], rec["train_bpc"],
                 rec["val_bpc"], rec["slope"], rec["lr"])

    def checkpoint(epoch):
        if ckpt_path is None:
            return
        meta = {"epoch": epoch, "seed": cfg.seed, "train_config": asdict(cfg), "opt": opt.meta(),
                "slope": opt.slope, "val_bpc": opt.best_val / LN2,
                "eval_geometry": {"batch": cfg.batch, "window": cfg.window},
                "rng_state": rng.bit_generator.state,
                "vocab": list(vocab.chars) if vocab is not None else None}
        save_checkpoint(ckpt_path, model, meta, opt.arrays())

    ev = evaluate(model, valid_stream, cfg.batch, cfg.window, opt.slope, cfg.seed)
    opt.best_val = ev.nll
    best = model.copy()
    checkpoint(0)
    emit(_record(0, None, ev, opt.slope, opt.lr, started, cfg))

    for epoch in range(cfg.epochs):
        opt.slope = slope_schedule(epoch, cfg.slope_rate, cfg.slope_cap)
        state = initial_state(model, cfg.batch)
        total, count = 0.0, 0
        for window in plan:
            for p in params.values():
                p.grad = None
            with nx.Tape() as tape:
                res = sequence_nll(model, window, state, opt.slope, rng, keep_trace=False)
            if not math.isfinite(res.loss.item()):
                raise NonFiniteError(f"non-finite training loss in epoch {epoch + 1}")
            tape.backward(res.loss)
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            grads = clip_grad_norm(grads, cfg.clip)
            adam_step(params, grads, opt, cfg.beta1, cfg.beta2, cfg.adam_eps)
            state = detach_state(res.state)
            total += float(res.step_nll.sum())
            count += res.step_nll.size
        ev = evaluate(model, valid_stream, cfg.batch, cfg.window, opt.slope, cfg.seed)
        if ev.nll < opt.best_val:
            opt.best_val = ev.nll
            best = model.copy()
            checkpoint(epoch + 1)
        elif opt.decays == 0 or cfg.decay_repeat:
            opt.lr /= cfg.lr_decay
            opt.decays += 1
        emit(_record(epoch + 1, total / count / LN2, ev, opt.slope, opt.lr, started, cfg))
    return TrainResult(records, opt, ckpt_path, best)
