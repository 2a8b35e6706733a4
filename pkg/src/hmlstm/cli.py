"""Command-line entry point: train / eval / sample / trace / gradcheck / oracle."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .corpus import Vocab, load_and_split, read_corpus, split_lengths
from .errors import HMLSTMError, UsageError
from .network import Model, ModelConfig, load_checkpoint, sample_text, sequence_nll
from .trainer import TrainConfig, evaluate, train

DATA_DIR_ENV = "HMLSTM_DATA_DIR"


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _splits(text: str) -> list[float]:
    parts = [p for p in text.split(",") if p]
    if all(p.isdigit() for p in parts):
        return [int(p) for p in parts]
    return [float(p) for p in parts]


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def resolve_corpus(path: str | None) -> Path:
    """Use ``path`` as given, else look it up under $HMLSTM_DATA_DIR."""
    data_dir = os.environ.get(DATA_DIR_ENV)
    if path is None:
        if data_dir is None:
            raise UsageError(f"--corpus is required (or set {DATA_DIR_ENV})")
        return Path(data_dir) / "corpus.txt"
    p = Path(path)
    if not p.exists() and data_dir is not None and not p.is_absolute():
        return Path(data_dir) / p
    return p


def _model_flags(layers=3, dims=(128,), embed_dim=128, out_embed_dim=128, mode="step") -> argparse.ArgumentParser:
    # a fresh parent per subcommand: argparse shares action objects between parents
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--layers", type=int, default=layers, help=f"number of HM-LSTM layers (default {layers})")
    model.add_argument("--dims", type=_int_list, default=list(dims),
                       help=f"width per layer, one value or a list (default {','.join(map(str, dims))})")
    model.add_argument("--embed-dim", type=int, default=embed_dim, help=f"input embedding width (default {embed_dim})")
    model.add_argument("--out-embed-dim", type=int, default=out_embed_dim,
                       help=f"output embedding width (default {out_embed_dim})")
    model.add_argument("--mode", choices=["step", "sample", "soft"], default=mode,
                       help=f"boundary decision (default {mode})")
    model.add_argument("--layer-norm", type=_on_off, default=True, metavar="{on,off}",
                       help="layer normalization (default on)")
    model.add_argument("--dtype", choices=["float64", "float32"], default="float64",
                       help="parameter precision (default float64)")
    return model


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--corpus", help=f"plain-text corpus (relative paths also tried under ${DATA_DIR_ENV})")
    common.add_argument("--splits", type=_splits, default=[0.9, 0.05, 0.05],
                        help="train,valid,test as fractions or character counts (default 0.9,0.05,0.05)")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--checkpoint", help="checkpoint file to read")
    common.add_argument("--out", help="output directory or file")

    opt = argparse.ArgumentParser(add_help=False)
    opt.add_argument("--batch", type=int, default=32, help="lanes per mini-batch (default 32)")
    opt.add_argument("--window", type=int, default=100, help="truncation window length (default 100)")
    opt.add_argument("--lr", type=float, default=0.002, help="initial Adam learning rate (default 0.002)")
    opt.add_argument("--clip", type=float, default=1.0, help="global gradient-norm clip (default 1)")
    opt.add_argument("--slope-rate", type=float, default=0.04, help="slope increase per epoch (default 0.04)")
    opt.add_argument("--slope-cap", type=float, default=5.0, help="maximum slope (default 5)")
    opt.add_argument("--lr-decay", type=float, default=50.0, help="learning-rate divisor on plateau (default 50)")
    opt.add_argument("--decay-repeat", action="store_true", help="decay on every plateau, not only the first")
    opt.add_argument("--epochs", type=int, default=20, help="training epochs (default 20)")
    opt.add_argument("--no-wall-time", action="store_true", help="omit wall time from the log (byte-stable logs)")

    parser = argparse.ArgumentParser(prog="hmlstm", description="Hierarchical multiscale LSTM toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common, _model_flags(), opt], help="train a character language model")

    p = sub.add_parser("eval", parents=[common], help="print BPC of a checkpoint on a split")
    p.add_argument("--split", choices=["train", "valid", "test"], default="test", help="split (default test)")

    p = sub.add_parser("sample", parents=[common], help="generate text from a checkpoint")
    p.add_argument("--prime", default=" ", help="priming text (default a single space)")
    p.add_argument("--length", type=int, default=200, help="symbols to generate (default 200)")
    p.add_argument("--temperature", type=float, default=1.0, help="sampling temperature, 0 = argmax (default 1)")

    p = sub.add_parser("trace", parents=[common], help="render boundary panels, op counts and a norm heatmap")
    p.add_argument("--text", help="text window to read (otherwise taken from --corpus)")
    p.add_argument("--split", choices=["train", "valid", "test"], default="test", help="split (default test)")
    p.add_argument("--offset", type=int, default=0, help="start of the window within the split (default 0)")
    p.add_argument("--length", type=int, default=270, help="window length (default 270)")
    p.add_argument("--width", type=int, default=90, help="panel width (default 90)")

    p = sub.add_parser("gradcheck", parents=[common, _model_flags(2, (4,), 4, 4, "soft")],
                       help="finite-difference check on a fresh model")
    p.add_argument("--probes", type=int, default=200, help="parameter coordinates to check (default 200)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    p.add_argument("--window", type=int, default=4, help="window length (default 4)")
    p.add_argument("--vocab-size", type=int, default=5, help="vocabulary size (default 5)")
    p.add_argument("--tol", type=float, default=1e-5, help="pass threshold on relative error (default 1e-5)")

    p = sub.add_parser("oracle", parents=[common], help="forced-boundary layer vs plain LSTM")
    p.add_argument("--dim", type=int, default=8, help="layer width (default 8)")
    p.add_argument("--steps", type=int, default=20, help="time steps (default 20)")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (default 10)")
    p.add_argument("--tol", type=float, default=1e-12, help="pass threshold (default 1e-12)")
    return parser


def _model_config(args, vocab_size: int) -> ModelConfig:
    dims = args.dims * args.layers if len(args.dims) == 1 else args.dims
    return ModelConfig(layers=args.layers, dims=dims, embed_dim=args.embed_dim, out_embed_dim=args.out_embed_dim,
                       vocab_size=vocab_size, mode=args.mode, layer_norm=args.layer_norm, dtype=args.dtype)


def _require_checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    vocab = ckpt.meta.get("vocab")
    return ckpt, (Vocab(tuple(vocab)) if vocab is not None else None)


def _split_stream(args, vocab: Vocab | None, which: str):
    """Symbols of one split, encoded with the checkpoint's vocabulary when it has one."""
    if vocab is None:
        splits = load_and_split(resolve_corpus(args.corpus), args.splits)
        return getattr(splits, which), splits.vocab
    path = resolve_corpus(args.corpus)
    text = read_corpus(path)
    a, b, _ = split_lengths(len(text), args.splits)
    raw = {"train": text[:a], "valid": text[a:a + b], "test": text[a + b:]}[which]
    return vocab.encode(raw), vocab


def cmd_train(args) -> int:
    splits = load_and_split(resolve_corpus(args.corpus), args.splits)
    cfg = _model_config(args, splits.vocab.size)
    model = Model.init(cfg, np.random.default_rng(args.seed))
    tcfg = TrainConfig(batch=args.batch, window=args.window, lr=args.lr, clip=args.clip,
                       slope_rate=args.slope_rate, slope_cap=args.slope_cap, lr_decay=args.lr_decay,
                       decay_repeat=args.decay_repeat, epochs=args.epochs, seed=args.seed,
                       record_wall_time=not args.no_wall_time)
    out = Path(args.out or "runs/hmlstm")
    result = train(model, splits.train, splits.valid, tcfg, out, splits.vocab)
    last = result.log[-1]
    print(f"best val_bpc {result.opt.best_val / np.log(2):.6f}  last epoch {last['epoch']}  "
          f"checkpoint {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    ckpt, vocab = _require_checkpoint(args)
    stream, _ = _split_stream(args, vocab, args.split)
    geo = ckpt.meta.get("eval_geometry", {"batch": 32, "window": 100})
    ev = evaluate(ckpt.model, stream, geo["batch"], geo["window"], ckpt.meta.get("slope", 1.0),
                  ckpt.meta.get("seed", args.seed))
    print(f"{args.split}_bpc {ev.bpc!r}")
    print(f"{args.split}_chars {ev.chars}")
    return 0


def cmd_sample(args) -> int:
    ckpt, vocab = _require_checkpoint(args)
    if vocab is None:
        raise UsageError("checkpoint carries no vocabulary")
    prime = vocab.encode(args.prime)
    out = sample_text(ckpt.model, prime, args.length, args.temperature, np.random.default_rng(args.seed),
                      ckpt.meta.get("slope", 1.0))
    print(args.prime + vocab.decode(out))
    return 0


def cmd_trace(args) -> int:
    ckpt, vocab = _require_checkpoint(args)
    if args.text is not None:
        if vocab is None:
            raise UsageError("checkpoint carries no vocabulary")
        symbols = vocab.encode(args.text)
    else:
        stream, vocab = _split_stream(args, vocab, args.split)
        symbols = stream[args.offset:args.offset + args.length + 1]
    if len(symbols) < 2:
        raise UsageError("trace window needs at least two symbols")
    res = sequence_nll(ckpt.model, symbols, None, ckpt.meta.get("slope", 1.0), np.random.default_rng(args.seed))
    trace = res.trace
    print(dg.render_trace(trace, args.width, decode=vocab.decode if vocab else None))
    print()
    if ckpt.model.config.mode != "soft":
        print(dg.count_ops(trace).summary())
        print()
    table = dg.heatmap_table(dg.norm_heatmap(trace))
    if args.out:
        Path(args.out).write_text(table + "\n")
        print(f"heatmap written to {args.out}")
    else:
        print(table)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _model_config(args, args.vocab_size)
    if cfg.mode != "soft":
        raise UsageError("gradcheck runs in soft mode only")
    model = Model.init(cfg, np.random.default_rng(args.seed))
    report = dg.gradcheck(model, args.probes, args.eps, args.window, args.seed)
    print(report.format())
    ok = report.passed(args.tol)
    print("PASS" if ok else "FAIL", f"(tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_oracle(args) -> int:
    devs = [dg.lstm_oracle_compare(seed=args.seed + s, dim=args.dim, steps=args.steps) for s in range(args.seeds)]
    worst = max(devs)
    print(f"max deviation over {args.seeds} seeds x {args.steps} steps: {worst:.3e}")
    ok = worst <= args.tol
    print("PASS" if ok else "FAIL", f"(tolerance {args.tol:g})")
    return 0 if ok else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "trace": cmd_trace,
            "gradcheck": cmd_gradcheck, "oracle": cmd_oracle}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (HMLSTMError, OSError) as exc:
        print(f"hmlstm {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
