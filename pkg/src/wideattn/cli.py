"""Command-line entry point: ``wideattn <subcommand> [flags]``.

Settings come from three layers, later ones winning: built-in defaults,
the ``--config`` JSON document, then explicit flags.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .attention import AttentionKind
from .bench import CSV_COLUMNS, sweep_report, write_sweep_csv
from .data import (
    ListopsSpec,
    TokenMode,
    Vocab,
    build_vocab,
    encode,
    gen_listops,
    read_tsv,
    split,
    write_tsv,
)
from .errors import (
    CapabilityError,
    CheckpointError,
    ConfigError,
    ContractError,
    GenerationError,
    NumericError,
    ShapeError,
    TrainingDiverged,
)
from .interpret import export_trace
from .model import (
    BYTE_VOCAB_SIZE,
    ModelConfig,
    aspect_ratio_grid,
    build_model,
    encoder_param_count,
    load_checkpoint,
    param_breakdown,
)
from .train import TrainHyper, evaluate, train_loop

log = logging.getLogger("wideattn")

_POS_INT = {"type": "integer", "minimum": 1}
_KINDS = [k.value for k in AttentionKind]

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "wideattn run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": _POS_INT,
                "heads": _POS_INT,
                "embed_dim": _POS_INT,
                "head_dim": _POS_INT,
                "ffn_dim": _POS_INT,
                "seq_len": _POS_INT,
                "vocab_size": _POS_INT,
                "num_classes": _POS_INT,
                "pooling": {"enum": ["cls", "mean"]},
                "norm_eps": {"type": "number", "exclusiveMinimum": 0},
                "attention": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": _KINDS},
                        "seed": {"type": "integer", "minimum": 0},
                        "window": _POS_INT,
                        "block": _POS_INT,
                        "stride": _POS_INT,
                        "rank": _POS_INT,
                        "features": _POS_INT,
                        "sinkhorn_iters": _POS_INT,
                        "sub_kinds": {"type": "array", "minItems": 1, "items": {"enum": _KINDS}},
                    },
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                "warmup_steps": _POS_INT,
                "total_steps": {"type": "integer", "minimum": 0},
                "batch_size": _POS_INT,
                "eval_every": _POS_INT,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": {"type": "string"},
                "val": {"type": "string"},
                "eval": {"type": "string"},
                "mode": {"enum": ["byte", "word"]},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "vocab": {"type": "string"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "checkpoint": {"type": "string"},
                "metrics": {"type": "string"},
                "bench": {"type": "string"},
                "trace": {"type": "string"},
            },
        },
    },
}

DEFAULT_MODEL = {
    "layers": 6,
    "heads": 8,
    "embed_dim": 512,
    "head_dim": 64,
    "ffn_dim": 2048,
    "seq_len": 1024,
    "vocab_size": BYTE_VOCAB_SIZE,
    "num_classes": 2,
    "attention": {"kind": "dot_product"},
}


class CliError(Exception):
    """A user-facing failure reported as one line with exit code 1."""


def derive_seed(seed: int, component: str) -> int:
    """Independent 32-bit seed for ``component``, fixed by the master seed."""
    digest = hashlib.sha256(f"{int(seed)}/{component}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


# -- config assembly ---------------------------------------------------------------

def load_run_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    validate_run_config(doc)
    return doc


def validate_run_config(doc) -> None:
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"config schema error at {where}: {exc.message}") from None


_MODEL_FLAGS = {
    "layers": "layers",
    "heads": "heads",
    "embed": "embed_dim",
    "head_dim": "head_dim",
    "ffn": "ffn_dim",
    "seq_len": "seq_len",
    "vocab_size": "vocab_size",
    "num_classes": "num_classes",
}
_ATTN_FLAGS = ("window", "block", "stride", "rank", "features", "sinkhorn_iters")
_TRAIN_FLAGS = {
    "lr": "base_lr",
    "warmup": "warmup_steps",
    "steps": "total_steps",
    "batch_size": "batch_size",
    "eval_every": "eval_every",
}


def merged_config(args) -> dict:
    """Defaults, then the config file, then any flag the user actually set."""
    doc = load_run_config(args.config) if getattr(args, "config", None) else {}
    doc = copy.deepcopy(doc)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    model = doc.setdefault("model", {})
    for flag, key in _MODEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    kind = getattr(args, "kind", None)
    attn_overrides = {f: getattr(args, f, None) for f in _ATTN_FLAGS}
    if kind is not None or any(v is not None for v in attn_overrides.values()):
        attn = model.setdefault("attention", {"kind": "dot_product"})
        if kind is not None and kind != attn.get("kind"):
            attn.clear()
            attn["kind"] = kind
        attn.update({k: v for k, v in attn_overrides.items() if v is not None})
    train = doc.setdefault("train", {})
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    data = doc.setdefault("data", {})
    for flag in ("train_data", "val_data", "eval_data"):
        value = getattr(args, flag, None)
        if value is not None:
            data[flag.removesuffix("_data")] = value
    if getattr(args, "mode", None) is not None:
        data["mode"] = args.mode
    if getattr(args, "vocab", None) is not None:
        data["vocab"] = args.vocab
    out = doc.setdefault("output", {})
    for flag, key in (("checkpoint_out", "checkpoint"), ("metrics", "metrics"), ("out", None)):
        value = getattr(args, flag, None)
        if value is not None:
            out[key or args.output_key] = value
    validate_run_config(doc)
    return doc


def model_config_from(doc: dict, seq_len_default: int | None = None) -> ModelConfig:
    fields = {**DEFAULT_MODEL, **doc.get("model", {})}
    if seq_len_default is not None and "seq_len" not in doc.get("model", {}):
        fields["seq_len"] = seq_len_default
    attn = dict(fields["attention"])
    attn.setdefault("seed", derive_seed(doc.get("seed", 0), "attention"))
    fields["attention"] = attn
    return ModelConfig.from_dict(fields)


def hyper_from(doc: dict) -> TrainHyper:
    train = dict(doc.get("train", {}))
    train.setdefault("seed", derive_seed(doc.get("seed", 0), "batches"))
    hyper = TrainHyper.from_dict(train)
    hyper.validate()
    return hyper


def _read_vocab(path) -> Vocab:
    words = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
        raise CliError(f"vocabulary file {path} must be a JSON list of strings")
    return Vocab(tuple(words))


def _write_vocab(vocab: Vocab, path) -> None:
    Path(path).write_text(json.dumps(list(vocab.words)), encoding="utf-8")


def _require(mapping: dict, key: str, what: str) -> str:
    if not mapping.get(key):
        raise CliError(f"{what} is required")
    return mapping[key]


# -- subcommands -------------------------------------------------------------------

def cmd_gen_listops(args) -> int:
    spec = ListopsSpec(
        max_depth=args.max_depth,
        max_args=args.max_args,
        max_length=args.max_length,
        count=args.count,
        seed=derive_seed(args.seed, "listops"),
    )
    write_tsv(gen_listops(spec), args.out)
    print(f"wrote {spec.count} examples to {args.out}")
    return 0


def cmd_params(args) -> int:
    doc = merged_config(args)
    cfg = model_config_from(doc)
    value = encoder_param_count(cfg.layers, cfg.embed_dim, cfg.head_dim, cfg.heads, cfg.ffn_dim)
    print(value)
    bd = param_breakdown(cfg)
    for group, n in bd.by_group.items():
        print(f"{group:<12} {n}")
    print(f"{'encoder':<12} {bd.encoder}")
    print(f"{'total':<12} {bd.total}")
    return 0


def cmd_train(args) -> int:
    doc = merged_config(args)
    data = doc["data"]
    out = doc["output"]
    mode = TokenMode(data.get("mode", "byte"))
    train_examples = read_tsv(_require(data, "train", "--train-data"))
    vocab = None
    model_section = doc["model"]
    if mode is TokenMode.WORD:
        size = model_section.get("vocab_size", DEFAULT_MODEL["vocab_size"])
        vocab = build_vocab((ex.text for ex in train_examples), size)
        model_section["vocab_size"] = vocab.size
    cfg = model_config_from(doc)
    seed = doc.get("seed", 0)
    train_set = encode(train_examples, cfg.seq_len, mode, vocab)
    if data.get("val"):
        val_set = encode(read_tsv(data["val"]), cfg.seq_len, mode, vocab)
    else:
        train_set, val_set = split(train_set, data.get("val_fraction", 0.1), derive_seed(seed, "split"))
    if int(max(train_set.labels.max(), val_set.labels.max())) >= cfg.num_classes:
        raise CliError(f"labels exceed num_classes={cfg.num_classes}")
    hyper = hyper_from(doc)
    ckpt = _require(out, "checkpoint", "--checkpoint-out")
    metrics = _require(out, "metrics", "--metrics")
    model = build_model(cfg, derive_seed(seed, "init"))
    report = train_loop(model, train_set, val_set, hyper, checkpoint_path=ckpt, metrics_path=metrics)
    if vocab is not None:
        _write_vocab(vocab, ckpt + ".vocab.json")
    print(f"best val accuracy {report.best_accuracy:.4f} at step {report.best_step}")
    return 0


def _vocab_for(mode: TokenMode, data: dict, ckpt: str) -> Vocab | None:
    if mode is not TokenMode.WORD:
        return None
    path = data.get("vocab") or ckpt + ".vocab.json"
    if not Path(path).exists():
        raise CliError(f"word mode needs a vocabulary file ({path} not found)")
    return _read_vocab(path)


def cmd_eval(args) -> int:
    doc = merged_config(args)
    data = doc["data"]
    model = load_checkpoint(args.checkpoint, dtype=np.float64)
    mode = TokenMode(data.get("mode", "byte"))
    vocab = _vocab_for(mode, data, args.checkpoint)
    examples = read_tsv(_require(data, "eval", "--data"))
    acc = evaluate(model, encode(examples, model.config.seq_len, mode, vocab))
    print(f"{acc:.6f}")
    return 0


def cmd_bench(args) -> int:
    doc = merged_config(args)
    base = model_config_from(doc, seq_len_default=256)
    grid = aspect_ratio_grid(args.grid)
    kinds = args.kinds or list(_KINDS)
    checkpoints = None
    eval_set = None
    if args.checkpoint_dir:
        checkpoints = {}
        for kind in kinds:
            for r in grid:
                path = Path(args.checkpoint_dir) / f"{kind}-{r.layers}x{r.heads}.wadn"
                if path.exists():
                    checkpoints[(kind, r.layers, r.heads)] = str(path)
        eval_path = doc["data"].get("eval")
        if eval_path:
            eval_set = encode(read_tsv(eval_path), base.seq_len)
    rows = sweep_report(
        base,
        kinds,
        grid,
        repeats=args.repeats,
        warmup_runs=args.warmup_runs,
        threads=args.threads,
        seed=derive_seed(doc.get("seed", 0), "bench"),
        measure=not args.no_latency,
        checkpoints=checkpoints,
        eval_data=eval_set,
    )
    out = _require(doc["output"], "bench", "--out")
    write_sweep_csv(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_attend(args) -> int:
    doc = merged_config(args)
    data = doc["data"]
    model = load_checkpoint(args.checkpoint, dtype=np.float64)
    mode = TokenMode(data.get("mode", "byte"))
    vocab = _vocab_for(mode, data, args.checkpoint)
    trace = export_trace(model, args.text, mode, vocab, reconstruct=args.reconstruct)
    out = _require(doc["output"], "trace", "--out")
    Path(out).write_text(trace.to_json(full_precision=args.full_precision), encoding="utf-8")
    print(f"predicted class {trace.predicted}; {trace.num_matrices} matrices written to {out}")
    return 0


# -- parser ------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (overrides the config file)")
    g.add_argument("--layers", type=int, help="encoder depth L")
    g.add_argument("--heads", type=int, help="heads per layer H")
    g.add_argument("--embed", type=int, help="embedding width E")
    g.add_argument("--head-dim", type=int, help="per-head features A")
    g.add_argument("--ffn", type=int, help="feed-forward hidden width M")
    g.add_argument("--seq-len", type=int, help="sequence length S")
    g.add_argument("--vocab-size", type=int, help="vocabulary size including special ids")
    g.add_argument("--num-classes", type=int, help="number of output classes")
    g.add_argument("--kind", choices=_KINDS, help="attention mechanism")
    for name in _ATTN_FLAGS:
        g.add_argument("--" + name.replace("_", "-"), type=int, help=f"attention {name.replace('_', ' ')}")


def _add_common(p: argparse.ArgumentParser, output_key: str | None = None, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="run config JSON; flags take precedence over its fields")
    p.add_argument("--seed", type=int, default=None, help="master seed, fanned out per component (default 0)")
    p.set_defaults(output_key=output_key)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wideattn",
        description="Wide-versus-deep attention experiments on CPU.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-listops", help="write a synthetic Listops TSV")
    p.add_argument("--count", type=int, default=1000, help="number of examples")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--max-depth", type=int, default=3, help="maximum operator nesting")
    p.add_argument("--max-args", type=int, default=5, help="maximum operands per operator")
    p.add_argument("--max-length", type=int, default=127, help="maximum expression length in characters")
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(func=cmd_gen_listops)

    p = sub.add_parser("params", help="print the encoder parameter formula value and full breakdown")
    _add_common(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="train a classifier; writes metrics CSV and best checkpoint")
    _add_common(p)
    _add_model_flags(p)
    g = p.add_argument_group("training")
    g.add_argument("--train-data", help="training TSV (label<TAB>text)")
    g.add_argument("--val-data", help="validation TSV; default holds out part of the training data")
    g.add_argument("--mode", choices=["byte", "word"], help="tokenization (default byte)")
    g.add_argument("--steps", type=int, help="optimizer steps")
    g.add_argument("--warmup", type=int, help="learning-rate warmup steps")
    g.add_argument("--lr", type=float, help="base learning rate")
    g.add_argument("--batch-size", type=int, help="examples per step")
    g.add_argument("--eval-every", type=int, help="validation interval in steps")
    g.add_argument("--checkpoint-out", help="where to write the best checkpoint")
    g.add_argument("--metrics", help="where to write the metrics CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the accuracy of a checkpoint on a TSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", dest="eval_data", help="evaluation TSV")
    p.add_argument("--mode", choices=["byte", "word"], help="tokenization (default byte)")
    p.add_argument("--vocab", help="vocabulary JSON for word mode (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency and size sweep over an aspect-ratio grid; writes CSV")
    _add_common(p, output_key="bench")
    _add_model_flags(p)
    p.add_argument("--grid", type=int, default=48, help="total heads L*H defining the grid (default 48)")
    p.add_argument("--kinds", nargs="+", choices=_KINDS, help="attention kinds (default: all)")
    p.add_argument("--repeats", type=int, default=100, help="timed forward passes per config")
    p.add_argument("--warmup-runs", type=int, default=5, help="untimed passes before timing")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread limit")
    p.add_argument("--no-latency", action="store_true", help="skip timing; sizes only")
    p.add_argument("--checkpoint-dir", help="directory of KIND-LxH.wadn checkpoints for the accuracy column")
    p.add_argument("--data", dest="eval_data", help="evaluation TSV for the accuracy column")
    p.add_argument("--out", help=f"output CSV ({','.join(CSV_COLUMNS)})")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attend", help="export per-head attention weights for one input as JSON")
    _add_common(p, output_key="trace")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--text", required=True, help="input text")
    p.add_argument("--mode", choices=["byte", "word"], help="tokenization (default byte)")
    p.add_argument("--vocab", help="vocabulary JSON for word mode (default: next to the checkpoint)")
    p.add_argument("--reconstruct", action="store_true", help="materialize dense weights for kernelized kinds")
    p.add_argument("--full-precision", action="store_true", help="do not round weights to 6 significant digits")
    p.add_argument("--out", help="output JSON path")
    p.set_defaults(func=cmd_attend)
    return parser


_EXPECTED = (
    CliError,
    ConfigError,
    CheckpointError,
    CapabilityError,
    ContractError,
    GenerationError,
    NumericError,
    ShapeError,
    TrainingDiverged,
    ValueError,
    OSError,
)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _EXPECTED as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"wideattn {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
