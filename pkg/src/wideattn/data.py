"""Synthetic Listops, tokenization, TSV datasets and seeded batching."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import GenerationError, ParseError
from .model import CLS_ID, NUM_SPECIALS, PAD_ID, UNK_ID

OPERATORS = ("MAX", "MIN", "MED", "SM")
NUM_LABELS = 10


# -- Listops ------------------------------------------------------------------------

def apply_op(op: str, args: Sequence[int]) -> int:
    if op == "MAX":
        return max(args)
    if op == "MIN":
        return min(args)
    if op == "MED":
        s = sorted(args)
        return s[(len(s) - 1) // 2]  # lower middle for even arity
    if op == "SM":
        return sum(args) % 10
    raise ValueError(f"unknown operator {op}")


_TOKEN = re.compile(r"\s*(?:(\[)\s*(MAX|MIN|MED|SM)\b|(\])|(\d)(?!\d))")


def eval_listops(text: str) -> int:
    """Evaluate a bracketed expression such as ``[MAX 2 9 [MIN 4 7 ] 0 ]``."""
    stack: list[tuple[str, list[int], int]] = []
    result = None
    pos = 0
    end = len(text.rstrip())
    while pos < end:
        m = _TOKEN.match(text, pos)
        if not m:
            at = len(text) - len(text[pos:].lstrip()) if text[pos:].strip() else pos
            raise ParseError(f"unexpected input {text[at:at + 8]!r}", at)
        start = m.start(1) if m.group(1) else m.start(m.lastindex)
        if result is not None:
            raise ParseError("trailing input after complete expression", start)
        if m.group(1):
            stack.append((m.group(2), [], start))
        elif m.group(3):
            if not stack:
                raise ParseError("unmatched ']'", start)
            op, args, op_pos = stack.pop()
            if not args:
                raise ParseError(f"operator {op} has no arguments", op_pos)
            value = apply_op(op, args)
            if stack:
                stack[-1][1].append(value)
            else:
                result = value
        else:
            value = int(m.group(4))
            if stack:
                stack[-1][1].append(value)
            else:
                result = value
        pos = m.end()
    if stack:
        raise ParseError(f"unclosed operator {stack[-1][0]}", stack[-1][2])
    if result is None:
        raise ParseError("empty expression", 0)
    return result


@dataclass(frozen=True)
class ListopsSpec:
    max_depth: int = 3
    max_args: int = 5
    max_length: int = 127
    count: int = 1000
    seed: int = 0
    sub_expr_prob: float = 0.35

    def validate(self) -> None:
        if self.max_depth < 1 or self.max_args < 2 or self.count < 1:
            raise ValueError("listops spec needs max_depth >= 1, max_args >= 2, count >= 1")
        if self.max_length < len("[MAX 0 0 ]"):
            raise GenerationError(f"max_length {self.max_length} is too short for any expression")


def _gen_expr(rng: np.random.Generator, depth: int, spec: ListopsSpec) -> list[str]:
    op = OPERATORS[rng.integers(len(OPERATORS))]
    n_args = int(rng.integers(2, spec.max_args + 1))
    tokens = ["[" + op]
    for _ in range(n_args):
        if depth < spec.max_depth and rng.random() < spec.sub_expr_prob:
            tokens.extend(_gen_expr(rng, depth + 1, spec))
        else:
            tokens.append(str(int(rng.integers(10))))
    tokens.append("]")
    return tokens


def gen_expression(rng: np.random.Generator, spec: ListopsSpec, retries: int = 100) -> str:
    for _ in range(retries):
        text = " ".join(_gen_expr(rng, 1, spec))
        if len(text) <= spec.max_length:
            return text
    raise GenerationError(f"no expression within {spec.max_length} characters after {retries} attempts")


@dataclass(frozen=True)
class Example:
    label: int
    text: str


def gen_listops(spec: ListopsSpec, seed: int | None = None) -> list[Example]:
    """Generate ``spec.count`` labelled expressions, deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    out = []
    for _ in range(spec.count):
        text = gen_expression(rng, spec)
        out.append(Example(eval_listops(text), text))
    return out


# -- TSV -----------------------------------------------------------------------------

def write_tsv(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            if "\t" in ex.text or "\n" in ex.text:
                raise ValueError("example text may not contain tabs or newlines")
            fh.write(f"{ex.label}\t{ex.text}\n")


def read_tsv(path) -> list[Example]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        label, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'")
        out.append(Example(int(label), text))
    return out


# -- tokenization -------------------------------------------------------------------

class TokenMode(str, Enum):
    BYTE = "byte"
    WORD = "word"


BYTE_OFFSET = NUM_SPECIALS


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i + NUM_SPECIALS for i, w in enumerate(self.words)})

    @property
    def size(self) -> int:
        return len(self.words) + NUM_SPECIALS

    def id(self, word: str) -> int:
        return self._index.get(word, UNK_ID)


def build_vocab(lines: Iterable[str], max_size: int) -> Vocab:
    """Frequency-ranked whitespace vocabulary; ties break lexicographically.

    ``max_size`` counts the three special ids.
    """
    if max_size < NUM_SPECIALS + 1:
        raise ValueError(f"max_size must be >= {NUM_SPECIALS + 1}")
    counts = Counter(w for line in lines for w in line.split())
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab(tuple(ranked[: max_size - NUM_SPECIALS]))


def tokenize(text: str, mode=TokenMode.BYTE, vocab: Vocab | None = None, seq_len: int = 128) -> np.ndarray:
    """``[CLS] + content``, truncated or PAD-filled to exactly ``seq_len`` ids."""
    mode = TokenMode(mode)
    if mode is TokenMode.BYTE:
        content = [b + BYTE_OFFSET for b in text.encode("utf-8")]
    else:
        if vocab is None:
            raise ValueError("word-level tokenization needs a vocabulary")
        content = [vocab.id(w) for w in text.split()]
    ids = np.full(seq_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    content = content[: seq_len - 1]
    ids[1:1 + len(content)] = content
    return ids


def detokenize_bytes(ids: Sequence[int]) -> bytes:
    return bytes(int(i) - BYTE_OFFSET for i in ids if i >= BYTE_OFFSET)


def token_strings(ids: Sequence[int], mode=TokenMode.BYTE, vocab: Vocab | None = None) -> list[str]:
    """Readable labels for non-padding ids, used in attention traces."""
    names = {PAD_ID: "[PAD]", CLS_ID: "[CLS]", UNK_ID: "[UNK]"}
    mode = TokenMode(mode)
    out = []
    for i in ids:
        i = int(i)
        if i == PAD_ID:
            continue
        if i in names:
            out.append(names[i])
        elif mode is TokenMode.BYTE:
            out.append(chr(i - BYTE_OFFSET))
        else:
            out.append(vocab.words[i - NUM_SPECIALS])
    return out


@dataclass
class Dataset:
    ids: np.ndarray  # (N, S) int64
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.ids[index], self.labels[index])


def encode(examples: Sequence[Example], seq_len: int, mode=TokenMode.BYTE, vocab: Vocab | None = None) -> Dataset:
    ids = np.stack([tokenize(ex.text, mode, vocab, seq_len) for ex in examples]) if examples else np.zeros((0, seq_len), np.int64)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Dataset(ids, labels)


def split(data: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded hold-out split; returns (train, val)."""
    order = np.random.default_rng(seed).permutation(len(data))
    n_val = max(1, int(round(len(data) * val_fraction)))
    return data.subset(np.sort(order[n_val:])), data.subset(np.sort(order[:n_val]))


def batch_iter(data: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled (ids, labels) batches; order fixed by (seed, epoch); last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(data) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,))).permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield data.ids[idx], data.labels[idx]
