"""Attention-weight export for inspecting what a (typically single-layer) model looked at."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import KERNELIZED_KINDS, AttentionKind
from .data import TokenMode, Vocab, token_strings, tokenize
from .errors import CapabilityError
from .model import ClassifierModel, forward


@dataclass
class TraceDocument:
    tokens: list[str]
    predicted: int
    probs: np.ndarray
    layers: list[np.ndarray]  # each (H, n, n) with n = CLS + unpadded tokens
    row_stochastic: bool = True

    @property
    def num_matrices(self) -> int:
        return sum(layer.shape[0] for layer in self.layers)

    def to_dict(self, full_precision: bool = False) -> dict:
        conv = _full if full_precision else _sig6
        return {
            "tokens": list(self.tokens),
            "prediction": {"class": int(self.predicted), "probs": conv(self.probs)},
            "layers": [{"heads": conv(layer)} for layer in self.layers],
        }

    def to_json(self, full_precision: bool = False) -> str:
        return json.dumps(self.to_dict(full_precision))

    @classmethod
    def from_dict(cls, d: dict) -> "TraceDocument":
        return cls(
            tokens=list(d["tokens"]),
            predicted=int(d["prediction"]["class"]),
            probs=np.asarray(d["prediction"]["probs"], dtype=np.float64),
            layers=[np.asarray(layer["heads"], dtype=np.float64) for layer in d["layers"]],
        )


def _full(arr) -> list:
    return np.asarray(arr, dtype=np.float64).tolist()


def _sig6(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        return float(f"{float(arr):.6g}")
    return [_sig6(a) for a in arr]


def _needs_reconstruction(kind: AttentionKind, sub_kinds) -> bool:
    if kind is AttentionKind.MIXED:
        return any(s in KERNELIZED_KINDS for s in sub_kinds)
    return kind in KERNELIZED_KINDS


def export_trace(
    model: ClassifierModel,
    text: str,
    mode=TokenMode.BYTE,
    vocab: Vocab | None = None,
    reconstruct: bool = False,
) -> TraceDocument:
    """Tokenize ``text``, run a traced forward pass and collect every head's weights.

    Matrices are cropped to the CLS-plus-content positions actually attended.
    """
    cfg = model.config
    if _needs_reconstruction(cfg.attention.kind, cfg.attention.sub_kinds) and not reconstruct:
        raise CapabilityError(
            f"{cfg.attention.kind.value} attention is kernelized; pass reconstruct=True for dense weights"
        )
    ids = tokenize(text, mode, vocab, cfg.seq_len)
    with T.no_grad():
        logits, traces = forward(model, ids[None, :], trace=True, reconstruct=reconstruct)
    n = int(np.count_nonzero(ids))
    z = logits.data[0].astype(np.float64)
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    layers = [np.asarray(tr.weights[0, :, :n, :n], dtype=np.float64) for tr in traces]
    return TraceDocument(
        tokens=token_strings(ids, mode, vocab),
        predicted=int(np.argmax(z)),
        probs=probs,
        layers=layers,
        row_stochastic=all(tr.row_stochastic for tr in traces),
    )


def head_saliency(doc: TraceDocument, token_index: int = 0, layer: int = 0) -> list[tuple[int, int, float]]:
    """(head, token, weight) triples from one query row, strongest first.

    Ties resolve toward the earlier token position, then the lower head.
    """
    if not 0 <= layer < len(doc.layers):
        raise IndexError(f"layer {layer} out of range for {len(doc.layers)} layers")
    mats = doc.layers[layer]
    n = mats.shape[-1]
    if not 0 <= token_index < n:
        raise IndexError(f"token index {token_index} out of range for {n} tokens")
    triples = [
        (h, t, float(mats[h, token_index, t]))
        for h in range(mats.shape[0])
        for t in range(n)
    ]
    triples.sort(key=lambda x: (-x[2], x[1], x[0]))
    return triples
