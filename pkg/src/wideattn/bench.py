"""Latency and size measurements for wide-versus-deep sweeps."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .attention import AttentionKind
from .data import Dataset
from .model import (
    NUM_SPECIALS,
    CLS_ID,
    AspectRatio,
    ClassifierModel,
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    total_param_count,
)

BYTES_PER_PARAM = 4
MIB = 2 ** 20
CSV_COLUMNS = ("kind", "layers", "heads", "params", "mib", "lat_mean_ms", "lat_std_ms", "accuracy")


def config_id(cfg: ModelConfig) -> str:
    return f"{cfg.attention.kind.value}-{cfg.layers}x{cfg.heads}"


@dataclass
class LatencyReport:
    config_id: str
    repeats: int
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    threads: int


@dataclass
class SizeReport:
    config_id: str
    params: int
    bytes: int

    @property
    def mib(self) -> float:
        return self.bytes / MIB


def random_input(cfg: ModelConfig, seed: int = 0, batch: int = 1) -> np.ndarray:
    """Full-length ids with no padding: CLS then uniform non-special tokens."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(NUM_SPECIALS, max(cfg.vocab_size, NUM_SPECIALS + 1), size=(batch, cfg.seq_len))
    ids[:, 0] = CLS_ID
    return ids


def measure_latency(
    model: ClassifierModel,
    repeats: int = 100,
    warmup_runs: int = 5,
    threads: int = 1,
    seed: int = 0,
) -> LatencyReport:
    """Mean wall-clock time of single-input forward passes.

    ``warmup_runs`` untimed passes come first; tracing and gradient
    recording are off.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    ids = random_input(model.config, seed)
    times = []
    with threadpool_limits(limits=threads), T.no_grad():
        for _ in range(warmup_runs):
            forward(model, ids)
        for _ in range(repeats):
            start = time.perf_counter_ns()
            forward(model, ids)
            times.append((time.perf_counter_ns() - start) / 1e6)
    return LatencyReport(
        config_id=config_id(model.config),
        repeats=repeats,
        mean_ms=statistics.fmean(times),
        std_ms=statistics.pstdev(times),
        min_ms=min(times),
        max_ms=max(times),
        threads=threads,
    )


def model_size_mib(model_or_config) -> SizeReport:
    cfg = model_or_config.config if isinstance(model_or_config, ClassifierModel) else model_or_config
    n = total_param_count(model_or_config).total
    return SizeReport(config_id(cfg), n, BYTES_PER_PARAM * n)


@dataclass
class SweepRow:
    kind: str
    layers: int
    heads: int
    params: int
    attention_params: int
    mib: float
    lat_mean_ms: float | None
    lat_std_ms: float | None
    accuracy: float | None

    def csv_values(self) -> list:
        def opt(v):
            return "" if v is None else round(v, 4)

        return [self.kind, self.layers, self.heads, self.params, f"{self.mib:.6f}",
                opt(self.lat_mean_ms), opt(self.lat_std_ms), opt(self.accuracy)]


def sweep_report(
    base: ModelConfig,
    kinds: Iterable,
    grid: Sequence[AspectRatio],
    repeats: int = 100,
    warmup_runs: int = 5,
    threads: int = 1,
    seed: int = 0,
    measure: bool = True,
    checkpoints: Mapping[tuple[str, int, int], str] | None = None,
    eval_data: Dataset | None = None,
) -> list[SweepRow]:
    """One row per (kind, ratio): parameters, MiB, CPU latency, accuracy.

    Accuracy is filled only where ``checkpoints`` has an entry keyed by
    ``(kind, layers, heads)`` and ``eval_data`` is given.
    """
    from .train import evaluate

    rows = []
    for kind in kinds:
        kind = AttentionKind(kind)
        kind_cfg = base if base.attention.kind is kind else base.with_attention(kind)
        for ratio in grid:
            cfg = kind_cfg.with_ratio(ratio.layers, ratio.heads)
            breakdown = total_param_count(cfg)
            mean = std = acc = None
            if measure:
                model = build_model(cfg, seed, dtype=np.float32)
                lat = measure_latency(model, repeats, warmup_runs, threads, seed)
                mean, std = lat.mean_ms, lat.std_ms
                del model
            ck = (checkpoints or {}).get((kind.value, ratio.layers, ratio.heads))
            if ck is not None and eval_data is not None:
                acc = evaluate(load_checkpoint(ck, expected_config=cfg), eval_data)
            rows.append(SweepRow(
                kind=kind.value,
                layers=ratio.layers,
                heads=ratio.heads,
                params=breakdown.total,
                attention_params=breakdown.by_group["attention"],
                mib=BYTES_PER_PARAM * breakdown.total / MIB,
                lat_mean_ms=mean,
                lat_std_ms=std,
                accuracy=acc,
            ))
    return rows


def write_sweep_csv(rows: Iterable[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_values())
