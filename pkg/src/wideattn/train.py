"""Adam with linear warmup / inverse-square-root decay, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import Dataset, batch_iter
from .errors import ContractError, TrainingDiverged
from .model import ClassifierModel, forward, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainHyper:
    base_lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 1000
    total_steps: int = 2000
    batch_size: int = 32
    eval_every: int = 200
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.warmup_steps:
            raise ValueError("warmup_steps must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if 0 < self.total_steps < self.warmup_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive")

    @classmethod
    def from_dict(cls, d) -> "TrainHyper":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(hyper: TrainHyper, step: int) -> float:
    """base * min(t / warmup, 1) / sqrt(max(t, warmup))."""
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    w = hyper.warmup_steps
    return hyper.base_lr * min(step / w, 1.0) / math.sqrt(max(step, w))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, hyper: TrainHyper) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + hyper.adam_eps)).astype(p.dtype)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logp = T.log_softmax_lastdim(logits)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def predict(model: ClassifierModel, ids: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(ids), batch_size):
            logits, _ = forward(model, ids[start:start + batch_size])
            out.append(np.argmax(logits.data, axis=-1))  # first maximum wins ties
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: ClassifierModel, data: Dataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict(model, data.ids, batch_size) == data.labels))


@dataclass
class LogRow:
    step: int
    split: str
    loss: float
    accuracy: float
    lr: float


@dataclass
class TrainReport:
    rows: list[LogRow] = field(default_factory=list)
    best_step: int = 0
    best_accuracy: float = float("nan")
    best_state: dict[str, np.ndarray] | None = None
    train_losses: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "split", "loss", "accuracy", "lr"])
            for r in self.rows:
                w.writerow([r.step, r.split, repr(r.loss), repr(r.accuracy), repr(r.lr)])


def _batches(train: Dataset, hyper: TrainHyper) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    epoch = 0
    while True:
        yield from batch_iter(train, hyper.batch_size, hyper.seed, epoch)
        epoch += 1


def train_loop(
    model: ClassifierModel,
    train: Dataset,
    val: Dataset,
    hyper: TrainHyper,
    checkpoint_path=None,
    metrics_path=None,
) -> TrainReport:
    """Run ``hyper.total_steps`` Adam steps, keeping the best-validation weights.

    On return the model holds the best parameters seen at any evaluation
    (the initial weights when no step ran).
    """
    hyper.validate()
    if len(train) == 0 or len(val) == 0:
        raise ContractError("training and validation sets must be nonempty")
    report = TrainReport(best_state=model.state_dict())
    state = AdamState()
    batches = _batches(train, hyper)
    params = model.params
    for step in range(1, hyper.total_steps + 1):
        ids, labels = next(batches)
        lr = lr_at(hyper, step)
        model.zero_grad()
        logits, _ = forward(model, ids)
        loss = cross_entropy(logits, labels)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, lr, value)
        T.backward(loss, params.values())
        adam_step(params, state, lr, hyper)
        report.train_losses.append(value)
        acc = float(np.mean(np.argmax(logits.data, axis=-1) == labels))
        report.rows.append(LogRow(step, "train", value, acc, lr))
        if step % hyper.eval_every == 0 or step == hyper.total_steps:
            with T.no_grad():
                vlogits = [forward(model, val.ids[i:i + 256])[0].data for i in range(0, len(val), 256)]
            vl = np.concatenate(vlogits)
            vloss = cross_entropy(Tensor(vl), val.labels).item()
            vacc = float(np.mean(np.argmax(vl, axis=-1) == val.labels))
            report.rows.append(LogRow(step, "val", vloss, vacc, lr))
            log.info("step %d  train_loss %.4f  val_loss %.4f  val_acc %.4f  lr %.3g", step, value, vloss, vacc, lr)
            if not (vacc <= report.best_accuracy):  # also true while best is NaN
                report.best_accuracy = vacc
                report.best_step = step
                report.best_state = model.state_dict()
    model.load_state_dict(report.best_state)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    if metrics_path is not None:
        report.write_csv(metrics_path)
    return report


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.array([values.mean()]) if len(values) else values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
