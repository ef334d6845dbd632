"""Encoder classifier parameterized by its aspect ratio (layers x heads per layer)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionKind, AttentionTrace, make_buffers, multi_head_forward, param_shapes
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import Tensor

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
NUM_SPECIALS = 3
BYTE_VOCAB_SIZE = 256 + NUM_SPECIALS

INIT_STD = 0.02


class Pooling(str, Enum):
    CLS = "cls"
    MEAN = "mean"


@dataclass(frozen=True)
class AspectRatio:
    layers: int
    heads: int

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ConfigError(f"aspect ratio needs positive layers and heads, got ({self.layers}, {self.heads})")

    @property
    def total_heads(self) -> int:
        return self.layers * self.heads

    def __iter__(self):
        return iter((self.layers, self.heads))


def aspect_ratio_grid(total_heads: int) -> list[AspectRatio]:
    """Deepest-to-widest ratios with ``layers * heads == total_heads``.

    48 and 16 give the grids used for the byte/token tasks and for document
    matching; any other total yields every divisor pair.
    """
    if total_heads < 1:
        raise ConfigError(f"total heads must be >= 1, got {total_heads}")
    if total_heads == 48:
        pairs = [(6, 8), (3, 16), (2, 24), (1, 48)]
    elif total_heads == 16:
        pairs = [(4, 4), (2, 8), (1, 16)]
    else:
        pairs = [(total_heads // h, h) for h in range(1, total_heads + 1) if total_heads % h == 0]
    return [AspectRatio(L, H) for L, H in pairs]


def encoder_param_count(L: int, E: int, A: int, H: int, M: int) -> int:
    """Bias-free encoder parameters: L(3EAH + AHE + EM + ME) = 2LE(2AH + M)."""
    for name, v in (("L", L), ("E", E), ("A", A), ("H", H), ("M", M)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    return 2 * L * E * (2 * A * H + M)


@dataclass(frozen=True)
class ModelConfig:
    ratio: AspectRatio
    embed_dim: int
    head_dim: int
    ffn_dim: int
    seq_len: int
    vocab_size: int
    num_classes: int
    attention: AttentionConfig
    pooling: Pooling = Pooling.CLS
    norm_eps: float = 1e-5

    @classmethod
    def create(
        cls,
        layers: int,
        heads: int,
        embed_dim: int = 512,
        head_dim: int = 64,
        ffn_dim: int = 2048,
        seq_len: int = 1024,
        vocab_size: int = BYTE_VOCAB_SIZE,
        num_classes: int = 2,
        kind="dot_product",
        pooling=None,
        attention_seed: int = 0,
        **attn_fields,
    ) -> "ModelConfig":
        attn = AttentionConfig.make(kind, heads, head_dim, seed=attention_seed, **attn_fields)
        if pooling is None:
            pooling = default_pooling(attn.kind)
        cfg = cls(
            ratio=AspectRatio(layers, heads),
            embed_dim=embed_dim,
            head_dim=head_dim,
            ffn_dim=ffn_dim,
            seq_len=seq_len,
            vocab_size=vocab_size,
            num_classes=num_classes,
            attention=attn,
            pooling=Pooling(pooling),
        )
        cfg.validate()
        return cfg

    @property
    def layers(self) -> int:
        return self.ratio.layers

    @property
    def heads(self) -> int:
        return self.ratio.heads

    def validate(self) -> None:
        for name in ("embed_dim", "head_dim", "ffn_dim", "seq_len", "vocab_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        if self.attention.heads != self.ratio.heads or self.attention.head_dim != self.head_dim:
            raise ConfigError("attention heads/head_dim disagree with the model's aspect ratio")
        if self.pooling is not default_pooling(self.attention.kind):
            raise ConfigError(
                f"{self.attention.kind.value} attention uses {default_pooling(self.attention.kind).value} pooling"
            )
        self.attention.validate(self.seq_len)

    def with_ratio(self, layers: int, heads: int) -> "ModelConfig":
        cfg = replace(self, ratio=AspectRatio(layers, heads), attention=self.attention.with_heads(heads))
        cfg.validate()
        return cfg

    def with_attention(self, kind, **attn_fields) -> "ModelConfig":
        attn = AttentionConfig.make(kind, self.heads, self.head_dim, seed=self.attention.seed, **attn_fields)
        cfg = replace(self, attention=attn, pooling=default_pooling(attn.kind))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "seq_len": self.seq_len,
            "vocab_size": self.vocab_size,
            "num_classes": self.num_classes,
            "pooling": self.pooling.value,
            "norm_eps": self.norm_eps,
            "attention": self.attention.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        allowed = {
            "layers", "heads", "embed_dim", "head_dim", "ffn_dim", "seq_len",
            "vocab_size", "num_classes", "pooling", "norm_eps", "attention",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            layers, heads, head_dim = d["layers"], d["heads"], d["head_dim"]
            attn = AttentionConfig.from_dict(d.get("attention", {"kind": "dot_product"}), heads, head_dim)
            pooling = Pooling(d["pooling"]) if "pooling" in d else default_pooling(attn.kind)
            cfg = cls(
                ratio=AspectRatio(layers, heads),
                embed_dim=d["embed_dim"],
                head_dim=head_dim,
                ffn_dim=d["ffn_dim"],
                seq_len=d["seq_len"],
                vocab_size=d["vocab_size"],
                num_classes=d["num_classes"],
                attention=attn,
                pooling=pooling,
                norm_eps=d.get("norm_eps", 1e-5),
            )
        except KeyError as exc:
            raise ConfigError(f"model config is missing {exc.args[0]!r}") from None
        cfg.validate()
        return cfg


def default_pooling(kind: AttentionKind) -> Pooling:
    return Pooling.MEAN if kind is AttentionKind.SINKHORN else Pooling.CLS


# -- parameter layout ---------------------------------------------------------------

GROUPS = ("embeddings", "positional", "attention", "mechanism", "ffn", "norms", "classifier")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Ordered name -> (shape, group) for every parameter of ``cfg``."""
    E, M = cfg.embed_dim, cfg.ffn_dim
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "embed": ((cfg.vocab_size, E), "embeddings"),
        "pos": ((cfg.seq_len, E), "positional"),
    }
    attn_shapes = param_shapes(cfg.attention, E, cfg.seq_len)
    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        for name, spec in attn_shapes.items():
            shapes[p + "attn." + name] = spec
        shapes[p + "norm1.gamma"] = ((E,), "norms")
        shapes[p + "norm1.beta"] = ((E,), "norms")
        shapes[p + "ffn.w1"] = ((E, M), "ffn")
        shapes[p + "ffn.w2"] = ((M, E), "ffn")
        shapes[p + "norm2.gamma"] = ((E,), "norms")
        shapes[p + "norm2.beta"] = ((E,), "norms")
    shapes["classifier.w"] = ((E, cfg.num_classes), "classifier")
    shapes["classifier.b"] = ((cfg.num_classes,), "classifier")
    return shapes


@dataclass
class ParamBreakdown:
    by_group: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.by_group.values())

    @property
    def encoder(self) -> int:
        """Bias-free attention projections plus FFN, the closed-form count."""
        return self.by_group["attention"] + self.by_group["ffn"]


def param_breakdown(cfg: ModelConfig) -> ParamBreakdown:
    counts = dict.fromkeys(GROUPS, 0)
    for shape, group in parameter_shapes(cfg).values():
        counts[group] += int(np.prod(shape))
    return ParamBreakdown(counts)


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    x = rng.standard_normal(int(np.prod(shape)))
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).reshape(shape)


@dataclass
class ClassifierModel:
    config: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def layer_params(self, layer: int, part: str) -> dict[str, Tensor]:
        prefix = f"layers.{layer}.{part}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def layer_buffers(self, layer: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{layer}.attn."
        return {k[len(prefix):]: v for k, v in self.buffers.items() if k.startswith(prefix)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError("parameter names do not match the model")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=self.dtype)


def _build_buffers(cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    buffers = {}
    for layer in range(cfg.layers):
        for name, arr in make_buffers(cfg.attention, layer, dtype).items():
            buffers[f"layers.{layer}.attn.{name}"] = arr
    return buffers


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ClassifierModel:
    """Initialize every parameter from ``seed`` (truncated normal, std 0.02)."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, group) in parameter_shapes(config).items():
        if name.endswith("gamma"):
            arr = np.ones(shape)
        elif name.endswith("beta") or name == "classifier.b":
            arr = np.zeros(shape)
        else:
            arr = truncated_normal(rng, shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ClassifierModel(config, params, _build_buffers(config, dtype))


def total_param_count(model_or_config) -> ParamBreakdown:
    if isinstance(model_or_config, ClassifierModel):
        counts = dict.fromkeys(GROUPS, 0)
        shapes = parameter_shapes(model_or_config.config)
        for name, p in model_or_config.params.items():
            counts[shapes[name][1]] += p.size
        return ParamBreakdown(counts)
    return param_breakdown(model_or_config)


# -- forward ----------------------------------------------------------------------

def pool(features: Tensor, kind, valid: np.ndarray | None = None) -> Tensor:
    """CLS row or mean over non-padding rows of ``(..., S, E)`` features."""
    kind = Pooling(kind)
    if kind is Pooling.CLS:
        return features[..., 0, :]
    if valid is None:
        return features.mean(axis=-2)
    w = np.asarray(valid, dtype=features.dtype)
    counts = np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
    return (features * Tensor(w[..., None])).sum(axis=-2) * Tensor(1.0 / counts)


def forward(
    model: ClassifierModel,
    token_ids,
    trace: bool = False,
    reconstruct: bool = False,
):
    """Logits ``(B, num_classes)`` for ``(B, S)`` ids, plus per-layer traces if asked."""
    cfg = model.config
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[-1] != cfg.seq_len:
        raise ShapeError(f"expected sequences of length {cfg.seq_len}, got {ids.shape[-1]}")
    valid = ids != PAD_ID
    key_valid = None if valid.all() else valid
    p = model.params
    h = T.embedding_lookup(p["embed"], ids) + p["pos"]
    traces: list[AttentionTrace] = []
    for layer in range(cfg.layers):
        a, tr = multi_head_forward(
            h,
            cfg.attention,
            model.layer_params(layer, "attn"),
            model.layer_buffers(layer),
            key_valid,
            trace,
            reconstruct,
        )
        if trace:
            traces.append(tr)
        pre = f"layers.{layer}."
        h = T.layer_norm(h + a, p[pre + "norm1.gamma"], p[pre + "norm1.beta"], cfg.norm_eps)
        f = T.gelu(h @ p[pre + "ffn.w1"]) @ p[pre + "ffn.w2"]
        h = T.layer_norm(h + f, p[pre + "norm2.gamma"], p[pre + "norm2.beta"], cfg.norm_eps)
    pooled = pool(h, cfg.pooling, valid if cfg.pooling is Pooling.MEAN else None)
    logits = pooled @ p["classifier.w"] + p["classifier.b"]
    return logits, (traces if trace else None)


# -- checkpoints --------------------------------------------------------------------

MAGIC = b"WADN"
VERSION = 1


def save_checkpoint(model: ClassifierModel, path) -> Path:
    """Write magic, version, config JSON and a table of little-endian f32 tensors."""
    path = Path(path)
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config: ModelConfig | None = None, dtype=np.float32) -> ClassifierModel:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad config record: {exc}") from None
    if expected_config is not None and expected_config != cfg:
        raise CheckpointError("checkpoint config does not match the expected config")
    shapes = parameter_shapes(cfg)
    (count,) = r.unpack("<I")
    if count != len(shapes):
        raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(shapes)}")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name in params:
            raise CheckpointError(f"duplicate tensor {name}")
        if name not in shapes or shapes[name][0] != tuple(shape):
            raise CheckpointError(f"unexpected tensor {name} with shape {tuple(shape)}")
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after tensor table")
    ordered = {name: params[name] for name in shapes}
    return ClassifierModel(cfg, ordered, _build_buffers(cfg, dtype))


def checkpoint_roundtrip(model: ClassifierModel, path) -> ClassifierModel:
    save_checkpoint(model, path)
    return load_checkpoint(path, expected_config=model.config, dtype=model.dtype)
