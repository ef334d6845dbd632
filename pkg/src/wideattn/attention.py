"""Attention mechanisms behind a shared multi-head interface.

All kernels take per-head tensors shaped ``(..., S, A)`` so the same code
serves a single head, ``H`` heads, or a batch of ``H`` heads.  Each returns
``(out, weights)`` where ``weights`` is a numpy ``(..., S, S)`` array when
tracing was requested and ``None`` otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import CapabilityError, ConfigError, ContractError, ShapeError
from .tensor import Tensor


class AttentionKind(str, Enum):
    DOT_PRODUCT = "dot_product"
    LOCAL_BLOCK = "local_block"
    SLIDING_WINDOW = "sliding_window"
    STRIDED_SPARSE = "strided_sparse"
    LINEAR_KERNEL = "linear_kernel"
    RANDOM_FEATURE = "random_feature"
    LOW_RANK = "lowrank_projection"
    SYNTHESIZER = "synthesizer_dense"
    SINKHORN = "sinkhorn_block"
    MIXED = "mixed"


K = AttentionKind

MASKED_KINDS = frozenset({K.LOCAL_BLOCK, K.SLIDING_WINDOW, K.STRIDED_SPARSE})
# Kinds whose fast path never forms S x S weights; tracing them needs an
# explicit dense reconstruction.
KERNELIZED_KINDS = frozenset({K.LINEAR_KERNEL, K.RANDOM_FEATURE, K.LOW_RANK})
# Low-rank reconstructions mix keys with signed projections, so their rows
# need not be a probability distribution.
NON_STOCHASTIC_KINDS = frozenset({K.LOW_RANK})

SINGLE_KINDS = tuple(k for k in K if k is not K.MIXED)

REQUIRED_FIELDS: dict[AttentionKind, tuple[str, ...]] = {
    K.DOT_PRODUCT: (),
    K.LOCAL_BLOCK: ("block",),
    K.SLIDING_WINDOW: ("window",),
    K.STRIDED_SPARSE: ("block", "stride"),
    K.LINEAR_KERNEL: (),
    K.RANDOM_FEATURE: ("features",),
    K.LOW_RANK: ("rank",),
    K.SYNTHESIZER: (),
    K.SINKHORN: ("block", "sinkhorn_iters"),
}

DEFAULTS = {"window": 8, "block": 16, "stride": 8, "rank": 32, "features": 64, "sinkhorn_iters": 5}
KIND_FIELDS = tuple(DEFAULTS)

# BigBird is not implemented; dot-product attention takes its slot so the
# default mixture still has eight blocks.
DEFAULT_MIX = (
    K.LINEAR_KERNEL,
    K.LOW_RANK,
    K.LOCAL_BLOCK,
    K.SLIDING_WINDOW,
    K.RANDOM_FEATURE,
    K.STRIDED_SPARSE,
    K.SYNTHESIZER,
    K.DOT_PRODUCT,
)


def _required(kind: AttentionKind, sub_kinds: Sequence[AttentionKind] | None) -> set[str]:
    if kind is K.MIXED:
        return set().union(*(REQUIRED_FIELDS[s] for s in sub_kinds or ()))
    return set(REQUIRED_FIELDS[kind])


@dataclass(frozen=True)
class AttentionConfig:
    kind: AttentionKind
    heads: int
    head_dim: int
    window: int | None = None
    block: int | None = None
    stride: int | None = None
    rank: int | None = None
    features: int | None = None
    sinkhorn_iters: int | None = None
    sub_kinds: tuple[AttentionKind, ...] | None = None
    seed: int = 0

    @classmethod
    def make(cls, kind, heads: int, head_dim: int, seed: int = 0, sub_kinds=None, **kw) -> "AttentionConfig":
        """Build a config, filling defaults for every field ``kind`` needs."""
        kind = AttentionKind(kind)
        if kind is K.MIXED:
            sub_kinds = tuple(AttentionKind(s) for s in (sub_kinds or DEFAULT_MIX))
        elif sub_kinds:
            raise ConfigError(f"sub_kinds only apply to mixed attention, not {kind.value}")
        need = _required(kind, sub_kinds)
        values = {}
        for name in KIND_FIELDS:
            given = kw.pop(name, None)
            if given is not None and name not in need:
                raise ConfigError(f"{name} does not apply to {kind.value} attention")
            if name in need:
                values[name] = DEFAULTS[name] if given is None else int(given)
        if kw:
            raise ConfigError(f"unknown attention fields: {sorted(kw)}")
        cfg = cls(kind=kind, heads=heads, head_dim=head_dim, sub_kinds=sub_kinds, seed=seed, **values)
        cfg.check_fields()
        return cfg

    def check_fields(self) -> None:
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("heads and head_dim must be positive")
        if self.kind is K.MIXED:
            if not self.sub_kinds:
                raise ConfigError("mixed attention needs at least one sub-kind")
            if any(s is K.MIXED for s in self.sub_kinds):
                raise ConfigError("mixed attention cannot nest mixed sub-kinds")
            if self.heads % len(self.sub_kinds):
                raise ConfigError(
                    f"{self.heads} heads cannot be split evenly over {len(self.sub_kinds)} mechanisms"
                )
        need = _required(self.kind, self.sub_kinds)
        for name in KIND_FIELDS:
            value = getattr(self, name)
            if name in need and value is None:
                raise ConfigError(f"{self.kind.value} attention requires {name}")
            if name not in need and value is not None:
                raise ConfigError(f"{name} does not apply to {self.kind.value} attention")
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")

    def validate(self, seq_len: int) -> None:
        self.check_fields()
        if self.rank is not None and self.rank > seq_len:
            raise ConfigError(f"projection rank {self.rank} exceeds sequence length {seq_len}")
        if self.kind is K.SINKHORN or (self.sub_kinds and K.SINKHORN in self.sub_kinds):
            if self.block > seq_len:
                raise ConfigError(f"sinkhorn block {self.block} exceeds sequence length {seq_len}")

    def sub_config(self, index: int) -> "AttentionConfig":
        sub = self.sub_kinds[index]
        kept = {name: getattr(self, name) for name in REQUIRED_FIELDS[sub]}
        return AttentionConfig(
            kind=sub,
            heads=self.heads // len(self.sub_kinds),
            head_dim=self.head_dim,
            seed=self.seed,
            **kept,
        )

    def with_heads(self, heads: int) -> "AttentionConfig":
        return replace(self, heads=heads)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "seed": self.seed}
        for name in KIND_FIELDS:
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.sub_kinds:
            out["sub_kinds"] = [s.value for s in self.sub_kinds]
        return out

    @classmethod
    def from_dict(cls, d: Mapping, heads: int, head_dim: int) -> "AttentionConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)} - {"heads", "head_dim"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown attention fields: {sorted(unknown)}")
        kind = d.pop("kind")
        return cls.make(kind, heads, head_dim, **d)


@dataclass
class AttentionTrace:
    """Per-head attention weights for one layer: ``weights`` is ``(..., H, S, S)``."""

    weights: np.ndarray
    row_stochastic: bool = True

    @property
    def num_heads(self) -> int:
        return self.weights.shape[-3]


# -- parameters ----------------------------------------------------------------

def num_sort_blocks(seq_len: int, block: int) -> int:
    return -(-seq_len // block)


def param_shapes(cfg: AttentionConfig, embed_dim: int, seq_len: int) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, group) for one layer's attention parameters.

    Group ``"attention"`` holds the shared Q/K/V/output projections counted by
    the 4·E·A·H term; ``"mechanism"`` holds kind-specific extras.
    """
    if cfg.kind is K.MIXED:
        out = {}
        for j in range(len(cfg.sub_kinds)):
            for name, spec in param_shapes(cfg.sub_config(j), embed_dim, seq_len).items():
                out[f"blocks.{j}.{name}"] = spec
        return out
    E, A, H = embed_dim, cfg.head_dim, cfg.heads
    shapes = {
        "q": ((E, A * H), "attention"),
        "k": ((E, A * H), "attention"),
        "v": ((E, A * H), "attention"),
        "o": ((A * H, E), "attention"),
    }
    if cfg.kind is K.LOW_RANK:
        shapes["proj_k"] = ((cfg.rank, seq_len), "mechanism")
        shapes["proj_v"] = ((cfg.rank, seq_len), "mechanism")
    elif cfg.kind is K.SYNTHESIZER:
        shapes["syn_w1"] = ((H, A, A), "mechanism")
        shapes["syn_w2"] = ((H, A, seq_len), "mechanism")
    elif cfg.kind is K.SINKHORN:
        shapes["sort_w"] = ((H, A, num_sort_blocks(seq_len, cfg.block)), "mechanism")
    return shapes


def draw_features(m: int, head_dim: int, seed: int, heads: int | None = None, stream=()) -> np.ndarray:
    """Unit-Gaussian random-feature projections, fixed once per seed."""
    if m < 1:
        raise ConfigError(f"random feature count must be >= 1, got {m}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(stream)))
    shape = (m, head_dim) if heads is None else (heads, m, head_dim)
    return rng.standard_normal(shape)


def buffer_shapes(cfg: AttentionConfig) -> list[str]:
    if cfg.kind is K.MIXED:
        return [f"blocks.{j}.{n}" for j in range(len(cfg.sub_kinds)) for n in buffer_shapes(cfg.sub_config(j))]
    return ["features"] if cfg.kind is K.RANDOM_FEATURE else []


def make_buffers(cfg: AttentionConfig, layer: int, dtype=np.float64) -> dict[str, np.ndarray]:
    if cfg.kind is K.MIXED:
        out = {}
        for j in range(len(cfg.sub_kinds)):
            sub = cfg.sub_config(j)
            if sub.kind is K.RANDOM_FEATURE:
                feats = draw_features(sub.features, sub.head_dim, cfg.seed, sub.heads, stream=(layer, j))
                out[f"blocks.{j}.features"] = feats.astype(dtype)
        return out
    if cfg.kind is K.RANDOM_FEATURE:
        feats = draw_features(cfg.features, cfg.head_dim, cfg.seed, cfg.heads, stream=(layer, 0))
        return {"features": feats.astype(dtype)}
    return {}


# -- masks -----------------------------------------------------------------------

@lru_cache(maxsize=64)
def _cached_mask(kind: AttentionKind, S: int, window, block, stride) -> np.ndarray:
    i = np.arange(S)[:, None]
    j = np.arange(S)[None, :]
    if kind is K.SLIDING_WINDOW:
        mask = np.abs(i - j) <= window // 2
    elif kind is K.LOCAL_BLOCK:
        mask = (i // block) == (j // block)
    elif kind is K.STRIDED_SPARSE:
        mask = ((i // block) == (j // block)) | ((j - i) % stride == 0)
    else:
        raise ConfigError(f"{kind.value} attention has no static mask")
    mask.setflags(write=False)
    return mask


def build_mask(kind, S: int, window: int | None = None, block: int | None = None, stride: int | None = None) -> np.ndarray:
    """Boolean ``S x S`` mask of permitted (query, key) pairs."""
    kind = AttentionKind(kind)
    needed = {"window": window, "block": block, "stride": stride}
    for name in REQUIRED_FIELDS.get(kind, ()):
        value = needed.get(name)
        if value is None or value < 1:
            raise ConfigError(f"{kind.value} mask needs {name} >= 1, got {value}")
    return _cached_mask(kind, S, window, block, stride)


def _padding_mask(key_valid: np.ndarray | None, S: int) -> np.ndarray | None:
    # Padded keys are hidden from every query except themselves, so padded
    # query rows stay well-defined without touching real rows.
    if key_valid is None:
        return None
    return key_valid[..., None, None, :] | np.eye(S, dtype=bool)


def _combine(a: np.ndarray | None, b: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return b
    if b is None:
        return a
    return a & b


# -- kernels ---------------------------------------------------------------------

def project_qkv(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, heads: int):
    """Project ``(..., S, E)`` inputs into per-head ``(..., H, S, A)`` Q, K, V."""
    E = x.shape[-1]
    for name, w in (("q", wq), ("k", wk), ("v", wv)):
        if w.shape[0] != E:
            raise ShapeError(f"{name} projection expects E={w.shape[0]}, input has E={E}")
        if w.shape[1] % heads:
            raise ShapeError(f"{name} projection width {w.shape[1]} is not divisible by {heads} heads")
    A = wq.shape[1] // heads
    lead, S = x.shape[:-2], x.shape[-2]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(w):
        return (x @ w).reshape(lead + (S, heads, A)).transpose(perm)

    return split(wq), split(wk), split(wv)


def merge_heads(h: Tensor) -> Tensor:
    """``(..., H, S, A)`` -> ``(..., S, H*A)``."""
    lead = h.shape[:-3]
    H, S, A = h.shape[-3:]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return h.transpose(perm).reshape(lead + (S, H * A))


def scaled_dot_attention(Q: Tensor, K_: Tensor, V: Tensor, mask: np.ndarray | None = None):
    """``softmax(Q K^T / sqrt(A))`` with forbidden entries exactly zero."""
    A = Q.shape[-1]
    scores = T.scale(Q @ K_.swapaxes(-1, -2), 1.0 / math.sqrt(A))
    W = T.softmax_lastdim(scores, mask)
    return W @ V, W.data


def _kernel_attention(phi_q: Tensor, phi_k: Tensor, V: Tensor, dense: bool):
    kv = phi_k.swapaxes(-1, -2) @ V
    k_sum = phi_k.sum(axis=-2, keepdims=True)
    z = (phi_q * k_sum).sum(axis=-1, keepdims=True)
    if not (z.data > 0).all():
        raise ContractError("kernelized attention normalizer is not positive")
    out = (phi_q @ kv) / z
    W = None
    if dense:
        W = (phi_q.data @ np.swapaxes(phi_k.data, -1, -2)) / z.data
    return out, W


def _key_weights(key_valid: np.ndarray | None, dtype) -> np.ndarray | None:
    if key_valid is None:
        return None
    return key_valid[..., None, :, None].astype(dtype)


def elu_feature_map(x: Tensor) -> Tensor:
    return T.elu(x) + 1.0


def linear_kernel_attention(Q: Tensor, K_: Tensor, V: Tensor, key_valid=None, dense: bool = False):
    """Kernelized attention with feature map elu(x) + 1, linear in S."""
    phi_q = elu_feature_map(Q)
    phi_k = elu_feature_map(K_)
    kw = _key_weights(key_valid, Q.dtype)
    if kw is not None:
        phi_k = phi_k * kw
    return _kernel_attention(phi_q, phi_k, V, dense)


def positive_random_features(x: Tensor, features: np.ndarray, per_row: bool) -> Tensor:
    """exp(w.x - |x|^2/2) / sqrt(m) on inputs pre-scaled by A^(-1/4).

    A constant shift (per query row, or per key set) keeps exp in range; it
    cancels in the attention normalization.
    """
    A = x.shape[-1]
    m = features.shape[-2]
    xs = T.scale(x, A ** -0.25)
    proj = xs @ Tensor(np.swapaxes(features, -1, -2).astype(x.dtype))
    half_sq = T.scale((xs * xs).sum(axis=-1, keepdims=True), 0.5)
    arg = proj - half_sq
    if per_row:
        shift = arg.data.max(axis=-1, keepdims=True)
    else:
        shift = arg.data.max(axis=(-2, -1), keepdims=True)
    return T.scale(T.exp(arg - Tensor(shift)), 1.0 / math.sqrt(m))


def random_feature_attention(
    Q: Tensor,
    K_: Tensor,
    V: Tensor,
    m: int | None = None,
    seed: int = 0,
    features: np.ndarray | None = None,
    key_valid=None,
    dense: bool = False,
):
    """Softmax-kernel attention estimated with ``m`` positive random features."""
    if features is None:
        if m is None or m < 1:
            raise ConfigError(f"random feature count must be >= 1, got {m}")
        features = draw_features(m, Q.shape[-1], seed)
    phi_q = positive_random_features(Q, features, per_row=True)
    phi_k = positive_random_features(K_, features, per_row=False)
    kw = _key_weights(key_valid, Q.dtype)
    if kw is not None:
        phi_k = phi_k * kw
    return _kernel_attention(phi_q, phi_k, V, dense)


def lowrank_projection_attention(
    Q: Tensor, K_: Tensor, V: Tensor, proj_k: Tensor, proj_v: Tensor, key_valid=None, dense: bool = False
):
    """Keys and values compressed along the sequence axis by learned ``k x S`` maps."""
    S = K_.shape[-2]
    k = proj_k.shape[0]
    if k > S:
        raise ConfigError(f"projection rank {k} exceeds sequence length {S}")
    if proj_k.shape != (k, S) or proj_v.shape != (k, S):
        raise ShapeError(f"projections {proj_k.shape}, {proj_v.shape} do not match rank {k} and length {S}")
    kw = _key_weights(key_valid, Q.dtype)
    if kw is not None:
        K_ = K_ * kw
        V = V * kw
    k_low = proj_k @ K_
    v_low = proj_v @ V
    A = Q.shape[-1]
    W = T.softmax_lastdim(T.scale(Q @ k_low.swapaxes(-1, -2), 1.0 / math.sqrt(A)))
    out = W @ v_low
    dense_w = None
    if dense:
        pv = proj_v.data
        if kw is not None:
            pv = pv * np.swapaxes(kw, -1, -2)
        dense_w = W.data @ pv
    return out, dense_w


def synthesizer_dense_attention(X: Tensor, V: Tensor, w1: Tensor, w2: Tensor, mask: np.ndarray | None = None):
    """Weights synthesized from each position alone: ``softmax(relu(X W1) W2)``."""
    S = V.shape[-2]
    logits = T.relu(X @ w1) @ w2
    if logits.shape[-1] != S:
        raise ShapeError(f"synthesizer produced {logits.shape[-1]} scores per row, sequence length is {S}")
    W = T.softmax_lastdim(logits, mask)
    return W @ V, W.data


def sinkhorn_normalize(M, iters: int) -> Tensor:
    """Alternate row then column normalization ``iters`` times."""
    M = T.as_tensor(M)
    if not (M.data > 0).all():
        raise ContractError("sinkhorn normalization needs strictly positive entries")
    if iters < 1:
        raise ConfigError(f"sinkhorn iterations must be >= 1, got {iters}")
    for _ in range(iters):
        M = M / M.sum(axis=-1, keepdims=True)
        M = M / M.sum(axis=-2, keepdims=True)
    return M


def sinkhorn_block_attention(
    Q: Tensor,
    K_: Tensor,
    V: Tensor,
    block: int,
    iters: int,
    sort_w: Tensor,
    key_valid=None,
    dense: bool = False,
    return_sort: bool = False,
):
    """Block attention over each block plus a learned soft-sorted partner block.

    Block summaries (mean key per block) are scored by ``sort_w`` into an
    ``nb x nb`` matrix, which Sinkhorn normalization turns into a soft
    permutation.  Query block ``i`` attends over its own keys together with
    the keys of sorted block ``i``.  Sequences are padded to a multiple of
    ``block``; padded positions never receive weight.
    """
    S, A = Q.shape[-2], Q.shape[-1]
    if block > S:
        raise ConfigError(f"sinkhorn block {block} exceeds sequence length {S}")
    nb = num_sort_blocks(S, block)
    if sort_w.shape[-1] != nb:
        raise ShapeError(f"sort weights score {sort_w.shape[-1]} blocks, sequence has {nb}")
    Sp = nb * block
    pad = Sp - S
    dtype = Q.dtype

    valid = np.ones(S, dtype=bool) if key_valid is None else np.asarray(key_valid)[..., None, :]
    if pad:
        valid = np.concatenate([valid, np.zeros(valid.shape[:-1] + (pad,), dtype=bool)], axis=-1)

        def padded(t):
            return T.concat([t, Tensor(np.zeros(t.shape[:-2] + (pad, A), dtype=dtype))], axis=-2)

        Q, K_, V = padded(Q), padded(K_), padded(V)
    lead = Q.shape[:-2]
    Qb = Q.reshape(lead + (nb, block, A))
    Kb = K_.reshape(lead + (nb, block, A))
    Vb = V.reshape(lead + (nb, block, A))
    vb = valid.reshape(valid.shape[:-1] + (nb, block))
    vbf = vb.astype(dtype)

    counts = np.maximum(vbf.sum(axis=-1, keepdims=True), 1.0)
    summary = (Kb * Tensor(vbf[..., None])).sum(axis=-2) * Tensor(1.0 / counts)
    logits = summary @ sort_w
    shift = logits.data.max(axis=(-2, -1), keepdims=True)
    positive = T.exp(logits - Tensor(shift))
    # Normalizing the transpose makes the final pass a row normalization,
    # so every query's weights sum exactly to one.
    R = sinkhorn_normalize(positive.swapaxes(-1, -2), iters).swapaxes(-1, -2)

    # Per position p, renormalize block mixing weights over valid sources.
    src = Tensor(vbf[..., None, :, :])  # (..., 1, nb_j, block)
    mix = R.reshape(R.shape + (1,)) * src  # (..., nb_i, nb_j, block)
    denom = mix.sum(axis=-2, keepdims=True)
    sorted_valid = denom.data[..., 0, :] > 0  # (..., nb_i, block)
    mix = mix / (denom + Tensor((denom.data <= 0).astype(dtype)))

    nl = len(mix.shape) - 3
    to_pos = tuple(range(nl)) + (nl + 2, nl, nl + 1)  # (..., block, nb_i, nb_j)
    kv_pos = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)  # (..., block, nb, A)
    mix_p = mix.transpose(to_pos)
    sorted_k = (mix_p @ Kb.transpose(kv_pos)).transpose(kv_pos)
    sorted_v = (mix_p @ Vb.transpose(kv_pos)).transpose(kv_pos)

    keys = T.concat([Kb, sorted_k], axis=-2)
    vals = T.concat([Vb, sorted_v], axis=-2)
    eye = np.eye(block, dtype=bool)
    own_mask = vb[..., :, None, :] | eye
    sort_mask = np.broadcast_to(sorted_valid[..., :, None, :], sorted_valid.shape[:-1] + (block, block))
    own_mask = np.broadcast_to(own_mask, np.broadcast_shapes(own_mask.shape, sort_mask.shape))
    sort_mask = np.broadcast_to(sort_mask, own_mask.shape)
    mask = np.concatenate([own_mask, sort_mask], axis=-1)

    scores = T.scale(Qb @ keys.swapaxes(-1, -2), 1.0 / math.sqrt(A))
    attn = T.softmax_lastdim(scores, mask)
    out = (attn @ vals).reshape(lead + (Sp, A))
    if pad:
        out = out[..., :S, :]

    W = None
    if dense:
        a = attn.data
        a_own, a_sorted = a[..., :block], a[..., block:]
        dense_w = np.einsum("...iqp,ij->...iqjp", a_own, np.eye(nb, dtype=a.dtype))
        dense_w = dense_w + np.einsum("...iqp,...ijp->...iqjp", a_sorted, mix.data)
        W = dense_w.reshape(dense_w.shape[:-4] + (Sp, Sp))[..., :S, :S]
    if return_sort:
        return out, W, R
    return out, W


# -- multi-head front end ---------------------------------------------------------

def _single_kind_heads(
    cfg: AttentionConfig, Q: Tensor, K_: Tensor, V: Tensor, params, buffers, key_valid, trace: bool, S: int
):
    kind = cfg.kind
    pad_mask = _padding_mask(key_valid, S)
    if kind is K.DOT_PRODUCT:
        return scaled_dot_attention(Q, K_, V, pad_mask)
    if kind in MASKED_KINDS:
        mask = build_mask(kind, S, cfg.window, cfg.block, cfg.stride)
        return scaled_dot_attention(Q, K_, V, _combine(mask, pad_mask))
    if kind is K.LINEAR_KERNEL:
        return linear_kernel_attention(Q, K_, V, key_valid, dense=trace)
    if kind is K.RANDOM_FEATURE:
        return random_feature_attention(Q, K_, V, features=buffers["features"], key_valid=key_valid, dense=trace)
    if kind is K.LOW_RANK:
        return lowrank_projection_attention(Q, K_, V, params["proj_k"], params["proj_v"], key_valid, dense=trace)
    if kind is K.SYNTHESIZER:
        return synthesizer_dense_attention(Q, V, params["syn_w1"], params["syn_w2"], pad_mask)
    if kind is K.SINKHORN:
        return sinkhorn_block_attention(
            Q, K_, V, cfg.block, cfg.sinkhorn_iters, params["sort_w"], key_valid, dense=trace
        )
    raise ConfigError(f"unsupported attention kind {kind}")


def _sub_mapping(mapping: Mapping, prefix: str) -> dict:
    return {name[len(prefix):]: value for name, value in mapping.items() if name.startswith(prefix)}


def multi_head_forward(
    x: Tensor,
    cfg: AttentionConfig,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray] | None = None,
    key_valid: np.ndarray | None = None,
    trace: bool = False,
    reconstruct: bool = False,
):
    """Project ``x`` (``(..., S, E)``) into heads, attend, and project back.

    ``key_valid`` (``(..., S)`` booleans) hides padding keys.  With ``trace``
    the per-head weight matrices are returned; kernelized kinds additionally
    need ``reconstruct`` because their fast path never forms them.
    """
    buffers = buffers or {}
    if cfg.kind is K.MIXED:
        return mixed_attention_forward(x, cfg, params, buffers, key_valid, trace, reconstruct)
    if trace and cfg.kind in KERNELIZED_KINDS and not reconstruct:
        raise CapabilityError(f"{cfg.kind.value} attention has no explicit weights; request a dense reconstruction")
    Q, K_, V = project_qkv(x, params["q"], params["k"], params["v"], cfg.heads)
    if Q.shape[-1] != cfg.head_dim:
        raise ShapeError(f"projections give head dim {Q.shape[-1]}, config says {cfg.head_dim}")
    S = x.shape[-2]
    try:
        heads, W = _single_kind_heads(cfg, Q, K_, V, params, buffers, key_valid, trace, S)
    except ContractError as exc:
        raise ContractError(f"{cfg.kind.value} attention: {exc}") from exc
    y = merge_heads(heads) @ params["o"]
    record = None
    if trace:
        record = AttentionTrace(np.array(W), row_stochastic=cfg.kind not in NON_STOCHASTIC_KINDS)
    return y, record


def mixed_attention_forward(
    x: Tensor,
    cfg: AttentionConfig,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray] | None = None,
    key_valid: np.ndarray | None = None,
    trace: bool = False,
    reconstruct: bool = False,
):
    """One multi-head block per sub-kind; the blocks' outputs are averaged."""
    if cfg.kind is not K.MIXED:
        raise ConfigError("mixed_attention_forward needs a mixed config")
    cfg.check_fields()
    buffers = buffers or {}
    n = len(cfg.sub_kinds)
    outputs, traces = [], []
    for j in range(n):
        prefix = f"blocks.{j}."
        y, tr = multi_head_forward(
            x,
            cfg.sub_config(j),
            _sub_mapping(params, prefix),
            _sub_mapping(buffers, prefix),
            key_valid,
            trace,
            reconstruct,
        )
        outputs.append(y)
        traces.append(tr)
    total = outputs[0]
    for y in outputs[1:]:
        total = total + y
    y = T.scale(total, 1.0 / n)
    record = None
    if trace:
        record = AttentionTrace(
            np.concatenate([t.weights for t in traces], axis=-3),
            row_stochastic=all(t.row_stochastic for t in traces),
        )
    return y, record
