import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wideattn import attention as att
from wideattn import tensor as T
from wideattn.attention import AttentionConfig, AttentionKind as K
from wideattn.errors import CapabilityError, ConfigError, ContractError, ShapeError
from wideattn.tensor import Tensor

from oracles import dense_attention, mask_set, softmax_hp

ALL_SINGLE = [k for k in K if k is not K.MIXED]
STOCHASTIC = [k for k in ALL_SINGLE if k is not K.LOW_RANK]


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def qkv(rng, *shape):
    return tuple(Tensor(rng.standard_normal(shape)) for _ in range(3))


def small_cfg(kind, heads=2, head_dim=4, seed=0, **kw):
    defaults = {
        K.SLIDING_WINDOW: {"window": 4},
        K.LOCAL_BLOCK: {"block": 4},
        K.STRIDED_SPARSE: {"block": 4, "stride": 3},
        K.LOW_RANK: {"rank": 5},
        K.RANDOM_FEATURE: {"features": 16},
        K.SINKHORN: {"block": 4, "sinkhorn_iters": 5},
        K.MIXED: {"window": 4, "block": 4, "stride": 3, "rank": 4, "features": 16},
    }
    fields = {**defaults.get(K(kind), {}), **kw}
    return AttentionConfig.make(kind, heads, head_dim, seed=seed, **fields)


def init_params(cfg, E, S, rng, scale=0.5):
    params = {}
    for name, (shape, _) in att.param_shapes(cfg, E, S).items():
        params[name] = leaf(rng.standard_normal(shape) * scale)
    return params


def buffers_for(cfg, layer=0):
    return att.make_buffers(cfg, layer)


# -- projections -------------------------------------------------------------------

def test_single_head_identity_projection_takes_leading_features(rng):
    x = rng.standard_normal((5, 6))
    eye = np.eye(6)[:, :3]
    Q, K_, V = att.project_qkv(Tensor(x), Tensor(eye), Tensor(eye), Tensor(eye), heads=1)
    assert Q.shape == (1, 5, 3)
    assert np.array_equal(Q.data[0], x[:, :3])


def test_heads_are_column_slices_of_one_matmul(rng):
    x = rng.standard_normal((2, 5, 8))
    w = [rng.standard_normal((8, 12)) for _ in range(3)]
    Q, K_, V = att.project_qkv(Tensor(x), *(Tensor(a) for a in w), heads=3)
    for h in range(3):
        for got, a in zip((Q, K_, V), w):
            assert np.allclose(got.data[:, h], x @ a[:, 4 * h:4 * h + 4], atol=1e-12)


def test_projection_shape_error(rng):
    w = Tensor(np.ones((4, 4)))
    with pytest.raises(ShapeError):
        att.project_qkv(Tensor(np.ones((3, 5))), w, w, w, heads=2)


def test_attention_parameter_count_for_e512_a64_h8():
    cfg = AttentionConfig.make("dot_product", 8, 64)
    shapes = att.param_shapes(cfg, 512, 128)
    q_k_v = sum(int(np.prod(shapes[n][0])) for n in "qkv")
    assert q_k_v == 786_432
    assert sum(int(np.prod(s)) for s, g in shapes.values() if g == "attention") == 4 * 512 * 64 * 8


@pytest.mark.parametrize("kind", list(K))
def test_shared_projection_count_is_4eah_for_every_kind(kind):
    heads = 8 if kind is K.MIXED else 3
    cfg = small_cfg(kind, heads=heads, head_dim=4)
    shapes = att.param_shapes(cfg, 10, 16)
    n = sum(int(np.prod(s)) for s, g in shapes.values() if g == "attention")
    assert n == 4 * 10 * 4 * heads


# -- dot-product -------------------------------------------------------------------

def test_single_key_gives_v(rng):
    Q, K_, V = qkv(rng, 1, 3)
    out, W = att.scaled_dot_attention(Q, K_, V)
    assert W.tolist() == [[1.0]]
    assert np.array_equal(out.data, V.data)


def test_orthogonal_queries_average_values(rng):
    Q = Tensor(np.array([[1.0, 0.0]] * 3))
    K_ = Tensor(np.array([[0.0, 1.0], [0.0, -2.0], [0.0, 3.0]]))
    V = Tensor(rng.standard_normal((3, 2)))
    out, W = att.scaled_dot_attention(Q, K_, V)
    assert np.allclose(W, 1 / 3)
    assert np.allclose(out.data, V.data.mean(axis=0))


def test_two_position_scalar_example():
    Q = Tensor([[1.0], [0.0]])
    K_ = Tensor([[1.0], [0.0]])
    V = Tensor([[5.0], [7.0]])
    out, W = att.scaled_dot_attention(Q, K_, V)
    assert np.allclose(W[0], [0.7311, 0.2689], atol=1e-4)
    assert abs(out.data[0, 0] - 5.538) < 1e-3
    assert np.allclose(W[0], softmax_hp([1.0, 0.0]), atol=1e-15)


def test_dot_product_matches_dense_oracle(rng):
    Q, K_, V = qkv(rng, 6, 3)
    out, W = att.scaled_dot_attention(Q, K_, V)
    ref, ref_w = dense_attention(Q.data, K_.data, V.data)
    assert np.allclose(out.data, ref, atol=1e-12)
    assert np.allclose(W, ref_w, atol=1e-14)


# -- masks -------------------------------------------------------------------------

def test_local_block_mask_example():
    m = att.build_mask(K.LOCAL_BLOCK, 4, block=2)
    assert m.astype(int).tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]


def test_strided_mask_example():
    m = att.build_mask(K.STRIDED_SPARSE, 6, block=2, stride=2)
    assert np.array_equal(m, mask_set("strided_sparse", 6, block=2, stride=2))


def test_wide_window_is_all_true():
    assert att.build_mask(K.SLIDING_WINDOW, 7, window=14).all()


@given(
    st.sampled_from(["sliding_window", "local_block", "strided_sparse"]),
    st.integers(1, 20),
    st.integers(1, 12),
    st.integers(1, 12),
    st.integers(1, 12),
)
def test_masks_match_set_oracle(kind, S, window, block, stride):
    got = att.build_mask(K(kind), S, window=window, block=block, stride=stride)
    assert np.array_equal(got, mask_set(kind, S, window=window, block=block, stride=stride))
    assert got.diagonal().all()


def test_masks_are_read_only():
    m = att.build_mask(K.LOCAL_BLOCK, 4, block=2)
    with pytest.raises(ValueError):
        m[0, 3] = True


@pytest.mark.parametrize("field,kind", [("window", "sliding_window"), ("block", "local_block"), ("stride", "strided_sparse")])
def test_nonpositive_mask_sizes_are_config_errors(field, kind):
    with pytest.raises(ConfigError):
        small_cfg(kind, **{field: 0})


def test_masked_kinds_match_dense_oracle(rng):
    S = 9
    Q, K_, V = qkv(rng, S, 3)
    for kind, kw in [("sliding_window", {"window": 4}), ("local_block", {"block": 4}), ("strided_sparse", {"block": 3, "stride": 4})]:
        allowed = mask_set(kind, S, **kw)
        out, W = att.scaled_dot_attention(Q, K_, V, att.build_mask(K(kind), S, **kw))
        ref, ref_w = dense_attention(Q.data, K_.data, V.data, allowed)
        assert np.allclose(out.data, ref, atol=1e-12)
        assert np.all(W[~allowed] == 0.0)


# -- linear kernel -----------------------------------------------------------------

def test_linear_kernel_single_position(rng):
    Q, K_, V = qkv(rng, 1, 4)
    out, _ = att.linear_kernel_attention(Q, K_, V)
    assert np.allclose(out.data, V.data, atol=1e-15)


def _phi(x):
    return np.where(x > 0, x + 1.0, np.exp(x))


def test_linear_kernel_matches_explicit_form(rng):
    Q, K_, V = qkv(rng, 2, 7, 3)
    out, W = att.linear_kernel_attention(Q, K_, V, dense=True)
    sim = _phi(Q.data) @ np.swapaxes(_phi(K_.data), -1, -2)
    ref_w = sim / sim.sum(axis=-1, keepdims=True)
    assert np.max(np.abs(out.data - ref_w @ V.data)) < 1e-10
    assert np.max(np.abs(W - ref_w)) < 1e-10
    assert np.max(np.abs(W.sum(-1) - 1)) < 1e-10


# -- random features ---------------------------------------------------------------

def test_random_features_single_position(rng):
    Q, K_, V = qkv(rng, 1, 4)
    for m in (1, 7, 64):
        out, _ = att.random_feature_attention(Q, K_, V, m=m, seed=3)
        assert np.allclose(out.data, V.data, atol=1e-14)


def test_random_features_are_deterministic(rng):
    Q, K_, V = qkv(rng, 5, 4)
    a, _ = att.random_feature_attention(Q, K_, V, m=32, seed=9)
    b, _ = att.random_feature_attention(Q, K_, V, m=32, seed=9)
    assert np.array_equal(a.data, b.data)


def test_random_features_approximate_softmax(rng):
    Q, K_, V = qkv(rng, 4, 2)
    _, W = att.random_feature_attention(Q, K_, V, m=4096, seed=0, dense=True)
    exact = np.array([softmax_hp(row) for row in Q.data @ K_.data.T / np.sqrt(2)])
    assert np.mean(np.abs(W - exact)) < 0.05


def test_random_feature_count_must_be_positive(rng):
    Q, K_, V = qkv(rng, 3, 2)
    with pytest.raises(ConfigError):
        att.random_feature_attention(Q, K_, V, m=0)


# -- low rank ----------------------------------------------------------------------

def test_lowrank_identity_projection_is_dot_product(rng):
    Q, K_, V = qkv(rng, 2, 6, 3)
    eye = Tensor(np.eye(6))
    out, _ = att.lowrank_projection_attention(Q, K_, V, eye, eye)
    ref, _ = att.scaled_dot_attention(Q, K_, V)
    assert np.array_equal(out.data, ref.data) or np.max(np.abs(out.data - ref.data)) < 1e-12


def test_lowrank_output_shape(rng):
    Q, K_, V = qkv(rng, 8, 3)
    p = Tensor(rng.standard_normal((2, 8)))
    out, _ = att.lowrank_projection_attention(Q, K_, V, p, p)
    assert out.shape == (8, 3)


def test_lowrank_rank_above_length(rng):
    Q, K_, V = qkv(rng, 3, 2)
    p = Tensor(np.ones((4, 3)))
    with pytest.raises(ConfigError):
        att.lowrank_projection_attention(Q, K_, V, p, p)


def test_lowrank_gradient_through_projections(rng):
    Q, K_, V = (leaf(rng.standard_normal((5, 3))) for _ in range(3))
    pk, pv = leaf(rng.standard_normal((2, 5))), leaf(rng.standard_normal((2, 5)))
    probe = Tensor(rng.standard_normal((5, 3)))

    def f(q, k, v, a, b):
        return (att.lowrank_projection_attention(q, k, v, a, b)[0] * probe).sum()

    assert T.grad_check(f, [Q, K_, V, pk, pv]) < 1e-3


# -- synthesizer -------------------------------------------------------------------

def test_zero_score_map_is_uniform(rng):
    X, _, V = qkv(rng, 5, 3)
    out, W = att.synthesizer_dense_attention(X, V, Tensor(rng.standard_normal((3, 3))), Tensor(np.zeros((3, 5))))
    assert np.allclose(W, 0.2)


def test_synthesizer_rows_sum_to_one_and_gradient(rng):
    X, _, V = (leaf(rng.standard_normal((5, 3))) for _ in range(3))
    w1, w2 = leaf(rng.standard_normal((3, 3))), leaf(rng.standard_normal((3, 5)))
    _, W = att.synthesizer_dense_attention(X, V, w1, w2)
    assert np.max(np.abs(W.sum(-1) - 1)) < 1e-6
    probe = Tensor(rng.standard_normal((5, 3)))

    def f(x, v, a, b):
        return (att.synthesizer_dense_attention(x, v, a, b)[0] * probe).sum()

    assert T.grad_check(f, [X, V, w1, w2]) < 1e-3


def test_synthesizer_score_length_mismatch(rng):
    X, _, V = qkv(rng, 5, 3)
    with pytest.raises(ShapeError):
        att.synthesizer_dense_attention(X, V, Tensor(np.ones((3, 3))), Tensor(np.ones((3, 4))))


# -- sinkhorn ----------------------------------------------------------------------

def test_sinkhorn_fixed_point_and_symmetry():
    assert np.array_equal(att.sinkhorn_normalize(np.eye(2) + 0.0 + 1e-300, 3).data.round(12), np.eye(2))
    out = att.sinkhorn_normalize(np.ones((2, 2)), 1).data
    assert np.array_equal(out, np.full((2, 2), 0.5))


@pytest.mark.parametrize("n", [4, 8])
def test_sinkhorn_random_is_doubly_stochastic(n, rng):
    M = rng.uniform(0.01, 5.0, (n, n))
    out = att.sinkhorn_normalize(M, 20).data
    assert np.max(np.abs(out.sum(0) - 1)) < 1e-4
    assert np.max(np.abs(out.sum(1) - 1)) < 1e-4


def test_sinkhorn_rejects_nonpositive():
    with pytest.raises(ContractError):
        att.sinkhorn_normalize(np.array([[1.0, 0.0], [1.0, 1.0]]), 2)


def test_sinkhorn_single_block_is_dot_product(rng):
    Q, K_, V = qkv(rng, 2, 8, 3)
    sort_w = Tensor(rng.standard_normal((2, 3, 1)))
    out, W = att.sinkhorn_block_attention(Q, K_, V, 8, 5, sort_w, dense=True)
    ref, ref_w = att.scaled_dot_attention(Q, K_, V)
    assert np.max(np.abs(out.data - ref.data)) < 1e-8
    assert np.max(np.abs(W - ref_w)) < 1e-8


def test_soft_sort_matrix_is_doubly_stochastic(rng):
    Q, K_, V = qkv(rng, 2, 16, 3)
    sort_w = Tensor(rng.standard_normal((2, 3, 4)))
    _, _, R = att.sinkhorn_block_attention(Q, K_, V, 4, 20, sort_w, return_sort=True)
    assert np.max(np.abs(R.data.sum(-1) - 1)) < 1e-4
    assert np.max(np.abs(R.data.sum(-2) - 1)) < 1e-4


def test_sinkhorn_block_larger_than_sequence(rng):
    Q, K_, V = qkv(rng, 4, 2)
    with pytest.raises(ConfigError):
        att.sinkhorn_block_attention(Q, K_, V, 5, 3, Tensor(np.ones((2, 1))))
    with pytest.raises(ConfigError):
        small_cfg("sinkhorn_block", block=20).validate(16)


def test_sinkhorn_pads_ragged_sequences(rng):
    Q, K_, V = qkv(rng, 10, 3)
    sort_w = Tensor(rng.standard_normal((3, 3)))
    out, W = att.sinkhorn_block_attention(Q, K_, V, 4, 5, sort_w, dense=True)
    assert out.shape == (10, 3) and W.shape == (10, 10)
    assert np.max(np.abs(W.sum(-1) - 1)) < 1e-12
    assert np.allclose(W @ V.data, out.data, atol=1e-12)


def test_sinkhorn_sort_parameters_are_per_head(rng):
    cfg = small_cfg("sinkhorn_block", heads=2)
    params = init_params(cfg, 8, 16, rng)
    assert params["sort_w"].shape[0] == 2
    x = Tensor(rng.standard_normal((16, 8)))
    Q, K_, V = att.project_qkv(x, params["q"], params["k"], params["v"], 2)
    out, _ = att.sinkhorn_block_attention(Q, K_, V, 4, 5, params["sort_w"])
    # A loss on head 0 alone leaves head 1's sorter untouched.
    T.backward(out[0].sum(), [params["sort_w"]])
    g = params["sort_w"].grad
    assert np.any(g[0] != 0) and np.all(g[1] == 0)


# -- multi-head front end ------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL_SINGLE)
def test_traces_have_one_matrix_per_head_and_match_output(kind, rng):
    cfg = small_cfg(kind, heads=3)
    S, E = 12, 6
    params = init_params(cfg, E, S, rng)
    x = Tensor(rng.standard_normal((2, S, E)))
    y, tr = att.multi_head_forward(x, cfg, params, buffers_for(cfg), trace=True, reconstruct=True)
    assert tr.weights.shape == (2, 3, S, S)
    if kind in STOCHASTIC:
        assert tr.row_stochastic
        assert np.max(np.abs(tr.weights.sum(-1) - 1)) < 1e-5
        assert np.all(tr.weights >= 0)
    # The trace reproduces the output: (W V) merged and projected equals y.
    _, _, V = att.project_qkv(x, params["q"], params["k"], params["v"], 3)
    rebuilt = att.merge_heads(Tensor(tr.weights @ V.data)) @ params["o"]
    if kind is not K.LOW_RANK:
        assert np.max(np.abs(rebuilt.data - y.data)) < 1e-10


def test_48_head_trace(rng):
    cfg = AttentionConfig.make("dot_product", 48, 2)
    params = init_params(cfg, 8, 6, rng)
    _, tr = att.multi_head_forward(Tensor(rng.standard_normal((6, 8))), cfg, params, trace=True)
    assert tr.num_heads == 48 and tr.weights.shape[-2:] == (6, 6)


@pytest.mark.parametrize("kind", [K.LINEAR_KERNEL, K.RANDOM_FEATURE, K.LOW_RANK])
def test_kernelized_trace_requires_reconstruction(kind, rng):
    cfg = small_cfg(kind)
    params = init_params(cfg, 6, 8, rng)
    with pytest.raises(CapabilityError):
        att.multi_head_forward(Tensor(rng.standard_normal((8, 6))), cfg, params, buffers_for(cfg), trace=True)


@pytest.mark.parametrize("kind", [K.SLIDING_WINDOW, K.LOCAL_BLOCK, K.STRIDED_SPARSE])
def test_mask_soundness_with_padding(kind, rng):
    cfg = small_cfg(kind)
    S = 11
    for trial in range(5):
        params = init_params(cfg, 6, S, np.random.default_rng(trial), scale=2.0)
        valid = np.ones((2, S), bool)
        valid[1, 7:] = False
        _, tr = att.multi_head_forward(Tensor(rng.standard_normal((2, S, 6))), cfg, params, key_valid=valid, trace=True)
        mask = att.build_mask(kind, S, cfg.window, cfg.block, cfg.stride)
        assert np.all(tr.weights[..., ~mask] == 0.0)
        real = tr.weights[1, :, :7, 7:]
        assert np.all(real == 0.0)


@pytest.mark.parametrize("kind", ALL_SINGLE)
def test_padded_keys_get_no_weight(kind, rng):
    cfg = small_cfg(kind)
    S = 12
    params = init_params(cfg, 6, S, rng)
    valid = np.ones((1, S), bool)
    valid[0, 9:] = False
    _, tr = att.multi_head_forward(Tensor(rng.standard_normal((1, S, 6))), cfg, params, buffers_for(cfg),
                                   key_valid=valid, trace=True, reconstruct=True)
    assert np.all(np.abs(tr.weights[0, :, :9, 9:]) < 1e-15)
    if kind in STOCHASTIC:
        assert np.max(np.abs(tr.weights[0, :, :9].sum(-1) - 1)) < 1e-10


@pytest.mark.parametrize("kind,fields", [
    (K.SLIDING_WINDOW, {"window": 24}),
    (K.LOCAL_BLOCK, {"block": 12}),
    (K.SINKHORN, {"block": 12}),
    (K.LOW_RANK, {"rank": 12}),
])
def test_degenerate_settings_reduce_to_dot_product(kind, fields, rng):
    S, E, H = 12, 6, 2
    base = AttentionConfig.make("dot_product", H, 3)
    params = init_params(base, E, S, rng)
    cfg = AttentionConfig.make(kind, H, 3, **fields)
    extra = {}
    if kind is K.SINKHORN:
        extra["sort_w"] = Tensor(rng.standard_normal((H, 3, 1)))
    if kind is K.LOW_RANK:
        extra["proj_k"] = extra["proj_v"] = Tensor(np.eye(S))
    x = Tensor(rng.standard_normal((2, S, E)))
    ref, _ = att.multi_head_forward(x, base, params)
    got, _ = att.multi_head_forward(x, cfg, {**params, **extra})
    assert np.max(np.abs(got.data - ref.data)) < 1e-8


def _permute_heads(cfg, params, buffers, perm, A):
    cols = np.concatenate([np.arange(h * A, (h + 1) * A) for h in perm])
    out = {}
    for name, p in params.items():
        d = p.data
        if name in ("q", "k", "v"):
            d = d[:, cols]
        elif name == "o":
            d = d[cols, :]
        elif name in ("syn_w1", "syn_w2", "sort_w"):
            d = d[perm]
        out[name] = Tensor(d)
    bufs = {n: b[perm] for n, b in buffers.items()}
    return out, bufs


@pytest.mark.parametrize("kind", ALL_SINGLE)
def test_head_permutation_invariance(kind, rng):
    cfg = small_cfg(kind, heads=3)
    S, E = 12, 6
    params = init_params(cfg, E, S, rng)
    bufs = buffers_for(cfg)
    x = Tensor(rng.standard_normal((S, E)))
    y, _ = att.multi_head_forward(x, cfg, params, bufs)
    perm = np.array([2, 0, 1])
    p2, b2 = _permute_heads(cfg, params, bufs, perm, cfg.head_dim)
    y2, _ = att.multi_head_forward(x, cfg, p2, b2)
    assert np.max(np.abs(y.data - y2.data)) < 1e-10


@pytest.mark.parametrize("kind", list(K))
def test_gradients_through_every_mechanism(kind):
    rng = np.random.default_rng(5)
    heads = 8 if kind is K.MIXED else 2
    cfg = small_cfg(kind, heads=heads, head_dim=2)
    S, E = 8, 4
    params = init_params(cfg, E, S, rng)
    bufs = buffers_for(cfg)
    x = leaf(rng.standard_normal((S, E)))
    valid = np.ones(S, bool)
    valid[6:] = False
    probe = Tensor(rng.standard_normal((S, E)))
    names = list(params)

    def f(x, *ps):
        y, _ = att.multi_head_forward(x, cfg, dict(zip(names, ps)), bufs, key_valid=valid)
        return (y * probe).sum()

    err = T.grad_check(f, [x, *params.values()], max_coords=12, rng=np.random.default_rng(0))
    assert err < 1e-3


# -- mixed -------------------------------------------------------------------------

def test_default_mix_splits_48_heads_into_6():
    cfg = AttentionConfig.make("mixed", 48, 64)
    assert len(cfg.sub_kinds) == 8
    assert {cfg.sub_config(j).heads for j in range(8)} == {6}


def test_mixed_rejects_uneven_split():
    with pytest.raises(ConfigError):
        AttentionConfig.make("mixed", 6, 64)


def test_identical_dot_product_blocks_equal_single_block(rng):
    n, h, A, E, S = 8, 2, 3, 6, 7
    cfg = AttentionConfig.make("mixed", n * h, A, sub_kinds=["dot_product"] * n)
    single = AttentionConfig.make("dot_product", h, A)
    shared = init_params(single, E, S, rng)
    params = {f"blocks.{j}.{name}": p for j in range(n) for name, p in shared.items()}
    x = Tensor(rng.standard_normal((2, S, E)))
    y, tr = att.multi_head_forward(x, cfg, params, trace=True)
    ref, _ = att.multi_head_forward(x, single, shared)
    assert np.max(np.abs(y.data - ref.data)) < 1e-10
    assert tr.weights.shape == (2, n * h, S, S)


def test_mixed_trace_is_flagged_when_it_contains_lowrank(rng):
    cfg = small_cfg("mixed", heads=16, head_dim=2)
    params = init_params(cfg, 4, 16, rng)
    _, tr = att.multi_head_forward(Tensor(rng.standard_normal((16, 4))), cfg, params, att.make_buffers(cfg, 0),
                                   trace=True, reconstruct=True)
    assert tr.num_heads == 16 and not tr.row_stochastic


# -- config ------------------------------------------------------------------------

def test_config_rejects_irrelevant_fields():
    with pytest.raises(ConfigError):
        AttentionConfig.make("dot_product", 2, 4, window=3)
    with pytest.raises(ConfigError):
        AttentionConfig.make("dot_product", 2, 4, sub_kinds=["dot_product"])


def test_config_round_trips_through_dict():
    cfg = AttentionConfig.make("mixed", 16, 8, seed=4)
    assert AttentionConfig.from_dict(cfg.to_dict(), 16, 8) == cfg


def test_random_features_drawn_per_layer(rng):
    cfg = small_cfg("random_feature")
    a, b = att.make_buffers(cfg, 0)["features"], att.make_buffers(cfg, 1)["features"]
    assert not np.array_equal(a, b)
    assert np.array_equal(a, att.make_buffers(cfg, 0)["features"])
