import numpy as np
import pytest
from hypothesis import given, strategies as st

from msdiffseg import tensor as tc
from msdiffseg.attention import (
    AttentionConfig,
    AttentionInputs,
    attend,
    cbla,
    dot_attention,
    init_projections,
    linear_attention,
    multi_head,
    q_bridge,
)
from msdiffseg.errors import ConfigError, DimensionError
from msdiffseg.tensor import Tensor, fd_check

from oracles import cbla_materialized, dot_attention_rows, feature_softmax, linear_attention_materialized


def random_inputs(seed, n, dk, dv, scale=1.0):
    rng = np.random.default_rng(seed)
    return (
        rng.standard_normal((n, dk)) * scale,
        rng.standard_normal((n, dk)) * scale,
        rng.standard_normal((n, dv)) * scale,
    )


def inputs(Q, K, V):
    return AttentionInputs(Tensor(Q), Tensor(K), Tensor(V))


def test_inputs_validate_shapes():
    with pytest.raises(DimensionError):
        inputs(np.zeros((3, 2)), np.zeros((3, 4)), np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        inputs(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((3, 2)))


# dot attention


def test_dot_single_token_returns_v():
    V = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_allclose(dot_attention(inputs(np.ones((1, 2)), np.ones((1, 2)), V)).data, V)


def test_dot_identical_keys_average_values():
    Q, _, V = random_inputs(0, 4, 3, 2)
    K = np.tile(np.array([[0.3, -1.0, 2.0]]), (4, 1))
    out = dot_attention(inputs(Q, K, V)).data
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (4, 1)), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_dot_matches_per_row_oracle(seed):
    Q, K, V = random_inputs(seed, 3, 2, 2)
    np.testing.assert_allclose(dot_attention(inputs(Q, K, V)).data, dot_attention_rows(Q, K, V), atol=1e-12)


# linear attention


def test_linear_single_token_returns_v():
    Q, K, V = random_inputs(1, 1, 4, 3)
    np.testing.assert_allclose(linear_attention(inputs(Q, K, V)).data, V, atol=1e-12)


def test_linear_constant_values_pass_through():
    Q, K, _ = random_inputs(2, 5, 3, 2)
    V = np.tile([[2.5, -1.0]], (5, 1))
    np.testing.assert_allclose(linear_attention(inputs(Q, K, V)).data, V, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4))
def test_linear_matches_materialized_product(seed, n, dk, dv):
    Q, K, V = random_inputs(seed, n, dk, dv)
    expected, A = linear_attention_materialized(Q, K, V)
    np.testing.assert_allclose(linear_attention(inputs(Q, K, V)).data, expected, atol=1e-12)
    # row stochastic N×N weights
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(A >= 0)


def test_linear_frozen_example():
    Q, K, V = random_inputs(7, 4, 3, 3)
    np.testing.assert_allclose(
        linear_attention(inputs(Q, K, V)).data, linear_attention_materialized(Q, K, V)[0], atol=1e-12
    )


# bridge


def test_bridge_width_one_is_n():
    Q = np.random.default_rng(3).standard_normal((5, 1))
    np.testing.assert_allclose(q_bridge(Tensor(Q), "compact").data, [[5.0]], atol=1e-12)


def test_bridge_zero_query_frozen():
    np.testing.assert_allclose(q_bridge(Tensor([[0.0, 0.0]]), "compact").data, [[0.25, 0.25], [0.25, 0.25]])


def test_bridge_unknown_form():
    with pytest.raises(ConfigError):
        q_bridge(Tensor([[0.0]]), "diagonal")


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 5), st.sampled_from(["compact", "gram"]))
def test_bridge_symmetric_psd(seed, n, dk, form):
    rng = np.random.default_rng(seed)
    B = q_bridge(Tensor(rng.standard_normal((n, dk)) * 3), form).data
    np.testing.assert_allclose(B, B.T, atol=1e-12)
    probes = rng.standard_normal((20, B.shape[0]))
    assert np.all(np.einsum("pi,ij,pj->p", probes, B, probes) >= -1e-10)


# cbla


def test_cbla_single_token_scales_v():
    Q, K, V = random_inputs(4, 1, 3, 2)
    q = feature_softmax(Q)[0]
    np.testing.assert_allclose(cbla(inputs(Q, K, V), "cbla_compact").data, (q @ q) * V, atol=1e-12)


def test_cbla_zero_query_frozen():
    out = cbla(inputs(np.zeros((1, 2)), np.zeros((1, 2)), np.array([[1.0, 2.0]])), "cbla_compact").data
    np.testing.assert_allclose(out, [[0.5, 1.0]], atol=1e-15)


@pytest.mark.parametrize("variant", ["cbla_compact", "cbla_gram"])
def test_cbla_shapes(variant):
    assert cbla(inputs(*random_inputs(5, 5, 3, 4)), variant).shape == (5, 4)


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4), st.integers(1, 3))
def test_cbla_matches_materialized(seed, n, dk, dv):
    Q, K, V = random_inputs(seed, n, dk, dv)
    for variant, form in (("cbla_compact", "compact"), ("cbla_gram", "gram")):
        np.testing.assert_allclose(
            cbla(inputs(Q, K, V), variant).data, cbla_materialized(Q, K, V, form), atol=1e-12
        )


def test_unknown_variant():
    with pytest.raises(ConfigError):
        cbla(inputs(*random_inputs(0, 2, 2, 2)), "cbla_sparse")


# multi-head


def test_config_per_head_width():
    cfg = AttentionConfig("linear", heads=2).for_width(8)
    assert (cfg.d_k, cfg.d_v) == (4, 4)
    with pytest.raises(ConfigError):
        AttentionConfig("linear", heads=3).for_width(8)
    with pytest.raises(ConfigError):
        AttentionConfig("softmax_free")


def test_single_head_identity_projections_reduce_to_linear():
    x = np.random.default_rng(8).standard_normal((3, 2, 4))
    eye = Tensor(np.eye(4))
    params = {"wq": eye, "wk": eye, "wv": eye, "wo": eye}
    out = multi_head(Tensor(x), AttentionConfig("linear", 1), params).data
    flat = x.reshape(6, 4)
    expected = linear_attention(inputs(flat, flat, flat)).data.reshape(3, 2, 4)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_two_heads_output_shape():
    cfg = AttentionConfig("cbla_compact", 2).for_width(8)
    params = init_projections(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((4, 4, 8)))
    assert multi_head(x, cfg, params).shape == (4, 4, 8)


def test_heads_are_independent_slices():
    cfg = AttentionConfig("dot", 2).for_width(4)
    params = init_projections(cfg, np.random.default_rng(2))
    x = np.random.default_rng(3).standard_normal((2, 3, 4))
    flat = x.reshape(6, 4)
    q, k, v = (flat @ params[n].data for n in ("wq", "wk", "wv"))
    heads = [dot_attention_rows(q[:, s], k[:, s], v[:, s]) for s in (slice(0, 2), slice(2, 4))]
    expected = np.concatenate(heads, axis=1) @ params["wo"].data
    np.testing.assert_allclose(multi_head(Tensor(x), cfg, params).data, expected.reshape(2, 3, 4), atol=1e-12)


def test_projection_init_bounds():
    cfg = AttentionConfig("linear", 2).for_width(16)
    params = init_projections(cfg, np.random.default_rng(0))
    assert params["wq"].shape == (16, 16)
    assert np.abs(params["wq"].data).max() <= 0.25


@pytest.mark.parametrize("variant", ["dot", "linear", "cbla_compact", "cbla_gram"])
@pytest.mark.parametrize("seed", range(3))
def test_multi_head_gradient(variant, seed):
    cfg = AttentionConfig(variant, 2).for_width(4)
    params = init_projections(cfg, np.random.default_rng(seed))
    x = Tensor(np.random.default_rng(seed + 10).standard_normal((2, 3, 4)))
    assert fd_check(lambda v: tc.tsum(multi_head(v, cfg, params)), x) <= 1e-4


@pytest.mark.parametrize("variant", ["dot", "linear", "cbla_compact", "cbla_gram"])
def test_attend_gradients_all_inputs(variant):
    Q, K, V = random_inputs(11, 4, 3, 2)
    w = Tensor(np.random.default_rng(12).standard_normal((4, 2)))
    assert fd_check(lambda q: tc.tsum(attend(AttentionInputs(q, Tensor(K), Tensor(V)), variant) * w), Tensor(Q)) <= 1e-6
    assert fd_check(lambda k: tc.tsum(attend(AttentionInputs(Tensor(Q), k, Tensor(V)), variant) * w), Tensor(K)) <= 1e-6
    assert fd_check(lambda v: tc.tsum(attend(AttentionInputs(Tensor(Q), Tensor(K), v), variant) * w), Tensor(V)) <= 1e-6


@pytest.mark.parametrize("variant", ["dot", "linear"])
@given(seed=st.integers(0, 10_000))
def test_joint_row_permutation_is_equivariant(variant, seed):
    Q, K, V = random_inputs(seed, 5, 3, 2)
    perm = np.random.default_rng(seed).permutation(5)
    out = attend(inputs(Q, K, V), variant).data
    permuted = attend(inputs(Q[perm], K[perm], V[perm]), variant).data
    np.testing.assert_allclose(permuted, out[perm], atol=1e-12)
