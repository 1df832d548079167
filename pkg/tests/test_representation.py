import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alcagcn import tensor as T
from alcagcn.fewshot import dataset_arrays, distance_matrix, nll_from_distances
from alcagcn.gradcheck import check_function
from alcagcn.representation import (
    adl_transform,
    attention_scores,
    global_embedding,
    init_adl_params,
    pool_units,
    pooling_weights,
    temporal_sections,
    unit_labels,
)
from alcagcn.tensor import ContractError, Tensor
from alcagcn.topology import ntu_graph

from conftest import small_model

GRAPH = ntu_graph()
BOTH = np.ones((1, 2), bool)


def feature(rng, b=1, d=4):
    return rng.normal(size=(b, d, 19, 25, 2))


def test_sections_of_nineteen():
    assert [len(s) for s in temporal_sections(19)] == [6, 6, 7]
    assert [len(s) for s in temporal_sections(75)] == [25, 25, 25]


def test_unit_counts():
    for division, j in [("both", 24), ("spatial_only", 8), ("temporal_only", 6), ("none", 2)]:
        g, mask = pool_units(Tensor(np.zeros((1, 4, 19, 25, 2))), GRAPH, division, BOTH)
        assert g.shape == (1, j, 4) and mask.shape == (1, j)
        assert len(unit_labels(GRAPH, division)) == j
    with pytest.raises(ContractError):
        pooling_weights(19, GRAPH, "diagonal")


def test_constant_feature_pools_to_constant():
    g, _ = pool_units(Tensor(np.full((1, 3, 19, 25, 2), 2.5)), GRAPH, "both", BOTH)
    np.testing.assert_allclose(g.data, 2.5, rtol=1e-6)
    np.testing.assert_allclose(global_embedding(Tensor(np.full((1, 3, 19, 25, 2), 2.5))).data, 2.5, rtol=1e-6)


def test_unit_indexing_against_hand_means(rng):
    f = feature(rng)
    with T.precision(np.float64):
        g, _ = pool_units(Tensor(f), GRAPH, "both", BOTH)
        none, _ = pool_units(Tensor(f), GRAPH, "none", BOTH)
    head = list(GRAPH.parts["head"])
    np.testing.assert_allclose(g.data[0, 0], f[0][:, :6][:, :, head, 0].mean(axis=(1, 2)))
    labels = unit_labels(GRAPH, "both")
    j = labels.index(("end", "legs", 1))
    legs = list(GRAPH.parts["legs"])
    np.testing.assert_allclose(g.data[0, j], f[0][:, 12:][:, :, legs, 1].mean(axis=(1, 2)))
    np.testing.assert_allclose(none.data[0, 1], f[0, ..., 1].mean(axis=(1, 2)))


def test_position_weighted_units_reproduce_global_mean(rng):
    f = feature(rng)
    with T.precision(np.float64):
        g, _ = pool_units(Tensor(f), GRAPH, "both", BOTH)
        glob = global_embedding(Tensor(f), BOTH).data[0]
    sizes = np.einsum("i,r,m->irm", [6, 6, 7], [len(p) for p in GRAPH.parts.values()], [1, 1]).ravel()
    weighted = sizes @ g.data[0] / sizes.sum()
    # shared boundary joints count once per part they belong to
    mult = sum(np.isin(np.arange(25), p).astype(float) for p in GRAPH.parts.values())
    ref = np.einsum("dtum,u->d", f[0], mult) / (19 * 2 * mult.sum())
    np.testing.assert_allclose(weighted, ref, atol=1e-10)
    # without the multiplicity, a joint-constant feature still matches exactly
    flat = np.broadcast_to(f[:, :, :, :1], f.shape)
    with T.precision(np.float64):
        g_flat, _ = pool_units(Tensor(flat), GRAPH, "both", BOTH)
        glob_flat = global_embedding(Tensor(flat), BOTH).data[0]
    np.testing.assert_allclose(sizes @ g_flat.data[0] / sizes.sum(), glob_flat, atol=1e-10)
    assert not global_embedding(Tensor(np.zeros((1, 4, 19, 25, 2)))).data.any()
    assert glob.shape == (4,)


def test_global_embedding_ignores_absent_performer(rng):
    f = feature(rng)
    f[..., 1] = 0.0
    glob = global_embedding(Tensor(f), np.array([[True, False]])).data
    np.testing.assert_allclose(glob[0], f[0, ..., 0].mean(axis=(1, 2)), rtol=1e-5)


def test_single_valid_unit_gets_full_attention(rng):
    params = init_adl_params(4, 4, rng)
    G = Tensor(rng.normal(size=(1, 3, 4)))
    mask = np.array([[False, True, False]])
    with T.precision(np.float64):
        out, attn = adl_transform(G, mask, Tensor(np.zeros((1, 4))), params, return_attention=True)
    np.testing.assert_allclose(attn.data[0, :, 1], 1.0)
    np.testing.assert_allclose(out.data[0, 0], params["adl.V"].data @ G.data[0, 1], rtol=1e-6)


def test_attention_matches_hand_computation(rng):
    params = init_adl_params(3, 4, rng)
    G = rng.normal(size=(1, 3, 3))
    with T.precision(np.float64):
        attn = attention_scores(Tensor(G), np.ones((1, 3), bool), params["adl.K"], params["adl.Q"]).data[0]
    k = G[0] @ params["adl.K"].data.T
    q = G[0] @ params["adl.Q"].data.T
    logits = q @ k.T / 2.0
    ref = np.exp(logits - logits.max(1, keepdims=True))
    np.testing.assert_allclose(attn, ref / ref.sum(1, keepdims=True), rtol=1e-6)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.lists(st.booleans(), min_size=5, max_size=5).filter(any))
def test_attention_rows_are_distributions(seed, valid):
    rng = np.random.default_rng(seed)
    params = init_adl_params(6, 4, rng)
    mask = np.array([valid])
    attn = attention_scores(Tensor(rng.normal(size=(1, 5, 6))), mask, params["adl.K"], params["adl.Q"]).data
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)
    assert not attn[..., ~mask[0]].any()


def test_all_units_masked_is_error(rng):
    params = init_adl_params(4, 4, rng)
    with pytest.raises(ContractError):
        adl_transform(Tensor(np.ones((1, 2, 4))), np.zeros((1, 2), bool), Tensor(np.ones((1, 4))), params)


def test_permutation_equivariance(rng):
    params = init_adl_params(5, 4, rng)
    G = rng.normal(size=(1, 6, 5))
    f_glob = Tensor(rng.normal(size=(1, 5)))
    perm = rng.permutation(6)
    with T.precision(np.float64):
        out = adl_transform(Tensor(G), np.ones((1, 6), bool), f_glob, params).data
        out_p = adl_transform(Tensor(G[:, perm]), np.ones((1, 6), bool), f_glob, params).data
    np.testing.assert_allclose(out_p[:, np.argsort(perm)], out, atol=1e-10)


def test_adl_gradient_check(rng):
    params = init_adl_params(3, 4, rng)
    mask = np.array([[True, True, False, True]])

    def fn(G, K, Q, V, C, f):
        p = {"adl.K": K, "adl.Q": Q, "adl.V": V, "adl.C": C}
        return adl_transform(G, mask, f, p)

    inputs = {"G": rng.normal(size=(1, 4, 3)), **{k[4:]: v.data for k, v in params.items()},
              "f": rng.normal(size=(1, 3))}
    assert check_function("adl", fn, inputs).rel_error <= 1e-4


def test_no_adl_without_division_is_global_average_model(small_dataset):
    model = small_model(division="none", constraints="no_adl")
    x, m = dataset_arrays(small_dataset)
    x, m = x[:3], m[:3]
    with T.no_grad():
        f = model.encode(x, m)
        g, _ = model.represent(x, m)
        C = model.params["adl.C"].data
        glob = global_embedding(f, m).data
        pooled, _ = pool_units(f, model.graph, "none", m)
    np.testing.assert_allclose(g.data, pooled.data + (glob @ C.T)[:, None], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(g.data[:, 0], pooled.data[:, 0] + glob @ C.T, rtol=1e-5, atol=1e-6)


def test_zero_head_scale_makes_loss_ln_n(small_dataset):
    model = small_model(head_scale=0.0)
    idx = [small_dataset.indices("aux")[i] for i in (0, 7, 14, 21)]
    x, m = dataset_arrays(small_dataset)
    x, m = x[idx], m[idx]
    with T.no_grad():
        g, um = model.represent(x, m)
        d = distance_matrix(g, g, um, um)
        loss = nll_from_distances(d, np.arange(4))
    assert float(loss.data) == pytest.approx(math.log(4), rel=1e-6)
