import itertools
from math import comb

import numpy as np
import pytest

from mmformer import tensor as T
from mmformer.hypergraph import enumerate_hyperedges
from mmformer.model import (
    POOLS, VARIANTS, ModelConfig, MultiOrderPooling, TemporalPool, ThreeMformer,
    assemble_multi_order, coupled_mode_attention, normalized_incidence, rank_coefficients,
    upper_entries,
)
from mmformer.tensor import Tensor


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------------ assembly


def test_multi_order_index_trace():
    J, tau, dp = 5, 2, 4
    rng = np.random.default_rng(0)
    phis = {m: rng.normal(size=(tau,) + (J,) * m + (dp,)) for m in (1, 2, 3)}
    M = assemble_multi_order([upper_entries(phis[m], m) for m in (1, 2, 3)]).data
    assert M.shape == (dp, 25, tau)
    col = 0
    for m in (1, 2, 3):
        for edge in itertools.combinations(range(J), m):
            for t in range(tau):
                assert np.array_equal(M[:, col, t], phis[m][(t,) + edge])
            col += 1


def test_upper_entries_batch_axis():
    phi = np.arange(2 * 4 * 4 * 1.0).reshape(2, 4, 4, 1)
    out = upper_entries(phi, 2).data
    E = enumerate_hyperedges(4, 2)
    assert np.array_equal(out[:, :, 0], phi[:, E[:, 0], E[:, 1], 0])


# ------------------------------------------------------------------ coupled-mode attention


def test_coupled_mode_attention_numpy_oracle():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(2, 6, 5))
    wq, wk, wv = (rng.normal(size=(6, 6)) for _ in range(3))
    out, attn = coupled_mode_attention(M, wq, wk, wv)
    for b in range(2):
        Q, K, V = wq @ M[b], wk @ M[b], wv @ M[b]
        A = _softmax(Q @ K.T / np.sqrt(5))
        np.testing.assert_allclose(attn.data[b], A, atol=1e-12)
        np.testing.assert_allclose(out.data[b], A @ V, atol=1e-12)


def test_attention_degeneracies():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(4, 3))
    wk, wv = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    out, attn = coupled_mode_attention(M, np.zeros((4, 4)), wk, wv)
    assert np.allclose(attn.data, 0.25)
    assert np.allclose(out.data, np.tile((wv @ M).mean(axis=0), (4, 1)))
    same = np.ones((4, 3))
    _, attn = coupled_mode_attention(same, rng.normal(size=(4, 4)), np.eye(4), wv)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ MP


def test_normalized_incidence_columns():
    H = normalized_incidence(5, 3)
    assert H.shape == (10, 5)
    assert np.allclose(H.sum(axis=0), 1.0)
    E = enumerate_hyperedges(5, 3)
    for e, j in itertools.product(range(10), range(5)):
        assert (H[e, j] > 0) == (j in E[e])


def test_mp_incidence_pooling_matches_mask_average():
    rng = np.random.default_rng(3)
    J, rows = 5, 3
    mp = MultiOrderPooling(rows, J, (1, 2, 3), rng)
    x = rng.normal(size=(2, rows, 25))
    out = mp(x).data
    o, _ = coupled_mode_attention(x, mp.wq.data, mp.wk.data, mp.wv.data)
    o = o.data
    start = 0
    for k, m in enumerate((1, 2, 3)):
        E = enumerate_hyperedges(J, m)
        for j in range(J):
            cols = [start + i for i, e in enumerate(E) if j in e]
            np.testing.assert_allclose(out[:, k * rows:(k + 1) * rows, j], o[:, :, cols].mean(axis=-1), atol=1e-12)
        start += len(E)


def test_mp_identity_pooling():
    rng = np.random.default_rng(4)
    mp = MultiOrderPooling(2, 4, (1,), rng)
    assert np.array_equal(mp.pool[0].data, np.eye(4))
    x = rng.normal(size=(1, 2, 4))
    o, _ = coupled_mode_attention(x, mp.wq, mp.wk, mp.wv)
    np.testing.assert_allclose(mp(x).data, o.data, atol=1e-12)


def test_mp_output_shape_and_errors():
    mp = MultiOrderPooling(8, 5, (1, 2, 3), np.random.default_rng(0))
    assert mp(np.zeros((1, 8, 25))).shape == (1, 24, 5)
    with pytest.raises(ValueError):
        mp(np.zeros((1, 8, 24)))


# ------------------------------------------------------------------ temporal pooling


def test_basic_pools():
    o = np.random.default_rng(5).normal(size=(2, 3, 4))
    rng = np.random.default_rng(0)
    assert np.allclose(TemporalPool("avg", 3, rng)(o).data, o.mean(-1))
    assert np.allclose(TemporalPool("max", 3, rng)(o).data, o.max(-1))
    assert np.allclose(TemporalPool("sum", 3, rng)(o).data, o.sum(-1))
    with pytest.raises(ValueError):
        TemporalPool("median", 3, rng)


def test_attn_and_tri_pool_oracles():
    rng = np.random.default_rng(6)
    o = rng.normal(size=(2, 3, 4))
    p = TemporalPool("attn", 3, rng)
    s = _softmax(np.einsum("bpt,p->bt", o / np.linalg.norm(o, axis=1, keepdims=True), p.w.data))
    np.testing.assert_allclose(p(o).data, np.einsum("bpt,bt->bp", o, s), atol=1e-9)
    q = TemporalPool("tri", 3, rng)
    s = _softmax(np.einsum("bpt,p->bt", o, q.v.data))
    g = np.einsum("bpt,p->bt", o, q.u.data)
    np.testing.assert_allclose(q(o).data, np.einsum("bpt,bt->bp", o, s * g), atol=1e-12)


@pytest.mark.parametrize("method", POOLS)
def test_zero_input(method):
    out = TemporalPool(method, 3, np.random.default_rng(0))(np.zeros((1, 3, 5))).data
    assert np.all(np.isfinite(out))
    if method in ("avg", "sum", "rank", "max"):
        assert np.all(out == 0)


def test_rank_coefficients_examples():
    assert np.allclose(rank_coefficients(1), [0.0])
    assert np.allclose(rank_coefficients(2), [-0.5, 0.5])
    # 2(tau - t + 1) - (tau + 1)(H_tau - H_{t-1}) with H_3 = 11/6
    assert np.allclose(rank_coefficients(3), [-4 / 3, 2 / 3, 2 / 3])
    for tau in range(1, 12):
        rho = rank_coefficients(tau)
        assert abs(rho.sum()) < 1e-9
        assert rho[-1] > 0 > rho[0] or tau == 1


def test_rank_pool_recovers_linear_direction():
    rng = np.random.default_rng(7)
    for tau in (3, 5, 7, 10):
        a, v = rng.normal(size=6), rng.normal(size=6)
        o = a[:, None] + v[:, None] * np.arange(1, tau + 1)[None, :]
        u = TemporalPool("rank", 6, rng)(o).data
        assert u @ v / np.linalg.norm(u) / np.linalg.norm(v) > 0.99


def _ranking_oracle(o, steps=4000, lr=0.05):
    """Projected gradient on the squared-hinge pairwise ranking loss over running means."""
    tau = o.shape[1]
    psi = np.cumsum(o, axis=1) / np.arange(1, tau + 1)
    u = np.zeros(o.shape[0])
    pairs = [(s, t) for s in range(tau) for t in range(s + 1, tau)]
    for _ in range(steps):
        g = np.zeros_like(u)
        for s, t in pairs:
            diff = psi[:, t] - psi[:, s]
            slack = 1 - u @ diff
            if slack > 0:
                g -= 2 * slack * diff
        u -= lr * g / len(pairs)
        nrm = np.linalg.norm(u)
        if nrm > 1:
            u /= nrm
    return u


def test_rank_pool_agrees_with_ranking_oracle():
    rng = np.random.default_rng(8)
    for _ in range(10):
        tau = int(rng.integers(3, 7))
        v = rng.normal(size=4)
        o = rng.normal(size=(4, 1)) + v[:, None] * np.arange(tau)[None, :] + 0.1 * rng.normal(size=(4, tau))
        u = _ranking_oracle(o)
        w = TemporalPool("rank", 4, rng)(o).data
        assert u @ w / np.linalg.norm(u) / np.linalg.norm(w) > 0.95


def test_block_permutation_sensitivity():
    rng = np.random.default_rng(9)
    o = rng.normal(size=(3, 5))
    perm = np.array([4, 2, 0, 1, 3])
    for m in ("avg", "sum", "max"):
        p = TemporalPool(m, 3, rng)
        np.testing.assert_allclose(p(o[:, perm]).data, p(o).data, atol=1e-12)
    p = TemporalPool("rank", 3, rng)
    assert np.abs(p(o[:, perm]).data - p(o).data).max() > 1e-3


# ------------------------------------------------------------------ full model


def _toy(variant="two_branch", pool="rank", **kw):
    cfg = ModelConfig(J=5, C=3, T=4, S=2, tau=2, r=3, d=6, d_out=4, depth=1, heads=2,
                      variant=variant, pool=pool, drop=0.0, **kw)
    return ThreeMformer(cfg)


def test_shape_chain():
    model = _toy()
    blocks = np.random.default_rng(0).normal(size=(3, 2, 5, 12))
    M = model.encode(blocks)
    assert M.shape == (3, 4, 25, 2)
    assert model.mp_tp(M).shape == (3, 60)
    assert model.tp_mp(M).shape == (3, 60)
    assert model.classifier.weight.shape == (120, 4)
    assert model.cfg.branch_width == 60


def test_tp_only_widths():
    model = _toy("tp_only")
    assert model.fc.weight.shape == (4 * 25, 3 * 4 * 5)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_emit_logits(variant):
    model = _toy(variant)
    logits = model(np.random.default_rng(1).normal(size=(2, 2, 5, 12))).data
    assert logits.shape == (2, 4) and np.all(np.isfinite(logits))


def test_unknown_variant_and_pool():
    with pytest.raises(ValueError):
        ModelConfig(variant="nope")
    with pytest.raises(ValueError):
        ModelConfig(pool="median")
    with pytest.raises(ValueError):
        ModelConfig(orders=(4,), r=3)


def test_zero_multi_order_tensor_gives_zero_branches():
    model = _toy(pool="avg")
    M = Tensor(np.zeros((1, 4, 25, 2)))
    assert np.all(model.mp_tp(M).data == 0)
    assert np.all(model.tp_mp(M).data == 0)


def test_swapped_branches_with_permuted_classifier():
    model = _toy()
    blocks = np.random.default_rng(2).normal(size=(2, 2, 5, 12))
    M = model.encode(blocks)
    a, b = model.mp_tp(M).data, model.tp_mp(M).data
    W, c = model.classifier.weight.data, model.classifier.bias.data
    direct = np.concatenate([a, b], 1) @ W + c
    swapped = np.concatenate([b, a], 1) @ np.concatenate([W[60:], W[:60]]) + c
    np.testing.assert_allclose(swapped, direct, atol=1e-12)
    np.testing.assert_allclose(model.head(M).data, direct, atol=1e-12)


def test_two_subjects_are_averaged_after_encoding():
    model = _toy()
    rng = np.random.default_rng(3)
    blocks = rng.normal(size=(3, 2, 5, 12))
    owners = np.array([0, 0, 1])
    M = model.encode(blocks, owners).data
    single = model.encode(blocks).data
    np.testing.assert_allclose(M[0], single[:2].mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(M[1], single[2], atol=1e-12)


def test_encode_rejects_wrong_block_shape():
    with pytest.raises(ValueError):
        _toy().encode(np.zeros((1, 3, 5, 12)))


def test_model_is_permutation_sensitive_only_through_learned_pooling():
    # with incidence pooling the MP->TP branch is equivariant to joint relabelling
    model = _toy("mp_tp", pool="avg")
    rng = np.random.default_rng(4)
    blocks = rng.normal(size=(1, 2, 5, 12))
    p = rng.permutation(5)
    a = model.encode(blocks).data
    b = model.encode(blocks[:, :, p]).data
    # order-1 columns of M follow the joints
    np.testing.assert_allclose(b[..., :5, :], a[..., p, :], atol=1e-9)
    assert comb(5, 2) + comb(5, 3) + 5 == a.shape[2]
