import math

import numpy as np
import pytest

from edgealloc.graphattn import (FEATURE_DIM, HEAD_DIM, N_HEADS, AgentGraph, AttentionHead,
                                 AttentionHeads, GraphTrunk, attention_head, attention_weights,
                                 build_adjacency, cosine_similarity, critic_input, encode,
                                 make_encoder, multi_head)
from edgealloc.tensornet import ContractError, grad_check

RNG = np.random.default_rng(0)


def rand_head(rng, d_f=FEATURE_DIM, d_a=HEAD_DIM):
    return AttentionHead(*(rng.normal(size=(d_f, d_a)) for _ in range(3)))


def test_adjacency_agent_three_example():
    A = build_adjacency(2, [1, 3], 5)     # agent 3 of 5 (1-based) with neighbours 2 and 4
    assert A.tolist() == [[0, 0, 1, 0, 0], [0, 1, 0, 0, 0], [0, 0, 0, 1, 0]]


def test_adjacency_degenerate_and_selection():
    assert build_adjacency(1, [], 3).tolist() == [[0, 1, 0]]
    F = RNG.normal(size=(4, 6))
    A = build_adjacency(2, [3, 0], 4)
    assert np.array_equal((A @ F)[0], F[2])
    assert np.array_equal(A @ F, F[[2, 0, 3]])
    assert np.all(A.sum(axis=1) == 1)


@pytest.mark.parametrize("nbrs", [[1, 1], [0, 2]])
def test_adjacency_rejects_duplicates_and_self(nbrs):
    with pytest.raises(ContractError):
        build_adjacency(0 if nbrs == [0, 2] else 2, nbrs, 4)


def test_cosine_examples():
    v = np.array([1.0, 2.0, -3.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-15)
    assert cosine_similarity(v, np.zeros(3)) == 0.0


def test_equal_neighbors_uniform_weights():
    head = rand_head(RNG)
    e = RNG.normal(size=FEATURE_DIM)
    nb = np.tile(RNG.normal(size=FEATURE_DIM), (3, 1))
    w = attention_weights(e, nb, head)
    assert np.allclose(w, 1 / 3, atol=1e-15)
    assert np.allclose(attention_head(e, nb, head), nb[0] @ head.W_v, atol=1e-12)


def test_two_neighbor_softmax_values():
    # scores +1 and -1: key parallel and antiparallel to the query
    head = AttentionHead(np.eye(2), np.eye(2), np.eye(2))
    w = attention_weights(np.array([1.0, 0.0]), np.array([[2.0, 0.0], [-3.0, 0.0]]), head)
    assert w[0] == pytest.approx(math.e / (math.e + 1 / math.e), abs=1e-12)
    assert w[0] == pytest.approx(0.8808, abs=1e-4) and w[1] == pytest.approx(0.1192, abs=1e-4)


def test_weights_sum_positive_and_scale_invariant():
    for _ in range(50):
        head = rand_head(RNG)
        e, nb = RNG.normal(size=FEATURE_DIM), RNG.normal(size=(4, FEATURE_DIM))
        w = attention_weights(e, nb, head)
        assert abs(w.sum() - 1) < 1e-9 and np.all(w > 0)
        assert np.allclose(attention_weights(e, 3.7 * nb, head), w, atol=1e-12)


def test_multi_head_shape_and_single_head_identity():
    heads = [rand_head(RNG) for _ in range(N_HEADS)]
    e, nb = RNG.normal(size=FEATURE_DIM), RNG.normal(size=(2, FEATURE_DIM))
    out = multi_head(e, nb, heads)
    assert out.shape == (N_HEADS * HEAD_DIM,)
    assert np.array_equal(multi_head(e, nb, heads[:1]), attention_head(e, nb, heads[0]))
    assert np.allclose(out[HEAD_DIM:2 * HEAD_DIM], attention_head(e, nb, heads[1]), atol=1e-13)


def test_multi_head_permutation_invariant():
    heads = [rand_head(RNG) for _ in range(N_HEADS)]
    e, nb = RNG.normal(size=FEATURE_DIM), RNG.normal(size=(3, FEATURE_DIM))
    assert np.allclose(multi_head(e, nb, heads), multi_head(e, nb[[2, 0, 1]], heads), atol=1e-12)


def test_encoder_examples():
    enc = make_encoder(np.random.default_rng(1))
    assert enc.layer_dims == [12, 64, 64]
    o, a = RNG.normal(size=10), RNG.uniform(-1, 1, 2)
    assert np.array_equal(encode(o, a, enc), encode(o, a, enc))
    for p in enc.params:
        p[...] = 0
    assert np.array_equal(encode(o, a, enc), np.zeros(64))


def test_critic_input_shapes_and_empty_neighbours():
    heads = [rand_head(RNG) for _ in range(N_HEADS)]
    F = RNG.normal(size=(3, FEATURE_DIM))
    g = AgentGraph.build(F, [[1, 2], [0, 2], [0, 1]])
    h = critic_input(0, g, heads)
    assert h.shape == (FEATURE_DIM + N_HEADS * HEAD_DIM,)
    assert np.array_equal(h[:FEATURE_DIM], F[0])
    g0 = AgentGraph.build(F, [[], [], []])
    h0 = critic_input(1, g0, heads)
    assert np.array_equal(h0, np.concatenate([F[1], np.zeros(N_HEADS * HEAD_DIM)]))


def test_critic_input_neighbor_permutation_exact():
    heads = [rand_head(RNG) for _ in range(N_HEADS)]
    F = RNG.normal(size=(5, FEATURE_DIM))
    a = critic_input(2, AgentGraph.build(F, [[1], [0], [1, 3, 4], [2], [3]]), heads)
    b = critic_input(2, AgentGraph.build(F, [[1], [0], [4, 1, 3], [2], [3]]), heads)
    assert np.array_equal(a, b)


def test_trunk_matches_per_agent_reference():
    rng = np.random.default_rng(7)
    tr = GraphTrunk(1, rng)
    obs, act = rng.normal(size=(4, 3, 10)), rng.uniform(-1, 1, (4, 3, 2))
    nb = np.tile([0, 2], (4, 1))
    h, _ = tr.forward(obs, act, nb)
    for b in range(4):
        F = encode(obs[b], act[b], tr.encoder)
        ref = critic_input(1, AgentGraph.build(F, [[1, 2], [0, 2], [0, 1]]), tr.heads)
        assert np.allclose(h[b], ref, atol=1e-12)


def test_trunk_grad_check():
    rng = np.random.default_rng(8)
    tr = GraphTrunk(0, rng)
    obs, act = rng.normal(size=(5, 3, 10)), rng.uniform(-1, 1, (5, 3, 2))
    nb = np.tile([1, 2], (5, 1))
    W = rng.normal(size=(5, tr.out_dim))
    _, cache = tr.forward(obs, act, nb)
    grads, d_obs, d_act = tr.backward(cache, W)
    f = lambda: float((tr.forward(obs, act, nb)[0] * W).sum())
    kink = lambda: np.packbits(tr.forward(obs, act, nb)[1].enc_cache.pre[0] > 0).tobytes()
    params = [p for m in tr.modules for p in m.params]
    rep = grad_check(f, params + [obs, act], grads + [d_obs, d_act], max_coords=25,
                     rng=rng, kink=kink)
    assert rep.passed, rep.line()


def test_heads_module_roundtrip():
    hs = [rand_head(RNG) for _ in range(2)]
    mod = AttentionHeads.from_heads(hs)
    assert np.array_equal(mod.head(1).W_k, hs[1].W_k)
    assert mod.out_dim == 2 * HEAD_DIM
