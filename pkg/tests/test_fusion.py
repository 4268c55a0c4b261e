import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rule_oracle

from hopqa import autodiff as ad
from hopqa.autodiff import ParamStore, Tensor
from hopqa.config import ModelConfig
from hopqa.encoders import encode_kg_back, encode_kg_front, init_encoders
from hopqa.fusion import (
    AlignmentResult,
    align_sources,
    confidence_scores,
    fuse,
    fuse_and_reencode,
    similarity_scores,
)

CFG = ModelConfig(dim=8, heads=2, ffn_dim=16, kg_layers=2, fusion_layer=1)


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_identity_similarity():
    s = similarity_scores(T([[1.0, 0.0]]), T([[0.5, 2.0]]), T(np.eye(2)))
    assert s.data[0, 0] == 0.5


def test_zero_pooled_row():
    rng = np.random.default_rng(0)
    pooled = rng.normal(size=(3, 4))
    pooled[1] = 0
    s = similarity_scores(T(pooled), T(rng.normal(size=(2, 4))), T(rng.normal(size=(4, 4))))
    assert (s.data[1] == 0).all()


def test_similarity_loop_oracle():
    rng = np.random.default_rng(1)
    p, h, w = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=(4, 4))
    s = similarity_scores(T(p), T(h), T(w)).data
    for i in range(3):
        for k in range(2):
            want = sum(p[i, a] * w[a, b] * h[k, b] for a in range(4) for b in range(4))
            assert abs(s[i, k] - want) < 1e-12


def test_confidence_midpoint():
    assert confidence_scores(T(np.zeros((1, 3))), T(np.zeros(3)), T(np.ones((6, 1)))).data[0] == 0.5
    rng = np.random.default_rng(2)
    c = confidence_scores(T(rng.normal(size=(4, 3))), T(rng.normal(size=3)), T(np.zeros((6, 1))))
    np.testing.assert_array_equal(c.data, np.full(4, 0.5))


def test_confidence_direct_formula():
    rng = np.random.default_rng(3)
    p, c, w = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=(6, 1))
    got = confidence_scores(T(p), T(c), T(w)).data
    want = [1 / (1 + np.exp(-(np.concatenate([p[i], c]) @ w[:, 0]))) for i in range(4)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_align_hand_example():
    a = align_sources([[2.0, 1.0], [0.0, 3.0]], [0.9, 0.3], 0.5)
    assert a.sets == [[0], []]
    assert a.assignment == [0, None]


def test_align_all_below_threshold():
    a = align_sources([[2.0, 1.0], [0.0, 3.0]], [0.5, 0.1], 0.5)
    assert a.empty and a.sets == [[], []]


def test_align_tie_goes_to_lowest_index():
    assert align_sources([[1.0, 1.0]], [0.9], 0.5).assignment == [0]


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 5).flatmap(
        lambda n: st.tuples(
            st.lists(st.lists(st.integers(-3, 3).map(float), min_size=3, max_size=3), min_size=n, max_size=n),
            st.lists(st.sampled_from([0.1, 0.5, 0.50001, 0.9]), min_size=n, max_size=n),
        )
    )
)
def test_align_matches_rule_oracle(case):
    sim, conf = case
    assert align_sources(sim, conf, 0.5).assignment == rule_oracle(sim, conf, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0, 1), st.floats(0, 1))
def test_raising_threshold_only_shrinks(conf, t1, t2):
    lo, hi = sorted((t1, t2))
    sim = np.random.default_rng(len(conf)).normal(size=(len(conf), 3))
    a, b = align_sources(sim, conf, lo), align_sources(sim, conf, hi)
    for x, y in zip(a.assignment, b.assignment):
        assert y is None or y == x


def _kg(seed=0):
    store = ParamStore()
    init_encoders(store, CFG, 40, np.random.default_rng(seed))
    ids = list(range(1, 13))
    spans = [(1, 3), (5, 6), (8, 11)]
    return store, encode_kg_front(store, CFG, ids, spans), spans


def test_empty_alignment_is_bit_identical():
    store, front, spans = _kg()
    pooled = Tensor(np.random.default_rng(1).normal(size=(4, CFG.dim)).astype(np.float32))
    empty = AlignmentResult(np.zeros((4, 3)), np.zeros(4), [None] * 4, [[], [], []])
    fused = fuse_and_reencode(store, CFG, front, empty, pooled, spans)
    assert fused.h_plus.data.tobytes() == front.token_reps.data.tobytes()
    assert fused.h_star.data.tobytes() == encode_kg_back(store, CFG, front.token_reps).data.tobytes()


def test_two_sources_add_to_head():
    # h = [1, 1] on a one-token span; pools [1, 0] and [0, 1]
    from hopqa.encoders import EncodedKG

    h = T([[0.0, 0.0], [1.0, 1.0]])
    enc = EncodedKG(h, h[0], h[1:2], [(1, 2)])
    a = AlignmentResult(np.zeros((2, 1)), np.ones(2), [0, 0], [[0, 1]])
    out = fuse(enc, a, T([[1.0, 0.0], [0.0, 1.0]]), [(1, 2)])
    np.testing.assert_array_equal(out.data[1], [2.0, 2.0])
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_random_alignment_span_means(seed):
    store, front, spans = _kg(seed)
    rng = np.random.default_rng(seed)
    pooled = rng.normal(size=(5, CFG.dim)).astype(np.float32)
    assignment = [None if rng.random() < 0.3 else int(rng.integers(3)) for _ in range(5)]
    sets = [[i for i, k in enumerate(assignment) if k == j] for j in range(3)]
    a = AlignmentResult(np.zeros((5, 3)), np.ones(5), assignment, sets)
    fused = fuse_and_reencode(store, CFG, front, a, Tensor(pooled), spans)
    for k, (s, e) in enumerate(spans):
        want = front.token_reps.data[s:e].mean(axis=0) + sum((pooled[i] for i in sets[k]), np.zeros(CFG.dim))
        np.testing.assert_allclose(fused.entity_reps.data[k], want, atol=1e-6)
