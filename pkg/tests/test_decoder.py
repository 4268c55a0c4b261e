import numpy as np
import pytest

from hopqa import autodiff as ad
from hopqa.autodiff import Tensor
from hopqa.config import ModelConfig
from hopqa.decoder import (
    GENERATION,
    READING,
    RETRIEVAL,
    DecoderPass,
    build_memory,
    forward_teacher_forced,
    retrieval_alpha,
    teacher_forced_layout,
)
from hopqa.model import HopQAModel, build_vocab
from hopqa.synth import generate_dataset

CFG = ModelConfig(dim=16, heads=2, ffn_dim=32)


@pytest.fixture(scope="module")
def setup(small_world):
    exs = generate_dataset(small_world, 6, 3, prefix="d")
    model = HopQAModel(CFG, build_vocab(small_world, exs), small_world, seed=0)
    return model, exs


def _encoded(model, ex):
    prep = model.prepare(ex)
    with ad.no_grad():
        return prep, model.encode(prep)


def test_layout_counts():
    layout = teacher_forced_layout(5, 2, 3, retrieval=True)
    assert layout.count(READING) == 4 and layout.count(RETRIEVAL) == 3 and layout.count(GENERATION) == 3


def test_teacher_forced_shapes(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[0])
    with ad.no_grad():
        out = forward_teacher_forced(model.store, CFG, prep.question_ids, enc.memory, [0, 1], [7, 8, model.vocab.eos], model.vocab.ans)
    assert out.alpha.shape == (2, prep.n_sources)
    assert out.gate_logits.shape == (3,)
    assert out.log_probs.shape[0] == 3


def test_teacher_forced_zero_hops(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[0])
    with ad.no_grad():
        out = forward_teacher_forced(model.store, CFG, prep.question_ids, enc.memory, [], [7, model.vocab.eos], model.vocab.ans)
    assert out.alpha is None and out.gate_logits.shape == (1,) and out.log_probs.shape[0] == 2


def test_read_question_position(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[0])
    state = model.decoder_for(enc).read_question([5, 6, 7, 8])
    assert state.t == 4 and state.stage == RETRIEVAL


def test_memory_length(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[0])
    mem = enc.memory
    src_total = sum(r.shape[0] for r in enc.source_reps)
    assert mem.mask_for(READING).sum() == src_total + enc.kg_star.shape[0]
    gen = mem.mask_for(GENERATION, [1])
    assert gen.sum() == enc.source_reps[1].shape[0] + enc.kg_star.shape[0]
    # nothing retrieved: the KG alone
    assert mem.mask_for(GENERATION, []).sum() == enc.kg_star.shape[0]
    assert mem.mask_for(RETRIEVAL).sum() == prep.n_sources


def test_null_memory_falls_back_to_pooled():
    reps = [Tensor(np.ones((3, 4)))]
    mem = build_memory(reps, None, Tensor(np.ones((1, 4))))
    m = mem.mask_for(GENERATION, [])
    assert m.tolist() == [False, False, False, True]


@pytest.mark.parametrize("script,count", [((0.1,), 0), ((0.9, 0.1), 1), ((0.9, 0.9, 0.1), 2)])
def test_scripted_gates(setup, script, count):
    model, exs = setup
    pred = model.predict(exs[0], gate_script=lambda k: script[k])
    assert len(pred.retrieved) == count == len(set(pred.retrieved))
    stops = [r for r in pred.trace if r.get("stage") == RETRIEVAL]
    assert [r["decision"] for r in stops] == ["continue"] * count + ["stop"]


def test_max_steps_cap(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[1])
    dec = model.decoder_for(enc)
    state = dec.read_question(prep.question_ids)
    retrieved, steps = dec.run_retrieval(state, max_steps=3, gate_script=lambda k: 1.0)
    assert len(retrieved) == 3 and len(set(retrieved)) == 3
    assert steps[-1].decision == "stop"


def test_half_gate_stops(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[1])
    dec = model.decoder_for(enc)
    state = dec.read_question(prep.question_ids)
    assert dec.retrieval_step(state, gate_override=0.5).decision == "stop"


def test_singleton_candidate():
    cfg = ModelConfig(dim=8, heads=2, ffn_dim=8)
    from hopqa.autodiff import ParamStore
    from hopqa.decoder import Decoder, init_decoder
    from hopqa.encoders import init_encoders

    store = ParamStore()
    rng = np.random.default_rng(0)
    init_encoders(store, cfg, 10, rng)
    init_decoder(store, cfg, 10, rng)
    mem = build_memory([Tensor(rng.normal(size=(3, 8)).astype(np.float32))], None, Tensor(rng.normal(size=(1, 8)).astype(np.float32)))
    dec = Decoder(store, cfg, mem, ans_id=2, eos_id=4)
    res = dec.retrieval_step(dec.read_question([5, 6]))
    assert res.candidate == 0


def test_alpha_hand_sum():
    # two layers, two heads, memory = 3 source tokens + 2 pooled slots
    l1 = np.arange(2 * 4 * 5, dtype=np.float64).reshape(2, 4, 5)
    l2 = -0.5 * l1 + 1.0
    fake = DecoderPass(Tensor(np.zeros((4, 2))), [Tensor(l1), Tensor(l2)], [])
    mem = build_memory([Tensor(np.zeros((3, 2)))], None, Tensor(np.zeros((2, 2))))
    got = retrieval_alpha(fake, mem, [2]).data
    want = [(l1[0, 2, 3 + j] + l1[1, 2, 3 + j]) / 2 + (l2[0, 2, 3 + j] + l2[1, 2, 3 + j]) / 2 for j in range(2)]
    np.testing.assert_allclose(got[0], want)


def test_generation_ignores_unretrieved_sources(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[2])
    dec = model.decoder_for(enc)
    state = dec.read_question(prep.question_ids)
    dec.run_retrieval(state, gate_script=lambda k: 0.9 if k < 1 else 0.1)
    dec.generate_answer(state)
    dpass = dec._pass(state)
    gen_rows = [i for i, s in enumerate(state.stages) if s == GENERATION]
    blocked = np.zeros(len(enc.memory), dtype=bool)
    for i, sl in enumerate(enc.memory.source_slices):
        if i not in state.retrieved:
            blocked[slice(*sl)] = True
    for w in dpass.cross_weights:
        assert (w.data[:, gen_rows][..., blocked] == 0).all()
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_uniform_distribution_picks_lowest_id(setup):
    model, exs = setup
    prep, enc = _encoded(model, exs[0])
    saved = model.store.state()
    try:
        model.store["tok_emb"].data[:] = 0
        model.store["lm_head.b"].data[:] = 0
        dec = model.decoder_for(enc)
        state = dec.read_question(prep.question_ids)
        dec.skip_retrieval(state, [])
        out = dec.generate_answer(state, max_len=3)
        np.testing.assert_allclose(out.distributions[0], np.full(len(model.vocab), 1 / len(model.vocab)), rtol=1e-5)
        assert out.token_ids == [0, 0, 0]
    finally:
        model.store.load_state(saved)
