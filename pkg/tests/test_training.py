import numpy as np
import pytest

from hopqa.config import ModelConfig, TrainConfig
from hopqa.evaluation import evaluate, evaluate_model, format_table, parse_flag_set, run_ablation
from hopqa.model import HopQAModel, VocabularyMismatch, build_gold_labels, build_vocab
from hopqa.synth import generate_dataset
from hopqa.training import CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint, train_loop

SMALL = ModelConfig(dim=16, heads=2, ffn_dim=32)


@pytest.fixture(scope="module")
def data(small_world):
    return generate_dataset(small_world, 8, 21, prefix="tr"), generate_dataset(small_world, 4, 22, prefix="te")


@pytest.fixture(scope="module")
def trained(small_world, data):
    cfg = TrainConfig(steps=12, lr=1e-3, eval_every=6, log_every=4, model=SMALL)
    return train_loop(data[0], small_world, cfg)


def test_same_seed_same_curve(small_world, data, trained):
    cfg = TrainConfig(steps=12, lr=1e-3, eval_every=6, log_every=4, model=SMALL)
    again = train_loop(data[0], small_world, cfg)
    assert again.history == trained.history


def test_loss_log(small_world, data, tmp_path):
    cfg = TrainConfig(steps=4, log_every=2, eval_every=100, model=SMALL)
    train_loop(data[0], small_world, cfg, log_path=tmp_path / "log.jsonl")
    import json

    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert {"L_a", "L_c", "L_r", "L_s", "L_g", "L", "step"} <= set(lines[0])


def test_gold_labels(small_world, data):
    model = HopQAModel(SMALL, build_vocab(small_world, data[0]), small_world)
    ex = next(e for e in data[0] if e.hops == 2)
    prep = model.prepare(ex)
    a = build_gold_labels(prep, np.random.default_rng(5))
    b = build_gold_labels(prep, np.random.default_rng(5))
    assert a == b
    assert a.gate_labels == [1, 1, 0]
    assert a.retrieval_targets == ex.gold_indices
    for heads, target, conf in zip(prep.contained_heads, a.align_targets, a.confidence_labels):
        assert conf == int(bool(heads))
        assert (target is None) == (not heads)
        assert target is None or target in heads


def test_checkpoint_round_trip(tmp_path, trained):
    m = trained.model
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m.store, m.vocab, trained.config)
    store, vocab, cfg = load_checkpoint(path)
    assert vocab.itos == m.vocab.itos and cfg == trained.config
    for name, t in m.store.items():
        assert store[name].data.tobytes() == t.data.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", store, vocab, cfg)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_truncated_checkpoint(tmp_path, trained):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, trained.model.store, trained.model.vocab, trained.config)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_reloaded_model_predicts_identically(tmp_path, small_world, data, trained):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, trained.model.store, trained.model.vocab, trained.config)
    before = evaluate_model(trained.model, data[1]).to_dict()
    after = evaluate(path, data[1], small_world).to_dict()
    assert before == after
    p1 = trained.model.predict(data[1][0])
    p2 = model_from_checkpoint(path, small_world).predict(data[1][0])
    assert (p1.answer, p1.retrieved, p1.trace) == (p2.answer, p2.retrieved, p2.trace)


def test_vocabulary_mismatch(tmp_path, world, trained):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, trained.model.store, trained.model.vocab, trained.config)
    foreign = generate_dataset(world, 2, 0)
    with pytest.raises(VocabularyMismatch):
        evaluate(path, foreign, world)


@pytest.mark.parametrize("flags", ["no_fusion", "no_kg", "encoder_retrieval", "no_retrieval"])
def test_ablation_variants_train(small_world, data, flags):
    cfg = TrainConfig(steps=2, eval_every=100, model=ModelConfig(dim=16, heads=2, ffn_dim=32, **{flags: True}))
    res = train_loop(data[0], small_world, cfg)
    pred = res.model.predict(data[1][0])
    assert all(np.isfinite(h["L"]) for h in res.history)
    if flags == "no_retrieval":
        assert pred.retrieved == []


def test_run_ablation_table(small_world, data):
    base = TrainConfig(steps=2, eval_every=100, model=SMALL)
    flag_sets = [parse_flag_set("full"), parse_flag_set("no-fusion")]
    rows = run_ablation(data[0], data[1], small_world, base, flag_sets, seeds=[0, 1])
    assert [r.name for r in rows] == ["full", "no-fusion"]
    assert [len(r.runs) for r in rows] == [2, 2]
    again = run_ablation(data[0], data[1], small_world, base, flag_sets, seeds=[0, 1])
    assert [r.to_dict() for r in rows] == [r.to_dict() for r in again]
    assert "no-fusion" in format_table(rows)


def test_bad_flag_name():
    with pytest.raises(ValueError):
        parse_flag_set("no-brain")


def test_empty_training_set(small_world):
    with pytest.raises(ValueError):
        train_loop([], small_world, TrainConfig(steps=1, model=SMALL))
