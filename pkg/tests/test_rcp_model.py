import math

import pytest
import torch

from lmrc.corpus import gold_pairs
from lmrc.rcp import (
    HFEncoder,
    RCPConfig,
    RCPHead,
    RCPModel,
    StubEncoder,
    TrainingAborted,
    build_encoder,
    calibrate_threshold,
    check_encoded,
    load_checkpoint,
    mark_entities,
    propose_candidates,
    save_checkpoint,
    train_rcp,
)
from lmrc.synthetic import separable_corpus

from conftest import make_doc


def _model(seed=0, d=16):
    return RCPModel(StubEncoder(d, 2, seed=seed), RCPHead(d, seed=seed))


def test_threshold_extremes(toy):
    model = _model()
    for doc in toy[:5]:
        n = doc.n_entities
        assert len(propose_candidates(doc, model, 1.0)) == n * (n - 1)
        assert propose_candidates(doc, model, 0.0) == []


def test_threshold_monotone(toy):
    model = _model()
    doc = toy[3]
    sizes = [len(propose_candidates(doc, model, t)) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert sizes == sorted(sizes)
    lo = {p.key for p in propose_candidates(doc, model, 0.4)}
    hi = {p.key for p in propose_candidates(doc, model, 0.6)}
    assert lo <= hi


def test_proposals_are_ordered_and_below_threshold(toy):
    model = _model()
    props = propose_candidates(toy[0], model, 0.55)
    assert [p.key for p in props] == sorted(p.key for p in props)
    assert all(p.na_probability < 0.55 for p in props)


def test_document_scores_match_scalar_path(einstein_doc):
    """Batched scoring agrees with pooling each pair by hand."""
    model = _model().double()
    scores = model.score_document(einstein_doc)
    marked = mark_entities(einstein_doc)
    enc = model.encoder.encode(marked.tokens)
    H, A = enc.H.double(), enc.A.double()
    from lmrc.rcp import entity_attention, entity_embedding, localized_context

    for (h, t), p in zip(scores.pairs, scores.probabilities):
        ph, pt = marked.entity_marker_pos[h], marked.entity_marker_pos[t]
        c = localized_context(H, entity_attention(A, ph), entity_attention(A, pt))
        expect = model.head(entity_embedding(H, ph), entity_embedding(H, pt), c)
        assert p.item() == pytest.approx(expect.item(), abs=1e-12)


def test_truncated_entities_are_never_proposed():
    doc = make_doc([["a"] * 6, ["b"] * 6], [[(0, 0, 1)], [(0, 2, 3)], [(1, 4, 5)]])
    model = RCPModel(StubEncoder(8, 2, max_length=8), RCPHead(8))
    scores = model.score_document(doc)
    assert scores.overflow
    assert not any(ok for (h, t), ok in zip(scores.pairs, scores.scorable.tolist()) if 2 in (h, t))
    assert all(2 not in p.key for p in propose_candidates(doc, model, 1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        RCPConfig(na_threshold=1.0)
    with pytest.raises(ValueError):
        RCPConfig(warmup_fraction=1.0)


def test_zero_epochs_returns_initialisation():
    train = separable_corpus(4, seed=0)
    model = _model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    result = train_rcp(train, train, model, RCPConfig(epochs=0))
    assert result.steps == 0
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_empty_training_corpus_rejected():
    with pytest.raises(ValueError):
        train_rcp([], [], _model(), RCPConfig())


def test_non_finite_loss_aborts():
    train = separable_corpus(4, seed=0)
    model = _model()
    with torch.no_grad():
        model.head.b.fill_(float("nan"))
    with pytest.raises(TrainingAborted):
        train_rcp(train, [], model, RCPConfig(max_steps=2))


def _quick_train(seed):
    train, dev = separable_corpus(12, seed=1), separable_corpus(6, seed=2, prefix="dev")
    model = _model(seed=seed)
    cfg = RCPConfig(encoder_lr=1e-2, classifier_lr=3e-2, max_steps=12, batch_size=4, seed=seed)
    return train_rcp(train, dev, model, cfg)


def test_training_is_deterministic():
    a, b = _quick_train(0), _quick_train(0)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    for (k, v), (_, w) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(v, w), k


def test_training_history_and_schedule():
    res = _quick_train(0)
    assert res.steps == 12 and len(res.history) == 12
    assert all(h["grad_norm"] >= 0 and math.isfinite(h["loss"]) for h in res.history)
    assert res.history[-1]["lr_encoder"] == pytest.approx(0.0, abs=1e-12)
    assert res.best_dev_f1 is not None and 0 <= res.best_dev_f1 <= 1


def test_checkpoint_round_trip(tmp_path, toy):
    model = _quick_train(0).model
    model.threshold = 0.37
    path = tmp_path / "rcp.pt"
    save_checkpoint(path, model, RCPConfig(), extra={"note": "x"})
    loaded, blob = load_checkpoint(path)
    assert loaded.threshold == 0.37 and blob["extra"] == {"note": "x"}
    doc = toy[0]
    assert torch.equal(model.score_document(doc).probabilities, loaded.score_document(doc).probabilities)


def test_calibrate_threshold_picks_best_grid_point():
    res = _quick_train(0)
    dev = separable_corpus(6, seed=2, prefix="dev")
    tau, f1 = calibrate_threshold(res.model, dev, grid=[0.2, 0.5, 0.8])
    assert tau in (0.2, 0.5, 0.8) and 0 <= f1 <= 1
    gold = {(d.doc_id, h, t) for d in dev for h, t in gold_pairs(d)}
    for other in (0.2, 0.5, 0.8):
        prop = {(d.doc_id, p.head, p.tail) for d in dev for p in propose_candidates(d, res.model, other)}
        tp = len(prop & gold)
        f = 2 * tp / (len(prop) + len(gold)) if prop or gold else 0.0
        assert f <= f1 + 1e-12


def test_build_encoder_specs():
    enc = build_encoder({"kind": "stub", "hidden_dim": 8, "num_heads": 2})
    assert isinstance(enc, StubEncoder) and enc.hidden_dim == 8
    assert isinstance(build_encoder("stub"), StubEncoder)
    with pytest.raises(ValueError):
        build_encoder({"kind": "nope"})


def test_stub_encoder_output_contract():
    enc = StubEncoder(8, 2)
    out = enc.encode(["*", "a", "b", "*", "c"])
    check_encoded(out, 8, 2)
    assert torch.allclose(out.A.sum(-1), torch.ones(2, 5))


class _WordTokenizer:
    """Two subwords per word, enough to exercise first-subword mapping."""

    cls_token_id, sep_token_id, unk_token_id = 1, 2, 3

    def encode(self, word, add_special_tokens=False):
        h = sum(map(ord, word))
        return [10 + h % 40, 50 + h % 40]


def test_hf_encoder_adapter():
    transformers = pytest.importorskip("transformers")
    cfg = transformers.BertConfig(vocab_size=100, hidden_size=8, num_hidden_layers=1,
                                  num_attention_heads=2, intermediate_size=16,
                                  max_position_embeddings=16, attn_implementation="eager")
    torch.manual_seed(0)
    enc = HFEncoder(model=transformers.BertModel(cfg).eval(), tokenizer=_WordTokenizer(), max_length=10)
    out = enc.encode(["*", "Ulm", "*", "is", "old"])
    assert out.positions == [1, 3, 5, 7, -1]
    check_encoded(out, 8, 2)
    doc = make_doc([["Ulm", "and", "Bonn"]], [[(0, 0, 1)], [(0, 2, 3)]])
    model = RCPModel(enc, RCPHead(8))
    scores = model.score_document(doc)
    assert scores.overflow is False
    assert scores.scorable.tolist() == [False, False]
