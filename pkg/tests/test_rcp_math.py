import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lmrc.corpus import CorpusValidationError, Document, Entity, Mention
from lmrc.rcp import (
    MARKER,
    RCPHead,
    bce_loss,
    entity_attention,
    entity_embedding,
    localized_context,
    mark_entities,
    pair_probability,
)

import oracles
from conftest import make_doc


# ---------------------------------------------------------------- markers


def test_single_mention_markers():
    doc = make_doc([["Barack", "Obama", "spoke"]], [[(0, 0, 2)]])
    marked = mark_entities(doc)
    assert marked.tokens == ("*", "Barack", "Obama", "*", "spoke")
    assert marked.mention_marker_pos == (0,)
    assert not marked.overflow


def test_adjacent_and_nested_markers():
    doc = make_doc([["a", "b", "c", "d"]], [[(0, 0, 1)], [(0, 1, 2)], [(0, 0, 3)]])
    marked = mark_entities(doc)
    assert marked.tokens == ("*", "*", "a", "*", "*", "b", "*", "c", "*", "d")
    assert marked.entity_marker_pos == ((1,), (4,), (0,))


def test_mention_beyond_sentence_rejected():
    bad = Document("x", (("a", "b"),), (Entity(0, (Mention("a b c", 0, (0, 3)),), "T"),), ())
    with pytest.raises(CorpusValidationError):
        mark_entities(bad)


def test_truncation_sets_overflow():
    doc = make_doc([["a", "b", "c", "d", "e"]], [[(0, 0, 1)], [(0, 4, 5)]])
    marked = mark_entities(doc, max_length=4)
    assert marked.overflow and marked.length == 4
    assert marked.entity_marker_pos == ((0,), ())
    assert marked.dropped_mentions == 1


def _brute_force_positions(doc):
    """New index of every original token, counting markers that precede it."""
    out = {}
    offset = 0
    for s, sent in enumerate(doc.sentences):
        ms = [m for e in doc.entities for m in e.mentions if m.sent_id == s]
        for p in range(len(sent)):
            before = sum(m.start <= p for m in ms) + sum(m.end <= p for m in ms)
            out[(s, p)] = offset + p + before
        offset += len(sent) + 2 * len(ms)
    return out


@st.composite
def overlapping_docs(draw):
    n_sents = draw(st.integers(1, 3))
    sents = [[f"w{s}_{i}" for i in range(draw(st.integers(1, 6)))] for s in range(n_sents)]
    entities = []
    for _ in range(draw(st.integers(1, 5))):
        ms = []
        for _ in range(draw(st.integers(1, 3))):
            s = draw(st.integers(0, n_sents - 1))
            a = draw(st.integers(0, len(sents[s]) - 1))
            b = draw(st.integers(a + 1, len(sents[s])))
            ms.append((s, a, b))
        entities.append(ms)
    return make_doc(sents, entities)


@settings(max_examples=200, deadline=None)
@given(overlapping_docs())
def test_markers_match_brute_force(doc):
    marked = mark_entities(doc)
    n_mentions = sum(len(e.mentions) for e in doc.entities)
    n_tokens = sum(len(s) for s in doc.sentences)
    assert marked.length == n_tokens + 2 * n_mentions
    assert marked.tokens.count(MARKER) == 2 * n_mentions
    positions = _brute_force_positions(doc)
    for (s, p), idx in positions.items():
        assert marked.tokens[idx] == doc.sentences[s][p]
    flat = [m for e in doc.entities for m in e.mentions]
    assert len(set(marked.mention_marker_pos)) == len(flat)
    for m, pos in zip(flat, marked.mention_marker_pos):
        first = positions[(m.sent_id, m.start)]
        assert 0 <= pos < first and marked.tokens[pos] == MARKER
        assert all(t == MARKER for t in marked.tokens[pos:first])


# ---------------------------------------------------------------- pooling


def _t(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)


def test_logsumexp_pooling_identities():
    v = _t([0.3, -1.2, 2.0])
    H = torch.stack([v, v, v * 0 + 5])
    assert torch.allclose(entity_embedding(H, [0]), v)
    assert torch.allclose(entity_embedding(H, [0, 1]), v + math.log(2))
    with pytest.raises(ValueError):
        entity_embedding(H, [])


def test_logsumexp_stable_for_large_values():
    H = _t([[1000.0, -1000.0], [1000.0, -1000.0]])
    out = entity_embedding(H, [0, 1])
    assert torch.allclose(out, _t([1000 + math.log(2), -1000 + math.log(2)]))


def test_logsumexp_oracle_and_properties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        H = rng.normal(size=(3, 8))
        got = entity_embedding(_t(H), [0, 1, 2]).numpy()
        np.testing.assert_allclose(got, oracles.logsumexp_rows(H.tolist()), atol=1e-9, rtol=0)
        assert np.all(got >= H.max(axis=0) - 1e-12)
        perm = entity_embedding(_t(H), [2, 0, 1]).numpy()
        np.testing.assert_allclose(got, perm, atol=1e-12)


def test_attention_mean():
    rng = np.random.default_rng(1)
    A = rng.random((2, 5, 5))
    np.testing.assert_allclose(entity_attention(_t(A), [3]).numpy(), A[:, 3, :])
    np.testing.assert_allclose(entity_attention(_t(A), [1, 3]).numpy(), (A[:, 1, :] + A[:, 3, :]) / 2)
    np.testing.assert_allclose(entity_attention(_t(A), [0, 2, 4]).numpy(),
                               oracles.mean_attention(A.tolist(), [0, 2, 4]), atol=1e-12, rtol=0)


def test_localized_context_delta_selects_row():
    rng = np.random.default_rng(2)
    H = rng.normal(size=(12, 8))
    onehot = np.zeros((1, 12))
    onehot[0, 7] = 1.0
    np.testing.assert_allclose(localized_context(_t(H), _t(onehot), _t(onehot)).numpy(), H[7], atol=1e-12)


def test_localized_context_disjoint_falls_back_to_mean():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(6, 4))
    A_s = np.array([[0.5, 0.5, 0, 0, 0, 0]])
    A_o = np.array([[0, 0, 0, 0.2, 0.8, 0]])
    c, degenerate = localized_context(_t(H), _t(A_s), _t(A_o), return_degenerate=True)
    assert degenerate
    np.testing.assert_allclose(c.numpy(), H.mean(axis=0), atol=1e-12)


def test_localized_context_in_convex_hull():
    rng = np.random.default_rng(4)
    for _ in range(20):
        H = rng.normal(size=(12, 8))
        A_s, A_o = rng.random((2, 12)), rng.random((2, 12))
        c = localized_context(_t(H), _t(A_s), _t(A_o)).numpy()
        assert np.all(c <= H.max(axis=0) + 1e-12) and np.all(c >= H.min(axis=0) - 1e-12)
        q = (A_s * A_o).sum(0)
        np.testing.assert_allclose(c, H.T @ (q / q.sum()), atol=1e-12)


# ---------------------------------------------------------------- classifier


def _head(d, rng, dtype=torch.float64):
    head = RCPHead(d, seed=None, dtype=dtype)
    with torch.no_grad():
        for name in ("W_s", "W_c", "W_o", "W_bilinear"):
            getattr(head, name).copy_(_t(rng.normal(scale=0.4, size=(d, d))))
        head.b.fill_(float(rng.normal()))
    return head


def test_zero_bilinear_gives_half():
    rng = np.random.default_rng(5)
    head = _head(8, rng)
    with torch.no_grad():
        head.W_bilinear.zero_()
        head.b.zero_()
    x = _t(rng.normal(size=(3, 8)))
    assert torch.allclose(pair_probability(x[0], x[1], x[2], head), _t(0.5))


def test_large_bias_saturates():
    rng = np.random.default_rng(6)
    head = _head(8, rng)
    with torch.no_grad():
        head.b.fill_(50.0)
    x = _t(rng.normal(size=(3, 8)))
    assert pair_probability(x[0], x[1], x[2], head).item() > 1 - 1e-6


def test_symmetric_head_is_swap_invariant():
    rng = np.random.default_rng(7)
    head = _head(8, rng)
    with torch.no_grad():
        head.W_o.copy_(head.W_s)
        head.W_bilinear.copy_((head.W_bilinear + head.W_bilinear.T) / 2)
    x = _t(rng.normal(size=(3, 8)))
    assert torch.allclose(pair_probability(x[0], x[1], x[2], head), pair_probability(x[1], x[0], x[2], head))


def test_probability_in_open_interval():
    rng = np.random.default_rng(8)
    head = _head(8, rng)
    x = _t(rng.normal(scale=10, size=(50, 3, 8)))
    p = pair_probability(x[:, 0], x[:, 1], x[:, 2], head)
    assert torch.all((p > 0) & (p < 1))


def test_bce_values():
    assert bce_loss(_t([0.5]), [True]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(_t([1 - 1e-7]), [True]).item() == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(_t([1.0]), [False]).item() == pytest.approx(-math.log(1e-7), rel=1e-6)
    with pytest.raises(ValueError):
        bce_loss(_t([0.5, 0.5]), [True])


def test_bce_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        p = rng.random(16)
        y = rng.random(16) < 0.5
        assert bce_loss(_t(p), y.tolist()).item() == pytest.approx(oracles.bce(p.tolist(), y.tolist()), abs=1e-9)
