import json

import pytest

from lmrc.corpus import Document, Entity, GoldLabel, Mention, dump_corpus
from lmrc.synthetic import TOY_RELATIONS, toy_corpus


def make_doc(sentences, entities, labels=(), doc_id="doc"):
    """entities: list of lists of (sent_id, start, end)."""
    sents = tuple(tuple(s) for s in sentences)
    ents = tuple(
        Entity(i, tuple(Mention(" ".join(sents[s][a:b]), s, (a, b)) for s, a, b in ms), "MISC")
        for i, ms in enumerate(entities)
    )
    return Document(doc_id, sents, ents, tuple(GoldLabel(*lab) for lab in labels))


@pytest.fixture
def relations():
    return TOY_RELATIONS


@pytest.fixture
def toy():
    return toy_corpus(20, seed=0)


@pytest.fixture
def einstein_doc():
    return make_doc(
        [["Albert", "Einstein", "was", "born", "in", "Ulm", "."],
         ["Einstein", "later", "lived", "in", "Germany", "."]],
        [[(0, 0, 2), (1, 0, 1)], [(0, 5, 6)], [(1, 4, 5)]],
        [(0, 1, "P19"), (0, 2, "P27"), (1, 2, "P17"), (1, 2, "P131")],
        doc_id="Einstein",
    )


@pytest.fixture
def corpus_files(tmp_path, toy, relations):
    corpus = tmp_path / "toy.jsonl"
    dump_corpus(toy, corpus)
    rel = tmp_path / "rel_info.json"
    rel.write_text(json.dumps(dict(relations.items())))
    return corpus, rel
