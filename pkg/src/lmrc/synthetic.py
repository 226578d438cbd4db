"""Seeded toy corpora for smoke runs and tests."""

from __future__ import annotations

import random

from .corpus import Document, Entity, GoldLabel, Mention, RelationSet

TOY_RELATIONS = RelationSet({
    "P17": "country",
    "P131": "located in the administrative territorial entity",
    "P27": "country of citizenship",
    "P569": "date of birth",
    "P19": "place of birth",
    "P108": "employer",
    "P463": "member of",
    "P50": "author",
})

_FILLER = ("the", "report", "said", "that", "in", "a", "later", "statement", "was", "noted",
           "and", "also", "while", "during", "its", "early", "years", "with")
_NAMES = ("Arden", "Belmont", "Corvin", "Dalia", "Esker", "Farrow", "Galen", "Hollis",
          "Ivara", "Jessup", "Kestrel", "Lumen", "Marrow", "Norrell", "Orrin", "Pellam",
          "Quill", "Rowan", "Sable", "Tamsin", "Ulric", "Vesper", "Wren", "Yarrow")


def _build(doc_id: str, sentences: list[list[str]], spans: list[list[tuple[int, int, int]]],
           types: list[str], labels: list[GoldLabel]) -> Document:
    entities = []
    for ei, ment in enumerate(spans):
        mentions = tuple(Mention(" ".join(sentences[s][a:b]), s, (a, b)) for s, a, b in ment)
        entities.append(Entity(ei, mentions, types[ei]))
    return Document(doc_id, tuple(tuple(s) for s in sentences), tuple(entities), tuple(labels))


def _place_entities(rng: random.Random, surfaces: list[list[str]], n_sents: int,
                    mentions_per_entity: list[int]):
    """Lay out sentences of filler with entity mentions dropped in."""
    sentences: list[list[str]] = [[] for _ in range(n_sents)]
    spans: list[list[tuple[int, int, int]]] = [[] for _ in surfaces]
    slots = []
    for ei, count in enumerate(mentions_per_entity):
        sents = rng.sample(range(n_sents), min(count, n_sents))
        slots.extend((s, ei) for s in sents)
    rng.shuffle(slots)
    for s, ei in slots:
        sent = sentences[s]
        sent.extend(rng.choice(_FILLER) for _ in range(rng.randint(1, 3)))
        start = len(sent)
        sent.extend(surfaces[ei])
        spans[ei].append((s, start, len(sent)))
    for sent in sentences:
        sent.extend(rng.choice(_FILLER) for _ in range(rng.randint(2, 4)))
        sent.append(".")
    for ent in spans:
        ent.sort()
    return sentences, spans


def separable_corpus(n_docs: int, seed: int = 0, prefix: str = "sep") -> list[Document]:
    """Documents where a pair holds a relation iff head is a source and tail a target.

    Every mention starts with its role word (``source``/``target``/``other``)
    so an entity's marker embedding carries the role.
    """
    rng = random.Random(seed)
    docs = []
    for d in range(n_docs):
        roles = ["source"] * rng.randint(1, 2) + ["target"] * rng.randint(1, 2) + ["other"] * rng.randint(1, 3)
        rng.shuffle(roles)
        names = rng.sample(_NAMES, len(roles))
        surfaces = [[role, name] for role, name in zip(roles, names)]
        counts = [rng.randint(1, 2) for _ in roles]
        sentences, spans = _place_entities(rng, surfaces, rng.randint(3, 5), counts)
        labels = [GoldLabel(h, t, "P17") for h in range(len(roles)) for t in range(len(roles))
                  if roles[h] == "source" and roles[t] == "target"]
        docs.append(_build(f"{prefix}-{d:03d}", sentences, spans, roles, labels))
    return docs


def toy_corpus(n_docs: int = 20, seed: int = 0, relation_set: RelationSet = TOY_RELATIONS,
               prefix: str = "toy") -> list[Document]:
    """Random documents with multi-relation pairs and mixed intra/inter-sentence facts."""
    rng = random.Random(seed)
    rel_ids = relation_set.ids()
    docs = []
    for d in range(n_docs):
        n = rng.randint(3, 7)
        first = rng.sample(_NAMES, n)
        surfaces = [[name, rng.choice(("Institute", "River", "Group", "Hall", "Ridge"))] if i % 3 == 0
                    else [name] for i, name in enumerate(first)]
        counts = [rng.randint(1, 3) for _ in range(n)]
        sentences, spans = _place_entities(rng, surfaces, rng.randint(2, 6), counts)
        labels = []
        pairs = [(h, t) for h in range(n) for t in range(n) if h != t]
        for h, t in rng.sample(pairs, rng.randint(1, min(len(pairs), n + 1))):
            for r in rng.sample(rel_ids, 1 if rng.random() < 0.8 else 2):
                labels.append(GoldLabel(h, t, r))
        types = [rng.choice(("PER", "ORG", "LOC", "TIME")) for _ in range(n)]
        docs.append(_build(f"{prefix}-{d:03d}", sentences, spans, types, labels))
    return docs
