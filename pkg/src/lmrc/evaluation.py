"""Extraction metrics: F1, Ign F1, intra/inter F1, per-relation F1, RCP binary
metrics and out-of-domain threshold sweeps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import Document, EntityPair, RelationSet, gold_pairs, index_by_id
from .parsing_alignment import AlignmentConfig, AssemblyReport, Prediction, RawTriple, assemble_predictions


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    ign_precision: float
    ign_f1: float
    correct: int
    predicted: int
    gold: int
    correct_in_train: int

    @property
    def extracted_triples(self) -> int:
        return self.predicted

    def as_dict(self, percent: bool = False) -> dict:
        out = asdict(self)
        out["extracted_triples"] = self.predicted
        if percent:
            for key in ("precision", "recall", "f1", "ign_precision", "ign_f1"):
                out[key] = round(100 * out[key], 2)
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


class TrainFactSet:
    """(head mention name, relation, tail mention name) facts of a training split."""

    def __init__(self, facts: Iterable[tuple[str, str, str]] = ()):
        self.facts = set(facts)

    @classmethod
    def from_corpus(cls, corpus: Iterable[Document]) -> "TrainFactSet":
        facts = set()
        for doc in corpus:
            for lab in doc.labels or ():
                for hm in doc.entities[lab.head].mentions:
                    for tm in doc.entities[lab.tail].mentions:
                        facts.add((hm.surface, lab.relation, tm.surface))
        return cls(facts)

    def __len__(self) -> int:
        return len(self.facts)

    def contains(self, doc: Document, head: int, tail: int, relation: str) -> bool:
        return any((hm.surface, relation, tm.surface) in self.facts
                   for hm in doc.entities[head].mentions for tm in doc.entities[tail].mentions)


def _as_keys(preds: Iterable) -> set[tuple[str, int, int, str]]:
    return {p.key if isinstance(p, Prediction) else tuple(p) for p in preds}


def gold_facts(gold: Iterable[Document]) -> set[tuple[str, int, int, str]]:
    return {(d.doc_id, lab.head, lab.tail, lab.relation) for d in gold for lab in d.labels or ()}


def score_sets(pred: set, gold: set, correct_in_train: int = 0) -> MetricsReport:
    correct = len(pred & gold)
    p = correct / len(pred) if pred else 0.0
    r = correct / len(gold) if gold else 0.0
    ign_denom = len(pred) - correct_in_train
    ign_p = (correct - correct_in_train) / ign_denom if ign_denom > 0 else 0.0
    return MetricsReport(p, r, _f1(p, r), ign_p, _f1(ign_p, r), correct, len(pred), len(gold),
                         correct_in_train)


def evaluate(preds: Iterable, gold: Sequence[Document],
             train_facts: TrainFactSet | None = None) -> MetricsReport:
    """Micro P/R/F1 over (doc, head, tail, relation) facts plus Ign F1.

    Correct predictions already seen in training are removed from both the
    numerator and the denominator of the Ign precision; recall is unchanged.
    """
    docs = index_by_id(gold)
    pred = _as_keys(preds)
    unknown = {k[0] for k in pred} - docs.keys()
    if unknown:
        raise ValueError(f"predictions reference unknown documents: {sorted(unknown)[:5]}")
    gold_set = gold_facts(gold)
    in_train = 0
    if train_facts is not None:
        in_train = sum(1 for (d, h, t, r) in pred & gold_set if train_facts.contains(docs[d], h, t, r))
    return score_sets(pred, gold_set, in_train)


def is_intra(doc: Document, head: int, tail: int) -> bool:
    """True when some sentence holds mentions of both entities."""
    hs = {m.sent_id for m in doc.entities[head].mentions}
    return any(m.sent_id in hs for m in doc.entities[tail].mentions)


def intra_inter_f1(preds: Iterable, gold: Sequence[Document]) -> tuple[MetricsReport, MetricsReport]:
    docs = index_by_id(gold)
    pred = _as_keys(preds)
    gold_set = gold_facts(gold)

    def split(facts):
        intra = {f for f in facts if is_intra(docs[f[0]], f[1], f[2])}
        return intra, facts - intra

    p_in, p_out = split(pred)
    g_in, g_out = split(gold_set)
    return score_sets(p_in, g_in), score_sets(p_out, g_out)


def per_relation_f1(preds: Iterable, gold: Sequence[Document],
                    relation_set: RelationSet | None = None) -> list[tuple[str, float, int]]:
    """(relation, f1, gold count) sorted by descending gold count, then relation order."""
    pred = _as_keys(preds)
    gold_set = gold_facts(gold)
    rels = {k[3] for k in pred | gold_set}
    order = {r: i for i, r in enumerate(relation_set.ids())} if relation_set else {}
    rows = []
    for rel in rels:
        rp = {k for k in pred if k[3] == rel}
        rg = {k for k in gold_set if k[3] == rel}
        rows.append((rel, score_sets(rp, rg).f1, len(rg)))
    rows.sort(key=lambda row: (-row[2], order.get(row[0], len(order)), row[0]))
    return rows


def rcp_binary_metrics(proposals: Iterable[EntityPair], gold: Sequence[Document]) -> tuple[float, float, float]:
    proposed = {(p.doc_id, p.head, p.tail) for p in proposals}
    gold_set = {(d.doc_id, h, t) for d in gold for h, t in gold_pairs(d)}
    r = score_sets(proposed, gold_set)
    return r.precision, r.recall, r.f1


@dataclass(frozen=True)
class SweepPoint:
    theta: float
    report: MetricsReport
    aligned: int  # raw triples kept via out-of-domain alignment


def threshold_sweep(raw: Mapping[str, Sequence[RawTriple]], gold: Sequence[Document],
                    relation_set: RelationSet, grid: Sequence[float], config: AlignmentConfig,
                    train_facts: TrainFactSet | None = None) -> list[SweepPoint]:
    """Re-align out-of-domain relations at each theta and score the result."""
    if list(grid) != sorted(grid):
        raise ValueError("theta grid must be ascending")
    docs = index_by_id(gold)
    base = AlignmentConfig(config.fuzzy_threshold, None, config.embedder)
    cache: dict[str, tuple[str, float]] = {}
    points = []
    for theta in grid:
        cfg = AlignmentConfig(base.fuzzy_threshold, theta, base.embedder)
        report = AssemblyReport()
        for doc_id, triples in raw.items():
            assemble_predictions(triples, docs[doc_id], relation_set, cfg, report, cache)
        points.append(SweepPoint(theta, evaluate(report.predictions, gold, train_facts),
                                 report.aligned_out_of_domain))
    return points
