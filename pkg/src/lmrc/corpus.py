"""DocRED-format corpora: loading, validation, candidate pairs and statistics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)


class CorpusFormatError(ValueError):
    """Raised when a corpus file does not follow the DocRED layout."""


class CorpusValidationError(ValueError):
    """Raised when a structurally valid document breaks a data invariant."""


@dataclass(frozen=True)
class Mention:
    surface: str
    sent_id: int
    span: tuple[int, int]

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]


@dataclass(frozen=True)
class Entity:
    index: int
    mentions: tuple[Mention, ...]
    entity_type: str

    @property
    def display_name(self) -> str:
        # longest surface wins, first occurrence breaks ties
        return max(self.mentions, key=lambda m: len(m.surface)).surface

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(m.surface for m in self.mentions))


@dataclass(frozen=True)
class GoldLabel:
    head: int
    tail: int
    relation: str
    evidence: tuple[int, ...] = ()


@dataclass(frozen=True)
class Document:
    """One document. ``labels`` is None when the split hides its annotations."""

    doc_id: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    labels: tuple[GoldLabel, ...] | None = ()

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def text(self) -> str:
        return " ".join(" ".join(sent) for sent in self.sentences)


@dataclass(frozen=True)
class EntityPair:
    doc_id: str
    head: int
    tail: int
    na_probability: float | None = None

    def __post_init__(self) -> None:
        if self.head == self.tail:
            raise ValueError(f"self pair ({self.head}, {self.tail}) in {self.doc_id!r}")
        if self.na_probability is not None and not 0.0 <= self.na_probability <= 1.0:
            raise ValueError(f"na_probability out of range: {self.na_probability}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.head, self.tail)


class RelationSet:
    """Ordered relation inventory, id -> display name. NA is never a member."""

    NA_IDS = frozenset({"NA", "Na", "na", "None"})

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]]):
        items = list(entries.items() if isinstance(entries, Mapping) else entries)
        self._names: dict[str, str] = {}
        self._by_name: dict[str, str] = {}
        for rel_id, name in items:
            if rel_id in self.NA_IDS:
                raise CorpusValidationError(f"NA sentinel {rel_id!r} cannot be a relation")
            if rel_id in self._names:
                raise CorpusValidationError(f"duplicate relation id {rel_id!r}")
            key = normalize_relation_name(name)
            if key in self._by_name:
                raise CorpusValidationError(
                    f"relation names collide after case folding: {name!r} "
                    f"({self._by_name[key]} vs {rel_id})"
                )
            self._names[rel_id] = name
            self._by_name[key] = rel_id

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __contains__(self, rel_id: object) -> bool:
        return rel_id in self._names

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RelationSet) and list(self.items()) == list(other.items())

    def __repr__(self) -> str:
        return f"RelationSet({len(self)} relations)"

    def items(self):
        return self._names.items()

    def ids(self) -> list[str]:
        return list(self._names)

    def names(self) -> list[str]:
        return list(self._names.values())

    def name(self, rel_id: str) -> str:
        return self._names[rel_id]

    def lookup(self, name: str) -> str | None:
        """Relation id for a display name, case- and whitespace-insensitive."""
        return self._by_name.get(normalize_relation_name(name))


def normalize_relation_name(name: str) -> str:
    return " ".join(name.split()).casefold()


# --------------------------------------------------------------------------
# loading


def _require(obj: Mapping[str, Any], key: str, typ: type, where: str):
    if not isinstance(obj, Mapping) or key not in obj:
        raise CorpusFormatError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, typ) or isinstance(value, bool) and typ is int:
        raise CorpusFormatError(f"{where}.{key}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def document_from_dict(raw: Mapping[str, Any], index: int = 0,
                       strict_surface: bool = False) -> Document:
    """Build and validate one document from its DocRED dict form."""
    where = f"document[{index}]"
    if not isinstance(raw, Mapping):
        raise CorpusFormatError(f"{where}: expected an object")
    title = _require(raw, "title", str, where)
    sents_raw = _require(raw, "sents", list, where)
    sentences = []
    for si, sent in enumerate(sents_raw):
        if not isinstance(sent, list) or not all(isinstance(tok, str) for tok in sent):
            raise CorpusFormatError(f"{where}.sents[{si}]: expected a list of token strings")
        sentences.append(tuple(sent))

    entities = []
    for ei, ent in enumerate(_require(raw, "vertexSet", list, where)):
        ewhere = f"{where}.vertexSet[{ei}]"
        if not isinstance(ent, list):
            raise CorpusFormatError(f"{ewhere}: expected a list of mentions")
        if not ent:
            raise CorpusValidationError(f"{ewhere}: entity has no mentions")
        mentions = []
        for mi, m in enumerate(ent):
            mwhere = f"{ewhere}[{mi}]"
            name = _require(m, "name", str, mwhere)
            sent_id = _require(m, "sent_id", int, mwhere)
            pos = _require(m, "pos", list, mwhere)
            if len(pos) != 2 or not all(isinstance(p, int) for p in pos):
                raise CorpusFormatError(f"{mwhere}.pos: expected [start, end]")
            start, end = pos
            if not 0 <= sent_id < len(sentences):
                raise CorpusValidationError(
                    f"{mwhere} ({name!r}): sent_id {sent_id} outside {len(sentences)} sentences")
            if not 0 <= start < end:
                raise CorpusValidationError(f"{mwhere} ({name!r}): empty or inverted span {pos}")
            if end > len(sentences[sent_id]):
                raise CorpusValidationError(
                    f"{mwhere} ({name!r}): span {pos} exceeds sentence length {len(sentences[sent_id])}")
            joined = " ".join(sentences[sent_id][start:end])
            if joined != name:
                msg = f"{mwhere}: surface {name!r} differs from span tokens {joined!r}"
                if strict_surface:
                    raise CorpusValidationError(msg)
                logger.debug(msg)
            mentions.append(Mention(name, sent_id, (start, end)))
        entities.append(Entity(ei, tuple(mentions), str(ent[0].get("type", ""))))

    labels: list[GoldLabel] | None
    if "labels" in raw:
        labels = []
        for li, lab in enumerate(_require(raw, "labels", list, where)):
            lwhere = f"{where}.labels[{li}]"
            h = _require(lab, "h", int, lwhere)
            t = _require(lab, "t", int, lwhere)
            r = _require(lab, "r", str, lwhere)
            evidence = lab.get("evidence") or []
            for idx in (h, t):
                if not 0 <= idx < len(entities):
                    raise CorpusValidationError(f"{lwhere}: entity index {idx} out of range")
            if h == t:
                raise CorpusValidationError(f"{lwhere}: head equals tail ({h})")
            if r in RelationSet.NA_IDS:
                raise CorpusValidationError(f"{lwhere}: NA is not a relation label")
            labels.append(GoldLabel(h, t, r, tuple(evidence)))
    else:
        labels = None

    return Document(title, tuple(sentences), tuple(entities),
                    None if labels is None else tuple(labels))


def document_to_dict(doc: Document) -> dict[str, Any]:
    out: dict[str, Any] = {
        "title": doc.doc_id,
        "sents": [list(s) for s in doc.sentences],
        "vertexSet": [
            [{"name": m.surface, "sent_id": m.sent_id, "pos": list(m.span), "type": e.entity_type}
             for m in e.mentions]
            for e in doc.entities
        ],
    }
    if doc.labels is not None:
        out["labels"] = [{"h": lab.head, "t": lab.tail, "r": lab.relation,
                          "evidence": list(lab.evidence)} for lab in doc.labels]
    return out


def load_relation_set(path: str | Path) -> RelationSet:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or not all(isinstance(v, str) for v in raw.values()):
        raise CorpusFormatError(f"{path}: relation info must map relation id to display name")
    return RelationSet(raw)


def _read_documents(path: Path) -> list[Any]:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: invalid JSON ({exc})") from exc
        return data
    docs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: invalid JSON line ({exc})") from exc
    return docs


def load_documents(path: str | Path, relation_set: RelationSet | None = None,
                   strict_surface: bool = False) -> list[Document]:
    """Load a DocRED JSON array or a line-delimited dump produced by :func:`dump_corpus`."""
    raw_docs = _read_documents(Path(path))
    docs = [document_from_dict(raw, i, strict_surface) for i, raw in enumerate(raw_docs)]
    if relation_set is not None:
        for i, doc in enumerate(docs):
            for lab in doc.labels or ():
                if lab.relation not in relation_set:
                    raise CorpusValidationError(
                        f"document[{i}] ({doc.doc_id!r}): unknown relation id {lab.relation!r}")
    return docs


def load_corpus(path: str | Path, relation_info_path: str | Path,
                strict_surface: bool = False) -> tuple[list[Document], RelationSet]:
    relation_set = load_relation_set(relation_info_path)
    return load_documents(path, relation_set, strict_surface), relation_set


def dump_corpus(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_dict(doc), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


# --------------------------------------------------------------------------
# candidate space and statistics


def candidate_pairs(doc: Document) -> list[EntityPair]:
    n = doc.n_entities
    return [EntityPair(doc.doc_id, h, t) for h in range(n) for t in range(n) if h != t]


def gold_triples(doc: Document) -> set[tuple[int, int, str]]:
    return {(lab.head, lab.tail, lab.relation) for lab in doc.labels or ()}


def gold_pairs(doc: Document) -> set[tuple[int, int]]:
    return {(lab.head, lab.tail) for lab in doc.labels or ()}


@dataclass(frozen=True)
class CorpusStats:
    """Candidate-space counts. Label-derived fields are None for hidden-label splits."""

    candidate_space: int
    na_pairs: int | None
    relation_pairs: int | None
    annotated_triples: int | None
    documents: int = 0
    hidden_label_documents: int = 0

    def as_dict(self) -> dict[str, int | None]:
        return {
            "documents": self.documents,
            "candidate_space": self.candidate_space,
            "na_pairs": self.na_pairs,
            "relation_pairs": self.relation_pairs,
            "annotated_triples": self.annotated_triples,
        }


def corpus_statistics(corpus: Sequence[Document]) -> CorpusStats:
    candidates = sum(d.n_entities * (d.n_entities - 1) for d in corpus)
    hidden = sum(1 for d in corpus if not d.has_labels)
    if hidden:
        return CorpusStats(candidates, None, None, None, len(corpus), hidden)
    relation_pairs = sum(len(gold_pairs(d)) for d in corpus)
    triples = sum(len(gold_triples(d)) for d in corpus)
    return CorpusStats(candidates, candidates - relation_pairs, relation_pairs, triples,
                       len(corpus), 0)


def index_by_id(corpus: Iterable[Document]) -> dict[str, Document]:
    out: dict[str, Document] = {}
    for doc in corpus:
        if doc.doc_id in out:
            raise CorpusValidationError(f"duplicate document title {doc.doc_id!r}")
        out[doc.doc_id] = doc
    return out
