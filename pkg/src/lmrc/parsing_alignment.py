"""Parse generated triple lines and align them to document entities and relations."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
from rapidfuzz import fuzz, utils

from .corpus import Document, RelationSet
from .prompting import NONE_LABEL, PLACEHOLDER, PromptMode, entity_names, unescape_name


@dataclass(frozen=True)
class SourceTag:
    doc_id: str
    chunk_index: int = 0
    line: int = 0


@dataclass(frozen=True)
class RawTriple:
    head_surface: str
    relation_surface: str
    tail_surface: str
    source: SourceTag
    raw_line: str = ""


@dataclass(frozen=True)
class Rejection:
    source: SourceTag
    raw_line: str
    reason: str
    similarity: float | None = None

    def to_json(self) -> str:
        return json.dumps({"doc_id": self.source.doc_id, "chunk_index": self.source.chunk_index,
                           "line": self.source.line, "raw_line": self.raw_line,
                           "reason": self.reason, "similarity": self.similarity},
                          ensure_ascii=False)


# rejection reasons
MALFORMED = "malformed"
EMPTY_FIELD = "empty_field"
PLACEHOLDER_RELATION = "placeholder_relation"
NONE_IN_RC = "none_relation_in_rc_mode"
ENTITY_UNMATCHED = "entity_unmatched"
OUT_OF_DOMAIN = "relation_out_of_domain"
DISCARDED = "relation_below_threshold"
ALIGNMENT_ERROR = "alignment_error"
SELF_LOOP = "self_loop"


def parse_response(text: str, source: SourceTag | str, mode: PromptMode | str = PromptMode.RC
                   ) -> tuple[list[RawTriple], list[Rejection]]:
    """Split a response into triples and rejected lines. Never raises on content."""
    if isinstance(source, str):
        source = SourceTag(source)
    mode = PromptMode(mode)
    triples, rejected = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        tag = SourceTag(source.doc_id, source.chunk_index, lineno)
        if not (line.startswith("(") and line.endswith(")")):
            rejected.append(Rejection(tag, raw, MALFORMED))
            continue
        fields = line[1:-1].split("|")
        if len(fields) != 3:
            rejected.append(Rejection(tag, raw, MALFORMED))
            continue
        head, rel, tail = (unescape_name(f.strip()) for f in fields)
        if not head or not rel or not tail:
            rejected.append(Rejection(tag, raw, EMPTY_FIELD))
            continue
        if rel == PLACEHOLDER:
            rejected.append(Rejection(tag, raw, PLACEHOLDER_RELATION))
            continue
        if rel.casefold() == NONE_LABEL.casefold():
            if mode is PromptMode.RC:
                rejected.append(Rejection(tag, raw, NONE_IN_RC))
            continue
        triples.append(RawTriple(head, rel, tail, tag, raw))
    return triples, rejected


# --------------------------------------------------------------------------
# entities


_SUFFIX = re.compile(r"^(.*)#(\d+)$")


def entity_similarity(a: str, b: str) -> float:
    """Token-sort ratio on case-folded strings, 0..100."""
    return fuzz.token_sort_ratio(a, b, processor=utils.default_process)


def align_entity(surface: str, doc: Document, fuzzy_threshold: float = 80.0,
                 names: Sequence[str] | None = None) -> int | None:
    """Entity index for a generated surface, or None.

    A surface equal to exactly one rendered entity name resolves directly;
    otherwise every entity is scored by its best mention similarity and the
    argmax (lowest index on ties) wins if it reaches ``fuzzy_threshold``.
    """
    names = names or entity_names(doc)
    rendered = [unescape_name(n) for n in names]
    if rendered.count(surface) == 1:
        return rendered.index(surface)
    m = _SUFFIX.match(surface)
    if m:
        idx = int(m[2])
        if idx < doc.n_entities and rendered[idx] == surface:
            return idx
    best, best_score = None, -1.0
    for ent in doc.entities:
        score = max(entity_similarity(surface, name) for name in ent.names)
        if score > best_score:
            best, best_score = ent.index, score
    if best is None or best_score < fuzzy_threshold:
        return None
    return best


# --------------------------------------------------------------------------
# relations


def align_relation(relation_surface: str, relation_set: RelationSet) -> str | None:
    """Exact (case- and whitespace-insensitive) match to a display name."""
    return relation_set.lookup(relation_surface)


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic bag of character n-grams hashed into a unit vector.

    A dependency-free stand-in for a sentence encoder: surfaces sharing words
    or spellings land close together.
    """

    def __init__(self, dim: int = 512, ngram: tuple[int, int] = (3, 4)):
        self.dim = dim
        self.ngram = ngram

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        words = text.casefold().split()
        grams = list(words)
        for w in words:
            padded = f"<{w}>"
            for n in range(self.ngram[0], self.ngram[1] + 1):
                grams.extend(padded[i:i + n] for i in range(max(1, len(padded) - n + 1)))
        for g in grams:
            h = int.from_bytes(hashlib.blake2b(g.encode(), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm else vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._vector(t) for t in texts]) if texts else np.zeros((0, self.dim))


class SentenceTransformerEmbedder:
    """Adapter over ``sentence-transformers``; loads the model on first use."""

    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        self.model_name = model_name
        self._model = None

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if self._model is None:
            from sentence_transformers import SentenceTransformer
            self._model = SentenceTransformer(self.model_name)
        return np.asarray(self._model.encode(list(texts), normalize_embeddings=True))


class CachedEmbedder:
    def __init__(self, inner: Embedder):
        self.inner = inner
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for t, v in zip(missing, self.inner.embed(missing)):
                self._cache[t] = np.asarray(v, dtype=float)
        return np.stack([self._cache[t] for t in texts])


class AlignmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class OODMatch:
    relation: str | None  # None when discarded
    similarity: float


def best_relation_match(relation_surface: str, relation_set: RelationSet,
                        embedder: Embedder) -> tuple[str, float]:
    """Most similar relation by cosine similarity; earlier relations win ties."""
    try:
        vecs = embedder.embed([relation_surface, *relation_set.names()])
    except Exception as exc:
        raise AlignmentError(f"embedder failed on {relation_surface!r}: {exc}") from exc
    sims = vecs[1:] @ vecs[0]
    best = int(np.argmax(sims))  # first maximum
    return relation_set.ids()[best], float(sims[best])


def align_out_of_domain(relation_surface: str, relation_set: RelationSet, embedder: Embedder,
                        theta: float) -> OODMatch:
    rel_id, sim = best_relation_match(relation_surface, relation_set, embedder)
    return OODMatch(rel_id if sim >= theta else None, sim)


# --------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class Prediction:
    doc_id: str
    head: int
    tail: int
    relation: str
    provenance: str = "in_domain"  # in_domain | aligned_out_of_domain
    similarity: float | None = None

    @property
    def key(self) -> tuple[str, int, int, str]:
        return (self.doc_id, self.head, self.tail, self.relation)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Prediction) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def to_json(self) -> str:
        return json.dumps({"title": self.doc_id, "h_idx": self.head, "t_idx": self.tail,
                           "r": self.relation}, ensure_ascii=False)


@dataclass
class AlignmentConfig:
    fuzzy_threshold: float = 80.0
    theta: float | None = None  # None disables out-of-domain alignment
    embedder: Embedder | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.fuzzy_threshold <= 100.0:
            raise ValueError("fuzzy_threshold must lie in [0, 100]")
        if self.theta is not None and not -1.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [-1, 1]")
        if self.theta is not None and self.embedder is None:
            self.embedder = HashingEmbedder()


@dataclass
class AssemblyReport:
    predictions: set[Prediction] = field(default_factory=set)
    rejections: list[Rejection] = field(default_factory=list)
    accepted: int = 0  # raw triples that produced (possibly duplicate) predictions
    aligned_out_of_domain: int = 0

    def reason_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rejections:
            out[r.reason] = out.get(r.reason, 0) + 1
        return out


def assemble_predictions(raw: Iterable[RawTriple], doc: Document, relation_set: RelationSet,
                         config: AlignmentConfig, report: AssemblyReport | None = None,
                         ood_cache: dict[str, tuple[str, float]] | None = None) -> AssemblyReport:
    """Align each raw triple; every input ends as a prediction or exactly one rejection."""
    report = report if report is not None else AssemblyReport()
    names = entity_names(doc)
    for t in raw:
        h = align_entity(t.head_surface, doc, config.fuzzy_threshold, names)
        o = align_entity(t.tail_surface, doc, config.fuzzy_threshold, names)
        if h is None or o is None:
            report.rejections.append(Rejection(t.source, t.raw_line, ENTITY_UNMATCHED))
            continue
        rel = align_relation(t.relation_surface, relation_set)
        provenance, sim = "in_domain", None
        if rel is None:
            if config.theta is None:
                report.rejections.append(Rejection(t.source, t.raw_line, OUT_OF_DOMAIN))
                continue
            try:
                if ood_cache is not None and t.relation_surface in ood_cache:
                    best, sim = ood_cache[t.relation_surface]
                else:
                    best, sim = best_relation_match(t.relation_surface, relation_set, config.embedder)
                    if ood_cache is not None:
                        ood_cache[t.relation_surface] = (best, sim)
            except AlignmentError:
                report.rejections.append(Rejection(t.source, t.raw_line, ALIGNMENT_ERROR))
                continue
            if sim < config.theta:
                report.rejections.append(Rejection(t.source, t.raw_line, DISCARDED, sim))
                continue
            rel, provenance = best, "aligned_out_of_domain"
        if h == o:
            report.rejections.append(Rejection(t.source, t.raw_line, SELF_LOOP, sim))
            continue
        if provenance != "in_domain":
            report.aligned_out_of_domain += 1
        report.predictions.add(Prediction(doc.doc_id, h, o, rel, provenance, sim))
        report.accepted += 1
    return report
