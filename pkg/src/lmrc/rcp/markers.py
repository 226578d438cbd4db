"""Entity-marker insertion over a flattened document."""

from __future__ import annotations

from dataclasses import dataclass

from ..corpus import CorpusValidationError, Document

MARKER = "*"


@dataclass(frozen=True)
class MarkedDocument:
    tokens: tuple[str, ...]
    # per entity, opening-marker index of every mention that survived truncation
    entity_marker_pos: tuple[tuple[int, ...], ...]
    mention_marker_pos: tuple[int, ...]
    overflow: bool = False
    dropped_mentions: int = 0

    @property
    def length(self) -> int:
        return len(self.tokens)


def mark_entities(doc: Document, max_length: int | None = None) -> MarkedDocument:
    """Wrap every mention in ``*`` markers and flatten the sentences.

    Markers sharing a boundary are emitted closing-first, so adjacent mentions
    read ``* a * * b *``. Nested mentions open outermost-first.
    """
    opens: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    closes: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    for ent in doc.entities:
        for mi, m in enumerate(ent.mentions):
            if m.end > len(doc.sentences[m.sent_id]) or m.start >= m.end:
                raise CorpusValidationError(
                    f"{doc.doc_id!r}: mention {m.surface!r} extends beyond sentence {m.sent_id}")
            opens.setdefault((m.sent_id, m.start), []).append((-m.end, ent.index, mi))
            closes.setdefault((m.sent_id, m.end), []).append((-m.start, ent.index, mi))

    tokens: list[str] = []
    opening: dict[tuple[int, int], int] = {}
    for si, sent in enumerate(doc.sentences):
        for p in range(len(sent) + 1):
            tokens.extend(MARKER for _ in closes.get((si, p), ()))
            for _, ei, mi in sorted(opens.get((si, p), ())):
                opening[(ei, mi)] = len(tokens)
                tokens.append(MARKER)
            if p < len(sent):
                tokens.append(sent[p])

    overflow = max_length is not None and len(tokens) > max_length
    if overflow:
        tokens = tokens[:max_length]
    per_entity = []
    flat = []
    dropped = 0
    for ent in doc.entities:
        kept = []
        for mi in range(len(ent.mentions)):
            pos = opening[(ent.index, mi)]
            if pos < len(tokens):
                kept.append(pos)
                flat.append(pos)
            else:
                dropped += 1
        per_entity.append(tuple(kept))
    return MarkedDocument(tuple(tokens), tuple(per_entity), tuple(flat), overflow, dropped)
