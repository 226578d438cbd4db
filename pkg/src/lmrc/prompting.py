"""Prompt rendering, pair chunking, few-shot exemplars and fine-tune dataset export."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from rapidfuzz import utils

from .corpus import Document, EntityPair, RelationSet, candidate_pairs, gold_pairs

PIPE_ESCAPE = "\\u007C"
PLACEHOLDER = "-"
NONE_LABEL = "None"

PREAMBLE = ("Below is an instruction that describes a task, paired with an input that provides "
            "further context. Write a response that appropriately completes the request.")

BASELINE_INSTRUCTION = (
    "Your task is to determine whether there are relations between the entity pairs based on "
    "the information in the text. If there exists relations, select relations for the entity "
    "pairs from the relation set; if there is no relation, return None.\n"
    "The format of the input entity pair is ‘(head entity| -| tail entity)’.\n"
    "Your output format is ‘(head entity| relation/None| tail entity)’."
)

RC_INSTRUCTION = (
    "This is a relation classification task. we will provide entity pairs that require relation "
    "classification. Your task is to select relations for each entity pair from the given "
    "relation set based on the information in the text. There may be multiple relations between "
    "an entity pair.\n"
    "The format of the input entity pair is ‘(head entity| -| tail entity)’.\n"
    "Your output format is ‘(head entity| relation| tail entity)’."
)


class PromptMode(str, Enum):
    BASELINE = "baseline_docre"
    RC = "relation_classification"


class PromptTooLong(ValueError):
    """Rendered prompt exceeds the backend's context budget."""


@dataclass(frozen=True)
class PromptConfig:
    k: int = 20
    mode: PromptMode = PromptMode.RC
    n_shots: int = 0
    seed: int = 0
    max_prompt_tokens: int | None = None  # whitespace tokens; None disables the check

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", PromptMode(self.mode))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.n_shots < 0:
            raise ValueError(f"n_shots must be >= 0, got {self.n_shots}")


@dataclass(frozen=True)
class PromptInstance:
    doc_id: str
    chunk_index: int
    pairs: tuple[EntityPair, ...]
    text: str
    expected_completion: str | None = None

    @property
    def tag(self) -> str:
        return request_tag(self.doc_id, self.chunk_index)


def request_tag(doc_id: str, chunk_index: int) -> str:
    return f"{doc_id}::{chunk_index}"


def split_tag(tag: str) -> tuple[str, int]:
    doc_id, _, chunk = tag.rpartition("::")
    return doc_id, int(chunk)


# --------------------------------------------------------------------------
# entity names


def escape_name(name: str) -> str:
    return name.replace("|", PIPE_ESCAPE)


def unescape_name(name: str) -> str:
    return name.replace(PIPE_ESCAPE, "|")


def entity_names(doc: Document) -> list[str]:
    """Rendered name per entity: longest mention, escaped, ``#index`` when ambiguous."""
    base = [escape_name(e.display_name) for e in doc.entities]
    keys = [_match_key(e.display_name) for e in doc.entities]
    counts: dict[str, int] = {}
    for key in keys:
        counts[key] = counts.get(key, 0) + 1
    return [f"{name}#{i}" if counts[key] > 1 else name
            for i, (name, key) in enumerate(zip(base, keys))]


def _match_key(name: str) -> str:
    # names equal under this key are indistinguishable to the fuzzy aligner
    return " ".join(sorted(utils.default_process(name).split()))


def format_pair(doc: Document, pair: EntityPair, names: Sequence[str] | None = None) -> str:
    names = names or entity_names(doc)
    return f"({names[pair.head]}| {PLACEHOLDER}| {names[pair.tail]})"


def format_triple(head: str, relation: str, tail: str) -> str:
    return f"({head}| {relation}| {tail})"


# --------------------------------------------------------------------------
# chunking and rendering


def chunk_pairs(pairs: Sequence[EntityPair], k: int) -> list[list[EntityPair]]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return [list(pairs[i:i + k]) for i in range(0, len(pairs), k)]


def request_count(n_pairs: int, k: int) -> int:
    return math.ceil(n_pairs / k)


def build_prompt(doc: Document, chunk: Sequence[EntityPair], relation_set: RelationSet,
                 config: PromptConfig, chunk_index: int = 0, exemplars: str = "") -> PromptInstance:
    if not chunk:
        raise ValueError("cannot render a prompt for an empty chunk")
    if len(chunk) > config.k:
        raise ValueError(f"chunk of {len(chunk)} pairs exceeds k={config.k}")
    names = entity_names(doc)
    instruction = BASELINE_INSTRUCTION if config.mode is PromptMode.BASELINE else RC_INSTRUCTION
    sections = [
        PREAMBLE,
        "",
        "### Instruction:",
        instruction,
        "",
        "### Relation set:",
        ", ".join(relation_set.names()),
        "",
        "### Text:",
        doc.text(),
        "",
        f"### {len(chunk)} Entity pairs:",
        *(format_pair(doc, p, names) for p in chunk),
        "",
        "### Response:",
        "",
    ]
    text = "\n".join(sections)
    if exemplars:
        text = exemplars + "\n\n" + text
    if config.max_prompt_tokens is not None and len(text.split()) > config.max_prompt_tokens:
        raise PromptTooLong(
            f"{doc.doc_id!r} chunk {chunk_index}: prompt has {len(text.split())} tokens "
            f"(budget {config.max_prompt_tokens}); retry with k < {config.k}")
    return PromptInstance(doc.doc_id, chunk_index, tuple(chunk), text,
                          gold_completion(doc, chunk, relation_set, config.mode)
                          if doc.has_labels else None)


def gold_completion(doc: Document, chunk: Iterable[EntityPair], relation_set: RelationSet,
                    mode: PromptMode | str) -> str:
    """Gold response lines for a chunk, one per (pair, relation), in chunk then relation order."""
    mode = PromptMode(mode)
    names = entity_names(doc)
    order = {rid: i for i, rid in enumerate(relation_set.ids())}
    by_pair: dict[tuple[int, int], list[str]] = {}
    for lab in doc.labels or ():
        by_pair.setdefault((lab.head, lab.tail), []).append(lab.relation)
    lines = []
    for pair in chunk:
        rels = sorted(set(by_pair.get(pair.key, ())), key=order.__getitem__)
        for rid in rels:
            lines.append(format_triple(names[pair.head], relation_set.name(rid), names[pair.tail]))
        if not rels and mode is PromptMode.BASELINE:
            lines.append(format_triple(names[pair.head], NONE_LABEL, names[pair.tail]))
    return "\n".join(lines)


def document_prompts(doc: Document, pairs: Sequence[EntityPair] | None, relation_set: RelationSet,
                     config: PromptConfig, exemplars: str = "") -> list[PromptInstance]:
    """Chunked prompts for one document; ``pairs=None`` means the full candidate space."""
    if pairs is None:
        pairs = candidate_pairs(doc)
    return [build_prompt(doc, chunk, relation_set, config, i, exemplars)
            for i, chunk in enumerate(chunk_pairs(pairs, config.k))]


# --------------------------------------------------------------------------
# few-shot and export


def build_fewshot_exemplars(corpus: Sequence[Document], n_shots: int, relation_set: RelationSet,
                            config: PromptConfig) -> str:
    """Seeded exemplar block mixing relation-bearing and NA pairs in each shot."""
    if n_shots == 0:
        return ""
    pool = [d for d in corpus if d.labels and len(gold_pairs(d)) < d.n_entities * (d.n_entities - 1)]
    if len(pool) < n_shots:
        raise ValueError(f"need {n_shots} documents with both relation and NA pairs, found {len(pool)}")
    rng = random.Random(config.seed)
    blocks = []
    for doc in rng.sample(pool, n_shots):
        gp = gold_pairs(doc)
        cands = candidate_pairs(doc)
        pos = [p for p in cands if p.key in gp]
        neg = [p for p in cands if p.key not in gp]
        n_pos = min(len(pos), max(1, config.k // 2))
        n_neg = min(len(neg), max(1, config.k - n_pos))
        chosen = rng.sample(pos, n_pos) + rng.sample(neg, n_neg)
        chosen.sort(key=lambda p: p.key)
        inst = build_prompt(doc, chosen, relation_set, config)
        blocks.append(inst.text + inst.expected_completion)
    return "\n\n".join(blocks)


@dataclass(frozen=True)
class FinetuneRecord:
    tag: str
    prompt: str
    completion: str

    def to_json(self) -> str:
        return json.dumps({"tag": self.tag, "prompt": self.prompt, "completion": self.completion},
                          ensure_ascii=False)


def export_finetune_dataset(corpus: Sequence[Document], relation_set: RelationSet,
                            config: PromptConfig,
                            proposals: dict[str, list[EntityPair]] | None = None) -> list[FinetuneRecord]:
    """One record per chunk. RC mode defaults to the gold relation-bearing pairs."""
    records = []
    for doc in corpus:
        if not doc.has_labels:
            raise ValueError(f"{doc.doc_id!r} has no gold labels to export")
        if proposals is not None:
            pairs = proposals.get(doc.doc_id, [])
        elif config.mode is PromptMode.RC:
            gp = gold_pairs(doc)
            pairs = [p for p in candidate_pairs(doc) if p.key in gp]
        else:
            pairs = candidate_pairs(doc)
        for inst in document_prompts(doc, pairs, relation_set, config):
            records.append(FinetuneRecord(inst.tag, inst.text, inst.expected_completion or ""))
    return records


def write_jsonl(records: Iterable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() if hasattr(rec, "to_json") else json.dumps(rec, ensure_ascii=False))
            fh.write("\n")
