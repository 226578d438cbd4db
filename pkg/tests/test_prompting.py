import json

import pytest
from hypothesis import given, strategies as st

from lmrc.corpus import EntityPair, candidate_pairs, gold_pairs
from lmrc.prompting import (
    BASELINE_INSTRUCTION,
    PIPE_ESCAPE,
    PromptConfig,
    PromptMode,
    PromptTooLong,
    build_fewshot_exemplars,
    build_prompt,
    chunk_pairs,
    document_prompts,
    entity_names,
    export_finetune_dataset,
    format_pair,
    gold_completion,
    request_count,
    request_tag,
    split_tag,
    write_jsonl,
)

from conftest import make_doc


def test_pair_rendering(einstein_doc):
    assert format_pair(einstein_doc, EntityPair("Einstein", 0, 1)) == "(Albert Einstein| -| Ulm)"


def test_pipe_in_names_is_escaped():
    doc = make_doc([["A|B", "met", "C"]], [[(0, 0, 1)], [(0, 2, 3)]])
    assert format_pair(doc, EntityPair("doc", 0, 1)) == f"(A{PIPE_ESCAPE}B| -| C)"


def test_ambiguous_names_get_index_suffix():
    doc = make_doc([["Paris", "and", "paris", "and", "Lyon"]], [[(0, 0, 1)], [(0, 2, 3)], [(0, 4, 5)]])
    assert entity_names(doc) == ["Paris#0", "paris#1", "Lyon"]


def test_chunking_sizes():
    pairs = [EntityPair("d", 0, i + 1) for i in range(45)]
    assert [len(c) for c in chunk_pairs(pairs, 10)] == [10, 10, 10, 10, 5]
    assert request_count(650, 25) == 26
    assert chunk_pairs([], 5) == []
    with pytest.raises(ValueError):
        chunk_pairs(pairs, 0)


@given(st.integers(0, 300), st.integers(1, 40))
def test_chunks_partition_in_order(n, k):
    pairs = [EntityPair("d", 0, i + 1) for i in range(n)]
    chunks = chunk_pairs(pairs, k)
    assert len(chunks) == request_count(n, k)
    assert [p for c in chunks for p in c] == pairs
    assert all(1 <= len(c) <= k for c in chunks)


def test_tags_round_trip():
    assert split_tag(request_tag("a::b", 7)) == ("a::b", 7)


def test_rc_prompt_layout(einstein_doc, relations):
    cfg = PromptConfig(k=20, mode="relation_classification")
    inst = build_prompt(einstein_doc, candidate_pairs(einstein_doc)[:2], relations, cfg)
    text = inst.text
    assert text.startswith("Below is an instruction")
    assert text.endswith("### Response:\n")
    assert "### 2 Entity pairs:\n(Albert Einstein| -| Ulm)\n(Albert Einstein| -| Germany)\n" in text
    assert ", ".join(relations.names()) in text
    assert "None" not in text and "NA" not in text.split()
    assert einstein_doc.text() in text


def test_baseline_prompt_mentions_none(einstein_doc, relations):
    inst = build_prompt(einstein_doc, candidate_pairs(einstein_doc), relations,
                        PromptConfig(mode=PromptMode.BASELINE))
    assert BASELINE_INSTRUCTION in inst.text
    assert "if there is no relation, return None" in inst.text


def test_gold_completion_order_and_none(einstein_doc, relations):
    chunk = candidate_pairs(einstein_doc)
    rc = gold_completion(einstein_doc, chunk, relations, PromptMode.RC).splitlines()
    assert rc == [
        "(Albert Einstein| place of birth| Ulm)",
        "(Albert Einstein| country of citizenship| Germany)",
        "(Ulm| country| Germany)",
        "(Ulm| located in the administrative territorial entity| Germany)",
    ]
    base = gold_completion(einstein_doc, chunk, relations, PromptMode.BASELINE).splitlines()
    assert len(base) == 4 + (6 - 3)
    assert "(Ulm| None| Albert Einstein)" in base


def test_prompts_are_deterministic(toy, relations):
    cfg = PromptConfig(k=4, n_shots=0)
    a = [p.text for d in toy for p in document_prompts(d, None, relations, cfg)]
    b = [p.text for d in toy for p in document_prompts(d, None, relations, cfg)]
    assert a == b


def test_prompt_budget(einstein_doc, relations):
    with pytest.raises(PromptTooLong, match="k <"):
        build_prompt(einstein_doc, candidate_pairs(einstein_doc), relations, PromptConfig(max_prompt_tokens=20))


def test_fewshot_exemplars(toy, relations):
    cfg = PromptConfig(k=6, seed=3)
    ex = build_fewshot_exemplars(toy, 2, relations, cfg)
    assert ex == build_fewshot_exemplars(toy, 2, relations, cfg)
    assert ex.count("### Response:") == 2
    inst = build_prompt(toy[0], candidate_pairs(toy[0])[:3], relations, cfg, exemplars=ex)
    assert inst.text.startswith(ex + "\n\n")
    assert inst.text.count("### Response:") == 3
    assert build_fewshot_exemplars(toy, 0, relations, cfg) == ""
    with pytest.raises(ValueError):
        build_fewshot_exemplars(toy[:1], 5, relations, cfg)


def test_export_rc_uses_gold_pairs(toy, relations, tmp_path):
    cfg = PromptConfig(k=3)
    records = export_finetune_dataset(toy, relations, cfg)
    expected = sum(request_count(len(gold_pairs(d)), 3) for d in toy)
    assert len(records) == expected
    assert all(r.completion for r in records)
    out = tmp_path / "ft.jsonl"
    write_jsonl(records, out)
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert rows[0] == {"tag": records[0].tag, "prompt": records[0].prompt, "completion": records[0].completion}


def test_export_baseline_covers_candidate_space(toy, relations):
    records = export_finetune_dataset(toy[:3], relations, PromptConfig(k=7, mode="baseline_docre"))
    assert len(records) == sum(request_count(d.n_entities * (d.n_entities - 1), 7) for d in toy[:3])
