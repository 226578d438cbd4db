"""Command-line entry point: one subcommand per pipeline stage.

Stages exchange data only through files in ``--out``; each run records its
configuration, output checksums and timing in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .corpus import (
    CorpusFormatError,
    CorpusValidationError,
    EntityPair,
    RelationSet,
    candidate_pairs,
    corpus_statistics,
    gold_pairs,
    index_by_id,
    load_documents,
    load_relation_set,
)

logger = logging.getLogger("lmrc")

EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_ABORT = 4

PROPOSALS_FORMAT = "lmrc.proposals"


class ConfigError(Exception):
    pass


class StageAborted(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _update_manifest(out: Path, stage: str, args: argparse.Namespace, outputs: Sequence[Path],
                     seconds: float) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"stages": {}}
    import numpy
    import torch

    config = {k: v for k, v in vars(args).items() if k != "func" and not k.startswith("_") and _jsonable(v)}
    manifest["stages"][stage] = {
        "config": config,
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
        "seconds": round(seconds, 3),
        "versions": {"lmrc": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "numpy": numpy.__version__},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(v: Any) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _relations(args) -> RelationSet:
    return load_relation_set(_need(args.relations, "--relations file"))


def _corpus(path: str | None, relations: RelationSet | None, what: str = "--corpus"):
    return load_documents(_need(path, what), relations)


def write_proposals(path: Path, proposals: dict[str, list[EntityPair]], threshold: float | None,
                    source: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": PROPOSALS_FORMAT, "version": 1, "threshold": threshold,
                             "source": source}) + "\n")
        for doc_id, pairs in proposals.items():
            for p in pairs:
                fh.write(json.dumps({"doc_id": doc_id, "head": p.head, "tail": p.tail,
                                     "na_probability": p.na_probability}) + "\n")


def read_proposals(path: Path) -> tuple[dict, dict[str, list[EntityPair]]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty proposals file (no header)")
    header = json.loads(lines[0])
    if header.get("format") != PROPOSALS_FORMAT:
        raise ConfigError(f"{path}: not a proposals file")
    out: dict[str, list[EntityPair]] = {}
    for ln in lines[1:]:
        rec = json.loads(ln)
        out.setdefault(rec["doc_id"], []).append(
            EntityPair(rec["doc_id"], rec["head"], rec["tail"], rec.get("na_probability")))
    return header, out


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


# --------------------------------------------------------------------------
# subcommands


def cmd_stats(args) -> list[Path]:
    relations = load_relation_set(args.relations) if args.relations else None
    rows = []
    for path in args.corpus:
        stats = corpus_statistics(load_documents(_need(path, "corpus"), relations))
        rows.append({"corpus": path, **stats.as_dict()})
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        cols = ["corpus", "documents", "candidate_space", "na_pairs", "relation_pairs", "annotated_triples"]
        print("\t".join(cols))
        for row in rows:
            print("\t".join("-" if row[c] is None else str(row[c]) for c in cols))
    return []


def cmd_train_rcp(args) -> list[Path]:
    from .rcp import RCPConfig, RCPModel, RCPHead, build_encoder, calibrate_threshold, save_checkpoint, train_rcp
    from .rcp.model import TrainingAborted

    relations = load_relation_set(args.relations) if args.relations else None
    train = _corpus(args.train, relations, "--train corpus")
    dev = _corpus(args.dev, relations, "--dev corpus") if args.dev else []
    config = RCPConfig(na_threshold=args.threshold, encoder_lr=args.encoder_lr,
                       classifier_lr=args.classifier_lr, epochs=args.epochs, batch_size=args.batch_size,
                       warmup_fraction=args.warmup_fraction, max_grad_norm=args.max_grad_norm,
                       patience=args.patience, max_steps=args.max_steps, seed=args.seed)
    import torch

    torch.manual_seed(args.seed)
    encoder = build_encoder(args.encoder)
    model = RCPModel(encoder, RCPHead(encoder.hidden_dim, seed=args.seed), args.threshold)
    out = Path(args.out)
    log_path = out / "rcp_train_log.jsonl"
    try:
        result = train_rcp(train, dev, model, config)
    except TrainingAborted as exc:
        raise StageAborted(f"training aborted: {exc}") from exc
    with open(log_path, "w", encoding="utf-8") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    extra = {"best_dev_f1": result.best_dev_f1, "best_step": result.best_step, "steps": result.steps}
    if args.calibrate and dev:
        tau, f1 = calibrate_threshold(model, dev)
        model.threshold = tau
        extra["calibrated_threshold"] = tau
        extra["calibrated_dev_f1"] = f1
    ckpt = out / "rcp.ckpt"
    save_checkpoint(ckpt, model, config, extra)
    print(json.dumps({"checkpoint": str(ckpt), **extra}))
    return [ckpt, log_path]


def cmd_propose(args) -> list[Path]:
    relations = load_relation_set(args.relations) if args.relations else None
    docs = _corpus(args.corpus, relations)
    out = Path(args.out) / "proposals.jsonl"
    proposals: dict[str, list[EntityPair]] = {}
    if args.oracle:
        for doc in docs:
            gp = gold_pairs(doc)
            proposals[doc.doc_id] = [p for p in candidate_pairs(doc) if p.key in gp]
        write_proposals(out, proposals, None, "oracle")
    else:
        from .rcp import load_checkpoint, propose_candidates

        model, _ = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
        tau = model.threshold if args.threshold is None else args.threshold
        for doc in docs:
            proposals[doc.doc_id] = propose_candidates(doc, model, tau)
        write_proposals(out, proposals, tau, "rcp")
    total = sum(len(v) for v in proposals.values())
    print(json.dumps({"proposals": str(out), "pairs": total,
                      "candidate_space": sum(d.n_entities * (d.n_entities - 1) for d in docs)}))
    return [out]


def _build_backend(args, gold: dict[str, str], relations: RelationSet):
    from .llm_backend import HTTPBackend, MockBackend, MockScript

    if args.backend == "mock":
        canned = {}
        if args.mock_canned:
            canned = {r["tag"]: r["text"] for r in _read_jsonl(_need(args.mock_canned, "--mock-canned"))}
        script = MockScript(gold=gold, drop_rate=args.mock_drop, corrupt_rate=args.mock_corrupt,
                            relation_names=relations.names(), canned=canned, seed=args.seed)
        return MockBackend(script, fail_tags=args.mock_fail or ())
    if args.backend == "http":
        return HTTPBackend(args.api_base, args.model, timeout=args.timeout, max_retries=args.retries,
                           backoff=args.backoff)
    raise ConfigError(f"unknown backend {args.backend!r}")


def cmd_run_rc(args) -> list[Path]:
    from .llm_backend import CompletionLedger, GenerationRequest, failed_tags, generate_batch
    from .prompting import PromptConfig, PromptMode, build_fewshot_exemplars, document_prompts

    relations = _relations(args)
    docs = _corpus(args.corpus, relations)
    mode = PromptMode(args.mode)
    config = PromptConfig(k=args.k, mode=mode, n_shots=args.n_shots, seed=args.seed,
                          max_prompt_tokens=args.max_prompt_tokens)
    proposals = None
    if args.proposals:
        _, proposals = read_proposals(_need(args.proposals, "--proposals"))
    elif mode is PromptMode.RC:
        raise ConfigError("relation_classification mode needs --proposals")
    exemplars = ""
    if args.n_shots:
        shots = _corpus(args.fewshot_corpus, relations, "--fewshot-corpus")
        exemplars = build_fewshot_exemplars(shots, args.n_shots, relations, config)

    out = Path(args.out)
    requests_path = out / "requests.jsonl"
    instances = []
    for doc in docs:
        pairs = None if proposals is None else proposals.get(doc.doc_id, [])
        instances.extend(document_prompts(doc, pairs, relations, config, exemplars))
    with open(requests_path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps({"tag": inst.tag, "doc_id": inst.doc_id, "chunk_index": inst.chunk_index,
                                 "mode": mode.value, "pairs": [[p.head, p.tail] for p in inst.pairs],
                                 "prompt_sha256": hashlib.sha256(inst.text.encode()).hexdigest()}) + "\n")
    gold = {inst.tag: inst.expected_completion or "" for inst in instances}
    backend = _build_backend(args, gold, relations)
    ledger_path = out / "responses.jsonl"
    ledger = CompletionLedger(ledger_path)
    reqs = [GenerationRequest(inst.text, inst.tag, args.max_tokens, args.temperature) for inst in instances]
    results = generate_batch(backend, reqs, args.parallelism, args.rate_limit, ledger)
    failed = failed_tags(results)
    sent = sum(1 for r in results if not r.cached)
    print(json.dumps({"requests": len(reqs), "sent": sent, "cached": len(reqs) - sent,
                      "failed": failed, "truncated": [r.tag for r in results if r.truncated]}))
    if failed:
        args._exit_code = EXIT_PARTIAL
    return [requests_path, ledger_path]


def _collect_raw(args, docs_by_id):
    from .parsing_alignment import SourceTag, parse_response
    from .prompting import split_tag

    requests = _read_jsonl(_need(args.requests, "--requests"))
    ledger = {r["tag"]: r for r in _read_jsonl(_need(args.responses, "--responses"))}
    raw: dict[str, list] = {}
    rejected = []
    missing = []
    for req in requests:
        rec = ledger.get(req["tag"])
        if rec is None:
            missing.append(req["tag"])
            continue
        doc_id, chunk = split_tag(req["tag"])
        if doc_id not in docs_by_id:
            raise ConfigError(f"response for unknown document {doc_id!r}")
        triples, rej = parse_response(rec["text"], SourceTag(doc_id, chunk), req["mode"])
        raw.setdefault(doc_id, []).extend(triples)
        rejected.extend(rej)
    return raw, rejected, missing


def _embedder(spec: str):
    from .parsing_alignment import CachedEmbedder, HashingEmbedder, SentenceTransformerEmbedder

    if spec == "hashing":
        return CachedEmbedder(HashingEmbedder())
    if spec.startswith("sbert"):
        _, _, name = spec.partition(":")
        return CachedEmbedder(SentenceTransformerEmbedder(name or "all-MiniLM-L6-v2"))
    raise ConfigError(f"unknown embedder {spec!r}")


def cmd_score(args) -> list[Path]:
    from .evaluation import TrainFactSet, evaluate, intra_inter_f1, per_relation_f1
    from .parsing_alignment import AlignmentConfig, AssemblyReport, assemble_predictions
    from .reporting import write_per_relation

    relations = _relations(args)
    gold = _corpus(args.corpus, relations)
    docs = index_by_id(gold)
    raw, rejected, missing = _collect_raw(args, docs)
    cfg = AlignmentConfig(args.fuzzy_threshold, args.theta,
                          _embedder(args.embedder) if args.theta is not None else None)
    report = AssemblyReport(rejections=list(rejected))
    for doc_id, triples in raw.items():
        assemble_predictions(triples, docs[doc_id], relations, cfg, report)
    train_facts = TrainFactSet.from_corpus(_corpus(args.train_corpus, relations, "--train-corpus")) \
        if args.train_corpus else None
    metrics = evaluate(report.predictions, gold, train_facts)
    intra, inter = intra_inter_f1(report.predictions, gold)
    rows = per_relation_f1(report.predictions, gold, relations)

    out = Path(args.out)
    preds_path = out / "predictions.jsonl"
    with open(preds_path, "w", encoding="utf-8") as fh:
        for p in sorted(report.predictions, key=lambda p: p.key):
            fh.write(p.to_json() + "\n")
    rej_path = out / "rejections.jsonl"
    with open(rej_path, "w", encoding="utf-8") as fh:
        for r in report.rejections:
            fh.write(r.to_json() + "\n")
    summary = {
        "overall": metrics.as_dict(),
        "intra": intra.as_dict(),
        "inter": inter.as_dict(),
        "rejections": report.reason_counts(),
        "aligned_out_of_domain": report.aligned_out_of_domain,
        "missing_responses": missing,
        "ign_reference": "train facts" if train_facts is not None else "none",
    }
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    tsv, png = out / "per_relation.tsv", out / "per_relation.png"
    write_per_relation(rows, tsv, png, relations)
    print(json.dumps({"f1": metrics.f1, "ign_f1": metrics.ign_f1, "precision": metrics.precision,
                      "recall": metrics.recall, "intra_f1": intra.f1, "inter_f1": inter.f1}))
    return [preds_path, rej_path, metrics_path, tsv, png]


def _grid(spec: str) -> list[float]:
    if ":" in spec:
        lo, hi, step = (float(x) for x in spec.split(":"))
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    return sorted(float(x) for x in spec.split(","))


def cmd_sweep_theta(args) -> list[Path]:
    from .evaluation import TrainFactSet, threshold_sweep
    from .parsing_alignment import AlignmentConfig
    from .reporting import write_sweep

    relations = _relations(args)
    gold = _corpus(args.corpus, relations)
    raw, _, _ = _collect_raw(args, index_by_id(gold))
    cfg = AlignmentConfig(args.fuzzy_threshold, None, _embedder(args.embedder))
    train_facts = TrainFactSet.from_corpus(_corpus(args.train_corpus, relations, "--train-corpus")) \
        if args.train_corpus else None
    points = threshold_sweep(raw, gold, relations, _grid(args.grid), cfg, train_facts)
    out = Path(args.out)
    tsv, png = out / "theta_sweep.tsv", out / "theta_sweep.png"
    write_sweep(points, tsv, png)
    best = max(points, key=lambda p: (p.report.f1, -p.theta))
    print(json.dumps({"points": len(points), "best_theta": best.theta, "best_f1": best.report.f1}))
    return [tsv, png]


def cmd_export_ft(args) -> list[Path]:
    from .prompting import PromptConfig, PromptMode, export_finetune_dataset, write_jsonl

    relations = _relations(args)
    docs = _corpus(args.corpus, relations)
    mode = PromptMode(args.mode)
    config = PromptConfig(k=args.k, mode=mode, seed=args.seed)
    proposals = read_proposals(_need(args.proposals, "--proposals"))[1] if args.proposals else None
    records = export_finetune_dataset(docs, relations, config, proposals)
    path = Path(args.out) / f"finetune_{mode.value}.jsonl"
    write_jsonl(records, path)
    print(json.dumps({"records": len(records), "path": str(path)}))
    return [path]


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmrc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lmrc {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file whose keys mirror the long flags")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--relations", help="relation info JSON (id -> display name)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", parents=[common], help="candidate-space statistics")
    p.add_argument("--corpus", nargs="+", required=False, default=[])
    p.add_argument("--format", choices=["tsv", "json"], default="tsv")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-rcp", parents=[common], help="train the pair-candidate classifier")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--encoder", default="stub", help='"stub", or a JSON spec such as '
                   '\'{"kind": "hf", "model_name": "roberta-large"}\'')
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--encoder-lr", type=float, default=3e-5)
    p.add_argument("--classifier-lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--warmup-fraction", type=float, default=0.06)
    p.add_argument("--max-grad-norm", type=float, default=1.0)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--calibrate", action="store_true", help="tune the threshold on dev F1")
    p.set_defaults(func=cmd_train_rcp)

    p = sub.add_parser("propose", parents=[common], help="score pairs and keep likely relation pairs")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--oracle", action="store_true", help="propose exactly the gold relation pairs")
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("run-rc", parents=[common], help="prompt the LLM backend over chunked pairs")
    p.add_argument("--corpus")
    p.add_argument("--proposals")
    p.add_argument("--mode", choices=["relation_classification", "baseline_docre"],
                   default="relation_classification")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--n-shots", type=int, default=0)
    p.add_argument("--fewshot-corpus")
    p.add_argument("--max-prompt-tokens", type=int)
    p.add_argument("--backend", choices=["mock", "http"], default="mock")
    p.add_argument("--mock-drop", type=float, default=0.0)
    p.add_argument("--mock-corrupt", type=float, default=0.0)
    p.add_argument("--mock-canned")
    p.add_argument("--mock-fail", nargs="*", help="request tags the mock fails on")
    p.add_argument("--api-base")
    p.add_argument("--model")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--backoff", type=float, default=1.0)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--rate-limit", type=float, help="requests per second")
    p.set_defaults(func=cmd_run_rc)

    for name, func, helptext in (("score", cmd_score, "align responses and compute metrics"),
                                 ("sweep-theta", cmd_sweep_theta, "F1 across out-of-domain thresholds")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--corpus", help="gold corpus")
        p.add_argument("--requests")
        p.add_argument("--responses")
        p.add_argument("--train-corpus", help="training split for Ign F1")
        p.add_argument("--fuzzy-threshold", type=float, default=80.0)
        p.add_argument("--embedder", default="hashing", help='"hashing" or "sbert[:model]"')
        if name == "score":
            p.add_argument("--theta", type=float, help="enable out-of-domain alignment")
        else:
            p.add_argument("--grid", default="0:1:0.05", help='"lo:hi:step" or comma list')
        p.set_defaults(func=func)

    p = sub.add_parser("export-ft", parents=[common], help="write an instruction-tuning dataset")
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=["relation_classification", "baseline_docre"],
                   default="relation_classification")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--proposals")
    p.set_defaults(func=cmd_export_ft)
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = _need(args.config, "--config file")
        cfg = yaml.safe_load(path.read_text()) or {}
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    out = Path(args.out)
    start = time.monotonic()
    try:
        if args.command != "stats":
            out.mkdir(parents=True, exist_ok=True)
        outputs = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusFormatError, CorpusValidationError) as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageAborted as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ABORT
    if args.command != "stats":
        _update_manifest(out, args.command, args, outputs, time.monotonic() - start)
    return getattr(args, "_exit_code", 0)


if __name__ == "__main__":
    sys.exit(main())
