"""RCP model: document scoring, candidate proposal, training and checkpoints."""

from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import torch
from torch import nn

from ..corpus import Document, EntityPair, gold_pairs
from .encoders import build_encoder
from .markers import mark_entities
from .pooling import PROB_EPS, RCPHead, batch_localized_context, bce_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RCPConfig:
    na_threshold: float = 0.5
    encoder_lr: float = 3e-5
    classifier_lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 4
    warmup_fraction: float = 0.06
    max_grad_norm: float = 1.0
    weight_decay: float = 0.01
    early_stopping_metric: str = "dev_f1"
    patience: int | None = None
    max_steps: int | None = None
    eval_every: int | None = None  # steps; None evaluates once per epoch
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.na_threshold < 1.0:
            raise ValueError(f"na_threshold must lie in (0, 1), got {self.na_threshold}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.early_stopping_metric != "dev_f1":
            raise ValueError("only dev_f1 early stopping is supported")


@dataclass
class DocumentScores:
    doc_id: str
    pairs: list[tuple[int, int]]
    probabilities: torch.Tensor  # P(NA) per pair, P=1 for unscorable pairs
    scorable: torch.Tensor  # bool per pair
    overflow: bool = False
    degenerate_contexts: int = 0


class RCPModel(nn.Module):
    """Encoder plus classification head. ``threshold`` is the NA cutoff."""

    def __init__(self, encoder: nn.Module, head: RCPHead | None = None, threshold: float = 0.5):
        super().__init__()
        self.encoder = encoder
        self.head = head if head is not None else RCPHead(encoder.hidden_dim)
        self.threshold = threshold

    def score_document(self, doc: Document) -> DocumentScores:
        marked = mark_entities(doc, self.encoder.max_length)
        pairs = [(h, t) for h in range(doc.n_entities) for t in range(doc.n_entities) if h != t]
        dtype = self.head.W_s.dtype
        probs = torch.ones(len(pairs), dtype=dtype)
        scorable = torch.zeros(len(pairs), dtype=torch.bool)
        if not pairs:
            return DocumentScores(doc.doc_id, pairs, probs, scorable, marked.overflow)

        enc = self.encoder.encode(marked.tokens)
        H = enc.H.to(dtype)
        A = enc.A.to(dtype)
        ent_pos = [[enc.positions[p] for p in ps if enc.positions[p] >= 0]
                   for ps in marked.entity_marker_pos]
        live = [i for i, ps in enumerate(ent_pos) if ps]
        slot = {e: i for i, e in enumerate(live)}
        if live:
            h_ent = torch.stack([torch.logsumexp(H[ent_pos[e]], dim=0) for e in live])
            a_ent = torch.stack([A[:, ent_pos[e], :].mean(dim=1) for e in live])
        idx = [i for i, (h, t) in enumerate(pairs) if h in slot and t in slot]
        degenerate = 0
        if idx:
            hs = torch.tensor([slot[pairs[i][0]] for i in idx])
            ts = torch.tensor([slot[pairs[i][1]] for i in idx])
            c, degen = batch_localized_context(H, a_ent[hs], a_ent[ts])
            degenerate = int(degen.sum())
            p = self.head(h_ent[hs], h_ent[ts], c)
            index = torch.tensor(idx)
            probs = probs.index_put((index,), p)
            scorable[index] = True
        if len(idx) < len(pairs):
            logger.debug("%s: %d pairs unscorable after truncation", doc.doc_id, len(pairs) - len(idx))
        return DocumentScores(doc.doc_id, pairs, probs, scorable, marked.overflow, degenerate)

    @torch.no_grad()
    def propose(self, doc: Document, threshold: float | None = None) -> list[EntityPair]:
        tau = self.threshold if threshold is None else threshold
        scores = self.score_document(doc)
        probs = scores.probabilities.clamp(PROB_EPS, 1 - PROB_EPS)
        out = []
        for (h, t), p, ok in zip(scores.pairs, probs.tolist(), scores.scorable.tolist()):
            if ok and p < tau:
                out.append(EntityPair(doc.doc_id, h, t, p))
        return out


def propose_candidates(doc: Document, model: RCPModel, threshold: float | None = None) -> list[EntityPair]:
    """Pairs whose NA probability is strictly below the threshold."""
    was_training = model.training
    model.eval()
    try:
        return model.propose(doc, threshold)
    finally:
        model.train(was_training)


# --------------------------------------------------------------------------
# binary metrics used for model selection


def binary_prf(predicted: set, gold: set) -> tuple[float, float, float]:
    tp = len(predicted & gold)
    p = tp / len(predicted) if predicted else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@torch.no_grad()
def evaluate_rcp(model: RCPModel, corpus: Sequence[Document], threshold: float | None = None):
    was_training = model.training
    model.eval()
    predicted, gold = set(), set()
    for doc in corpus:
        predicted.update((doc.doc_id, p.head, p.tail) for p in model.propose(doc, threshold))
        gold.update((doc.doc_id, h, t) for h, t in gold_pairs(doc))
    model.train(was_training)
    return binary_prf(predicted, gold)


@torch.no_grad()
def calibrate_threshold(model: RCPModel, dev: Sequence[Document],
                        grid: Iterable[float] | None = None) -> tuple[float, float]:
    """Threshold on ``grid`` maximizing dev binary F1 (lowest wins ties)."""
    grid = list(grid) if grid is not None else [round(0.05 * i, 2) for i in range(1, 20)]
    model.eval()
    scored = []
    for doc in dev:
        s = model.score_document(doc)
        gp = gold_pairs(doc)
        for pair, p, ok in zip(s.pairs, s.probabilities.tolist(), s.scorable.tolist()):
            scored.append((p if ok else math.inf, pair in gp))
    total_gold = sum(g for _, g in scored)
    best = (grid[0], -1.0)
    for tau in grid:
        sel = [g for p, g in scored if p < tau]
        tp = sum(sel)
        prec = tp / len(sel) if sel else 0.0
        rec = tp / total_gold if total_gold else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        if f > best[1]:
            best = (tau, f)
    return best


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: RCPModel
    history: list[dict[str, Any]] = field(default_factory=list)
    best_dev_f1: float | None = None
    best_step: int | None = None
    steps: int = 0


def _document_loss(model: RCPModel, doc: Document) -> tuple[torch.Tensor, int]:
    scores = model.score_document(doc)
    mask = scores.scorable
    n = int(mask.sum())
    if n == 0:
        return scores.probabilities.new_zeros(()), 0
    gp = gold_pairs(doc)
    is_na = torch.tensor([pair not in gp for pair, ok in zip(scores.pairs, mask.tolist()) if ok],
                         dtype=scores.probabilities.dtype)
    return bce_loss(scores.probabilities[mask], is_na), n


def _linear_schedule(warmup: int, total: int):
    def factor(step: int) -> float:
        if warmup and step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total - step) / max(1, total - warmup))
    return factor


def train_rcp(train: Sequence[Document], dev: Sequence[Document], model: RCPModel,
              config: RCPConfig) -> TrainResult:
    """Fit encoder and head with AdamW, warmup, clipping and dev-F1 model selection."""
    if not train:
        raise ValueError("train_rcp needs a non-empty training corpus")
    model.threshold = config.na_threshold
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    result = TrainResult(model)
    if total == 0:
        return result

    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    optimizer = torch.optim.AdamW(
        [{"params": list(model.encoder.parameters()), "lr": config.encoder_lr},
         {"params": list(model.head.parameters()), "lr": config.classifier_lr}],
        weight_decay=config.weight_decay,
    )
    warmup = int(round(config.warmup_fraction * total))
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _linear_schedule(warmup, total))

    best_state = copy.deepcopy(model.state_dict())
    best_f1 = -1.0
    stale = 0
    step = 0
    order = list(range(len(train)))
    model.train()
    while step < total:
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            if step >= total:
                break
            batch = [train[i] for i in order[start:start + config.batch_size]]
            losses, count = [], 0
            for doc in batch:
                loss, n = _document_loss(model, doc)
                losses.append(loss)
                count += n
            if count == 0:
                step += 1
                scheduler.step()
                continue
            loss = torch.stack(losses).sum() / count
            if not torch.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss {loss.item()} at step {step} on documents "
                    f"{[d.doc_id for d in batch]}")
            optimizer.zero_grad()
            loss.backward()
            grad_norm = nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optimizer.step()
            scheduler.step()
            step += 1
            record: dict[str, Any] = {"step": step, "loss": loss.item(), "grad_norm": float(grad_norm),
                                      "lr_encoder": scheduler.get_last_lr()[0]}
            at_epoch_end = step % steps_per_epoch == 0 or step == total
            due = (step % config.eval_every == 0 or step == total) if config.eval_every else at_epoch_end
            if due and dev:
                p, r, f = evaluate_rcp(model, dev)
                record.update(dev_precision=p, dev_recall=r, dev_f1=f)
                if f > best_f1:
                    best_f1, stale = f, 0
                    best_state = copy.deepcopy(model.state_dict())
                    result.best_step = step
                else:
                    stale += 1
            result.history.append(record)
            if config.patience is not None and stale > config.patience:
                logger.info("early stop at step %d (best dev F1 %.4f)", step, best_f1)
                total = step
                break
    if dev:
        model.load_state_dict(best_state)
        result.best_dev_f1 = best_f1
    result.steps = step
    model.eval()
    return result


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: RCPModel, config: RCPConfig | None = None,
                    extra: dict[str, Any] | None = None) -> None:
    spec = model.encoder.spec()
    encoder_state = model.encoder.state_dict() if spec.get("kind") == "stub" else None
    torch.save({
        "version": CHECKPOINT_VERSION,
        "encoder_spec": spec,
        "encoder_state": encoder_state,
        "hidden_dim": model.head.hidden_dim,
        "head_state": model.head.state_dict(),
        "threshold": model.threshold,
        "config": asdict(config) if config is not None else None,
        "extra": extra or {},
    }, path)


def load_checkpoint(path: str | Path, encoder: nn.Module | None = None) -> tuple[RCPModel, dict[str, Any]]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    if encoder is None:
        encoder = build_encoder(blob["encoder_spec"])
        if blob["encoder_state"] is not None:
            encoder.load_state_dict(blob["encoder_state"])
    head = RCPHead(blob["hidden_dim"])
    head.load_state_dict(blob["head_state"])
    model = RCPModel(encoder, head, blob["threshold"])
    model.eval()
    return model, blob
