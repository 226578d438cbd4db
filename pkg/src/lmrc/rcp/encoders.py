"""Encoder providers.

An encoder maps a marker-augmented token list to contextual embeddings
``H`` (l x d) and last-layer attentions ``A`` (heads x l x l). ``positions``
maps each input token to its encoder position (-1 when truncated away).
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from typing import Any, Protocol, Sequence, runtime_checkable

import torch
from torch import nn


@dataclass
class EncodedDocument:
    H: torch.Tensor
    A: torch.Tensor
    positions: list[int]

    @property
    def length(self) -> int:
        return self.H.shape[0]


@runtime_checkable
class EncoderProvider(Protocol):
    max_length: int
    hidden_dim: int
    num_heads: int

    def encode(self, tokens: Sequence[str]) -> EncodedDocument: ...

    def spec(self) -> dict[str, Any]: ...


def check_encoded(enc: EncodedDocument, hidden_dim: int, num_heads: int, atol: float = 1e-4) -> None:
    """Assert the provider contract: shapes match and attention rows are distributions."""
    l = enc.H.shape[0]
    if enc.H.shape != (l, hidden_dim):
        raise ValueError(f"H has shape {tuple(enc.H.shape)}, expected ({l}, {hidden_dim})")
    if enc.A.shape != (num_heads, l, l):
        raise ValueError(f"A has shape {tuple(enc.A.shape)}, expected ({num_heads}, {l}, {l})")
    if (enc.A < 0).any():
        raise ValueError("attention has negative entries")
    rows = enc.A.sum(dim=-1)
    if not torch.allclose(rows, torch.ones_like(rows), atol=atol):
        raise ValueError("attention rows do not sum to 1")


class StubEncoder(nn.Module):
    """Small deterministic contextual encoder for tests and desk-scale runs.

    Tokens are hashed into a fixed bucket table, mixed over a symmetric window,
    and attended with scaled dot-product heads. Every weight is trainable.
    """

    def __init__(self, hidden_dim: int = 16, num_heads: int = 2, vocab_buckets: int = 2048,
                 window: int = 1, max_length: int = 512, seed: int = 0):
        super().__init__()
        if hidden_dim % num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.vocab_buckets = vocab_buckets
        self.window = window
        self.max_length = max_length
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.embed = nn.Parameter(torch.randn(vocab_buckets, hidden_dim, generator=gen))
        width = 2 * window + 1
        self.mix = nn.Parameter(torch.randn(width, hidden_dim, hidden_dim, generator=gen)
                                / math.sqrt(width * hidden_dim))
        self.query = nn.Parameter(torch.randn(hidden_dim, hidden_dim, generator=gen) / math.sqrt(hidden_dim))
        self.key = nn.Parameter(torch.randn(hidden_dim, hidden_dim, generator=gen) / math.sqrt(hidden_dim))

    def token_ids(self, tokens: Sequence[str]) -> torch.Tensor:
        return torch.tensor([zlib.crc32(t.encode("utf-8")) % self.vocab_buckets for t in tokens],
                            dtype=torch.long)

    def encode(self, tokens: Sequence[str]) -> EncodedDocument:
        tokens = list(tokens)[: self.max_length]
        l = len(tokens)
        E = self.embed[self.token_ids(tokens)]
        padded = nn.functional.pad(E, (0, 0, self.window, self.window))
        mixed = sum(padded[k:k + l] @ self.mix[k] for k in range(2 * self.window + 1))
        H = torch.tanh(mixed)
        dh = self.hidden_dim // self.num_heads
        q = (H @ self.query).view(l, self.num_heads, dh).transpose(0, 1)
        k = (H @ self.key).view(l, self.num_heads, dh).transpose(0, 1)
        A = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(dh), dim=-1)
        return EncodedDocument(H, A, list(range(l)))

    def forward(self, tokens):
        return self.encode(tokens)

    def spec(self) -> dict[str, Any]:
        return {"kind": "stub", "hidden_dim": self.hidden_dim, "num_heads": self.num_heads,
                "vocab_buckets": self.vocab_buckets, "window": self.window,
                "max_length": self.max_length, "seed": self.seed}


class HFEncoder(nn.Module):
    """Adapter over a Hugging Face encoder that exposes attentions.

    Words are split into subwords; each word maps to its first subword. Input
    beyond ``max_length`` subwords (special tokens included) is truncated.
    """

    def __init__(self, model_name: str | None = None, model=None, tokenizer=None,
                 max_length: int = 512):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        self.model_name = model_name
        self.tokenizer = tokenizer or AutoTokenizer.from_pretrained(model_name, add_prefix_space=True)
        self.model = model or AutoModel.from_pretrained(model_name, attn_implementation="eager")
        cfg = self.model.config
        self.hidden_dim = cfg.hidden_size
        self.num_heads = cfg.num_attention_heads
        self.max_length = min(max_length, getattr(cfg, "max_position_embeddings", max_length))

    def encode(self, tokens: Sequence[str]) -> EncodedDocument:
        tok = self.tokenizer
        ids: list[int] = []
        positions: list[int] = []
        budget = self.max_length - 2
        for word in tokens:
            pieces = tok.encode(word, add_special_tokens=False) or [tok.unk_token_id]
            if len(ids) + len(pieces) > budget:
                positions.append(-1)
                budget = len(ids)  # later words are dropped too
                continue
            positions.append(len(ids) + 1)
            ids.extend(pieces)
        cls = tok.cls_token_id if tok.cls_token_id is not None else tok.bos_token_id
        sep = tok.sep_token_id if tok.sep_token_id is not None else tok.eos_token_id
        input_ids = torch.tensor([[cls, *ids, sep]])
        out = self.model(input_ids=input_ids, attention_mask=torch.ones_like(input_ids),
                         output_attentions=True)
        return EncodedDocument(out.last_hidden_state[0], out.attentions[-1][0], positions)

    def forward(self, tokens):
        return self.encode(tokens)

    def spec(self) -> dict[str, Any]:
        return {"kind": "hf", "model_name": self.model_name, "max_length": self.max_length}


def build_encoder(spec: dict[str, Any] | str) -> nn.Module:
    """Construct an encoder from its spec dict (or JSON string)."""
    if isinstance(spec, str):
        spec = json.loads(spec) if spec.strip().startswith("{") else {"kind": spec}
    spec = dict(spec)
    kind = spec.pop("kind", "stub")
    if kind == "stub":
        return StubEncoder(**spec)
    if kind == "hf":
        return HFEncoder(**spec)
    raise ValueError(f"unknown encoder kind {kind!r}")
