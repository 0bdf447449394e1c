"""Word-level decoder-only language model with soft visual prefixes.

The model consumes an optional [P, llm_dim] prefix of visual tokens followed
by embedded language ids, applies a causal mask over the whole sequence, and
emits logits per position.  Training loss covers response-span positions
only; decoding is greedy with ties broken toward the lowest token id.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, AttentionMask, LayerNorm, TransformerLayer, init_weight
from .autograd import ParamStore, ShapeError, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
VERDICT_TOKENS = ("Real", "Fake")

_WORD_RE = re.compile(r"[A-Za-z]+|[0-9]+|[^\sA-Za-z0-9]")


def split_words(text: str) -> list[str]:
    """Surface tokens: words, digit runs, single punctuation marks.

    Everything is lowercased except the literal verdict tokens, which stay
    case-sensitive so the end-of-chain protocol survives tokenization.
    """
    out = []
    for m in _WORD_RE.finditer(text):
        w = m.group(0)
        out.append(w if w in VERDICT_TOKENS else w.lower())
    return out


class Vocab:
    """Token/id bijection with fixed reserved ids first."""

    def __init__(self, tokens: list[str]):
        for t in tokens:
            if t in RESERVED:
                raise ValueError(f"token {t!r} collides with a reserved symbol")
        self.id_to_token: list[str] = list(RESERVED) + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @staticmethod
    def build(texts: list[str]) -> "Vocab":
        """Collect the word-level vocabulary of a corpus, sorted for determinism."""
        seen = set()
        for text in texts:
            seen.update(split_words(text))
        return Vocab(sorted(seen))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, UNK) for w in split_words(text)]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids
                        if i not in (PAD, BOS, EOS))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError(f"{path}: reserved ids missing or reordered")
        return Vocab(lines[4:])

    def to_text(self) -> str:
        return "\n".join(self.id_to_token) + "\n"

    @staticmethod
    def from_text(text: str) -> "Vocab":
        lines = text.splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError("reserved ids missing or reordered in vocab text")
        return Vocab(lines[4:])


@dataclass(frozen=True)
class LmConfig:
    llm_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_seq: int = 512
    vocab_size: int = 0  # filled from the vocabulary at model build time


class DecoderLm:
    """Causal transformer over [visual prefix ; language embeddings]."""

    def __init__(self, store: ParamStore, cfg: LmConfig,
                 rng: np.random.Generator, dtype: np.dtype, prefix: str = "lm"):
        if cfg.vocab_size < len(RESERVED):
            raise ValueError(f"vocab_size {cfg.vocab_size} too small")
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.llm_dim
        self.tok_emb = store.add(f"{prefix}.tok_emb",
                                 init_weight(rng, (cfg.vocab_size, d), dtype), "llm")
        self.pos_emb = store.add(f"{prefix}.pos_emb",
                                 init_weight(rng, (cfg.max_seq, d), dtype), "llm")
        acfg = AttentionConfig(d, cfg.num_heads)
        # live output projections: zero-init identity layers block gradient
        # flow into q/k/v and stall verdict learning on short desk runs
        self.layers = [TransformerLayer(store, f"{prefix}.layer{i}", acfg, rng,
                                        "llm", dtype, zero_out=False)
                       for i in range(cfg.num_layers)]
        self.ln_f = LayerNorm(store, f"{prefix}.ln_f", d, "llm", dtype)
        self.unembed = store.add(f"{prefix}.unembed",
                                 init_weight(rng, (d, cfg.vocab_size), dtype), "llm")

    def lm_forward(self, prefix: Tensor | None, ids: list[int] | np.ndarray) -> Tensor:
        """Logits [P+L, vocab] under a causal mask over the full sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        p = 0 if prefix is None else prefix.shape[0]
        total = p + len(ids)
        if total == 0:
            raise ShapeError("empty sequence")
        if total > self.cfg.max_seq:
            raise ShapeError(f"sequence length {total} exceeds max_seq {self.cfg.max_seq}")
        if prefix is not None and prefix.shape[1] != self.cfg.llm_dim:
            raise ShapeError(f"prefix dim {prefix.shape[1]} != llm_dim {self.cfg.llm_dim}")
        parts = []
        if prefix is not None:
            parts.append(prefix)
        if len(ids):
            parts.append(ag.embed_lookup(self.tok_emb.tensor, ids))
        x = parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)
        x = ag.add(x, ag.slice_axis0(self.pos_emb.tensor, 0, total))
        mask = AttentionMask.causal(total)
        for layer in self.layers:
            x = layer(x, mask)
        return ag.matmul(self.ln_f(x), self.unembed.tensor)

    def response_loss(self, prefix: Tensor | None, ids: list[int] | np.ndarray,
                      response_mask: np.ndarray) -> Tensor:
        """Mean cross-entropy predicting exactly the masked language positions.

        Row P+t-1 of the logits predicts language position t; positions with
        response_mask False (prompt, padding) contribute nothing.
        """
        ids = np.asarray(ids, dtype=np.int64)
        response_mask = np.asarray(response_mask, dtype=bool)
        if response_mask.shape != ids.shape:
            raise ShapeError("response mask shape differs from ids")
        p = 0 if prefix is None else prefix.shape[0]
        logits = self.lm_forward(prefix, ids)
        rows = p + len(ids)
        targets = np.zeros(rows, dtype=np.int64)
        row_mask = np.zeros(rows, dtype=bool)
        for r in range(rows - 1):
            t = r + 1 - p
            if 0 <= t < len(ids):
                targets[r] = ids[t]
                row_mask[r] = response_mask[t]
        if not row_mask.any():
            raise ShapeError("no response positions to train on")
        return ag.cross_entropy(logits, targets, row_mask)

    def greedy_decode(self, prefix: Tensor | None, prompt_ids: list[int],
                      max_new: int) -> list[int]:
        """Argmax decoding; stops at EOS or budget.  np.argmax takes the
        first maximum, which implements lowest-id tie-breaking."""
        if max_new < 1:
            raise ValueError("decode budget must be >= 1")
        seq = list(prompt_ids)
        out: list[int] = []
        for _ in range(max_new):
            logits = self.lm_forward(prefix, seq)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            if nxt == EOS:
                break
            seq.append(nxt)
        return out
