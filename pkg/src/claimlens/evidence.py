"""Evidence retrieval and the corruption injector for robustness studies.

Direct evidence answers "where else does this claim appear": the claim text
queries an image corpus and returns the stored captions of the best hits.
Inverse evidence runs the opposite direction: the claim image queries a text
corpus.  Both sides share one embedding space so cosine scores are
comparable: hashed word unigram/bigram counts for text, mean-pooled encoder
features for images, each L2-normalized.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMBED_DIM = 64
EVIDENCE_KINDS = ("direct", "inverse", "context")
CORRUPT_PROPORTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.md5(text.encode("utf-8")).digest()[:8], "little")


def _text_words(text: str) -> list[str]:
    return [w for w in "".join(c.lower() if c.isalnum() else " " for c in text).split() if w]


def embed_text(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Hashed unigram+bigram count vector, unit norm."""
    words = _text_words(text)
    if not words:
        raise ValueError("cannot embed empty text")
    v = np.zeros(dim, dtype=np.float64)
    grams = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
    for g in grams:
        h = _stable_hash(g)
        v[h % dim] += 1.0 if (h >> 32) % 2 == 0 else -1.0
    n = np.linalg.norm(v)
    if n == 0.0:  # all signs cancelled; fall back to a deterministic basis vector
        v[_stable_hash(words[0]) % dim] = 1.0
        n = 1.0
    return v / n


def embed_image_features(features: np.ndarray, dim: int = EMBED_DIM) -> np.ndarray:
    """Mean-pool patch features and L2-normalize."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.size == 0:
        raise ValueError(f"feature matrix must be non-empty 2-d, got {features.shape}")
    if features.shape[1] != dim:
        raise ValueError(f"feature dim {features.shape[1]} != embed dim {dim}")
    v = features.mean(axis=0)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero-norm image embedding")
    return v / n


@dataclass(frozen=True)
class EvidenceDoc:
    id: str
    kind: str  # direct | inverse | context
    text: str
    embedding: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in EVIDENCE_KINDS:
            raise ValueError(f"bad evidence kind {self.kind!r}")
        if not self.text:
            raise ValueError("evidence text must be non-empty")
        emb = np.asarray(self.embedding, dtype=np.float64)
        n = np.linalg.norm(emb)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"evidence embedding not unit norm (|v|={n:.6f})")
        emb.flags.writeable = False
        object.__setattr__(self, "embedding", emb)


def make_doc(doc_id: str, kind: str, text: str) -> EvidenceDoc:
    return EvidenceDoc(doc_id, kind, text, embed_text(text))


@dataclass
class EvidenceBundle:
    direct: list[EvidenceDoc] = field(default_factory=list)
    inverse: list[EvidenceDoc] = field(default_factory=list)
    context: list[EvidenceDoc] = field(default_factory=list)

    def lists(self) -> dict[str, list[EvidenceDoc]]:
        return {"direct": self.direct, "inverse": self.inverse, "context": self.context}


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    kind: str  # image | text
    text: str  # caption for image entries, body for text entries
    embedding: np.ndarray = field(repr=False)


class CorpusIndex:
    """Immutable local stand-in for web retrieval; embeddings precomputed."""

    def __init__(self, entries: list[CorpusEntry]):
        self.image_entries = [e for e in entries if e.kind == "image"]
        self.text_entries = [e for e in entries if e.kind == "text"]
        bad = [e.id for e in entries if e.kind not in ("image", "text")]
        if bad:
            raise ValueError(f"corpus entries with unknown kind: {bad}")

    @staticmethod
    def load_jsonl(path: str | Path) -> "CorpusIndex":
        """Corpus file: one JSON object per line with keys id, kind
        ("image"|"text"), text, and image_features for image entries."""
        entries = []
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                if row["kind"] == "image":
                    emb = embed_image_features(np.asarray(row["image_features"]))
                else:
                    emb = embed_text(row["text"])
                entries.append(CorpusEntry(str(row["id"]), row["kind"], row["text"], emb))
            except KeyError as e:
                raise ValueError(f"{path}:{line_no}: missing field {e}") from e
        return CorpusIndex(entries)


def _top_by_cosine(query: np.ndarray, entries: list[CorpusEntry], count: int,
                   out_kind: str) -> list[EvidenceDoc]:
    if count < 0:
        raise ValueError("retrieval count must be >= 0")
    scored = sorted(((float(e.embedding @ query), e) for e in entries),
                    key=lambda se: (-se[0], se[1].id))
    return [EvidenceDoc(e.id, out_kind, e.text, e.embedding)
            for _, e in scored[:count]]


def retrieve_direct(claim_text: str, index: CorpusIndex, m: int) -> list[EvidenceDoc]:
    """Top-m image-corpus hits for the claim text, surfaced as their captions."""
    return _top_by_cosine(embed_text(claim_text), index.image_entries, m, "direct")


def retrieve_inverse(claim_image_features: np.ndarray, index: CorpusIndex,
                     n: int) -> list[EvidenceDoc]:
    """Top-n text-corpus hits for the claim image."""
    return _top_by_cosine(embed_image_features(claim_image_features),
                          index.text_entries, n, "inverse")


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5))


def corrupt(bundle: EvidenceBundle, proportion: float, pool: list[str],
            seed: int) -> EvidenceBundle:
    """Replace round(proportion * len) items per evidence list with pool texts.

    Positions and replacement texts are prefixes of per-list seeded
    permutations, so for a fixed seed a higher proportion corrupts a strict
    superset of what a lower one does.  Rounding is half-away-from-zero.
    """
    if proportion not in CORRUPT_PROPORTIONS:
        raise ValueError(f"proportion must be one of {CORRUPT_PROPORTIONS}")
    originals = {d.text for lst in bundle.lists().values() for d in lst}
    if originals & set(pool):
        raise ValueError("pool overlaps bundle sources")
    out = {}
    for kind, docs in bundle.lists().items():
        docs = list(docs)
        r = _round_half_away(proportion * len(docs))
        if r > len(pool):
            raise ValueError(f"pool too small: need {r} texts for {kind} list")
        if r:
            rng_pos = np.random.default_rng([seed, _stable_hash(kind), 1])
            rng_pool = np.random.default_rng([seed, _stable_hash(kind), 2])
            positions = rng_pos.permutation(len(docs))[:r]
            picks = rng_pool.permutation(len(pool))[:r]
            for pos, pick in zip(positions, picks):
                text = pool[int(pick)]
                docs[int(pos)] = EvidenceDoc(f"pool:{int(pick)}", kind, text,
                                             embed_text(text))
        out[kind] = docs
    return EvidenceBundle(out["direct"], out["inverse"], out["context"])
