"""Question-conditioned visual adapter and the general projector.

The general path projects every image patch feature into the language
embedding space with a two-layer MLP.  The task path keeps a bank of K
learnable tokens that, layer by layer, first self-attend together with the
embedded task question and then cross-attend (tokens only) into the image
features; after the last layer the K token states become soft prompts for
the language model.  Disabling the task path reproduces the general-tokens-
only ablation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .attention import (AttentionConfig, AttentionMask, FeedForward, LayerNorm,
                        MultiHeadAttention, init_weight)
from .autograd import ParamStore, ShapeError, Tensor
from .llm import Vocab
from .reasoning import GENERAL_QUESTION, DistortionType

MAX_QUESTION_TOKENS = 32

DEFAULT_QUESTIONS: dict[DistortionType, str] = {
    DistortionType.TEXTUAL: "Is there any textual distortion in the claim?",
    DistortionType.VISUAL: "Is there any visual distortion in the image?",
    DistortionType.CROSS_MODAL: ("Is there any cross-modal inconsistency "
                                 "between the text and the image?"),
    DistortionType.MIXED: ("Is there any textual, visual, or cross-modal "
                           "distortion in this claim?"),
    DistortionType.UNKNOWN: GENERAL_QUESTION,
}


@dataclass(frozen=True)
class TaskQuestion:
    distortion: DistortionType
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("task question text must be non-empty")


class QuestionRegistry:
    """One question template per distortion type; overridable from config."""

    def __init__(self, overrides: dict[str, str] | None = None):
        self._questions = dict(DEFAULT_QUESTIONS)
        for key, text in (overrides or {}).items():
            self._questions[DistortionType(key)] = text
        missing = set(DistortionType) - set(self._questions)
        if missing:
            raise ValueError(f"no question registered for {sorted(m.value for m in missing)}")

    def question_for(self, d: DistortionType) -> TaskQuestion:
        d = DistortionType(d)
        return TaskQuestion(d, self._questions[d])

    def all_questions(self) -> list[TaskQuestion]:
        return [self.question_for(d) for d in DistortionType]


@dataclass(frozen=True)
class QavaConfig:
    num_tokens: int = 32
    num_layers: int = 6
    model_dim: int = 64
    num_heads: int = 4
    feat_dim: int = 64
    llm_dim: int = 64

    def __post_init__(self):
        if self.num_tokens < 1 or self.num_layers < 1:
            raise ValueError("num_tokens and num_layers must be positive")


class GeneralProjector:
    """Two affine layers with a nonlinearity, feat_dim -> llm_dim, group "projector"."""

    def __init__(self, store: ParamStore, feat_dim: int, llm_dim: int,
                 rng: np.random.Generator, dtype: np.dtype, prefix: str = "projector"):
        self.feat_dim, self.llm_dim = feat_dim, llm_dim
        self.w1 = store.add(f"{prefix}.w1", init_weight(rng, (feat_dim, llm_dim), dtype),
                            "projector")
        self.b1 = store.add(f"{prefix}.b1", np.zeros(llm_dim, dtype=dtype), "projector")
        self.w2 = store.add(f"{prefix}.w2", init_weight(rng, (llm_dim, llm_dim), dtype),
                            "projector")
        self.b2 = store.add(f"{prefix}.b2", np.zeros(llm_dim, dtype=dtype), "projector")

    def project(self, features: Tensor) -> Tensor:
        """Position-wise projection of [n, feat_dim] into [n, llm_dim]."""
        if features.shape[-1] != self.feat_dim:
            raise ShapeError(f"feature dim {features.shape[-1]} != {self.feat_dim}")
        h = ag.gelu(ag.linear(features, self.w1.tensor, self.b1.tensor))
        return ag.linear(h, self.w2.tensor, self.b2.tensor)


class _QavaLayer:
    """One adapter layer: joint self-attention, token-only cross, shared FFN."""

    def __init__(self, store: ParamStore, prefix: str, acfg: AttentionConfig,
                 rng: np.random.Generator, dtype: np.dtype):
        # residual projections keep their random init: the adapter must be
        # question- and image-sensitive from the first forward pass
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self", acfg, rng,
                                            "qava", dtype, zero_out=False)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", acfg.model_dim, "qava", dtype)
        self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross", acfg, rng,
                                             "qava", dtype, zero_out=False)
        self.lnx = LayerNorm(store, f"{prefix}.lnx", acfg.model_dim, "qava", dtype)
        self.ffn = FeedForward(store, f"{prefix}.ffn", acfg.model_dim, rng,
                               "qava", dtype, zero_out=False)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", acfg.model_dim, "qava", dtype)

    def __call__(self, x: Tensor, k: int, kv: Tensor) -> Tensor:
        total = x.shape[0]
        h = self.ln1(x)
        x = ag.add(x, self.self_attn(h, h, AttentionMask.full(total, total)))
        tokens = ag.slice_axis0(x, 0, k)
        rest = ag.slice_axis0(x, k, total)
        ctx = self.cross_attn(self.lnx(tokens), kv,
                              AttentionMask.full(k, kv.shape[0]))
        x = ag.concat([ag.add(tokens, ctx), rest], axis=0)
        return ag.add(x, self.ffn(self.ln2(x)))


class QavaAdapter:
    """K learnable tokens conditioned on a task question and image features."""

    def __init__(self, store: ParamStore, cfg: QavaConfig, vocab: Vocab,
                 rng: np.random.Generator, dtype: np.dtype, prefix: str = "qava"):
        self.cfg = cfg
        self.vocab = vocab
        self.dtype = dtype
        d = cfg.model_dim
        self.tokens = store.add(f"{prefix}.tokens",
                                init_weight(rng, (cfg.num_tokens, d), dtype), "qava")
        self.q_emb = store.add(f"{prefix}.q_emb",
                               init_weight(rng, (len(vocab), d), dtype), "qava")
        self.q_pos = store.add(f"{prefix}.q_pos",
                               init_weight(rng, (MAX_QUESTION_TOKENS, d), dtype), "qava")
        self.kv_w = store.add(f"{prefix}.kv_w",
                              init_weight(rng, (cfg.feat_dim, d), dtype), "qava")
        self.kv_b = store.add(f"{prefix}.kv_b", np.zeros(d, dtype=dtype), "qava")
        acfg = AttentionConfig(d, cfg.num_heads)
        self.layers = [_QavaLayer(store, f"{prefix}.layer{i}", acfg, rng, dtype)
                       for i in range(cfg.num_layers)]
        self.out_w = store.add(f"{prefix}.out_w",
                               init_weight(rng, (d, cfg.llm_dim), dtype), "qava")
        self.out_b = store.add(f"{prefix}.out_b",
                               np.zeros(cfg.llm_dim, dtype=dtype), "qava")

    def embed_question(self, q: TaskQuestion) -> Tensor:
        """Shared tokenizer, adapter-local embedding and position tables."""
        ids = self.vocab.encode(q.text)
        if not ids:
            raise ValueError("task question tokenized to nothing")
        if len(ids) > MAX_QUESTION_TOKENS:
            raise ShapeError(f"question length {len(ids)} exceeds "
                             f"{MAX_QUESTION_TOKENS} tokens")
        emb = ag.embed_lookup(self.q_emb.tensor, np.asarray(ids))
        return ag.add(emb, ag.slice_axis0(self.q_pos.tensor, 0, len(ids)))

    def forward(self, image_features: Tensor, q: TaskQuestion) -> Tensor:
        """Task-oriented soft prompts [K, llm_dim]."""
        if image_features.shape[0] < 1:
            raise ShapeError("empty image features")
        if image_features.shape[1] != self.cfg.feat_dim:
            raise ShapeError(f"feature dim {image_features.shape[1]} != "
                             f"{self.cfg.feat_dim}")
        kv = ag.linear(image_features, self.kv_w.tensor, self.kv_b.tensor)
        x = ag.concat([self.tokens.tensor, self.embed_question(q)], axis=0)
        for layer in self.layers:
            x = layer(x, self.cfg.num_tokens, kv)
        task = ag.slice_axis0(x, 0, self.cfg.num_tokens)
        return ag.linear(task, self.out_w.tensor, self.out_b.tensor)
