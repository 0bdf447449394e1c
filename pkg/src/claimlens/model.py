"""Full claim-verification model: vision encoder, both visual token paths,
and the language model, sharing one parameter store.

The language prefix is [general tokens ; task tokens]: every patch feature
projected by the general MLP, followed by the K question-conditioned tokens.
Building with use_qava=False skips the task path entirely, which removes
exactly the "qava" parameter group from the model.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, ShapeError, Tensor, _dtype_for
from .llm import BOS, EOS, DecoderLm, LmConfig, Vocab
from .qava import GeneralProjector, QavaAdapter, QavaConfig, QuestionRegistry
from .reasoning import DistortionType
from .vision import ImageInput, VisionConfig, VisionEncoder


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionConfig
    qava: QavaConfig
    lm: LmConfig
    use_qava: bool = True

    def __post_init__(self):
        if self.vision.feat_dim != self.qava.feat_dim:
            raise ValueError("vision feat_dim and qava feat_dim differ")
        if self.qava.llm_dim != self.lm.llm_dim:
            raise ValueError("qava llm_dim and lm llm_dim differ")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        raw = json.loads(text)
        return ModelConfig(vision=VisionConfig(**raw["vision"]),
                           qava=QavaConfig(**raw["qava"]),
                           lm=LmConfig(**raw["lm"]),
                           use_qava=raw["use_qava"])


def desk_config(vocab_size: int, num_tokens: int = 32, num_layers: int = 6,
                use_qava: bool = True) -> ModelConfig:
    """Default desk-scale geometry; adapter K and depth stay adjustable."""
    return ModelConfig(
        vision=VisionConfig(),
        qava=QavaConfig(num_tokens=num_tokens, num_layers=num_layers),
        lm=LmConfig(vocab_size=vocab_size),
        use_qava=use_qava,
    )


@dataclass(frozen=True)
class TrainingExample:
    prompt: str
    response: str
    image: ImageInput
    distortion: DistortionType


class ClaimVerifier:
    """One parameter store binding all component modules."""

    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0,
                 precision: str = "double",
                 questions: QuestionRegistry | None = None):
        if config.lm.vocab_size != len(vocab):
            config = ModelConfig(config.vision, config.qava,
                                 LmConfig(config.lm.llm_dim, config.lm.num_layers,
                                          config.lm.num_heads, config.lm.max_seq,
                                          len(vocab)),
                                 config.use_qava)
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.precision = precision
        self.questions = questions or QuestionRegistry()
        dtype = _dtype_for(precision)
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        # build order is part of the determinism contract: vision, projector,
        # adapter, language model, each consuming the stream in sequence
        self.vision = VisionEncoder(self.store, config.vision, rng, dtype)
        self.projector = GeneralProjector(self.store, config.vision.feat_dim,
                                          config.lm.llm_dim, rng, dtype)
        self.qava = (QavaAdapter(self.store, config.qava, vocab, rng, dtype)
                     if config.use_qava else None)
        self.lm = DecoderLm(self.store, self.config.lm, rng, dtype)

    def encode_prefix(self, image: ImageInput, d: DistortionType) -> Tensor:
        """[general ; task] soft prompt for one claim image."""
        feats = self.vision.encode(image)
        parts = [self.projector.project(feats)]
        if self.qava is not None:
            parts.append(self.qava.forward(feats, self.questions.question_for(d)))
        return parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)

    def prefix_length(self, image: ImageInput) -> int:
        n = self.vision.num_patches(image)
        return n + (self.config.qava.num_tokens if self.qava is not None else 0)

    def example_loss(self, ex: TrainingExample) -> Tensor:
        """Cross-entropy on the response span (plus its closing EOS)."""
        prefix = self.encode_prefix(ex.image, ex.distortion)
        prompt_ids = [BOS] + self.vocab.encode(ex.prompt)
        response_ids = self.vocab.encode(ex.response) + [EOS]
        if not self.vocab.encode(ex.response):
            raise ShapeError("empty response text")
        ids = prompt_ids + response_ids
        mask = np.zeros(len(ids), dtype=bool)
        mask[len(prompt_ids):] = True
        return self.lm.response_loss(prefix, ids, mask)

    def predict(self, prompt: str, image: ImageInput, d: DistortionType,
                max_new: int = 96) -> str:
        """Greedy decode of the model's response text."""
        prefix = self.encode_prefix(image, d)
        prompt_ids = [BOS] + self.vocab.encode(prompt)
        out = self.lm.greedy_decode(prefix, prompt_ids, max_new)
        return self.vocab.decode(out)

    def param_groups(self) -> set[str]:
        return self.store.groups()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.store}
