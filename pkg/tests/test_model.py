import numpy as np
import pytest

from claimlens.autograd import ShapeError, backward
from claimlens.llm import Vocab
from claimlens.model import (ClaimVerifier, ModelConfig, TrainingExample,
                             desk_config)
from claimlens.qava import QavaConfig
from claimlens.reasoning import DistortionType
from claimlens.llm import LmConfig
from claimlens.vision import ImageInput, VisionConfig

from claimlens.qava import DEFAULT_QUESTIONS

VOCAB = Vocab.build(["the mayor opened the stadium", "judgement :",
                     "Real Fake", "a photo of the museum",
                     *DEFAULT_QUESTIONS.values()])


def build(use_qava=True, num_tokens=4, seed=0):
    cfg = desk_config(len(VOCAB), num_tokens=num_tokens, num_layers=1,
                      use_qava=use_qava)
    return ClaimVerifier(cfg, VOCAB, seed=seed)


def test_config_json_roundtrip():
    cfg = desk_config(50, num_tokens=8, num_layers=2)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_config_dim_mismatch_rejected():
    with pytest.raises(ValueError):
        ModelConfig(vision=VisionConfig(), qava=QavaConfig(feat_dim=32),
                    lm=LmConfig(vocab_size=10))


def test_prefix_is_general_plus_task_tokens():
    model = build(num_tokens=4)
    img = ImageInput(features=np.random.default_rng(0).normal(size=(6, 64)))
    prefix = model.encode_prefix(img, DistortionType.TEXTUAL)
    assert prefix.shape == (6 + 4, model.config.lm.llm_dim)
    assert model.prefix_length(img) == 10


def test_use_qava_false_removes_exactly_qava_group():
    with_q = build(use_qava=True)
    without = build(use_qava=False)
    assert with_q.param_groups() - without.param_groups() == {"qava"}
    assert without.param_groups() == {"projector", "vision", "llm"}
    img = ImageInput(features=np.ones((3, 64)))
    assert without.prefix_length(img) == 3


def test_same_seed_same_weights():
    a, b = build(seed=4), build(seed=4)
    sa, sb = a.snapshot(), b.snapshot()
    assert set(sa) == set(sb)
    for name in sa:
        assert np.array_equal(sa[name], sb[name])
    c = build(seed=5)
    assert any(not np.array_equal(sa[n], c.snapshot()[n]) for n in sa)


def test_example_loss_scalar_and_grads_flow():
    model = build()
    ex = TrainingExample("the mayor opened the stadium judgement :", "Real",
                         ImageInput(features=np.ones((2, 64)) * 0.3),
                         DistortionType.TEXTUAL)
    loss = model.example_loss(ex)
    assert loss.shape == ()
    assert np.isfinite(loss.item())
    grads = backward(loss, model.store)
    assert any(n.startswith("lm.") for n in grads)


def test_example_loss_rejects_empty_response():
    model = build()
    ex = TrainingExample("judgement :", "", ImageInput(features=np.ones((2, 64))),
                         DistortionType.TEXTUAL)
    with pytest.raises(ShapeError):
        model.example_loss(ex)


def test_predict_returns_text():
    model = build()
    out = model.predict("judgement :", ImageInput(features=np.ones((2, 64)) * 0.2),
                        DistortionType.VISUAL, max_new=3)
    assert isinstance(out, str)


def test_predict_deterministic():
    model = build(seed=9)
    img = ImageInput(features=np.full((2, 64), 0.1))
    a = model.predict("judgement :", img, DistortionType.MIXED, max_new=5)
    b = model.predict("judgement :", img, DistortionType.MIXED, max_new=5)
    assert a == b


def test_snapshot_is_a_copy():
    model = build()
    snap = model.snapshot()
    name = next(iter(snap))
    snap[name][...] = 123.0
    assert not np.array_equal(snap[name], model.store[name].data)


def test_question_conditioning_changes_prefix():
    model = build(num_tokens=4)
    img = ImageInput(features=np.random.default_rng(1).normal(size=(4, 64)))
    a = model.encode_prefix(img, DistortionType.TEXTUAL).data
    b = model.encode_prefix(img, DistortionType.VISUAL).data
    n = 4  # general tokens match; task tokens must differ
    assert np.array_equal(a[:n], b[:n])
    assert not np.allclose(a[n:], b[n:])
