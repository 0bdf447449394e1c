import json

import numpy as np
import pytest

from claimlens.llm import Vocab
from claimlens.model import ClaimVerifier, TrainingExample, desk_config
from claimlens.reasoning import DistortionType
from claimlens.training import (CHECKPOINT_MAGIC, CheckpointError, StageSpec,
                                TrainConfig, TrainingError, dataset_digest,
                                default_stages, freeze_mask, load_checkpoint,
                                save_checkpoint, train_all, train_stage)
from claimlens.vision import ImageInput

VOCAB = Vocab.build(["the mayor opened the stadium", "judgement :", "Real Fake",
                     "describe : a photo", "question answer yes no"])


def tiny_model(seed=3, use_qava=True, precision="double"):
    cfg = desk_config(len(VOCAB), num_tokens=4, num_layers=1, use_qava=use_qava)
    return ClaimVerifier(cfg, VOCAB, seed=seed, precision=precision)


def feat_image(seed):
    rng = np.random.default_rng(seed)
    return ImageInput(features=rng.normal(size=(4, 64)))


def pixel_image(seed):
    rng = np.random.default_rng(seed)
    return ImageInput(pixels=rng.uniform(size=(32, 32)))


def tiny_dataset(n=4, pixels=False):
    out = []
    for i in range(n):
        word = "Real" if i % 2 == 0 else "Fake"
        image = pixel_image(i) if pixels else feat_image(i)
        out.append(TrainingExample("the mayor opened the stadium judgement :",
                                   word, image, DistortionType.TEXTUAL))
    return out


def wake_residuals(model, scale=0.05):
    """Fresh layers start as the identity; give residual branches signal so
    gradients reach every group."""
    rng = np.random.default_rng(99)
    for name in model.store.names():
        p = model.store[name]
        if np.all(p.data == 0) and p.data.ndim >= 2:
            p.assign(rng.normal(scale=scale, size=p.shape))


def spec_for(model, groups, epochs=1, cfg=None):
    cfg = cfg or TrainConfig(batch_size=2, seed=0)
    return StageSpec("stage3", frozenset(groups), "reasoning", epochs,
                     cfg.lr_by_group())


# ---------------------------------------------------------------------------
# config and stage plumbing
# ---------------------------------------------------------------------------

def test_trainconfig_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_llm=-1e-5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_lr_defaults_follow_llm_rate():
    rates = TrainConfig().lr_by_group()
    assert rates["llm"] == 2e-5
    assert rates["vision"] == 2e-6
    assert rates["projector"] == rates["llm"]
    assert rates["qava"] == rates["llm"]


def test_lr_overrides_respected():
    rates = TrainConfig(lr_projector=1e-3, lr_qava=5e-4).lr_by_group()
    assert rates["projector"] == 1e-3
    assert rates["qava"] == 5e-4


def test_default_stages_order_and_groups():
    model = tiny_model()
    stages = default_stages(TrainConfig(), model.param_groups())
    assert [s.name for s in stages] == ["stage1", "stage2", "stage3"]
    assert [s.data_tag for s in stages] == ["alignment", "conversation", "reasoning"]
    assert stages[0].trainable_groups == {"projector"}
    assert stages[1].trainable_groups == {"projector", "llm"}
    assert stages[2].trainable_groups == {"projector", "qava", "vision", "llm"}
    assert [s.epochs for s in stages] == [1, 1, 3]


def test_default_stages_without_qava():
    model = tiny_model(use_qava=False)
    stages = default_stages(TrainConfig(), model.param_groups())
    assert "qava" not in stages[2].trainable_groups


def test_freeze_mask_unknown_group_rejected():
    model = tiny_model(use_qava=False)
    bad = StageSpec("s", frozenset({"qava"}), "x", 1, {})
    with pytest.raises(ValueError, match="qava"):
        freeze_mask(bad, model)


# ---------------------------------------------------------------------------
# training dynamics
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("groups", [{"projector"}, {"projector", "llm"},
                                    {"projector", "qava", "vision", "llm"}])
def test_only_trainable_groups_move(groups):
    model = tiny_model()
    wake_residuals(model)
    before = model.snapshot()
    cfg = TrainConfig(batch_size=2, seed=0, lr_llm=1e-3, lr_vision=1e-3)
    data = tiny_dataset(4, pixels="vision" in groups)
    train_stage(model, spec_for(model, groups, cfg=cfg), data, cfg)
    moved_groups = set()
    for name, old in before.items():
        p = model.store[name]
        if not np.array_equal(old, p.data):
            moved_groups.add(p.group)
            assert p.group in groups, name
    assert moved_groups == groups


def test_loss_decreases_on_one_batch():
    model = tiny_model()
    wake_residuals(model)
    data = tiny_dataset(2)
    cfg = TrainConfig(batch_size=2, seed=0, lr_llm=1e-3, lr_vision=1e-3)
    spec = spec_for(model, model.param_groups(), epochs=10, cfg=cfg)
    result = train_stage(model, spec, data, cfg)
    assert len(result.step_losses) == 10
    assert result.step_losses[-1] < result.step_losses[0]


def test_overfits_small_batch():
    model = tiny_model()
    wake_residuals(model)
    data = tiny_dataset(2)
    cfg = TrainConfig(batch_size=2, seed=0, lr_llm=5e-3, lr_vision=5e-3)
    spec = spec_for(model, model.param_groups(), epochs=80, cfg=cfg)
    result = train_stage(model, spec, data, cfg)
    assert result.step_losses[-1] < 0.1 * result.step_losses[0]


def test_adam_group_rates_show_in_first_step():
    # first Adam step moves each coordinate by ~lr * sign(g), so the largest
    # per-group delta reveals the group's configured rate
    model = tiny_model()
    wake_residuals(model)
    before = model.snapshot()
    cfg = TrainConfig(batch_size=1, seed=0, lr_llm=2e-5, lr_vision=2e-6,
                      lr_projector=1e-4, lr_qava=1e-4)
    spec = spec_for(model, model.param_groups(), cfg=cfg)
    train_stage(model, spec, tiny_dataset(1, pixels=True), cfg)
    max_delta = {}
    for name, old in before.items():
        p = model.store[name]
        d = float(np.max(np.abs(p.data - old)))
        max_delta[p.group] = max(max_delta.get(p.group, 0.0), d)
    assert max_delta["llm"] == pytest.approx(2e-5, rel=0.05)
    assert max_delta["vision"] == pytest.approx(2e-6, rel=0.05)
    assert max_delta["projector"] == pytest.approx(1e-4, rel=0.05)


def test_empty_dataset_rejected():
    model = tiny_model()
    with pytest.raises(TrainingError, match="empty"):
        train_stage(model, spec_for(model, {"projector"}), [], TrainConfig())


def test_nonfinite_failure_names_stage_epoch_step():
    # finite leaf that overflows to inf inside the forward pass
    model = tiny_model()
    bad = model.store["lm.unembed"]
    poisoned = bad.data.copy()
    poisoned[:] = 1e308
    bad.assign(poisoned)
    cfg = TrainConfig(batch_size=2, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingError, match=r"stage3 epoch 0 step 0"):
            train_stage(model, spec_for(model, {"llm"}, cfg=cfg),
                        tiny_dataset(2), cfg)


def test_stage_shuffles_are_seeded():
    losses = []
    for _ in range(2):
        model = tiny_model()
        wake_residuals(model)
        cfg = TrainConfig(batch_size=2, seed=7, lr_llm=1e-3, lr_vision=1e-3)
        spec = spec_for(model, model.param_groups(), epochs=2, cfg=cfg)
        losses.append(train_stage(model, spec, tiny_dataset(6), cfg).step_losses)
    assert losses[0] == losses[1]


def test_dataset_digest_content_sensitive():
    a = tiny_dataset(3)
    b = tiny_dataset(3)
    assert dataset_digest(a) == dataset_digest(b)
    c = [TrainingExample(a[0].prompt + " x", a[0].response, a[0].image,
                         a[0].distortion)] + a[1:]
    assert dataset_digest(c) != dataset_digest(a)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_values(tmp_path):
    model = tiny_model(seed=11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == model.config
    assert back.seed == model.seed
    assert back.precision == model.precision
    assert back.vocab.to_text() == model.vocab.to_text()
    old, new = model.snapshot(), back.snapshot()
    assert set(old) == set(new)
    for name in old:
        assert np.array_equal(old[name], new[name]), name


def test_checkpoint_roundtrip_bytes(tmp_path):
    model = tiny_model(seed=12)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_detects_corruption(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"short")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    import hashlib
    body = b"other-format-v9\nprecision: double\n\n"
    path = tmp_path / "m.ckpt"
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(path)


def test_checkpoint_precision_pinned(tmp_path):
    model = tiny_model(precision="double")
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError, match="precision"):
        load_checkpoint(path, precision="single")
    assert load_checkpoint(path, precision="double").precision == "double"


def test_checkpoint_single_precision_roundtrip(tmp_path):
    model = tiny_model(precision="single")
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.precision == "single"
    assert all(p.data.dtype == np.float32 for p in back.store)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def _stage_datasets():
    align = [TrainingExample("describe :", "a photo", feat_image(i),
                             DistortionType.UNKNOWN) for i in range(2)]
    conv = [TrainingExample("question answer", "yes", feat_image(i + 10),
                            DistortionType.UNKNOWN) for i in range(2)]
    return {"alignment": align, "conversation": conv, "reasoning": tiny_dataset(2)}


def test_train_all_manifest_and_outputs(tmp_path):
    model = tiny_model()
    cfg = TrainConfig(batch_size=2, seed=1, stage_epochs=(1, 1, 1))
    manifest = train_all(model, _stage_datasets(), cfg, tmp_path)
    assert [s["name"] for s in manifest["stages"]] == ["stage1", "stage2", "stage3"]
    assert manifest["lr_schedule"] == "constant"
    assert (tmp_path / "final.ckpt").exists()
    assert (tmp_path / "manifest.json").exists()
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["config_digest"] == manifest["config_digest"]
    for s in manifest["stages"]:
        assert len(s["checkpoints"]) == s["epochs"]
        assert len(s["data_sha256"]) == 64


def test_train_all_missing_dataset(tmp_path):
    model = tiny_model()
    with pytest.raises(TrainingError, match="reasoning"):
        train_all(model, {"alignment": tiny_dataset(2),
                          "conversation": tiny_dataset(2)},
                  TrainConfig(), tmp_path)


def test_train_all_bit_identical_reruns(tmp_path):
    outs = []
    for run in ("a", "b"):
        model = tiny_model(seed=3)
        cfg = TrainConfig(batch_size=2, seed=5, stage_epochs=(1, 1, 1))
        train_all(model, _stage_datasets(), cfg, tmp_path / run)
        outs.append((tmp_path / run / "final.ckpt").read_bytes())
    assert outs[0] == outs[1]


def test_checkpoint_magic_versioned():
    assert CHECKPOINT_MAGIC.endswith("-v1")
