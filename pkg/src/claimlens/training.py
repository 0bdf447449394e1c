"""Progressive three-stage trainer with parameter-group freezing.

Stage 1 aligns the general projector on caption pairs, stage 2 adds the
language model on conversation data, stage 3 opens every group for the
reasoning corpus.  Each stage freezes everything outside its group set;
the freezing contract is exact: frozen parameters keep their bytes.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError, Tensor, backward
from .config import canonical_digest
from .llm import Vocab
from .model import ClaimVerifier, ModelConfig, TrainingExample
from .optim import Adam

CHECKPOINT_MAGIC = "claimlens-checkpoint-v1"

LR_LLM_DEFAULT = 2e-5
LR_VISION_DEFAULT = 2e-6
STAGE_EPOCH_DEFAULTS = (1, 1, 3)


class TrainingError(RuntimeError):
    """Training aborted; message carries stage/step diagnostics."""


class CheckpointError(RuntimeError):
    """Checkpoint file rejected (version, precision, or checksum)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128  # desk runs override this downward
    seed: int = 0
    precision: str = "double"
    lr_llm: float = LR_LLM_DEFAULT
    lr_vision: float = LR_VISION_DEFAULT
    lr_projector: float | None = None  # None: follow the LLM rate
    lr_qava: float | None = None
    stage_epochs: tuple[int, int, int] = STAGE_EPOCH_DEFAULTS

    def __post_init__(self):
        rates = [self.lr_llm, self.lr_vision, self.lr_projector, self.lr_qava]
        if any(r is not None and r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    def lr_by_group(self) -> dict[str, float]:
        return {
            "llm": self.lr_llm,
            "vision": self.lr_vision,
            "projector": self.lr_projector if self.lr_projector is not None else self.lr_llm,
            "qava": self.lr_qava if self.lr_qava is not None else self.lr_llm,
        }


@dataclass(frozen=True)
class StageSpec:
    name: str
    trainable_groups: frozenset[str]
    data_tag: str
    epochs: int
    lr_by_group: dict[str, float]


def default_stages(cfg: TrainConfig, model_groups: set[str]) -> list[StageSpec]:
    """stage1 projector only, stage2 projector+llm, stage3 every group present."""
    rates = cfg.lr_by_group()
    e1, e2, e3 = cfg.stage_epochs
    return [
        StageSpec("stage1", frozenset({"projector"}), "alignment", e1, rates),
        StageSpec("stage2", frozenset({"projector", "llm"}), "conversation", e2, rates),
        StageSpec("stage3", frozenset(model_groups), "reasoning", e3, rates),
    ]


def freeze_mask(stage: StageSpec, model: ClaimVerifier) -> None:
    """Exactly the stage's groups trainable; everything else frozen."""
    present = model.param_groups()
    unknown = stage.trainable_groups - present
    if unknown:
        raise ValueError(f"stage {stage.name} names groups missing from the "
                         f"model: {sorted(unknown)}")
    model.store.set_trainable_groups(set(stage.trainable_groups))


@dataclass
class StageResult:
    name: str
    step_losses: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.step_losses[-1] if self.step_losses else float("nan")


def _stage_rng(seed: int, stage_name: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.md5(stage_name.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, tag])


def train_stage(model: ClaimVerifier, stage: StageSpec,
                dataset: list[TrainingExample], cfg: TrainConfig,
                out_dir: str | Path | None = None) -> StageResult:
    """One stage: freeze, shuffle per epoch, batched Adam steps, epoch checkpoints."""
    if not dataset:
        raise TrainingError(f"stage {stage.name}: empty dataset")
    freeze_mask(stage, model)
    opt = Adam(stage.lr_by_group)
    rng = _stage_rng(cfg.seed, stage.name)
    result = StageResult(stage.name)
    t0 = time.perf_counter()
    for epoch in range(stage.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            step = len(result.step_losses)
            try:
                acc: dict[str, np.ndarray] = {}
                total = 0.0
                for ex in batch:
                    loss = model.example_loss(ex)
                    total += loss.item()
                    for name, g in backward(loss, model.store).items():
                        acc[name] = acc.get(name, 0.0) + g.data
                scale = 1.0 / len(batch)
                grads = {n: Tensor(g * scale) for n, g in acc.items()}
                opt.step(model.store, grads)
            except NonFiniteError as e:
                raise TrainingError(f"stage {stage.name} epoch {epoch} step "
                                    f"{step}: {e}") from e
            result.step_losses.append(total / len(batch))
        if out_dir is not None:
            path = Path(out_dir) / f"{stage.name}-epoch{epoch + 1}.ckpt"
            save_checkpoint(model, path)
            result.checkpoints.append(str(path))
    result.seconds = time.perf_counter() - t0
    return result


def train_all(model: ClaimVerifier, datasets: dict[str, list[TrainingExample]],
              cfg: TrainConfig, out_dir: str | Path) -> dict:
    """Run the three stages in order; emit checkpoints and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = default_stages(cfg, model.param_groups())
    missing = [s.data_tag for s in stages if s.data_tag not in datasets]
    if missing:
        raise TrainingError(f"missing stage datasets: {missing}")
    manifest = {
        "stages": [],
        "seed": cfg.seed,
        "precision": cfg.precision,
        "batch_size": cfg.batch_size,
        "lr_schedule": "constant",
        "config_digest": canonical_digest(model.config.to_json()),
    }
    for stage in stages:
        data = datasets[stage.data_tag]
        result = train_stage(model, stage, data, cfg, out_dir=out_dir)
        manifest["stages"].append({
            "name": stage.name,
            "trainable_groups": sorted(stage.trainable_groups),
            "data_tag": stage.data_tag,
            "data_sha256": dataset_digest(data),
            "epochs": stage.epochs,
            "lr_by_group": stage.lr_by_group,
            "steps": len(result.step_losses),
            "final_loss": result.final_loss,
            "checkpoints": result.checkpoints,
        })
    final_path = out_dir / "final.ckpt"
    save_checkpoint(model, final_path)
    manifest["final_checkpoint"] = str(final_path)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True) + "\n",
                                           encoding="utf-8")
    return manifest


def dataset_digest(dataset: list[TrainingExample]) -> str:
    """Content hash covering text, distortion, and image payloads."""
    h = hashlib.sha256()
    for ex in dataset:
        h.update(ex.prompt.encode("utf-8"))
        h.update(b"\x00")
        h.update(ex.response.encode("utf-8"))
        h.update(b"\x00")
        h.update(ex.distortion.value.encode("utf-8"))
        if ex.image.pixels is not None:
            h.update(b"px")
            h.update(np.ascontiguousarray(ex.image.pixels).tobytes())
        else:
            h.update(b"ft")
            h.update(np.ascontiguousarray(ex.image.features).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint container: text header, embedded vocab, sorted little-endian
# parameter blobs, trailing whole-file sha256
# ---------------------------------------------------------------------------

_LE_DTYPE = {"double": "<f8", "single": "<f4"}


def save_checkpoint(model: ClaimVerifier, path: str | Path) -> None:
    vocab_bytes = model.vocab.to_text().encode("utf-8")
    names = model.store.names()
    head = [
        CHECKPOINT_MAGIC,
        f"precision: {model.precision}",
        f"seed: {model.seed}",
        f"config_digest: {canonical_digest(model.config.to_json())}",
        f"config: {model.config.to_json()}",
        f"vocab_bytes: {len(vocab_bytes)}",
        f"params: {len(names)}",
    ]
    blob = bytearray(("\n".join(head) + "\n\n").encode("utf-8"))
    blob += vocab_bytes
    le = _LE_DTYPE[model.precision]
    for name in names:
        p = model.store[name]
        data = np.ascontiguousarray(p.data.astype(le, copy=False))
        shape = ",".join(str(s) for s in p.shape)
        blob += f"{name} {p.group} {le} {shape} {data.nbytes}\n".encode("utf-8")
        blob += data.tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path, precision: str | None = None) -> ClaimVerifier:
    """Rebuild the model from a container file; rejects tampering and
    precision mismatches outright."""
    raw = Path(path).read_bytes()
    if len(raw) < 33:
        raise CheckpointError(f"{path}: truncated file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        header_end = body.index(b"\n\n")
    except ValueError as e:
        raise CheckpointError(f"{path}: missing header terminator") from e
    lines = body[:header_end].decode("utf-8").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: unsupported format {lines[0]!r}")
    fields = dict(line.split(": ", 1) for line in lines[1:])
    stored_precision = fields["precision"]
    if precision is not None and precision != stored_precision:
        raise CheckpointError(f"{path}: stored precision {stored_precision!r} "
                              f"!= requested {precision!r}")
    config = ModelConfig.from_json(fields["config"])
    n_vocab_bytes = int(fields["vocab_bytes"])
    n_params = int(fields["params"])
    cursor = header_end + 2
    vocab = Vocab.from_text(body[cursor:cursor + n_vocab_bytes].decode("utf-8"))
    cursor += n_vocab_bytes
    model = ClaimVerifier(config, vocab, seed=int(fields["seed"]),
                          precision=stored_precision)
    seen = []
    for _ in range(n_params):
        line_end = body.index(b"\n", cursor)
        name, group, le, shape_csv, nbytes = body[cursor:line_end].decode("utf-8").split(" ")
        cursor = line_end + 1
        nbytes = int(nbytes)
        shape = tuple(int(s) for s in shape_csv.split(",") if s)
        data = np.frombuffer(body[cursor:cursor + nbytes], dtype=le).reshape(shape)
        cursor += nbytes
        if name not in model.store:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        if model.store[name].group != group:
            raise CheckpointError(f"{path}: group mismatch for {name!r}")
        model.store[name].assign(data)
        seen.append(name)
    if seen != model.store.names():
        raise CheckpointError(f"{path}: parameter set does not match the model")
    return model
