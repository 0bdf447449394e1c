"""Ablation drivers: QAVA token sweep, joint-vs-single training, evidence corruption.

Each driver owns one experiment loop and emits a report that carries the run's
config digest, so a report file alone is enough to reproduce the run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .config import canonical_digest
from .data import (CORRUPTION_POOL, ClaimRecord, build_desk_vocab, synthesize_alignment,
                   synthesize_conversation, synthesize_dataset, to_example)
from .evaluation import EvalReport, evaluate
from .evidence import CORRUPT_PROPORTIONS, EvidenceBundle, corrupt
from .model import ClaimVerifier, desk_config
from .reasoning import DistortionType
from .training import TrainConfig, default_stages, train_stage

KINDS = (DistortionType.TEXTUAL, DistortionType.VISUAL, DistortionType.CROSS_MODAL)


@dataclass(frozen=True)
class DeskRun:
    """One desk-scale training/evaluation cycle's knobs.

    Defaults give the calibrated run used by the acceptance suite: compact
    prompts and bare-verdict responses keep sequences short enough to train
    in minutes while the type-specific fake signals stay learnable.
    """
    n_per_kind: int = 600
    train_frac: float = 2.0 / 3.0
    align_n: int = 128
    conv_n: int = 96
    num_tokens: int = 32
    num_layers: int = 6
    batch_size: int = 4
    lr: float = 2e-3
    # keep the encoder two orders colder than the language model: a drifting
    # vision tower scrambles pixel-borne cues faster than the verdict head
    # can couple to them
    lr_vision: float = 2e-5
    stage_epochs: tuple[int, int, int] = (4, 4, 8)
    seed: int = 0
    precision: str = "single"
    prompt_style: str = "compact"
    response_style: str = "verdict"
    max_new: int = 4

    def __post_init__(self):
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must lie strictly between 0 and 1")
        if self.n_per_kind < 6 or self.n_per_kind % 2:
            raise ValueError("n_per_kind must be even and >= 6")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def synth_splits(run: DeskRun) -> dict[str, tuple[list[ClaimRecord], list[ClaimRecord]]]:
    """Per-kind (train, test) record splits from one seed.

    Records alternate real/fake, so any even-length prefix stays balanced;
    the train size is forced even to keep both splits balanced.
    """
    n_train = int(run.n_per_kind * run.train_frac) // 2 * 2
    out = {}
    for kind in KINDS:
        records = synthesize_dataset(kind, run.n_per_kind, run.seed)
        out[kind.value] = (records[:n_train], records[n_train:])
    return out


def train_desk_model(run: DeskRun, stage3: list, num_tokens: int | None = None) -> ClaimVerifier:
    """Fresh model through all three stages; stage 1/2 corpora come from the run."""
    vocab = build_desk_vocab()
    cfg = desk_config(len(vocab), num_tokens=num_tokens or run.num_tokens,
                      num_layers=run.num_layers)
    model = ClaimVerifier(cfg, vocab, seed=run.seed, precision=run.precision)
    tc = TrainConfig(batch_size=run.batch_size, seed=run.seed, precision=run.precision,
                     lr_llm=run.lr, lr_vision=run.lr_vision,
                     stage_epochs=run.stage_epochs)
    datasets = {"alignment": synthesize_alignment(run.align_n, run.seed),
                "conversation": synthesize_conversation(run.conv_n, run.seed),
                "reasoning": stage3}
    for stage in default_stages(tc, model.param_groups()):
        train_stage(model, stage, datasets[stage.data_tag], tc)
    return model


def _examples(run: DeskRun, records: list[ClaimRecord]) -> list:
    return [to_example(r, run.prompt_style, run.response_style) for r in records]


def _accuracy_by_kind(run: DeskRun, model: ClaimVerifier,
                      splits: dict) -> dict[str, EvalReport]:
    return {kind: evaluate(model, test, prompt_style=run.prompt_style,
                           max_new=run.max_new)
            for kind, (_, test) in splits.items()}


@dataclass(frozen=True)
class TokenSweepRow:
    k: int
    accuracy: dict[str, float]
    macro_f1: dict[str, float]

    def to_json(self) -> dict:
        return {"k": self.k, "accuracy": self.accuracy, "macro_f1": self.macro_f1}


@dataclass(frozen=True)
class TokenSweepReport:
    rows: tuple[TokenSweepRow, ...]
    seed: int
    config_digest: str

    def to_json(self) -> str:
        return json.dumps({"kind": "tokens", "seed": self.seed,
                           "config_digest": self.config_digest,
                           "rows": [r.to_json() for r in self.rows]},
                          indent=2, sort_keys=True)

    def to_text(self) -> str:
        kinds = [k.value for k in KINDS]
        lines = ["K      " + "".join(f"{k:>14}" for k in kinds)]
        for row in self.rows:
            lines.append(f"{row.k:<7}" +
                         "".join(f"{row.accuracy[k]:>14.3f}" for k in kinds))
        lines.append(f"config digest: {self.config_digest}")
        return "\n".join(lines)


def ablate_tokens(k_list: list[int], base: DeskRun = DeskRun()) -> TokenSweepReport:
    """Train one joint-mixture model per adapter size K; identical seed and data."""
    if not k_list:
        raise ValueError("k_list must be non-empty")
    if any(k < 1 for k in k_list):
        raise ValueError("token counts must be positive")
    splits = synth_splits(base)
    stage3 = []
    for kind in KINDS:
        stage3.extend(_examples(base, splits[kind.value][0]))
    rows = []
    for k in k_list:
        model = train_desk_model(base, stage3, num_tokens=k)
        reports = _accuracy_by_kind(base, model, splits)
        rows.append(TokenSweepRow(
            k=k,
            accuracy={kind: r.metrics.accuracy for kind, r in reports.items()},
            macro_f1={kind: r.metrics.macro_f1 for kind, r in reports.items()}))
    digest = canonical_digest({"driver": "ablate_tokens", "k_list": list(k_list),
                               "run": base.to_json()})
    return TokenSweepReport(tuple(rows), base.seed, digest)


JOINT_ROWS = ("textual", "visual", "cross_modal", "joint")


@dataclass(frozen=True)
class JointReport:
    """4 training regimes x 3 held-out test sets, all sharing one budget."""
    grid: dict[str, dict[str, float]]
    budget: int
    seed: int
    config_digest: str
    reports: dict[str, dict[str, EvalReport]] = field(repr=False, default_factory=dict)

    def accuracy(self, row: str, column: str) -> float:
        return self.grid[row][column]

    def off_diagonal_mean(self, row: str) -> float:
        others = [self.grid[row][c] for c in self.grid[row] if c != row]
        return sum(others) / len(others)

    def to_json(self) -> str:
        return json.dumps({"kind": "joint", "seed": self.seed, "budget": self.budget,
                           "config_digest": self.config_digest, "grid": self.grid},
                          indent=2, sort_keys=True)

    def to_text(self) -> str:
        kinds = [k.value for k in KINDS]
        lines = ["trained on   " + "".join(f"{k:>14}" for k in kinds)]
        for row in JOINT_ROWS:
            lines.append(f"{row:<13}" +
                         "".join(f"{self.grid[row][k]:>14.3f}" for k in kinds))
        lines.append(f"budget: {self.budget} samples per model")
        lines.append(f"config digest: {self.config_digest}")
        return "\n".join(lines)


def ablate_joint(seed: int, base: DeskRun = DeskRun()) -> JointReport:
    """Single-type models vs an equal-mixture joint model at equal budget."""
    run = dataclasses.replace(base, seed=seed)
    splits = synth_splits(run)
    n_train = len(splits[KINDS[0].value][0])
    budget = n_train // len(KINDS) * len(KINDS)  # equal thirds must be exact
    per_kind = budget // len(KINDS)

    corpora: dict[str, list] = {}
    for kind in KINDS:
        corpora[kind.value] = _examples(run, splits[kind.value][0][:budget])
    joint = []
    for kind in KINDS:
        joint.extend(_examples(run, splits[kind.value][0][:per_kind]))
    corpora["joint"] = joint
    sizes = {name: len(c) for name, c in corpora.items()}
    if len(set(sizes.values())) != 1:
        raise AssertionError(f"unequal training budgets: {sizes}")

    grid: dict[str, dict[str, float]] = {}
    reports: dict[str, dict[str, EvalReport]] = {}
    for name in JOINT_ROWS:
        model = train_desk_model(run, corpora[name])
        reports[name] = _accuracy_by_kind(run, model, splits)
        grid[name] = {kind: r.metrics.accuracy for kind, r in reports[name].items()}
    digest = canonical_digest({"driver": "ablate_joint", "seed": seed,
                               "run": run.to_json()})
    return JointReport(grid, budget, seed, digest, reports)


@dataclass(frozen=True)
class EvidenceRow:
    proportion: float
    accuracy: float
    macro_f1: float
    unparseable: int

    def to_json(self) -> dict:
        return {"proportion": self.proportion, "accuracy": self.accuracy,
                "macro_f1": self.macro_f1, "unparseable": self.unparseable}


@dataclass(frozen=True)
class EvidenceReport:
    rows: tuple[EvidenceRow, ...]
    seed: int
    config_digest: str
    reports: dict[float, EvalReport] = field(repr=False, default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"kind": "evidence", "seed": self.seed,
                           "config_digest": self.config_digest,
                           "rows": [r.to_json() for r in self.rows]},
                          indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'corrupted':>10} {'accuracy':>10} {'macro_f1':>10} {'unparseable':>12}"]
        for r in self.rows:
            lines.append(f"{r.proportion:>10.2f} {r.accuracy:>10.3f} "
                         f"{r.macro_f1:>10.3f} {r.unparseable:>12}")
        lines.append(f"config digest: {self.config_digest}")
        return "\n".join(lines)


def corrupt_records(records: list[ClaimRecord], proportion: float,
                    seed: int) -> list[ClaimRecord]:
    """Copy of the dataset with each record's evidence corrupted in place."""
    out = []
    for r in records:
        bundle = r.evidence or EvidenceBundle()
        out.append(dataclasses.replace(
            r, evidence=corrupt(bundle, proportion, CORRUPTION_POOL, seed)))
    return out


def ablate_evidence(model: ClaimVerifier, records: list[ClaimRecord],
                    proportions: list[float], seed: int,
                    prompt_style: str = "compact", max_new: int = 4) -> EvidenceReport:
    """Evaluate one trained model under increasing evidence corruption."""
    bad = [p for p in proportions if p not in CORRUPT_PROPORTIONS]
    if bad or not proportions:
        raise ValueError(f"proportions must be a non-empty subset of "
                         f"{CORRUPT_PROPORTIONS}, got {proportions}")
    rows = []
    reports = {}
    for p in proportions:
        corrupted = corrupt_records(records, p, seed)
        rep = evaluate(model, corrupted, prompt_style=prompt_style, max_new=max_new)
        reports[p] = rep
        rows.append(EvidenceRow(p, rep.metrics.accuracy, rep.metrics.macro_f1,
                                rep.unparseable))
    digest = canonical_digest({"driver": "ablate_evidence", "seed": seed,
                               "proportions": list(proportions),
                               "model_config": model.config.to_json(),
                               "record_ids": [r.id for r in records],
                               "prompt_style": prompt_style})
    return EvidenceReport(tuple(rows), seed, digest, reports)
