"""Verdict prediction and classification metrics."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .config import canonical_digest
from .data import ClaimRecord, render_prompt
from .evidence import CorpusIndex, EvidenceBundle, retrieve_direct, retrieve_inverse
from .model import ClaimVerifier
from .reasoning import UnparseableVerdict, parse_verdict

LABELS = ("real", "fake")
UNPARSEABLE = "unparseable"
_VERDICT_TO_LABEL = {"Real": "real", "Fake": "fake"}


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion: dict[str, int]  # tp/fp/fn/tn with fake as the positive class
    n: int


def compute_metrics(preds: list[str | None], golds: list[str],
                    labels: tuple[str, ...] = LABELS) -> Metrics:
    """Accuracy and macro-F1 over a fixed label set.

    Zero-denominator precision, recall, and F1 all resolve to 0.  Unparseable
    predictions (None or "unparseable") are never correct but still count in
    every recall denominator they touch.
    """
    if len(golds) != len(preds):
        raise ValueError("preds and golds must be the same length")
    if not golds:
        raise ValueError("cannot score an empty prediction list")
    for g in golds:
        if g not in labels:
            raise ValueError(f"gold label {g!r} not in {labels}")
    correct = sum(1 for g, p in zip(golds, preds) if g == p)
    per_class = {}
    f1s = []
    for lab in labels:
        tp = sum(1 for g, p in zip(golds, preds) if g == lab and p == lab)
        fp = sum(1 for g, p in zip(golds, preds) if g != lab and p == lab)
        fn = sum(1 for g, p in zip(golds, preds) if g == lab and p != lab)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[lab] = {"precision": prec, "recall": rec, "f1": f1,
                          "support": float(tp + fn)}
        f1s.append(f1)
    confusion = {}
    if "fake" in labels:
        tp = sum(1 for g, p in zip(golds, preds) if g == "fake" and p == "fake")
        fp = sum(1 for g, p in zip(golds, preds) if g != "fake" and p == "fake")
        fn = sum(1 for g, p in zip(golds, preds) if g == "fake" and p != "fake")
        confusion = {"tp_fake": tp, "fp_fake": fp, "fn_fake": fn,
                     "tn_fake": len(golds) - tp - fp - fn}
    return Metrics(accuracy=correct / len(golds),
                   macro_f1=sum(f1s) / len(f1s),
                   per_class=per_class, confusion=confusion, n=len(golds))


@dataclass(frozen=True)
class Prediction:
    record_id: str
    gold: str
    raw: str
    verdict: str | None  # parsed label or None when unparseable

    @property
    def pred_label(self) -> str | None:
        return _VERDICT_TO_LABEL.get(self.verdict) if self.verdict else None


def bundle_for_record(record: ClaimRecord, index: CorpusIndex | None = None,
                      m: int = 3, n: int = 3) -> EvidenceBundle:
    """Pre-supplied evidence wins; otherwise retrieve from the given corpus."""
    if record.evidence is not None:
        return record.evidence
    if index is None:
        return EvidenceBundle()
    features = record.image.features
    inverse = [] if features is None else retrieve_inverse(features, index, n)
    return EvidenceBundle(direct=retrieve_direct(record.text, index, m),
                          inverse=inverse, context=[])


def predict_record(model: ClaimVerifier, record: ClaimRecord,
                   prompt_style: str = "full", max_new: int = 96,
                   index: CorpusIndex | None = None) -> Prediction:
    rec = record
    if record.evidence is None and index is not None:
        rec = ClaimRecord(record.id, record.text, record.label,
                          record.distortion, record.image,
                          evidence=bundle_for_record(record, index),
                          reasoning=record.reasoning)
    prompt = render_prompt(rec, prompt_style)
    raw = model.predict(prompt, rec.image, rec.distortion, max_new)
    try:
        verdict = parse_verdict(raw).label
    except UnparseableVerdict:
        verdict = None
    return Prediction(record.id, record.label, raw, verdict)


@dataclass(frozen=True)
class EvalReport:
    metrics: Metrics
    unparseable: int
    seconds: float
    config_digest: str
    predictions: list[Prediction] = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.metrics.accuracy,
            "macro_f1": self.metrics.macro_f1,
            "per_class": self.metrics.per_class,
            "confusion": self.metrics.confusion,
            "n": self.metrics.n,
            "unparseable": self.unparseable,
            "seconds": round(self.seconds, 3),
            "config_digest": self.config_digest,
        }, indent=2, sort_keys=True)


def evaluate(model: ClaimVerifier, records: list[ClaimRecord],
             prompt_style: str = "full", max_new: int = 96,
             index: CorpusIndex | None = None) -> EvalReport:
    """Greedy-decode every record and score parsed verdicts against gold.

    Unparseable outputs score as incorrect rather than being dropped."""
    start = time.perf_counter()
    preds = [predict_record(model, r, prompt_style, max_new, index)
             for r in records]
    metrics = compute_metrics([p.pred_label for p in preds],
                              [p.gold for p in preds])
    return EvalReport(metrics=metrics,
                      unparseable=sum(1 for p in preds if p.verdict is None),
                      seconds=time.perf_counter() - start,
                      config_digest=canonical_digest(model.config.to_json()),
                      predictions=preds)
