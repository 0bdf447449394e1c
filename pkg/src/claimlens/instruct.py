"""Instruction-data construction: generate, verify against gold, hint, retry.

A generator backend drafts a reasoning chain for each claim.  The draft is
accepted only when its verdict matches the gold label; otherwise the prompt
is retried with an appended hint that names the ground truth, up to a bounded
number of rounds.  Rejected drafts are filtered out of the instruction file
but counted in the report.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .data import ClaimRecord, verdict_word
from .evidence import EvidenceBundle
from .reasoning import (DEFAULT_TEMPLATES, ChainParseError, DistortionType,
                        ReasoningChain, ReasoningStep, TemplateSet,
                        UnparseableVerdict, VERDICT_LABELS, evidence_lines,
                        parse_chain, serialize_chain, template_for,
                        validate_chain)

log = logging.getLogger("claimlens.instruct")

GEN_SYSTEM_MESSAGE = (
    "You are an expert fact-checking assistant. Work through every step "
    "below in order, writing your answer under a matching \"Step i - ...\" "
    "header, and finish with one line whose last word is your judgement.")


class TransportError(RuntimeError):
    """Backend unreachable or speaking the wrong protocol; not a rejection."""


@dataclass(frozen=True)
class HintPolicy:
    max_rounds: int = 3
    hint_template: str = ("Hint: the verified ground-truth label for this "
                          "claim is {gold}. Your judgement must end with {gold}.")

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if "{gold}" not in self.hint_template:
            raise ValueError("hint template must reference {gold}")

    def hint_for(self, gold: str) -> str:
        return self.hint_template.format(gold=gold)


@dataclass(frozen=True)
class InstructRecord:
    claim_id: str
    distortion: DistortionType
    prompt: str  # the last prompt sent, hint included when one was used
    chain: ReasoningChain | None  # None only when nothing parseable came back
    gold_label: str
    rounds_used: int
    status: str  # accepted | rejected

    def __post_init__(self):
        if self.gold_label not in VERDICT_LABELS:
            raise ValueError(f"gold label must be Real/Fake, got {self.gold_label!r}")
        if self.status not in ("accepted", "rejected"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "accepted":
            if self.chain is None or self.chain.verdict != self.gold_label:
                raise ValueError("accepted record with mismatched verdict")

    def to_json(self) -> str:
        return json.dumps({
            "id": self.claim_id,
            "distortion": self.distortion.value,
            "prompt": self.prompt,
            "steps": [{"query": s.query, "answer": s.answer}
                      for s in (self.chain.steps if self.chain else ())],
            "verdict": self.chain.verdict if self.chain else None,
            "rounds_used": self.rounds_used,
        }, sort_keys=True)


class GeneratorBackend(Protocol):
    def generate(self, prompt: str) -> str: ...


def build_gen_prompt(claim_text: str, bundle: EvidenceBundle, d: DistortionType,
                     hint: str | None = None,
                     templates: TemplateSet = DEFAULT_TEMPLATES) -> str:
    """Generation prompt: step list, then the claim inputs, then the cue."""
    if not claim_text.strip():
        raise ValueError("claim text must be non-empty")
    lines = [GEN_SYSTEM_MESSAGE]
    for i, query in enumerate(template_for(d, templates), start=1):
        lines.append(f"Step {i} - {query}")
    lines.append(f"Caption: {claim_text}")
    lines += evidence_lines(bundle)
    if hint is not None:
        lines.append(hint)
    lines.append("Your judgement:")
    return "\n".join(lines)


def generate_and_verify(claim_id: str, claim_text: str, bundle: EvidenceBundle,
                        d: DistortionType, gold: str, backend: GeneratorBackend,
                        policy: HintPolicy = HintPolicy(),
                        templates: TemplateSet = DEFAULT_TEMPLATES) -> InstructRecord:
    """Draft-verify loop; the hint appears from the second round onward."""
    if gold not in VERDICT_LABELS:
        raise ValueError(f"gold must be Real/Fake, got {gold!r}")
    d = DistortionType(d)
    last_chain = None
    prompt = ""
    for round_no in range(1, policy.max_rounds + 1):
        hint = policy.hint_for(gold) if round_no >= 2 else None
        prompt = build_gen_prompt(claim_text, bundle, d, hint, templates)
        text = backend.generate(prompt)
        try:
            chain = parse_chain(text)
        except (ChainParseError, UnparseableVerdict):
            continue
        last_chain = chain
        if chain.verdict == gold:
            return InstructRecord(claim_id, d, prompt, chain, gold,
                                  round_no, "accepted")
    return InstructRecord(claim_id, d, prompt, last_chain, gold,
                          policy.max_rounds, "rejected")


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

_CAPTION_RE = re.compile(r"^Caption: (.*)$", re.MULTILINE)
_HINT_GOLD_RE = re.compile(r"^Hint: .*(Real|Fake)\.$", re.MULTILINE)

STUB_MODES = ("agree", "need_hint", "never", "mixed")


class StubBackend:
    """Deterministic generator: echoes the prompt's own step structure.

    Modes: "agree" answers with the right verdict at once, "need_hint" only
    when the prompt carries a hint, "never" is always wrong, and "mixed"
    assigns one of those per claim from a seeded hash.  Captions listed in
    fail_captions raise TransportError instead, simulating a dead backend.
    """

    def __init__(self, mode: str = "agree",
                 gold_by_caption: dict[str, str] | None = None, seed: int = 0,
                 fail_captions: frozenset[str] = frozenset()):
        if mode not in STUB_MODES:
            raise ValueError(f"mode must be one of {STUB_MODES}")
        self.mode = mode
        self.gold_by_caption = dict(gold_by_caption or {})
        self.seed = seed
        self.fail_captions = frozenset(fail_captions)
        self.calls = 0

    def _gold(self, caption: str) -> str:
        try:
            return self.gold_by_caption[caption]
        except KeyError:
            raise ValueError(f"stub has no gold label for caption {caption!r}")

    def _bucket(self, caption: str) -> str:
        digest = hashlib.md5(f"{self.seed}:{caption}".encode()).digest()
        return ("agree", "agree", "need_hint", "never")[digest[0] % 4]

    def generate(self, prompt: str) -> str:
        self.calls += 1
        m = _CAPTION_RE.search(prompt)
        if m is None:
            raise TransportError("prompt has no caption line")
        caption = m.group(1)
        if caption in self.fail_captions:
            raise TransportError(f"injected failure for {caption!r}")
        hint = _HINT_GOLD_RE.search(prompt)
        gold = self._gold(caption)
        wrong = "Fake" if gold == "Real" else "Real"
        mode = self._bucket(caption) if self.mode == "mixed" else self.mode
        if mode == "agree":
            verdict = gold
        elif mode == "need_hint":
            verdict = hint.group(1) if hint else wrong
        else:  # never
            verdict = wrong
        queries = [sm.group(2) for line in prompt.split("\n")
                   if (sm := re.match(r"^Step (\d+) - (.*)$", line))]
        steps = tuple(ReasoningStep(q, f"the evidence was reviewed for step {i}")
                      for i, q in enumerate(queries, start=1))
        chain = ReasoningChain(steps, verdict, "on balance the claim reads")
        return serialize_chain(chain, style="full")


class HttpBackend:
    """Chat-completion HTTP client with bounded retries and a hard timeout."""

    def __init__(self, url: str, model: str = "generator",
                 api_key_env: str = "CLAIMLENS_API_KEY", timeout: float = 10.0,
                 max_retries: int = 2):
        if max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries

    def generate(self, prompt: str) -> str:
        import requests
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.model,
                "messages": [{"role": "user", "content": prompt}]}
        log.debug("POST %s headers=%s body=%s", self.url,
                  {**headers, "Authorization": "<redacted>"} if key else headers,
                  json.dumps(body)[:2000])
        last_error = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(self.url, json=body, headers=headers,
                                     timeout=self.timeout)
            except requests.RequestException as e:
                last_error = f"attempt {attempt + 1}: {e}"
                continue
            if resp.status_code >= 500:
                last_error = f"attempt {attempt + 1}: status {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(f"status {resp.status_code}: {resp.text[:200]}")
            try:
                payload = resp.json()
                content = payload["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise TransportError(f"malformed response body: {e}") from e
            if not isinstance(content, str):
                raise TransportError("response content is not text")
            log.debug("response %d bytes", len(content))
            return content
        raise TransportError(f"backend unreachable after "
                             f"{self.max_retries + 1} attempts ({last_error})")


# ---------------------------------------------------------------------------
# batch pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineReport:
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    transport_errors: list[tuple[str, str]] = field(default_factory=list)
    records: list[InstructRecord] = field(default_factory=list)

    def bump(self, distortion: str, outcome: str) -> None:
        row = self.counts.setdefault(
            distortion, {"accepted": 0, "rejected": 0, "transport": 0})
        row[outcome] += 1

    def total(self, outcome: str | None = None) -> int:
        if outcome is None:
            return sum(sum(row.values()) for row in self.counts.values())
        return sum(row[outcome] for row in self.counts.values())

    def to_json(self) -> str:
        return json.dumps({
            "counts": self.counts,
            "accepted": self.total("accepted"),
            "rejected": self.total("rejected"),
            "transport": self.total("transport"),
            "transport_errors": [{"id": i, "error": e}
                                 for i, e in self.transport_errors],
        }, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'distortion':<12} {'accepted':>8} {'rejected':>8} {'transport':>9}"]
        for d in sorted(self.counts):
            row = self.counts[d]
            lines.append(f"{d:<12} {row['accepted']:>8} {row['rejected']:>8} "
                         f"{row['transport']:>9}")
        lines.append(f"{'total':<12} {self.total('accepted'):>8} "
                     f"{self.total('rejected'):>8} {self.total('transport'):>9}")
        return "\n".join(lines)


def run_pipeline(records: list[ClaimRecord], backend: GeneratorBackend,
                 policy: HintPolicy = HintPolicy(), workers: int = 1,
                 out_path: str | Path | None = None,
                 templates: TemplateSet = DEFAULT_TEMPLATES) -> PipelineReport:
    """Process every record; emit accepted ones, in input order, as JSONL.

    Worker count changes wall-clock behaviour only: the merge step follows
    input order, so the output file is byte-identical for any W.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")

    def work(record: ClaimRecord):
        bundle = record.evidence or EvidenceBundle()
        gold = verdict_word(record.label)
        try:
            return generate_and_verify(record.id, record.text, bundle,
                                       record.distortion, gold, backend,
                                       policy, templates)
        except TransportError as e:
            return (record, str(e))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(work, records))

    report = PipelineReport()
    for result in results:
        if isinstance(result, InstructRecord):
            report.records.append(result)
            report.bump(result.distortion.value, result.status)
        else:
            record, error = result
            report.bump(record.distortion.value, "transport")
            report.transport_errors.append((record.id, error))
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for rec in report.records:
                if rec.status == "accepted":
                    fh.write(rec.to_json() + "\n")
    return report


INSPECTION_CHECKS = ("query-order", "missing-specialized", "empty-answer",
                     "bad-verdict")


def sample_for_inspection(records: list[InstructRecord], n: int = 200,
                          seed: int = 0) -> tuple[list[InstructRecord], str]:
    """Seeded uniform subset plus a review checklist with automatic columns
    pre-filled from validate_chain; manual notes stay blank."""
    import numpy as np
    if n > len(records):
        raise ValueError(f"cannot sample {n} from {len(records)} records")
    idx = sorted(np.random.default_rng([seed]).choice(len(records), size=n,
                                                      replace=False).tolist())
    subset = [records[i] for i in idx]
    header = "id\tdistortion\tverdict\t" + "\t".join(INSPECTION_CHECKS) + "\tnotes"
    lines = [header]
    for rec in subset:
        if rec.chain is None:
            flags = {check: "FAIL" for check in INSPECTION_CHECKS}
            verdict = "-"
        else:
            violations = validate_chain(rec.chain, rec.distortion)
            flags = {check: "ok" for check in INSPECTION_CHECKS}
            for v in violations:
                flags[v.split(":", 1)[0]] = "FAIL"
            verdict = rec.chain.verdict
        lines.append("\t".join([rec.claim_id, rec.distortion.value, verdict,
                                *[flags[c] for c in INSPECTION_CHECKS], ""]))
    return subset, "\n".join(lines) + "\n"
