"""Structured reasoning protocol: step templates, prompt assembly, verdict parsing.

Every distortion type shares the same first two analysis steps and the same
closing judgement step; the three middle steps specialize per type.  The
"unknown" type routes to the general screening question.  All wording ships
as editable defaults so deployments can re-tune the templates without code
changes.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


class DistortionType(str, Enum):
    TEXTUAL = "textual"
    VISUAL = "visual"
    CROSS_MODAL = "cross_modal"
    MIXED = "mixed"
    UNKNOWN = "unknown"


GENERAL_QUESTION = "Is there any distortion?"
VERDICT_LABELS = ("Real", "Fake")


class UnparseableVerdict(ValueError):
    """Model output did not end with a case-sensitive 'Real' or 'Fake'."""


@dataclass(frozen=True)
class ReasoningStep:
    query: str
    answer: str


@dataclass(frozen=True)
class ReasoningChain:
    steps: tuple[ReasoningStep, ...]
    verdict: str
    explanation: str = ""


@dataclass(frozen=True)
class Verdict:
    label: str
    raw_text: str


SHARED_STEPS = (
    "Analyze the text: summarize the key facts, entities, and events stated "
    "by the claim, and note anything that sounds misleading or fabricated.",
    "Provide a detailed description of the news image: identify the main "
    "subjects, the setting, and any visible text or signage.",
)

CONCLUSION_STEP = ("What is your final judgement? Give a short explanation "
                   "whose last word is either 'Real' or 'Fake'.")

SPECIALIZED_STEPS: dict[DistortionType, tuple[str, ...]] = {
    DistortionType.TEXTUAL: (
        "Check the claim against the direct and inverse evidence: do the "
        "reported facts match?",
        "Evaluate the tone and stance of the text: does it read as neutral "
        "reporting or as exaggerated, emotional, or one-sided?",
        "Decide whether the text misstates, exaggerates, or fabricates any "
        "fact relative to the evidence.",
    ),
    DistortionType.VISUAL: (
        "Inspect the image for manipulation artifacts: unnatural edges, "
        "repeated textures, or lighting and shadow inconsistencies.",
        "Look for signs of generation or splicing: distorted details, "
        "impossible geometry, blended regions.",
        "Judge whether the image is an authentic photograph of the described "
        "scene.",
    ),
    DistortionType.CROSS_MODAL: (
        "Compare the image content with the caption: do the subjects, "
        "places, and events match?",
        "Check the image and caption against the retrieved evidence: is the "
        "image used in its original context?",
        "Decide whether the image is paired with the story it actually "
        "depicts or is recycled from a different event.",
    ),
    DistortionType.MIXED: (
        "Check the text against the evidence for misstated or fabricated "
        "facts.",
        "Inspect the image for manipulation or generation artifacts.",
        "Check whether the image and the text belong together in the same "
        "context.",
    ),
    DistortionType.UNKNOWN: (
        GENERAL_QUESTION,
        "If something is off, identify whether the problem lies in the text, "
        "the image, or their pairing.",
        "Weigh all observations and decide which side the balance falls on.",
    ),
}

DEFAULT_SYSTEM_MESSAGE = (
    "You are a misinformation detection assistant. Task description: a claim "
    "pairs a text with an image; either side may be distorted, or a truthful "
    "image may be recycled for an unrelated story. Using the caption and the "
    "retrieved evidence below, judge whether the claim is real or fake."
)

DEFAULT_RULES = (
    "If a specific type of evidence (direct, inverse, or context) is not "
    "provided, state clearly: 'There is no {type} evidence.'",
    "Retrieved evidence can be noisy; weigh it as a whole instead of "
    "dismissing the claim over a single mismatch.",
    "Your judgement must always end with either 'Real' or 'Fake'.",
)


@dataclass(frozen=True)
class TemplateSet:
    """Editable wording for prompts and step templates."""
    system_message: str = DEFAULT_SYSTEM_MESSAGE
    rules: tuple[str, ...] = DEFAULT_RULES
    shared_steps: tuple[str, ...] = SHARED_STEPS
    specialized: dict[DistortionType, tuple[str, ...]] = field(
        default_factory=lambda: dict(SPECIALIZED_STEPS))
    conclusion: str = CONCLUSION_STEP


DEFAULT_TEMPLATES = TemplateSet()


def template_for(d: DistortionType,
                 templates: TemplateSet = DEFAULT_TEMPLATES) -> list[str]:
    """Ordered sub-queries for one distortion type: shared, specialized, closing."""
    d = DistortionType(d)
    return [*templates.shared_steps, *templates.specialized[d], templates.conclusion]


def _render_evidence(docs) -> str:
    return "; ".join(doc.text for doc in docs)


def evidence_lines(bundle) -> list[str]:
    """One prompt line per evidence kind; absence keeps its literal sentence."""
    lines = []
    for kind, title in (("direct", "Direct Evidence"),
                        ("inverse", "Inverse Evidence"),
                        ("context", "Context Evidence")):
        docs = getattr(bundle, kind)
        body = _render_evidence(docs) if docs else f"There is no {kind} evidence."
        lines.append(f"{title}: {body}")
    return lines


def assemble_prompt(claim_text: str, bundle, d: DistortionType,
                    templates: TemplateSet = DEFAULT_TEMPLATES) -> str:
    """Model-input prompt: system message, rules, caption, evidence, cue.

    A missing evidence list renders the literal sentence
    "There is no {type} evidence."  Pure function of its arguments.
    """
    if not claim_text.strip():
        raise ValueError("claim text must be non-empty")
    d = DistortionType(d)
    lines = [templates.system_message, "Rules:"]
    lines += [f"- {rule}" for rule in templates.rules]
    lines.append(f"Caption: {claim_text}")
    lines += evidence_lines(bundle)
    lines.append("Your judgement:")
    return "\n".join(lines)


_ALPHA_RE = re.compile(r"[A-Za-z]+")


def parse_verdict(text: str) -> Verdict:
    """Final alphabetic token must equal 'Real' or 'Fake', case-sensitively."""
    if not text.strip():
        raise UnparseableVerdict("empty model output")
    tokens = _ALPHA_RE.findall(text)
    if not tokens or tokens[-1] not in VERDICT_LABELS:
        tail = tokens[-1] if tokens else ""
        raise UnparseableVerdict(f"output does not end with Real/Fake (got {tail!r})")
    return Verdict(tokens[-1], text)


def serialize_chain(chain: ReasoningChain, style: str = "full") -> str:
    """Render a chain to text; format version chain-v1.

    "full" interleaves numbered queries and answers; "compact" keeps numbered
    answers only.  Both end with the verdict as the final token so
    parse_verdict recovers it.
    """
    last = f"{chain.explanation} {chain.verdict}".strip()
    if style == "full":
        lines = []
        for i, step in enumerate(chain.steps, start=1):
            lines.append(f"Step {i} - {step.query}")
            lines.append(step.answer)
        lines.append(last)
        return "\n".join(lines)
    if style == "compact":
        parts = [f"{i} . {s.answer}" for i, s in enumerate(chain.steps, start=1)]
        parts.append(last)
        return " ".join(parts)
    raise ValueError(f"unknown serializer style {style!r}")


class ChainParseError(ValueError):
    """Generator output does not follow the chain-v1 full layout."""


_STEP_HEADER_RE = re.compile(r"^Step (\d+) - (.*)$")


def parse_chain(text: str) -> ReasoningChain:
    """Inverse of serialize_chain's full style.

    Expects numbered "Step i - query" headers, each followed by its answer
    lines, with the explanation-plus-verdict line last.
    """
    lines = text.split("\n")
    headers = [(i, m) for i, line in enumerate(lines)
               if (m := _STEP_HEADER_RE.match(line))]
    if not headers:
        raise ChainParseError("no step headers found")
    if [int(m.group(1)) for _, m in headers] != list(range(1, len(headers) + 1)):
        raise ChainParseError("step numbering is not 1..n")
    if headers[0][0] != 0:
        raise ChainParseError("text does not start at Step 1")
    bounds = [i for i, _ in headers] + [len(lines)]
    steps = []
    for (start, m), end in zip(headers, bounds[1:]):
        body = lines[start + 1:end]
        if end == bounds[-1]:
            body = body[:-1]  # the final line is explanation + verdict
        if not body or not "\n".join(body).strip():
            raise ChainParseError(f"step {m.group(1)} has no answer")
        steps.append(ReasoningStep(m.group(2), "\n".join(body)))
    last = lines[-1]
    verdict = parse_verdict(last).label
    explanation = last[:-len(verdict)].rstrip() if last.endswith(verdict) else last
    return ReasoningChain(tuple(steps), verdict, explanation)


def chain_from_template(d: DistortionType, answers: list[str], verdict: str,
                        explanation: str = "",
                        templates: TemplateSet = DEFAULT_TEMPLATES) -> ReasoningChain:
    """Build a well-formed chain by pairing template queries with answers."""
    queries = template_for(d, templates)
    if len(answers) != len(queries):
        raise ValueError(f"expected {len(queries)} answers, got {len(answers)}")
    steps = tuple(ReasoningStep(q, a) for q, a in zip(queries, answers))
    return ReasoningChain(steps, verdict, explanation)


def validate_chain(chain: ReasoningChain, d: DistortionType,
                   templates: TemplateSet = DEFAULT_TEMPLATES) -> list[str]:
    """Machine-checkable review: returns violation strings, empty when clean."""
    violations = []
    queries = [s.query for s in chain.steps]
    want = template_for(d, templates)
    if queries != want:
        violations.append("query-order: steps do not follow the template for "
                          f"{DistortionType(d).value}")
    spec = set(templates.specialized[DistortionType(d)])
    if not spec & set(queries):
        violations.append("missing-specialized: no specialized step present")
    if any(not s.answer.strip() for s in chain.steps):
        violations.append("empty-answer: a step has no answer")
    if chain.verdict not in VERDICT_LABELS:
        violations.append(f"bad-verdict: {chain.verdict!r}")
    return violations
