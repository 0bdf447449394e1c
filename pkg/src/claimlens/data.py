"""Dataset schema, loaders, and the synthetic claim generator.

The synthetic world is small on purpose: a fixed lexicon of subjects, verb
antonym pairs, and topic objects keeps the vocabulary tiny and every
distortion signal learnable by the desk-scale model.  Fake claims carry a
type-specific signal: an antonym-flipped verb against the direct evidence
(textual), a planted high-intensity pixel block (visual), or image features
drawn from the wrong topic cluster (cross-modal).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evidence import EvidenceBundle, make_doc
from .llm import Vocab
from .model import TrainingExample
from .qava import DEFAULT_QUESTIONS
from .reasoning import (DEFAULT_TEMPLATES, DistortionType, ReasoningChain,
                        TemplateSet, assemble_prompt, chain_from_template,
                        serialize_chain, template_for)
from .vision import ImageInput

SUBJECTS = ("mayor", "coach", "director", "researcher")
VERB_PAIRS = (("opened", "closed"), ("won", "lost"),
              ("approved", "rejected"), ("raised", "cut"))
TOPICS = ("stadium", "museum", "hospital", "festival")

FILLER_TEMPLATES = ("officials shared further notes on the {o}",
                    "archives hold older files about the {o}")
INVERSE_TEMPLATE = "witnesses posted a photo from the {o}"
SIGNAL_TEMPLATE = "reports confirm the {s} {v} the {o}"
CLAIM_TEMPLATE = "the {s} {v} the {o}"
CAPTION_TEMPLATE = "a photo of the {o}"
FRAME_CAPTIONS = {False: "a clean photo frame", True: "a saturated photo frame"}

CORRUPTION_POOL = (
    "weather updates mention light rain tonight",
    "a recipe blog lists seasonal dishes",
    "traffic advisories report delays downtown",
    "a gardening column reviews spring tools",
    "classified listings offer used furniture",
    "the library extended its evening hours",
    "a puzzle page prints this week's solutions",
    "markets closed mixed after a quiet session",
)

@dataclass(frozen=True)
class SynthConfig:
    """Signal-strength calibration for the synthetic world."""
    img_size: int = 32
    artifact_value: float = 1.0  # planted block intensity, above background_max
    artifact_origin: tuple[int, int] = (0, 0)  # fixed fingerprint location
    # whole-frame saturation: smaller blocks are linearly separable but lose
    # the race against format learning on short runs, so the verdict head
    # never couples to them
    artifact_size: int = 32
    background_max: float = 0.6
    feat_rows: int = 4
    feat_dim: int = 64
    cluster_scale: float = 1.0
    cluster_noise: float = 0.1

    def __post_init__(self):
        if self.artifact_value <= self.background_max:
            raise ValueError("artifact must exceed the background range")
        if self.artifact_size < 1:
            raise ValueError("artifact block must have positive size")
        y, x = self.artifact_origin
        limit = self.img_size - self.artifact_size
        if not (0 <= y <= limit and 0 <= x <= limit):
            raise ValueError("artifact origin must keep the block inside the image")
        if self.feat_dim % len(TOPICS):
            raise ValueError("feat_dim must divide evenly into topic blocks")


SYNTH_DEFAULTS = SynthConfig()

CANNED_ANSWERS: dict[DistortionType, tuple[str, ...]] = {
    d: ("the claim names one event",
        "the image shows the relevant scene",
        *{
            DistortionType.TEXTUAL: ("the direct evidence covers the same event",
                                     "the tone reads like plain reporting",
                                     "the stated facts can be checked against the evidence"),
            DistortionType.VISUAL: ("edges and textures were inspected",
                                    "no splicing seams were left unexamined",
                                    "the photographic detail was reviewed"),
            DistortionType.CROSS_MODAL: ("the subjects were compared with the caption",
                                         "the evidence anchors the original context",
                                         "the pairing of image and story was reviewed"),
            DistortionType.MIXED: ("the text was checked against the evidence",
                                   "the image was inspected for artifacts",
                                   "the pairing was checked for context"),
            DistortionType.UNKNOWN: ("all distortion channels were screened",
                                     "the likeliest problem area was narrowed down",
                                     "the observations were weighed together"),
        }[d],
        "the verdict follows from the steps above")
    for d in DistortionType
}


@dataclass(frozen=True)
class ClaimRecord:
    id: str
    text: str
    label: str  # real | fake
    distortion: DistortionType
    image: ImageInput
    evidence: EvidenceBundle | None = None
    reasoning: ReasoningChain | None = None

    def __post_init__(self):
        if self.label not in ("real", "fake"):
            raise ValueError(f"label must be real/fake, got {self.label!r}")


def _topic_centroid(topic: str, sc: SynthConfig) -> np.ndarray:
    idx = TOPICS.index(topic)
    width = sc.feat_dim // len(TOPICS)
    v = np.zeros(sc.feat_dim)
    v[idx * width:(idx + 1) * width] = sc.cluster_scale
    return v


def _topic_features(topic: str, rng: np.random.Generator, sc: SynthConfig) -> np.ndarray:
    base = _topic_centroid(topic, sc)
    return base + rng.normal(scale=sc.cluster_noise, size=(sc.feat_rows, sc.feat_dim))


def _neutral_features(rng: np.random.Generator, sc: SynthConfig) -> np.ndarray:
    return 0.25 + rng.normal(scale=sc.cluster_noise, size=(sc.feat_rows, sc.feat_dim))


def _pixels(has_artifact: bool, rng: np.random.Generator, sc: SynthConfig) -> np.ndarray:
    img = rng.uniform(0.1, sc.background_max, size=(sc.img_size, sc.img_size))
    if has_artifact:
        y, x = sc.artifact_origin
        k = sc.artifact_size
        img[y:y + k, x:x + k] = sc.artifact_value
    return img


def _bundle_for(s: str, v_evidence: str, o: str) -> EvidenceBundle:
    direct = [make_doc("sig", "direct", SIGNAL_TEMPLATE.format(s=s, v=v_evidence, o=o))]
    direct += [make_doc(f"fill{j}", "direct", t.format(o=o))
               for j, t in enumerate(FILLER_TEMPLATES)]
    inverse = [make_doc("inv", "inverse", INVERSE_TEMPLATE.format(o=o))]
    return EvidenceBundle(direct=direct, inverse=inverse, context=[])


_KIND_TAGS = {d: i + 1 for i, d in enumerate(DistortionType)}


def synthesize_dataset(kind: DistortionType, n: int, seed: int,
                       synth: SynthConfig = SYNTH_DEFAULTS) -> list[ClaimRecord]:
    """Balanced real/fake records with a learnable type-specific fake signal."""
    kind = DistortionType(kind)
    if n < 2 or n % 2:
        raise ValueError("n must be even and >= 2")
    records = []
    underlying = (DistortionType.TEXTUAL, DistortionType.VISUAL,
                  DistortionType.CROSS_MODAL)
    for i in range(n):
        rng = np.random.default_rng([seed, _KIND_TAGS[kind], i])
        label = "real" if i % 2 == 0 else "fake"
        signal = kind
        if kind in (DistortionType.MIXED, DistortionType.UNKNOWN):
            signal = underlying[(i // 2) % 3]
        s = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        # claims assert the base verb; contradicting evidence shows its antonym.
        # keeping claims on one column makes the contradiction a linear cue a
        # desk-scale model can pick up in minutes
        pair = VERB_PAIRS[int(rng.integers(len(VERB_PAIRS)))]
        v, antonym = pair
        # cross-modal claims stay on one topic for the same reason: an
        # off-topic image is then a presence cue, not an equality check
        if signal is DistortionType.CROSS_MODAL:
            o = TOPICS[0]
        else:
            o = TOPICS[int(rng.integers(len(TOPICS)))]
        text = CLAIM_TEMPLATE.format(s=s, v=v, o=o)
        if signal is DistortionType.TEXTUAL:
            v_evidence = v if label == "real" else antonym
            image = ImageInput(features=_neutral_features(rng, synth))
        elif signal is DistortionType.VISUAL:
            v_evidence = v
            image = ImageInput(pixels=_pixels(label == "fake", rng, synth))
        else:  # cross-modal: wrong topic cluster for fakes
            v_evidence = v
            topic = o if label == "real" else TOPICS[1 + int(rng.integers(3))]
            image = ImageInput(features=_topic_features(topic, rng, synth))
        records.append(ClaimRecord(
            id=f"{kind.value}-{i:04d}", text=text, label=label, distortion=kind,
            image=image, evidence=_bundle_for(s, v_evidence, o),
            reasoning=desk_chain(kind, label)))
    return records


def class_counts(records: list[ClaimRecord]) -> dict[str, int]:
    counts = {"real": 0, "fake": 0}
    for r in records:
        counts[r.label] += 1
    return counts


# ---------------------------------------------------------------------------
# JSONL schema
# ---------------------------------------------------------------------------

def save_dataset(records: list[ClaimRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {"id": r.id, "text": r.text, "label": r.label,
                   "distortion": r.distortion.value}
            if r.image.pixels is not None:
                row["image_pixels"] = np.asarray(r.image.pixels)[:, :, 0].tolist()
            else:
                row["image_features"] = np.asarray(r.image.features).tolist()
            if r.evidence is not None:
                row["evidence"] = {kind: [d.text for d in docs]
                                   for kind, docs in r.evidence.lists().items()}
            if r.reasoning is not None:
                row["reasoning"] = {
                    "answers": [step.answer for step in r.reasoning.steps],
                    "verdict": r.reasoning.verdict,
                    "explanation": r.reasoning.explanation,
                }
            fh.write(json.dumps(row) + "\n")


def load_dataset(path: str | Path) -> list[ClaimRecord]:
    """Validated records; schema violations name their line."""
    records = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{line_no}: invalid JSON ({e})") from e
        try:
            image_keys = [k for k in ("image_pixels", "image_features", "image_path")
                          if k in row]
            if len(image_keys) != 1:
                raise ValueError(f"need exactly one image field, got {image_keys}")
            if image_keys[0] == "image_pixels":
                image = ImageInput(pixels=np.asarray(row["image_pixels"], dtype=np.float64))
            elif image_keys[0] == "image_features":
                image = ImageInput(features=np.asarray(row["image_features"], dtype=np.float64))
            else:
                image = ImageInput(pixels=_load_image_file(row["image_path"], path))
            evidence = None
            if "evidence" in row:
                ev = row["evidence"]
                evidence = EvidenceBundle(
                    direct=[make_doc(f"d{i}", "direct", t) for i, t in enumerate(ev.get("direct", []))],
                    inverse=[make_doc(f"i{i}", "inverse", t) for i, t in enumerate(ev.get("inverse", []))],
                    context=[make_doc(f"c{i}", "context", t) for i, t in enumerate(ev.get("context", []))])
            distortion = DistortionType(row["distortion"])
            reasoning = None
            if "reasoning" in row:
                rs = row["reasoning"]
                reasoning = chain_from_template(
                    distortion, list(rs["answers"]), rs["verdict"],
                    explanation=rs.get("explanation", ""))
            records.append(ClaimRecord(
                id=str(row["id"]), text=row["text"], label=row["label"],
                distortion=distortion, image=image,
                evidence=evidence, reasoning=reasoning))
        except (KeyError, ValueError, TypeError) as e:
            key = e.args[0] if isinstance(e, KeyError) else e
            raise ValueError(f"{path}:{line_no}: {key}") from e
    return records


def _load_image_file(image_path: str, dataset_path: str | Path) -> np.ndarray:
    from PIL import Image
    p = Path(image_path)
    if not p.is_absolute():
        p = Path(dataset_path).parent / p
    with Image.open(p) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# record -> training example
# ---------------------------------------------------------------------------

def render_prompt(record: ClaimRecord, style: str = "full",
                  templates: TemplateSet = DEFAULT_TEMPLATES) -> str:
    """"full" is the deployment prompt; "compact" drops the preamble to keep
    desk-scale training sequences short."""
    bundle = record.evidence or EvidenceBundle()
    full = assemble_prompt(record.text, bundle, record.distortion, templates)
    if style == "full":
        return full
    if style == "compact":
        return full[full.index("Caption:"):]
    raise ValueError(f"unknown prompt style {style!r}")


def verdict_word(label: str) -> str:
    return "Real" if label == "real" else "Fake"


def desk_chain(d: DistortionType, label: str):
    return chain_from_template(d, list(CANNED_ANSWERS[DistortionType(d)]),
                               verdict_word(label))


def to_example(record: ClaimRecord, prompt_style: str = "full",
               response_style: str = "chain") -> TrainingExample:
    prompt = render_prompt(record, prompt_style)
    if response_style == "verdict":
        response = verdict_word(record.label)
    elif response_style == "chain":
        chain = record.reasoning or desk_chain(record.distortion, record.label)
        response = serialize_chain(chain, style="compact")
    else:
        raise ValueError(f"unknown response style {response_style!r}")
    return TrainingExample(prompt, response, record.image, record.distortion)


# ---------------------------------------------------------------------------
# stage-1/2 corpora and the shared vocabulary
# ---------------------------------------------------------------------------

def synthesize_alignment(n: int, seed: int,
                         synth: SynthConfig = SYNTH_DEFAULTS) -> list[TrainingExample]:
    """Caption pairs for projector warm-up.

    Alternates topic-feature images with raw pixel frames so both encoder
    paths are grounded in language before any verdict training.
    """
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 101, i])
        if i % 2 == 0:
            o = TOPICS[(i // 2) % len(TOPICS)]
            image = ImageInput(features=_topic_features(o, rng, synth))
            caption = CAPTION_TEMPLATE.format(o=o)
        else:
            saturated = (i // 2) % 2 == 1
            image = ImageInput(pixels=_pixels(saturated, rng, synth))
            caption = FRAME_CAPTIONS[saturated]
        out.append(TrainingExample("describe :", caption, image,
                                   DistortionType.UNKNOWN))
    return out


def synthesize_conversation(n: int, seed: int,
                            synth: SynthConfig = SYNTH_DEFAULTS) -> list[TrainingExample]:
    """Short grounded question/answer turns for instruction warm-up."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 102, i])
        o = TOPICS[i % len(TOPICS)]
        if i % 3 == 0:
            image = ImageInput(features=_topic_features(o, rng, synth))
            ex = TrainingExample("question : what place is shown ? answer :",
                                 f"the {o}", image, DistortionType.UNKNOWN)
        elif i % 3 == 1:
            image = ImageInput(features=_topic_features(o, rng, synth))
            ex = TrainingExample("question : is a place visible ? answer :",
                                 f"yes the {o}", image, DistortionType.UNKNOWN)
        else:
            saturated = (i // 3) % 2 == 1
            image = ImageInput(pixels=_pixels(saturated, rng, synth))
            ex = TrainingExample("question : is the frame clean ? answer :",
                                 "no" if saturated else "yes", image,
                                 DistortionType.UNKNOWN)
        out.append(ex)
    return out


def vocab_texts() -> list[str]:
    """Every sentence template the desk world can produce, for Vocab.build."""
    texts = ["Real Fake", "describe :",
             "question : what place is shown ? answer :",
             "question : is a place visible ? answer :",
             "question : is the frame clean ? answer :", "yes no"]
    texts += list(FRAME_CAPTIONS.values())
    texts += [
             DEFAULT_TEMPLATES.system_message, "Rules:", "Caption:",
             "Direct Evidence:", "Inverse Evidence:", "Context Evidence:",
             "Your judgement:", "There is no direct evidence.",
             "There is no inverse evidence.", "There is no context evidence."]
    texts += [f"- {r}" for r in DEFAULT_TEMPLATES.rules]
    texts += list(CORRUPTION_POOL)
    texts += [q for q in DEFAULT_QUESTIONS.values()]
    for d in DistortionType:
        texts += template_for(d)
        texts += list(CANNED_ANSWERS[d])
        texts += [serialize_chain(desk_chain(d, label)) for label in ("real", "fake")]
    for s in SUBJECTS:
        for pair in VERB_PAIRS:
            for v in pair:
                for o in TOPICS:
                    texts.append(CLAIM_TEMPLATE.format(s=s, v=v, o=o))
                    texts.append(SIGNAL_TEMPLATE.format(s=s, v=v, o=o))
    for o in TOPICS:
        texts.append(CAPTION_TEMPLATE.format(o=o))
        texts.append(INVERSE_TEMPLATE.format(o=o))
        texts += [t.format(o=o) for t in FILLER_TEMPLATES]
    return texts


def build_desk_vocab() -> Vocab:
    return Vocab.build(vocab_texts())
