"""Core ontology and record types for organ-level report labeling.

Public API
----------
- :class:`Organ`, :class:`FindingType`, :class:`UncertaintyCategory`,
  :class:`UrgencyLevel`, :class:`AblationFlag`: controlled vocabularies.
- :class:`Report`: a report split into indexed sentences.
- :class:`OrganFindingLabel`: one extracted label for a (report, organ,
  finding type) triple.
- :class:`LlmConfig`: immutable configuration for the chat endpoint and the
  labeling pipeline.
- :func:`split_sentences`: deterministic rule-based sentence splitter.

All record types are immutable after construction so they can be shared
freely across worker threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum

from .errors import EmptyReportError

# ---------------------------------------------------------------------------
# Controlled vocabularies
# ---------------------------------------------------------------------------


class Organ(Enum):
    """The nine abdominal organs labeled by the pipeline."""

    LIVER = "liver"
    GALLBLADDER = "gallbladder"
    SPLEEN = "spleen"
    RIGHT_KIDNEY = "right_kidney"
    LEFT_KIDNEY = "left_kidney"
    PANCREAS = "pancreas"
    STOMACH = "stomach"
    SMALL_BOWEL = "small_bowel"
    LARGE_BOWEL = "large_bowel"

    @property
    def display(self) -> str:
        """Human-readable name used inside prompts, e.g. ``right kidney``."""
        return self.value.replace("_", " ")

    @property
    def order(self) -> int:
        return _ORGAN_ORDER[self]


_ORGAN_ORDER = {organ: i for i, organ in enumerate(Organ)}


class FindingType(Enum):
    """Finding categories an organ mention can be classified into.

    Declaration order is meaningful: it fixes the choice letters (A..K) used
    in multiple-choice prompts and the canonical sort order of outputs.
    """

    ABSENT = "absent"
    DEVICE = "device"
    POSTSURGICAL = "postsurgical"
    ENLARGED = "enlarged"
    ATROPHY = "atrophy"
    ANATOMY = "anatomy"
    FOCAL = "focal"
    DIFFUSE = "diffuse"
    QUALITY = "quality"
    ADJACENT = "adjacent"
    NORMAL = "normal"

    @property
    def display(self) -> str:
        """Capitalized name used in prompt choice lists."""
        return self.value.capitalize()

    @property
    def non_finding(self) -> bool:
        """True for categories that never produce a label record."""
        return self in _NON_FINDING_TYPES

    @property
    def order(self) -> int:
        return _FINDING_ORDER[self]

    def definition(self, organ: Organ | None = None) -> str:
        """Return the category definition, with the organ name substituted.

        When ``organ`` is None the raw template (with the ``{organ}``
        placeholder) is returned.
        """
        template = FINDING_DEFINITIONS[self]
        if organ is None:
            return template
        return template.format(organ=organ.display)


_FINDING_ORDER = {ft: i for i, ft in enumerate(FindingType)}

# Definition templates spelled out per finding type. The Quality definition
# intentionally has no placeholder: it describes the acquisition, not the
# organ itself.
FINDING_DEFINITIONS: dict[FindingType, str] = {
    FindingType.ABSENT: "{organ} is not present",
    FindingType.DEVICE: "{organ} has support device",
    FindingType.POSTSURGICAL: "{organ} has postsurgical changes",
    FindingType.ENLARGED: "{organ} is enlarged",
    FindingType.ATROPHY: "{organ} has atrophied",
    FindingType.ANATOMY: (
        "uncommonly seen displacements, relative positionings, or shapes of the {organ}"
    ),
    FindingType.FOCAL: "{organ} has a finding that can be measured from its borders",
    FindingType.DIFFUSE: (
        "{organ} has a finding without a well-defined border or shape for "
        "measurement, or that affect large regions"
    ),
    FindingType.QUALITY: "finding about the acquisition process for the organ",
    FindingType.ADJACENT: "an adjacent, extrinsic finding for the {organ}",
    FindingType.NORMAL: "{organ} is normal",
}

_NON_FINDING_TYPES = frozenset({FindingType.NORMAL, FindingType.ADJACENT})


class UncertaintyCategory(Enum):
    """How a finding is asserted in the report.

    Declaration order fixes the choice letters (A..F) in prompts.
    """

    POSSIBLE = "possible"
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NOT_MENTIONED = "not_mentioned"
    AMBIGUOUS_COMPARISON = "ambiguous_comparison"
    BROAD_AREA_ONLY = "broad_area_only"

    @property
    def present(self) -> bool:
        """True when this category counts the finding as present or possible."""
        return self in PRESENT_CATEGORIES

    @property
    def description(self) -> str:
        return UNCERTAINTY_DESCRIPTIONS[self]

    @property
    def order(self) -> int:
        return _UNCERTAINTY_ORDER[self]


_UNCERTAINTY_ORDER = {cat: i for i, cat in enumerate(UncertaintyCategory)}

UNCERTAINTY_DESCRIPTIONS: dict[UncertaintyCategory, str] = {
    UncertaintyCategory.POSSIBLE: "mentioned as possible",
    UncertaintyCategory.POSITIVE: "stated as positive",
    UncertaintyCategory.NEGATIVE: "deemed negative or very unlikely",
    UncertaintyCategory.NOT_MENTIONED: "not directly mentioned",
    UncertaintyCategory.AMBIGUOUS_COMPARISON: (
        "described with ambiguous language when comparing to a previous report "
        "of the same patient"
    ),
    UncertaintyCategory.BROAD_AREA_ONLY: "mentioned only for a broad anatomical area",
}

PRESENT_CATEGORIES = frozenset(
    {UncertaintyCategory.POSITIVE, UncertaintyCategory.POSSIBLE}
)


class UrgencyLevel(IntEnum):
    """Ordinal urgency of a present or possible finding."""

    NORMAL = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3

    @property
    def description(self) -> str:
        return URGENCY_DESCRIPTIONS[self]


URGENCY_DESCRIPTIONS: dict[UrgencyLevel, str] = {
    UrgencyLevel.NORMAL: "normal, expected, or chronic: no action is needed",
    UrgencyLevel.LOW: "low: it could cause problems in the future",
    UrgencyLevel.MEDIUM: "medium: it requires treatment",
    UrgencyLevel.HIGH: "high: it requires immediate treatment",
}


class AblationFlag(Enum):
    """Optional pipeline variants, combinable unless stated otherwise."""

    NO_COT = "no_cot"
    FAST_FILTRATION = "fast_filtration"
    NO_FILTRATION = "no_filtration"
    INDIVIDUAL_TYPE_QUESTIONS = "individual_type_questions"


# ---------------------------------------------------------------------------
# Sentence splitting
# ---------------------------------------------------------------------------

# Tokens before a period that never end a sentence. Lowercased, final period
# stripped; internal periods kept ("e.g"). Tuned for radiology report prose.
_ABBREVIATIONS = frozenset(
    {
        "dr", "mr", "mrs", "ms", "st", "no", "vs", "approx", "fig", "figs",
        "cf", "etc", "e.g", "i.e", "seg", "ser", "max", "min", "pt", "s/p",
    }
)

_TERMINATORS = ".!?"
_CLOSERS = "\"')]"

_WHITESPACE_RUN = re.compile(r"\s+")


def normalize_whitespace(text: str) -> str:
    """Collapse whitespace runs to single spaces and strip the ends."""
    return _WHITESPACE_RUN.sub(" ", text).strip()


def _period_ends_sentence(body: str, i: int) -> bool:
    """Decide whether the period at ``body[i]`` terminates a sentence."""
    j = i + 1
    while j < len(body) and body[j] in _CLOSERS:
        j += 1
    if j >= len(body):
        return True
    if not body[j].isspace():
        # Decimal numbers ("1.2 cm"), dotted abbreviations ("e.g.") and
        # similar in-token periods.
        return False
    # Identify the token immediately before the period.
    k = i - 1
    while k >= 0 and (body[k].isalnum() or body[k] in "./'"):
        k -= 1
    token = body[k + 1 : i].lower()
    if token in _ABBREVIATIONS:
        return False
    if len(token) == 1 and token.isalpha():
        # Single-letter initials such as "J. Smith".
        return False
    # Find the first non-space character after the period.
    while j < len(body) and body[j].isspace():
        j += 1
    if j < len(body) and body[j].islower():
        # Continuations rarely start lowercase in report prose.
        return False
    return True


def split_sentences(text: str) -> list[tuple[int, str]]:
    """Split report text into (index, sentence) pairs.

    The splitter is rule based and deterministic: sentences end at ``.``,
    ``!``, ``?`` or a newline, with guards for decimal numbers, dotted
    abbreviations, and single-letter initials. Indices are contiguous from 0
    and joining the sentences reproduces the input up to whitespace
    normalization.

    Raises:
        EmptyReportError: if the text contains no sentences.
    """
    body = text.strip()
    if not body:
        raise EmptyReportError("report text is empty")
    pieces: list[str] = []
    start = 0
    for i, ch in enumerate(body):
        if ch == "\n":
            pieces.append(body[start:i])
            start = i + 1
        elif ch in "!?":
            pieces.append(body[start : i + 1])
            start = i + 1
        elif ch == "." and _period_ends_sentence(body, i):
            pieces.append(body[start : i + 1])
            start = i + 1
    if start < len(body):
        pieces.append(body[start:])
    sentences = [piece.strip() for piece in pieces if piece.strip()]
    if not sentences:
        raise EmptyReportError("report text contains no sentences")
    return list(enumerate(sentences))


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Report:
    """A free-text report with its deterministic sentence segmentation."""

    id: str
    text: str
    sentences: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("report id must be non-empty")
        for expected, (index, sentence) in enumerate(self.sentences):
            if index != expected:
                raise ValueError(
                    f"sentence indices must be contiguous from 0, got {index} at position {expected}"
                )
            if not sentence.strip():
                raise ValueError(f"sentence {index} is empty")

    @classmethod
    def from_text(cls, report_id: str, text: str) -> "Report":
        """Split ``text`` and build a validated report record."""
        sentences = tuple(split_sentences(text))
        report = cls(id=report_id, text=text, sentences=sentences)
        joined = normalize_whitespace(" ".join(s for _, s in sentences))
        if joined != normalize_whitespace(text):
            raise ValueError(f"sentence split does not reproduce report {report_id!r}")
        return report

    @property
    def sentence_indices(self) -> tuple[int, ...]:
        return tuple(index for index, _ in self.sentences)


@dataclass(frozen=True)
class OrganFindingLabel:
    """One extracted label: a finding type for an organ in one report."""

    report_id: str
    organ: Organ
    finding_type: FindingType
    uncertainty: UncertaintyCategory
    urgency: UrgencyLevel | None = None
    evidence: tuple[int, ...] = ()
    transcript_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.finding_type.non_finding:
            raise ValueError(
                f"{self.finding_type.display} never produces a label record"
            )
        if self.uncertainty.present:
            if self.urgency is None:
                raise ValueError(
                    "urgency is required when the finding is present or possible"
                )
        elif self.urgency is not None:
            raise ValueError(
                "urgency must be absent when the finding is not present or possible"
            )
        canonical = tuple(sorted(set(self.evidence)))
        if canonical != tuple(self.evidence):
            object.__setattr__(self, "evidence", canonical)

    @property
    def sort_key(self) -> tuple[str, int, int]:
        return (self.report_id, self.organ.order, self.finding_type.order)

    def to_json_dict(self) -> dict:
        """Serialize to the documented JSON shape (snake_case, enums as strings)."""
        return {
            "report_id": self.report_id,
            "organ": self.organ.value,
            "finding_type": self.finding_type.value,
            "uncertainty": self.uncertainty.value,
            "urgency": int(self.urgency) if self.urgency is not None else None,
            "evidence": list(self.evidence),
            "transcript_refs": list(self.transcript_refs),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "OrganFindingLabel":
        urgency = data.get("urgency")
        return cls(
            report_id=data["report_id"],
            organ=Organ(data["organ"]),
            finding_type=FindingType(data["finding_type"]),
            uncertainty=UncertaintyCategory(data["uncertainty"]),
            urgency=UrgencyLevel(urgency) if urgency is not None else None,
            evidence=tuple(data.get("evidence", ())),
            transcript_refs=tuple(data.get("transcript_refs", ())),
        )


@dataclass(frozen=True)
class LlmConfig:
    """Configuration for the chat endpoint and the labeling pipeline."""

    endpoint_url: str = ""
    model_name: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024
    retry_limit: int = 3
    parallelism: int = 1
    ablation_flags: frozenset[AblationFlag] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        object.__setattr__(self, "ablation_flags", frozenset(self.ablation_flags))

    def has(self, flag: AblationFlag) -> bool:
        return flag in self.ablation_flags

    @property
    def cot(self) -> bool:
        """True when chain-of-thought phrasing is active."""
        return AblationFlag.NO_COT not in self.ablation_flags

    def to_json_dict(self) -> dict:
        return {
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "retry_limit": self.retry_limit,
            "parallelism": self.parallelism,
            "ablation_flags": sorted(flag.value for flag in self.ablation_flags),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "LlmConfig":
        flags = frozenset(AblationFlag(name) for name in data.get("ablation_flags", ()))
        return cls(
            endpoint_url=data.get("endpoint_url", ""),
            model_name=data.get("model_name", ""),
            temperature=data.get("temperature", 0.0),
            max_tokens=data.get("max_tokens", 1024),
            retry_limit=data.get("retry_limit", 3),
            parallelism=data.get("parallelism", 1),
            ablation_flags=flags,
        )


# Cardinality checks of the controlled vocabularies, evaluated at import.
assert len(Organ) == 9
assert len(FindingType) == 11
assert len(UncertaintyCategory) == 6
assert len(UrgencyLevel) == 4
assert set(FINDING_DEFINITIONS) == set(FindingType)
assert set(UNCERTAINTY_DESCRIPTIONS) == set(UncertaintyCategory)
