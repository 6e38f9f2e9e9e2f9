"""Prompt construction and answer parsing for the four labeling stages.

Prompts are built from plain-text templates shipped with the package (see
``templates/``) so wording changes stay diffable. Each builder returns a list
of chat messages (``{"role": ..., "content": ...}`` dicts). Parsers map the
follow-up summary answers back to machine-readable values and raise
:class:`UnparseableSummaryError` when nothing maps; they never crash on
arbitrary text.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataFormatError, UnparseableSummaryError
from .schema import (
    FINDING_DEFINITIONS,
    UNCERTAINTY_DESCRIPTIONS,
    URGENCY_DESCRIPTIONS,
    FindingType,
    Organ,
    Report,
    UncertaintyCategory,
    UrgencyLevel,
)

log = logging.getLogger(__name__)

Message = dict

# Appended to every prompt except the first filtration step when
# chain-of-thought phrasing is active.
COT_INSTRUCTION = (
    "Think step-by-step and explain each sentence's medical meaning before "
    "giving your final answer."
)

# Appended when a summary (or a yes/no answer) could not be parsed and the
# question is asked one more time.
STRICT_SUMMARY_SUFFIX = (
    "IMPORTANT: reply with only the requested format, with no explanation and "
    "no other text."
)
STRICT_YES_NO_SUFFIX = "IMPORTANT: answer with exactly one word, yes or no."


class PromptStage(Enum):
    """Identifies which pipeline question a prompt or transcript belongs to."""

    FILTRATION_LIST = "filtration_list"
    FILTRATION_SENTENCE = "filtration_sentence"
    TYPE_ASSESSMENT = "type_assessment"
    PER_TYPE = "per_type"
    UNCERTAINTY = "uncertainty"
    URGENCY = "urgency"
    SUMMARY = "summary"


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

_REQUIRED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "filtration_list": frozenset({"{sentences}", "{organ}"}),
    "filtration_sentence": frozenset({"{cot}", "{sentence}", "{organ}"}),
    "type_assessment": frozenset({"{cot}", "{sentences}", "{organ}", "{choices}"}),
    "per_type": frozenset(
        {"{cot}", "{sentences}", "{organ}", "{type_name}", "{finding_definition}"}
    ),
    "uncertainty": frozenset(
        {"{cot}", "{sentences}", "{organ}", "{type_name}", "{finding_definition}", "{choices}"}
    ),
    "urgency": frozenset(
        {"{cot}", "{sentences}", "{organ}", "{type_name}", "{finding_definition}", "{choices}"}
    ),
    "summary_filtration_list": frozenset({"{previous_answer}"}),
    "summary_type_assessment": frozenset({"{previous_answer}"}),
    "summary_uncertainty": frozenset({"{previous_answer}"}),
    "summary_urgency": frozenset({"{previous_answer}"}),
    "summary_per_type": frozenset({"{previous_answer}"}),
}

TEMPLATE_NAMES: tuple[str, ...] = tuple(_REQUIRED_PLACEHOLDERS)


@dataclass(frozen=True)
class TemplateSet:
    """The prompt templates in effect for a run, keyed by template name."""

    texts: Mapping[str, str]

    @classmethod
    def load(cls, override_dir: str | Path | None = None) -> "TemplateSet":
        """Load packaged templates, replacing any found in ``override_dir``.

        Override files are matched by name (``<template_name>.txt``) and must
        contain the same placeholders as the packaged template.
        """
        base = resources.files("ctlabeler").joinpath("templates")
        texts: dict[str, str] = {}
        for name in TEMPLATE_NAMES:
            text = base.joinpath(f"{name}.txt").read_text(encoding="utf-8")
            if override_dir is not None:
                candidate = Path(override_dir) / f"{name}.txt"
                if candidate.exists():
                    text = candidate.read_text(encoding="utf-8")
            missing = [
                ph for ph in _REQUIRED_PLACEHOLDERS[name] if ph not in text
            ]
            if missing:
                raise DataFormatError(
                    f"template {name!r} is missing placeholders: {', '.join(sorted(missing))}",
                    path=str(override_dir) if override_dir else None,
                )
            texts[name] = text
        return cls(texts=texts)

    def text(self, name: str) -> str:
        return self.texts[name]

    def hashes(self) -> dict[str, str]:
        """sha256 of each template text, for run manifests."""
        return {
            name: hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, text in sorted(self.texts.items())
        }


_DEFAULT_TEMPLATES: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = TemplateSet.load()
    return _DEFAULT_TEMPLATES


# ---------------------------------------------------------------------------
# Choice letters
# ---------------------------------------------------------------------------

_TYPE_LETTERS = "ABCDEFGHIJK"
_UNCERTAINTY_LETTERS = "ABCDEF"
_URGENCY_LETTERS = "ABCD"

LETTER_TO_TYPE: dict[str, FindingType] = {
    letter: ft for letter, ft in zip(_TYPE_LETTERS, FindingType)
}
TYPE_TO_LETTER: dict[FindingType, str] = {ft: letter for letter, ft in LETTER_TO_TYPE.items()}
LETTER_TO_UNCERTAINTY: dict[str, UncertaintyCategory] = {
    letter: cat for letter, cat in zip(_UNCERTAINTY_LETTERS, UncertaintyCategory)
}
UNCERTAINTY_TO_LETTER: dict[UncertaintyCategory, str] = {
    cat: letter for letter, cat in LETTER_TO_UNCERTAINTY.items()
}
LETTER_TO_URGENCY: dict[str, UrgencyLevel] = {
    letter: level for letter, level in zip(_URGENCY_LETTERS, UrgencyLevel)
}
URGENCY_TO_LETTER: dict[UrgencyLevel, str] = {
    level: letter for letter, level in LETTER_TO_URGENCY.items()
}


# ---------------------------------------------------------------------------
# Rendering helpers
# ---------------------------------------------------------------------------


def _escape_quotes(text: str) -> str:
    return text.replace('"', '\\"')


def _numbered_block(sentences: Sequence[tuple[int, str]]) -> str:
    return "\n".join(f"{index}. {text}" for index, text in sentences)


def _quoted_block(sentences: Sequence[tuple[int, str]]) -> str:
    return "\n".join(f'- "{_escape_quotes(text)}"' for _, text in sentences)


def _type_choices_block(organ: Organ) -> str:
    lines = []
    for ft in FindingType:
        lines.append(f'{TYPE_TO_LETTER[ft]}. "{ft.display}": {ft.definition(organ)}')
    return "\n".join(lines)


def _uncertainty_choices_block() -> str:
    lines = []
    for cat in UncertaintyCategory:
        lines.append(
            f"{UNCERTAINTY_TO_LETTER[cat]}. The finding is {UNCERTAINTY_DESCRIPTIONS[cat]}."
        )
    return "\n".join(lines)


def _urgency_choices_block() -> str:
    lines = []
    for level in UrgencyLevel:
        description = URGENCY_DESCRIPTIONS[level]
        lines.append(f"{URGENCY_TO_LETTER[level]}. {description[0].upper()}{description[1:]}.")
    return "\n".join(lines)


def _render(template_text: str, static: dict[str, str], content: dict[str, str]) -> str:
    """Substitute placeholders, static fields first so injected text is inert.

    Content fields (report sentences, previous answers) are substituted last;
    any brace sequences they carry are left untouched.
    """
    out = template_text
    for key, value in static.items():
        out = out.replace("{" + key + "}", value)
    for key, value in content.items():
        out = out.replace("{" + key + "}", value)
    return out.strip()


def _cot_value(cot: bool) -> str:
    return COT_INSTRUCTION + "\n" if cot else ""


def _user_message(content: str) -> list[Message]:
    return [{"role": "user", "content": content}]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_filtration_list_prompt(
    report: Report, organ: Organ, *, templates: TemplateSet | None = None
) -> list[Message]:
    """First filtration step: one prompt listing all report sentences.

    This is the only stage that never carries the chain-of-thought
    instruction.
    """
    if not report.sentences:
        raise ValueError("report has no sentences")
    templates = templates or default_templates()
    content = _render(
        templates.text("filtration_list"),
        static={"organ": organ.display},
        content={"sentences": _numbered_block(report.sentences)},
    )
    return _user_message(content)


def build_filtration_per_sentence_prompt(
    sentence: str,
    organ: Organ,
    *,
    cot: bool = True,
    templates: TemplateSet | None = None,
) -> list[Message]:
    """Second filtration step: yes/no for one sentence the list step skipped."""
    templates = templates or default_templates()
    content = _render(
        templates.text("filtration_sentence"),
        static={"organ": organ.display, "cot": _cot_value(cot)},
        content={"sentence": _escape_quotes(sentence)},
    )
    return _user_message(content)


def build_type_assessment_prompt(
    sentences: Sequence[tuple[int, str]],
    organ: Organ,
    *,
    cot: bool = True,
    individual_type_questions: bool = False,
    templates: TemplateSet | None = None,
) -> list[Message]:
    """Multiple-choice finding type question over the filtered sentences."""
    if individual_type_questions:
        raise ValueError(
            "multiple-choice builder is disabled when individual type questions "
            "are requested; use build_per_type_prompt"
        )
    if not sentences:
        raise ValueError("sentences must be non-empty")
    templates = templates or default_templates()
    content = _render(
        templates.text("type_assessment"),
        static={
            "organ": organ.display,
            "cot": _cot_value(cot),
            "choices": _type_choices_block(organ),
        },
        content={"sentences": _quoted_block(sentences)},
    )
    return _user_message(content)


def build_per_type_prompt(
    sentences: Sequence[tuple[int, str]],
    organ: Organ,
    finding_type: FindingType,
    *,
    cot: bool = True,
    templates: TemplateSet | None = None,
) -> list[Message]:
    """Yes/no question for one finding type (individual type question mode)."""
    if not sentences:
        raise ValueError("sentences must be non-empty")
    templates = templates or default_templates()
    content = _render(
        templates.text("per_type"),
        static={
            "organ": organ.display,
            "cot": _cot_value(cot),
            "type_name": finding_type.display,
            "finding_definition": finding_type.definition(organ),
        },
        content={"sentences": _quoted_block(sentences)},
    )
    return _user_message(content)


def build_uncertainty_prompt(
    sentences: Sequence[tuple[int, str]],
    organ: Organ,
    finding_type: FindingType,
    *,
    cot: bool = True,
    templates: TemplateSet | None = None,
) -> list[Message]:
    """Single-choice question: how is this finding asserted?"""
    if not sentences:
        raise ValueError("sentences must be non-empty")
    templates = templates or default_templates()
    content = _render(
        templates.text("uncertainty"),
        static={
            "organ": organ.display,
            "cot": _cot_value(cot),
            "type_name": finding_type.display,
            "finding_definition": finding_type.definition(organ),
            "choices": _uncertainty_choices_block(),
        },
        content={"sentences": _quoted_block(sentences)},
    )
    return _user_message(content)


def build_urgency_prompt(
    sentences: Sequence[tuple[int, str]],
    organ: Organ,
    finding_type: FindingType,
    *,
    cot: bool = True,
    templates: TemplateSet | None = None,
) -> list[Message]:
    """Single-choice question: how urgent is this present or possible finding?"""
    if not sentences:
        raise ValueError("sentences must be non-empty")
    templates = templates or default_templates()
    content = _render(
        templates.text("urgency"),
        static={
            "organ": organ.display,
            "cot": _cot_value(cot),
            "type_name": finding_type.display,
            "finding_definition": finding_type.definition(organ),
            "choices": _urgency_choices_block(),
        },
        content={"sentences": _quoted_block(sentences)},
    )
    return _user_message(content)


_SUMMARY_TEMPLATE_BY_STAGE = {
    PromptStage.FILTRATION_LIST: "summary_filtration_list",
    PromptStage.TYPE_ASSESSMENT: "summary_type_assessment",
    PromptStage.PER_TYPE: "summary_per_type",
    PromptStage.UNCERTAINTY: "summary_uncertainty",
    PromptStage.URGENCY: "summary_urgency",
}


def build_summary_prompt(
    previous_answer: str,
    stage: PromptStage,
    *,
    strict: bool = False,
    templates: TemplateSet | None = None,
) -> list[Message]:
    """Follow-up prompt asking to condense ``previous_answer`` for parsing.

    The expected output format depends on the summarized stage: sentence
    numbers for the filtration list, choice letters for the type assessment,
    one letter for uncertainty or urgency, and yes/no for individual type
    questions. ``strict`` appends a format-only reminder for the single
    re-ask after a parse failure.
    """
    name = _SUMMARY_TEMPLATE_BY_STAGE.get(stage)
    if name is None:
        raise ValueError(f"stage {stage.value} has no summary format")
    templates = templates or default_templates()
    content = _render(
        templates.text(name),
        static={},
        content={"previous_answer": previous_answer.strip()},
    )
    if strict:
        content = f"{content}\n\n{STRICT_SUMMARY_SUFFIX}"
    return _user_message(content)


# ---------------------------------------------------------------------------
# Parsers
# ---------------------------------------------------------------------------

_NONE_MARKER = re.compile(r"\bnone\b|\bno sentences?\b|\bnothing\b", re.IGNORECASE)
_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_INTEGER = re.compile(r"\d+")
_WORD_TOKEN = re.compile(r"[A-Za-z0-9]+")

_TYPE_NAME_PATTERNS: dict[FindingType, re.Pattern] = {
    FindingType.ABSENT: re.compile(r"\babsen(?:t|ce)\b", re.IGNORECASE),
    FindingType.DEVICE: re.compile(r"\bdevices?\b", re.IGNORECASE),
    FindingType.POSTSURGICAL: re.compile(r"\bpost[- ]?surgical\b", re.IGNORECASE),
    FindingType.ENLARGED: re.compile(r"\benlarg(?:ed|ement|ing)?\b", re.IGNORECASE),
    FindingType.ATROPHY: re.compile(r"\batroph(?:y|ied|ic)\b", re.IGNORECASE),
    FindingType.ANATOMY: re.compile(r"\banatom(?:y|ic|ical)\b", re.IGNORECASE),
    FindingType.FOCAL: re.compile(r"\bfocal\b", re.IGNORECASE),
    FindingType.DIFFUSE: re.compile(r"\bdiffuse\b", re.IGNORECASE),
    FindingType.QUALITY: re.compile(r"\bquality\b", re.IGNORECASE),
    FindingType.ADJACENT: re.compile(r"\badjacent\b", re.IGNORECASE),
    FindingType.NORMAL: re.compile(r"\bnormal\b", re.IGNORECASE),
}

_UNCERTAINTY_KEYWORDS: dict[UncertaintyCategory, re.Pattern] = {
    UncertaintyCategory.POSSIBLE: re.compile(r"\bpossib(?:le|ly|ility)\b", re.IGNORECASE),
    UncertaintyCategory.POSITIVE: re.compile(r"\bpositive(?:ly)?\b", re.IGNORECASE),
    UncertaintyCategory.NEGATIVE: re.compile(
        r"\bnegative\b|\bunlikely\b|\bruled out\b", re.IGNORECASE
    ),
    UncertaintyCategory.NOT_MENTIONED: re.compile(
        r"\bnot (?:directly )?mentioned\b", re.IGNORECASE
    ),
    UncertaintyCategory.AMBIGUOUS_COMPARISON: re.compile(
        r"\bambiguous\b|\bcompar(?:ing|ison|ed)\b", re.IGNORECASE
    ),
    UncertaintyCategory.BROAD_AREA_ONLY: re.compile(r"\bbroad\b", re.IGNORECASE),
}

_URGENCY_KEYWORDS: dict[UrgencyLevel, re.Pattern] = {
    UrgencyLevel.NORMAL: re.compile(
        r"\bno action\b|\bnormal\b|\bexpected\b|\bchronic\b", re.IGNORECASE
    ),
    UrgencyLevel.LOW: re.compile(r"\blow\b|\bcould cause problems\b", re.IGNORECASE),
    UrgencyLevel.MEDIUM: re.compile(
        r"\bmedium\b|\bmoderate\b|\brequires treatment\b", re.IGNORECASE
    ),
    UrgencyLevel.HIGH: re.compile(
        r"\bhigh\b|\bimmediate(?:ly)?\b|\burgent\b", re.IGNORECASE
    ),
}

_LETTER_GUARD_PUNCT = ".,;:)]}\"'"


def _is_pure_choice_list(text: str, letters: str) -> bool:
    tokens = _WORD_TOKEN.findall(text)
    if not tokens:
        return False
    return all(
        token.lower() in ("and", "or")
        or (len(token) == 1 and token.upper() in letters)
        for token in tokens
    )


def _letter_in_context(text: str, start: int, end: int) -> bool:
    """Accept a standalone uppercase letter only in answer-like contexts."""
    rest = text[end:]
    if not rest.strip():
        return True
    if rest[0] in _LETTER_GUARD_PUNCT or rest[0] == "\n":
        return True
    if re.match(r"\s+(and|or)\b", rest, re.IGNORECASE):
        return True
    before = text[:start]
    if re.search(r"(option|choice|answer|letter)s?\s*(?:is|are)?\s*[:\-]?\s*[\"'(]?$", before, re.IGNORECASE):
        return True
    if re.search(r"\b(and|or)\s+[\"'(]?$", before, re.IGNORECASE):
        return True
    return False


def _find_choice_letters(text: str, letters: str) -> list[tuple[int, str]]:
    """Locate choice letters in ``text``; returns (position, letter) pairs.

    Lowercase letters are only honored when the whole text is a bare list of
    choices (for example ``g, h``); in prose, single lowercase letters are
    almost always English words or articles.
    """
    found: list[tuple[int, str]] = []
    if _is_pure_choice_list(text, letters):
        for match in re.finditer(r"\b([A-Za-z])\b", text):
            letter = match.group(1).upper()
            if letter in letters:
                found.append((match.start(), letter))
        return found
    for match in re.finditer(rf"\b([{letters}])\b", text):
        if _letter_in_context(text, match.start(), match.end()):
            found.append((match.start(), match.group(1)))
    return found


def parse_sentence_list(summary_text: str, n_sentences: int) -> set[int]:
    """Parse a filtration summary into selected sentence indices.

    Out-of-range indices are dropped with a warning. An empty answer or an
    explicit "none" means no sentences were selected.
    """
    if n_sentences < 0:
        raise ValueError("n_sentences must be >= 0")
    text = summary_text.strip()
    if not text:
        return set()
    numbers = [int(token) for token in _INTEGER.findall(text)]
    if numbers:
        selected = {n for n in numbers if 0 <= n < n_sentences}
        dropped = sorted({n for n in numbers if not (0 <= n < n_sentences)})
        if dropped:
            log.warning(
                "dropping out-of-range sentence indices %s (report has %d sentences)",
                dropped,
                n_sentences,
            )
        return selected
    if _NONE_MARKER.search(text):
        return set()
    raise UnparseableSummaryError(
        f"no sentence numbers found in summary: {text[:120]!r}"
    )


def parse_yes_no(text: str) -> bool:
    """Extract a yes/no decision; the last occurrence wins.

    Used directly on per-sentence filtration answers and on per-type
    summaries. Free-form reasoning usually states the final decision last.
    """
    matches = _YES_NO.findall(text)
    if not matches:
        raise UnparseableSummaryError(f"no yes/no answer found: {text[:120]!r}")
    return matches[-1].lower() == "yes"


def parse_type_choices(summary_text: str) -> set[FindingType]:
    """Parse a type assessment summary into a set of finding types.

    Accepts choice letters ("C, G"), type names ("focal and postsurgical
    changes"), or an explicit "none" for the empty set.
    """
    text = summary_text.strip()
    if not text:
        raise UnparseableSummaryError("empty type summary")
    chosen: set[FindingType] = set()
    for _, letter in _find_choice_letters(text, _TYPE_LETTERS):
        chosen.add(LETTER_TO_TYPE[letter])
    for ft, pattern in _TYPE_NAME_PATTERNS.items():
        if pattern.search(text):
            chosen.add(ft)
    if chosen:
        return chosen
    if _NONE_MARKER.search(text):
        return set()
    raise UnparseableSummaryError(
        f"no finding type choices found in summary: {text[:120]!r}"
    )


def format_type_choices(choices: Iterable[FindingType]) -> str:
    """Render a choice set the way summaries are expected to look."""
    chosen = sorted(set(choices), key=lambda ft: ft.order)
    if not chosen:
        return "none"
    return ", ".join(TYPE_TO_LETTER[ft] for ft in chosen)


def _parse_single_choice(
    text: str,
    letters: str,
    keyword_patterns: Mapping,
    what: str,
):
    """Shared single-choice parser: earliest letter or keyword match wins."""
    candidates: list[tuple[int, int, object]] = []
    for position, letter in _find_choice_letters(text, letters):
        candidates.append((position, 0, letter))
    for value, pattern in keyword_patterns.items():
        match = pattern.search(text)
        if match:
            candidates.append((match.start(), 1, value))
    if not candidates:
        raise UnparseableSummaryError(f"no {what} answer found: {text[:120]!r}")
    candidates.sort(key=lambda item: (item[0], item[1]))
    return candidates[0]


def parse_uncertainty(summary_text: str) -> UncertaintyCategory:
    """Parse an uncertainty summary; the first unambiguous match wins."""
    text = summary_text.strip()
    if not text:
        raise UnparseableSummaryError("empty uncertainty summary")
    _, kind, value = _parse_single_choice(
        text, _UNCERTAINTY_LETTERS, _UNCERTAINTY_KEYWORDS, "uncertainty"
    )
    if kind == 0:
        return LETTER_TO_UNCERTAINTY[value]
    return value


def parse_urgency(summary_text: str) -> UrgencyLevel:
    """Parse an urgency summary; the first unambiguous match wins.

    Accepts choice letters, the bare level numbers 0..3, or level keywords.
    """
    text = summary_text.strip()
    if not text:
        raise UnparseableSummaryError("empty urgency summary")
    candidates: list[tuple[int, int, UrgencyLevel]] = []
    for position, letter in _find_choice_letters(text, _URGENCY_LETTERS):
        candidates.append((position, 0, LETTER_TO_URGENCY[letter]))
    for match in re.finditer(r"\b([0-3])\b", text):
        candidates.append((match.start(), 0, UrgencyLevel(int(match.group(1)))))
    for level, pattern in _URGENCY_KEYWORDS.items():
        match = pattern.search(text)
        if match:
            candidates.append((match.start(), 1, level))
    if not candidates:
        raise UnparseableSummaryError(f"no urgency answer found: {text[:120]!r}")
    candidates.sort(key=lambda item: (item[0], item[1]))
    return candidates[0][2]
