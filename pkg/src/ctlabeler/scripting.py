"""Scripted-response construction for offline runs and tests.

A :class:`ScriptBuilder` plans, per (report, organ), exactly the prompt
sequence the labeling pipeline will send under a given configuration, and
registers a canned response for each prompt. The resulting
:class:`~ctlabeler.gateway.ScriptedBackend` then drives the pipeline without
any network access, byte-identically on every run.

Canned free-text answers embed the report id, organ, and step so that every
prompt in a corpus gets a distinct, recognizably-addressed response, the
way a cached transcript of a real endpoint would read.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .gateway import DEFAULT_SCRIPT_FALLBACK, ScriptedBackend, fingerprint_messages
from .prompts import (
    PromptStage,
    TemplateSet,
    build_filtration_list_prompt,
    build_filtration_per_sentence_prompt,
    build_per_type_prompt,
    build_summary_prompt,
    build_type_assessment_prompt,
    build_uncertainty_prompt,
    build_urgency_prompt,
    default_templates,
    format_type_choices,
    TYPE_TO_LETTER,
    UNCERTAINTY_TO_LETTER,
    URGENCY_TO_LETTER,
)
from .schema import (
    AblationFlag,
    FindingType,
    LlmConfig,
    Organ,
    OrganFindingLabel,
    Report,
    UncertaintyCategory,
    UrgencyLevel,
)


@dataclass(frozen=True)
class PlannedFinding:
    """A finding the scripted model should assert for a cell."""

    finding_type: FindingType
    uncertainty: UncertaintyCategory
    urgency: UrgencyLevel | None = None

    def __post_init__(self) -> None:
        if self.finding_type.non_finding:
            raise ValueError(
                f"{self.finding_type.value} never yields a label; use extra_types"
            )
        if self.uncertainty.present and self.urgency is None:
            raise ValueError("present findings need a planned urgency")
        if not self.uncertainty.present and self.urgency is not None:
            raise ValueError("urgency is only asked for present findings")


@dataclass(frozen=True)
class CellPlan:
    """What the scripted model answers for one (report, organ)."""

    step1: frozenset[int] = frozenset()
    step2_yes: frozenset[int] = frozenset()
    findings: tuple[PlannedFinding, ...] = ()
    extra_types: tuple[FindingType, ...] = ()

    def __post_init__(self) -> None:
        seen = set()
        for finding in self.findings:
            if finding.finding_type in seen:
                raise ValueError(f"duplicate finding type {finding.finding_type.value}")
            seen.add(finding.finding_type)
        for finding_type in self.extra_types:
            if not finding_type.non_finding:
                raise ValueError(
                    f"extra_types is for non-finding types, got {finding_type.value}"
                )

    def selected(self, n_sentences: int) -> set[int]:
        out = set(self.step1) | set(self.step2_yes)
        bad = [i for i in out if not 0 <= i < n_sentences]
        if bad:
            raise ValueError(f"plan selects out-of-range sentence indices {bad}")
        return out

    @property
    def answered_types(self) -> set[FindingType]:
        return {f.finding_type for f in self.findings} | set(self.extra_types)


def normal_plan(sentence_indices: Iterable[int]) -> CellPlan:
    """A cell whose informative sentences only describe a normal organ."""
    return CellPlan(
        step1=frozenset(sentence_indices), extra_types=(FindingType.NORMAL,)
    )


class ScriptBuilder:
    """Builds a prompt-to-response script mirroring the pipeline's flow."""

    def __init__(
        self, config: LlmConfig | None = None, templates: TemplateSet | None = None
    ):
        self.config = config if config is not None else LlmConfig()
        self.templates = templates if templates is not None else default_templates()
        self.responses: dict[str, str] = {}
        self._plans: dict[tuple[str, str], CellPlan] = {}

    # -- low-level -----------------------------------------------------

    def add(self, messages: list[dict[str, str]], response: str) -> None:
        key = fingerprint_messages(messages)
        existing = self.responses.get(key)
        if existing is not None and existing != response:
            raise ValueError(
                "conflicting responses scripted for one prompt; make the"
                " sentence texts unique per report"
            )
        self.responses[key] = response

    def _ask_with_summary(
        self,
        messages: list[dict[str, str]],
        stage: PromptStage,
        answer_text: str,
        summary_text: str,
    ) -> None:
        self.add(messages, answer_text)
        summary = build_summary_prompt(answer_text, stage, templates=self.templates)
        self.add(summary, summary_text)

    # -- cell scripting --------------------------------------------------

    def script_cell(self, report: Report, organ: Organ, plan: CellPlan) -> None:
        """Register every response the pipeline will request for this cell."""
        self._plans[(report.id, organ.value)] = plan
        cfg = self.config
        templates = self.templates
        n = len(report.sentences)
        who = f"report {report.id}, organ {organ.value}"

        if cfg.has(AblationFlag.NO_FILTRATION):
            selected = set(range(n))
        else:
            selected = plan.selected(n)
            step1 = sorted(plan.step1)
            list_answer = (
                f"Reviewing {who}: the informative sentences are "
                f"{step1 if step1 else 'none'}. These sentences mention the"
                f" {organ.display} directly or describe findings relevant to it."
            )
            list_summary = (
                ", ".join(str(i) for i in step1) if step1 else "none"
            )
            self._ask_with_summary(
                build_filtration_list_prompt(report, organ, templates=templates),
                PromptStage.FILTRATION_LIST,
                list_answer,
                list_summary,
            )
            if not cfg.has(AblationFlag.FAST_FILTRATION):
                for index in sorted(set(range(n)) - plan.step1):
                    verdict = "yes" if index in plan.step2_yes else "no"
                    self.add(
                        build_filtration_per_sentence_prompt(
                            report.sentences[index][1],
                            organ,
                            cot=cfg.cot,
                            templates=templates,
                        ),
                        f"Sentence {index} of {who}: on reflection the answer"
                        f" is {verdict}.",
                    )

        if not selected:
            return
        selection = [(i, report.sentences[i][1]) for i in sorted(selected)]
        types = plan.answered_types

        if cfg.has(AblationFlag.INDIVIDUAL_TYPE_QUESTIONS):
            for finding_type in FindingType:
                verdict = "yes" if finding_type in types else "no"
                answer = (
                    f"Considering {finding_type.display} for {who}: the answer"
                    f" is {verdict}."
                )
                self._ask_with_summary(
                    build_per_type_prompt(
                        selection,
                        organ,
                        finding_type,
                        cot=cfg.cot,
                        templates=templates,
                    ),
                    PromptStage.PER_TYPE,
                    answer,
                    verdict,
                )
        else:
            choice_list = format_type_choices(types)
            answer = (
                f"Assessing {who}: the applicable finding types are"
                f" {choice_list}."
            )
            self._ask_with_summary(
                build_type_assessment_prompt(
                    selection, organ, cot=cfg.cot, templates=templates
                ),
                PromptStage.TYPE_ASSESSMENT,
                answer,
                choice_list,
            )

        for finding in sorted(self.plan_findings(plan), key=lambda f: f.finding_type.order):
            letter = UNCERTAINTY_TO_LETTER[finding.uncertainty]
            answer = (
                f"For the {finding.finding_type.display} finding in {who}: the"
                f" report language supports option {letter}."
            )
            self._ask_with_summary(
                build_uncertainty_prompt(
                    selection,
                    organ,
                    finding.finding_type,
                    cot=cfg.cot,
                    templates=templates,
                ),
                PromptStage.UNCERTAINTY,
                answer,
                letter,
            )
            if finding.uncertainty.present:
                assert finding.urgency is not None
                urgency_letter = URGENCY_TO_LETTER[finding.urgency]
                answer = (
                    f"Urgency of the {finding.finding_type.display} finding in"
                    f" {who}: option {urgency_letter} fits best."
                )
                self._ask_with_summary(
                    build_urgency_prompt(
                        selection,
                        organ,
                        finding.finding_type,
                        cot=cfg.cot,
                        templates=templates,
                    ),
                    PromptStage.URGENCY,
                    answer,
                    urgency_letter,
                )

    @staticmethod
    def plan_findings(plan: CellPlan) -> tuple[PlannedFinding, ...]:
        return plan.findings

    def script_report(self, report: Report, plans: Mapping[Organ, CellPlan]) -> None:
        for organ in Organ:
            self.script_cell(report, organ, plans.get(organ, CellPlan()))

    # -- expectations ----------------------------------------------------

    def expected_labels(
        self, report: Report, organ: Organ, plan: CellPlan
    ) -> list[OrganFindingLabel]:
        """The labels the pipeline should emit for this cell (without
        transcript references, which depend on the store)."""
        n = len(report.sentences)
        if self.config.has(AblationFlag.NO_FILTRATION):
            evidence = tuple(range(n))
        else:
            evidence = tuple(sorted(plan.selected(n)))
        if not evidence:
            return []
        return [
            OrganFindingLabel(
                report_id=report.id,
                organ=organ,
                finding_type=finding.finding_type,
                uncertainty=finding.uncertainty,
                urgency=finding.urgency,
                evidence=evidence,
            )
            for finding in sorted(plan.findings, key=lambda f: f.finding_type.order)
        ]

    def expected_corpus_labels(
        self, reports: Iterable[Report]
    ) -> list[OrganFindingLabel]:
        labels: list[OrganFindingLabel] = []
        for report in reports:
            for organ in Organ:
                plan = self._plans.get((report.id, organ.value))
                if plan is not None:
                    labels.extend(self.expected_labels(report, organ, plan))
        return sorted(labels, key=lambda label: label.sort_key)

    # -- outputs -----------------------------------------------------------

    def backend(self, fallback: str = DEFAULT_SCRIPT_FALLBACK) -> ScriptedBackend:
        return ScriptedBackend(dict(self.responses), fallback=fallback)

    def write(self, path: str | Path) -> None:
        self.backend().to_file(path)


# ---------------------------------------------------------------------------
# Demo corpus
# ---------------------------------------------------------------------------

_SCENARIOS: tuple[str, ...] = (
    "silent",
    "normal",
    "focal_positive",
    "diffuse_possible",
    "negative_mention",
    "postsurgical",
    "device_and_focal",
)


@dataclass(frozen=True)
class DemoCorpus:
    reports: tuple[Report, ...]
    plans: Mapping[tuple[str, str], CellPlan]
    builder: ScriptBuilder = field(repr=False)

    def expected_labels(self) -> list[OrganFindingLabel]:
        return self.builder.expected_corpus_labels(self.reports)


def build_demo_corpus(
    n_reports: int = 6,
    config: LlmConfig | None = None,
    templates: TemplateSet | None = None,
) -> DemoCorpus:
    """A small synthetic corpus with a matching response script.

    Sentences embed the report id so every prompt in the corpus is unique.
    Scenario assignment cycles deterministically over reports and organs.
    """
    builder = ScriptBuilder(config=config, templates=templates)
    reports: list[Report] = []
    plans: dict[tuple[str, str], CellPlan] = {}
    for r in range(n_reports):
        report_id = f"r{r:03d}"
        sentences: list[str] = [
            f"CT abdomen and pelvis for case {report_id} with contrast."
        ]
        organ_scenarios: dict[Organ, tuple[str, int | None]] = {}
        for o, organ in enumerate(Organ):
            scenario = _SCENARIOS[(r + o) % len(_SCENARIOS)]
            if scenario == "silent":
                organ_scenarios[organ] = (scenario, None)
                continue
            index = len(sentences)
            sentences.append(_scenario_sentence(scenario, organ, report_id))
            organ_scenarios[organ] = (scenario, index)
        report = Report.from_text(report_id, " ".join(sentences))
        reports.append(report)
        for organ, (scenario, index) in organ_scenarios.items():
            plan = _scenario_plan(scenario, index)
            plans[(report_id, organ.value)] = plan
            builder.script_cell(report, organ, plan)
    return DemoCorpus(reports=tuple(reports), plans=plans, builder=builder)


def _scenario_sentence(scenario: str, organ: Organ, report_id: str) -> str:
    organ_name = organ.display.capitalize()
    if scenario == "normal":
        return f"{organ_name} is unremarkable in case {report_id}."
    if scenario == "focal_positive":
        return (
            f"{organ_name} contains a 2.3 cm hypodense lesion in case"
            f" {report_id}."
        )
    if scenario == "diffuse_possible":
        return (
            f"{organ_name} attenuation is diffusely decreased in case"
            f" {report_id}, possibly reflecting edema."
        )
    if scenario == "negative_mention":
        return f"No focal lesion is seen in the {organ.display} in case {report_id}."
    if scenario == "postsurgical":
        return (
            f"Postsurgical changes are noted around the {organ.display} in"
            f" case {report_id}."
        )
    if scenario == "device_and_focal":
        return (
            f"A drain projects over the {organ.display} in case {report_id},"
            f" adjacent to a small calcified lesion."
        )
    raise ValueError(f"unknown scenario {scenario!r}")


def _scenario_plan(scenario: str, index: int | None) -> CellPlan:
    if scenario == "silent":
        return CellPlan()
    assert index is not None
    at = frozenset({index})
    if scenario == "normal":
        return normal_plan(at)
    if scenario == "focal_positive":
        return CellPlan(
            step1=at,
            findings=(
                PlannedFinding(
                    FindingType.FOCAL,
                    UncertaintyCategory.POSITIVE,
                    UrgencyLevel.MEDIUM,
                ),
            ),
        )
    if scenario == "diffuse_possible":
        return CellPlan(
            step2_yes=at,
            findings=(
                PlannedFinding(
                    FindingType.DIFFUSE,
                    UncertaintyCategory.POSSIBLE,
                    UrgencyLevel.LOW,
                ),
            ),
        )
    if scenario == "negative_mention":
        return CellPlan(
            step1=at,
            findings=(
                PlannedFinding(FindingType.FOCAL, UncertaintyCategory.NEGATIVE),
            ),
        )
    if scenario == "postsurgical":
        return CellPlan(
            step1=at,
            findings=(
                PlannedFinding(
                    FindingType.POSTSURGICAL,
                    UncertaintyCategory.POSITIVE,
                    UrgencyLevel.NORMAL,
                ),
            ),
        )
    if scenario == "device_and_focal":
        return CellPlan(
            step1=at,
            findings=(
                PlannedFinding(
                    FindingType.DEVICE,
                    UncertaintyCategory.POSITIVE,
                    UrgencyLevel.LOW,
                ),
                PlannedFinding(
                    FindingType.FOCAL,
                    UncertaintyCategory.POSSIBLE,
                    UrgencyLevel.MEDIUM,
                ),
            ),
        )
    raise ValueError(f"unknown scenario {scenario!r}")
