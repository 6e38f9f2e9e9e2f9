"""Four-stage labeling pipeline with checkpointed batch execution.

Stage order per (report, organ) cell:

1. Sentence filtration: one list prompt over every sentence, then one yes/no
   prompt for each sentence the list step skipped; the selection is the
   union of both steps.
2. Finding type assessment: one multiple-choice prompt over the filtered
   sentences (or one yes/no prompt per type when individual type questions
   are enabled).
3. Uncertainty assessment, once per returned finding type.
4. Urgency assessment, only for findings judged present or possible.

Every prompt except the per-sentence filtration question is followed by a
summary prompt whose answer is parsed; a parse failure triggers exactly one
stricter re-ask before the cell is marked failed. Cells run independently:
one failed cell never aborts the rest of the corpus, and a checkpoint file
makes interrupted runs resumable with identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import (
    CheckpointError,
    CtLabelerError,
    DataFormatError,
    DuplicateReportIdError,
    GatewayError,
    PipelineCellError,
    UnparseableSummaryError,
)
from .gateway import ChatBackend, TranscriptStore, chat
from .prompts import (
    STRICT_YES_NO_SUFFIX,
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
    parse_sentence_list,
    parse_type_choices,
    parse_uncertainty,
    parse_urgency,
    parse_yes_no,
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

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def config_fingerprint(config: LlmConfig, templates: TemplateSet) -> str:
    """Hash of everything that must match for checkpointed cells to be reusable."""
    payload = json.dumps(
        {"config": config.to_json_dict(), "templates": templates.hashes()},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


class Checkpoint:
    """Per-cell completion state, persisted after every finished cell.

    Completed cells are never reverted, so a resumed run reuses their stored
    labels verbatim and reproduces the uninterrupted output.
    """

    def __init__(
        self,
        path: Path | None,
        corpus_id: str,
        fingerprint: str,
        cells: dict[str, dict] | None = None,
    ):
        self.path = path
        self.corpus_id = corpus_id
        self.fingerprint = fingerprint
        self._cells: dict[str, dict] = cells or {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(report_id: str, organ: Organ) -> str:
        return f"{report_id}::{organ.value}"

    @classmethod
    def open(
        cls,
        path: str | Path | None,
        corpus_id: str,
        fingerprint: str,
        *,
        resume: bool = False,
    ) -> "Checkpoint":
        path = Path(path) if path is not None else None
        if path is not None and resume and path.exists():
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
            if data.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"checkpoint {path} has unsupported format_version "
                    f"{data.get('format_version')!r}"
                )
            if data.get("corpus_id") != corpus_id:
                raise CheckpointError(
                    f"checkpoint {path} belongs to corpus {data.get('corpus_id')!r}, "
                    f"not {corpus_id!r}"
                )
            if data.get("config_fingerprint") != fingerprint:
                raise CheckpointError(
                    f"checkpoint {path} was written under a different configuration "
                    "or template set; refusing to mix outputs"
                )
            return cls(path, corpus_id, fingerprint, cells=data.get("cells", {}))
        checkpoint = cls(path, corpus_id, fingerprint)
        if path is not None:
            with checkpoint._lock:
                checkpoint._save_locked()
        return checkpoint

    def is_done(self, report_id: str, organ: Organ) -> bool:
        cell = self._cells.get(self._key(report_id, organ))
        return bool(cell) and cell.get("status") == "done"

    def record(
        self,
        report_id: str,
        organ: Organ,
        status: str,
        labels: Sequence[OrganFindingLabel] = (),
        error: str | None = None,
    ) -> None:
        key = self._key(report_id, organ)
        with self._lock:
            existing = self._cells.get(key)
            if existing and existing.get("status") == "done":
                return
            cell: dict = {"status": status}
            if status == "done":
                cell["labels"] = [label.to_json_dict() for label in labels]
            if error is not None:
                cell["error"] = error
            self._cells[key] = cell
            self._save_locked()

    def _save_locked(self) -> None:
        if self.path is None:
            return
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "corpus_id": self.corpus_id,
            "config_fingerprint": self.fingerprint,
            "cells": self._cells,
        }
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.path)

    def done_labels(self) -> list[OrganFindingLabel]:
        labels: list[OrganFindingLabel] = []
        for cell in self._cells.values():
            if cell.get("status") == "done":
                labels.extend(
                    OrganFindingLabel.from_json_dict(item)
                    for item in cell.get("labels", ())
                )
        return sorted(labels, key=lambda label: label.sort_key)

    def snapshot(self) -> dict[str, dict]:
        with self._lock:
            return json.loads(json.dumps(self._cells))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellFailure:
    """Why one (report, organ) cell produced no labels."""

    report_id: str
    organ: Organ
    stage: str
    message: str
    kind: str = ""


@dataclass(frozen=True)
class PipelineRun:
    """Everything a batch run produced."""

    corpus_id: str
    config: LlmConfig
    checkpoint: dict[str, dict]
    outputs: tuple[OrganFindingLabel, ...]
    failures: tuple[CellFailure, ...]


class _CellTrace:
    """Issues the exchanges for one cell and tracks their transcript ids.

    Ids are deterministic functions of (report, organ, stage, item), so a
    resumed or differently parallelized run assigns identical ids and the
    final label files match byte for byte.
    """

    def __init__(self, labeler: "Labeler", report_id: str, organ: Organ):
        self.labeler = labeler
        self.report_id = report_id
        self.organ = organ
        self.shared_refs: list[str] = []
        self.type_refs: dict[FindingType, list[str]] = {}

    def refs_for(self, finding_type: FindingType) -> tuple[str, ...]:
        return tuple(self.shared_refs + self.type_refs.get(finding_type, []))

    def _scope_list(self, finding_type: FindingType | None) -> list[str]:
        if finding_type is None:
            return self.shared_refs
        return self.type_refs.setdefault(finding_type, [])

    def _ask(
        self,
        messages,
        tag: str,
        stage: PromptStage,
        *,
        finding_type: FindingType | None = None,
        sentence_index: int | None = None,
        summary_of: PromptStage | None = None,
        retry: bool = False,
    ) -> str:
        tags: dict[str, object] = {
            "report_id": self.report_id,
            "organ": self.organ.value,
            "stage": stage.value,
        }
        if finding_type is not None:
            tags["finding_type"] = finding_type.value
        if sentence_index is not None:
            tags["sentence_index"] = sentence_index
        if summary_of is not None:
            tags["summary_of"] = summary_of.value
        if retry:
            tags["retry"] = True
        try:
            exchange = chat(
                messages,
                self.labeler.config,
                self.labeler.backend,
                sleep=self.labeler._sleep,
            )
        except GatewayError as exc:
            raise PipelineCellError(
                self.report_id, self.organ.value, stage.value, exc
            ) from exc
        ref = self.labeler.store.put(
            exchange, id=f"{self.report_id}/{self.organ.value}/{tag}", tags=tags
        )
        self._scope_list(finding_type).append(ref)
        return exchange.response

    def ask_and_summarize(
        self,
        messages,
        stage: PromptStage,
        tag: str,
        parse_fn: Callable[[str], object],
        *,
        finding_type: FindingType | None = None,
    ):
        """Question, summary, parse; one stricter summary re-ask on failure."""
        templates = self.labeler.templates
        answer = self._ask(messages, tag, stage, finding_type=finding_type)
        summary = self._ask(
            build_summary_prompt(answer, stage, templates=templates),
            f"{tag}/summary",
            PromptStage.SUMMARY,
            finding_type=finding_type,
            summary_of=stage,
        )
        try:
            return parse_fn(summary)
        except UnparseableSummaryError:
            log.warning(
                "unparseable %s summary for report %s organ %s; asking once more",
                stage.value,
                self.report_id,
                self.organ.value,
            )
        strict = self._ask(
            build_summary_prompt(answer, stage, strict=True, templates=templates),
            f"{tag}/summary/retry",
            PromptStage.SUMMARY,
            finding_type=finding_type,
            summary_of=stage,
            retry=True,
        )
        try:
            return parse_fn(strict)
        except UnparseableSummaryError as exc:
            raise PipelineCellError(
                self.report_id, self.organ.value, stage.value, exc
            ) from exc

    def ask_yes_no(self, messages, tag: str, stage: PromptStage, **kwargs) -> bool:
        """Direct yes/no question with no summary step; one strict re-ask."""
        answer = self._ask(messages, tag, stage, **kwargs)
        try:
            return parse_yes_no(answer)
        except UnparseableSummaryError:
            log.warning(
                "unparseable yes/no for report %s organ %s (%s); asking once more",
                self.report_id,
                self.organ.value,
                tag,
            )
        strict_messages = [
            {
                "role": "user",
                "content": f"{messages[0]['content']}\n\n{STRICT_YES_NO_SUFFIX}",
            }
        ]
        answer = self._ask(
            strict_messages, f"{tag}/retry", stage, retry=True, **kwargs
        )
        try:
            return parse_yes_no(answer)
        except UnparseableSummaryError as exc:
            raise PipelineCellError(
                self.report_id, self.organ.value, stage.value, exc
            ) from exc


class Labeler:
    """Runs the four-stage pipeline against a chat backend."""

    def __init__(
        self,
        config: LlmConfig,
        backend: ChatBackend,
        *,
        templates: TemplateSet | None = None,
        store: TranscriptStore | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.backend = backend
        self.templates = templates if templates is not None else default_templates()
        self.store = store if store is not None else TranscriptStore()
        self._sleep = sleep

    # -- stage 1 -----------------------------------------------------------

    def filter_sentences(
        self, report: Report, organ: Organ, *, trace: _CellTrace | None = None
    ) -> set[int]:
        """Select the sentence indices that are informative about ``organ``.

        Step one lists every sentence in a single prompt; step two asks a
        yes/no question for each sentence step one did not select. The
        result is the union. ``no_filtration`` returns every index without
        any exchange; ``fast_filtration`` skips step two.
        """
        trace = trace or _CellTrace(self, report.id, organ)
        all_indices = set(report.sentence_indices)
        if self.config.has(AblationFlag.NO_FILTRATION):
            return all_indices
        selected = set(
            trace.ask_and_summarize(
                build_filtration_list_prompt(report, organ, templates=self.templates),
                PromptStage.FILTRATION_LIST,
                "filtration_list",
                lambda text: parse_sentence_list(text, len(report.sentences)),
            )
        )
        if not self.config.has(AblationFlag.FAST_FILTRATION):
            for index in sorted(all_indices - selected):
                asked = trace.ask_yes_no(
                    build_filtration_per_sentence_prompt(
                        report.sentences[index][1],
                        organ,
                        cot=self.config.cot,
                        templates=self.templates,
                    ),
                    f"filtration_sentence/{index}",
                    PromptStage.FILTRATION_SENTENCE,
                    sentence_index=index,
                )
                if asked:
                    selected.add(index)
        return selected

    # -- stage 2 -----------------------------------------------------------

    def assess_finding_types(
        self,
        sentences: Sequence[tuple[int, str]],
        organ: Organ,
        *,
        trace: _CellTrace | None = None,
        report_id: str = "-",
    ) -> set[FindingType]:
        """Classify the filtered sentences into finding types.

        An empty selection short-circuits to Normal without any exchange.
        """
        if not sentences:
            return {FindingType.NORMAL}
        trace = trace or _CellTrace(self, report_id, organ)
        if self.config.has(AblationFlag.INDIVIDUAL_TYPE_QUESTIONS):
            chosen: set[FindingType] = set()
            for ft in FindingType:
                answer = trace.ask_and_summarize(
                    build_per_type_prompt(
                        sentences, organ, ft, cot=self.config.cot, templates=self.templates
                    ),
                    PromptStage.PER_TYPE,
                    f"per_type/{ft.value}",
                    parse_yes_no,
                    finding_type=ft,
                )
                if answer:
                    chosen.add(ft)
            return chosen
        return trace.ask_and_summarize(
            build_type_assessment_prompt(
                sentences, organ, cot=self.config.cot, templates=self.templates
            ),
            PromptStage.TYPE_ASSESSMENT,
            "type_assessment",
            parse_type_choices,
        )

    # -- stage 3 -----------------------------------------------------------

    def assess_uncertainty(
        self,
        sentences: Sequence[tuple[int, str]],
        organ: Organ,
        finding_type: FindingType,
        *,
        trace: _CellTrace | None = None,
        report_id: str = "-",
    ) -> UncertaintyCategory:
        if not sentences:
            raise ValueError("sentences must be non-empty")
        trace = trace or _CellTrace(self, report_id, organ)
        return trace.ask_and_summarize(
            build_uncertainty_prompt(
                sentences, organ, finding_type, cot=self.config.cot, templates=self.templates
            ),
            PromptStage.UNCERTAINTY,
            f"uncertainty/{finding_type.value}",
            parse_uncertainty,
            finding_type=finding_type,
        )

    # -- stage 4 -----------------------------------------------------------

    def assess_urgency(
        self,
        sentences: Sequence[tuple[int, str]],
        organ: Organ,
        finding_type: FindingType,
        *,
        trace: _CellTrace | None = None,
        report_id: str = "-",
    ) -> UrgencyLevel:
        if not sentences:
            raise ValueError("sentences must be non-empty")
        trace = trace or _CellTrace(self, report_id, organ)
        return trace.ask_and_summarize(
            build_urgency_prompt(
                sentences, organ, finding_type, cot=self.config.cot, templates=self.templates
            ),
            PromptStage.URGENCY,
            f"urgency/{finding_type.value}",
            parse_urgency,
            finding_type=finding_type,
        )

    # -- orchestration -----------------------------------------------------

    def label_cell(self, report: Report, organ: Organ) -> list[OrganFindingLabel]:
        """Run all four stages for one (report, organ) cell."""
        trace = _CellTrace(self, report.id, organ)
        filtered = self.filter_sentences(report, organ, trace=trace)
        selection = [(i, report.sentences[i][1]) for i in sorted(filtered)]
        types = self.assess_finding_types(selection, organ, trace=trace)
        evidence = tuple(sorted(filtered))
        labels: list[OrganFindingLabel] = []
        for ft in sorted(types, key=lambda t: t.order):
            if ft.non_finding:
                continue
            uncertainty = self.assess_uncertainty(selection, organ, ft, trace=trace)
            urgency = None
            if uncertainty.present:
                urgency = self.assess_urgency(selection, organ, ft, trace=trace)
            labels.append(
                OrganFindingLabel(
                    report_id=report.id,
                    organ=organ,
                    finding_type=ft,
                    uncertainty=uncertainty,
                    urgency=urgency,
                    evidence=evidence,
                    transcript_refs=trace.refs_for(ft),
                )
            )
        return labels

    def label_report(
        self, report: Report, *, organs: Sequence[Organ] | None = None
    ) -> list[OrganFindingLabel]:
        """Label every organ of one report; at most one label per (organ, type)."""
        labels: list[OrganFindingLabel] = []
        for organ in organs or tuple(Organ):
            labels.extend(self.label_cell(report, organ))
        return sorted(labels, key=lambda label: label.sort_key)

    def run_corpus(
        self,
        reports: Sequence[Report],
        *,
        organs: Sequence[Organ] | None = None,
        checkpoint_path: str | Path | None = None,
        resume: bool = False,
        progress: Callable[[int, int], None] | None = None,
    ) -> PipelineRun:
        """Label a corpus cell by cell with checkpointing.

        Cells run in parallel up to ``config.parallelism`` workers; the four
        stages within a cell always run sequentially. A failed cell is
        recorded and skipped; unexpected (non-package) errors abort the run
        after the checkpoint is flushed, so a rerun with ``resume=True``
        picks up where it stopped.
        """
        seen: set[str] = set()
        for report in reports:
            if report.id in seen:
                raise DuplicateReportIdError(f"duplicate report id {report.id!r}")
            seen.add(report.id)
        organ_list = tuple(organs) if organs else tuple(Organ)
        corpus_id = hashlib.sha256(
            "\n".join(sorted(seen)).encode("utf-8")
        ).hexdigest()[:12]
        checkpoint = Checkpoint.open(
            checkpoint_path,
            corpus_id,
            config_fingerprint(self.config, self.templates),
            resume=resume,
        )
        cells = [
            (report, organ)
            for report in reports
            for organ in organ_list
            if not checkpoint.is_done(report.id, organ)
        ]
        failures: list[CellFailure] = []
        done_count = 0
        total = len(cells)
        lock = threading.Lock()

        def work(cell: tuple[Report, Organ]) -> None:
            nonlocal done_count
            report, organ = cell
            try:
                labels = self.label_cell(report, organ)
            except PipelineCellError as exc:
                checkpoint.record(report.id, organ, "failed", error=str(exc))
                with lock:
                    failures.append(
                        CellFailure(
                            report.id,
                            organ,
                            exc.stage,
                            str(exc.cause),
                            kind=type(exc.cause).__name__,
                        )
                    )
            else:
                checkpoint.record(report.id, organ, "done", labels=labels)
            with lock:
                done_count += 1
                if progress is not None:
                    progress(done_count, total)

        if self.config.parallelism == 1:
            for cell in cells:
                work(cell)
        else:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                futures = [pool.submit(work, cell) for cell in cells]
                done, not_done = wait(futures, return_when=FIRST_EXCEPTION)
                for future in done:
                    error = future.exception()
                    if error is not None:
                        for pending in not_done:
                            pending.cancel()
                        raise error
        return PipelineRun(
            corpus_id=corpus_id,
            config=self.config,
            checkpoint=checkpoint.snapshot(),
            outputs=tuple(checkpoint.done_labels()),
            failures=tuple(
                sorted(failures, key=lambda f: (f.report_id, f.organ.order))
            ),
        )
