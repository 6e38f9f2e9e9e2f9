"""File formats and label-space transforms.

Formats
-------
- Reports: JSONL, one ``{"id", "text"}`` object per line.
- Labels: JSONL with a ``format_version`` header line followed by one label
  record per line (snake_case keys, enums as strings).
- Supervision targets: JSONL with a header line, one record per (report,
  organ) with the seven merged binary targets and their urgencies.
- Annotations: CSV with a mandatory header and columns report_id, organ,
  finding_group, label, urgency, annotator. A column-mapping dict adapts
  files whose headers use different names.

Readers run in strict mode by default: the first malformed line aborts with
its line number. Lenient mode skips malformed lines with a logged warning.
CRLF line endings are tolerated everywhere.

Transforms
----------
- :func:`merge_supervision_targets` collapses per-type labels into the seven
  binary supervision targets.
- :func:`any_abnormality` reduces a target record to a single flag.
- :func:`join_organs` merges paired organs (kidneys, bowels) into seven
  organ groups.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataFormatError, DuplicateReportIdError, EmptyReportError
from .schema import (
    FindingType,
    Organ,
    OrganFindingLabel,
    Report,
    UncertaintyCategory,
    UrgencyLevel,
)

log = logging.getLogger(__name__)

LABELS_FORMAT_VERSION = 1
SUPERVISION_FORMAT_VERSION = 1
REPORTS_FORMAT_VERSION = 1

# The seven merged supervision targets, in canonical column order.
SUPERVISION_KEYS: tuple[str, ...] = (
    "ps_absent",
    "quality",
    "anatomy",
    "size",
    "device",
    "diffuse",
    "focal",
)

# Finding type -> supervision target. Normal and Adjacent never produce
# labels, so they have no entry.
TYPE_TO_GROUP: dict[FindingType, str] = {
    FindingType.ABSENT: "ps_absent",
    FindingType.POSTSURGICAL: "ps_absent",
    FindingType.QUALITY: "quality",
    FindingType.ANATOMY: "anatomy",
    FindingType.ENLARGED: "size",
    FindingType.ATROPHY: "size",
    FindingType.DEVICE: "device",
    FindingType.DIFFUSE: "diffuse",
    FindingType.FOCAL: "focal",
}

# Targets that count toward the single any-abnormality flag. Device, quality,
# and anatomy findings are excluded by design.
ANY_ABNORMALITY_KEYS: tuple[str, ...] = ("ps_absent", "size", "diffuse", "focal")

POSITIVE_POLICIES: tuple[str, ...] = ("positive_only", "positive_or_possible")

# Organ groups after joining paired organs; values are member organ keys.
ORGAN_GROUPS: dict[str, tuple[str, ...]] = {
    "liver": ("liver",),
    "gallbladder": ("gallbladder",),
    "spleen": ("spleen",),
    "kidneys": ("right_kidney", "left_kidney"),
    "pancreas": ("pancreas",),
    "stomach": ("stomach",),
    "bowels": ("small_bowel", "large_bowel"),
}

# Sort order over organ keys, covering both base organs and joined groups.
ORGAN_SORT_ORDER: dict[str, int] = {organ.value: organ.order for organ in Organ}
for _group, _members in ORGAN_GROUPS.items():
    ORGAN_SORT_ORDER.setdefault(_group, ORGAN_SORT_ORDER[_members[0]])

_VALID_ORGAN_KEYS = frozenset(ORGAN_SORT_ORDER)
_VALID_GROUP_KEYS = frozenset(SUPERVISION_KEYS) | {"any_abnormality"}


def organ_sort_key(organ_key: str) -> int:
    return ORGAN_SORT_ORDER.get(organ_key, len(ORGAN_SORT_ORDER))


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupervisionLabel:
    """Merged binary targets for one (report, organ or organ group)."""

    report_id: str
    organ: str
    targets: Mapping[str, int]
    urgencies: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.targets) != set(SUPERVISION_KEYS):
            raise ValueError(
                f"targets must cover exactly {SUPERVISION_KEYS}, got {sorted(self.targets)}"
            )
        for key, value in self.targets.items():
            if value not in (0, 1):
                raise ValueError(f"target {key} must be 0 or 1, got {value!r}")
        for key, value in self.urgencies.items():
            if self.targets.get(key) != 1:
                raise ValueError(f"urgency given for non-positive target {key}")
            if int(value) not in (0, 1, 2, 3):
                raise ValueError(f"urgency for {key} must be 0..3, got {value!r}")

    def to_json_dict(self) -> dict:
        return {
            "report_id": self.report_id,
            "organ": self.organ,
            "targets": {key: int(self.targets[key]) for key in SUPERVISION_KEYS},
            "urgencies": {
                key: int(self.urgencies[key])
                for key in SUPERVISION_KEYS
                if key in self.urgencies
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SupervisionLabel":
        return cls(
            report_id=data["report_id"],
            organ=data["organ"],
            targets=dict(data["targets"]),
            urgencies=dict(data.get("urgencies", {})),
        )


@dataclass(frozen=True)
class AnnotatorRecord:
    """One annotator's binary label (and optional urgency) for one cell."""

    annotator_id: str
    report_id: str
    organ: str
    finding_group: str
    label: int
    urgency: int | None = None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.urgency is not None and int(self.urgency) not in (0, 1, 2, 3):
            raise ValueError(f"urgency must be 0..3, got {self.urgency!r}")
        if not self.annotator_id:
            raise ValueError("annotator_id must be non-empty")


# ---------------------------------------------------------------------------
# JSONL helpers
# ---------------------------------------------------------------------------


def _jsonl_lines(path: Path) -> Iterable[tuple[int, str]]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.rstrip("\r\n").strip()
            if line:
                yield line_no, line


def _parse_json_line(path: Path, line_no: int, line: str) -> dict:
    try:
        data = json.loads(line)
    except ValueError as exc:
        raise DataFormatError(f"invalid JSON: {exc}", path=str(path), line_no=line_no)
    if not isinstance(data, dict):
        raise DataFormatError("line is not a JSON object", path=str(path), line_no=line_no)
    return data


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_reports(path: str | Path, reports: Sequence[Report]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(
            json.dumps({"format_version": REPORTS_FORMAT_VERSION, "kind": "reports"})
            + "\n"
        )
        for report in reports:
            handle.write(json.dumps({"id": report.id, "text": report.text}) + "\n")


def read_reports(path: str | Path, *, strict: bool = True) -> list[Report]:
    """Read a JSONL report corpus; duplicate ids are always rejected."""
    path = Path(path)
    reports: list[Report] = []
    seen: set[str] = set()
    for line_no, line in _jsonl_lines(path):
        data = _parse_json_line(path, line_no, line)
        if "format_version" in data and "id" not in data:
            continue
        try:
            report_id = data["id"]
            text = data["text"]
        except KeyError as exc:
            error = DataFormatError(
                f"report record missing key {exc}", path=str(path), line_no=line_no
            )
            if strict:
                raise error
            log.warning("skipping: %s", error)
            continue
        if report_id in seen:
            raise DuplicateReportIdError(
                f"{path}:{line_no}: duplicate report id {report_id!r}"
            )
        try:
            report = Report.from_text(report_id, text)
        except (EmptyReportError, ValueError) as exc:
            error = DataFormatError(str(exc), path=str(path), line_no=line_no)
            if strict:
                raise error
            log.warning("skipping: %s", error)
            continue
        seen.add(report_id)
        reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def write_labels(path: str | Path, labels: Iterable[OrganFindingLabel]) -> None:
    """Write labels in canonical order (report id, organ, finding type)."""
    path = Path(path)
    ordered = sorted(labels, key=lambda label: label.sort_key)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(
            json.dumps(
                {"format_version": LABELS_FORMAT_VERSION, "kind": "organ_finding_labels"}
            )
            + "\n"
        )
        for label in ordered:
            handle.write(json.dumps(label.to_json_dict()) + "\n")


def read_labels(path: str | Path, *, strict: bool = True) -> list[OrganFindingLabel]:
    path = Path(path)
    labels: list[OrganFindingLabel] = []
    saw_header = False
    for line_no, line in _jsonl_lines(path):
        data = _parse_json_line(path, line_no, line)
        if "format_version" in data and "report_id" not in data:
            if data["format_version"] != LABELS_FORMAT_VERSION:
                raise DataFormatError(
                    f"unsupported label format_version {data['format_version']!r}",
                    path=str(path),
                    line_no=line_no,
                )
            saw_header = True
            continue
        try:
            labels.append(OrganFindingLabel.from_json_dict(data))
        except (KeyError, ValueError) as exc:
            error = DataFormatError(
                f"bad label record: {exc}", path=str(path), line_no=line_no
            )
            if strict:
                raise error
            log.warning("skipping: %s", error)
    if strict and not saw_header:
        raise DataFormatError("missing format_version header line", path=str(path))
    return labels


# ---------------------------------------------------------------------------
# Annotations (CSV)
# ---------------------------------------------------------------------------

ANNOTATION_COLUMNS: tuple[str, ...] = (
    "report_id",
    "organ",
    "finding_group",
    "label",
    "urgency",
    "annotator",
)


def write_annotations(path: str | Path, records: Sequence[AnnotatorRecord]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ANNOTATION_COLUMNS)
        for record in records:
            writer.writerow(
                [
                    record.report_id,
                    record.organ,
                    record.finding_group,
                    record.label,
                    "" if record.urgency is None else record.urgency,
                    record.annotator_id,
                ]
            )


def read_annotations(
    path: str | Path,
    *,
    strict: bool = True,
    column_map: Mapping[str, str] | None = None,
) -> list[AnnotatorRecord]:
    """Read an annotation CSV.

    ``column_map`` renames file columns to the canonical names, for example
    ``{"rater": "annotator"}``.
    """
    path = Path(path)
    column_map = dict(column_map or {})
    records: list[AnnotatorRecord] = []
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise DataFormatError("missing CSV header", path=str(path), line_no=1)
        fields = [column_map.get(name, name) for name in reader.fieldnames]
        missing = [col for col in ANNOTATION_COLUMNS if col not in fields]
        if missing:
            raise DataFormatError(
                f"missing columns: {', '.join(missing)}", path=str(path), line_no=1
            )
        for row_no, raw_row in enumerate(reader, start=2):
            row = {
                column_map.get(name, name): value
                for name, value in raw_row.items()
                if name is not None
            }
            try:
                records.append(_annotation_from_row(row))
            except (KeyError, ValueError) as exc:
                error = DataFormatError(
                    f"bad annotation row: {exc}", path=str(path), line_no=row_no
                )
                if strict:
                    raise error
                log.warning("skipping: %s", error)
    return records


def _annotation_from_row(row: Mapping[str, str]) -> AnnotatorRecord:
    organ = row["organ"].strip()
    if organ not in _VALID_ORGAN_KEYS:
        raise ValueError(f"unknown organ {organ!r}")
    group = row["finding_group"].strip()
    if group not in _VALID_GROUP_KEYS:
        raise ValueError(f"unknown finding_group {group!r}")
    urgency_text = (row.get("urgency") or "").strip()
    return AnnotatorRecord(
        annotator_id=row["annotator"].strip(),
        report_id=row["report_id"].strip(),
        organ=organ,
        finding_group=group,
        label=int(row["label"]),
        urgency=int(urgency_text) if urgency_text else None,
    )


# ---------------------------------------------------------------------------
# Supervision merging
# ---------------------------------------------------------------------------


def _present_categories(positive_policy: str) -> frozenset[UncertaintyCategory]:
    if positive_policy == "positive_only":
        return frozenset({UncertaintyCategory.POSITIVE})
    if positive_policy == "positive_or_possible":
        return frozenset({UncertaintyCategory.POSITIVE, UncertaintyCategory.POSSIBLE})
    raise ValueError(
        f"positive_policy must be one of {POSITIVE_POLICIES}, got {positive_policy!r}"
    )


def merge_supervision_targets(
    labels: Iterable[OrganFindingLabel],
    positive_policy: str = "positive_or_possible",
    *,
    report_ids: Sequence[str] | None = None,
) -> list[SupervisionLabel]:
    """Collapse per-type labels into the seven binary supervision targets.

    A target is 1 when any contributing finding type is present under the
    chosen policy; its urgency is the maximum over those contributors. The
    output covers every organ of every report id seen in ``labels`` (or of
    ``report_ids`` when given), so absence of a label reads as 0.
    """
    present = _present_categories(positive_policy)
    by_cell: dict[tuple[str, str], list[OrganFindingLabel]] = {}
    seen_ids: list[str] = []
    for label in labels:
        key = (label.report_id, label.organ.value)
        by_cell.setdefault(key, []).append(label)
        if label.report_id not in seen_ids:
            seen_ids.append(label.report_id)
    ids = list(report_ids) if report_ids is not None else seen_ids
    merged: list[SupervisionLabel] = []
    for report_id in ids:
        for organ in Organ:
            targets = {key: 0 for key in SUPERVISION_KEYS}
            urgencies: dict[str, int] = {}
            for label in by_cell.get((report_id, organ.value), ()):  # may be absent
                if label.uncertainty not in present:
                    continue
                group = TYPE_TO_GROUP[label.finding_type]
                targets[group] = 1
                level = int(label.urgency) if label.urgency is not None else 0
                urgencies[group] = max(urgencies.get(group, 0), level)
            merged.append(
                SupervisionLabel(
                    report_id=report_id,
                    organ=organ.value,
                    targets=targets,
                    urgencies=urgencies,
                )
            )
    return merged


def supervision_lookup(
    records: Iterable[SupervisionLabel],
) -> dict[tuple[str, str], SupervisionLabel]:
    return {(record.report_id, record.organ): record for record in records}


def any_abnormality(record: SupervisionLabel) -> int:
    """1 when any of the size, focal, diffuse, or postsurgical/absent targets is 1."""
    return int(any(record.targets[key] for key in ANY_ABNORMALITY_KEYS))


def join_organs(records: Iterable[SupervisionLabel]) -> list[SupervisionLabel]:
    """Merge paired organs into the seven organ groups, per report.

    Targets are OR-ed and urgencies take the maximum across group members. A
    group appears whenever at least one member organ has a record.
    """
    by_report: dict[str, dict[str, SupervisionLabel]] = {}
    report_order: list[str] = []
    for record in records:
        if record.organ not in {o.value for o in Organ}:
            raise ValueError(
                f"join_organs expects base organ records, got {record.organ!r}"
            )
        per_organ = by_report.setdefault(record.report_id, {})
        if record.organ in per_organ:
            raise ValueError(
                f"duplicate record for report {record.report_id!r} organ {record.organ!r}"
            )
        per_organ[record.organ] = record
        if record.report_id not in report_order:
            report_order.append(record.report_id)
    joined: list[SupervisionLabel] = []
    for report_id in report_order:
        per_organ = by_report[report_id]
        for group, members in ORGAN_GROUPS.items():
            present = [per_organ[m] for m in members if m in per_organ]
            if not present:
                continue
            targets = {
                key: int(any(record.targets[key] for record in present))
                for key in SUPERVISION_KEYS
            }
            urgencies: dict[str, int] = {}
            for record in present:
                for key, value in record.urgencies.items():
                    urgencies[key] = max(urgencies.get(key, 0), int(value))
            joined.append(
                SupervisionLabel(
                    report_id=report_id,
                    organ=group,
                    targets=targets,
                    urgencies=urgencies,
                )
            )
    return joined


def write_supervision(
    path: str | Path,
    records: Sequence[SupervisionLabel],
    *,
    with_any_abnormality: bool = False,
) -> None:
    path = Path(path)
    ordered = sorted(records, key=lambda r: (r.report_id, organ_sort_key(r.organ)))
    with path.open("w", encoding="utf-8") as handle:
        handle.write(
            json.dumps(
                {
                    "format_version": SUPERVISION_FORMAT_VERSION,
                    "kind": "supervision_targets",
                }
            )
            + "\n"
        )
        for record in ordered:
            data = record.to_json_dict()
            if with_any_abnormality:
                data["any_abnormality"] = any_abnormality(record)
            handle.write(json.dumps(data) + "\n")


def read_supervision(path: str | Path, *, strict: bool = True) -> list[SupervisionLabel]:
    path = Path(path)
    records: list[SupervisionLabel] = []
    for line_no, line in _jsonl_lines(path):
        data = _parse_json_line(path, line_no, line)
        if "format_version" in data and "report_id" not in data:
            continue
        try:
            records.append(SupervisionLabel.from_json_dict(data))
        except (KeyError, ValueError) as exc:
            error = DataFormatError(
                f"bad supervision record: {exc}", path=str(path), line_no=line_no
            )
            if strict:
                raise error
            log.warning("skipping: %s", error)
    return records
