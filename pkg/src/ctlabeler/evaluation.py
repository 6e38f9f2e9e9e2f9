"""Evaluation of merged supervision targets against human annotations.

Ground truth
------------
Binary ground truth per (report, organ, finding group) is the majority vote
over annotators; cells with an even tie are excluded and logged. Urgency
ground truth per organ is the mean of the annotators' values, each annotator
contributing the maximum urgency they assigned within the organ.

Metrics
-------
Binary cells get precision, recall, specificity, F1, and Matthews
correlation, with every zero-denominator case defined as 0.0. Micro rows
pool confusion counts across cells; macro rows average per-cell scores with
``math.fsum``. Ordinal agreement uses the tie-corrected Kendall rank
correlation (variant b).

Uncertainty
-----------
Confidence intervals are percentile bootstrap (2.5 and 97.5) and paired
comparisons use a sign-flip permutation test with add-one smoothing:
``p = (count + 1) / (n_iter + 1)``. All resample draws are generated up
front from a single seeded generator, so results are independent of the
worker count used to evaluate them.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.stats

from .errors import DataFormatError, DegenerateInputError
from .labels_io import (
    ANY_ABNORMALITY_KEYS,
    ORGAN_GROUPS,
    SUPERVISION_KEYS,
    AnnotatorRecord,
    SupervisionLabel,
    any_abnormality,
    join_organs,
    merge_supervision_targets,
    organ_sort_key,
    supervision_lookup,
)
from .schema import Organ, OrganFindingLabel

log = logging.getLogger(__name__)

DEFAULT_BOOTSTRAP_ITERATIONS = 2000
DEFAULT_MIN_POSITIVE = 10

SCORE_NAMES: tuple[str, ...] = ("f1", "precision", "recall", "specificity", "mcc")

_GROUP_SORT_ORDER: dict[str, int] = {key: i for i, key in enumerate(SUPERVISION_KEYS)}
_GROUP_SORT_ORDER["any_abnormality"] = len(SUPERVISION_KEYS)


def group_sort_key(group: str) -> int:
    return _GROUP_SORT_ORDER.get(group, len(_GROUP_SORT_ORDER))


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthCell:
    """Consensus for one (report, organ, finding group)."""

    report_id: str
    organ: str
    finding_group: str
    label: int
    n_annotators: int
    urgency_mean: float | None = None


def majority_vote(records: Sequence[AnnotatorRecord]) -> GroundTruthCell | None:
    """Majority label over annotators; ``None`` on an even tie.

    All records must address the same cell, one per annotator. The urgency
    mean is taken over the records that carry an urgency value.
    """
    if not records:
        raise ValueError("majority_vote needs at least one record")
    cell = (records[0].report_id, records[0].organ, records[0].finding_group)
    annotators: set[str] = set()
    for record in records:
        if (record.report_id, record.organ, record.finding_group) != cell:
            raise ValueError(f"records span multiple cells: {cell} vs {record}")
        if record.annotator_id in annotators:
            raise DataFormatError(
                f"annotator {record.annotator_id!r} appears twice for cell {cell}"
            )
        annotators.add(record.annotator_id)
    positives = sum(record.label for record in records)
    if positives * 2 == len(records):
        return None
    urgencies = [record.urgency for record in records if record.urgency is not None]
    return GroundTruthCell(
        report_id=cell[0],
        organ=cell[1],
        finding_group=cell[2],
        label=int(positives * 2 > len(records)),
        n_annotators=len(records),
        urgency_mean=(math.fsum(urgencies) / len(urgencies)) if urgencies else None,
    )


def build_ground_truth(
    records: Iterable[AnnotatorRecord],
) -> tuple[dict[tuple[str, str, str], GroundTruthCell], list[str]]:
    """Group annotations per cell and vote; returns (cells, exclusion notes)."""
    grouped: dict[tuple[str, str, str], list[AnnotatorRecord]] = {}
    for record in records:
        key = (record.report_id, record.organ, record.finding_group)
        grouped.setdefault(key, []).append(record)
    cells: dict[tuple[str, str, str], GroundTruthCell] = {}
    excluded: list[str] = []
    for key in sorted(grouped):
        cell = majority_vote(grouped[key])
        if cell is None:
            note = f"{key[0]}/{key[1]}/{key[2]}: even annotator tie, cell excluded"
            excluded.append(note)
            log.info("ground truth: %s", note)
        else:
            cells[key] = cell
    return cells, excluded


@dataclass(frozen=True)
class HumanEvalCell:
    """One annotator scored against the consensus of the other annotators."""

    report_id: str
    organ: str
    finding_group: str
    annotator_id: str
    pred_label: int
    gt_label: int
    pred_urgency: int | None
    gt_urgency: float | None


def human_eval_subset(
    records: Iterable[AnnotatorRecord], annotator_id: str
) -> list[HumanEvalCell]:
    """Cells where the other annotators unanimously agree, scored for one
    annotator. Cells with fewer than three annotators or any disagreement
    among the others are skipped."""
    grouped: dict[tuple[str, str, str], list[AnnotatorRecord]] = {}
    for record in records:
        key = (record.report_id, record.organ, record.finding_group)
        grouped.setdefault(key, []).append(record)
    cells: list[HumanEvalCell] = []
    for key in sorted(grouped):
        cell_records = grouped[key]
        if len(cell_records) < 3:
            continue
        target = [r for r in cell_records if r.annotator_id == annotator_id]
        others = [r for r in cell_records if r.annotator_id != annotator_id]
        if len(target) != 1 or not others:
            continue
        other_labels = {r.label for r in others}
        if len(other_labels) != 1:
            continue
        other_urgencies = [r.urgency for r in others if r.urgency is not None]
        cells.append(
            HumanEvalCell(
                report_id=key[0],
                organ=key[1],
                finding_group=key[2],
                annotator_id=annotator_id,
                pred_label=target[0].label,
                gt_label=other_labels.pop(),
                pred_urgency=target[0].urgency,
                gt_urgency=(
                    math.fsum(other_urgencies) / len(other_urgencies)
                    if other_urgencies
                    else None
                ),
            )
        )
    return cells


# ---------------------------------------------------------------------------
# Confusion metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn


def confusion_counts(pred: Sequence[int], gt: Sequence[int]) -> ConfusionCounts:
    pred_arr = np.asarray(pred)
    gt_arr = np.asarray(gt)
    if pred_arr.shape != gt_arr.shape or pred_arr.ndim != 1:
        raise ValueError(
            f"pred and gt must be 1-d and equal length, got {pred_arr.shape} vs {gt_arr.shape}"
        )
    if not (np.isin(pred_arr, (0, 1)).all() and np.isin(gt_arr, (0, 1)).all()):
        raise ValueError("pred and gt must contain only 0 and 1")
    return ConfusionCounts(
        tp=int(np.sum((pred_arr == 1) & (gt_arr == 1))),
        fp=int(np.sum((pred_arr == 1) & (gt_arr == 0))),
        fn=int(np.sum((pred_arr == 0) & (gt_arr == 1))),
        tn=int(np.sum((pred_arr == 0) & (gt_arr == 0))),
    )


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def specificity(c: ConfusionCounts) -> float:
    return c.tn / (c.tn + c.fp) if c.tn + c.fp else 0.0


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation; 0.0 when any marginal is empty (degenerate)."""
    denom = (
        (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    )
    if denom == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def mcc_is_degenerate(c: ConfusionCounts) -> bool:
    return ((c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)) == 0


def score_table(c: ConfusionCounts) -> dict[str, float]:
    return {
        "f1": f1(c),
        "precision": precision(c),
        "recall": recall(c),
        "specificity": specificity(c),
        "mcc": mcc(c),
    }


def f1_from_vectors(pred: Sequence[int], gt: Sequence[int]) -> float:
    return f1(confusion_counts(pred, gt))


# ---------------------------------------------------------------------------
# Cells and aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalCell:
    """Aligned prediction and ground-truth vectors for one (organ, group)."""

    organ: str
    finding_group: str
    report_ids: tuple[str, ...]
    pred: tuple[int, ...]
    gt: tuple[int, ...]

    def __post_init__(self) -> None:
        if not (len(self.report_ids) == len(self.pred) == len(self.gt)):
            raise ValueError("report_ids, pred, and gt must be equal length")

    @property
    def n(self) -> int:
        return len(self.gt)

    @property
    def n_pos(self) -> int:
        return sum(self.gt)

    @property
    def counts(self) -> ConfusionCounts:
        return confusion_counts(self.pred, self.gt)


def min_positive_filter(
    cells: Iterable[EvalCell], threshold: int = DEFAULT_MIN_POSITIVE
) -> list[EvalCell]:
    """Keep cells with strictly more than ``threshold`` ground-truth positives."""
    return [cell for cell in cells if cell.n_pos > threshold]


def micro_aggregate(cells: Sequence[EvalCell]) -> ConfusionCounts:
    """Pool confusion counts across cells (equivalent to concatenation)."""
    total = ConfusionCounts(0, 0, 0, 0)
    for cell in cells:
        total = total + cell.counts
    return total


def macro_aggregate(cells: Sequence[EvalCell]) -> dict[str, float]:
    """Mean of per-cell scores, exact and order-invariant via ``fsum``."""
    if not cells:
        raise ValueError("macro_aggregate needs at least one cell")
    tables = [score_table(cell.counts) for cell in cells]
    return {
        name: math.fsum(table[name] for table in tables) / len(tables)
        for name in SCORE_NAMES
    }


# ---------------------------------------------------------------------------
# Rank correlation
# ---------------------------------------------------------------------------


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Tie-corrected Kendall rank correlation (variant b)."""
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    if x_arr.shape != y_arr.shape or x_arr.ndim != 1:
        raise ValueError("x and y must be 1-d and equal length")
    if len(x_arr) < 2:
        raise DegenerateInputError("rank correlation needs at least two pairs")
    if np.all(x_arr == x_arr[0]) or np.all(y_arr == y_arr[0]):
        raise DegenerateInputError("rank correlation undefined for a constant input")
    tau = scipy.stats.kendalltau(x_arr, y_arr, variant="b").statistic
    if math.isnan(tau):
        raise DegenerateInputError("rank correlation undefined for this input")
    return float(tau)


# ---------------------------------------------------------------------------
# Bootstrap and permutation machinery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile CIs for two labelers plus a paired sign-flip p-value."""

    point_a: float
    point_b: float
    ci_a: tuple[float, float]
    ci_b: tuple[float, float]
    p_value: float
    n_iter: int


PairedVectors = tuple[Sequence[int], Sequence[int], Sequence[int]]


def _as_float_arrays(
    groups: Sequence[PairedVectors],
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    prepared = []
    for pred_a, pred_b, gt in groups:
        a = np.asarray(pred_a)
        b = np.asarray(pred_b)
        g = np.asarray(gt)
        if not (a.shape == b.shape == g.shape) or a.ndim != 1 or len(a) == 0:
            raise ValueError("each group needs equal-length, non-empty 1-d vectors")
        prepared.append((a, b, g))
    return prepared


def grouped_paired_bootstrap(
    groups: Sequence[PairedVectors],
    score_fn: Callable[[np.ndarray, np.ndarray], float],
    *,
    seed: int,
    n_iter: int = DEFAULT_BOOTSTRAP_ITERATIONS,
    parallelism: int = 1,
) -> BootstrapResult:
    """Bootstrap CIs and a paired permutation p-value for two labelers.

    The score of a labeler is the mean of ``score_fn`` over the groups (so a
    single group gives the plain per-vector score). Resampling draws indices
    within each group; the permutation test swaps the two labelers' values
    per sample. All random draws come from one generator seeded with
    ``seed`` before any scoring happens, which makes the result independent
    of ``parallelism``.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    prepared = _as_float_arrays(groups)
    if not prepared:
        raise ValueError("at least one group is required")
    rng = np.random.default_rng(seed)
    boot_indices = [
        rng.integers(0, len(g), size=(n_iter, len(g))) for _, _, g in prepared
    ]
    swap_masks = [
        rng.integers(0, 2, size=(n_iter, len(g))).astype(bool) for _, _, g in prepared
    ]

    def mean_over_groups(values: list[float]) -> float:
        finite = [v for v in values if not math.isnan(v)]
        if not finite:
            return math.nan
        return math.fsum(finite) / len(finite)

    def safe_score(pred: np.ndarray, gt: np.ndarray) -> float:
        try:
            return float(score_fn(pred, gt))
        except DegenerateInputError:
            return math.nan

    point_a = mean_over_groups([safe_score(a, g) for a, _, g in prepared])
    point_b = mean_over_groups([safe_score(b, g) for _, b, g in prepared])
    observed_diff = point_a - point_b

    def one_iteration(t: int) -> tuple[float, float, float]:
        scores_a: list[float] = []
        scores_b: list[float] = []
        diffs: list[float] = []
        for k, (a, b, g) in enumerate(prepared):
            idx = boot_indices[k][t]
            scores_a.append(safe_score(a[idx], g[idx]))
            scores_b.append(safe_score(b[idx], g[idx]))
            mask = swap_masks[k][t]
            perm_a = np.where(mask, b, a)
            perm_b = np.where(mask, a, b)
            diffs.append(safe_score(perm_a, g) - safe_score(perm_b, g))
        return (
            mean_over_groups(scores_a),
            mean_over_groups(scores_b),
            mean_over_groups(diffs),
        )

    results: list[tuple[float, float, float]] = [(math.nan,) * 3] * n_iter
    if parallelism <= 1:
        for t in range(n_iter):
            results[t] = one_iteration(t)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for t, value in enumerate(pool.map(one_iteration, range(n_iter))):
                results[t] = value
    boot_a = np.array([r[0] for r in results])
    boot_b = np.array([r[1] for r in results])
    perm_diffs = np.array([r[2] for r in results])

    def percentile_ci(values: np.ndarray, point: float) -> tuple[float, float]:
        finite = values[~np.isnan(values)]
        if len(finite) == 0:
            return (point, point)
        low = float(np.percentile(finite, 2.5))
        high = float(np.percentile(finite, 97.5))
        # The interval is reported around the point estimate; widen to keep
        # the point inside when the percentile band misses it.
        return (min(low, point), max(high, point))

    observed_abs = abs(observed_diff)
    finite_diffs = perm_diffs[~np.isnan(perm_diffs)]
    count = int(np.sum(np.abs(finite_diffs) >= observed_abs)) if len(finite_diffs) else 0
    p_value = (count + 1) / (n_iter + 1)
    return BootstrapResult(
        point_a=point_a,
        point_b=point_b,
        ci_a=percentile_ci(boot_a, point_a),
        ci_b=percentile_ci(boot_b, point_b),
        p_value=p_value,
        n_iter=n_iter,
    )


def paired_bootstrap(
    pred_a: Sequence[int],
    pred_b: Sequence[int],
    gt: Sequence[int],
    score_fn: Callable[[np.ndarray, np.ndarray], float] = f1_from_vectors,
    *,
    seed: int,
    n_iter: int = DEFAULT_BOOTSTRAP_ITERATIONS,
    parallelism: int = 1,
) -> BootstrapResult:
    """Paired bootstrap for two labelers on one vector (see grouped variant)."""
    return grouped_paired_bootstrap(
        [(pred_a, pred_b, gt)],
        score_fn,
        seed=seed,
        n_iter=n_iter,
        parallelism=parallelism,
    )


def bootstrap_ci(
    pred: Sequence[int],
    gt: Sequence[int],
    score_fn: Callable[[np.ndarray, np.ndarray], float] = f1_from_vectors,
    *,
    seed: int,
    n_iter: int = DEFAULT_BOOTSTRAP_ITERATIONS,
    parallelism: int = 1,
) -> tuple[float, float]:
    """Percentile bootstrap CI for one labeler's score."""
    result = grouped_paired_bootstrap(
        [(pred, pred, gt)],
        score_fn,
        seed=seed,
        n_iter=n_iter,
        parallelism=parallelism,
    )
    return result.ci_a


def p_marker(p_value: float | None) -> str:
    if p_value is None:
        return ""
    if p_value < 0.001:
        return "***"
    if p_value < 0.01:
        return "**"
    if p_value < 0.05:
        return "*"
    return "ns"


# ---------------------------------------------------------------------------
# Urgency
# ---------------------------------------------------------------------------


def max_urgency_per_organ(
    labels: Iterable[OrganFindingLabel],
) -> dict[tuple[str, str], int]:
    """Maximum urgency per (report, organ) over labels that carry urgency."""
    out: dict[tuple[str, str], int] = {}
    for label in labels:
        if label.urgency is None:
            continue
        key = (label.report_id, label.organ.value)
        out[key] = max(out.get(key, 0), int(label.urgency))
    return out


def prevalence_table(urgencies: Sequence[int]) -> dict[int, float]:
    """Percentage of samples at each urgency level 0..3; sums to 100."""
    values = list(urgencies)
    if not values:
        raise DegenerateInputError("prevalence_table needs at least one value")
    for value in values:
        if int(value) not in (0, 1, 2, 3):
            raise ValueError(f"urgency must be 0..3, got {value!r}")
    total = len(values)
    return {
        level: 100.0 * sum(1 for v in values if int(v) == level) / total
        for level in (0, 1, 2, 3)
    }


# ---------------------------------------------------------------------------
# Report rows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    """One row of the binary metrics table."""

    kind: str  # "cell", "micro", "macro", "human", "human_avg"
    organ: str
    finding_group: str
    labeler: str
    n: int | None
    n_pos: int | None
    scores: Mapping[str, float]
    ci_low: float | None = None
    ci_high: float | None = None
    p_value: float | None = None
    main_f1_on_subset: float | None = None
    mcc_degenerate: bool = False

    @property
    def marker(self) -> str:
        return p_marker(self.p_value)


@dataclass(frozen=True)
class UrgencyRow:
    """One row of the ordinal (urgency) agreement table."""

    kind: str  # "cell" or "macro"
    organ_group: str
    labeler: str
    n: int | None
    n_off_mode: int | None
    tau_b: float
    ci_low: float | None = None
    ci_high: float | None = None


@dataclass
class EvalReport:
    rows: list[MetricsRow] = field(default_factory=list)
    urgency_rows: list[UrgencyRow] = field(default_factory=list)
    prevalence: dict[str, dict[int, float]] = field(default_factory=dict)
    excluded_cells: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


class _PredictionIndex:
    """Per-(report, organ or group) target lookup built from labels."""

    def __init__(self, labels: Sequence[OrganFindingLabel], positive_policy: str):
        merged = merge_supervision_targets(labels, positive_policy)
        self.base = supervision_lookup(merged)
        self.joined = supervision_lookup(join_organs(merged))
        self._base_organs = {organ.value for organ in Organ}

    def _record(self, report_id: str, organ_key: str) -> SupervisionLabel | None:
        if organ_key in self._base_organs:
            return self.base.get((report_id, organ_key))
        return self.joined.get((report_id, organ_key))

    def target(self, report_id: str, organ_key: str, group: str) -> int:
        record = self._record(report_id, organ_key)
        if record is None:
            return 0
        if group == "any_abnormality":
            return any_abnormality(record)
        return record.targets[group]


def _cells_from_ground_truth(
    gt_cells: Mapping[tuple[str, str, str], GroundTruthCell],
    predict: Callable[[str, str, str], int],
) -> list[EvalCell]:
    grouped: dict[tuple[str, str], list[GroundTruthCell]] = {}
    for cell in gt_cells.values():
        grouped.setdefault((cell.organ, cell.finding_group), []).append(cell)
    out: list[EvalCell] = []
    for organ_key, group in sorted(
        grouped, key=lambda k: (organ_sort_key(k[0]), group_sort_key(k[1]))
    ):
        members = sorted(grouped[(organ_key, group)], key=lambda c: c.report_id)
        out.append(
            EvalCell(
                organ=organ_key,
                finding_group=group,
                report_ids=tuple(c.report_id for c in members),
                pred=tuple(predict(c.report_id, organ_key, group) for c in members),
                gt=tuple(c.label for c in members),
            )
        )
    return out


def _row_scores(counts: ConfusionCounts) -> dict[str, float]:
    return score_table(counts)


def _urgency_gt_by_group(
    annotations: Sequence[AnnotatorRecord],
) -> dict[tuple[str, str], float]:
    """Mean over annotators of their per-(report, organ group) max urgency."""
    per_annotator: dict[tuple[str, str, str], int] = {}
    for record in annotations:
        if record.urgency is None:
            continue
        organ_key = record.organ
        for group, members in ORGAN_GROUPS.items():
            if organ_key in members or organ_key == group:
                key = (record.annotator_id, record.report_id, group)
                per_annotator[key] = max(
                    per_annotator.get(key, 0), int(record.urgency)
                )
    by_cell: dict[tuple[str, str], list[int]] = {}
    for (annotator, report_id, group), value in per_annotator.items():
        by_cell.setdefault((report_id, group), []).append(value)
    return {
        key: math.fsum(values) / len(values) for key, values in by_cell.items()
    }


def _urgency_pred_by_group(
    labels: Sequence[OrganFindingLabel],
) -> dict[tuple[str, str], int]:
    per_organ = max_urgency_per_organ(labels)
    out: dict[tuple[str, str], int] = {}
    for (report_id, organ_key), value in per_organ.items():
        for group, members in ORGAN_GROUPS.items():
            if organ_key in members:
                key = (report_id, group)
                out[key] = max(out.get(key, 0), value)
    return out


def _tau_score_fn(pred: np.ndarray, gt: np.ndarray) -> float:
    return kendall_tau_b(pred, gt)


def evaluate_labels(
    labels: Sequence[OrganFindingLabel],
    annotations: Sequence[AnnotatorRecord],
    *,
    labeler_name: str = "model",
    reference_labels: Sequence[OrganFindingLabel] | None = None,
    reference_name: str = "reference",
    human_eval: bool = False,
    min_positive: int = DEFAULT_MIN_POSITIVE,
    n_iter: int = DEFAULT_BOOTSTRAP_ITERATIONS,
    seed: int = 0,
    positive_policy: str = "positive_or_possible",
    bootstrap_parallelism: int = 1,
) -> EvalReport:
    """Full evaluation: binary tables, urgency agreement, prevalence.

    Row order: per-cell rows (organ then finding group, main labeler before
    the reference), pooled micro rows, macro rows, then per-annotator rows
    and their average when ``human_eval`` is set.
    """
    report = EvalReport()
    gt_cells, excluded = build_ground_truth(annotations)
    report.excluded_cells = excluded

    index = _PredictionIndex(labels, positive_policy)
    cells = _cells_from_ground_truth(gt_cells, index.target)
    kept = min_positive_filter(cells, min_positive)
    dropped = [c for c in cells if c not in kept]
    for cell in dropped:
        report.notes.append(
            f"{cell.organ}/{cell.finding_group}: only {cell.n_pos} positives"
            f" (need more than {min_positive}), row skipped"
        )
    if not kept:
        report.notes.append("no cell passed the minimum-positive filter")
        return report

    ref_index = (
        _PredictionIndex(reference_labels, positive_policy)
        if reference_labels is not None
        else None
    )

    def ref_pred(cell: EvalCell) -> tuple[int, ...]:
        assert ref_index is not None
        return tuple(
            ref_index.target(rid, cell.organ, cell.finding_group)
            for rid in cell.report_ids
        )

    # Per-cell rows.
    for cell in kept:
        counts = cell.counts
        if ref_index is None:
            ci = bootstrap_ci(
                cell.pred, cell.gt, seed=seed, n_iter=n_iter,
                parallelism=bootstrap_parallelism,
            )
            p_val = None
            ref_result = None
        else:
            ref_vector = ref_pred(cell)
            result = paired_bootstrap(
                cell.pred, ref_vector, cell.gt, seed=seed, n_iter=n_iter,
                parallelism=bootstrap_parallelism,
            )
            ci = result.ci_a
            p_val = None
            ref_result = result
        report.rows.append(
            MetricsRow(
                kind="cell",
                organ=cell.organ,
                finding_group=cell.finding_group,
                labeler=labeler_name,
                n=cell.n,
                n_pos=cell.n_pos,
                scores=_row_scores(counts),
                ci_low=ci[0],
                ci_high=ci[1],
                p_value=p_val,
                mcc_degenerate=mcc_is_degenerate(counts),
            )
        )
        if ref_index is not None and ref_result is not None:
            ref_counts = confusion_counts(ref_pred(cell), cell.gt)
            report.rows.append(
                MetricsRow(
                    kind="cell",
                    organ=cell.organ,
                    finding_group=cell.finding_group,
                    labeler=reference_name,
                    n=cell.n,
                    n_pos=cell.n_pos,
                    scores=_row_scores(ref_counts),
                    ci_low=ref_result.ci_b[0],
                    ci_high=ref_result.ci_b[1],
                    p_value=ref_result.p_value,
                    mcc_degenerate=mcc_is_degenerate(ref_counts),
                )
            )

    # Pooled (micro) rows.
    pooled_pred = [p for cell in kept for p in cell.pred]
    pooled_gt = [g for cell in kept for g in cell.gt]
    micro_counts = micro_aggregate(kept)
    if ref_index is None:
        micro_ci = bootstrap_ci(
            pooled_pred, pooled_gt, seed=seed, n_iter=n_iter,
            parallelism=bootstrap_parallelism,
        )
        micro_ref = None
    else:
        pooled_ref = [p for cell in kept for p in ref_pred(cell)]
        micro_ref = paired_bootstrap(
            pooled_pred, pooled_ref, pooled_gt, seed=seed, n_iter=n_iter,
            parallelism=bootstrap_parallelism,
        )
        micro_ci = micro_ref.ci_a
    report.rows.append(
        MetricsRow(
            kind="micro",
            organ="all",
            finding_group="all",
            labeler=labeler_name,
            n=micro_counts.n,
            n_pos=micro_counts.n_pos,
            scores=_row_scores(micro_counts),
            ci_low=micro_ci[0],
            ci_high=micro_ci[1],
            mcc_degenerate=mcc_is_degenerate(micro_counts),
        )
    )
    if ref_index is not None and micro_ref is not None:
        pooled_ref = [p for cell in kept for p in ref_pred(cell)]
        ref_counts = confusion_counts(pooled_ref, pooled_gt)
        report.rows.append(
            MetricsRow(
                kind="micro",
                organ="all",
                finding_group="all",
                labeler=reference_name,
                n=ref_counts.n,
                n_pos=ref_counts.n_pos,
                scores=_row_scores(ref_counts),
                ci_low=micro_ref.ci_b[0],
                ci_high=micro_ref.ci_b[1],
                p_value=micro_ref.p_value,
                mcc_degenerate=mcc_is_degenerate(ref_counts),
            )
        )

    # Macro rows: mean of per-cell F1. Averaged precision/recall are means of
    # ratios, so an F1 column next to them could not stay the harmonic mean
    # of its neighbors; the macro row therefore reports F1 alone (per-score
    # means remain available through macro_aggregate).
    macro_scores = {"f1": macro_aggregate(kept)["f1"]}
    if ref_index is None:
        macro_groups = [(cell.pred, cell.pred, cell.gt) for cell in kept]
        macro_result = grouped_paired_bootstrap(
            macro_groups, f1_from_vectors, seed=seed, n_iter=n_iter,
            parallelism=bootstrap_parallelism,
        )
        macro_ref_result = None
    else:
        macro_groups = [(cell.pred, ref_pred(cell), cell.gt) for cell in kept]
        macro_result = grouped_paired_bootstrap(
            macro_groups, f1_from_vectors, seed=seed, n_iter=n_iter,
            parallelism=bootstrap_parallelism,
        )
        macro_ref_result = macro_result
    report.rows.append(
        MetricsRow(
            kind="macro",
            organ="all",
            finding_group="all",
            labeler=labeler_name,
            n=sum(cell.n for cell in kept),
            n_pos=sum(cell.n_pos for cell in kept),
            scores=macro_scores,
            ci_low=macro_result.ci_a[0],
            ci_high=macro_result.ci_a[1],
        )
    )
    if macro_ref_result is not None:
        ref_cells = [
            EvalCell(
                organ=cell.organ,
                finding_group=cell.finding_group,
                report_ids=cell.report_ids,
                pred=ref_pred(cell),
                gt=cell.gt,
            )
            for cell in kept
        ]
        report.rows.append(
            MetricsRow(
                kind="macro",
                organ="all",
                finding_group="all",
                labeler=reference_name,
                n=sum(cell.n for cell in kept),
                n_pos=sum(cell.n_pos for cell in kept),
                scores={"f1": macro_aggregate(ref_cells)["f1"]},
                ci_low=macro_ref_result.ci_b[0],
                ci_high=macro_ref_result.ci_b[1],
                p_value=macro_ref_result.p_value,
            )
        )

    # Per-annotator rows against the consensus of the other annotators.
    if human_eval:
        annotator_ids = sorted({r.annotator_id for r in annotations})
        human_groups: list[PairedVectors] = []
        human_names: list[str] = []
        for annotator_id in annotator_ids:
            subset = human_eval_subset(annotations, annotator_id)
            if not subset:
                report.notes.append(
                    f"annotator {annotator_id}: no cells with unanimous others, skipped"
                )
                continue
            human_pred = [c.pred_label for c in subset]
            human_gt = [c.gt_label for c in subset]
            main_pred = [
                index.target(c.report_id, c.organ, c.finding_group) for c in subset
            ]
            result = paired_bootstrap(
                human_pred, main_pred, human_gt, seed=seed, n_iter=n_iter,
                parallelism=bootstrap_parallelism,
            )
            counts = confusion_counts(human_pred, human_gt)
            report.rows.append(
                MetricsRow(
                    kind="human",
                    organ="all",
                    finding_group="all",
                    labeler=annotator_id,
                    n=counts.n,
                    n_pos=counts.n_pos,
                    scores=_row_scores(counts),
                    ci_low=result.ci_a[0],
                    ci_high=result.ci_a[1],
                    p_value=result.p_value,
                    main_f1_on_subset=f1_from_vectors(main_pred, human_gt),
                    mcc_degenerate=mcc_is_degenerate(counts),
                )
            )
            human_groups.append((human_pred, main_pred, human_gt))
            human_names.append(annotator_id)
        if human_groups:
            avg_result = grouped_paired_bootstrap(
                human_groups, f1_from_vectors, seed=seed, n_iter=n_iter,
                parallelism=bootstrap_parallelism,
            )
            avg_scores = {
                "f1": math.fsum(
                    f1_from_vectors(g[0], g[2]) for g in human_groups
                )
                / len(human_groups)
            }
            report.rows.append(
                MetricsRow(
                    kind="human_avg",
                    organ="all",
                    finding_group="all",
                    labeler="human_avg",
                    n=None,
                    n_pos=None,
                    scores=avg_scores,
                    ci_low=avg_result.ci_a[0],
                    ci_high=avg_result.ci_a[1],
                    p_value=avg_result.p_value,
                    main_f1_on_subset=avg_result.point_b,
                )
            )

    # Urgency agreement per organ group.
    urgency_gt = _urgency_gt_by_group(annotations)
    urgency_pred = _urgency_pred_by_group(labels)
    group_pairs: dict[str, list[tuple[float, float]]] = {}
    for key in sorted(urgency_gt):
        report_id, group = key
        if key in urgency_pred:
            group_pairs.setdefault(group, []).append(
                (float(urgency_pred[key]), urgency_gt[key])
            )
    kept_taus: list[float] = []
    for group in sorted(group_pairs, key=organ_sort_key):
        pairs = group_pairs[group]
        gt_values = [p[1] for p in pairs]
        pred_values = [p[0] for p in pairs]
        mode_count = max(
            sum(1 for v in gt_values if v == candidate) for candidate in set(gt_values)
        )
        n_off_mode = len(pairs) - mode_count
        if n_off_mode <= min_positive:
            report.notes.append(
                f"urgency {group}: only {n_off_mode} samples off the modal value"
                f" (need more than {min_positive}), row skipped"
            )
            continue
        try:
            tau = kendall_tau_b(pred_values, gt_values)
        except DegenerateInputError as exc:
            report.notes.append(f"urgency {group}: {exc}, row skipped")
            continue
        result = grouped_paired_bootstrap(
            [(pred_values, pred_values, gt_values)],
            _tau_score_fn,
            seed=seed,
            n_iter=n_iter,
            parallelism=bootstrap_parallelism,
        )
        report.urgency_rows.append(
            UrgencyRow(
                kind="cell",
                organ_group=group,
                labeler=labeler_name,
                n=len(pairs),
                n_off_mode=n_off_mode,
                tau_b=tau,
                ci_low=result.ci_a[0],
                ci_high=result.ci_a[1],
            )
        )
        kept_taus.append(tau)
    if kept_taus:
        report.urgency_rows.append(
            UrgencyRow(
                kind="macro",
                organ_group="all",
                labeler=labeler_name,
                n=None,
                n_off_mode=None,
                tau_b=math.fsum(kept_taus) / len(kept_taus),
            )
        )

    # Urgency prevalence per labeler.
    model_urgencies = [int(l.urgency) for l in labels if l.urgency is not None]
    if model_urgencies:
        report.prevalence[labeler_name] = prevalence_table(model_urgencies)
    for annotator_id in sorted({r.annotator_id for r in annotations}):
        values = [
            int(r.urgency)
            for r in annotations
            if r.annotator_id == annotator_id and r.urgency is not None
        ]
        if values:
            report.prevalence[annotator_id] = prevalence_table(values)
    return report


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

_METRIC_COLUMNS = (
    "kind",
    "organ",
    "finding_group",
    "labeler",
    "n",
    "n_pos",
    "f1",
    "ci_low",
    "ci_high",
    "precision",
    "recall",
    "specificity",
    "mcc",
    "mcc_degenerate",
    "main_f1_on_subset",
    "p_value",
    "p_marker",
)


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    import csv as _csv

    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(_METRIC_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.kind,
                    row.organ,
                    row.finding_group,
                    row.labeler,
                    _fmt(row.n),
                    _fmt(row.n_pos),
                    _fmt(row.scores.get("f1")),
                    _fmt(row.ci_low),
                    _fmt(row.ci_high),
                    _fmt(row.scores.get("precision")),
                    _fmt(row.scores.get("recall")),
                    _fmt(row.scores.get("specificity")),
                    _fmt(row.scores.get("mcc")),
                    _fmt(row.mcc_degenerate),
                    _fmt(row.main_f1_on_subset),
                    _fmt(row.p_value),
                    row.marker,
                ]
            )


def write_urgency_csv(rows: Sequence[UrgencyRow], path: str | Path) -> None:
    import csv as _csv

    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(
            ["kind", "organ_group", "labeler", "n", "n_off_mode", "tau_b", "ci_low", "ci_high"]
        )
        for row in rows:
            writer.writerow(
                [
                    row.kind,
                    row.organ_group,
                    row.labeler,
                    _fmt(row.n),
                    _fmt(row.n_off_mode),
                    _fmt(row.tau_b),
                    _fmt(row.ci_low),
                    _fmt(row.ci_high),
                ]
            )


def write_prevalence_csv(
    prevalence: Mapping[str, Mapping[int, float]], path: str | Path
) -> None:
    import csv as _csv

    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(["labeler", "level_0", "level_1", "level_2", "level_3"])
        for labeler in prevalence:
            table = prevalence[labeler]
            writer.writerow(
                [labeler] + [_fmt(table.get(level, 0.0)) for level in (0, 1, 2, 3)]
            )


def report_to_json_dict(report: EvalReport) -> dict:
    return {
        "rows": [
            {
                "kind": row.kind,
                "organ": row.organ,
                "finding_group": row.finding_group,
                "labeler": row.labeler,
                "n": row.n,
                "n_pos": row.n_pos,
                "scores": dict(row.scores),
                "ci_low": row.ci_low,
                "ci_high": row.ci_high,
                "p_value": row.p_value,
                "p_marker": row.marker,
                "main_f1_on_subset": row.main_f1_on_subset,
                "mcc_degenerate": row.mcc_degenerate,
            }
            for row in report.rows
        ],
        "urgency_rows": [
            {
                "kind": row.kind,
                "organ_group": row.organ_group,
                "labeler": row.labeler,
                "n": row.n,
                "n_off_mode": row.n_off_mode,
                "tau_b": row.tau_b,
                "ci_low": row.ci_low,
                "ci_high": row.ci_high,
            }
            for row in report.urgency_rows
        ],
        "prevalence": {
            labeler: {str(level): value for level, value in table.items()}
            for labeler, table in report.prevalence.items()
        },
        "excluded_cells": list(report.excluded_cells),
        "notes": list(report.notes),
    }


def write_metrics_json(report: EvalReport, path: str | Path) -> None:
    import json as _json

    Path(path).write_text(
        _json.dumps(report_to_json_dict(report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
