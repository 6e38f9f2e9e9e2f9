from __future__ import annotations

import math
import random

import numpy as np
import pytest

from ctlabeler.errors import DataFormatError, DegenerateInputError
from ctlabeler.evaluation import (
    ConfusionCounts,
    EvalCell,
    bootstrap_ci,
    build_ground_truth,
    confusion_counts,
    evaluate_labels,
    f1,
    f1_from_vectors,
    grouped_paired_bootstrap,
    human_eval_subset,
    kendall_tau_b,
    macro_aggregate,
    majority_vote,
    max_urgency_per_organ,
    mcc,
    mcc_is_degenerate,
    micro_aggregate,
    min_positive_filter,
    p_marker,
    paired_bootstrap,
    precision,
    prevalence_table,
    recall,
    score_table,
    specificity,
)
from ctlabeler.labels_io import AnnotatorRecord
from ctlabeler.schema import (
    FindingType,
    Organ,
    OrganFindingLabel,
    UncertaintyCategory,
    UrgencyLevel,
)

from conftest import make_annotations


def _counts_by_loop(pred, gt) -> ConfusionCounts:
    tp = fp = tn = fn = 0
    for p, g in zip(pred, gt):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 0:
            tn += 1
        else:
            fn += 1
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _cell(pred, gt, organ="liver", group="focal") -> EvalCell:
    ids = tuple(f"r{i}" for i in range(len(gt)))
    return EvalCell(
        organ=organ, finding_group=group, report_ids=ids, pred=tuple(pred), gt=tuple(gt)
    )


# ---------------------------------------------------------------------------
# Confusion counts and scores
# ---------------------------------------------------------------------------


def test_confusion_counts_match_direct_tally():
    rng = random.Random(7)
    for _ in range(300):
        n = rng.randint(1, 50)
        pred = [rng.randint(0, 1) for _ in range(n)]
        gt = [rng.randint(0, 1) for _ in range(n)]
        assert confusion_counts(pred, gt) == _counts_by_loop(pred, gt)


def test_confusion_counts_rejects_bad_values():
    with pytest.raises(ValueError):
        confusion_counts([0, 2], [0, 1])
    with pytest.raises(ValueError):
        confusion_counts([0, 1], [0])


def test_zero_denominator_scores_are_zero():
    no_positive_predictions = ConfusionCounts(tp=0, fp=0, tn=5, fn=3)
    assert precision(no_positive_predictions) == 0.0
    no_actual_positives = ConfusionCounts(tp=0, fp=2, tn=5, fn=0)
    assert recall(no_actual_positives) == 0.0
    no_actual_negatives = ConfusionCounts(tp=3, fp=0, tn=0, fn=2)
    assert specificity(no_actual_negatives) == 0.0
    all_empty = ConfusionCounts(0, 0, 0, 0)
    assert f1(all_empty) == 0.0
    assert mcc(all_empty) == 0.0


def test_mcc_degenerate_flag():
    assert mcc_is_degenerate(ConfusionCounts(tp=3, fp=0, tn=0, fn=0))
    assert mcc_is_degenerate(ConfusionCounts(tp=0, fp=0, tn=9, fn=0))
    assert not mcc_is_degenerate(ConfusionCounts(tp=3, fp=1, tn=4, fn=2))
    assert mcc(ConfusionCounts(tp=3, fp=0, tn=0, fn=0)) == 0.0


def test_f1_is_harmonic_mean_of_precision_and_recall():
    rng = random.Random(13)
    for _ in range(200):
        counts = ConfusionCounts(
            tp=rng.randint(0, 20),
            fp=rng.randint(0, 20),
            tn=rng.randint(0, 20),
            fn=rng.randint(0, 20),
        )
        p, r = precision(counts), recall(counts)
        expected = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert f1(counts) == pytest.approx(expected, abs=1e-12)


def test_mcc_known_value():
    counts = ConfusionCounts(tp=6, fp=1, tn=8, fn=2)
    expected = (6 * 8 - 1 * 2) / math.sqrt((6 + 1) * (6 + 2) * (8 + 1) * (8 + 2))
    assert mcc(counts) == pytest.approx(expected, abs=1e-12)


def test_score_table_and_f1_from_vectors_agree():
    pred = [1, 0, 1, 1, 0, 0, 1]
    gt = [1, 0, 0, 1, 1, 0, 1]
    counts = confusion_counts(pred, gt)
    table = score_table(counts)
    assert table["f1"] == f1_from_vectors(pred, gt)
    assert set(table) == {"f1", "precision", "recall", "specificity", "mcc"}


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def test_micro_equals_concatenation():
    rng = random.Random(17)
    cells = []
    all_pred: list[int] = []
    all_gt: list[int] = []
    for k in range(5):
        n = rng.randint(2, 30)
        pred = [rng.randint(0, 1) for _ in range(n)]
        gt = [rng.randint(0, 1) for _ in range(n)]
        cells.append(_cell(pred, gt, group=f"g{k}"))
        all_pred.extend(pred)
        all_gt.extend(gt)
    assert micro_aggregate(cells) == confusion_counts(all_pred, all_gt)


def test_single_cell_micro_macro_and_cell_agree():
    cell = _cell([1, 0, 1, 0], [1, 1, 0, 0])
    micro_scores = score_table(micro_aggregate([cell]))
    macro_scores = macro_aggregate([cell])
    cell_scores = score_table(cell.counts)
    assert micro_scores == macro_scores == cell_scores


def test_macro_is_order_invariant():
    cells = [
        _cell([1, 0, 1], [1, 1, 0], group="a"),
        _cell([0, 0, 1, 1], [0, 1, 1, 1], group="b"),
        _cell([1, 1], [1, 1], group="c"),
    ]
    forward = macro_aggregate(cells)
    backward = macro_aggregate(list(reversed(cells)))
    assert forward == backward
    with pytest.raises(ValueError):
        macro_aggregate([])


def test_min_positive_filter_is_strict():
    cells = [
        _cell([1] * 10, [1] * 10, group="exactly_ten"),
        _cell([1] * 11, [1] * 11, group="eleven"),
    ]
    kept = min_positive_filter(cells, 10)
    assert [c.finding_group for c in kept] == ["eleven"]
    assert len(min_positive_filter(cells, 0)) == 2


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


def _record(annotator, label, urgency=None, group="focal"):
    return AnnotatorRecord(
        annotator_id=annotator,
        report_id="r1",
        organ="liver",
        finding_group=group,
        label=label,
        urgency=urgency,
    )


def test_majority_vote_basic():
    cell = majority_vote([_record("a", 1), _record("b", 1), _record("c", 0)])
    assert cell.label == 1
    assert cell.n_annotators == 3


def test_majority_vote_even_tie_returns_none():
    assert majority_vote([_record("a", 1), _record("b", 0)]) is None


def test_majority_vote_urgency_mean_over_available():
    cell = majority_vote(
        [_record("a", 1, urgency=1), _record("b", 1, urgency=2), _record("c", 1)]
    )
    assert cell.urgency_mean == pytest.approx(1.5)


def test_majority_vote_duplicate_annotator_rejected():
    with pytest.raises(DataFormatError):
        majority_vote([_record("a", 1), _record("a", 0), _record("b", 1)])


def test_majority_vote_mixed_cells_rejected():
    other = AnnotatorRecord(
        annotator_id="b", report_id="r2", organ="liver", finding_group="focal", label=1
    )
    with pytest.raises(ValueError):
        majority_vote([_record("a", 1), other])
    with pytest.raises(ValueError):
        majority_vote([])


def test_build_ground_truth_excludes_ties_with_note():
    records = [
        _record("a", 1),
        _record("b", 0),
        _record("a", 1, group="size"),
        _record("b", 1, group="size"),
    ]
    cells, excluded = build_ground_truth(records)
    assert list(cells) == [("r1", "liver", "size")]
    assert len(excluded) == 1
    assert "tie" in excluded[0]


def test_human_eval_subset_rules():
    records = [
        # kept: others (b, c) unanimous, a disagrees
        _record("a", 0, group="focal"),
        _record("b", 1, urgency=1, group="focal"),
        _record("c", 1, urgency=3, group="focal"),
        # dropped: others disagree with each other
        _record("a", 1, group="size"),
        _record("b", 1, group="size"),
        _record("c", 0, group="size"),
        # dropped: fewer than three annotators
        _record("a", 1, group="device"),
        _record("b", 1, group="device"),
    ]
    cells = human_eval_subset(records, "a")
    assert len(cells) == 1
    cell = cells[0]
    assert cell.finding_group == "focal"
    assert cell.pred_label == 0
    assert cell.gt_label == 1
    assert cell.gt_urgency == pytest.approx(2.0)


def test_human_eval_subset_requires_target_presence():
    records = [
        _record("b", 1),
        _record("c", 1),
        _record("d", 1),
    ]
    assert human_eval_subset(records, "a") == []


# ---------------------------------------------------------------------------
# Kendall tau-b
# ---------------------------------------------------------------------------


def _tau_by_pair_counting(x, y) -> float:
    n = len(x)
    concordant = discordant = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0 and dy == 0:
                ties_x += 1
                ties_y += 1
            elif dx == 0:
                ties_x += 1
            elif dy == 0:
                ties_y += 1
            elif dx * dy > 0:
                concordant += 1
            else:
                discordant += 1
    total = n * (n - 1) / 2
    denom = math.sqrt((total - ties_x) * (total - ties_y))
    return (concordant - discordant) / denom


def test_tau_b_perfect_and_reversed():
    assert kendall_tau_b([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_tau_b_matches_pair_counting_oracle_with_ties():
    rng = random.Random(23)
    for _ in range(200):
        n = rng.randint(2, 30)
        x = [rng.randint(0, 3) for _ in range(n)]
        y = [rng.randint(0, 3) for _ in range(n)]
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert kendall_tau_b(x, y) == pytest.approx(
            _tau_by_pair_counting(x, y), abs=1e-12
        )


def test_tau_b_constant_input_is_degenerate():
    with pytest.raises(DegenerateInputError):
        kendall_tau_b([1, 1, 1], [0, 1, 2])
    with pytest.raises(DegenerateInputError):
        kendall_tau_b([0, 1, 2], [2, 2, 2])
    with pytest.raises(DegenerateInputError):
        kendall_tau_b([1], [1])


def test_tau_b_invariant_under_monotone_transform():
    x = [0, 2, 1, 3, 2, 0]
    y = [1, 3, 0, 3, 2, 1]
    base = kendall_tau_b(x, y)
    assert kendall_tau_b([v * 10 + 5 for v in x], y) == pytest.approx(base)
    assert kendall_tau_b(x, [math.exp(v) for v in y]) == pytest.approx(base)


# ---------------------------------------------------------------------------
# Bootstrap and permutation test
# ---------------------------------------------------------------------------


def test_identical_labelers_give_p_one_and_equal_cis():
    rng = random.Random(31)
    pred = [rng.randint(0, 1) for _ in range(60)]
    gt = [rng.randint(0, 1) for _ in range(60)]
    result = paired_bootstrap(pred, pred, gt, seed=5, n_iter=400)
    assert result.p_value == 1.0
    assert result.point_a == result.point_b
    assert result.ci_a == result.ci_b


def test_clearly_different_labelers_give_small_p():
    gt = [1, 0] * 25
    perfect = list(gt)
    wrong = [1 - g for g in gt]
    result = paired_bootstrap(perfect, wrong, gt, seed=5, n_iter=999)
    assert result.point_a == 1.0
    assert result.point_b == 0.0
    assert result.p_value < 0.01


def test_ci_contains_point_estimate():
    rng = random.Random(41)
    for seed in range(5):
        gt = [rng.randint(0, 1) for _ in range(40)]
        pred = [g if rng.random() < 0.8 else 1 - g for g in gt]
        low, high = bootstrap_ci(pred, gt, seed=seed, n_iter=300)
        point = f1_from_vectors(pred, gt)
        assert low <= point <= high


def test_bootstrap_is_parallelism_invariant_and_seeded():
    rng = random.Random(43)
    gt = [rng.randint(0, 1) for _ in range(50)]
    a = [g if rng.random() < 0.9 else 1 - g for g in gt]
    b = [g if rng.random() < 0.7 else 1 - g for g in gt]
    serial = paired_bootstrap(a, b, gt, seed=11, n_iter=500)
    threaded = paired_bootstrap(a, b, gt, seed=11, n_iter=500, parallelism=4)
    assert serial == threaded
    again = paired_bootstrap(a, b, gt, seed=11, n_iter=500)
    assert serial == again
    other_seed = paired_bootstrap(a, b, gt, seed=12, n_iter=500)
    assert other_seed.ci_a != serial.ci_a or other_seed.p_value != serial.p_value


def test_grouped_bootstrap_scores_mean_over_groups():
    groups = [
        ([1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 0, 0]),
        ([1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]),
    ]
    result = grouped_paired_bootstrap(groups, f1_from_vectors, seed=3, n_iter=50)
    expected_a = (
        f1_from_vectors(groups[0][0], groups[0][2])
        + f1_from_vectors(groups[1][0], groups[1][2])
    ) / 2
    assert result.point_a == pytest.approx(expected_a, abs=1e-12)


def test_grouped_bootstrap_skips_degenerate_groups():
    def tau_score(pred, gt):
        return kendall_tau_b(pred, gt)

    groups = [
        ([0, 1, 2, 3], [0, 1, 2, 3], [0, 1, 2, 3]),
        ([2, 2, 2, 2], [2, 2, 2, 2], [0, 1, 2, 3]),  # constant: no tau
    ]
    result = grouped_paired_bootstrap(groups, tau_score, seed=3, n_iter=50)
    assert result.point_a == pytest.approx(1.0)


def test_bootstrap_input_validation():
    with pytest.raises(ValueError):
        grouped_paired_bootstrap([], f1_from_vectors, seed=0)
    with pytest.raises(ValueError):
        grouped_paired_bootstrap(
            [([1], [1], [1])], f1_from_vectors, seed=0, n_iter=0
        )
    with pytest.raises(ValueError):
        grouped_paired_bootstrap([([1, 0], [1], [1, 0])], f1_from_vectors, seed=0)


def test_p_marker_thresholds():
    assert p_marker(None) == ""
    assert p_marker(0.2) == "ns"
    assert p_marker(0.049) == "*"
    assert p_marker(0.009) == "**"
    assert p_marker(0.0009) == "***"


# ---------------------------------------------------------------------------
# Urgency helpers
# ---------------------------------------------------------------------------


def test_max_urgency_per_organ():
    def label(rid, organ, ft, urgency):
        return OrganFindingLabel(
            report_id=rid,
            organ=organ,
            finding_type=ft,
            uncertainty=UncertaintyCategory.POSITIVE,
            urgency=urgency,
            evidence=(0,),
        )

    labels = [
        label("r1", Organ.LIVER, FindingType.FOCAL, UrgencyLevel.LOW),
        label("r1", Organ.LIVER, FindingType.ENLARGED, UrgencyLevel.HIGH),
        label("r1", Organ.SPLEEN, FindingType.DEVICE, UrgencyLevel.NORMAL),
        OrganFindingLabel(
            report_id="r2",
            organ=Organ.LIVER,
            finding_type=FindingType.FOCAL,
            uncertainty=UncertaintyCategory.NEGATIVE,
            urgency=None,
            evidence=(0,),
        ),
    ]
    assert max_urgency_per_organ(labels) == {
        ("r1", "liver"): 3,
        ("r1", "spleen"): 0,
    }


def test_prevalence_table():
    table = prevalence_table([0, 0, 1, 2, 2, 2, 3, 0])
    assert table[0] == pytest.approx(37.5)
    assert table[1] == pytest.approx(12.5)
    assert table[2] == pytest.approx(37.5)
    assert table[3] == pytest.approx(12.5)
    assert math.fsum(table.values()) == pytest.approx(100.0)
    uniform = prevalence_table([1, 1, 1])
    assert uniform == {0: 0.0, 1: 100.0, 2: 0.0, 3: 0.0}
    with pytest.raises(DegenerateInputError):
        prevalence_table([])
    with pytest.raises(ValueError):
        prevalence_table([5])


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def demo_eval(demo_corpus_module):
    corpus, labels = demo_corpus_module
    report_ids = [r.id for r in corpus.reports]
    annotations = make_annotations(labels, report_ids, flip_rate=0.08, seed=3)
    return labels, annotations


@pytest.fixture(scope="module")
def demo_corpus_module():
    from ctlabeler.scripting import build_demo_corpus

    corpus = build_demo_corpus(8)
    return corpus, corpus.expected_labels()


def test_evaluate_labels_produces_all_row_kinds(demo_eval):
    labels, annotations = demo_eval
    report = evaluate_labels(
        labels,
        annotations,
        labeler_name="model",
        min_positive=0,
        n_iter=100,
        seed=1,
        human_eval=True,
    )
    kinds = {row.kind for row in report.rows}
    assert {"cell", "micro", "macro", "human", "human_avg"} <= kinds
    assert {row.labeler for row in report.rows if row.kind == "human"} == {
        "a1",
        "a2",
        "a3",
    }
    micro = [row for row in report.rows if row.kind == "micro"]
    assert len(micro) == 1
    assert micro[0].ci_low is not None and micro[0].ci_high is not None
    assert micro[0].ci_low <= micro[0].scores["f1"] <= micro[0].ci_high
    assert report.urgency_rows, "urgency agreement rows expected"
    macro_tau = [row for row in report.urgency_rows if row.kind == "macro"]
    assert len(macro_tau) == 1
    assert report.prevalence


def test_evaluate_labels_reference_self_comparison(demo_eval):
    labels, annotations = demo_eval
    report = evaluate_labels(
        labels,
        annotations,
        labeler_name="model",
        reference_labels=labels,
        reference_name="twin",
        min_positive=0,
        n_iter=100,
        seed=1,
    )
    ref_rows = [row for row in report.rows if row.labeler == "twin"]
    assert ref_rows
    for row in ref_rows:
        if row.p_value is not None:
            assert row.p_value == 1.0


def test_evaluate_labels_min_positive_drops_sparse_cells(demo_eval):
    labels, annotations = demo_eval
    report = evaluate_labels(
        labels, annotations, min_positive=10_000, n_iter=10, seed=1
    )
    assert [row for row in report.rows if row.kind == "cell"] == []
    assert report.notes


def test_evaluate_labels_deterministic(demo_eval):
    labels, annotations = demo_eval
    first = evaluate_labels(labels, annotations, min_positive=0, n_iter=60, seed=9)
    second = evaluate_labels(labels, annotations, min_positive=0, n_iter=60, seed=9)
    assert first.rows == second.rows
    assert first.urgency_rows == second.urgency_rows
    parallel = evaluate_labels(
        labels,
        annotations,
        min_positive=0,
        n_iter=60,
        seed=9,
        bootstrap_parallelism=4,
    )
    assert parallel.rows == first.rows


def test_report_writers(tmp_path, demo_eval):
    from ctlabeler.evaluation import (
        report_to_json_dict,
        write_metrics_csv,
        write_metrics_json,
        write_prevalence_csv,
        write_urgency_csv,
    )

    labels, annotations = demo_eval
    report = evaluate_labels(
        labels, annotations, min_positive=0, n_iter=30, seed=2, human_eval=True
    )
    csv_path = tmp_path / "metrics.csv"
    write_metrics_csv(report.rows, csv_path)
    header = csv_path.read_text(encoding="utf-8").splitlines()[0]
    for column in ("kind", "organ", "finding_group", "f1", "ci_low", "p_value"):
        assert column in header.split(",")

    write_urgency_csv(report.urgency_rows, tmp_path / "urgency.csv")
    write_prevalence_csv(report.prevalence, tmp_path / "prevalence.csv")
    json_path = tmp_path / "metrics.json"
    write_metrics_json(report, json_path)
    import json

    data = json.loads(json_path.read_text(encoding="utf-8"))
    assert data == report_to_json_dict(report)
    assert {"rows", "urgency_rows", "prevalence"} <= set(data)
