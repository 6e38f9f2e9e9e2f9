from __future__ import annotations

import random

import pytest

from ctlabeler.labels_io import SUPERVISION_KEYS, AnnotatorRecord, merge_supervision_targets
from ctlabeler.schema import (
    FindingType,
    LlmConfig,
    Organ,
    Report,
    UncertaintyCategory,
    UrgencyLevel,
)
from ctlabeler.scripting import (
    CellPlan,
    PlannedFinding,
    ScriptBuilder,
    build_demo_corpus,
)


@pytest.fixture(scope="session")
def demo_corpus():
    """Six synthetic reports with a complete response script."""
    return build_demo_corpus(6)


@pytest.fixture()
def liver_report() -> Report:
    return Report.from_text(
        "rpt1",
        "CT of the abdomen without contrast. "
        "Liver contains a 2.3 cm hypodense lesion in segment 4. "
        "No biliary ductal dilation. "
        "Spleen is normal in size.",
    )


@pytest.fixture()
def focal_plan() -> CellPlan:
    return CellPlan(
        step1=frozenset({1}),
        step2_yes=frozenset({2}),
        findings=(
            PlannedFinding(
                FindingType.FOCAL, UncertaintyCategory.POSITIVE, UrgencyLevel.MEDIUM
            ),
        ),
    )


def run_scripted_cell(report, organ, plan, config=None):
    """Script one cell and run the pipeline over it; returns (labels, labeler)."""
    from ctlabeler.pipeline import Labeler

    config = config if config is not None else LlmConfig()
    builder = ScriptBuilder(config=config)
    builder.script_cell(report, organ, plan)
    labeler = Labeler(config, builder.backend())
    labels = labeler.label_cell(report, organ)
    return labels, labeler


def make_annotations(
    labels, report_ids, *, annotators=("a1", "a2", "a3"), flip_rate=0.0, seed=11
):
    """Annotation records derived from merged targets, with optional noise."""
    rng = random.Random(seed)
    merged = merge_supervision_targets(labels, report_ids=list(report_ids))
    records = []
    for sup in merged:
        for group in SUPERVISION_KEYS:
            for annotator in annotators:
                value = sup.targets[group]
                if flip_rate and rng.random() < flip_rate:
                    value = 1 - value
                urgency = sup.urgencies.get(group)
                records.append(
                    AnnotatorRecord(
                        annotator_id=annotator,
                        report_id=sup.report_id,
                        organ=sup.organ,
                        finding_group=group,
                        label=value,
                        urgency=urgency if value == 1 and urgency is not None else None,
                    )
                )
    return records


ALL_ORGANS = tuple(Organ)
