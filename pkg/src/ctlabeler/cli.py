"""Command-line interface.

Subcommands
-----------
- ``label``: run the labeling pipeline over a report corpus.
- ``evaluate``: score a label file against human annotations.
- ``merge``: collapse per-type labels into binary supervision targets.
- ``inspect``: print the stored exchanges behind one (report, organ) cell.

Exit codes: 0 success, 1 usage error, 2 data error, 3 endpoint failure.

Option values are resolved as flags over config file over built-in
defaults. The config file is plain ``key = value`` lines (``#`` comments);
keys match the long flag names with underscores.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from .errors import (
    CheckpointError,
    CtLabelerError,
    DataFormatError,
    DegenerateInputError,
    DuplicateReportIdError,
    EmptyReportError,
    GatewayError,
    UnknownTranscriptIdError,
)
from .evaluation import (
    DEFAULT_BOOTSTRAP_ITERATIONS,
    DEFAULT_MIN_POSITIVE,
    evaluate_labels,
    write_metrics_csv,
    write_metrics_json,
    write_prevalence_csv,
    write_urgency_csv,
    report_to_json_dict,
)
from .gateway import HttpChatBackend, ScriptedBackend, TranscriptStore
from .labels_io import (
    POSITIVE_POLICIES,
    join_organs,
    merge_supervision_targets,
    read_annotations,
    read_labels,
    read_reports,
    write_labels,
    write_supervision,
)
from .pipeline import Labeler, config_fingerprint
from .prompts import TemplateSet, default_templates
from .schema import AblationFlag, LlmConfig, Organ

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ENDPOINT = 3

_GATEWAY_FAILURE_KINDS = {
    "ExhaustedRetriesError",
    "TransientBackendError",
    "MalformedResponseError",
    "ContextOverflowError",
}


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config file and option resolution
# ---------------------------------------------------------------------------


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments ignored."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(
                "expected key = value", path=str(path), line_no=line_no
            )
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not key:
            raise DataFormatError("empty key", path=str(path), line_no=line_no)
        values[key] = value.strip()
    return values


_CONFIG_KEYS = {
    "endpoint": str,
    "model": str,
    "temperature": float,
    "max_tokens": int,
    "retry_limit": int,
    "parallelism": int,
    "ablation": str,
}


def _parse_ablation(value: str) -> frozenset[AblationFlag]:
    flags = set()
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            flags.add(AblationFlag(part))
        except ValueError:
            valid = ", ".join(flag.value for flag in AblationFlag)
            raise _UsageError(f"unknown ablation flag {part!r} (valid: {valid})")
    return frozenset(flags)


def resolve_llm_config(args: argparse.Namespace) -> LlmConfig:
    """Merge built-in defaults, the config file, and explicit flags."""
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        raw = parse_config_file(args.config)
        for key, text in raw.items():
            if key not in _CONFIG_KEYS:
                raise _UsageError(f"unknown config key {key!r} in {args.config}")
            if key == "ablation":
                values[key] = _parse_ablation(text)
            else:
                try:
                    values[key] = _CONFIG_KEYS[key](text)
                except ValueError:
                    raise _UsageError(f"bad value for config key {key!r}: {text!r}")
    for key in _CONFIG_KEYS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = (
                _parse_ablation(flag_value) if key == "ablation" else flag_value
            )
    try:
        return LlmConfig(
            endpoint_url=str(values.get("endpoint", "")),
            model_name=str(values.get("model", "")),
            temperature=float(values.get("temperature", 0.0)),
            max_tokens=int(values.get("max_tokens", 1024)),
            retry_limit=int(values.get("retry_limit", 3)),
            parallelism=int(values.get("parallelism", 1)),
            ablation_flags=values.get("ablation", frozenset()),  # type: ignore[arg-type]
        )
    except ValueError as exc:
        raise _UsageError(str(exc))


def _parse_organs(value: str | None) -> list[Organ] | None:
    if value is None:
        return None
    organs: list[Organ] = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            organ = Organ(part)
        except ValueError:
            valid = ", ".join(o.value for o in Organ)
            raise _UsageError(f"unknown organ {part!r} (valid: {valid})")
        if organ not in organs:
            organs.append(organ)
    if not organs:
        raise _UsageError("no organs given")
    return organs


def _write_manifest(
    path: Path,
    command: str,
    *,
    config: Mapping | None = None,
    templates: TemplateSet | None = None,
    inputs: Mapping[str, str] | None = None,
    outputs: Mapping[str, str] | None = None,
    extra: Mapping | None = None,
) -> None:
    manifest: dict = {
        "tool": "ctlabeler",
        "version": __version__,
        "command": command,
        "inputs": dict(inputs or {}),
        "outputs": dict(outputs or {}),
    }
    if config is not None:
        manifest["config"] = dict(config)
    if templates is not None:
        manifest["template_hashes"] = templates.hashes()
    if extra:
        manifest.update(extra)
    path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_label(args: argparse.Namespace) -> int:
    config = resolve_llm_config(args)
    if args.scripted:
        backend = ScriptedBackend.from_file(args.scripted)
    else:
        if not config.endpoint_url or not config.model_name:
            raise _UsageError(
                "either --scripted or both --endpoint and --model are required"
            )
        backend = HttpChatBackend()
    templates = (
        TemplateSet.load(args.templates) if args.templates else default_templates()
    )
    reports = read_reports(args.reports, strict=not args.lenient)
    if not reports:
        print(f"error: no reports in {args.reports}", file=sys.stderr)
        return EXIT_DATA
    organs = _parse_organs(args.organs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    transcripts = Path(args.transcripts or out.with_name(out.stem + ".transcripts.jsonl"))
    checkpoint = Path(args.checkpoint or out.with_name(out.stem + ".checkpoint.json"))
    store = TranscriptStore(transcripts)
    labeler = Labeler(config, backend, templates=templates, store=store)
    run = labeler.run_corpus(
        reports,
        organs=organs,
        checkpoint_path=checkpoint,
        resume=args.resume,
    )
    write_labels(out, run.outputs)
    _write_manifest(
        _manifest_path(out),
        "label",
        config=config.to_json_dict(),
        templates=templates,
        inputs={"reports": str(args.reports)},
        outputs={
            "labels": str(out),
            "transcripts": str(transcripts),
            "checkpoint": str(checkpoint),
        },
        extra={
            "corpus_id": run.corpus_id,
            "config_fingerprint": config_fingerprint(config, templates),
            "organs": [o.value for o in (organs or list(Organ))],
        },
    )
    n_cells = len(reports) * len(organs or list(Organ))
    print(
        f"labeled {n_cells - len(run.failures)}/{n_cells} cells across"
        f" {len(reports)} reports: {len(run.outputs)} labels -> {out}"
    )
    if run.failures:
        for failure in run.failures:
            print(
                f"failed cell {failure.report_id}/{failure.organ.value}"
                f" at {failure.stage}: {failure.message}",
                file=sys.stderr,
            )
        if any(f.kind in _GATEWAY_FAILURE_KINDS for f in run.failures):
            print(
                "endpoint errors occurred; progress is checkpointed, rerun"
                " with --resume",
                file=sys.stderr,
            )
            return EXIT_ENDPOINT
        return EXIT_DATA
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.positive_policy not in POSITIVE_POLICIES:
        raise _UsageError(
            f"--positive-policy must be one of {', '.join(POSITIVE_POLICIES)}"
        )
    labels = read_labels(args.labels, strict=not args.lenient)
    annotations = read_annotations(args.annotations, strict=not args.lenient)
    reference = (
        read_labels(args.reference, strict=not args.lenient)
        if args.reference
        else None
    )
    report = evaluate_labels(
        labels,
        annotations,
        labeler_name=args.labeler_name,
        reference_labels=reference,
        reference_name=args.reference_name,
        human_eval=args.human_eval,
        min_positive=args.min_positive,
        n_iter=args.bootstrap_iterations,
        seed=args.seed,
        positive_policy=args.positive_policy,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_csv = out_dir / "metrics.csv"
    metrics_json = out_dir / "metrics.json"
    write_metrics_csv(report.rows, metrics_csv)
    write_metrics_json(report, metrics_json)
    outputs = {"metrics_csv": str(metrics_csv), "metrics_json": str(metrics_json)}
    if report.urgency_rows:
        urgency_csv = out_dir / "urgency.csv"
        write_urgency_csv(report.urgency_rows, urgency_csv)
        outputs["urgency_csv"] = str(urgency_csv)
    if report.prevalence:
        prevalence_csv = out_dir / "prevalence.csv"
        write_prevalence_csv(report.prevalence, prevalence_csv)
        outputs["prevalence_csv"] = str(prevalence_csv)
    if not args.no_figures:
        from . import figures

        score_png = out_dir / "scores.png"
        figures.save_score_figure(report.rows, score_png)
        if score_png.exists():
            outputs["scores_png"] = str(score_png)
        if report.urgency_rows:
            urgency_png = out_dir / "urgency.png"
            figures.save_urgency_figure(report.urgency_rows, urgency_png)
            if urgency_png.exists():
                outputs["urgency_png"] = str(urgency_png)
        if report.prevalence:
            prevalence_png = out_dir / "prevalence.png"
            figures.save_prevalence_figure(report.prevalence, prevalence_png)
            if prevalence_png.exists():
                outputs["prevalence_png"] = str(prevalence_png)
    _write_manifest(
        out_dir / "manifest.json",
        "evaluate",
        inputs={
            "labels": str(args.labels),
            "annotations": str(args.annotations),
            **({"reference": str(args.reference)} if args.reference else {}),
        },
        outputs=outputs,
        extra={
            "seed": args.seed,
            "bootstrap_iterations": args.bootstrap_iterations,
            "min_positive": args.min_positive,
            "positive_policy": args.positive_policy,
            "human_eval": bool(args.human_eval),
        },
    )
    if args.json:
        print(json.dumps(report_to_json_dict(report), indent=2, sort_keys=True))
    else:
        _print_report_summary(report)
        print(f"wrote {', '.join(sorted(outputs))} under {out_dir}")
    return EXIT_OK


def _print_report_summary(report) -> None:
    if not report.rows:
        print("no rows: no cell passed the minimum-positive filter")
        for note in report.notes:
            print(f"note: {note}")
        return
    header = f"{'kind':<10} {'organ':<14} {'group':<16} {'labeler':<12}" \
        f" {'n':>5} {'f1':>7} {'ci':>17} {'p':>8}"
    print(header)
    print("-" * len(header))
    for row in report.rows:
        ci = (
            f"[{row.ci_low:.3f}, {row.ci_high:.3f}]"
            if row.ci_low is not None and row.ci_high is not None
            else ""
        )
        p_text = f"{row.p_value:.4f}" if row.p_value is not None else ""
        print(
            f"{row.kind:<10} {row.organ:<14} {row.finding_group:<16}"
            f" {row.labeler:<12} {row.n if row.n is not None else '':>5}"
            f" {row.scores.get('f1', 0.0):>7.3f} {ci:>17} {p_text:>8}"
        )
    for row in report.urgency_rows:
        ci = (
            f"[{row.ci_low:.3f}, {row.ci_high:.3f}]"
            if row.ci_low is not None and row.ci_high is not None
            else ""
        )
        print(
            f"urgency/{row.kind:<8} {row.organ_group:<14} {'':<16}"
            f" {row.labeler:<12} {row.n if row.n is not None else '':>5}"
            f" {row.tau_b:>7.3f} {ci:>17}"
        )
    for note in report.excluded_cells + report.notes:
        print(f"note: {note}")


def cmd_merge(args: argparse.Namespace) -> int:
    if args.positive_policy not in POSITIVE_POLICIES:
        raise _UsageError(
            f"--positive-policy must be one of {', '.join(POSITIVE_POLICIES)}"
        )
    labels = read_labels(args.labels, strict=not args.lenient)
    report_ids = None
    if args.reports:
        report_ids = [r.id for r in read_reports(args.reports, strict=not args.lenient)]
    merged = merge_supervision_targets(
        labels, args.positive_policy, report_ids=report_ids
    )
    if args.join_organs:
        merged = join_organs(merged)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_supervision(out, merged, with_any_abnormality=args.any_abnormality)
    _write_manifest(
        _manifest_path(out),
        "merge",
        inputs={
            "labels": str(args.labels),
            **({"reports": str(args.reports)} if args.reports else {}),
        },
        outputs={"supervision": str(out)},
        extra={
            "positive_policy": args.positive_policy,
            "join_organs": bool(args.join_organs),
            "any_abnormality": bool(args.any_abnormality),
        },
    )
    print(f"merged {len(labels)} labels into {len(merged)} target records -> {out}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        organ = Organ(args.organ)
    except ValueError:
        valid = ", ".join(o.value for o in Organ)
        raise _UsageError(f"unknown organ {args.organ!r} (valid: {valid})")
    store = TranscriptStore(args.transcripts)
    records = [
        record
        for record in store.records()
        if record.tags.get("report_id") == args.report_id
        and record.tags.get("organ") == organ.value
    ]
    if not records:
        print(
            f"error: no transcripts for cell {args.report_id}/{organ.value}"
            f" in {args.transcripts}",
            file=sys.stderr,
        )
        return EXIT_DATA
    if args.json:
        print(
            json.dumps(
                [record.to_json_dict() for record in records],
                indent=2,
                sort_keys=True,
            )
        )
        return EXIT_OK
    for record in records:
        tags = record.tags
        heading = [record.id, f"stage={tags.get('stage', '?')}"]
        if "finding_type" in tags:
            heading.append(f"type={tags['finding_type']}")
        if "sentence_index" in tags:
            heading.append(f"sentence={tags['sentence_index']}")
        if tags.get("retry"):
            heading.append("retry")
        print(f"== {' '.join(heading)}")
        prompt = record.exchange.messages[-1][1]
        response = record.exchange.response
        if not args.full:
            prompt = _truncate(prompt, 240)
            response = _truncate(response, 400)
        print(f"prompt: {prompt}")
        print(f"response: {response}")
        print()
    return EXIT_OK


def _truncate(text: str, limit: int) -> str:
    flat = " ".join(text.split())
    return flat if len(flat) <= limit else flat[: limit - 3] + "..."


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctlabeler",
        description=(
            "Batch labeling of abdominal CT reports through a chat endpoint,"
            " with merging and evaluation against human annotations."
        ),
    )
    parser.add_argument("--version", action="version", version=f"ctlabeler {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    label = sub.add_parser("label", help="label a report corpus")
    label.add_argument("--reports", required=True, help="input reports JSONL")
    label.add_argument("--out", required=True, help="output labels JSONL")
    label.add_argument("--endpoint", help="chat endpoint base URL")
    label.add_argument("--model", help="model name to request")
    label.add_argument("--scripted", help="scripted-response file instead of HTTP")
    label.add_argument("--config", help="config file with key = value lines")
    label.add_argument("--organs", help="comma-separated organ subset")
    label.add_argument("--ablation", help="comma-separated ablation flags")
    label.add_argument("--parallelism", type=int, help="concurrent cells")
    label.add_argument("--temperature", type=float, help="sampling temperature")
    label.add_argument("--max-tokens", dest="max_tokens", type=int)
    label.add_argument("--retry-limit", dest="retry_limit", type=int)
    label.add_argument("--templates", help="prompt template override directory")
    label.add_argument("--transcripts", help="transcript JSONL path")
    label.add_argument("--checkpoint", help="checkpoint JSON path")
    label.add_argument("--resume", action="store_true", help="resume a checkpoint")
    label.add_argument("--lenient", action="store_true", help="skip malformed input lines")
    label.set_defaults(func=cmd_label)

    evaluate = sub.add_parser("evaluate", help="score labels against annotations")
    evaluate.add_argument("--labels", required=True, help="labels JSONL to score")
    evaluate.add_argument("--annotations", required=True, help="annotation CSV")
    evaluate.add_argument("--out-dir", dest="out_dir", required=True)
    evaluate.add_argument("--reference", help="second labels JSONL to compare against")
    evaluate.add_argument(
        "--labeler-name", dest="labeler_name", default="model", help="name for the main labeler"
    )
    evaluate.add_argument(
        "--reference-name", dest="reference_name", default="reference"
    )
    evaluate.add_argument(
        "--human-eval",
        dest="human_eval",
        action="store_true",
        help="score each annotator against the others' consensus",
    )
    evaluate.add_argument(
        "--min-positive", dest="min_positive", type=int, default=DEFAULT_MIN_POSITIVE
    )
    evaluate.add_argument(
        "--bootstrap-iterations",
        dest="bootstrap_iterations",
        type=int,
        default=DEFAULT_BOOTSTRAP_ITERATIONS,
    )
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument(
        "--positive-policy",
        dest="positive_policy",
        default="positive_or_possible",
        help="which certainty categories count as present",
    )
    evaluate.add_argument("--no-figures", dest="no_figures", action="store_true")
    evaluate.add_argument("--json", action="store_true", help="print JSON to stdout")
    evaluate.add_argument("--lenient", action="store_true")
    evaluate.set_defaults(func=cmd_evaluate)

    merge = sub.add_parser("merge", help="merge labels into supervision targets")
    merge.add_argument("--labels", required=True)
    merge.add_argument("--out", required=True)
    merge.add_argument(
        "--reports", help="reports JSONL fixing the report-id universe"
    )
    merge.add_argument(
        "--positive-policy", dest="positive_policy", default="positive_or_possible"
    )
    merge.add_argument(
        "--any-abnormality",
        dest="any_abnormality",
        action="store_true",
        help="add the single any-abnormality flag to each record",
    )
    merge.add_argument(
        "--join-organs",
        dest="join_organs",
        action="store_true",
        help="merge kidneys and bowels into organ groups",
    )
    merge.add_argument("--lenient", action="store_true")
    merge.set_defaults(func=cmd_merge)

    inspect = sub.add_parser("inspect", help="show the exchanges behind one cell")
    inspect.add_argument("--transcripts", required=True)
    inspect.add_argument("--report-id", dest="report_id", required=True)
    inspect.add_argument("--organ", required=True)
    inspect.add_argument("--json", action="store_true")
    inspect.add_argument("--full", action="store_true", help="no truncation")
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if exc.code is not None else 0
        if code == 0:
            return EXIT_OK
        return EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
        )
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GatewayError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (
        DataFormatError,
        DuplicateReportIdError,
        EmptyReportError,
        CheckpointError,
        UnknownTranscriptIdError,
        DegenerateInputError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CtLabelerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
