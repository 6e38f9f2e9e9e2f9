from __future__ import annotations

import itertools

import pytest

from ctlabeler.errors import DataFormatError, UnparseableSummaryError
from ctlabeler.prompts import (
    COT_INSTRUCTION,
    LETTER_TO_TYPE,
    PromptStage,
    TEMPLATE_NAMES,
    TemplateSet,
    TYPE_TO_LETTER,
    build_filtration_list_prompt,
    build_filtration_per_sentence_prompt,
    build_per_type_prompt,
    build_summary_prompt,
    build_type_assessment_prompt,
    build_uncertainty_prompt,
    build_urgency_prompt,
    default_templates,
    format_type_choices,
    parse_sentence_list,
    parse_type_choices,
    parse_uncertainty,
    parse_urgency,
    parse_yes_no,
)
from ctlabeler.schema import (
    FindingType,
    Organ,
    Report,
    UncertaintyCategory,
    UrgencyLevel,
)

PREAMBLE = "Consider all of the information provided below before answering."


@pytest.fixture()
def report() -> Report:
    return Report.from_text(
        "r1", "Liver is normal. Spleen is enlarged. No free fluid."
    )


SENTENCES = [(0, "Liver is normal."), (1, "Spleen is enlarged.")]


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def test_default_templates_cover_all_names():
    templates = default_templates()
    for name in TEMPLATE_NAMES:
        assert templates.text(name)
    assert set(templates.hashes()) == set(TEMPLATE_NAMES)


def test_template_hashes_are_stable():
    assert default_templates().hashes() == default_templates().hashes()


def test_template_override_directory(tmp_path):
    override = tmp_path / "templates"
    override.mkdir()
    (override / "filtration_sentence.txt").write_text(
        "{cot}Custom question about the {organ}: \"{sentence}\" yes or no?",
        encoding="utf-8",
    )
    templates = TemplateSet.load(override)
    messages = build_filtration_per_sentence_prompt(
        "Liver is normal.", Organ.LIVER, templates=templates
    )
    assert "Custom question about the liver" in messages[0]["content"]
    # untouched templates fall back to the defaults
    assert templates.text("urgency") == default_templates().text("urgency")


def test_template_override_missing_placeholder_rejected(tmp_path):
    override = tmp_path / "templates"
    override.mkdir()
    (override / "uncertainty.txt").write_text("no placeholders here", encoding="utf-8")
    with pytest.raises(DataFormatError):
        TemplateSet.load(override)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def test_filtration_list_prompt_contents(report):
    content = build_filtration_list_prompt(report, Organ.LIVER)[0]["content"]
    assert PREAMBLE in content
    assert "0. Liver is normal." in content
    assert "1. Spleen is enlarged." in content
    assert "liver" in content
    assert COT_INSTRUCTION not in content  # the list step never reasons aloud
    assert "{" not in content and "}" not in content


def test_filtration_list_uses_display_names(report):
    content = build_filtration_list_prompt(report, Organ.LEFT_KIDNEY)[0]["content"]
    assert "left kidney" in content
    assert "left_kidney" not in content


def test_filtration_list_requires_sentences():
    empty = Report(id="r1", text="", sentences=())
    with pytest.raises(ValueError):
        build_filtration_list_prompt(empty, Organ.LIVER)


def test_per_sentence_prompt_asks_yes_no_for_each_organ():
    for organ in (Organ.SPLEEN, Organ.LIVER):
        content = build_filtration_per_sentence_prompt(
            "Spleen is enlarged.", organ
        )[0]["content"]
        assert '"Spleen is enlarged."' in content
        assert organ.display in content
        assert PREAMBLE in content
        assert COT_INSTRUCTION in content


def test_per_sentence_prompt_escapes_embedded_quotes():
    content = build_filtration_per_sentence_prompt(
        'Noted "starry sky" appearance.', Organ.LIVER
    )[0]["content"]
    assert '\\"starry sky\\"' in content


def test_per_sentence_prompt_without_cot():
    content = build_filtration_per_sentence_prompt(
        "Liver is normal.", Organ.LIVER, cot=False
    )[0]["content"]
    assert COT_INSTRUCTION not in content


def test_type_assessment_prompt_lists_all_eleven_choices():
    content = build_type_assessment_prompt(SENTENCES, Organ.LIVER)[0]["content"]
    for letter, finding_type in LETTER_TO_TYPE.items():
        assert f"{letter}." in content
        assert finding_type.display in content
    assert "Multiple answers are allowed" in content
    assert "mutually exclusive" in content
    assert '"Liver is normal."' in content
    assert '"Spleen is enlarged."' in content


def test_type_assessment_refuses_per_type_flag():
    with pytest.raises(ValueError):
        build_type_assessment_prompt(
            SENTENCES, Organ.LIVER, individual_type_questions=True
        )
    with pytest.raises(ValueError):
        build_type_assessment_prompt([], Organ.LIVER)


def test_per_type_prompt_contains_definition():
    content = build_per_type_prompt(SENTENCES, Organ.SPLEEN, FindingType.ENLARGED)[0][
        "content"
    ]
    assert "Enlarged" in content
    assert "spleen" in content
    assert "yes or no" in content.lower()


def test_uncertainty_prompt_lists_six_single_answer_choices():
    content = build_uncertainty_prompt(SENTENCES, Organ.LIVER, FindingType.FOCAL)[0][
        "content"
    ]
    for letter in "ABCDEF":
        assert f"{letter}." in content
    assert "exactly one choice" in content


def test_urgency_prompt_lists_four_levels():
    content = build_urgency_prompt(SENTENCES, Organ.LIVER, FindingType.FOCAL)[0][
        "content"
    ]
    for letter in "ABCD":
        assert f"{letter}." in content
    assert "immediate treatment" in content
    assert "no action is needed" in content


def test_builders_reject_empty_selections():
    for builder in (build_uncertainty_prompt, build_urgency_prompt):
        with pytest.raises(ValueError):
            builder([], Organ.LIVER, FindingType.FOCAL)
    with pytest.raises(ValueError):
        build_per_type_prompt([], Organ.LIVER, FindingType.FOCAL)


def test_report_text_with_braces_is_inert():
    report = Report.from_text("r1", "Value was {organ} and {cot} in the chart.")
    content = build_filtration_list_prompt(report, Organ.LIVER)[0]["content"]
    assert "{organ} and {cot}" in content


def test_summary_prompt_embeds_previous_answer():
    content = build_summary_prompt("The findings are G and H.", PromptStage.TYPE_ASSESSMENT)[
        0
    ]["content"]
    assert "The findings are G and H." in content
    assert "letters" in content


def test_summary_prompt_strict_appends_reminder():
    normal = build_summary_prompt("x", PromptStage.UNCERTAINTY)[0]["content"]
    strict = build_summary_prompt("x", PromptStage.UNCERTAINTY, strict=True)[0]["content"]
    assert strict.startswith(normal)
    assert len(strict) > len(normal)


def test_summary_prompt_formats_by_stage():
    cases = {
        PromptStage.FILTRATION_LIST: "numbers",
        PromptStage.TYPE_ASSESSMENT: "letters",
        PromptStage.UNCERTAINTY: "letter",
        PromptStage.URGENCY: "letter",
        PromptStage.PER_TYPE: "yes or no",
    }
    for stage, needle in cases.items():
        content = build_summary_prompt("prev", stage)[0]["content"]
        assert needle in content


def test_summary_prompt_rejects_stage_without_format():
    with pytest.raises(ValueError):
        build_summary_prompt("prev", PromptStage.FILTRATION_SENTENCE)


def test_builders_produce_single_user_message(report):
    messages = build_filtration_list_prompt(report, Organ.LIVER)
    assert len(messages) == 1
    assert messages[0]["role"] == "user"


# ---------------------------------------------------------------------------
# Parsers: sentence lists
# ---------------------------------------------------------------------------


def test_parse_sentence_list_plain():
    assert parse_sentence_list("1, 3, 4", 6) == {1, 3, 4}


def test_parse_sentence_list_none_marker():
    assert parse_sentence_list("None of the sentences.", 6) == set()


def test_parse_sentence_list_drops_out_of_range():
    assert parse_sentence_list("Sentences 2 and 9", 5) == {2}


def test_parse_sentence_list_prose_wrapped():
    assert parse_sentence_list("The informative ones are 0 and 2.", 4) == {0, 2}


def test_parse_sentence_list_empty_text_is_empty_selection():
    assert parse_sentence_list("", 4) == set()


def test_parse_sentence_list_gibberish_raises():
    with pytest.raises(UnparseableSummaryError):
        parse_sentence_list("the liver looks fine", 4)


# ---------------------------------------------------------------------------
# Parsers: yes/no
# ---------------------------------------------------------------------------


def test_parse_yes_no_last_occurrence_wins():
    assert parse_yes_no("Yes, it mentions it... but on reflection, no.") is False
    assert parse_yes_no("no doubt the answer is yes") is True
    assert parse_yes_no("YES") is True


def test_parse_yes_no_rejects_other_text():
    with pytest.raises(UnparseableSummaryError):
        parse_yes_no("maybe")


# ---------------------------------------------------------------------------
# Parsers: type choices
# ---------------------------------------------------------------------------


def test_parse_type_choices_letters():
    assert parse_type_choices("G, H") == {FindingType.FOCAL, FindingType.DIFFUSE}


def test_parse_type_choices_names():
    assert parse_type_choices("Normal") == {FindingType.NORMAL}
    assert parse_type_choices("focal and postsurgical changes") == {
        FindingType.FOCAL,
        FindingType.POSTSURGICAL,
    }


def test_parse_type_choices_lowercase_bare_list():
    assert parse_type_choices("g, h") == {FindingType.FOCAL, FindingType.DIFFUSE}


def test_parse_type_choices_article_a_is_not_absent():
    assert parse_type_choices("There is a focal lesion.") == {FindingType.FOCAL}


def test_parse_type_choices_abnormal_is_not_normal():
    with pytest.raises(UnparseableSummaryError):
        parse_type_choices("abnormality present")


def test_parse_type_choices_none_marker():
    assert parse_type_choices("none") == set()


def test_parse_type_choices_gibberish():
    with pytest.raises(UnparseableSummaryError):
        parse_type_choices("qwerty uiop")


def test_parse_format_round_trip_over_all_subsets():
    all_types = list(FindingType)
    for r in range(len(all_types) + 1):
        for subset in itertools.combinations(all_types, r):
            chosen = set(subset)
            assert parse_type_choices(format_type_choices(chosen)) == chosen


def test_format_type_choices_orders_by_letter():
    text = format_type_choices({FindingType.FOCAL, FindingType.DEVICE})
    assert text == "B, G"
    assert format_type_choices(set()) == "none"


# ---------------------------------------------------------------------------
# Parsers: single choice
# ---------------------------------------------------------------------------


def test_parse_uncertainty_letters_and_keywords():
    assert parse_uncertainty("B") is UncertaintyCategory.POSITIVE
    assert parse_uncertainty("C") is UncertaintyCategory.NEGATIVE
    assert parse_uncertainty("stated as positive") is UncertaintyCategory.POSITIVE
    assert (
        parse_uncertainty("described with ambiguous language when comparing")
        is UncertaintyCategory.AMBIGUOUS_COMPARISON
    )
    assert parse_uncertainty("The answer is A.") is UncertaintyCategory.POSSIBLE
    assert parse_uncertainty("not mentioned at all") is UncertaintyCategory.NOT_MENTIONED


def test_parse_uncertainty_first_match_wins():
    assert (
        parse_uncertainty("possible, though some would say positive")
        is UncertaintyCategory.POSSIBLE
    )


def test_parse_uncertainty_gibberish():
    with pytest.raises(UnparseableSummaryError):
        parse_uncertainty("qwerty")


def test_parse_urgency_letters_digits_keywords():
    assert parse_urgency("C") is UrgencyLevel.MEDIUM
    assert parse_urgency("high") is UrgencyLevel.HIGH
    assert parse_urgency("no action is needed") is UrgencyLevel.NORMAL
    assert parse_urgency("2") is UrgencyLevel.MEDIUM
    assert parse_urgency("Level 3: immediate") is UrgencyLevel.HIGH
    assert parse_urgency("it could cause problems in the future") is UrgencyLevel.LOW


def test_parse_urgency_gibberish():
    with pytest.raises(UnparseableSummaryError):
        parse_urgency("elephant")


def test_parsers_never_crash_on_arbitrary_text():
    samples = [
        "",
        " ",
        "\n\n",
        "!@#$%^&*()",
        "答案是",
        "a" * 5000,
        "-1 999999999999999999",
        "yes no yes no",
        "A B C D E F G H I J K",
        "0.5",
    ]
    for text in samples:
        for parser in (
            lambda t: parse_sentence_list(t, 5),
            parse_yes_no,
            parse_type_choices,
            parse_uncertainty,
            parse_urgency,
        ):
            try:
                parser(text)
            except UnparseableSummaryError:
                pass
