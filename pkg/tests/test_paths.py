import random
from fractions import Fraction

import pytest

from stepcheck.paths import (
    EmptyPath,
    MalformedAnnotation,
    NotANumber,
    Question,
    answers_equal,
    decompose_path,
    extract_final_answer,
    load_questions,
    normalize_numeric,
    parse_annotations,
    question_from_jsonable,
    write_jsonl,
)
from stepcheck.rational import parse_rational, render_rational

from conftest import fixture_path


class TestDecomposePath:
    def test_three_steps_and_answer(self, checkgen_fx):
        path = decompose_path(checkgen_fx["path_raw"])
        assert path.num_steps == 3
        assert path.final_answer == 48
        assert path.steps[0].text.startswith("Today's number of pages")
        assert [s.index for s in path.steps] == [1, 2, 3]

    def test_answer_only_line_is_empty_path(self):
        with pytest.raises(EmptyPath):
            decompose_path("answer: 7")

    def test_blank_input_is_empty_path(self):
        with pytest.raises(EmptyPath):
            decompose_path("   \n  \n")

    def test_prose_line_becomes_a_step(self, correction_gen_fx):
        # revision replies often open with prose before the step lines
        path = decompose_path(correction_gen_fx["assistant"])
        assert path.num_steps == 4
        assert path.steps[0].text.startswith("The original answer is wrong")
        assert path.steps[1].text.startswith("Today's number of pages")
        assert path.final_answer == 42

    def test_lowercase_step_prefixes_are_stripped(self, correction_gen_fx):
        path = decompose_path(correction_gen_fx["path_raw"])
        assert path.num_steps == 3
        assert path.steps[0].text == "Today's number of pages = 12 x 2= <<12*2=24>>24"

    def test_noncontiguous_prefixes_are_renumbered(self):
        path = decompose_path("Step 3: first\nStep 9: second\nanswer: 1")
        assert [s.index for s in path.steps] == [1, 2]

    def test_gold_solution_format(self):
        path = decompose_path(
            "Natalia sold 48/2 = <<48/2=24>>24 clips in May.\n#### 24"
        )
        assert path.num_steps == 1
        assert path.final_answer == 24

    def test_serialize_decompose_is_fixed_point_on_random_corpus(self):
        rng = random.Random(1234)
        words = ["she", "makes", "total", "per", "hour", "pages", "left", "now"]
        for _ in range(200):
            lines = []
            for _ in range(rng.randint(1, 6)):
                text = " ".join(rng.choices(words, k=rng.randint(2, 6)))
                if rng.random() < 0.5:
                    a, b = rng.randint(1, 99), rng.randint(1, 99)
                    text += f" <<{a}*{b}={a * b}>>{a * b}"
                if rng.random() < 0.5:
                    lines.append(f"Step {rng.randint(1, 30)}: {text}")
                else:
                    lines.append(text)
            if rng.random() < 0.8:
                lines.append(f"answer: {rng.randint(-50, 5000)}")
            raw = "\n".join(lines)
            try:
                once = decompose_path(raw).serialize()
            except EmptyPath:
                continue
            assert decompose_path(once).serialize() == once

    def test_step_indices_always_contiguous(self):
        rng = random.Random(99)
        for _ in range(100):
            lines = [
                f"Step {rng.randint(1, 40)}: x plus y is {rng.randint(1, 9)}"
                for _ in range(rng.randint(1, 8))
            ]
            path = decompose_path("\n".join(lines))
            assert [s.index for s in path.steps] == list(
                range(1, path.num_steps + 1)
            )


class TestExtractFinalAnswer:
    def test_answer_marker(self):
        assert extract_final_answer("some work\nanswer: 42") == 42

    def test_currency_answer(self):
        assert extract_final_answer("Answer: $990") == 990

    def test_no_marker(self):
        assert extract_final_answer("no numeric conclusion here") is None

    def test_marker_without_number(self):
        assert extract_final_answer("answer: none found") is None

    def test_hash_marker(self):
        assert extract_final_answer("work\n#### 42") == 42

    def test_last_marker_wins(self):
        assert extract_final_answer("#### 7\nmore\nanswer: 9") == 9

    def test_embedded_number_is_not_a_candidate(self):
        assert extract_final_answer("answer: the 3rd") is None

    def test_negative_and_fractional(self):
        assert extract_final_answer("answer: -3.5") == Fraction(-7, 2)

    def test_multi_number_line_takes_last_and_flags(self):
        raw = "Step 1: foo bar\nanswer: 40 then 2"
        assert extract_final_answer(raw) == 2
        assert "multiple-answer-numbers" in decompose_path(raw).flags

    def test_gold_suffix_extraction_over_generated_corpus(self):
        rng = random.Random(7)
        for _ in range(300):
            n = rng.randint(-10_000, 10_000)
            body = "\n".join(
                f"line {i} with {rng.randint(0, 99)} things" for i in range(3)
            )
            assert extract_final_answer(f"{body}\n#### {n}") == n


class TestNormalizeNumeric:
    @pytest.mark.parametrize(
        "token, expected",
        [
            ("$144.00", Fraction(144)),
            ("0.2", Fraction(1, 5)),
            (".2", Fraction(1, 5)),
            ("1,234", Fraction(1234)),
            ("-3.5", Fraction(-7, 2)),
            ("42.", Fraction(42)),
            ("(12)", Fraction(12)),
            ("40%", Fraction(40)),
            ("$1,080,000", Fraction(1_080_000)),
        ],
    )
    def test_examples(self, token, expected):
        assert normalize_numeric(token) == expected

    @pytest.mark.parametrize("token", ["", "abc", "$", "--", "3rd4th"])
    def test_rejects_non_numbers(self, token):
        with pytest.raises(NotANumber):
            normalize_numeric(token)

    def test_against_digit_oracle(self):
        rng = random.Random(5)
        for _ in range(500):
            digits = [str(rng.randint(0, 9)) for _ in range(rng.randint(1, 9))]
            plain = str(int("".join(digits)))
            grouped = ""
            for i, ch in enumerate(reversed(plain)):
                if i and i % 3 == 0:
                    grouped = "," + grouped
                grouped = ch + grouped
            assert normalize_numeric(grouped) == int(plain)
            assert normalize_numeric(f"${grouped}") == int(plain)

    def test_render_roundtrip_for_terminating_decimals(self):
        rng = random.Random(11)
        for _ in range(500):
            value = Fraction(
                rng.randint(-10_000, 10_000), rng.choice([1, 2, 4, 5, 8, 10, 20, 100])
            )
            rendered = render_rational(value)
            assert normalize_numeric(rendered) == value
            assert parse_rational(rendered) == value


class TestParseAnnotations:
    def test_single_annotation_with_span(self, correction_fx):
        step1 = decompose_path(correction_fx["path_raw"]).steps[0]
        assert len(step1.annotations) == 1
        annotation = step1.annotations[0]
        assert annotation.expression == "8*18"
        assert annotation.claimed_result == "144.00"
        start, end = annotation.span
        assert step1.text[start:end] == "<<8*18=144.00>>"

    def test_plain_prose_has_no_annotations(self):
        annotations, malformed = parse_annotations("plain prose with no markers")
        assert annotations == [] and malformed == []

    def test_missing_rhs_raises(self):
        with pytest.raises(MalformedAnnotation) as err:
            parse_annotations("<<12*2=>>")
        assert err.value.span == (0, 9)

    def test_unterminated_raises(self):
        with pytest.raises(MalformedAnnotation):
            parse_annotations("so <<12*2=24 and on")

    def test_collect_mode_reports_instead_of_raising(self):
        annotations, malformed = parse_annotations(
            "a <<1+1=2>>2 b <<3*3=>> c", on_malformed="collect"
        )
        assert len(annotations) == 1
        assert len(malformed) == 1
        assert malformed[0].reason.startswith("annotation result is not a number")

    def test_multiple_in_order(self):
        annotations, _ = parse_annotations("<<1+1=2>>2 then <<2*3=6>>6")
        assert [a.expression for a in annotations] == ["1+1", "2*3"]


class TestAnswersEqual:
    def test_wrong_vs_reference(self):
        assert not answers_equal(Fraction(48), Fraction(42))

    def test_same_rational_in_different_clothes(self):
        assert answers_equal(Fraction(1, 5), Fraction(2, 10))
        assert answers_equal(Fraction(42), Fraction(84, 2))

    def test_against_cross_multiplication_oracle(self):
        rng = random.Random(21)
        for _ in range(10_000):
            a = Fraction(rng.randint(-60, 60), rng.randint(1, 40))
            b = Fraction(rng.randint(-60, 60), rng.randint(1, 40))
            oracle = a.numerator * b.denominator == b.numerator * a.denominator
            assert answers_equal(a, b) == oracle


class TestQuestionIngestion:
    def test_gold_answer_from_solution_suffix(self, tmp_path):
        records = [
            {
                "id": "q1",
                "question": "How many?",
                "gold_solution": "She had 3+4 = <<3+4=7>>7\n#### 7",
            }
        ]
        target = tmp_path / "data.jsonl"
        write_jsonl(target, records)
        questions = load_questions(target)
        assert questions[0].gold_answer == 7

    def test_explicit_gold_answer_wins(self):
        question = question_from_jsonable(
            {"id": "q", "question": "x", "gold_answer": "2/3"}
        )
        assert question.gold_answer == Fraction(2, 3)

    def test_duplicate_ids_rejected(self, tmp_path):
        target = tmp_path / "dup.jsonl"
        write_jsonl(
            target,
            [
                {"id": "q", "question": "a", "gold_answer": 1},
                {"id": "q", "question": "b", "gold_answer": 2},
            ],
        )
        with pytest.raises(ValueError, match="duplicate"):
            load_questions(target)

    def test_missing_gold_everywhere_rejected(self):
        with pytest.raises(ValueError, match="gold"):
            question_from_jsonable({"id": "q", "question": "x"})


class TestPathModel:
    def test_correct_label_forbids_wrong_step_index(self, all_direct_fx):
        path = fixture_path(all_direct_fx)
        with pytest.raises(ValueError):
            type(path)(
                steps=path.steps,
                final_answer=path.final_answer,
                raw_text=path.raw_text,
                label="correct",
                annotated_first_wrong_step=1,
            )

    def test_relabel_against_gold(self, all_direct_fx):
        path = fixture_path(all_direct_fx)
        assert path.relabeled(Fraction(10)).label == "correct"
        assert path.relabeled(Fraction(11)).label == "wrong"
