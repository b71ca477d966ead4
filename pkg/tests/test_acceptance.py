"""Acceptance suite: one test per criterion, one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the criterion lines.
"""

import json
import random
import threading
import time
from fractions import Fraction

import pytest

from stepcheck.arith import evaluate, inverse_checks, parse_expression, verify_annotation
from stepcheck.backend import (
    BackendPolicy,
    Fault,
    MockBackend,
    MockRule,
    PolicyBackend,
    RateLimitedError,
    RetriesExhausted,
    SamplingParams,
    SystemClock,
    VirtualClock,
    make_request,
)
from stepcheck.cli import main as cli_main
from stepcheck.evalmetrics import (
    SweepRow,
    ablation_by_error_type,
    eval_check_accuracy,
    eval_correct_rate,
    ratio_sweep,
    render_correct_rate_line,
)
from stepcheck.forge import (
    TASK_CHECK_STEP_COT,
    TrainingDataset,
    balance_dataset,
    emit_training_records,
    generate_correction_data,
)
from stepcheck.paths import CalcAnnotation, parse_annotations
from stepcheck.pipeline import SelfCorrectionPipeline
from stepcheck.protocol import (
    ALL_DIRECT,
    Message,
    STEP_COT,
    STEP_DIRECT,
    build_check_generation_prompt,
    build_check_prompt,
    build_correction_prompt,
    build_reasoning_prompt,
    parse_check_response,
    split_step_sections,
)
from stepcheck.rational import format_decimal

import world
from conftest import fixture_path, fixture_question, load_fixture
from test_arith import _reference_eval, random_expression
from test_cli import chain_outputs
from test_evalmetrics import (
    TestAblation,
    TestCheckAccuracy,
    make_trace,
    sweep_rows,
)
from test_forge import make_pair, synthetic_record
from test_pipeline import check_rules, scripted_world


def report(criterion, description):
    print(f"\nACCEPTANCE {criterion} PASS: {description}")


class TestAcceptance:
    def test_c1_arith_oracle_matches_reference(self):
        rng = random.Random(20240817)
        started = time.monotonic()
        mismatches = 0
        for _ in range(10_000):
            text = random_expression(rng, rng.randint(1, 4))
            if evaluate(parse_expression(text)) != _reference_eval(text.strip()):
                mismatches += 1
        elapsed = time.monotonic() - started
        assert mismatches == 0
        assert elapsed < 10.0, f"took {elapsed:.1f}s"
        report(
            "C1",
            f"10,000 random expressions match the reference evaluator "
            f"(0 mismatches, {elapsed:.2f}s)",
        )

    def test_c2_appendix_annotations_and_inverse_rewrites(self):
        corpus = []
        for name in (
            "golden_check_generation.json",
            "golden_check_all_direct.json",
            "golden_check_step_direct.json",
            "golden_check_step_cot.json",
            "golden_correction.json",
            "golden_correction_generation.json",
            "golden_reasoning.json",
        ):
            fixture = load_fixture(name)
            for field in ("path_raw", "reference_answer", "assistant"):
                for line in fixture.get(field, "").splitlines():
                    annotations, _ = parse_annotations(line, on_malformed="collect")
                    corpus.extend(annotations)
        assert len(corpus) >= 18
        for annotation in corpus:
            assert verify_annotation(annotation).matches_claim, annotation

        detected = 0
        mutations = 0
        for annotation in corpus:
            claimed = annotation.claimed_result
            for position, char in enumerate(claimed):
                if not char.isdigit():
                    continue
                mutated = (
                    claimed[:position] + str((int(char) + 1) % 10) + claimed[position + 1 :]
                )
                verdict = verify_annotation(
                    CalcAnnotation(annotation.expression, mutated, annotation.span)
                )
                mutations += 1
                detected += not verdict.matches_claim
        assert detected == mutations

        add = inverse_checks(CalcAnnotation("8+9", "17", (0, 0)))
        chain = inverse_checks(CalcAnnotation("8+8+9", "25", (0, 0)))
        assert [(c.rewritten_equation, c.holds) for c in add] == [("17-9=8", True)]
        assert [(c.rewritten_equation, c.holds) for c in chain] == [("25-9-8=8", True)]
        report(
            "C2",
            f"{len(corpus)} appendix annotations verified; {mutations}/{mutations} "
            "single-digit mutations detected; inverse rewrites reproduced exactly",
        )

    def test_c3_protocol_golden_fixtures(self):
        reasoning = load_fixture("golden_reasoning.json")
        messages = build_reasoning_prompt(fixture_question(reasoning))
        assert messages == [
            Message("system", reasoning["system"]),
            Message("human", reasoning["human"]),
        ]

        checkgen = load_fixture("golden_check_generation.json")
        messages = build_check_generation_prompt(
            fixture_question(checkgen),
            fixture_path(checkgen),
            checkgen["reference_answer"],
        )
        assert [m.content for m in messages] == [checkgen["system"], checkgen["human"]]

        for fmt, name in (
            (ALL_DIRECT, "golden_check_all_direct.json"),
            (STEP_DIRECT, "golden_check_step_direct.json"),
            (STEP_COT, "golden_check_step_cot.json"),
        ):
            fixture = load_fixture(name)
            messages = build_check_prompt(
                fmt,
                fixture_question(fixture),
                fixture_path(fixture),
                fixture.get("step"),
            )
            assert [m.content for m in messages] == [
                fixture["system"],
                fixture["human"],
            ], name

        correction = load_fixture("golden_correction.json")
        messages = build_correction_prompt(
            fixture_question(correction),
            fixture_path(correction),
            correction["feedback"],
        )
        assert [m.content for m in messages] == [
            correction["system"],
            correction["human"],
        ]

        # hand-labeled verdicts from the appendix replies
        sections = split_step_sections(checkgen["assistant"])
        verdict = parse_check_response(STEP_COT, sections[-1][1], 2)
        assert not verdict.correct
        assert verdict.step_index == 2
        assert verdict.error_type == "expression"
        all_direct = load_fixture("golden_check_all_direct.json")
        assert parse_check_response(ALL_DIRECT, all_direct["assistant"]).correct
        step_direct = load_fixture("golden_check_step_direct.json")
        verdict = parse_check_response(STEP_DIRECT, step_direct["assistant"], 1)
        assert verdict.correct and verdict.step_index == 1
        step_cot = load_fixture("golden_check_step_cot.json")
        verdict = parse_check_response(STEP_COT, step_cot["assistant"], 1)
        assert verdict.correct and verdict.step_index == 1
        report(
            "C3",
            "prompt builders reproduce the six recorded transcripts "
            "byte-for-byte; replies parse to the hand-labeled verdicts",
        )

    def test_c4_early_stop_and_call_accounting(self):
        started = time.monotonic()
        checkgen = load_fixture("golden_check_generation.json")
        correction_gen = load_fixture("golden_correction_generation.json")
        question = fixture_question(checkgen, "maila")

        for fmt in (STEP_DIRECT, STEP_COT):
            backend = MockBackend(
                scripted_world(
                    question,
                    checkgen["path_raw"],  # 3 steps, answers 48 vs gold 42
                    verdicts=[True, False, True],
                    correction_reply=correction_gen["assistant"],
                    fmt=fmt,
                )
            )
            trace = SelfCorrectionPipeline(backend, fmt).run_self_correction(question)
            humans = [
                record.messages[-1]["content"]
                for record in backend.ledger.records("completion")
            ]
            checked = [h for h in humans if "Please determine" in h]
            assert len(checked) == 2, fmt  # stopped exactly at the first wrong step
            assert not any("if Step 3 is correct." in h for h in humans), fmt
            assert trace.model_calls == 1 + 2 + 1
            assert trace.model_calls == 1 + trace.check_report.model_calls + 1
            assert backend.ledger.completion_count() == trace.model_calls

        backend = MockBackend(
            scripted_world(
                question,
                checkgen["path_raw"],
                verdicts=[True, False, True],
                correction_reply=correction_gen["assistant"],
                fmt=ALL_DIRECT,
            )
        )
        trace = SelfCorrectionPipeline(backend, ALL_DIRECT).run_self_correction(question)
        assert trace.check_report.model_calls == 1
        assert trace.model_calls == 3
        assert backend.ledger.completion_count() == 3

        # identity holds across a scripted batch too
        built = world.build_world_in_memory()
        traces = built.run_batch()
        for trace in traces:
            check_calls = (
                trace.check_report.model_calls if trace.check_report else 0
            )
            stage3 = 1 if trace.stage3_raw is not None else 0
            assert trace.model_calls == 1 + check_calls + stage3
        elapsed = time.monotonic() - started
        assert elapsed < 5.0, f"took {elapsed:.1f}s"
        report(
            "C4",
            f"step formats stop at the first wrong verdict, whole-path checks "
            f"use 1 call, and model_calls = 1 + checks + stage3 on every trace "
            f"({elapsed:.2f}s)",
        )

    def test_c5_forge_answer_filtering_and_truncation(self):
        correction_gen = load_fixture("golden_correction_generation.json")
        record = synthetic_record("julie", wrong_at=2)
        from dataclasses import replace

        record = replace(record, pair=make_pair(correction_gen, "julie"))
        accepted = generate_correction_data(
            record, MockBackend([MockRule(replies=[correction_gen["assistant"]])])
        )
        assert accepted.revised_answer == 42 and accepted.accepted

        mutated_reply = correction_gen["assistant"].replace("answer: 42", "answer: 41")
        dropped = generate_correction_data(
            record, MockBackend([MockRule(replies=[mutated_reply])])
        )
        assert dropped.revised_answer == 41 and not dropped.accepted

        rng = random.Random(5150)
        records = []
        for i in range(120):
            total = rng.randint(1, 6)
            records.append(
                synthetic_record(
                    f"w{i}", wrong_at=rng.randint(1, total), total_steps=total
                )
            )
        rows = emit_training_records(
            TrainingDataset(wrong_records=tuple(records)), TASK_CHECK_STEP_COT
        )
        by_question = {}
        for row in rows:
            by_question.setdefault(row["meta"]["question_id"], []).append(row["meta"])
        for metas in by_question.values():
            first_wrong = metas[0]["first_wrong_step"]
            assert all(m["step_index"] <= first_wrong for m in metas)
        report(
            "C5",
            "corrections accepted iff the revised answer matches gold (42 kept, "
            "41 dropped); no emitted wrong-path record passes its first wrong step "
            f"({len(rows)} records scanned)",
        )

    def test_c6_ratio_balancing_and_sweep(self):
        wrong = [synthetic_record(f"w{i}", wrong_at=2) for i in range(40)]
        correct = [synthetic_record(f"c{i}", total_steps=4) for i in range(30)]
        balanced = balance_dataset(wrong, correct, 25, 20)
        assert balanced.report.n_step_wrong == 25
        assert balanced.report.n_step_correct == 25 * 1 + 20 * 4
        assert balanced.report.ratio == Fraction(25, 105)

        published_wrong = [
            synthetic_record(f"w{i}", wrong_at=2) for i in range(3700)
        ]
        published_correct = [
            synthetic_record(f"c{i}", total_steps=7 if i < 181 else 6)
            for i in range(300)
        ]
        balanced = balance_dataset(published_wrong, published_correct, 3700, 300)
        ratio = balanced.report.ratio
        assert balanced.report.n_step_wrong == 3700
        assert balanced.report.n_step_correct == 5681
        assert abs(float(ratio) - 0.651) <= 0.001

        sweep = ratio_sweep(sweep_rows())
        assert format_decimal(sweep.best_ratio, 2) == "0.65"
        best = next(r for r in sweep.rows if r.ratio == sweep.best_ratio)
        assert format_decimal(best.average, 1) == "76.8"
        assert format_decimal(best.correct_rate, 1) == "51.2"
        report(
            "C6",
            "balance ratios match hand computation; the 3700:5681 corpus reports "
            f"{format_decimal(ratio, 3)} and the sweep flags ratio 0.65 "
            "(average 76.8, correct rate 51.2) as best",
        )

    def test_c7_metric_fixtures_reproduce_published_arithmetic(self):
        table1 = TestCorrectRateFixture().traces()
        correct_rate = eval_correct_rate(table1)
        assert render_correct_rate_line(correct_rate) == "45.3 / 51.2 (+5.9)"

        labeled, reports = TestCheckAccuracy().build_fixture()
        accuracy = eval_check_accuracy(labeled, reports)
        assert format_decimal(accuracy.average, 1) == "81.5"
        assert format_decimal(accuracy.step_localization_rate, 1) == "48.0"

        ablation = ablation_by_error_type(TestAblation().build_fixture())
        assert (ablation.rows["goal"].detected, ablation.rows["goal"].corrected) == (131, 31)
        assert (
            ablation.rows["expression"].detected,
            ablation.rows["expression"].corrected,
        ) == (329, 61)
        assert (
            ablation.rows["calculation"].detected,
            ablation.rows["calculation"].corrected,
        ) == (81, 17)
        assert format_decimal(ablation.overall_correction_rate, 1) == "20.1"
        assert format_decimal(ablation.gain("goal"), 2) == "1.74"
        assert format_decimal(ablation.gain("expression"), 2) == "3.11"
        assert format_decimal(ablation.gain("calculation"), 2) == "0.99"
        assert format_decimal(ablation.total_gain, 2) == "5.84"
        report(
            "C7",
            "fixtures reproduce 45.3/51.2/+5.9, average 81.5 with localization "
            "48.0, the per-type ablation columns, and the 20.1% correction rate",
        )

    def test_c8_end_to_end_determinism(self, tmp_path):
        started = time.monotonic()
        first_world, first_files = chain_outputs(tmp_path, "a")
        second_world, second_files = chain_outputs(tmp_path, "b")
        assert [f.name for f in first_files] == [f.name for f in second_files]
        for left, right in zip(first_files, second_files):
            assert left.read_bytes() == right.read_bytes(), left.name
        elapsed = time.monotonic() - started
        assert elapsed < 60.0, f"took {elapsed:.1f}s"
        report(
            "C8",
            f"two full collect->...->eval chains over 50 questions are "
            f"byte-identical across {len(first_files)} output files "
            f"({elapsed:.2f}s total)",
        )

    def test_c9_backend_policy_under_fault_injection(self):
        # retries: 2 scripted 5xx faults then success under max_retries=3
        backend = MockBackend(
            [MockRule(replies=["ok"], faults=[Fault("status", 500)] * 2)]
        )
        clock = VirtualClock()
        policy = BackendPolicy(max_retries=3, backoff_base=1.0, backoff_factor=2.0)
        wrapped = PolicyBackend(backend, policy, clock=clock)
        request = make_request(
            [Message("system", "s"), Message("human", "h")],
            SamplingParams(),
            "subject",
        )
        assert wrapped.complete(request) == ["ok"]
        assert len(backend.ledger.records("fault")) == 2
        assert clock.now() == 1.0 + 2.0  # exponential backoff observed

        # exhaustion: faults strictly exceed max_retries
        backend = MockBackend(
            [MockRule(replies=["ok"], faults=[Fault("rate-limit")] * 3)]
        )
        wrapped = PolicyBackend(
            backend, BackendPolicy(max_retries=2, backoff_base=0.1), clock=VirtualClock()
        )
        with pytest.raises(RetriesExhausted) as err:
            wrapped.complete(request)
        assert isinstance(err.value.last_error, RateLimitedError)

        # same fault count, one more retry allowed: succeeds
        backend = MockBackend(
            [MockRule(replies=["ok"], faults=[Fault("rate-limit")] * 3)]
        )
        wrapped = PolicyBackend(
            backend, BackendPolicy(max_retries=3, backoff_base=0.1), clock=VirtualClock()
        )
        assert wrapped.complete(request) == ["ok"]

        # budget: third request waits for the minute window
        clock = VirtualClock()
        backend = MockBackend([MockRule(replies=["a", "b", "c"])], clock=clock)
        wrapped = PolicyBackend(
            backend, BackendPolicy(requests_per_minute=2), clock=clock
        )
        for _ in range(3):
            wrapped.complete(request)
        assert clock.now() >= 60.0

        # concurrency: observed in-flight never exceeds the cap
        backend = MockBackend(
            [MockRule(replies=["r"], repeat=True)], clock=SystemClock(), latency=0.004
        )
        wrapped = PolicyBackend(backend, BackendPolicy(max_concurrent=4))
        threads = [
            threading.Thread(target=lambda: wrapped.complete(request))
            for _ in range(20)
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert backend.ledger.completion_count() == 20
        assert wrapped.max_inflight_seen <= 4
        report(
            "C9",
            "retry/backoff/budget behavior matches the configured policy; "
            "RetriesExhausted exactly when faults exceed max_retries; observed "
            f"in-flight max {wrapped.max_inflight_seen} <= limit 4",
        )


class TestCorrectRateFixture:
    """1,000 traces encoding the published direct/self-corrected row."""

    def traces(self):
        traces = []
        for i in range(1000):
            stage1_ok = i < 453
            corrected = 453 <= i < 512
            traces.append(
                make_trace(
                    f"q{i}",
                    gold=1,
                    stage1=1 if stage1_ok else 0,
                    final=1 if (stage1_ok or corrected) else 0,
                )
            )
        return traces
