"""Three-stage self-correction orchestrator with full call accounting.

Stage 1 reasons directly. Stage 2 checks the produced path (one call for the
whole-path format, one call per step with early stop for the step formats).
Stage 3 runs exactly once, and only when stage 2 found an error. Every trace
satisfies model_calls = 1 + check calls + (1 if stage 3 ran).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from . import arith, protocol
from .backend import (
    Backend,
    BackendError,
    CHECK_PARAMS,
    CORRECTION_PARAMS,
    REASONING_PARAMS,
    ROLE_SUBJECT,
    SamplingParams,
    make_request,
)
from .paths import (
    EmptyPath,
    Question,
    ReasoningPath,
    answers_equal,
    decompose_path,
    read_jsonl,
    write_jsonl,
)
from .protocol import (
    ALL_DIRECT,
    CALCULATION_ERROR,
    CheckReport,
    STEP_COT,
    StepVerdict,
    UnparseableResponse,
    assemble_report,
    build_check_prompt,
    build_correction_prompt,
    build_reasoning_prompt,
    parse_check_response,
    report_from_jsonable,
    report_to_jsonable,
)
from .rational import render_rational

OUTCOME_KEPT = "correct->kept"
OUTCOME_CORRECTED = "wrong->corrected"
OUTCOME_STILL_WRONG = "wrong->still-wrong"
OUTCOME_BROKEN = "correct->broken"
OUTCOME_UNPARSEABLE = "unparseable"
OUTCOMES = (
    OUTCOME_KEPT,
    OUTCOME_CORRECTED,
    OUTCOME_STILL_WRONG,
    OUTCOME_BROKEN,
    OUTCOME_UNPARSEABLE,
)


@dataclass(frozen=True)
class PipelineTrace:
    """Everything one question produced across the three stages."""

    question_id: str
    question_text: str
    gold_answer: Fraction | None
    format: str
    stage1_raw: str
    stage1_answer: Fraction | None
    check_report: CheckReport | None
    stage3_raw: str | None
    stage3_answer: Fraction | None
    final_answer: Fraction | None
    model_calls: int
    outcome_transition: str
    dataset: str | None = None
    flags: tuple[str, ...] = ()

    def to_jsonable(self) -> dict:
        def opt(value: Fraction | None) -> str | None:
            return None if value is None else render_rational(value)

        return {
            "question_id": self.question_id,
            "question": self.question_text,
            "gold_answer": opt(self.gold_answer),
            "format": self.format,
            "stage1_raw": self.stage1_raw,
            "stage1_answer": opt(self.stage1_answer),
            "check_report": None
            if self.check_report is None
            else report_to_jsonable(self.check_report),
            "stage3_raw": self.stage3_raw,
            "stage3_answer": opt(self.stage3_answer),
            "final_answer": opt(self.final_answer),
            "model_calls": self.model_calls,
            "outcome_transition": self.outcome_transition,
            "dataset": self.dataset,
            "flags": list(self.flags),
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "PipelineTrace":
        def opt(value: str | None) -> Fraction | None:
            return None if value is None else Fraction(value)

        return cls(
            question_id=record["question_id"],
            question_text=record.get("question", ""),
            gold_answer=opt(record.get("gold_answer")),
            format=record["format"],
            stage1_raw=record.get("stage1_raw", ""),
            stage1_answer=opt(record.get("stage1_answer")),
            check_report=None
            if record.get("check_report") is None
            else report_from_jsonable(record["check_report"]),
            stage3_raw=record.get("stage3_raw"),
            stage3_answer=opt(record.get("stage3_answer")),
            final_answer=opt(record.get("final_answer")),
            model_calls=record["model_calls"],
            outcome_transition=record["outcome_transition"],
            dataset=record.get("dataset"),
            flags=tuple(record.get("flags", ())),
        )


def load_traces(path: str | Path) -> list[PipelineTrace]:
    return [PipelineTrace.from_jsonable(r) for r in read_jsonl(path)]


def save_traces(path: str | Path, traces: Iterable[PipelineTrace]) -> int:
    return write_jsonl(path, (t.to_jsonable() for t in traces))


class SelfCorrectionPipeline:
    """Drives reason -> check -> correct for one subject model binding."""

    def __init__(
        self,
        backend: Backend,
        fmt: str,
        reasoning_params: SamplingParams = REASONING_PARAMS,
        check_params: SamplingParams = CHECK_PARAMS,
        correction_params: SamplingParams = CORRECTION_PARAMS,
        parse_retries: int = 0,
        prescreen: bool = False,
        dataset: str | None = None,
    ):
        if fmt not in protocol.CHECK_FORMATS:
            raise ValueError(f"unknown check format {fmt!r}")
        self.backend = backend
        self.fmt = fmt
        self.reasoning_params = reasoning_params
        self.check_params = check_params
        self.correction_params = correction_params
        self.parse_retries = parse_retries
        self.prescreen = prescreen
        self.dataset = dataset

    # --- stages -----------------------------------------------------------

    def direct_reason(self, question: Question) -> tuple[str, ReasoningPath | None]:
        """Stage 1: one deterministic completion, decomposed into steps."""
        messages = build_reasoning_prompt(question)
        raw = self.backend.complete(
            make_request(messages, self.reasoning_params, ROLE_SUBJECT)
        )[0]
        try:
            return raw, decompose_path(raw)
        except EmptyPath:
            return raw, None

    def check_path(self, question: Question, path: ReasoningPath) -> CheckReport:
        """Stage 2: gather verdicts, stopping at the first incorrect step."""
        if path.num_steps < 1:
            raise ValueError("cannot check an empty path")
        if self.prescreen:
            report = self._prescreen_report(path)
            if report is not None:
                return report
        if self.fmt == ALL_DIRECT:
            return self._check_all_direct(question, path)
        return self._check_stepwise(question, path)

    def _prescreen_report(self, path: ReasoningPath) -> CheckReport | None:
        failing = arith.first_failing_step(arith.audit_path(path))
        if failing is None:
            return None
        verdict = StepVerdict(
            step_index=failing,
            correct=False,
            error_type=CALCULATION_ERROR,
            reason_summary="the calculation is not correct",
            raw_response="",
        )
        return assemble_report(
            self.fmt, [verdict], model_calls=0, flags=("prescreen-short-circuit",)
        )

    def _complete_check(self, messages: list[protocol.Message]) -> str:
        return self.backend.complete(
            make_request(messages, self.check_params, ROLE_SUBJECT)
        )[0]

    def _check_all_direct(self, question: Question, path: ReasoningPath) -> CheckReport:
        messages = build_check_prompt(ALL_DIRECT, question, path)
        calls = 0
        for attempt in range(self.parse_retries + 1):
            raw = self._complete_check(messages)
            calls += 1
            try:
                verdict = parse_check_response(ALL_DIRECT, raw)
                break
            except UnparseableResponse:
                verdict = None
        if verdict is None:
            return assemble_report(
                ALL_DIRECT, [], calls, flags=("unparseable-check-response",)
            )
        if verdict.correct:
            return assemble_report(ALL_DIRECT, [], calls)
        flags = tuple(verdict.flags)
        if verdict.first_wrong_step > path.num_steps:
            flags = flags + ("verdict-step-out-of-range",)
        step_verdict = StepVerdict(
            step_index=verdict.first_wrong_step,
            correct=False,
            error_type=verdict.error_type,
            reason_summary=verdict.reason_summary,
            raw_response=verdict.raw_response,
            flags=verdict.flags,
        )
        return assemble_report(ALL_DIRECT, [step_verdict], calls, flags=flags)

    def _check_stepwise(self, question: Question, path: ReasoningPath) -> CheckReport:
        verdicts: list[StepVerdict] = []
        calls = 0
        flags: tuple[str, ...] = ()
        for step in range(1, path.num_steps + 1):
            messages = build_check_prompt(self.fmt, question, path, step)
            verdict = None
            for attempt in range(self.parse_retries + 1):
                raw = self._complete_check(messages)
                calls += 1
                try:
                    verdict = parse_check_response(self.fmt, raw, step)
                    break
                except UnparseableResponse:
                    continue
            if verdict is None:
                flags = ("unparseable-check-response",)
                break
            verdicts.append(verdict)
            if not verdict.correct:
                break
        return assemble_report(self.fmt, verdicts, calls, flags=flags)

    def correct_path(
        self, question: Question, path: ReasoningPath, feedback: str
    ) -> tuple[str, ReasoningPath | None]:
        """Stage 3: one revision completion guided by the feedback line."""
        messages = build_correction_prompt(question, path, feedback)
        raw = self.backend.complete(
            make_request(messages, self.correction_params, ROLE_SUBJECT)
        )[0]
        try:
            return raw, decompose_path(raw)
        except EmptyPath:
            return raw, None

    # --- composition ------------------------------------------------------

    def run_self_correction(self, question: Question) -> PipelineTrace:
        flags: list[str] = []
        stage1_raw, stage1_path = self.direct_reason(question)
        calls = 1
        stage1_answer = stage1_path.final_answer if stage1_path else None
        if stage1_path is None:
            flags.append("empty-stage1")
        elif stage1_answer is None:
            flags.append("stage1-answer-missing")

        report: CheckReport | None = None
        stage3_raw: str | None = None
        stage3_answer: Fraction | None = None
        stage3_ran = False
        if stage1_path is not None:
            report = self.check_path(question, stage1_path)
            calls += report.model_calls
            flags.extend(report.flags)
            if not report.path_correct:
                stage3_ran = True
                stage3_raw, stage3_path = self.correct_path(
                    question, stage1_path, report.feedback or ""
                )
                calls += 1
                stage3_answer = stage3_path.final_answer if stage3_path else None
                if stage3_answer is None:
                    flags.append("unparseable-correction")

        if stage3_ran and stage3_answer is not None:
            final = stage3_answer
        else:
            final = stage1_answer

        outcome = self._classify(
            question.gold_answer, stage1_answer, final, stage3_ran, stage3_answer
        )
        return PipelineTrace(
            question_id=question.id,
            question_text=question.text,
            gold_answer=question.gold_answer,
            format=self.fmt,
            stage1_raw=stage1_raw,
            stage1_answer=stage1_answer,
            check_report=report,
            stage3_raw=stage3_raw,
            stage3_answer=stage3_answer,
            final_answer=final,
            model_calls=calls,
            outcome_transition=outcome,
            dataset=self.dataset,
            flags=tuple(flags),
        )

    @staticmethod
    def _classify(
        gold: Fraction | None,
        stage1: Fraction | None,
        final: Fraction | None,
        stage3_ran: bool,
        stage3_answer: Fraction | None,
    ) -> str:
        if stage3_ran and stage3_answer is None:
            return OUTCOME_UNPARSEABLE
        if final is None or gold is None:
            return OUTCOME_UNPARSEABLE
        stage1_ok = stage1 is not None and answers_equal(stage1, gold)
        final_ok = answers_equal(final, gold)
        if stage1_ok and final_ok:
            return OUTCOME_KEPT
        if stage1_ok:
            return OUTCOME_BROKEN
        if final_ok:
            return OUTCOME_CORRECTED
        return OUTCOME_STILL_WRONG

    def run_batch(
        self, questions: Sequence[Question], workers: int = 1
    ) -> list[PipelineTrace]:
        """Run every question; output order always matches input order."""
        if workers <= 1:
            return [self._run_guarded(q) for q in questions]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self._run_guarded, questions))

    def _run_guarded(self, question: Question) -> PipelineTrace:
        try:
            return self.run_self_correction(question)
        except BackendError as exc:
            return PipelineTrace(
                question_id=question.id,
                question_text=question.text,
                gold_answer=question.gold_answer,
                format=self.fmt,
                stage1_raw="",
                stage1_answer=None,
                check_report=None,
                stage3_raw=None,
                stage3_answer=None,
                final_answer=None,
                model_calls=0,
                outcome_transition=OUTCOME_UNPARSEABLE,
                dataset=self.dataset,
                flags=(f"backend-error:{type(exc).__name__}",),
            )
