"""Checking-correction dataset construction.

Wrong-path collection samples several completions per question and keeps at
most one whose answer misses gold. Checking data comes from one whole-path
feedback completion per pair, split into per-step transcripts and truncated
at the first wrong step. Correction data is kept only when the revised answer
matches gold. Balancing selects path counts and reports the achieved
step-level wrong:correct ratio.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .backend import (
    Backend,
    BackendError,
    CHECK_PARAMS,
    CORRECTION_PARAMS,
    GENERATION_PARAMS,
    ROLE_CORRECTOR,
    ROLE_FEEDBACK,
    ROLE_GENERATOR,
    SamplingParams,
    make_request,
)
from .paths import (
    EmptyPath,
    PATH_CORRECT,
    PATH_WRONG,
    Question,
    ReasoningPath,
    answers_equal,
    decompose_path,
    question_from_jsonable,
    question_to_jsonable,
    read_jsonl,
    write_jsonl,
)
from .protocol import (
    ALL_DIRECT,
    STEP_COT,
    STEP_DIRECT,
    StepVerdict,
    UnparseableResponse,
    build_check_generation_prompt,
    build_check_prompt,
    build_correction_prompt,
    build_reasoning_prompt,
    parse_check_response,
    split_step_sections,
    verdict_from_jsonable,
    verdict_to_jsonable,
)
from .rational import render_rational

TASK_REASONING = "reasoning"
TASK_CHECK_ALL_DIRECT = "check-all-direct"
TASK_CHECK_STEP_DIRECT = "check-step-direct"
TASK_CHECK_STEP_COT = "check-step-cot"
TASK_CORRECTION = "correction"
TASK_KINDS = (
    TASK_REASONING,
    TASK_CHECK_ALL_DIRECT,
    TASK_CHECK_STEP_DIRECT,
    TASK_CHECK_STEP_COT,
    TASK_CORRECTION,
)

# default path-count targets per checking format (wrong, correct)
DEFAULT_TARGETS = {
    ALL_DIRECT: (1000, 3000),
    STEP_DIRECT: (1000, 3000),
    STEP_COT: (3700, 300),
}


class ForgeError(Exception):
    pass


class InsufficientPool(ForgeError):
    pass


class SubstitutionMismatch(ForgeError):
    pass


class MissingTemplate(ForgeError):
    pass


class QuarantineError(ForgeError):
    """A generation that cannot be used; kept aside for human audit."""

    def __init__(self, reason: str, question_id: str, raw_response: str):
        super().__init__(f"{question_id}: {reason}")
        self.reason = reason
        self.question_id = question_id
        self.raw_response = raw_response


@dataclass(frozen=True)
class QuestionPathPair:
    """One labeled (question, reasoning path) pair."""

    question: Question
    path: ReasoningPath

    @property
    def label(self) -> str | None:
        return self.path.label

    def to_jsonable(self) -> dict:
        return {
            "question": question_to_jsonable(self.question),
            "path_raw": self.path.raw_text,
            "label": self.path.label,
            "first_wrong_step": self.path.annotated_first_wrong_step,
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "QuestionPathPair":
        question = question_from_jsonable(record["question"])
        path = decompose_path(record["path_raw"])
        path = replace(
            path,
            label=record.get("label"),
            annotated_first_wrong_step=record.get("first_wrong_step"),
        )
        return cls(question=question, path=path)


@dataclass(frozen=True)
class StepTranscript:
    """One step's checking transcript plus its parsed verdict."""

    step_index: int
    text: str
    verdict: StepVerdict


@dataclass(frozen=True)
class CheckRecord:
    """Per-step checking transcripts for one pair, cut at the first wrong step."""

    pair: QuestionPathPair
    transcripts: tuple[StepTranscript, ...]
    feedback: str | None
    source_model_role: str

    def __post_init__(self) -> None:
        wrong = [t for t in self.transcripts if not t.verdict.correct]
        if self.pair.label == PATH_WRONG:
            if len(wrong) != 1 or self.transcripts[-1] is not wrong[0]:
                raise ValueError(
                    "wrong-path records end at exactly one incorrect transcript"
                )
        if self.pair.label == PATH_CORRECT and wrong:
            raise ValueError("correct-path records carry no incorrect transcript")

    @property
    def first_wrong_step(self) -> int | None:
        for transcript in self.transcripts:
            if not transcript.verdict.correct:
                return transcript.step_index
        return None

    def to_jsonable(self) -> dict:
        return {
            "pair": self.pair.to_jsonable(),
            "transcripts": [
                {
                    "step_index": t.step_index,
                    "text": t.text,
                    "verdict": verdict_to_jsonable(t.verdict),
                }
                for t in self.transcripts
            ],
            "feedback": self.feedback,
            "source_model_role": self.source_model_role,
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "CheckRecord":
        return cls(
            pair=QuestionPathPair.from_jsonable(record["pair"]),
            transcripts=tuple(
                StepTranscript(
                    step_index=t["step_index"],
                    text=t["text"],
                    verdict=verdict_from_jsonable(t["verdict"]),
                )
                for t in record["transcripts"]
            ),
            feedback=record.get("feedback"),
            source_model_role=record.get("source_model_role", ROLE_FEEDBACK),
        )


@dataclass(frozen=True)
class CorrectionRecord:
    """One revision attempt; accepted only when the new answer matches gold."""

    pair: QuestionPathPair
    feedback: str
    revised_raw: str
    revised_answer: Fraction | None
    accepted: bool

    def to_jsonable(self) -> dict:
        return {
            "pair": self.pair.to_jsonable(),
            "feedback": self.feedback,
            "revised_raw": self.revised_raw,
            "revised_answer": None
            if self.revised_answer is None
            else render_rational(self.revised_answer),
            "accepted": self.accepted,
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "CorrectionRecord":
        answer = record.get("revised_answer")
        return cls(
            pair=QuestionPathPair.from_jsonable(record["pair"]),
            feedback=record["feedback"],
            revised_raw=record["revised_raw"],
            revised_answer=None if answer is None else Fraction(answer),
            accepted=record["accepted"],
        )


@dataclass(frozen=True)
class CollectStats:
    questions_total: int
    questions_yielding: int
    samples_seen: int
    parse_failures: int
    backend_failures: int


@dataclass(frozen=True)
class BalanceReport:
    """Counts and the achieved step-level wrong:correct ratio of a selection."""

    n_path_wrong: int
    n_path_correct: int
    n_step_wrong: int
    n_step_correct: int
    degenerate: bool

    @property
    def ratio(self) -> Fraction:
        if self.n_step_correct == 0:
            return Fraction(0)
        return Fraction(self.n_step_wrong, self.n_step_correct)

    def to_jsonable(self) -> dict:
        return {
            "n_path_wrong": self.n_path_wrong,
            "n_path_correct": self.n_path_correct,
            "n_step_wrong": self.n_step_wrong,
            "n_step_correct": self.n_step_correct,
            "ratio": str(self.ratio),
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class BalancedDataset:
    wrong: tuple[CheckRecord, ...]
    correct: tuple[CheckRecord, ...]
    report: BalanceReport


# --- collection ---------------------------------------------------------------


def collect_paths(
    questions: Sequence[Question],
    backend: Backend,
    samples_per_question: int = 5,
    keep: str = PATH_WRONG,
    params: SamplingParams = GENERATION_PARAMS,
) -> tuple[list[QuestionPathPair], CollectStats]:
    """Sample completions per question; keep at most one pair with the wanted label.

    The first sample (in sample order) with the wanted label wins. Backend
    failures skip the question and are counted, not raised.
    """
    if keep not in (PATH_WRONG, PATH_CORRECT):
        raise ValueError(f"keep must be 'wrong' or 'correct', got {keep!r}")
    pairs: list[QuestionPathPair] = []
    samples_seen = parse_failures = backend_failures = 0
    for question in questions:
        request = make_request(
            build_reasoning_prompt(question),
            params,
            ROLE_GENERATOR,
            n_samples=samples_per_question,
        )
        try:
            completions = backend.complete(request)
        except BackendError:
            backend_failures += 1
            continue
        for raw in completions:
            samples_seen += 1
            try:
                path = decompose_path(raw)
            except EmptyPath:
                parse_failures += 1
                continue
            path = path.relabeled(question.gold_answer)
            if path.label == keep:
                pairs.append(QuestionPathPair(question=question, path=path))
                break
    stats = CollectStats(
        questions_total=len(questions),
        questions_yielding=len(pairs),
        samples_seen=samples_seen,
        parse_failures=parse_failures,
        backend_failures=backend_failures,
    )
    return pairs, stats


def gold_paths(questions: Sequence[Question]) -> list[QuestionPathPair]:
    """Build correct-labeled pairs from the dataset's reference solutions."""
    pairs = []
    for question in questions:
        if not question.gold_solution:
            continue
        path = decompose_path(question.gold_solution)
        pairs.append(
            QuestionPathPair(question=question, path=replace(path, label=PATH_CORRECT))
        )
    return pairs


# --- checking data -------------------------------------------------------------


def generate_check_data(
    pair: QuestionPathPair,
    backend: Backend,
    params: SamplingParams = CHECK_PARAMS,
    source_model_role: str = ROLE_FEEDBACK,
) -> CheckRecord:
    """One whole-path feedback completion, split into per-step transcripts.

    Wrong pairs must come back with correct verdicts up to exactly one wrong
    step; correct pairs must have every step checked and judged correct.
    Anything else raises QuarantineError for human audit.
    """
    if pair.label not in (PATH_WRONG, PATH_CORRECT):
        raise ValueError("pair must be labeled before generating checking data")
    reference = pair.question.gold_solution or ""
    messages = build_check_generation_prompt(
        pair.question,
        pair.path,
        reference_answer=reference,
        assume_wrong=pair.label == PATH_WRONG,
    )
    raw = backend.complete(make_request(messages, params, source_model_role))[0]

    qid = pair.question.id
    sections = split_step_sections(raw)
    if not sections:
        raise QuarantineError("reply has no step sections", qid, raw)
    if [index for index, _ in sections] != list(range(1, len(sections) + 1)):
        raise QuarantineError("step sections are not contiguous from 1", qid, raw)
    if len(sections) > pair.path.num_steps:
        raise QuarantineError("more step sections than path steps", qid, raw)

    transcripts: list[StepTranscript] = []
    for index, text in sections:
        try:
            verdict = parse_check_response(STEP_COT, text, index)
        except UnparseableResponse as exc:
            raise QuarantineError(
                f"step {index} section is unparseable", qid, raw
            ) from exc
        if verdict.step_index != index:
            raise QuarantineError(
                f"step {index} section carries verdict for step "
                f"{verdict.step_index}",
                qid,
                raw,
            )
        transcripts.append(StepTranscript(index, text, verdict))
        if not verdict.correct:
            break

    wrong = [t for t in transcripts if not t.verdict.correct]
    if pair.label == PATH_WRONG:
        if not wrong:
            raise QuarantineError("checker found no error in a wrong path", qid, raw)
        feedback = _feedback_from_transcript(wrong[0])
    else:
        if wrong:
            raise QuarantineError("checker flagged a correct path", qid, raw)
        if len(transcripts) < pair.path.num_steps:
            raise QuarantineError("correct path was not fully checked", qid, raw)
        feedback = None
    return CheckRecord(
        pair=pair,
        transcripts=tuple(transcripts),
        feedback=feedback,
        source_model_role=source_model_role,
    )


def _feedback_from_transcript(transcript: StepTranscript) -> str:
    verdict = transcript.verdict
    if "no-reason-clause" not in verdict.flags and verdict.reason_summary:
        return f"Step {verdict.step_index} is wrong because {verdict.reason_summary}."
    return f"Step {verdict.step_index} is wrong."


@dataclass(frozen=True)
class QuarantinedPair:
    question_id: str
    reason: str
    raw_response: str

    def to_jsonable(self) -> dict:
        return {
            "question_id": self.question_id,
            "reason": self.reason,
            "raw_response": self.raw_response,
        }


def generate_check_dataset(
    pairs: Sequence[QuestionPathPair],
    backend: Backend,
    params: SamplingParams = CHECK_PARAMS,
    source_model_role: str = ROLE_FEEDBACK,
) -> tuple[list[CheckRecord], list[QuarantinedPair]]:
    """Generate checking data for every pair, quarantining unusable replies."""
    records: list[CheckRecord] = []
    quarantined: list[QuarantinedPair] = []
    for pair in pairs:
        try:
            records.append(
                generate_check_data(pair, backend, params, source_model_role)
            )
        except QuarantineError as exc:
            quarantined.append(
                QuarantinedPair(exc.question_id, exc.reason, exc.raw_response)
            )
        except BackendError as exc:
            quarantined.append(
                QuarantinedPair(pair.question.id, f"backend:{type(exc).__name__}", "")
            )
    return records, quarantined


# --- correction data -------------------------------------------------------------


def generate_correction_data(
    record: CheckRecord,
    backend: Backend,
    params: SamplingParams = CORRECTION_PARAMS,
) -> CorrectionRecord:
    """One revision completion; accepted iff the revised answer matches gold."""
    if not record.feedback:
        raise ValueError("check record carries no feedback to correct against")
    messages = build_correction_prompt(
        record.pair.question, record.pair.path, record.feedback
    )
    raw = backend.complete(make_request(messages, params, ROLE_CORRECTOR))[0]
    try:
        revised = decompose_path(raw)
        answer = revised.final_answer
    except EmptyPath:
        answer = None
    accepted = answer is not None and answers_equal(
        answer, record.pair.question.gold_answer
    )
    return CorrectionRecord(
        pair=record.pair,
        feedback=record.feedback,
        revised_raw=raw,
        revised_answer=answer,
        accepted=accepted,
    )


def generate_correction_dataset(
    records: Sequence[CheckRecord],
    backend: Backend,
    params: SamplingParams = CORRECTION_PARAMS,
) -> tuple[list[CorrectionRecord], list[CorrectionRecord]]:
    """Corrections for every wrong-path record: (accepted, rejected)."""
    accepted: list[CorrectionRecord] = []
    rejected: list[CorrectionRecord] = []
    for record in records:
        if not record.feedback:
            continue
        correction = generate_correction_data(record, backend, params)
        (accepted if correction.accepted else rejected).append(correction)
    return accepted, rejected


# --- balancing -------------------------------------------------------------------


def _step_counts(records: Iterable[CheckRecord]) -> tuple[int, int]:
    wrong = correct = 0
    for record in records:
        for transcript in record.transcripts:
            if transcript.verdict.correct:
                correct += 1
            else:
                wrong += 1
    return wrong, correct


def balance_dataset(
    wrong_records: Sequence[CheckRecord],
    correct_records: Sequence[CheckRecord],
    target_wrong: int,
    target_correct: int,
    seed: int | None = None,
) -> BalancedDataset:
    """Select the requested wrong:correct path counts and report step ratios.

    Selection is by input order, or a seeded sample when a seed is given;
    either way the result is deterministic.
    """
    if target_wrong > len(wrong_records):
        raise InsufficientPool(
            f"need {target_wrong} wrong paths, pool has {len(wrong_records)}"
        )
    if target_correct > len(correct_records):
        raise InsufficientPool(
            f"need {target_correct} correct paths, pool has {len(correct_records)}"
        )
    if seed is None:
        wrong = list(wrong_records[:target_wrong])
        correct = list(correct_records[:target_correct])
    else:
        rng = random.Random(seed)
        wrong = rng.sample(list(wrong_records), target_wrong)
        correct = rng.sample(list(correct_records), target_correct)
    step_wrong_w, step_correct_w = _step_counts(wrong)
    step_wrong_c, step_correct_c = _step_counts(correct)
    step_wrong = step_wrong_w + step_wrong_c
    step_correct = step_correct_w + step_correct_c
    report = BalanceReport(
        n_path_wrong=len(wrong),
        n_path_correct=len(correct),
        n_step_wrong=step_wrong,
        n_step_correct=step_correct,
        degenerate=len(wrong) == 0 or len(correct) == 0 or step_correct == 0,
    )
    return BalancedDataset(tuple(wrong), tuple(correct), report)


# --- emission --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingDataset:
    """Everything emission draws on: questions plus generated records."""

    questions: tuple[Question, ...] = ()
    wrong_records: tuple[CheckRecord, ...] = ()
    correct_records: tuple[CheckRecord, ...] = ()
    corrections: tuple[CorrectionRecord, ...] = ()

    def check_records(self) -> tuple[CheckRecord, ...]:
        return self.wrong_records + self.correct_records


def _single_turn(system: str, human: str, assistant: str, meta: dict) -> dict:
    return {"system": system, "human": human, "assistant": assistant, "meta": meta}


def _meta(question: Question, task: str, label: str | None, first_wrong) -> dict:
    return {
        "question_id": question.id,
        "task": task,
        "label": label,
        "first_wrong_step": first_wrong,
    }


def _reasoning_record(question: Question) -> dict:
    if not question.gold_solution:
        raise MissingTemplate(
            f"question {question.id!r} has no reference solution to train on"
        )
    system, human = (m.content for m in build_reasoning_prompt(question))
    assistant = decompose_path(question.gold_solution).serialize()
    return _single_turn(
        system, human, assistant, _meta(question, TASK_REASONING, PATH_CORRECT, None)
    )


def _all_direct_record(record: CheckRecord) -> dict:
    pair = record.pair
    system, human = (
        m.content for m in build_check_prompt(ALL_DIRECT, pair.question, pair.path)
    )
    first_wrong = record.first_wrong_step
    if first_wrong is None:
        assistant = "The answer is all correct."
    else:
        assistant = f"Step {first_wrong} is wrong."
    return _single_turn(
        system,
        human,
        assistant,
        _meta(pair.question, TASK_CHECK_ALL_DIRECT, pair.label, first_wrong),
    )


def _step_turns(record: CheckRecord, task: str) -> list[tuple[str, str, str, int]]:
    """(system, human, assistant, step) per transcript for a step task."""
    fmt = STEP_DIRECT if task == TASK_CHECK_STEP_DIRECT else STEP_COT
    pair = record.pair
    turns = []
    for transcript in record.transcripts:
        system, human = (
            m.content
            for m in build_check_prompt(
                fmt, pair.question, pair.path, transcript.step_index
            )
        )
        if task == TASK_CHECK_STEP_DIRECT:
            if transcript.verdict.correct:
                assistant = f"Step {transcript.step_index} is all correct."
            else:
                assistant = f"Step {transcript.step_index} is wrong."
        else:
            assistant = transcript.text
        turns.append((system, human, assistant, transcript.step_index))
    return turns


def _correction_record(correction: CorrectionRecord) -> dict:
    pair = correction.pair
    system, human = (
        m.content
        for m in build_correction_prompt(pair.question, pair.path, correction.feedback)
    )
    return _single_turn(
        system,
        human,
        correction.revised_raw,
        _meta(
            pair.question,
            TASK_CORRECTION,
            pair.label,
            _correction_first_wrong(correction),
        ),
    )


def _correction_first_wrong(correction: CorrectionRecord) -> int | None:
    path = correction.pair.path
    if path.annotated_first_wrong_step is not None:
        return path.annotated_first_wrong_step
    # the feedback line names the step the checker stopped at
    match = re.search(r"step\s+(\d+)", correction.feedback, re.IGNORECASE)
    return int(match.group(1)) if match else None


def emit_training_records(
    dataset: TrainingDataset,
    task_kind: str,
    substitution_plan: dict[str, str] | Iterable[str] | None = None,
) -> list[dict]:
    """Render conversation records for one training task.

    Without a plan, every applicable record is emitted (per-step tasks yield
    one record per checked step). With a plan, exactly one record per dataset
    question is emitted: planned questions get their checking-correction
    record (per-step checks pack into one multi-turn record), the rest get
    plain reasoning records, so the total record count is preserved.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    if substitution_plan is None:
        return _emit_pure(dataset, task_kind)
    if not isinstance(substitution_plan, dict):
        substitution_plan = {qid: task_kind for qid in substitution_plan}
    return _emit_substituted(dataset, substitution_plan)


def _emit_pure(dataset: TrainingDataset, task_kind: str) -> list[dict]:
    records: list[dict] = []
    if task_kind == TASK_REASONING:
        for question in dataset.questions:
            records.append(_reasoning_record(question))
    elif task_kind == TASK_CHECK_ALL_DIRECT:
        for record in dataset.check_records():
            records.append(_all_direct_record(record))
    elif task_kind in (TASK_CHECK_STEP_DIRECT, TASK_CHECK_STEP_COT):
        for record in dataset.check_records():
            for system, human, assistant, step in _step_turns(record, task_kind):
                meta = _meta(
                    record.pair.question,
                    task_kind,
                    record.pair.label,
                    record.first_wrong_step,
                )
                meta["step_index"] = step
                records.append(_single_turn(system, human, assistant, meta))
    else:
        for correction in dataset.corrections:
            if correction.accepted:
                records.append(_correction_record(correction))
    return records


def _emit_substituted(dataset: TrainingDataset, plan: dict[str, str]) -> list[dict]:
    by_question_checks = {}
    for record in dataset.check_records():
        by_question_checks.setdefault(record.pair.question.id, record)
    by_question_corrections = {}
    for correction in dataset.corrections:
        if correction.accepted:
            by_question_corrections.setdefault(correction.pair.question.id, correction)

    known = {q.id for q in dataset.questions}
    missing_plan = set(plan) - known
    if missing_plan:
        raise SubstitutionMismatch(
            f"plan names unknown question ids: {sorted(missing_plan)[:5]}"
        )

    records: list[dict] = []
    for question in dataset.questions:
        task = plan.get(question.id)
        if task is None or task == TASK_REASONING:
            records.append(_reasoning_record(question))
            continue
        if task not in TASK_KINDS:
            raise ValueError(f"unknown task kind {task!r} in plan")
        if task == TASK_CORRECTION:
            correction = by_question_corrections.get(question.id)
            if correction is None:
                raise SubstitutionMismatch(
                    f"no accepted correction record for question {question.id!r}"
                )
            records.append(_correction_record(correction))
            continue
        record = by_question_checks.get(question.id)
        if record is None:
            raise SubstitutionMismatch(
                f"no check record for question {question.id!r}"
            )
        if task == TASK_CHECK_ALL_DIRECT:
            records.append(_all_direct_record(record))
        else:
            turns = _step_turns(record, task)
            meta = _meta(question, task, record.pair.label, record.first_wrong_step)
            records.append(
                {
                    "system": turns[0][0],
                    "turns": [
                        {"human": human, "assistant": assistant}
                        for _, human, assistant, _ in turns
                    ],
                    "meta": meta,
                }
            )
    return records


def audit_sample(
    records: Sequence[CheckRecord], n: int = 50, seed: int = 0
) -> list[dict]:
    """Export a random sample of checking records for human quality review."""
    rng = random.Random(seed)
    count = min(n, len(records))
    sample = rng.sample(list(records), count)
    return [record.to_jsonable() for record in sample]


# --- file IO ---------------------------------------------------------------------


def load_pairs(path: str | Path) -> list[QuestionPathPair]:
    return [QuestionPathPair.from_jsonable(r) for r in read_jsonl(path)]


def save_pairs(path: str | Path, pairs: Iterable[QuestionPathPair]) -> int:
    return write_jsonl(path, (p.to_jsonable() for p in pairs))


def load_check_records(path: str | Path) -> list[CheckRecord]:
    return [CheckRecord.from_jsonable(r) for r in read_jsonl(path)]


def save_check_records(path: str | Path, records: Iterable[CheckRecord]) -> int:
    return write_jsonl(path, (r.to_jsonable() for r in records))


def load_corrections(path: str | Path) -> list[CorrectionRecord]:
    return [CorrectionRecord.from_jsonable(r) for r in read_jsonl(path)]


def save_corrections(path: str | Path, records: Iterable[CorrectionRecord]) -> int:
    return write_jsonl(path, (r.to_jsonable() for r in records))
