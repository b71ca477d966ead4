"""Data model and parsers for questions, stepwise reasoning paths, and answers.

A reasoning path is newline-delimited text: each content line is one step
(optionally already carrying a "Step N:" prefix), inline calculations are
annotated as <<expression=result>>, and a trailing marker line ("answer: 42"
or "#### 42") carries the final answer.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path as FsPath
from typing import Iterable, Iterator

from .rational import render_rational

PATH_CORRECT = "correct"
PATH_WRONG = "wrong"

_CURRENCY = "$€£¥"

_ANSWER_MARKER_RE = re.compile(r"####|\banswer\s*:", re.IGNORECASE)
_ANSWER_LINE_RE = re.compile(
    r"^\s*(?:the\s+|final\s+)*(?:####|answer\s*:)", re.IGNORECASE
)
_STEP_PREFIX_RE = re.compile(r"^step\s+(\d+)\s*:\s?", re.IGNORECASE)
_NUMBER_TOKEN_RE = re.compile(
    r"(?<![\w.])(-?[$€£¥]?(?:\d[\d,]*(?:\.\d+)?|\.\d+))(?!\w)"
)


class PathError(Exception):
    """Base class for path parsing errors."""


class EmptyPath(PathError):
    """Raised when no step lines survive trimming."""


class NotANumber(PathError):
    """Raised when a token contains no parsable number."""


@dataclass(frozen=True)
class MalformedSpan:
    """A rejected <<...>> occurrence: character span plus the reason."""

    span: tuple[int, int]
    reason: str


class MalformedAnnotation(PathError):
    """Raised for a malformed <<...>> occurrence; carries the offending span."""

    def __init__(self, reason: str, span: tuple[int, int]):
        super().__init__(f"{reason} at {span[0]}..{span[1]}")
        self.reason = reason
        self.span = span


@dataclass(frozen=True)
class CalcAnnotation:
    """One <<expression=result>> calculator annotation inside a step."""

    expression: str
    claimed_result: str
    span: tuple[int, int]


@dataclass(frozen=True)
class Step:
    """One reasoning step: 1-based index, sentence text, inline annotations."""

    index: int
    text: str
    annotations: tuple[CalcAnnotation, ...] = ()
    malformed: tuple[MalformedSpan, ...] = ()

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"step index must be >= 1, got {self.index}")
        if not self.text.strip():
            raise ValueError("step text must be non-empty after trimming")


@dataclass(frozen=True)
class ReasoningPath:
    """An ordered stepwise solution with an optional extracted final answer."""

    steps: tuple[Step, ...]
    final_answer: Fraction | None
    raw_text: str
    label: str | None = None
    annotated_first_wrong_step: int | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        indices = [step.index for step in self.steps]
        if indices != list(range(1, len(indices) + 1)):
            raise ValueError(f"step indices must be contiguous 1..K, got {indices}")
        if self.label not in (None, PATH_CORRECT, PATH_WRONG):
            raise ValueError(f"unknown path label {self.label!r}")
        if self.label == PATH_CORRECT and self.annotated_first_wrong_step is not None:
            raise ValueError("correct paths cannot carry a first-wrong-step index")
        if self.annotated_first_wrong_step is not None and not (
            1 <= self.annotated_first_wrong_step <= len(self.steps)
        ):
            raise ValueError("annotated_first_wrong_step out of range")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def serialize(self) -> str:
        """Render the canonical text form: "Step N: ..." lines + answer line."""
        lines = [f"Step {step.index}: {step.text}" for step in self.steps]
        if self.final_answer is not None:
            lines.append(f"answer: {render_rational(self.final_answer)}")
        return "\n".join(lines)

    def relabeled(self, gold: Fraction) -> ReasoningPath:
        """Return a copy labeled correct/wrong against a gold answer."""
        if self.final_answer is not None and answers_equal(self.final_answer, gold):
            label = PATH_CORRECT
        else:
            label = PATH_WRONG
        return replace(self, label=label)


@dataclass(frozen=True)
class Question:
    """One dataset question with its exact gold answer."""

    id: str
    text: str
    gold_answer: Fraction
    gold_solution: str | None = None


def normalize_numeric(token: str) -> Fraction:
    """Parse a decorated numeric token ("$144.00", "1,234") to an exact rational.

    Strips currency symbols, thousands separators, surrounding punctuation, and
    a trailing percent sign; decimal literals parse exactly as ratios over
    powers of ten.
    """
    text = token.strip()
    text = text.lstrip("([{\"'")
    text = text.rstrip(")]}\"'.,;:!?%")
    sign = 1
    while text and (text[0] in _CURRENCY or text[0] in "+-"):
        if text[0] == "-":
            sign = -sign
        text = text[1:]
    text = text.replace(",", "")
    if not re.fullmatch(r"(?:\d+(?:\.\d*)?|\.\d+)", text):
        raise NotANumber(f"no parsable number in {token!r}")
    if text.endswith("."):
        text = text[:-1]
    return sign * Fraction(text)


def _answer_candidates(raw: str) -> list[str]:
    markers = list(_ANSWER_MARKER_RE.finditer(raw))
    if not markers:
        return []
    tail = raw[markers[-1].end() :]
    newline = tail.find("\n")
    segment = tail if newline < 0 else tail[:newline]
    return [m.group(1) for m in _NUMBER_TOKEN_RE.finditer(segment)]


def extract_final_answer(raw: str) -> Fraction | None:
    """Extract the number after the last answer marker ("answer:" or "####").

    Only standalone numeric tokens qualify; the last token on the marker line
    wins. Returns None when no marker or no number is found.
    """
    candidates = _answer_candidates(raw)
    if not candidates:
        return None
    return normalize_numeric(candidates[-1])


def parse_annotations(
    step_text: str, on_malformed: str = "raise"
) -> tuple[list[CalcAnnotation], list[MalformedSpan]]:
    """Extract every <<expression=result>> occurrence in order.

    Malformed occurrences either raise MalformedAnnotation (default) or, with
    on_malformed="collect", are returned alongside the good ones so callers
    can report rather than drop them.
    """
    if on_malformed not in ("raise", "collect"):
        raise ValueError(f"unknown on_malformed mode {on_malformed!r}")
    annotations: list[CalcAnnotation] = []
    malformed: list[MalformedSpan] = []

    def reject(reason: str, span: tuple[int, int]) -> None:
        if on_malformed == "raise":
            raise MalformedAnnotation(reason, span)
        malformed.append(MalformedSpan(span, reason))

    pos = 0
    while True:
        start = step_text.find("<<", pos)
        if start < 0:
            break
        end = step_text.find(">>", start + 2)
        if end < 0:
            reject("unterminated annotation", (start, len(step_text)))
            break
        span = (start, end + 2)
        pos = end + 2
        inner = step_text[start + 2 : end]
        if inner.count("=") != 1:
            reject("annotation must contain exactly one '='", span)
            continue
        expression, claimed = inner.split("=")
        if not expression.strip():
            reject("annotation has an empty expression side", span)
            continue
        try:
            normalize_numeric(claimed)
        except NotANumber:
            reject("annotation result is not a number", span)
            continue
        annotations.append(CalcAnnotation(expression, claimed.strip(), span))
    return annotations, malformed


def answers_equal(a: Fraction, b: Fraction) -> bool:
    """Exact equality of reduced rationals (42 == 42.0 == 84/2)."""
    return a == b


def decompose_path(raw: str) -> ReasoningPath:
    """Split generated text into steps on newlines and extract the answer.

    Blank lines and answer-marker lines are never steps; existing "Step N:"
    prefixes are stripped and steps are renumbered contiguously from 1.
    Raises EmptyPath when no step lines survive.
    """
    if not raw or not raw.strip():
        raise EmptyPath("no content")
    candidates = _answer_candidates(raw)
    final = normalize_numeric(candidates[-1]) if candidates else None
    flags: list[str] = []
    if len(candidates) > 1:
        flags.append("multiple-answer-numbers")

    steps: list[Step] = []
    for line in raw.splitlines():
        text = line.strip()
        if not text or _ANSWER_LINE_RE.match(text):
            continue
        match = _STEP_PREFIX_RE.match(text)
        body = text[match.end() :] if match else text
        if not body.strip():
            continue
        annotations, malformed = parse_annotations(body, on_malformed="collect")
        steps.append(
            Step(
                index=len(steps) + 1,
                text=body,
                annotations=tuple(annotations),
                malformed=tuple(malformed),
            )
        )
    if not steps:
        raise EmptyPath("no step lines survive trimming")
    if any(step.malformed for step in steps):
        flags.append("malformed-annotations")
    return ReasoningPath(
        steps=tuple(steps), final_answer=final, raw_text=raw, flags=tuple(flags)
    )


def question_to_jsonable(question: Question) -> dict:
    record = {
        "id": question.id,
        "question": question.text,
        "gold_answer": render_rational(question.gold_answer),
    }
    if question.gold_solution is not None:
        record["gold_solution"] = question.gold_solution
    return record


def question_from_jsonable(record: dict) -> Question:
    gold = record.get("gold_answer")
    solution = record.get("gold_solution")
    if gold is None:
        if solution is None:
            raise ValueError(f"question {record.get('id')!r} has no gold answer")
        answer = extract_final_answer(solution)
        if answer is None:
            raise ValueError(
                f"question {record.get('id')!r}: gold answer missing and not "
                "extractable from the reference solution"
            )
    else:
        answer = Fraction(str(gold))
    return Question(
        id=str(record["id"]),
        text=record["question"],
        gold_answer=answer,
        gold_solution=solution,
    )


def load_questions(path: str | FsPath) -> list[Question]:
    """Load newline-delimited question records (see README for the schema)."""
    questions = []
    seen: set[str] = set()
    for record in read_jsonl(path):
        question = question_from_jsonable(record)
        if question.id in seen:
            raise ValueError(f"duplicate question id {question.id!r}")
        seen.add(question.id)
        questions.append(question)
    return questions


def read_jsonl(path: str | FsPath) -> Iterator[dict]:
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | FsPath, records: Iterable[dict]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count
