"""Error taxonomy, prompt construction, and verdict parsing for checking tasks.

Three checking formats are supported: a whole-path direct check (one call per
path), a per-step direct check, and a per-step check that reasons through goal
appropriateness, expression correctness, and inverse-operation verification
before issuing its verdict. Prompt text lives in template assets so rendered
messages are byte-stable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .paths import Question, ReasoningPath

ALL_DIRECT = "all-direct"
STEP_DIRECT = "step-direct"
STEP_COT = "step-cot"
CHECK_FORMATS = (ALL_DIRECT, STEP_DIRECT, STEP_COT)

GOAL_ERROR = "goal"
EXPRESSION_ERROR = "expression"
CALCULATION_ERROR = "calculation"
ERROR_TYPES = (GOAL_ERROR, EXPRESSION_ERROR, CALCULATION_ERROR)

# keyword families checked in hierarchy order; first hit wins
_ERROR_KEYWORDS = (
    (GOAL_ERROR, ("goal",)),
    (EXPRESSION_ERROR, ("formula", "expression")),
    (CALCULATION_ERROR, ("calculation", "calculate")),
)

_FORMAT_TEMPLATES = {
    ALL_DIRECT: "check_all_direct.txt",
    STEP_DIRECT: "check_step_direct.txt",
    STEP_COT: "check_step_cot.txt",
}


class ProtocolError(Exception):
    """Base class for protocol-level failures."""


class TemplateError(ProtocolError):
    """Raised for missing templates, bad placeholders, or empty inputs."""


class StepIndexOutOfRange(ProtocolError):
    """Raised when a step index disagrees with the format or the path."""


class UnparseableResponse(ProtocolError):
    """Raised when a checker reply matches no known verdict phrasing."""

    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response


class NoErrorToSummarize(ProtocolError):
    """Raised when feedback is requested for an all-correct report."""


@dataclass(frozen=True)
class Message:
    """One role-tagged chat message (role: system, human, or assistant)."""

    role: str
    content: str


@dataclass(frozen=True)
class StepVerdict:
    """The checker's judgment of one step."""

    step_index: int
    correct: bool
    error_type: str | None
    reason_summary: str
    raw_response: str
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.correct and self.error_type is not None:
            raise ValueError("correct verdicts carry no error type")
        if not self.correct and self.error_type is None:
            raise ValueError("incorrect verdicts must carry an error type")
        if not self.correct and not self.reason_summary:
            raise ValueError("incorrect verdicts must carry a reason summary")


@dataclass(frozen=True)
class PathVerdict:
    """A whole-path judgment from the single-call direct check."""

    correct: bool
    first_wrong_step: int | None
    reason_summary: str
    error_type: str | None
    raw_response: str
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class CheckReport:
    """All verdicts for one path plus the derived summary fields."""

    format: str
    verdicts: tuple[StepVerdict, ...]
    path_correct: bool
    first_wrong_step: int | None
    feedback: str | None
    model_calls: int
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        incorrect = [v for v in self.verdicts if not v.correct]
        if self.path_correct != (not incorrect):
            raise ValueError("path_correct must reflect the verdicts")
        expected_first = incorrect[0].step_index if incorrect else None
        if self.first_wrong_step != expected_first:
            raise ValueError("first_wrong_step must index the first incorrect verdict")
        if self.format in (STEP_DIRECT, STEP_COT) and incorrect:
            if self.verdicts[-1] is not incorrect[0] or len(incorrect) > 1:
                raise ValueError("step formats stop at the first incorrect verdict")


def assemble_report(
    fmt: str,
    verdicts: list[StepVerdict],
    model_calls: int,
    flags: tuple[str, ...] = (),
) -> CheckReport:
    """Build a CheckReport, deriving path_correct, first wrong step, feedback."""
    incorrect = [v for v in verdicts if not v.correct]
    path_correct = not incorrect
    first_wrong = incorrect[0].step_index if incorrect else None
    feedback = _feedback_line(fmt, incorrect[0]) if incorrect else None
    return CheckReport(
        format=fmt,
        verdicts=tuple(verdicts),
        path_correct=path_correct,
        first_wrong_step=first_wrong,
        feedback=feedback,
        model_calls=model_calls,
        flags=flags,
    )


# --- templates ----------------------------------------------------------------

_template_cache: dict[str, tuple[str, str]] = {}


def _load_template(name: str) -> tuple[str, str]:
    if name not in _template_cache:
        try:
            text = (
                resources.files("stepcheck").joinpath("templates", name).read_text("utf-8")
            )
        except FileNotFoundError as exc:
            raise TemplateError(f"missing template asset {name!r}") from exc
        match = re.fullmatch(
            r"---SYSTEM---\n(.*)\n---HUMAN---\n(.*?)\n*\Z", text, re.DOTALL
        )
        if not match:
            raise TemplateError(f"template {name!r} is missing its section markers")
        _template_cache[name] = (match.group(1), match.group(2))
    return _template_cache[name]


_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


def render_template(name: str, values: dict[str, str]) -> list[Message]:
    """Substitute each placeholder exactly once; no residuals may remain."""
    system, human = _load_template(name)
    for key, value in values.items():
        token = "{" + key + "}"
        occurrences = system.count(token) + human.count(token)
        if occurrences != 1:
            raise TemplateError(
                f"template {name!r} must contain {token} exactly once, found "
                f"{occurrences}"
            )
        system = system.replace(token, value)
        human = human.replace(token, value)
    residue = _PLACEHOLDER_RE.findall(system) + _PLACEHOLDER_RE.findall(human)
    if residue:
        raise TemplateError(f"template {name!r} has unfilled placeholders {residue}")
    return [Message("system", system), Message("human", human)]


def build_reasoning_prompt(question: Question) -> list[Message]:
    """Prompt the subject model to solve a question step by step."""
    if not question.text.strip():
        raise TemplateError("question text is empty")
    return render_template("reasoning.txt", {"question": question.text})


def build_check_prompt(
    fmt: str,
    question: Question,
    path: ReasoningPath,
    step: int | None = None,
) -> list[Message]:
    """Prompt for one checking call.

    The whole-path format takes no step index; the per-step formats require
    one in 1..K and include the full solution for context.
    """
    if fmt not in CHECK_FORMATS:
        raise ValueError(f"unknown check format {fmt!r}")
    if fmt == ALL_DIRECT:
        if step is not None:
            raise StepIndexOutOfRange("the whole-path format takes no step index")
        return render_template(
            _FORMAT_TEMPLATES[fmt],
            {"question": question.text, "solution": path.serialize()},
        )
    if step is None or not 1 <= step <= path.num_steps:
        raise StepIndexOutOfRange(
            f"step {step!r} not in 1..{path.num_steps} for format {fmt}"
        )
    return render_template(
        _FORMAT_TEMPLATES[fmt],
        {
            "question": question.text,
            "solution": path.serialize(),
            "step": str(step),
        },
    )


def build_check_generation_prompt(
    question: Question,
    path: ReasoningPath,
    reference_answer: str,
    assume_wrong: bool = True,
) -> list[Message]:
    """Prompt the feedback model to audit a whole path step by step.

    Used for dataset generation: the model walks the three checking processes
    for each step, stops at the first wrong one, and prints "Stop check!".
    The reference answer gives it ground truth to lean on.
    """
    name = "checkgen_wrong.txt" if assume_wrong else "checkgen_correct.txt"
    return render_template(
        name,
        {
            "question": question.text,
            "original_answer": path.serialize(),
            "reference_answer": reference_answer,
        },
    )


def build_correction_prompt(
    question: Question, path: ReasoningPath, feedback: str
) -> list[Message]:
    """Prompt a model to revise its answer given the checking feedback."""
    if not feedback.strip():
        raise TemplateError("feedback must be non-empty")
    return render_template(
        "correction.txt",
        {
            "question": question.text,
            "original_answer": path.serialize(),
            "feedback": feedback,
        },
    )


# --- response parsing -----------------------------------------------------------

_LINE_CORRECT_RE = re.compile(
    r"^(?:so\s+)?step\s+(\d+)\s+is\s+(?:all\s+)?correct\s*[.!]?$", re.IGNORECASE
)
_LINE_WRONG_RE = re.compile(
    r"^(?:so\s+)?step\s+(\d+)\s+is\s+(?:wrong|incorrect|not\s+correct)"
    r"(?:\s*,?\s+because\s+(?P<reason>.+?))?\s*[.!]?$",
    re.IGNORECASE,
)
_ANY_WRONG_RE = re.compile(
    r"step\s+(\d+)\s+is\s+(?:wrong|incorrect|not\s+correct)"
    r"(?:\s*,?\s+because\s+(?P<reason>[^.\n]+))?",
    re.IGNORECASE,
)
_ALL_CORRECT_RE = re.compile(r"\ball\s+correct\b", re.IGNORECASE)
_STOP_CHECK_RE = re.compile(r"^stop\s+check\s*!?\s*$", re.IGNORECASE)


def classify_error_type(reason: str) -> tuple[str, bool]:
    """Map a reason summary to an error type via its keywords.

    Returns (error_type, defaulted): when no keyword matches, the type
    defaults to an expression error and the verdict is flagged for audit.
    """
    lowered = reason.lower()
    for error_type, keywords in _ERROR_KEYWORDS:
        if any(keyword in lowered for keyword in keywords):
            return error_type, False
    return EXPRESSION_ERROR, True


def _wrong_verdict_fields(reason: str | None, sentence: str) -> tuple[str, str, tuple[str, ...]]:
    flags: tuple[str, ...] = ()
    if reason:
        summary = reason.strip().rstrip(".")
    else:
        summary = sentence.strip()
        flags = ("no-reason-clause",)
    error_type, defaulted = classify_error_type(summary)
    if defaulted:
        flags = flags + ("error-type-defaulted",)
    return summary, error_type, flags


def parse_check_response(
    fmt: str, response: str, step: int | None = None
) -> StepVerdict | PathVerdict:
    """Extract the verdict from a checker reply.

    Whole-path replies yield a PathVerdict: the first "Step N is wrong"
    occurrence governs, otherwise an "all correct" phrase. Per-step replies
    yield a StepVerdict from the final summary line only; intermediate
    analysis text is never parsed. Raises UnparseableResponse otherwise.
    """
    if fmt not in CHECK_FORMATS:
        raise ValueError(f"unknown check format {fmt!r}")
    if fmt == ALL_DIRECT:
        match = _ANY_WRONG_RE.search(response)
        if match:
            sentence = match.group(0)
            summary, error_type, flags = _wrong_verdict_fields(
                match.group("reason"), sentence
            )
            return PathVerdict(
                correct=False,
                first_wrong_step=int(match.group(1)),
                reason_summary=summary,
                error_type=error_type,
                raw_response=response,
                flags=flags,
            )
        if _ALL_CORRECT_RE.search(response):
            return PathVerdict(
                correct=True,
                first_wrong_step=None,
                reason_summary="",
                error_type=None,
                raw_response=response,
            )
        raise UnparseableResponse("no whole-path verdict found", response)

    for line in reversed(response.splitlines()):
        text = line.strip()
        if not text or _STOP_CHECK_RE.match(text):
            continue
        match = _LINE_CORRECT_RE.match(text)
        if match:
            index = int(match.group(1))
            flags = ()
            if step is not None and index != step:
                flags = ("step-index-mismatch",)
            return StepVerdict(
                step_index=index,
                correct=True,
                error_type=None,
                reason_summary="",
                raw_response=response,
                flags=flags,
            )
        match = _LINE_WRONG_RE.match(text)
        if match:
            index = int(match.group(1))
            summary, error_type, flags = _wrong_verdict_fields(
                match.group("reason"), text
            )
            if step is not None and index != step:
                flags = flags + ("step-index-mismatch",)
            return StepVerdict(
                step_index=index,
                correct=False,
                error_type=error_type,
                reason_summary=summary,
                raw_response=response,
                flags=flags,
            )
        raise UnparseableResponse(
            f"final summary line {text!r} is not a verdict", response
        )
    raise UnparseableResponse("response has no content lines", response)


def _feedback_line(fmt: str, wrong: StepVerdict) -> str:
    if (
        fmt == STEP_COT
        and "no-reason-clause" not in wrong.flags
        and wrong.reason_summary
    ):
        return f"Step {wrong.step_index} is wrong because {wrong.reason_summary}."
    return f"Step {wrong.step_index} is wrong."


def summarize_feedback(report: CheckReport) -> str:
    """One-line feedback naming the first wrong step.

    Direct formats say "Step N is wrong."; the explained format appends the
    checker's reason clause when one was given.
    """
    if report.path_correct:
        raise NoErrorToSummarize("the report judges every step correct")
    wrong = next(v for v in report.verdicts if not v.correct)
    return _feedback_line(report.format, wrong)


def split_step_sections(response: str) -> list[tuple[int, str]]:
    """Split a multi-step checking transcript into per-step sections.

    Sections start at bare "Step N:" header lines; each section keeps its
    header and runs to the next header. Text before the first header is
    ignored.
    """
    header_re = re.compile(r"^step\s+(\d+)\s*:\s*$", re.IGNORECASE)
    sections: list[tuple[int, list[str]]] = []
    for line in response.splitlines():
        match = header_re.match(line.strip())
        if match:
            sections.append((int(match.group(1)), [line.rstrip()]))
        elif sections:
            sections[-1][1].append(line.rstrip())
    return [(index, "\n".join(lines).strip()) for index, lines in sections]


# --- serialization ---------------------------------------------------------------


def verdict_to_jsonable(verdict: StepVerdict) -> dict:
    return {
        "step_index": verdict.step_index,
        "correct": verdict.correct,
        "error_type": verdict.error_type,
        "reason_summary": verdict.reason_summary,
        "raw_response": verdict.raw_response,
        "flags": list(verdict.flags),
    }


def verdict_from_jsonable(record: dict) -> StepVerdict:
    return StepVerdict(
        step_index=record["step_index"],
        correct=record["correct"],
        error_type=record.get("error_type"),
        reason_summary=record.get("reason_summary", ""),
        raw_response=record.get("raw_response", ""),
        flags=tuple(record.get("flags", ())),
    )


def report_to_jsonable(report: CheckReport) -> dict:
    return {
        "format": report.format,
        "verdicts": [verdict_to_jsonable(v) for v in report.verdicts],
        "path_correct": report.path_correct,
        "first_wrong_step": report.first_wrong_step,
        "feedback": report.feedback,
        "model_calls": report.model_calls,
        "flags": list(report.flags),
    }


def report_from_jsonable(record: dict) -> CheckReport:
    return CheckReport(
        format=record["format"],
        verdicts=tuple(verdict_from_jsonable(v) for v in record["verdicts"]),
        path_correct=record["path_correct"],
        first_wrong_step=record.get("first_wrong_step"),
        feedback=record.get("feedback"),
        model_calls=record["model_calls"],
        flags=tuple(record.get("flags", ())),
    )
