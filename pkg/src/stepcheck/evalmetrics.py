"""Metrics over pipeline traces and labeled check sets, plus report rendering.

All rates are computed in exact rational arithmetic and rounded exactly once,
at render time (one decimal for accuracies, two for performance gains).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .forge import QuestionPathPair
from .paths import PATH_CORRECT, PATH_WRONG, answers_equal
from .pipeline import (
    OUTCOME_BROKEN,
    OUTCOME_CORRECTED,
    PipelineTrace,
)
from .protocol import (
    CALCULATION_ERROR,
    CheckReport,
    ERROR_TYPES,
    EXPRESSION_ERROR,
    GOAL_ERROR,
)
from .rational import format_decimal

# table row labels for the three error classes
ERROR_TYPE_LABELS = {
    GOAL_ERROR: "Goal",
    EXPRESSION_ERROR: "Formula",
    CALCULATION_ERROR: "Calculate",
}


class EvalError(Exception):
    pass


class MissingGold(EvalError):
    pass


class ReportMissing(EvalError):
    pass


class LengthMismatch(EvalError):
    pass


def _percent(hits: int, total: int) -> Fraction:
    if total == 0:
        return Fraction(0)
    return Fraction(100 * hits, total)


@dataclass(frozen=True)
class CorrectRateReport:
    """Direct vs self-corrected correct rate over one trace set."""

    n: int
    direct_correct: int
    final_correct: int
    wrong_to_correct: int
    correct_to_wrong: int

    @property
    def direct_rate(self) -> Fraction:
        return _percent(self.direct_correct, self.n)

    @property
    def self_corrected_rate(self) -> Fraction:
        return _percent(self.final_correct, self.n)

    @property
    def delta(self) -> Fraction:
        return self.self_corrected_rate - self.direct_rate

    def to_jsonable(self) -> dict:
        return {
            "n": self.n,
            "direct_correct": self.direct_correct,
            "final_correct": self.final_correct,
            "wrong_to_correct": self.wrong_to_correct,
            "correct_to_wrong": self.correct_to_wrong,
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "CorrectRateReport":
        return cls(
            n=record["n"],
            direct_correct=record["direct_correct"],
            final_correct=record["final_correct"],
            wrong_to_correct=record["wrong_to_correct"],
            correct_to_wrong=record["correct_to_wrong"],
        )


def eval_correct_rate(traces: Sequence[PipelineTrace]) -> CorrectRateReport:
    """Score stage-1 and final answers against gold; unparseable counts wrong."""
    direct = final = w2c = c2w = 0
    for trace in traces:
        if trace.gold_answer is None:
            raise MissingGold(f"trace {trace.question_id!r} has no gold answer")
        direct_ok = trace.stage1_answer is not None and answers_equal(
            trace.stage1_answer, trace.gold_answer
        )
        final_ok = trace.final_answer is not None and answers_equal(
            trace.final_answer, trace.gold_answer
        )
        direct += direct_ok
        final += final_ok
        w2c += (not direct_ok) and final_ok
        c2w += direct_ok and not final_ok
    return CorrectRateReport(
        n=len(traces),
        direct_correct=direct,
        final_correct=final,
        wrong_to_correct=w2c,
        correct_to_wrong=c2w,
    )


@dataclass(frozen=True)
class CheckAccuracyReport:
    """Path-level check accuracy on a labeled 50/50-style set, plus localization."""

    n_correct_paths: int
    n_wrong_paths: int
    correct_paths_hit: int
    wrong_paths_hit: int
    localization_hits: int

    @property
    def acc_correct_paths(self) -> Fraction:
        return _percent(self.correct_paths_hit, self.n_correct_paths)

    @property
    def acc_wrong_paths(self) -> Fraction:
        return _percent(self.wrong_paths_hit, self.n_wrong_paths)

    @property
    def average(self) -> Fraction:
        return (self.acc_correct_paths + self.acc_wrong_paths) / 2

    @property
    def pooled(self) -> Fraction:
        return _percent(
            self.correct_paths_hit + self.wrong_paths_hit,
            self.n_correct_paths + self.n_wrong_paths,
        )

    @property
    def step_localization_rate(self) -> Fraction:
        return _percent(self.localization_hits, self.n_wrong_paths)

    def to_jsonable(self) -> dict:
        return {
            "n_correct_paths": self.n_correct_paths,
            "n_wrong_paths": self.n_wrong_paths,
            "correct_paths_hit": self.correct_paths_hit,
            "wrong_paths_hit": self.wrong_paths_hit,
            "localization_hits": self.localization_hits,
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "CheckAccuracyReport":
        return cls(
            n_correct_paths=record["n_correct_paths"],
            n_wrong_paths=record["n_wrong_paths"],
            correct_paths_hit=record["correct_paths_hit"],
            wrong_paths_hit=record["wrong_paths_hit"],
            localization_hits=record["localization_hits"],
        )


def eval_check_accuracy(
    labeled: Sequence[QuestionPathPair],
    reports: Mapping[str, CheckReport],
) -> CheckAccuracyReport:
    """A path is judged wrong iff any step verdict is wrong.

    Localization counts wrong paths whose predicted first wrong step equals
    the annotated one.
    """
    n_correct = n_wrong = hit_correct = hit_wrong = localized = 0
    for pair in labeled:
        report = reports.get(pair.question.id)
        if report is None:
            raise ReportMissing(f"no check report for question {pair.question.id!r}")
        judged_wrong = not report.path_correct
        if pair.label == PATH_CORRECT:
            n_correct += 1
            hit_correct += not judged_wrong
        elif pair.label == PATH_WRONG:
            n_wrong += 1
            hit_wrong += judged_wrong
            annotated = pair.path.annotated_first_wrong_step
            if annotated is None:
                raise EvalError(
                    f"wrong-labeled pair {pair.question.id!r} lacks an annotated "
                    "first wrong step"
                )
            if judged_wrong and report.first_wrong_step == annotated:
                localized += 1
        else:
            raise EvalError(f"pair {pair.question.id!r} is unlabeled")
    return CheckAccuracyReport(
        n_correct_paths=n_correct,
        n_wrong_paths=n_wrong,
        correct_paths_hit=hit_correct,
        wrong_paths_hit=hit_wrong,
        localization_hits=localized,
    )


@dataclass(frozen=True)
class AblationRow:
    detected: int
    corrected: int
    broken: int

    @property
    def correction_rate(self) -> Fraction:
        return _percent(self.corrected, self.detected) if self.detected else Fraction(0)


@dataclass(frozen=True)
class AblationReport:
    """Detected/corrected counts per error type, with normalized gains."""

    rows: dict[str, AblationRow]
    test_set_size: int

    @property
    def total(self) -> AblationRow:
        return AblationRow(
            detected=sum(r.detected for r in self.rows.values()),
            corrected=sum(r.corrected for r in self.rows.values()),
            broken=sum(r.broken for r in self.rows.values()),
        )

    def gain(self, error_type: str) -> Fraction:
        row = self.rows[error_type]
        return _percent(row.corrected - row.broken, self.test_set_size)

    @property
    def total_gain(self) -> Fraction:
        total = self.total
        return _percent(total.corrected - total.broken, self.test_set_size)

    @property
    def overall_correction_rate(self) -> Fraction:
        return self.total.correction_rate

    def to_jsonable(self) -> dict:
        return {
            "rows": {
                key: {
                    "detected": row.detected,
                    "corrected": row.corrected,
                    "broken": row.broken,
                }
                for key, row in self.rows.items()
            },
            "test_set_size": self.test_set_size,
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "AblationReport":
        return cls(
            rows={
                key: AblationRow(
                    detected=row["detected"],
                    corrected=row["corrected"],
                    broken=row["broken"],
                )
                for key, row in record["rows"].items()
            },
            test_set_size=record["test_set_size"],
        )


def ablation_by_error_type(traces: Sequence[PipelineTrace]) -> AblationReport:
    """Count detections and corrections per error type of the flagged verdict.

    Detected counts true positives only: stage-1-wrong traces the checker
    flagged. Broken counts false positives that stage 3 turned wrong. Gains
    normalize by the trace-set size.
    """
    rows = {error_type: [0, 0, 0] for error_type in ERROR_TYPES}
    for trace in traces:
        report = trace.check_report
        if report is None or report.path_correct:
            continue
        wrong_verdict = next(v for v in report.verdicts if not v.correct)
        error_type = wrong_verdict.error_type or EXPRESSION_ERROR
        stage1_wrong = (
            trace.gold_answer is None
            or trace.stage1_answer is None
            or not answers_equal(trace.stage1_answer, trace.gold_answer)
        )
        if stage1_wrong:
            rows[error_type][0] += 1
            if trace.outcome_transition == OUTCOME_CORRECTED:
                rows[error_type][1] += 1
        elif trace.outcome_transition == OUTCOME_BROKEN:
            rows[error_type][2] += 1
    return AblationReport(
        rows={
            key: AblationRow(detected=d, corrected=c, broken=b)
            for key, (d, c, b) in rows.items()
        },
        test_set_size=len(traces),
    )


@dataclass(frozen=True)
class SweepRow:
    """One data-ratio configuration and its measured outcomes."""

    path_wrong: int
    path_correct: int
    step_wrong: int
    step_correct: int
    acc_correct: Fraction
    acc_wrong: Fraction
    average: Fraction
    correct_rate: Fraction

    @property
    def ratio(self) -> Fraction:
        if self.step_correct == 0:
            return Fraction(0)
        return Fraction(self.step_wrong, self.step_correct)

    def to_jsonable(self) -> dict:
        return {
            "path_wrong": self.path_wrong,
            "path_correct": self.path_correct,
            "step_wrong": self.step_wrong,
            "step_correct": self.step_correct,
            "acc_correct": str(self.acc_correct),
            "acc_wrong": str(self.acc_wrong),
            "average": str(self.average),
            "correct_rate": str(self.correct_rate),
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "SweepRow":
        return cls(
            path_wrong=record["path_wrong"],
            path_correct=record["path_correct"],
            step_wrong=record["step_wrong"],
            step_correct=record["step_correct"],
            acc_correct=Fraction(record["acc_correct"]),
            acc_wrong=Fraction(record["acc_wrong"]),
            average=Fraction(record["average"]),
            correct_rate=Fraction(record["correct_rate"]),
        )


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]
    best_ratio: Fraction

    def to_jsonable(self) -> dict:
        return {
            "rows": [row.to_jsonable() for row in self.rows],
            "best_ratio": str(self.best_ratio),
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "SweepReport":
        return cls(
            rows=tuple(SweepRow.from_jsonable(r) for r in record["rows"]),
            best_ratio=Fraction(record["best_ratio"]),
        )


def ratio_sweep(rows: Sequence[SweepRow]) -> SweepReport:
    """Flag the configuration with the best average check accuracy.

    Ties break toward the smallest ratio, so the flagged configuration does
    not depend on row order.
    """
    if not rows:
        raise LengthMismatch("sweep needs at least one row")
    best = max(rows, key=lambda row: (row.average, -row.ratio))
    return SweepReport(rows=tuple(rows), best_ratio=best.ratio)


def sweep_rows_from_reports(balance_reports, accuracy_rows) -> list[SweepRow]:
    """Pair balance reports with measured accuracies into sweep rows."""
    if len(balance_reports) != len(accuracy_rows):
        raise LengthMismatch(
            f"{len(balance_reports)} balance reports vs {len(accuracy_rows)} results"
        )
    rows = []
    for balance, result in zip(balance_reports, accuracy_rows):
        rows.append(
            SweepRow(
                path_wrong=balance.n_path_wrong,
                path_correct=balance.n_path_correct,
                step_wrong=balance.n_step_wrong,
                step_correct=balance.n_step_correct,
                acc_correct=Fraction(str(result["acc_correct"])),
                acc_wrong=Fraction(str(result["acc_wrong"])),
                average=Fraction(str(result["average"])),
                correct_rate=Fraction(str(result["correct_rate"])),
            )
        )
    return rows


@dataclass(frozen=True)
class EvalReport:
    """Umbrella report; any section may be absent."""

    correct_rate: CorrectRateReport | None = None
    check_accuracy: CheckAccuracyReport | None = None
    ablation: AblationReport | None = None
    sweep: SweepReport | None = None
    calls_per_question: Fraction | None = None
    per_dataset: dict[str, CorrectRateReport] = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "correct_rate": None
            if self.correct_rate is None
            else self.correct_rate.to_jsonable(),
            "check_accuracy": None
            if self.check_accuracy is None
            else self.check_accuracy.to_jsonable(),
            "ablation": None if self.ablation is None else self.ablation.to_jsonable(),
            "sweep": None if self.sweep is None else self.sweep.to_jsonable(),
            "calls_per_question": None
            if self.calls_per_question is None
            else str(self.calls_per_question),
            "per_dataset": {
                key: report.to_jsonable() for key, report in self.per_dataset.items()
            },
        }

    @classmethod
    def from_jsonable(cls, record: dict) -> "EvalReport":
        return cls(
            correct_rate=None
            if record.get("correct_rate") is None
            else CorrectRateReport.from_jsonable(record["correct_rate"]),
            check_accuracy=None
            if record.get("check_accuracy") is None
            else CheckAccuracyReport.from_jsonable(record["check_accuracy"]),
            ablation=None
            if record.get("ablation") is None
            else AblationReport.from_jsonable(record["ablation"]),
            sweep=None
            if record.get("sweep") is None
            else SweepReport.from_jsonable(record["sweep"]),
            calls_per_question=None
            if record.get("calls_per_question") is None
            else Fraction(record["calls_per_question"]),
            per_dataset={
                key: CorrectRateReport.from_jsonable(value)
                for key, value in record.get("per_dataset", {}).items()
            },
        )


def mean_calls_per_question(traces: Sequence[PipelineTrace]) -> Fraction:
    if not traces:
        return Fraction(0)
    return Fraction(sum(t.model_calls for t in traces), len(traces))


def per_dataset_breakdown(
    traces: Sequence[PipelineTrace],
) -> dict[str, CorrectRateReport]:
    groups: dict[str, list[PipelineTrace]] = {}
    for trace in traces:
        groups.setdefault(trace.dataset or "default", []).append(trace)
    return {name: eval_correct_rate(group) for name, group in sorted(groups.items())}


# --- rendering -------------------------------------------------------------------


def _pct(value: Fraction, digits: int = 1) -> str:
    return format_decimal(value, digits)


def _signed_pct(value: Fraction, digits: int = 1) -> str:
    text = format_decimal(value, digits)
    return text if text.startswith("-") else "+" + text


def render_correct_rate_line(report: CorrectRateReport) -> str:
    return (
        f"{_pct(report.direct_rate)} / {_pct(report.self_corrected_rate)} "
        f"({_signed_pct(report.delta)})"
    )


def render_report(report: EvalReport) -> str:
    """Deterministic fixed-width text rendering of every present section."""
    lines: list[str] = []
    if report.correct_rate is not None:
        lines.append("== Correct rate (direct / self-corrected) ==")
        lines.append(render_correct_rate_line(report.correct_rate))
        lines.append("")
    if report.per_dataset:
        lines.append("== Per-dataset correct rate ==")
        for name, sub in report.per_dataset.items():
            lines.append(f"{name:<16} {render_correct_rate_line(sub)}")
        lines.append("")
    if report.check_accuracy is not None:
        acc = report.check_accuracy
        lines.append("== Check accuracy ==")
        lines.append(
            f"{'Path-correct':>14} {'Path-wrong':>12} {'Average':>9} {'Step':>6}"
        )
        lines.append(
            f"{_pct(acc.acc_correct_paths):>14} {_pct(acc.acc_wrong_paths):>12} "
            f"{_pct(acc.average):>9} {_pct(acc.step_localization_rate):>6}"
        )
        lines.append(f"pooled accuracy: {_pct(acc.pooled)}")
        lines.append("")
    if report.ablation is not None:
        ablation = report.ablation
        lines.append("== Ablation by error type ==")
        header = f"{'':<24}"
        counts = f"{'Number of wrong cases':<24}"
        corrected = f"{'Successfully corrected':<24}"
        gains = f"{'Performance gains':<24}"
        for error_type, label in ERROR_TYPE_LABELS.items():
            row = ablation.rows[error_type]
            header += f"{label:>11}"
            counts += f"{row.detected:>11}"
            corrected += f"{row.corrected:>11}"
            gains += f"{_pct(ablation.gain(error_type), 2) + '%':>11}"
        total = ablation.total
        header += f"{'Total':>11}"
        counts += f"{total.detected:>11}"
        corrected += f"{total.corrected:>11}"
        gains += f"{_pct(ablation.total_gain, 2) + '%':>11}"
        lines.extend([header, counts, corrected, gains])
        lines.append(
            f"overall correction rate: {_pct(ablation.overall_correction_rate)}%"
        )
        lines.append("")
    if report.sweep is not None:
        lines.append("== Data-ratio sweep ==")
        lines.append(
            f"{'Paths(w:c)':>12} {'Steps(w:c)':>12} {'Ratio':>6} "
            f"{'Acc-c':>6} {'Acc-w':>6} {'Avg':>6} {'Rate':>6} {'Best':>5}"
        )
        for row in report.sweep.rows:
            best = "*" if row.ratio == report.sweep.best_ratio else ""
            lines.append(
                f"{f'{row.path_wrong}:{row.path_correct}':>12} "
                f"{f'{row.step_wrong}:{row.step_correct}':>12} "
                f"{format_decimal(row.ratio, 2):>6} "
                f"{_pct(row.acc_correct):>6} {_pct(row.acc_wrong):>6} "
                f"{_pct(row.average):>6} {_pct(row.correct_rate):>6} {best:>5}"
            )
        lines.append("")
    if report.calls_per_question is not None:
        lines.append(
            f"mean model calls per question: "
            f"{format_decimal(report.calls_per_question, 2)}"
        )
        lines.append("")
    if not lines:
        lines = ["== empty report =="]
    return "\n".join(lines).rstrip("\n") + "\n"
