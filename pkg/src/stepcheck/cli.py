"""Command-line interface: dataset forging, pipeline runs, and evaluation."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evalmetrics, forge, pipeline
from .backend import ROLE_CORRECTOR, ROLE_FEEDBACK, ROLE_GENERATOR, ROLE_SUBJECT
from .config import AppConfig, build_backend, load_config
from .paths import PATH_CORRECT, PATH_WRONG, load_questions, read_jsonl, write_jsonl
from .protocol import CHECK_FORMATS, report_from_jsonable, report_to_jsonable


def _load(args) -> AppConfig:
    return load_config(getattr(args, "config", None))


def cmd_collect(args) -> int:
    config = _load(args)
    questions = load_questions(args.dataset)
    keep = args.keep
    if keep == PATH_CORRECT and config.forge.correct_source == "gold":
        pairs = forge.gold_paths(questions)
        stats = forge.CollectStats(len(questions), len(pairs), 0, 0, 0)
    else:
        backend = build_backend(config, ROLE_GENERATOR)
        pairs, stats = forge.collect_paths(
            questions,
            backend,
            samples_per_question=args.samples or config.forge.samples_per_question,
            keep=keep,
            params=config.stage_params("generation"),
        )
    forge.save_pairs(args.out, pairs)
    print(
        f"collect: kept {stats.questions_yielding}/{stats.questions_total} "
        f"questions ({keep}); samples seen {stats.samples_seen}, "
        f"parse failures {stats.parse_failures}, "
        f"backend failures {stats.backend_failures}"
    )
    return 0


def cmd_gen_checks(args) -> int:
    config = _load(args)
    pairs = forge.load_pairs(args.pairs)
    backend = build_backend(config, ROLE_FEEDBACK)
    records, quarantined = forge.generate_check_dataset(
        pairs, backend, params=config.stage_params("check")
    )
    forge.save_check_records(args.out, records)
    if args.quarantine:
        write_jsonl(args.quarantine, (q.to_jsonable() for q in quarantined))
    print(
        f"gen-checks: {len(records)} records, {len(quarantined)} quarantined "
        f"of {len(pairs)} pairs"
    )
    return 0


def cmd_gen_corrections(args) -> int:
    config = _load(args)
    records = forge.load_check_records(args.checks)
    wrong = [r for r in records if r.feedback]
    backend = build_backend(config, ROLE_CORRECTOR)
    accepted, rejected = forge.generate_correction_dataset(
        wrong, backend, params=config.stage_params("correction")
    )
    forge.save_corrections(args.out, accepted)
    if args.rejected:
        forge.save_corrections(args.rejected, rejected)
    print(
        f"gen-corrections: accepted {len(accepted)}, dropped {len(rejected)} "
        f"of {len(wrong)} wrong-path records"
    )
    return 0


def cmd_balance(args) -> int:
    config = _load(args)
    wrong = forge.load_check_records(args.wrong)
    correct = forge.load_check_records(args.correct)
    seed = args.seed if args.seed is not None else config.seed
    balanced = forge.balance_dataset(
        wrong,
        correct,
        target_wrong=args.target_wrong,
        target_correct=args.target_correct,
        seed=seed if args.sample else None,
    )
    forge.save_check_records(args.out_wrong, balanced.wrong)
    forge.save_check_records(args.out_correct, balanced.correct)
    report = balanced.report
    if args.report:
        Path(args.report).write_text(
            json.dumps(report.to_jsonable(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
    ratio = report.ratio
    print(
        f"balance: paths {report.n_path_wrong}:{report.n_path_correct}, "
        f"steps {report.n_step_wrong}:{report.n_step_correct}, "
        f"ratio {float(ratio):.3f}"
        + (" (degenerate mix)" if report.degenerate else "")
    )
    return 0


def cmd_emit(args) -> int:
    questions = tuple(load_questions(args.questions)) if args.questions else ()
    wrong = tuple(forge.load_check_records(args.wrong)) if args.wrong else ()
    correct = tuple(forge.load_check_records(args.correct)) if args.correct else ()
    corrections = (
        tuple(forge.load_corrections(args.corrections)) if args.corrections else ()
    )
    dataset = forge.TrainingDataset(
        questions=questions,
        wrong_records=wrong,
        correct_records=correct,
        corrections=corrections,
    )
    plan = None
    if args.plan:
        with open(args.plan, encoding="utf-8") as handle:
            plan = json.load(handle)
    records = forge.emit_training_records(dataset, args.task, plan)
    count = write_jsonl(args.out, records)
    print(f"emit: {count} {args.task} records -> {args.out}")
    return 0


def cmd_audit_sample(args) -> int:
    config = _load(args)
    records = forge.load_check_records(args.checks)
    seed = args.seed if args.seed is not None else config.seed
    sample = forge.audit_sample(records, n=args.n, seed=seed)
    write_jsonl(args.out, sample)
    print(f"audit-sample: exported {len(sample)} records for review")
    return 0


def cmd_run(args) -> int:
    config = _load(args)
    questions = load_questions(args.dataset)
    backend = build_backend(config, ROLE_SUBJECT)
    fmt = args.format or config.pipeline.format
    runner = pipeline.SelfCorrectionPipeline(
        backend,
        fmt,
        reasoning_params=config.stage_params("reasoning"),
        check_params=config.stage_params("check"),
        correction_params=config.stage_params("correction"),
        parse_retries=config.pipeline.parse_retries,
        prescreen=config.pipeline.prescreen,
        dataset=Path(args.dataset).stem,
    )
    traces = runner.run_batch(questions, workers=config.pipeline.workers)
    pipeline.save_traces(args.out, traces)
    report = evalmetrics.eval_correct_rate(traces)
    calls = evalmetrics.mean_calls_per_question(traces)
    print(
        f"run: {len(traces)} questions, format {fmt}, "
        f"correct rate {evalmetrics.render_correct_rate_line(report)}, "
        f"mean calls {float(calls):.2f}"
    )
    return 0


def cmd_check(args) -> int:
    config = _load(args)
    pairs = forge.load_pairs(args.labels)
    backend = build_backend(config, ROLE_SUBJECT)
    fmt = args.format or config.pipeline.format
    runner = pipeline.SelfCorrectionPipeline(
        backend,
        fmt,
        check_params=config.stage_params("check"),
        parse_retries=config.pipeline.parse_retries,
    )
    rows = []
    for pair in pairs:
        report = runner.check_path(pair.question, pair.path)
        rows.append(
            {"question_id": pair.question.id, "report": report_to_jsonable(report)}
        )
    write_jsonl(args.out, rows)
    print(f"check: {len(rows)} labeled paths checked with format {fmt}")
    return 0


def _write_eval(args, report: evalmetrics.EvalReport) -> None:
    text = evalmetrics.render_report(report)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_jsonable(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_eval(args) -> int:
    if args.metric == "correct-rate":
        traces = pipeline.load_traces(args.traces)
        report = evalmetrics.EvalReport(
            correct_rate=evalmetrics.eval_correct_rate(traces),
            calls_per_question=evalmetrics.mean_calls_per_question(traces),
            per_dataset=evalmetrics.per_dataset_breakdown(traces),
        )
    elif args.metric == "check-accuracy":
        labeled = forge.load_pairs(args.labels)
        reports = {}
        for row in read_jsonl(args.reports):
            reports[row["question_id"]] = report_from_jsonable(row["report"])
        report = evalmetrics.EvalReport(
            check_accuracy=evalmetrics.eval_check_accuracy(labeled, reports)
        )
    elif args.metric == "ablation":
        traces = pipeline.load_traces(args.traces)
        report = evalmetrics.EvalReport(
            ablation=evalmetrics.ablation_by_error_type(traces)
        )
    else:
        rows = [evalmetrics.SweepRow.from_jsonable(r) for r in read_jsonl(args.rows)]
        report = evalmetrics.EvalReport(sweep=evalmetrics.ratio_sweep(rows))
    _write_eval(args, report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepcheck",
        description="Self-checking and self-correction toolkit for stepwise "
        "arithmetic reasoning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="sample reasoning paths and keep one per label")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--keep", choices=[PATH_WRONG, PATH_CORRECT], default=PATH_WRONG)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("gen-checks", help="generate per-step checking data")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quarantine")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_checks)

    p = sub.add_parser("gen-corrections", help="generate answer-filtered corrections")
    p.add_argument("--checks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rejected")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_corrections)

    p = sub.add_parser("balance", help="select path counts and report step ratios")
    p.add_argument("--wrong", required=True)
    p.add_argument("--correct", required=True)
    p.add_argument("--target-wrong", type=int, required=True)
    p.add_argument("--target-correct", type=int, required=True)
    p.add_argument("--out-wrong", required=True)
    p.add_argument("--out-correct", required=True)
    p.add_argument("--report")
    p.add_argument("--seed", type=int)
    p.add_argument("--sample", action="store_true", help="seeded random selection")
    p.add_argument("--config")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("emit", help="render training conversation records")
    p.add_argument("--task", required=True, choices=list(forge.TASK_KINDS))
    p.add_argument("--out", required=True)
    p.add_argument("--questions")
    p.add_argument("--wrong")
    p.add_argument("--correct")
    p.add_argument("--corrections")
    p.add_argument("--plan", help="JSON substitution plan (list or {id: task})")
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("audit-sample", help="export check records for human review")
    p.add_argument("--checks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_audit_sample)

    p = sub.add_parser("run", help="run the three-stage self-correction pipeline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--format", choices=list(CHECK_FORMATS))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="check labeled paths without reasoning")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--format", choices=list(CHECK_FORMATS))
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("eval", help="compute metrics from persisted artifacts")
    p.add_argument(
        "metric", choices=["correct-rate", "check-accuracy", "ablation", "sweep"]
    )
    p.add_argument("--traces")
    p.add_argument("--labels")
    p.add_argument("--reports")
    p.add_argument("--rows")
    p.add_argument("--out")
    p.add_argument("--text")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a one-line error, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
