"""``neuralgpu`` command line: gen, verify, train, eval, sweep, report.

Exit codes: 0 success, 1 verification failure, 2 configuration or usage
error, 3 numeric abort during training, 4 partial sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import SUITES, EvalSettings, RunConfigFile, dump_config, load_config, train_config_from_dict
from .errors import ConfigError, ContractViolation, ExpressionError
from .evaluator import (EvalReport, GeneralizationCriterion, ModelPredictor, alignment_experiment, carry_threshold,
                        length_generalization_curve, oracle_predictor, structured_mul_report)
from .tasks import Example, TaskSpec, generate, verify_example
from .trainer import multi_seed_sweep, run_training

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def output_root() -> Path:
    return Path(os.environ.get("NEURALGPU_OUT", "runs"))


def _int_list(text: str) -> list[int]:
    """``"8,16,24"`` or ``"0-4"`` (inclusive) or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def int_list(text: str) -> list[int]:
    try:
        return _int_list(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 8,16,24 or 0-4, got {text!r}") from None


def targets_checksum(examples) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(ex.target.encode())
        h.update(b"\n")
    return h.hexdigest()


# -- gen / verify -------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = TaskSpec(args.task, args.base, args.representation, args.length, args.seed)
    examples = generate(spec, args.count)
    bad = [i for i, ex in enumerate(examples) if not verify_example(ex)]
    if bad:
        raise CliError(f"generated example {bad[0]} failed oracle verification", EXIT_VERIFY)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
    print(f"wrote {len(examples)} examples to {out} targets-sha256 {targets_checksum(examples)}")
    return EXIT_OK


def read_examples(path) -> list[Example]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(Example.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"{path}:{lineno}: not an example record ({exc})") from exc
    return examples


def cmd_verify(args) -> int:
    examples = read_examples(args.data)
    failed = []
    for i, ex in enumerate(examples):
        try:
            ok = verify_example(ex)
        except (ExpressionError, ZeroDivisionError, ContractViolation):
            ok = False
        if not ok:
            failed.append(i)
    agree = len(examples) - len(failed)
    pct = 100.0 * agree / len(examples) if examples else 100.0
    print(f"{agree}/{len(examples)} examples agree with the oracle ({pct:.2f}%) "
          f"targets-sha256 {targets_checksum(examples)}")
    for i in failed[:10]:
        print(f"  mismatch at record {i + 1}: {examples[i].input!r}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_VERIFY


# -- train ------------------------------------------------------------------------

def _resolve_run(args) -> RunConfigFile:
    cfg = load_config(args.config) if args.config else RunConfigFile()
    train = cfg.train
    try:
        if getattr(args, "max_steps", None) is not None:
            train = replace(train, max_steps=args.max_steps)
        if getattr(args, "seed", None) is not None:
            train = replace(train, seed=args.seed)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, train=train)


def _default_run_dir(cfg: RunConfigFile) -> Path:
    if cfg.output:
        return Path(cfg.output)
    t = cfg.train
    return output_root() / f"{t.task}-{t.curriculum}-s{t.seed}"


def cmd_train(args) -> int:
    cfg = _resolve_run(args)
    run_dir = Path(args.out) if args.out else _default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.yaml").write_text(dump_config(cfg))
    resume = None
    if args.resume:
        resume = ckpt_io.load(args.resume)
    record = run_training(cfg.train, run_dir, resume_from=resume)
    print(f"{record.status} at step {record.final_step} "
          f"(curriculum length {record.curriculum['length']}, complete={record.curriculum['complete']}) "
          f"-> {run_dir}")
    if record.status != "completed":
        print(f"aborted: {record.error}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def _load_predictor(args):
    if args.oracle_stub:
        return oracle_predictor, "oracle-stub", None
    if not args.checkpoint:
        raise CliError("eval needs --checkpoint or --oracle-stub")
    try:
        ck = ckpt_io.load(args.checkpoint)
        bank = ck.bank()
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from exc
    except ContractViolation as exc:
        raise CliError(f"checkpoint {args.checkpoint}: {exc}") from exc
    train = None
    if "task" in ck.config:
        train = train_config_from_dict(ck.config)
    return ModelPredictor(bank), str(args.checkpoint), train


def eval_settings(args) -> EvalSettings:
    """Settings from the run file's ``eval`` section, overridden by flags."""
    settings = load_config(args.config).eval if args.config else EvalSettings()
    overrides = {"suites": [args.suite] if args.suite else None, "lengths": args.lengths, "cases": args.cases,
                 "seed": args.seed, "carry_max_k": args.max_k, "carry_cases": args.cases,
                 "carry_digits": args.digits, "structured_base": args.structured_base,
                 "structured_length": args.structured_length}
    for key, value in overrides.items():
        if value is not None:
            setattr(settings, key, value)
    bad = [s for s in settings.suites if s not in SUITES]
    if bad:
        raise CliError(f"unknown suite {bad[0]!r}; valid suites: {', '.join(SUITES)}")
    return settings


def run_eval(args) -> tuple[EvalReport, EvalSettings]:
    settings = eval_settings(args)
    predict, name, train = _load_predictor(args)
    task = args.task or (train.task if train else "add")
    base = args.base or (train.schedule().stages[-1].base if train else 2)
    rep = args.representation or (train.representation if train else "padded")
    report = EvalReport(name)
    for suite in settings.suites:
        if suite == "uniform":
            lengths = settings.lengths or ([train.max_length, 2 * train.max_length] if train else [8, 16])
            spec = TaskSpec(task, base, rep, max(lengths))
            report.suites += length_generalization_curve(predict, spec, lengths, settings.cases, settings.seed)
        elif suite == "carry":
            carry = carry_threshold(predict, base, settings.carry_max_k, settings.carry_cases, settings.seed,
                                    settings.carry_digits or None)
            report.suites += carry.records
            report.carry_threshold = carry.threshold
            report.extras["carry_digits"] = carry.total_digits
        else:
            structured = structured_mul_report(predict, settings.structured_base or base,
                                               settings.structured_length)
            report.suites += list(structured.families.values())
            report.extras["largest_repunit_passing"] = structured.largest_repunit_passing
    return report, settings


def cmd_eval(args) -> int:
    report, settings = run_eval(args)
    out = Path(args.out) if args.out else output_root() / "eval" / "-".join(settings.suites)
    csv_path, jsonl_path = report.write(out)
    for rec in report.suites:
        print(f"{rec.suite}: {rec.passes}/{rec.cases} ({rec.accuracy:.3f})")
    if "carry" in settings.suites:
        k = report.carry_threshold
        print(f"carry threshold: {'none' if k is None else k}")
    print(f"report: {csv_path} {jsonl_path}")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------

SWEEP_FIELDS = ["seed", "passed", "metric", "final_step", "error", "run_dir", "checkpoint_sha256"]


def cmd_sweep(args) -> int:
    cfg = _resolve_run(args)
    if not args.seeds:
        raise CliError("sweep needs at least one seed")
    root = Path(args.out) if args.out else (Path(cfg.output) if cfg.output else output_root() / "sweep")
    root.mkdir(parents=True, exist_ok=True)
    (root / "run.yaml").write_text(dump_config(cfg))
    criterion = GeneralizationCriterion(args.test_length or 2 * cfg.train.max_length, args.cases, args.threshold)
    if args.alignment:
        rows = alignment_experiment(cfg.train, seeds=args.seeds, criterion=criterion, run_root=root)
        path = root / "alignment.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        for row in rows:
            print(f"{row['task']:>4} {row['representation']:>9}: pass fraction {row['fraction']:.2f}")
        print(f"table: {path}")
        return EXIT_PARTIAL if any(r["failures"] for r in rows) else EXIT_OK

    result = multi_seed_sweep(cfg.train, args.seeds, criterion, run_training, root, args.parallelism)
    path = root / "sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        for r in result.results:
            writer.writerow({"seed": r.seed, "passed": int(r.passed), "metric": "" if r.metric is None else r.metric,
                             "final_step": r.final_step, "error": r.error or "", "run_dir": r.run_dir or "",
                             "checkpoint_sha256": r.checkpoint_sha or ""})
    print(f"pass fraction {result.fraction:.3f} over {len(result.results)} seeds -> {path}")
    for r in result.failures:
        print(f"  seed {r.seed} failed: {r.error}", file=sys.stderr)
    return EXIT_PARTIAL if result.failures else EXIT_OK


# -- report -------------------------------------------------------------------

def cmd_report(args) -> int:
    from .plotting import render_report

    try:
        out = render_report(args.csv, args.out or Path(args.csv[0]).with_suffix(".png"))
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot render report: {exc}") from exc
    print(f"chart: {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuralgpu", description="Train and evaluate Neural GPU models on arithmetic.")
    p.add_argument("--verbose", "-v", action="store_true", help="log curriculum and annealing events")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write an oracle-verified dataset (JSON lines)")
    g.add_argument("--task", default="add", choices=["add", "mul", "k_mul", "expression"])
    g.add_argument("--base", type=int, default=2)
    g.add_argument("--length", "--digits", dest="length", type=int, default=8,
                   help="operand digits (pair tasks) or expression length")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--representation", default="padded", choices=["padded", "unpadded", "aligned"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    v = sub.add_parser("verify", help="re-check a dataset against the exact oracle")
    v.add_argument("data")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train one model from a YAML run file")
    t.add_argument("--config", help="YAML run file (defaults apply when omitted)")
    t.add_argument("--out", help="run directory (default: output field, else $NEURALGPU_OUT/...)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one suite")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--oracle-stub", action="store_true", help="use the exact oracle instead of a model")
    e.add_argument("--config", help="YAML run file whose eval section supplies defaults")
    e.add_argument("--suite", help=f"one of: {', '.join(SUITES)} (default uniform)")
    e.add_argument("--task")
    e.add_argument("--base", type=int)
    e.add_argument("--representation")
    e.add_argument("--lengths", type=int_list, help="uniform suite lengths, e.g. 12,24")
    e.add_argument("--cases", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--max-k", type=int)
    e.add_argument("--digits", type=int, help="carry suite operand digits (default max-k + 2)")
    e.add_argument("--structured-base", type=int)
    e.add_argument("--structured-length", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train across seeds and aggregate pass fractions")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int_list, required=True, help="e.g. 0-4 or 1,3,5")
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--test-length", type=int, help="generalization length (default 2 x max_length)")
    s.add_argument("--cases", type=int, default=256)
    s.add_argument("--threshold", type=float, default=0.99)
    s.add_argument("--alignment", action="store_true", help="compare representations for add and mul")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep, seed=None)

    r = sub.add_parser("report", help="render a PNG chart from report CSVs")
    r.add_argument("csv", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ContractViolation, ExpressionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
