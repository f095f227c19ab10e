"""Generalization measurements: whole-sequence accuracy on uniform and
structured suites, carry thresholds, and representation comparisons.

A *predictor* is any callable mapping a list of :class:`Example` to a list of
output strings. :class:`ModelPredictor` wraps a trained bank;
:func:`oracle_predictor` and :func:`constant_predictor` are reference stubs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation
from .model import ParameterBank, decode, forward
from .tasks import (Example, TaskSpec, decode_symbols, encode, gen_carry_case, gen_structured_mul_suite,
                    oracle_target)

Predictor = Callable[[Sequence[Example]], list]

# Structured suites draw from a stream disjoint from the uniform suites.
UNIFORM_STREAM, CARRY_STREAM, CRITERION_STREAM = 11, 12, 13


class ModelPredictor:
    def __init__(self, bank: ParameterBank, batch_size: int = 64):
        self.bank = bank
        self.batch_size = batch_size

    def __call__(self, examples: Sequence[Example]) -> list[str]:
        out: list[str | None] = [None] * len(examples)
        groups: dict[tuple, list[int]] = {}
        for i, ex in enumerate(examples):
            groups.setdefault((len(ex.input), ex.second_row is not None), []).append(i)
        for idx in groups.values():
            for lo in range(0, len(idx), self.batch_size):
                chunk = idx[lo:lo + self.batch_size]
                inputs = np.stack([encode(examples[i].input) for i in chunk])
                second = None
                if examples[chunk[0]].second_row is not None:
                    second = np.stack([encode(examples[i].second_row) for i in chunk])
                pred = decode(forward(inputs, self.bank, "eval", second_row=second))
                for i, row in zip(chunk, pred):
                    out[i] = decode_symbols(row)
        return out


def oracle_predictor(examples: Sequence[Example]) -> list[str]:
    """Answers every example exactly from its input text."""
    return [oracle_target(ex) for ex in examples]


def constant_predictor(symbol: str = "0") -> Predictor:
    def predict(examples):
        return [symbol * len(ex.input) for ex in examples]
    return predict


def from_string_fn(fn: Callable[[str], str]) -> Predictor:
    """Adapt a plain ``input -> output`` string function."""
    return lambda examples: [fn(ex.input) for ex in examples]


@dataclass
class Verdict:
    input: str
    target: str
    predicted: str
    correct: bool
    length_mismatch: bool = False
    second_row: str | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class SuiteRecord:
    suite: str
    cases: int
    passes: int
    verdicts: list[Verdict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.passes / self.cases if self.cases else float("nan")

    def to_record(self) -> dict:
        return {"suite": self.suite, "cases": self.cases, "passes": self.passes,
                "accuracy": self.accuracy, **self.params}


def evaluate_suite(name: str, predict: Predictor, examples: Sequence[Example], **params) -> SuiteRecord:
    if not examples:
        raise ContractViolation(f"suite {name!r} has no examples")
    predictions = predict(list(examples))
    verdicts = []
    for ex, pred in zip(examples, predictions):
        pred = str(pred)
        mismatch = len(pred) != len(ex.target)
        verdicts.append(Verdict(ex.input, ex.target, pred, not mismatch and pred == ex.target, mismatch,
                                ex.second_row, dict(ex.meta)))
    return SuiteRecord(name, len(verdicts), sum(v.correct for v in verdicts), verdicts, dict(params))


def sequence_accuracy(predict: Predictor, examples: Sequence[Example]) -> float:
    """Fraction of examples whose entire output string is right.

    Outputs of the wrong length count as errors.
    """
    return evaluate_suite("sequence", predict, examples).accuracy


def _uniform_examples(spec: TaskSpec, length: int, cases: int, key: Sequence[int]) -> list[Example]:
    from .trainer import make_example

    rng = np.random.default_rng([*key, length])
    return [make_example(spec.task, spec.base, length, spec.representation, rng) for _ in range(cases)]


def length_generalization_curve(predict: Predictor, spec: TaskSpec, lengths: Sequence[int],
                                cases: int = 200, seed: int = 0) -> list[SuiteRecord]:
    """Sequence accuracy on fresh uniform examples at each length."""
    return [evaluate_suite(f"uniform-{length}", predict,
                           _uniform_examples(spec, length, cases, [seed, UNIFORM_STREAM]),
                           length=length, task=spec.task, base=spec.base)
            for length in lengths]


def binomial_stderr(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n else float("nan")


@dataclass
class CarryReport:
    threshold: int | None
    records: list[SuiteRecord]
    total_digits: int


def carry_threshold(predict: Predictor, base: int, max_k: int, cases_per_k: int = 200, seed: int = 0,
                    total_digits: int | None = None) -> CarryReport:
    """First carry length ``k`` (scanning up from 1) whose error rate is at
    least 50%; ``threshold`` is None when no ``k <= max_k`` crosses."""
    total_digits = total_digits or max_k + 2
    if max_k < 1 or max_k > total_digits - 2:
        raise ContractViolation(f"max_k must be in 1..{total_digits - 2} for {total_digits}-digit operands")
    records = []
    threshold = None
    for k in range(1, max_k + 1):
        rng = np.random.default_rng([seed, CARRY_STREAM, base, k])
        examples = [gen_carry_case(base, total_digits, k, rng) for _ in range(cases_per_k)]
        rec = evaluate_suite(f"carry-{k}", predict, examples, k=k, base=base, digits=total_digits)
        records.append(rec)
        if 1.0 - rec.accuracy >= 0.5:
            threshold = k
            break
    return CarryReport(threshold, records, total_digits)


@dataclass
class StructuredReport:
    base: int
    L: int
    families: dict[str, SuiteRecord]
    largest_repunit_passing: int

    def rows(self) -> list[dict]:
        return [rec.to_record() for rec in self.families.values()]


def structured_mul_report(predict: Predictor, base: int, L: int) -> StructuredReport:
    examples = gen_structured_mul_suite(base, L)
    families: dict[str, list[Example]] = {}
    for ex in examples:
        families.setdefault(ex.meta["family"], []).append(ex)
    records = {name: evaluate_suite(f"structured-{name}", predict, exs, base=base, L=L)
               for name, exs in families.items()}
    largest = 0
    for v in records["repunit"].verdicts:
        if v.correct:
            largest = max(largest, int(v.meta["run"]))
    return StructuredReport(base, L, records, largest)


@dataclass(frozen=True)
class GeneralizationCriterion:
    """Sweep criterion: sequence accuracy on uniform examples at ``test_length``.

    A plain dataclass so it pickles into sweep worker processes.
    """
    test_length: int
    cases: int = 256
    threshold: float = 0.99
    base: int | None = None

    def __call__(self, record, config) -> tuple[bool, float]:
        b = self.base or config.schedule().stages[-1].base
        spec = TaskSpec(config.task, b, config.representation, self.test_length)
        examples = _uniform_examples(spec, self.test_length, self.cases, [config.seed, CRITERION_STREAM])
        acc = sequence_accuracy(ModelPredictor(record.bank), examples)
        return acc >= self.threshold, acc


generalization_criterion = GeneralizationCriterion


def alignment_experiment(base_config, tasks: Sequence[str] = ("add", "mul"),
                         representations: Sequence[str] = ("padded", "unpadded", "aligned"),
                         seeds: Sequence[int] = (), criterion: Callable | None = None,
                         trainer: Callable | None = None, run_root=None) -> list[dict]:
    """Train every (task, representation) cell on the same budget and seeds;
    one row per cell with its pass fraction."""
    from .trainer import multi_seed_sweep, run_training

    if not seeds:
        raise ContractViolation("alignment experiment needs at least one seed")
    criterion = criterion or generalization_criterion(2 * base_config.max_length)
    rows = []
    for task in tasks:
        for rep in representations:
            cfg = replace(base_config, task=task, representation=rep)
            root = Path(run_root) / f"{task}-{rep}" if run_root else None
            result = multi_seed_sweep(cfg, seeds, criterion, trainer or run_training, root)
            rows.append({"task": task, "representation": rep, "seeds": len(seeds),
                         "passed": sum(r.passed for r in result.results), "fraction": result.fraction,
                         "failures": len(result.failures)})
    return rows


# -- reports ----------------------------------------------------------------

REPORT_FIELDS = ["checkpoint", "suite", "cases", "passes", "accuracy", "stderr", "length", "k", "base", "L",
                 "digits", "task"]


@dataclass
class EvalReport:
    checkpoint: str
    suites: list[SuiteRecord] = field(default_factory=list)
    carry_threshold: int | None = None
    extras: dict = field(default_factory=dict)

    def csv_rows(self) -> list[dict]:
        rows = []
        for rec in self.suites:
            row = {"checkpoint": self.checkpoint, "stderr": binomial_stderr(rec.accuracy, rec.cases),
                   **rec.to_record()}
            rows.append({k: row.get(k, "") for k in REPORT_FIELDS})
        return rows

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, jsonl_path = out / "report.csv", out / "report.jsonl"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            writer.writerows(self.csv_rows())
        with open(jsonl_path, "w") as fh:
            for rec in self.suites:
                fh.write(json.dumps({"record": "suite", "checkpoint": self.checkpoint, **rec.to_record()},
                                    sort_keys=True) + "\n")
                for v in rec.verdicts:
                    fh.write(json.dumps({"record": "case", "suite": rec.suite, **_verdict_dict(v)},
                                        sort_keys=True) + "\n")
            fh.write(json.dumps({"record": "summary", "checkpoint": self.checkpoint,
                                 "carry_threshold": self.carry_threshold, **self.extras}, sort_keys=True) + "\n")
        return csv_path, jsonl_path


def _verdict_dict(v: Verdict) -> dict:
    d = asdict(v)
    if "value" in d["meta"]:
        d["meta"]["value"] = str(d["meta"]["value"])
    if d["second_row"] is None:
        del d["second_row"]
    return d
