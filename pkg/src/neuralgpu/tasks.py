"""Task generators with exact big-integer oracles.

Every example is a pair of equal-length symbol strings over one global
alphabet (digits 0-9, the four operators, and ``_`` as padding), so weights
carry over between bases. Targets are the exact result in base ``b``,
left-padded with zeros to the input length.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ContractViolation, ExpressionError

DIGITS = "0123456789"
OPERATORS = "+-*/"
PAD = "_"
ALPHABET = DIGITS + OPERATORS + PAD
ALPHABET_SIZE = len(ALPHABET)
SYMBOL_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}

TASKS = ("add", "mul", "k_mul", "expression")
REPRESENTATIONS = ("padded", "unpadded", "aligned")
_OP_FOR_TASK = {"add": "+", "mul": "*"}


def encode(text: str) -> np.ndarray:
    try:
        return np.fromiter((SYMBOL_INDEX[ch] for ch in text), dtype=np.int64, count=len(text))
    except KeyError as exc:
        raise ContractViolation(f"symbol {exc.args[0]!r} is not in the alphabet") from None


def decode_symbols(indices) -> str:
    return "".join(ALPHABET[int(i)] for i in np.asarray(indices).reshape(-1))


def _check_base(base: int) -> None:
    if not 2 <= base <= 10:
        raise ContractViolation(f"base must be in 2..10, got {base}")


def to_digits(value: int, base: int) -> str:
    """Minimal base-``base`` rendering (``"0"`` for zero)."""
    if value < 0:
        raise ContractViolation("cannot render a negative value")
    if value == 0:
        return "0"
    out = []
    while value:
        value, r = divmod(value, base)
        out.append(DIGITS[r])
    return "".join(reversed(out))


def render(value: int, base: int, width: int) -> str:
    """``value`` in base ``base``, most significant digit first, zero-padded to ``width``."""
    _check_base(base)
    digits = to_digits(value, base)
    if len(digits) > width:
        raise ContractViolation(f"value needs {len(digits)} base-{base} digits, frame has {width}")
    return digits.rjust(width, "0")


def parse_number(text: str, base: int) -> int:
    value = 0
    for pos, ch in enumerate(text):
        d = DIGITS.find(ch)
        if d < 0 or d >= base:
            raise ExpressionError(f"invalid base-{base} digit {ch!r}", pos)
        value = value * base + d
    return value


# -- expression evaluation --------------------------------------------------

def _tokenize(expr: str, base: int) -> list[tuple[str, int, int]]:
    """Split into ("num", value, pos) / ("op", char, pos) tokens."""
    if not expr:
        raise ExpressionError("empty expression", 0)
    tokens: list[tuple] = []
    i = 0
    while i < len(expr):
        ch = expr[i]
        if ch in OPERATORS:
            if not tokens or tokens[-1][0] == "op":
                raise ExpressionError(f"operator {ch!r} without a left operand", i)
            tokens.append(("op", ch, i))
            i += 1
        elif ch in DIGITS:
            j = i
            while j < len(expr) and expr[j] in DIGITS:
                j += 1
            try:
                value = parse_number(expr[i:j], base)
            except ExpressionError as exc:
                raise ExpressionError(f"invalid base-{base} digit {expr[i + exc.position]!r}",
                                      i + exc.position) from None
            tokens.append(("num", value, i))
            i = j
        else:
            raise ExpressionError(f"unexpected symbol {ch!r}", i)
    if tokens[-1][0] == "op":
        raise ExpressionError("expression ends with an operator", tokens[-1][2])
    return tokens


def additive_terms(expr: str, base: int) -> tuple[list[int], list[str]]:
    """Reduce every ``*``/``/`` run left to right.

    Returns the additive terms and the ``+``/``-`` operators between them.
    """
    tokens = _tokenize(expr, base)
    terms = [tokens[0][1]]
    signs: list[str] = []
    for k in range(1, len(tokens), 2):
        _, op, pos = tokens[k]
        value = tokens[k + 1][1]
        if op == "*":
            terms[-1] *= value
        elif op == "/":
            if value == 0:
                raise ZeroDivisionError(f"division by zero at position {pos}")
            terms[-1] //= value
        else:
            signs.append(op)
            terms.append(value)
    return terms, signs


def _prefix_sums(terms: list[int], signs: list[str]) -> Iterator[int]:
    total = terms[0]
    yield total
    for op, v in zip(signs, terms[1:]):
        total = total + v if op == "+" else total - v
        yield total


def eval_expression(expr: str, base: int) -> int:
    """Exact value of an infix expression: ``*``/``/`` bind tighter than
    ``+``/``-``, left-associative, ``/`` is floor division."""
    _check_base(base)
    terms, signs = additive_terms(expr, base)
    total = 0
    for total in _prefix_sums(terms, signs):
        pass
    return total


# -- carries ----------------------------------------------------------------

def _digit_list(value: int, base: int) -> list[int]:
    out = []
    while value:
        value, r = divmod(value, base)
        out.append(r)
    return out


def carry_chains(a: int, b: int, base: int, digits: int = 0) -> list[int]:
    """Length of every carry chain in the schoolbook sum ``a + b``.

    A chain starts at a digit position whose two digits sum to at least
    ``base`` and continues through each following position whose digits sum
    to exactly ``base - 1``; its length is the number of positions it
    carries out of.
    """
    if a < 0 or b < 0:
        raise ContractViolation("carry counting needs nonnegative operands")
    da, db = _digit_list(a, base), _digit_list(b, base)
    size = max(len(da), len(db), digits)
    da += [0] * (size - len(da))
    db += [0] * (size - len(db))
    chains = []
    run = 0
    for x, y in zip(da, db):
        s = x + y
        if s >= base:
            if run:
                chains.append(run)
            run = 1
        elif s == base - 1 and run:
            run += 1
        elif run:
            chains.append(run)
            run = 0
    if run:
        chains.append(run)
    return chains


def count_carries(a: int, b: int, base: int) -> int:
    """Longest carry chain in ``a + b`` (0 when nothing carries)."""
    return max(carry_chains(a, b, base), default=0)


def final_carry_length(a: int, b: int, base: int, digits: int = 0) -> int:
    """Length of the chain that carries out of the top digit, else 0.

    ``digits`` fixes the operand frame; by default it is the longer operand.
    """
    if a < 0 or b < 0:
        raise ContractViolation("carry counting needs nonnegative operands")
    size = max(len(_digit_list(a, base)), len(_digit_list(b, base)), digits)
    if a + b < base ** size:
        return 0
    return carry_chains(a, b, base, size)[-1]


# -- examples ---------------------------------------------------------------

@dataclass
class Example:
    input: str
    target: str
    meta: dict = field(default_factory=dict)
    second_row: str | None = None

    def to_record(self) -> dict:
        rec = {"input": self.input, "target": self.target}
        if self.second_row is not None:
            rec["second_row"] = self.second_row
        for k, v in self.meta.items():
            rec[k] = str(v) if k == "value" else v
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Example":
        rec = dict(rec)
        inp, tgt = rec.pop("input"), rec.pop("target")
        second = rec.pop("second_row", None)
        if "value" in rec:
            rec["value"] = int(rec["value"])
        return cls(inp, tgt, rec, second)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))


@dataclass
class TaskSpec:
    task: str = "add"
    base: int = 2
    representation: str = "padded"
    length: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractViolation(f"unknown task {self.task!r}; expected one of {TASKS}")
        _check_base(self.base)
        if self.representation not in REPRESENTATIONS:
            raise ContractViolation(f"unknown representation {self.representation!r}")
        if self.representation != "padded" and self.task not in ("add", "mul"):
            raise ContractViolation(f"representation {self.representation!r} only applies to two-operand tasks")
        if self.length < 1:
            raise ContractViolation("length must be >= 1")


def frame_width(task: str, length: int) -> int:
    """Input (and output) string length for a task at a given length."""
    if task in ("add", "mul"):
        return 2 * length + 1
    if task == "expression":
        return length
    raise ContractViolation(f"frame width of {task!r} depends on the operand count")


def random_number(rng: np.random.Generator, base: int, digits: int) -> int:
    """Uniform on ``[0, base**digits)``."""
    value = 0
    for d in rng.integers(0, base, size=digits):
        value = value * base + int(d)
    return value


def pair_example(a: int, b: int, task: str, base: int, digits: int, representation: str = "padded",
                 width: int | None = None) -> Example:
    """Format ``a op b`` with operands of ``digits`` digits in a frame of
    ``width`` (default ``2 * digits + 1``)."""
    op = _OP_FOR_TASK[task]
    value = a + b if task == "add" else a * b
    width = width or 2 * digits + 1
    meta = {"task": task, "base": base, "digits": digits, "representation": representation, "value": value}
    if representation == "padded":
        text = render(a, base, digits) + op + render(b, base, digits)
        second = None
    elif representation == "unpadded":
        text = to_digits(a, base) + op + to_digits(b, base)
        second = None
    elif representation == "aligned":
        row0, row1 = render(a, base, digits), op + render(b, base, digits)
        text, second = row0.rjust(width, PAD), row1.rjust(width, PAD)
    else:
        raise ContractViolation(f"unknown representation {representation!r}")
    if len(text) > width:
        raise ContractViolation(f"input {text!r} does not fit frame of {width}")
    text = text.ljust(width, PAD)
    if task == "add":
        meta["carry"] = count_carries(a, b, base)
    return Example(text, render(value, base, width), meta, second)


def gen_pair(spec: TaskSpec, rng: np.random.Generator) -> Example:
    if spec.task not in ("add", "mul"):
        raise ContractViolation("gen_pair handles add and mul only")
    a = random_number(rng, spec.base, spec.length)
    b = random_number(rng, spec.base, spec.length)
    return pair_example(a, b, spec.task, spec.base, spec.length, spec.representation)


def k_mul_width(digits: int, max_operands: int) -> int:
    return max_operands * (digits + 1) - 1


def gen_k_mul(digits: int, base: int, rng: np.random.Generator,
              operand_count_sampler: Callable[[int, np.random.Generator], int] | int = 3,
              width: int | None = None, max_retries: int = 100) -> Example:
    """Product of ``l`` operands of ``digits`` digits each, joined by ``*``.

    ``operand_count_sampler`` is a fixed count or a callable ``(digits, rng)
    -> l``. The frame defaults to the widest possible draw
    (``(digits - 1) // 2`` operands when sampling), and shorter inputs are
    right-padded with ``_``.
    """
    if digits < 1:
        raise ContractViolation("digits must be >= 1")
    _check_base(base)
    if callable(operand_count_sampler):
        max_l = max(1, (digits - 1) // 2)
        draw = operand_count_sampler
    else:
        max_l = int(operand_count_sampler)
        draw = lambda n, r: max_l  # noqa: E731
    width = width or k_mul_width(digits, max_l)
    for _ in range(max_retries):
        count = int(draw(digits, rng))
        operands = [random_number(rng, base, digits) for _ in range(count)]
        value = 1
        for v in operands:
            value *= v
        text = "*".join(render(v, base, digits) for v in operands)
        if len(text) > width or len(to_digits(value, base)) > width:
            continue
        meta = {"task": "k_mul", "base": base, "digits": digits, "operands": count, "value": value}
        return Example(text.ljust(width, PAD), render(value, base, width), meta)
    raise ContractViolation(f"k_mul: no draw fit a frame of {width} after {max_retries} tries")


def gen_expression(length: int, base: int, rng: np.random.Generator, max_retries: int = 10000) -> Example:
    """Random infix expression of exactly ``length`` symbols.

    Each symbol is a random digit with probability 0.7 and a random operator
    otherwise, never two operators in a row and never at either end. Draws
    that divide by zero, pass through a negative running sum, or exceed the
    frame are redrawn.
    """
    if length < 1:
        raise ContractViolation("length must be >= 1")
    _check_base(base)
    failures: Counter = Counter()
    limit = base ** length
    for _ in range(max_retries):
        kinds = rng.random(length) < 0.7
        digit_draws = rng.integers(0, base, size=length)
        op_draws = rng.integers(0, 4, size=length)
        chars = []
        prev_op = True
        for i in range(length):
            use_digit = prev_op or i == length - 1 or bool(kinds[i])
            chars.append(DIGITS[digit_draws[i]] if use_digit else OPERATORS[op_draws[i]])
            prev_op = not use_digit
        expr = "".join(chars)
        try:
            terms, signs = additive_terms(expr, base)
        except ZeroDivisionError:
            failures["division by zero"] += 1
            continue
        sums = list(_prefix_sums(terms, signs))
        if min(sums) < 0:
            failures["negative intermediate value"] += 1
            continue
        if sums[-1] >= limit:
            failures["result exceeds output width"] += 1
            continue
        meta = {"task": "expression", "base": base, "length": length, "value": sums[-1]}
        return Example(expr, render(sums[-1], base, length), meta)
    worst = failures.most_common(1)[0][0] if failures else "unknown"
    raise ContractViolation(f"expression generator exhausted {max_retries} draws; most frequent failure: {worst}")


def gen_carry_case(base: int, total_digits: int, k: int, rng: np.random.Generator) -> Example:
    """Padded addition whose longest carry chain is exactly ``k``.

    Operand A ends in ``k`` copies of ``base - 1`` preceded by a digit below
    ``base - 1`` and a random prefix; operand B is 1.
    """
    _check_base(base)
    if k < 0 or k + 2 > total_digits:
        raise ContractViolation(f"carry length {k} infeasible in {total_digits} digits")
    prefix_len = total_digits - k - 1
    prefix = random_number(rng, base, prefix_len)
    stopper = int(rng.integers(0, base - 1))
    a = ((prefix * base + stopper) * base ** k) + (base ** k - 1)
    b = 1 if k > 0 else 0
    if k == 0:
        # B = 0 never carries; keep a nonzero operand when possible.
        b = int(rng.integers(0, base - stopper))
    ex = pair_example(a, b, "add", base, total_digits)
    ex.meta["carry"] = count_carries(a, b, base)
    return ex


def gen_structured_mul_suite(base: int, L: int) -> list[Example]:
    """Structured multiplications on ``L``-digit padded operands.

    Families: ``prepended_zeros`` (all single-digit pairs), ``power``
    (``b**i * b**(L-i)``), ``factor`` (pairs multiplying to ``b**L - 1``) and
    ``repunit`` (``1...1 * 1...1`` for run lengths 1..L). ``meta["product"]``
    holds the product rendered in a ``2L``-digit field.
    """
    _check_base(base)
    if L < 2:
        raise ContractViolation("L must be >= 2")
    cases: list[tuple[str, int, int, dict]] = []
    for d1 in range(base):
        for d2 in range(base):
            cases.append(("prepended_zeros", d1, d2, {}))
    for i in range(1, L):
        cases.append(("power", base ** i, base ** (L - i), {"exponent": i}))
    target = base ** L - 1
    if L % 2 == 0:
        half = base ** (L // 2)
        cases.append(("factor", half - 1, half + 1, {"identity": "(b^(L/2)-1)(b^(L/2)+1)"}))
    cases.append(("factor", target // (base - 1), base - 1, {"identity": "repunit*(b-1)"}))
    for run in range(1, L + 1):
        rep = (base ** run - 1) // (base - 1)
        cases.append(("repunit", rep, rep, {"run": run}))
    out = []
    for family, a, b, extra in cases:
        ex = pair_example(a, b, "mul", base, L)
        ex.meta.update({"family": family, "product": render(a * b, base, 2 * L), **extra})
        out.append(ex)
    return out


# -- oracle -----------------------------------------------------------------

def example_expression(ex: Example) -> str:
    """The arithmetic expression an example's input encodes."""
    if ex.second_row is not None:
        row0, row1 = ex.input.strip(PAD), ex.second_row.strip(PAD)
        if not row1 or row1[0] not in OPERATORS:
            raise ContractViolation("aligned second row must start with an operator")
        return row0 + row1
    return ex.input.rstrip(PAD)


def oracle_value(ex: Example) -> int:
    """Re-derive the exact value of an example from its input text alone."""
    return eval_expression(example_expression(ex), int(ex.meta["base"]))


def oracle_target(ex: Example) -> str:
    return render(oracle_value(ex), int(ex.meta["base"]), len(ex.input))


def verify_example(ex: Example) -> bool:
    """True when the target, input and recorded value all agree."""
    value = oracle_value(ex)
    if len(ex.target) != len(ex.input):
        return False
    if "value" in ex.meta and int(ex.meta["value"]) != value:
        return False
    return ex.target == render(value, int(ex.meta["base"]), len(ex.input))


def generate(spec: TaskSpec, count: int, rng: np.random.Generator | None = None) -> list[Example]:
    """``count`` examples for ``spec``; deterministic in ``spec.seed``."""
    from .curriculum import operand_count_sampler

    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    out = []
    for _ in range(count):
        if spec.task in ("add", "mul"):
            out.append(gen_pair(spec, rng))
        elif spec.task == "k_mul":
            sampler = operand_count_sampler if spec.length >= 3 else 1
            out.append(gen_k_mul(spec.length, spec.base, rng, sampler))
        else:
            out.append(gen_expression(spec.length, spec.base, rng))
    return out
