"""Synthetic multi-step arithmetic chains in structured-expression form.

A task is a left-to-right chain over small integers. The question is the
bare expression ("12*3+9/5"), the gold reasoning steps resolve it one
operation at a time against a running accumulator ("<<12*3=36>>
<<36+9=45>><<45/5=9>>"), and the answer is the final value. Numbers are
encoded digit by digit so number tokens and operator tokens stay separate
vocabulary classes.

The step parser is more general than the generator: it accepts multi
operand steps like ``<<36+18+34=88>>`` (evaluated left to right) and the
bare restatement form ``<<88>>``; ``evaluate_chain`` is the exact-integer
ground-truth oracle for both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD, EOS, QSEP, ASEP, BLAT, ELAT = "<pad>", "<eos>", "<q>", "<a>", "<bl>", "<el>"

TOKENS: tuple[str, ...] = (
    PAD, EOS, QSEP, ASEP, BLAT, ELAT,
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "+", "-", "*", "/",
    "<<", ">>", "=", ",",
)

OPERATORS = ("+", "-", "*", "/")
DIGITS = tuple(str(i) for i in range(10))


@dataclass(frozen=True)
class VocabSpec:
    tokens: tuple[str, ...] = TOKENS

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.tokens.index(token)


VOCAB = VocabSpec()
_TOKEN_TO_ID = {t: i for i, t in enumerate(VOCAB.tokens)}
_BY_LENGTH = sorted(VOCAB.tokens, key=len, reverse=True)

PAD_ID = _TOKEN_TO_ID[PAD]
EOS_ID = _TOKEN_TO_ID[EOS]
QSEP_ID = _TOKEN_TO_ID[QSEP]
ASEP_ID = _TOKEN_TO_ID[ASEP]
BLAT_ID = _TOKEN_TO_ID[BLAT]
ELAT_ID = _TOKEN_TO_ID[ELAT]
DIGIT_IDS = tuple(_TOKEN_TO_ID[d] for d in DIGITS)
OPERATOR_IDS = tuple(_TOKEN_TO_ID[o] for o in OPERATORS)
STEP_END_ID = _TOKEN_TO_ID[">>"]


class TokenizationError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    """Greedy longest-match tokenization; unknown characters are an error."""
    ids = []
    i = 0
    while i < len(text):
        for tok in _BY_LENGTH:
            if text.startswith(tok, i):
                ids.append(_TOKEN_TO_ID[tok])
                i += len(tok)
                break
        else:
            raise TokenizationError(f"untokenizable input at {i}: {text[i:i+8]!r}")
    return ids


def detokenize(ids) -> str:
    try:
        return "".join(VOCAB.tokens[i] for i in ids)
    except IndexError as exc:
        raise TokenizationError(f"token id out of range: {exc}") from exc


# ---------------------------------------------------------------------------
# step parsing and exact evaluation


class StepParseError(ValueError):
    pass


class StepMismatchError(ValueError):
    """A step's stated result disagrees with exact evaluation."""

    def __init__(self, index: int, expected: int, stated: int):
        super().__init__(f"step {index}: computed {expected} but step states {stated}")
        self.index = index
        self.expected = expected
        self.stated = stated


@dataclass(frozen=True)
class Step:
    operands: tuple[int, ...]
    operators: tuple[str, ...]  # len(operands) - 1; empty for restatements
    result: int

    def render(self) -> str:
        expr = str(self.operands[0])
        for op, val in zip(self.operators, self.operands[1:]):
            expr += f"{op}{val}"
        if self.operators:
            return f"<<{expr}={self.result}>>"
        return f"<<{self.result}>>"


def _parse_int(text: str, where: str) -> int:
    neg = text.startswith("-")
    body = text[1:] if neg else text
    if not body or not all(c in DIGITS for c in body):
        raise StepParseError(f"malformed number {text!r} in {where}")
    return -int(body) if neg else int(body)


def parse_step(text: str) -> Step:
    if not (text.startswith("<<") and text.endswith(">>")):
        raise StepParseError(f"step must be <<...>>: {text!r}")
    inner = text[2:-2]
    if "=" in inner:
        expr, _, stated = inner.partition("=")
    else:
        expr, stated = inner, inner  # restatement: <<value>>
    result = _parse_int(stated, text)
    operands: list[int] = []
    operators: list[str] = []
    num = ""
    for i, c in enumerate(expr):
        if c in DIGITS or (c == "-" and not num and (i == 0 or expr[i - 1] in OPERATORS) and not operands):
            num += c
        elif c in OPERATORS:
            if not num:
                raise StepParseError(f"operator without operand in {text!r}")
            operands.append(_parse_int(num, text))
            operators.append(c)
            num = ""
        else:
            raise StepParseError(f"unexpected character {c!r} in {text!r}")
    if not num:
        raise StepParseError(f"dangling operator in {text!r}")
    operands.append(_parse_int(num, text))
    if "=" not in inner:
        return Step((result,), (), result)
    return Step(tuple(operands), tuple(operators), result)


def parse_steps(text: str) -> list[Step]:
    """Split a ``<<..>><<..>>`` chain and parse every step."""
    if not text:
        return []
    parts = []
    rest = text
    while rest:
        if not rest.startswith("<<"):
            raise StepParseError(f"expected '<<' at {rest[:8]!r}")
        end = rest.find(">>")
        if end < 0:
            raise StepParseError("unterminated step")
        parts.append(rest[: end + 2])
        rest = rest[end + 2 :]
    return [parse_step(p) for p in parts]


def render_steps(steps: list[Step]) -> str:
    return "".join(s.render() for s in steps)


def _apply(acc: int, op: str, val: int) -> int:
    if op == "+":
        return acc + val
    if op == "-":
        return acc - val
    if op == "*":
        return acc * val
    if op == "/":
        if val == 0:
            raise ZeroDivisionError("step divides by zero")
        if acc % val != 0:
            raise StepParseError(f"non-exact division {acc}/{val}")
        return acc // val
    raise StepParseError(f"unknown operator {op!r}")


def evaluate_step(step: Step) -> int:
    """Left-to-right exact integer evaluation of one step's expression."""
    acc = step.operands[0]
    for op, val in zip(step.operators, step.operands[1:]):
        acc = _apply(acc, op, val)
    return acc


def evaluate_chain(steps: list[Step]) -> int:
    """Ground-truth oracle: evaluate every step, flag stated-result mismatches.

    Returns the final step's value; raises ``StepMismatchError`` on the
    first step whose stated result disagrees with exact evaluation.
    """
    if not steps:
        raise ValueError("evaluate_chain on an empty step list")
    value = None
    for i, step in enumerate(steps):
        computed = evaluate_step(step)
        if computed != step.result:
            raise StepMismatchError(i, computed, step.result)
        value = computed
    return value


# ---------------------------------------------------------------------------
# generation


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenSpec:
    min_steps: int = 2
    max_steps: int = 4
    min_operand: int = 1
    max_operand: int = 20
    operators: tuple[str, ...] = OPERATORS
    result_cap: int = 99  # running value stays in [0, result_cap]
    seed: int = 0

    def __post_init__(self):
        if self.min_steps < 1 or self.max_steps < self.min_steps:
            raise ValueError("empty step range")
        if self.min_operand < 0 or self.max_operand < self.min_operand:
            raise ValueError("empty operand range")
        bad = set(self.operators) - set(OPERATORS)
        if bad or not self.operators:
            raise ValueError(f"invalid operator set: {self.operators}")


@dataclass
class ReasoningSample:
    question_text: str
    steps_text: str
    answer_text: str
    question_tokens: list[int] = field(default_factory=list)
    step_tokens: list[list[int]] = field(default_factory=list)
    answer_tokens: list[int] = field(default_factory=list)
    answer_value: int = 0

    @staticmethod
    def from_texts(question: str, steps: str, answer: str) -> "ReasoningSample":
        parsed = parse_steps(steps)
        value = evaluate_chain(parsed)
        if str(value) != answer:
            raise StepMismatchError(len(parsed) - 1, value, _parse_int(answer, answer))
        return ReasoningSample(
            question_text=question,
            steps_text=steps,
            answer_text=answer,
            question_tokens=tokenize(question),
            step_tokens=[tokenize(s.render()) for s in parsed],
            answer_tokens=tokenize(answer),
            answer_value=value,
        )

    @property
    def n_steps(self) -> int:
        return len(self.step_tokens)


def _feasible_moves(acc: int, spec: GenSpec, rng: np.random.Generator):
    lo, hi = spec.min_operand, spec.max_operand
    moves = []
    for op in spec.operators:
        if op == "+":
            top = min(hi, spec.result_cap - acc)
            if top >= lo:
                moves.append((op, lo, top))
        elif op == "-":
            top = min(hi, acc)
            if top >= lo:
                moves.append((op, lo, top))
        elif op == "*":
            top = hi if acc == 0 else min(hi, spec.result_cap // max(acc, 1))
            if acc <= spec.result_cap and top >= lo:
                moves.append((op, lo, top))
        elif op == "/":
            divisors = [v for v in range(max(lo, 1), hi + 1) if acc % v == 0]
            if divisors:
                moves.append((op, divisors, None))
    return moves


def _random_chain(spec: GenSpec, rng: np.random.Generator, n_steps: int):
    lo, hi = spec.min_operand, spec.max_operand
    start = int(rng.integers(lo, min(hi, spec.result_cap) + 1))
    acc = start
    ops: list[str] = []
    vals: list[int] = []
    for _ in range(n_steps):
        moves = _feasible_moves(acc, spec, rng)
        if not moves:
            return None
        op, a, b = moves[int(rng.integers(len(moves)))]
        if op == "/":
            val = int(a[int(rng.integers(len(a)))])
        else:
            val = int(rng.integers(a, b + 1))
        ops.append(op)
        vals.append(val)
        acc = _apply(acc, op, val)
    return start, ops, vals


def _render_chain(start: int, ops: list[str], vals: list[int]):
    question = str(start) + "".join(f"{o}{v}" for o, v in zip(ops, vals))
    steps: list[Step] = []
    acc = start
    for o, v in zip(ops, vals):
        nxt = _apply(acc, o, v)
        steps.append(Step((acc, v), (o,), nxt))
        acc = nxt
    return question, render_steps(steps), str(acc)


def generate(
    spec: GenSpec,
    count: int,
    exclude: set[str] | None = None,
    max_retries_per_sample: int = 200,
) -> list[ReasoningSample]:
    """Deterministic (per spec.seed) sample generation.

    ``exclude`` rejects questions already present elsewhere (keeps held-out
    splits genuinely unseen). Step counts are drawn uniformly over the
    configured range; infeasible specs fail after bounded retries.
    """
    rng = np.random.default_rng(spec.seed)
    exclude = exclude or set()
    samples: list[ReasoningSample] = []
    for _ in range(count):
        for attempt in range(max_retries_per_sample):
            n_steps = int(rng.integers(spec.min_steps, spec.max_steps + 1))
            chain = _random_chain(spec, rng, n_steps)
            if chain is None:
                continue
            question, steps, answer = _render_chain(*chain)
            if question in exclude:
                continue
            samples.append(ReasoningSample.from_texts(question, steps, answer))
            break
        else:
            raise GenerationError(
                f"could not generate a feasible sample after {max_retries_per_sample} tries"
            )
    return samples


# ---------------------------------------------------------------------------
# dataset files: one sample per line, three tab-separated fields


def save_dataset(path, samples: list[ReasoningSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(f"{s.question_text}\t{s.steps_text}\t{s.answer_text}\n")


def load_dataset(path) -> list[ReasoningSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 3 tab-separated fields")
            samples.append(ReasoningSample.from_texts(*parts))
    return samples
