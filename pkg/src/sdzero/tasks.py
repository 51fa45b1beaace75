"""Synthetic verifiable tasks: generation, gold solutions, verification, oracles.

Three task kinds, all with single-token-exact answers and binary rewards:

  countdown-lite        build an arithmetic expression over given operands
                        (each used exactly once, ops + - *) hitting a target
  scratchpad-addition   column addition with carry scratchpad
  modular-chain         iterated (op, operand) steps reduced by a modulus

Every generated instance is solvable by construction, and `verify` grades any
response text by extracting the span after the LAST answer marker. For the
expression task the extracted span is an expression, accepted iff it
evaluates to the target and uses the operand multiset exactly; for the other
kinds it is compared to the stored answer as a canonical integer.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

ANSWER_MARKER = "#### "
TASK_KINDS = ("countdown-lite", "scratchpad-addition", "modular-chain")
DIFFICULTIES = (1, 2, 3)
_GEN_RETRIES = 500


class GoldAccessError(PermissionError):
    """Gold solution read attempted from a pool that forbids it."""


class TaskGenerationError(RuntimeError):
    """Could not produce a valid instance within the retry budget."""


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    seed: int
    prompt: str
    answer: str
    gold_solution: str

    @property
    def uid(self) -> str:
        return f"{self.kind}:{self.seed:016x}"


@dataclass
class TaskPool:
    """A named set of instances with a gold-access switch.

    Method-mode runs load their training pools with `allow_gold=False`;
    reading a gold solution through such a pool is a hard error, which keeps
    supervised-label leakage structurally impossible rather than merely
    discouraged.
    """

    name: str
    instances: list[TaskInstance]
    allow_gold: bool = True

    def __len__(self) -> int:
        return len(self.instances)

    def gold_solution(self, index: int) -> str:
        if not self.allow_gold:
            raise GoldAccessError(
                f"pool {self.name!r} forbids gold-solution access in this mode"
            )
        return self.instances[index].gold_solution


# ---- expression helpers (countdown-lite) ----


class ExpressionError(ValueError):
    pass


def _tokenize_expression(text: str) -> list:
    """Split into int literals and the symbols + - * ( ). Whitespace separates
    tokens; adjacent digit runs never merge across it."""
    tokens: list = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "+-*()":
            tokens.append(ch)
            i += 1
            continue
        if ch.isdigit():
            start = i
            while i < len(text) and text[i].isdigit():
                i += 1
            tokens.append(int(text[start:i]))
            continue
        raise ExpressionError(f"unexpected character {ch!r}")
    return tokens


def _parse_expression(text: str) -> tuple[int, list[int]]:
    """Parse + - * over non-negative int literals with parentheses.

    Returns (value, literals in reading order).
    """
    tokens = _tokenize_expression(text)
    if not tokens:
        raise ExpressionError("empty expression")
    pos = 0
    literals: list[int] = []

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def atom() -> int:
        nonlocal pos
        tok = peek()
        if tok == "(":
            pos += 1
            value = expr()
            if peek() != ")":
                raise ExpressionError("unbalanced parenthesis")
            pos += 1
            return value
        if not isinstance(tok, int):
            raise ExpressionError(f"unexpected token {tok!r}")
        pos += 1
        literals.append(tok)
        return tok

    def term() -> int:
        nonlocal pos
        value = atom()
        while peek() == "*":
            pos += 1
            value *= atom()
        return value

    def expr() -> int:
        nonlocal pos
        value = term()
        while peek() in ("+", "-"):
            op = peek()
            pos += 1
            rhs = term()
            value = value + rhs if op == "+" else value - rhs
        return value

    result = expr()
    if pos != len(tokens):
        raise ExpressionError(f"trailing tokens {tokens[pos:]!r}")
    return result, literals


class _Node:
    __slots__ = ("op", "left", "right", "value")

    def __init__(self, op, left=None, right=None, value=None):
        self.op = op
        self.left = left
        self.right = right
        if op is None:
            self.value = value
        else:
            a, b = left.value, right.value
            self.value = a + b if op == "+" else a - b if op == "-" else a * b

    def render(self, top: bool = False) -> str:
        if self.op is None:
            return str(self.value)
        inner = f"{self.left.render()}{self.op}{self.right.render()}"
        return inner if top else f"({inner})"

    def steps(self) -> list[str]:
        """One line per binary reduction, in evaluation (post) order."""
        if self.op is None:
            return []
        lines = self.left.steps() + self.right.steps()
        lines.append(f"{self.left.value} {self.op} {self.right.value} = {self.value}")
        return lines


_COUNTDOWN_LEVELS = {
    1: dict(n_operands=(3,), lo=1, hi=9, target_max=99),
    2: dict(n_operands=(3, 4), lo=1, hi=9, target_max=200),
    3: dict(n_operands=(4,), lo=1, hi=13, target_max=399),
}


def _gen_countdown(rng: np.random.Generator, difficulty: int, seed: int) -> TaskInstance:
    level = _COUNTDOWN_LEVELS[difficulty]
    for _ in range(_GEN_RETRIES):
        n = int(rng.choice(level["n_operands"]))
        operands = [int(rng.integers(level["lo"], level["hi"] + 1)) for _ in range(n)]
        nodes = [_Node(None, value=v) for v in operands]
        while len(nodes) > 1:
            i = int(rng.integers(len(nodes)))
            left = nodes.pop(i)
            j = int(rng.integers(len(nodes)))
            right = nodes.pop(j)
            op = "+-*"[int(rng.integers(3))]
            nodes.append(_Node(op, left, right))
        tree = nodes[0]
        target = tree.value
        if not 1 <= target <= level["target_max"]:
            continue
        prompt = f"make {target} from {' '.join(str(v) for v in operands)}\n"
        gold = "\n".join(tree.steps() + [f"{ANSWER_MARKER}{tree.render(top=True)}"])
        return TaskInstance(
            kind="countdown-lite", seed=seed, prompt=prompt, answer=str(target), gold_solution=gold
        )
    raise TaskGenerationError(f"countdown-lite generation failed for seed {seed}")


def _countdown_params(prompt: str) -> tuple[int, list[int]]:
    # prompt shape: "make <target> from <a> <b> ...\n"
    words = prompt.split()
    if len(words) < 4 or words[0] != "make" or words[2] != "from":
        raise ValueError(f"malformed countdown prompt {prompt!r}")
    return int(words[1]), [int(w) for w in words[3:]]


def _verify_countdown(instance: TaskInstance, span: str) -> int:
    target, operands = _countdown_params(instance.prompt)
    try:
        value, literals = _parse_expression(span)
    except ExpressionError:
        return 0
    return int(value == target and Counter(literals) == Counter(operands))


def _oracle_countdown(instance: TaskInstance) -> set[str]:
    """Complete enumeration of accepted expression strings.

    Reduces the operand list pairwise in every order with every operator,
    which covers all binary trees over all operand permutations.
    """
    target, operands = _countdown_params(instance.prompt)
    found: set[str] = set()

    def reduce(items: list[_Node]) -> None:
        if len(items) == 1:
            if items[0].value == target:
                found.add(items[0].render(top=True))
            return
        for i in range(len(items)):
            for j in range(len(items)):
                if i == j:
                    continue
                rest = [items[k] for k in range(len(items)) if k not in (i, j)]
                for op in "+-*":
                    reduce(rest + [_Node(op, items[i], items[j])])

    reduce([_Node(None, value=v) for v in operands])
    return found


# ---- scratchpad addition ----

_ADDITION_LEVELS = {
    1: dict(lo=10, hi=99),
    2: dict(lo=10, hi=999),
    3: dict(lo=100, hi=9999),
}


def _gen_addition(rng: np.random.Generator, difficulty: int, seed: int) -> TaskInstance:
    level = _ADDITION_LEVELS[difficulty]
    a = int(rng.integers(level["lo"], level["hi"] + 1))
    b = int(rng.integers(level["lo"], level["hi"] + 1))
    width = max(len(str(a)), len(str(b)))
    da = str(a).zfill(width)
    db = str(b).zfill(width)
    lines = []
    carry = 0
    for col in range(width - 1, -1, -1):
        s = int(da[col]) + int(db[col]) + carry
        lines.append(
            f"{da[col]} + {db[col]} + {carry} = {s} write {s % 10} carry {s // 10}"
        )
        carry = s // 10
    lines.append(f"{ANSWER_MARKER}{a + b}")
    return TaskInstance(
        kind="scratchpad-addition",
        seed=seed,
        prompt=f"add {a} {b}\n",
        answer=str(a + b),
        gold_solution="\n".join(lines),
    )


def _addition_params(prompt: str) -> tuple[int, int]:
    words = prompt.split()
    if len(words) != 3 or words[0] != "add":
        raise ValueError(f"malformed addition prompt {prompt!r}")
    return int(words[1]), int(words[2])


# ---- modular chain ----

_MODULAR_LEVELS = {
    1: dict(length=2, mod_lo=5, mod_hi=9),
    2: dict(length=3, mod_lo=5, mod_hi=12),
    3: dict(length=4, mod_lo=7, mod_hi=19),
}


def _gen_modular(rng: np.random.Generator, difficulty: int, seed: int) -> TaskInstance:
    level = _MODULAR_LEVELS[difficulty]
    m = int(rng.integers(level["mod_lo"], level["mod_hi"] + 1))
    v = int(rng.integers(0, m))
    steps = []
    for _ in range(level["length"]):
        op = "+*"[int(rng.integers(2))]
        arg = int(rng.integers(1, 10)) if op == "+" else int(rng.integers(2, 10))
        steps.append((op, arg))
    prompt = f"start {v} mod {m} then {' then '.join(f'{op}{arg}' for op, arg in steps)}\n"
    lines = []
    for op, arg in steps:
        nxt = (v + arg) % m if op == "+" else (v * arg) % m
        lines.append(f"{v} {op} {arg} mod {m} = {nxt}")
        v = nxt
    lines.append(f"{ANSWER_MARKER}{v}")
    return TaskInstance(
        kind="modular-chain",
        seed=seed,
        prompt=prompt,
        answer=str(v),
        gold_solution="\n".join(lines),
    )


def _modular_params(prompt: str) -> tuple[int, int, list[tuple[str, int]]]:
    words = prompt.split()
    if len(words) < 6 or words[0] != "start" or words[2] != "mod":
        raise ValueError(f"malformed modular prompt {prompt!r}")
    v0, m = int(words[1]), int(words[3])
    steps = []
    for w in words[4:]:
        if w == "then":
            continue
        steps.append((w[0], int(w[1:])))
    return v0, m, steps


# ---- public surface ----


def gen_instance(kind: str, difficulty: int, seed: int) -> TaskInstance:
    """Deterministic in (kind, difficulty, seed); always solvable."""
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = np.random.default_rng(np.uint64(seed))
    if kind == "countdown-lite":
        return _gen_countdown(rng, difficulty, seed)
    if kind == "scratchpad-addition":
        return _gen_addition(rng, difficulty, seed)
    return _gen_modular(rng, difficulty, seed)


def extract_answer(text: str) -> str | None:
    """Span after the LAST answer marker, up to end of line. None if absent."""
    idx = text.rfind(ANSWER_MARKER)
    if idx < 0:
        return None
    span = text[idx + len(ANSWER_MARKER) :]
    newline = span.find("\n")
    if newline >= 0:
        span = span[:newline]
    return span.strip()


def _canonical_int(span: str) -> int | None:
    s = span.strip().replace(" ", "")
    if not s:
        return None
    body = s[1:] if s[0] == "-" else s
    if not body.isdigit():
        return None
    return int(s)


def verify(instance: TaskInstance, response_text: str, truncated: bool = False) -> int:
    """Binary reward. Total: any text maps to 0 or 1, never an exception."""
    if truncated:
        return 0
    span = extract_answer(response_text)
    if span is None:
        return 0
    if instance.kind == "countdown-lite":
        return _verify_countdown(instance, span)
    value = _canonical_int(span)
    if value is None:
        return 0
    return int(value == int(instance.answer))


def brute_force_oracle(instance: TaskInstance) -> set[str]:
    """The complete set of accepted answer spans (canonical forms)."""
    if instance.kind == "countdown-lite":
        return _oracle_countdown(instance)
    if instance.kind == "scratchpad-addition":
        a, b = _addition_params(instance.prompt)
        return {str(a + b)}
    v, m, steps = _modular_params(instance.prompt)
    for op, arg in steps:
        v = (v + arg) % m if op == "+" else (v * arg) % m
    return {str(v)}


def prompt_length_bound(kind: str, difficulty: int) -> int:
    """Safe upper bound on prompt length in characters/tokens."""
    if kind == "countdown-lite":
        level = _COUNTDOWN_LEVELS[difficulty]
        n = max(level["n_operands"])
        return len("make  from \n") + len(str(level["target_max"])) + n * (
            len(str(level["hi"])) + 1
        )
    if kind == "scratchpad-addition":
        w = len(str(_ADDITION_LEVELS[difficulty]["hi"]))
        return len("add  \n") + 2 * w + 1
    level = _MODULAR_LEVELS[difficulty]
    return len("start  mod \n") + 4 + level["length"] * len(" then *9") + 4


def solution_length_bound(kind: str, difficulty: int) -> int:
    """Safe upper bound on gold-solution length (guides generation budgets)."""
    if kind == "countdown-lite":
        level = _COUNTDOWN_LEVELS[difficulty]
        n = max(level["n_operands"])
        step = len("-999 * -999 = 9999") + 1
        expr = n * 6 + 8
        return (n - 1) * step + len(ANSWER_MARKER) + expr
    if kind == "scratchpad-addition":
        w = len(str(_ADDITION_LEVELS[difficulty]["hi"])) + 1
        return w * (len("9 + 9 + 1 = 19 write 9 carry 1") + 1) + len(ANSWER_MARKER) + w + 1
    level = _MODULAR_LEVELS[difficulty]
    return level["length"] * (len("99 * 9 mod 99 = 99") + 1) + len(ANSWER_MARKER) + 3


def write_instances(path, instances: list[TaskInstance]) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(asdict(inst), sort_keys=True) + "\n")


def read_instances(path) -> list[TaskInstance]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(TaskInstance(**json.loads(line)))
    return out
