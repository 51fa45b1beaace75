from __future__ import annotations

import ast

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdzero import tasks
from sdzero.tasks import (
    ANSWER_MARKER,
    GoldAccessError,
    TaskInstance,
    TaskPool,
    brute_force_oracle,
    extract_answer,
    gen_instance,
    prompt_length_bound,
    read_instances,
    solution_length_bound,
    verify,
    write_instances,
)
from sdzero.vocab import vocab


def ast_expression_value(expr: str) -> tuple[int, list[int]]:
    """Independent expression evaluator used as an oracle for the parser."""
    node = ast.parse(expr, mode="eval").body
    literals: list[int] = []

    def walk(n) -> int:
        if isinstance(n, ast.Constant):
            literals.append(n.value)
            return n.value
        if isinstance(n, ast.BinOp):
            a, b = walk(n.left), walk(n.right)
            if isinstance(n.op, ast.Add):
                return a + b
            if isinstance(n.op, ast.Sub):
                return a - b
            if isinstance(n.op, ast.Mult):
                return a * b
        raise ValueError("unsupported node")

    return walk(node), literals


def test_countdown_hand_example():
    inst = TaskInstance(
        kind="countdown-lite",
        seed=0,
        prompt="make 20 from 2 3 4\n",
        answer="20",
        gold_solution="2 + 3 = 5\n5 * 4 = 20\n#### (2+3)*4",
    )
    assert verify(inst, "steps...\n#### (2+3)*4") == 1
    assert verify(inst, "#### (2*3)+4") == 0  # evaluates to 10
    assert verify(inst, "#### (2+3)*5") == 0  # wrong operand multiset
    assert verify(inst, "#### (2+3)*4*1") == 0  # extra operand
    assert verify(inst, "#### 20") == 0  # value alone is not an expression over operands
    assert verify(inst, "no marker at all") == 0
    assert verify(inst, "#### (2+3)*4", truncated=True) == 0
    solutions = brute_force_oracle(inst)
    assert "(2+3)*4" in solutions or "(3+2)*4" in solutions
    assert all(ast_expression_value(s)[0] == 20 for s in solutions)


def test_addition_hand_example():
    inst = gen_instance("scratchpad-addition", 1, seed=7)
    a, b = (int(w) for w in inst.prompt.split()[1:])
    assert inst.answer == str(a + b)
    assert verify(inst, f"#### {a + b}") == 1
    assert verify(inst, f"#### 0{a + b}") == 1  # canonical integer comparison
    assert verify(inst, f"####  {a + b} ") == 1
    assert verify(inst, f"#### {a + b + 1}") == 0
    assert brute_force_oracle(inst) == {str(a + b)}


def test_modular_hand_example():
    inst = gen_instance("modular-chain", 1, seed=3)
    assert verify(inst, f"worked...\n{ANSWER_MARKER}{inst.answer}") == 1
    assert brute_force_oracle(inst) == {inst.answer}
    # recompute the chain from the prompt by hand
    words = inst.prompt.split()
    v, m = int(words[1]), int(words[3])
    for w in words[4:]:
        if w == "then":
            continue
        op, arg = w[0], int(w[1:])
        v = (v + arg) % m if op == "+" else (v * arg) % m
    assert str(v) == inst.answer


def test_extract_answer_takes_last_marker():
    text = "#### 11\nWait...\n#### 42\n"
    assert extract_answer(text) == "42"
    assert extract_answer("nothing") is None
    assert extract_answer("#### ") == ""


def test_generation_deterministic_and_solvable():
    for kind in tasks.TASK_KINDS:
        for difficulty in (1, 2):
            a = gen_instance(kind, difficulty, seed=123)
            b = gen_instance(kind, difficulty, seed=123)
            assert a == b
            c = gen_instance(kind, difficulty, seed=124)
            assert c != a


def test_gold_solutions_always_verify():
    rng = np.random.default_rng(0)
    voc = vocab()
    for kind in tasks.TASK_KINDS:
        for difficulty in (1, 2, 3):
            for _ in range(60):
                seed = int(rng.integers(1 << 48))
                inst = gen_instance(kind, difficulty, seed)
                assert verify(inst, inst.gold_solution) == 1, (kind, seed)
                # prompts and solutions stay inside the model alphabet and bounds
                voc.encode(inst.prompt)
                voc.encode(inst.gold_solution)
                assert len(inst.prompt) <= prompt_length_bound(kind, difficulty)
                assert len(inst.gold_solution) <= solution_length_bound(kind, difficulty)


def test_gen_validation():
    with pytest.raises(ValueError):
        gen_instance("sudoku", 1, 0)
    with pytest.raises(ValueError):
        gen_instance("countdown-lite", 9, 0)


def test_expression_parser_against_ast():
    rng = np.random.default_rng(5)
    for _ in range(300):
        inst = gen_instance("countdown-lite", int(rng.integers(1, 3)), int(rng.integers(1 << 40)))
        span = extract_answer(inst.gold_solution)
        mine = tasks._parse_expression(span)
        theirs = ast_expression_value(span)
        assert mine[0] == theirs[0]
        assert mine[1] == theirs[1]


def test_expression_parser_rejects_malformed():
    for bad in ["", "2+", "(2+3", "2+3)", "2/3", "a+b", "2++3", "-2+3", "2 3"]:
        with pytest.raises(tasks.ExpressionError):
            tasks._parse_expression(bad)


@settings(max_examples=150, deadline=None)
@given(st.text(max_size=60))
def test_verify_is_total(text):
    inst = gen_instance("countdown-lite", 1, seed=99)
    assert verify(inst, text) in (0, 1)
    inst2 = gen_instance("modular-chain", 1, seed=99)
    assert verify(inst2, text) in (0, 1)


def test_verifier_matches_oracle_on_sample():
    # small-scale version of the acceptance sweep
    rng = np.random.default_rng(17)
    for kind in tasks.TASK_KINDS:
        for _ in range(100):
            inst = gen_instance(kind, 1, int(rng.integers(1 << 40)))
            answers = brute_force_oracle(inst)
            pick = sorted(answers)[0]
            assert verify(inst, f"{ANSWER_MARKER}{pick}") == 1
            assert verify(inst, f"{ANSWER_MARKER}junk") == 0


def test_pool_gold_guard():
    instances = [gen_instance("modular-chain", 1, s) for s in range(3)]
    open_pool = TaskPool("pretrain", instances, allow_gold=True)
    assert open_pool.gold_solution(0) == instances[0].gold_solution
    sealed = TaskPool("phase1", instances, allow_gold=False)
    with pytest.raises(GoldAccessError):
        sealed.gold_solution(0)


def test_instances_roundtrip_jsonl(tmp_path):
    instances = [gen_instance("countdown-lite", 2, s) for s in range(5)]
    path = tmp_path / "pool.jsonl"
    write_instances(path, instances)
    assert read_instances(path) == instances
    # file format: one json object per line with exactly the contract fields
    import json

    with open(path) as f:
        row = json.loads(f.readline())
    assert set(row) == {"kind", "seed", "prompt", "answer", "gold_solution"}
