import math
from importlib import resources

import numpy as np
import pytest

from helpers import fresh_checkpoint, scripted_checkpoint
from sdzero.decoding import SamplerConfig
from sdzero.distill import TokenKLRecord
from sdzero.evalkit import (
    bucketize_kl,
    correction_rate,
    count_keywords,
    evaluate,
    generate_then_revise,
    gini,
    instance_set_id,
    kl_gini_by_reward,
    length_and_keyword_curve,
    revision_keywords,
    write_bucket_csv,
    write_curve_csv,
    write_eval_csv,
    write_revise_csv,
)
from sdzero.revision import control_prompt_tokens
from sdzero.tasks import TaskInstance, TaskPool
from sdzero.vocab import vocab

VOC = vocab()

# the verbatim phrase list; the data file must match byte for byte
EXPECTED_KEYWORDS = (
    "wait",
    "hold on",
    "actually",
    "on second thought",
    "let me recheck",
    "let's recheck",
    "let me check",
    "let's check",
    "let me recalculate",
    "let's recalculate",
    "let me correct",
    "my mistake",
    "i made a mistake",
    "this is wrong",
    "that is wrong",
    "that's wrong",
    "incorrect",
    "re-evaluate",
    "let's re-evaluate",
    "let me rethink",
    "let's rethink",
    "let me double check",
    "let's double check",
    "wait a minute",
    "let me start over",
    "let me try again",
    "oops",
)


def addition_instance(a=2, b=3, seed=1):
    return TaskInstance(
        kind="scratchpad-addition",
        seed=seed,
        prompt=f"add {a} {b}\n",
        answer=str(a + b),
        gold_solution=f"#### {a + b}",
    )


def answer_tape(prompt: str, answer_text: str, context: int):
    tape = [VOC.pad] * context
    pos = len(prompt) - 1
    for i, tok in enumerate(VOC.encode(answer_text) + [VOC.eos]):
        tape[pos + i] = tok
    return tape


def revise_tape(prompt: str, initial: str, revised: str, reward_initial: int, context: int):
    """Greedy script: emit `initial`+EOS after the prompt, then `revised`+EOS
    after the revision context that `initial` will produce."""
    tape = answer_tape(prompt, initial, context)
    ctx_len = len(prompt) + len(initial) + 1 + len(control_prompt_tokens(reward_initial)) + 1
    for i, tok in enumerate(VOC.encode(revised) + [VOC.eos]):
        tape[ctx_len - 1 + i] = tok
    return tape


def test_keyword_file_is_byte_identical_to_listing():
    raw = resources.files("sdzero").joinpath("data/revision_keywords.txt").read_bytes()
    assert raw == ("\n".join(EXPECTED_KEYWORDS) + "\n").encode()
    assert revision_keywords() == EXPECTED_KEYWORDS
    assert len(revision_keywords()) == 27


def test_count_keywords_reference_cases():
    assert count_keywords("Wait, this is wrong. Let me start over.") == 3
    assert count_keywords("") == 0
    assert count_keywords("INCORRECT") == 1
    # overlapping phrases both count
    assert count_keywords("Wait a minute") == 2  # "wait" + "wait a minute"
    assert count_keywords("let's re-evaluate") == 2  # plus bare "re-evaluate"
    assert count_keywords("wait wait") == 2
    assert count_keywords("no signal here") == 0


def test_correction_rate_golden_pairs():
    golden = [
        (59.6, 60.7, 2.7),
        (65.2, 66.9, 4.9),
        (63.3, 64.7, 3.8),
        (66.7, 71.7, 15.0),
        (68.3, 73.6, 16.7),
    ]
    for first, revised, expected in golden:
        assert abs(correction_rate(first, revised) - expected) < 0.05
    assert correction_rate(42.0, 42.0) == 0.0
    assert correction_rate(100.0, 100.0) == 0.0
    with pytest.raises(ValueError):
        correction_rate(-1.0, 50.0)
    with pytest.raises(ValueError):
        correction_rate(50.0, 101.0)


def test_evaluate_scripted_perfect_model():
    inst = addition_instance()
    ckpt = scripted_checkpoint(answer_tape(inst.prompt, "#### 5", 24), context=24)
    pool = TaskPool("probe", [inst], allow_gold=False)
    report, ledger = evaluate(ckpt, pool, k=2, sampler=SamplerConfig(0.0, 10), run_seed=4)
    assert report.k == 2
    assert report.avg_at_k == 1.0
    assert report.pass_at_k == 1.0
    assert report.mean_response_tokens == 7.0  # "#### 5" + EOS
    assert report.outcomes[0]["instance_id"] == inst.uid
    assert report.outcomes[0]["rewards"] == [1, 1]
    assert ledger.eval_rollouts == 2
    assert report.instance_set_id == instance_set_id(pool)
    assert report.instance_set_id.startswith("probe:1:")


def test_evaluate_invariants_and_determinism():
    pool = TaskPool(
        "probe", [addition_instance(seed=1), addition_instance(3, 4, seed=2)], allow_gold=False
    )
    ckpt = fresh_checkpoint(context=64, dim=16, heads=2, layers=1, seed=0)
    r1, ledger = evaluate(ckpt, pool, k=3, sampler=SamplerConfig(0.7, 8), run_seed=9)
    assert 0.0 <= r1.avg_at_k <= r1.pass_at_k <= 1.0
    assert ledger.eval_rollouts == 6
    r2, _ = evaluate(ckpt, pool, k=3, sampler=SamplerConfig(0.7, 8), run_seed=9)
    assert r1 == r2
    # replicate seeds nest, so pass@k cannot drop as k grows
    smaller, _ = evaluate(ckpt, pool, k=1, sampler=SamplerConfig(0.7, 8), run_seed=9)
    assert smaller.pass_at_k <= r1.pass_at_k
    with pytest.raises(ValueError):
        evaluate(ckpt, pool, k=0, sampler=SamplerConfig(0.7, 8), run_seed=9)
    with pytest.raises(ValueError):
        evaluate(ckpt, TaskPool("empty", [], allow_gold=False), 1, SamplerConfig(0.7, 8), 9)


def test_generate_then_revise_start_over_fix():
    inst = addition_instance()  # answer 5
    ckpt = scripted_checkpoint(revise_tape(inst.prompt, "#### 4", "#### 5", 0, 96), context=96)
    pool = TaskPool("probe", [inst], allow_gold=False)
    report, ledger = generate_then_revise(ckpt, pool, SamplerConfig(0.0, 12), run_seed=3)
    assert report.first_accuracy == 0.0
    assert report.revised_accuracy == 100.0
    assert report.correction_rate == 100.0
    assert report.mean_first_tokens == 7.0
    assert report.mean_revised_tokens == 7.0
    assert ledger.initial_samples == 1
    assert ledger.revision_attempts == 1


def test_generate_then_revise_rephrase_keeps_correct():
    inst = addition_instance()
    ckpt = scripted_checkpoint(revise_tape(inst.prompt, "#### 5", "#### 5", 1, 96), context=96)
    pool = TaskPool("probe", [inst], allow_gold=False)
    report, _ = generate_then_revise(ckpt, pool, SamplerConfig(0.0, 12), run_seed=3)
    assert report.first_accuracy == 100.0
    assert report.revised_accuracy == 100.0
    assert report.correction_rate == 0.0


def test_generate_then_revise_overflow_keeps_first_answer():
    inst = addition_instance()
    # 24-token window: the first attempt fits, the revision context cannot
    ckpt = scripted_checkpoint(answer_tape(inst.prompt, "#### 4", 24), context=24)
    pool = TaskPool("probe", [inst], allow_gold=False)
    report, ledger = generate_then_revise(ckpt, pool, SamplerConfig(0.0, 10), run_seed=3)
    assert report.first_accuracy == 0.0
    assert report.revised_accuracy == 0.0
    assert ledger.revision_attempts == 0
    assert ledger.overflow_skips == 1


def _recs(kls, reward=0, instance="i:1", step=0):
    return [
        TokenKLRecord(instance, step, t + 1, float(k), 0.0, reward)
        for t, k in enumerate(kls)
    ]


def test_bucketize_constant_and_even_split():
    flat = bucketize_kl(_recs([3.0] * 40))
    assert flat[0] == [3.0] * 20
    ramp = bucketize_kl(_recs(list(range(40))))
    assert ramp[0] == [2 * j + 0.5 for j in range(20)]


def test_bucketize_is_permutation_invariant_and_sorts_by_kl():
    values = [5.0, 1.0, 4.0, 2.0, 3.0] * 8  # 40 tokens
    a = bucketize_kl(_recs(values))
    b = bucketize_kl(list(reversed(_recs(values))))
    assert a == b
    assert a[0] == sorted(a[0])  # bucket means ascend with the sort


def test_bucketize_short_sequence_round_robin():
    out = bucketize_kl(_recs([5.0, 1.0, 4.0, 2.0, 3.0]))
    assert out[0][:5] == [1.0, 2.0, 3.0, 4.0, 5.0]
    assert all(math.isnan(v) for v in out[0][5:])


def test_bucketize_groups_by_reward_class():
    records = _recs([1.0] * 20, reward=0, instance="a") + _recs(
        [2.0] * 20, reward=1, instance="b"
    )
    out = bucketize_kl(records)
    assert out[0] == [1.0] * 20
    assert out[1] == [2.0] * 20
    with pytest.raises(ValueError):
        bucketize_kl([])


def test_gini_reference_values():
    assert gini([1.0, 1.0, 1.0, 1.0]) == 0.0
    assert abs(gini([1.0, 0.0, 0.0, 0.0]) - 0.75) < 1e-12
    assert abs(gini([0.0, 1.0]) - 0.5) < 1e-12
    assert gini([0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        gini([])
    with pytest.raises(ValueError):
        gini([-1.0, 2.0])


def test_kl_gini_by_reward_separates_concentration():
    concentrated = _recs([0.0] * 19 + [10.0], reward=0, instance="a")
    uniform = _recs([0.5] * 20, reward=1, instance="b")
    out = kl_gini_by_reward(concentrated + uniform)
    assert out[0] > out[1]
    assert out[1] == 0.0


def test_length_and_keyword_curve():
    inst = addition_instance()
    pool = TaskPool("probe", [inst], allow_gold=False)
    quiet = scripted_checkpoint(answer_tape(inst.prompt, "#### 5", 24), context=24)
    chatty = scripted_checkpoint(answer_tape(inst.prompt, "wait wait", 24), context=24)
    rows = length_and_keyword_curve(
        [("base", quiet), ("srt", chatty)], pool, SamplerConfig(0.0, 12), run_seed=2
    )
    assert [r["label"] for r in rows] == ["base", "srt"]
    assert rows[0]["mean_keywords"] == 0.0
    assert rows[1]["mean_keywords"] == 2.0
    assert rows[0]["mean_tokens"] == 7.0
    assert rows[1]["mean_tokens"] == 10.0  # "wait wait" + EOS
    with pytest.raises(ValueError):
        length_and_keyword_curve(
            [("base", quiet)], TaskPool("empty", [], allow_gold=False), SamplerConfig(0.0, 4), 2
        )


def test_report_csv_writers(tmp_path):
    inst = addition_instance()
    pool = TaskPool("probe", [inst], allow_gold=False)
    ckpt = scripted_checkpoint(answer_tape(inst.prompt, "#### 5", 24), context=24)
    report, _ = evaluate(ckpt, pool, 1, SamplerConfig(0.0, 10), 4)
    eval_path = tmp_path / "eval.csv"
    write_eval_csv(eval_path, report)
    lines = eval_path.read_text().strip().split("\n")
    assert lines[0] == "checkpoint_id,instance_set_id,k,avg_at_k,pass_at_k,mean_response_tokens"
    assert lines[1].endswith("1,1.0,1.0,7.0")

    revise, _ = generate_then_revise(ckpt, pool, SamplerConfig(0.0, 10), 4)
    revise_path = tmp_path / "revise.csv"
    write_revise_csv(revise_path, revise)
    head = revise_path.read_text().split("\n")[0]
    assert head == "first_accuracy,revised_accuracy,correction_rate,mean_first_tokens,mean_revised_tokens"

    bucket_path = tmp_path / "buckets.csv"
    write_bucket_csv(bucket_path, {0: [1.0] * 20, 1: [2.0] * 20})
    rows = bucket_path.read_text().strip().split("\n")
    assert rows[0] == "bucket,mean_kl,reward_class"
    assert len(rows) == 41
    assert rows[1] == "0,1.0,0"
    assert rows[-1] == "19,2.0,1"

    curve_path = tmp_path / "curve.csv"
    write_curve_csv(curve_path, [{"label": "base", "mean_tokens": 7.0, "mean_keywords": 0.0}])
    assert curve_path.read_text().startswith("label,mean_tokens,mean_keywords")
