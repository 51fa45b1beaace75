import numpy as np
import pytest

from helpers import fresh_checkpoint, scripted_checkpoint, tolerance_for
from sdzero import autodiff as ad
from sdzero.autodiff import NumericOverflowError, Tensor, gradient_check
from sdzero.checkpoint import Checkpoint, params_hash
from sdzero.decoding import SamplerConfig
from sdzero.model import ModelConfig, init_params
from sdzero.optim import AdamWConfig, Schedule
from sdzero.revision import RevisionTrace, control_prompt_tokens
from sdzero.tasks import GoldAccessError, TaskInstance, TaskPool
from sdzero.training import (
    PretrainBandError,
    PretrainConfig,
    SupervisedExample,
    TrainConfig,
    batch_order,
    eval_accuracy,
    make_completion_example,
    make_generation_example,
    make_pretrain_example,
    make_revision_example,
    pretrain_base,
    pretrain_dataset,
    revision_loss,
    rft_dataset,
    sequence_nll,
    sft_dataset,
    train_items,
    train_revision,
    train_supervised,
    trace_tokens,
    write_metrics_csv,
)
from sdzero.vocab import vocab

VOC = vocab()


def toy_trace(reward_initial=1):
    return RevisionTrace(
        instance_uid="t:0",
        instance_seed=0,
        prompt_kind="rephrase" if reward_initial else "start-over",
        reward_initial=reward_initial,
        question_tokens=VOC.encode("ab\n"),
        attempt_tokens=VOC.encode("x=1"),
        revised_tokens=VOC.encode("y=2"),
        attempt_index=0,
        seed_initial=0,
        seed_revision=0,
    )


def addition_instance(a=1, b=1, seed=1):
    return TaskInstance(
        kind="scratchpad-addition",
        seed=seed,
        prompt=f"add {a} {b}\n",
        answer=str(a + b),
        gold_solution=f"#### {a + b}",
    )


def test_example_validation():
    with pytest.raises(ValueError):
        SupervisedExample(tokens=[1, 2], mask=[1, 1], kind="x")  # position 0
    with pytest.raises(ValueError):
        SupervisedExample(tokens=[1, 2], mask=[0], kind="x")  # length
    with pytest.raises(ValueError):
        SupervisedExample(tokens=[1, 2], mask=[0, 0], kind="x")  # nothing to learn
    with pytest.raises(ValueError):
        SupervisedExample(tokens=[1, 2], mask=[0, 2], kind="x")  # not 0/1
    with pytest.raises(ValueError):
        SupervisedExample(tokens=[1, 2], mask=[0, 1], kind="x", labels=[1])


def test_dual_masks_over_shared_sequence():
    trace = toy_trace(reward_initial=1)
    rev = make_revision_example(trace)
    gen = make_generation_example(trace)
    phrase = control_prompt_tokens(1)
    q, a, r = 3, 3, 3
    total = q + a + 1 + len(phrase) + 1 + r + 1
    assert rev.tokens == gen.tokens == trace_tokens(trace)
    assert len(rev.tokens) == total
    # revision mask: exactly the revised span plus EOS
    assert rev.mask == [0] * (total - r - 1) + [1] * (r + 1)
    # generation mask: everything after the question, separators included
    assert gen.mask == [0] * q + [1] * (total - q)
    assert rev.tokens[q + a] == VOC.sep
    assert rev.tokens[q + a + 1 : q + a + 1 + len(phrase)] == phrase
    assert rev.tokens[-1] == VOC.eos


def test_completion_and_pretrain_masks():
    ex = make_completion_example([10, 11], [20, 21, 22], "rft")
    assert ex.tokens == [10, 11, 20, 21, 22, VOC.eos]
    assert ex.mask == [0, 0, 1, 1, 1, 1]
    pre = make_pretrain_example([10, 11], [20])
    assert pre.mask == [0, 1, 1, 1]


def test_unmasked_labels_cannot_touch_loss_or_grads():
    # same tokens, labels corrupted only where mask is 0: identical bits out
    ckpt = fresh_checkpoint(context=32, dim=16, heads=2, layers=1, seed=3)
    # randomize the head so gradients reach every parameter
    rng = np.random.default_rng(0)
    ckpt.params["head.w"].data[...] = (
        0.02 * rng.standard_normal(ckpt.params["head.w"].data.shape)
    ).astype(np.float32)
    tokens = VOC.encode("add 1 2\n#### 3")
    mask = [0] * 8 + [1] * 6
    clean = SupervisedExample(tokens=tokens, mask=mask, kind="x", labels=list(tokens))
    corrupted_labels = list(tokens)
    for i in range(8):
        corrupted_labels[i] = (tokens[i] + 7) % VOC.size
    dirty = SupervisedExample(tokens=tokens, mask=mask, kind="x", labels=corrupted_labels)

    losses = {}
    grads = {}
    for name, ex in [("clean", clean), ("dirty", dirty)]:
        loss = sequence_nll(ckpt.params, ckpt.config, ex)
        grads[name] = ad.grads_for(loss, ckpt.params)
        losses[name] = loss.data.copy()
    assert np.array_equal(losses["clean"], losses["dirty"])
    for key in grads["clean"]:
        assert np.array_equal(grads["clean"][key], grads["dirty"][key]), key


def test_single_forward_equals_two_passes():
    ckpt = fresh_checkpoint(context=96, dim=16, heads=2, layers=1, seed=5)
    trace = toy_trace(reward_initial=0)
    loss, terms = revision_loss(ckpt.params, ckpt.config, trace)
    rev = sequence_nll(ckpt.params, ckpt.config, make_revision_example(trace))
    gen = sequence_nll(ckpt.params, ckpt.config, make_generation_example(trace))
    two_pass = rev + gen
    assert float(loss.data) == float(two_pass.data)
    assert terms["loss_revision"] == float(rev.data)
    assert terms["loss_generation"] == float(gen.data)
    # a disabled term is skipped entirely: the result IS the other term
    only_rev, t = revision_loss(ckpt.params, ckpt.config, trace, use_generation=False)
    assert float(only_rev.data) == float(rev.data) and set(t) == {"loss_revision"}
    only_gen, t = revision_loss(ckpt.params, ckpt.config, trace, use_revision=False)
    assert float(only_gen.data) == float(gen.data) and set(t) == {"loss_generation"}
    with pytest.raises(ValueError):
        revision_loss(ckpt.params, ckpt.config, trace, use_revision=False, use_generation=False)


def test_revision_loss_gradients_match_finite_differences():
    cfg = ModelConfig(vocab_size=VOC.size, context=96, dim=16, heads=2, layers=1, dtype="float64")
    params = init_params(cfg, seed=11)
    rng = np.random.default_rng(1)
    params["head.w"].data[...] = 0.02 * rng.standard_normal(params["head.w"].data.shape)
    trace = toy_trace(reward_initial=1)
    worst = gradient_check(
        lambda: revision_loss(params, cfg, trace)[0], params, max_entries=4, seed=2
    )
    assert worst < tolerance_for(np.float64)


def test_batch_order_deterministic_and_epoch_aligned():
    a = batch_order(5, 2, 2, seed=9)
    b = batch_order(5, 2, 2, seed=9)
    assert a == b
    # 5 items in batches of 2: three slices per epoch, the last one short
    assert [len(batch) for batch in a] == [2, 2, 1, 2, 2, 1]
    flat = [i for batch in a for i in batch]
    # every item appears exactly once per epoch
    assert sorted(flat[:5]) == list(range(5))
    assert sorted(flat[5:]) == list(range(5))
    assert batch_order(5, 2, 2, seed=10) != a
    assert batch_order(5, 2, 0, seed=9) == []
    with pytest.raises(ValueError):
        batch_order(0, 2, 1, seed=9)


def test_train_supervised_overfits_and_reproduces():
    ckpt = fresh_checkpoint(context=32, dim=32, heads=2, layers=1, seed=0)
    examples = [make_completion_example(VOC.encode("add 1 1\n"), VOC.encode("#### 2"), "sft")]
    config = TrainConfig(
        epochs=30,
        batch_size=1,
        schedule=Schedule(kind="constant", peak_lr=3e-3),
        optimizer=AdamWConfig(weight_decay=1e-4),
        seed=4,
    )
    r1 = train_supervised(ckpt, examples, config, phase="sft")
    assert r1.metrics[-1]["loss"] < r1.metrics[0]["loss"] * 0.5
    assert r1.checkpoint.step == 30
    assert r1.checkpoint.phase == "sft"
    assert r1.checkpoint.optimizer.step == 30
    assert params_hash(r1.checkpoint.params) != params_hash(ckpt.params)
    r2 = train_supervised(ckpt, examples, config, phase="sft")
    assert params_hash(r2.checkpoint.params) == params_hash(r1.checkpoint.params)
    assert [m["loss"] for m in r2.metrics] == [m["loss"] for m in r1.metrics]


def test_train_zero_epochs_is_identity():
    ckpt = fresh_checkpoint(context=32, dim=16, heads=2, layers=1, seed=0)
    examples = [make_completion_example(VOC.encode("add 1 1\n"), VOC.encode("#### 2"), "sft")]
    config = TrainConfig(epochs=0, batch_size=1, schedule=Schedule(kind="constant", peak_lr=3e-3))
    result = train_supervised(ckpt, examples, config, phase="sft")
    assert params_hash(result.checkpoint.params) == params_hash(ckpt.params)
    assert result.metrics == []
    assert result.checkpoint.step == ckpt.step


def test_train_revision_reports_both_terms():
    ckpt = fresh_checkpoint(context=96, dim=16, heads=2, layers=1, seed=0)
    traces = [toy_trace(1), toy_trace(0)]
    config = TrainConfig(
        epochs=3, batch_size=2, schedule=Schedule(kind="cosine", peak_lr=1e-3, total_steps=3)
    )
    result = train_revision(ckpt, traces, config)
    assert len(result.metrics) == 3
    for row in result.metrics:
        assert "loss_revision" in row and "loss_generation" in row
        assert row["grad_norm"] >= 0
    assert result.checkpoint.phase == "srt"
    with pytest.raises(ValueError):
        train_revision(ckpt, [], config)
    single = TrainConfig(
        epochs=1,
        batch_size=2,
        schedule=Schedule(kind="constant", peak_lr=1e-3),
        use_generation_loss=False,
    )
    only_rev = train_revision(ckpt, traces, single)
    assert "loss_generation" not in only_rev.metrics[0]
    both_off = TrainConfig(
        epochs=1,
        batch_size=2,
        schedule=Schedule(kind="constant", peak_lr=1e-3),
        use_revision_loss=False,
        use_generation_loss=False,
    )
    with pytest.raises(ValueError):
        train_revision(ckpt, traces, both_off)


def test_non_finite_loss_aborts():
    ckpt = fresh_checkpoint(context=16, dim=16, heads=2, layers=1)
    config = TrainConfig(epochs=2, batch_size=1, schedule=Schedule(kind="constant", peak_lr=1e-3))

    def poisoned(params, cfg, item):
        return Tensor(np.array(np.inf, dtype=np.float32)), {}

    with pytest.raises(NumericOverflowError):
        train_items(ckpt, [0], config, poisoned, phase="x")


def test_sft_dataset_respects_gold_guard():
    insts = [addition_instance(seed=1), addition_instance(2, 2, seed=2)]
    open_pool = TaskPool("train", insts, allow_gold=True)
    examples = sft_dataset(open_pool)
    assert len(examples) == 2
    assert examples[0].tokens[-1] == VOC.eos
    sealed = TaskPool("train", insts, allow_gold=False)
    with pytest.raises(GoldAccessError):
        sft_dataset(sealed)


def test_pretrain_dataset_retry_mix():
    insts = [addition_instance(a, a, seed=a) for a in range(1, 7)]
    pool = TaskPool("pre", insts, allow_gold=True)
    plain = pretrain_dataset(pool)
    assert [ex.kind for ex in plain] == ["pretrain"] * 6
    assert pretrain_dataset(pool, retry_fraction=0.0, seed=9) == plain

    mixed = pretrain_dataset(pool, retry_fraction=0.9, seed=9)
    retries = [ex for ex in mixed if ex.kind == "pretrain-retry"]
    assert retries and len(mixed) == 6 + len(retries)
    assert mixed == pretrain_dataset(pool, retry_fraction=0.9, seed=9)
    assert mixed != pretrain_dataset(pool, retry_fraction=0.9, seed=10)

    golds = {pool.gold_solution(i) for i in range(6)}
    phrases = {VOC.decode(control_prompt_tokens(0)), VOC.decode(control_prompt_tokens(1))}
    for ex in retries:
        # layout: prompt, draft, SEP, phrase, SEP, gold; supervised from the
        # phrase onward, never through the opening SEP
        seps = [i for i, t in enumerate(ex.tokens) if t == VOC.sep]
        assert len(seps) == 2 and ex.tokens[-1] == VOC.eos
        assert VOC.decode(ex.tokens[seps[0] + 1 : seps[1]]) in phrases
        assert VOC.decode(ex.tokens[seps[1] + 1 : -1]) in golds
        assert VOC.decode(ex.tokens[8 : seps[0]]) in golds  # drafts are pool solutions
        assert ex.mask == [0] * (seps[0] + 1) + [1] * (len(ex.tokens) - seps[0] - 1)

    with pytest.raises(ValueError):
        pretrain_dataset(pool, retry_fraction=1.0)


def test_rft_dataset_keeps_only_verified():
    inst = addition_instance(2, 3, seed=1)  # answer 5
    tape = [VOC.pad] * 7 + VOC.encode("#### 5") + [VOC.eos]
    ckpt = scripted_checkpoint(tape, context=24)
    pool = TaskPool("rft", [inst], allow_gold=False)
    examples, ledger = rft_dataset(ckpt, pool, 2, SamplerConfig(0.0, 10), run_seed=3)
    assert ledger.initial_samples == 2
    assert ledger.retained_traces == 2
    assert len(examples) == 2
    assert examples[0].kind == "rft"
    assert VOC.decode(examples[0].tokens[8:-1]) == "#### 5"
    # a model that never answers yields an empty dataset but still pays
    bad = scripted_checkpoint([VOC.pad] * 24, context=24)
    examples, ledger = rft_dataset(bad, pool, 2, SamplerConfig(0.0, 4), run_seed=3)
    assert examples == [] and ledger.initial_samples == 2 and ledger.retained_traces == 0


def test_eval_accuracy_scripted():
    inst = addition_instance(2, 3, seed=1)
    tape = [VOC.pad] * 7 + VOC.encode("#### 5") + [VOC.eos]
    ckpt = scripted_checkpoint(tape, context=24)
    pool = TaskPool("eval", [inst], allow_gold=False)
    acc = eval_accuracy(ckpt, pool, 2, SamplerConfig(0.0, 10), run_seed=0)
    assert acc == 1.0


def test_pretrain_base_stops_in_band():
    ckpt = fresh_checkpoint(context=32, dim=32, heads=2, layers=1, seed=0)
    inst = addition_instance(1, 1, seed=1)
    pool = TaskPool("pretrain", [inst], allow_gold=True)
    eval_pool = TaskPool("probe", [inst], allow_gold=False)
    config = PretrainConfig(
        max_steps=300,
        batch_size=1,
        schedule=Schedule(kind="constant", peak_lr=3e-3),
        seed=6,
        eval_every=10,
        eval_temperature=0.0,
        eval_max_new_tokens=12,
        band_low=0.5,
        band_high=1.0,
        position_jitter=False,
    )
    result = pretrain_base(ckpt, pool, eval_pool, config)
    assert result.checkpoint.phase == "base"
    last = result.metrics[-1]
    assert 0.5 <= last["eval_acc"] <= 1.0
    assert result.checkpoint.step % 10 == 0  # stopped at an evaluation step


def test_pretrain_base_band_errors():
    ckpt = fresh_checkpoint(context=32, dim=32, heads=2, layers=1, seed=0)
    inst = addition_instance(1, 1, seed=1)
    pool = TaskPool("pretrain", [inst], allow_gold=True)
    eval_pool = TaskPool("probe", [inst], allow_gold=False)
    base = dict(
        batch_size=1,
        schedule=Schedule(kind="constant", peak_lr=3e-3),
        seed=6,
        eval_every=10,
        eval_temperature=0.0,
        eval_max_new_tokens=12,
        position_jitter=False,
    )
    # a single instance grades 0 or 1, so a band strictly inside (0, 1) is
    # unreachable from below and overshot once the model memorizes
    with pytest.raises(PretrainBandError):
        pretrain_base(ckpt, pool, eval_pool, PretrainConfig(max_steps=300, band_low=0.2, band_high=0.8, **base))
    slow = dict(base)
    slow["schedule"] = Schedule(kind="constant", peak_lr=1e-6)
    with pytest.raises(PretrainBandError):
        pretrain_base(ckpt, pool, eval_pool, PretrainConfig(max_steps=3, band_low=0.5, band_high=1.0, **slow))


def test_write_metrics_csv(tmp_path):
    rows = [
        {"step": 0, "loss": 2.0, "lr": 0.1, "grad_norm": 1.0, "wall_ms": 3.0},
        {"step": 1, "loss": 1.5, "lr": 0.1, "grad_norm": 0.9, "extra_term": 0.5, "wall_ms": 2.0},
    ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, rows)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "step,loss,lr,grad_norm,extra_term,wall_ms"
    assert lines[1] == "0,2.0,0.1,1.0,,3.0"
    assert lines[2].startswith("1,1.5,0.1,0.9,0.5,")
    # revision-training term columns slot in right after the loss
    srt_rows = [
        {"step": 0, "loss": 2.0, "loss_revision": 1.2, "loss_generation": 0.8, "lr": 0.1,
         "grad_norm": 1.0, "wall_ms": 3.0},
    ]
    write_metrics_csv(path, srt_rows)
    head = path.read_text().strip().split("\n")[0]
    assert head == "step,loss,loss_revision,loss_generation,lr,grad_norm,wall_ms"
