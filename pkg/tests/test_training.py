"""Training harness: schedule formula, AdamW recurrence against hand
computation, determinism, masking semantics, evaluation and capacity logic."""

import math

import numpy as np
import pytest

from moelab import autodiff as ad
from moelab.autodiff import Tape, Tensor
from moelab.models import ModelConfig, build_model, forward_batch
from moelab.tasks import (
    Phonebook,
    Sample,
    gen_shortest_path_dataset,
    graph_vocabulary,
    phonebook_samples,
    phonebook_vocabulary,
)
from moelab.training import (
    AdamWState,
    DivergenceError,
    TrainConfig,
    adamw_step,
    evaluate_exact_match,
    lr_at,
    phonebook_capacity,
    train,
    train_test_gap,
    ADAM_EPS,
)


def tiny_book(n=16, seed=0):
    vocab = phonebook_vocabulary()
    from moelab.tasks import gen_phonebook

    book = gen_phonebook(n, seed)
    samples, queries = phonebook_samples(book, vocab, num_queries=n, seed=seed)
    return vocab, samples, queries


# --- schedule -------------------------------------------------------------------


def test_lr_schedule_endpoints_and_peak():
    cfg = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=1, warmup_fraction=0.2)
    assert lr_at(0, 100, cfg) == 0.0
    assert lr_at(20, 100, cfg) == pytest.approx(1e-3)  # end of the 20% warmup
    assert lr_at(100, 100, cfg) == 0.0
    assert lr_at(10, 100, cfg) == pytest.approx(5e-4)
    assert lr_at(60, 100, cfg) == pytest.approx(5e-4)


def test_lr_schedule_rejects_step_beyond_total():
    cfg = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=1)
    with pytest.raises(ValueError):
        lr_at(101, 100, cfg)


def test_train_log_lr_trace_matches_formula_exactly():
    vocab, samples, _ = tiny_book(8)
    cfg = ModelConfig("dense", d=8, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    model = build_model(cfg, seed=0)
    tc = TrainConfig(learning_rate=3e-3, epochs=4, batch_size=4, seed=1)
    _, log = train(model, samples, tc, vocab=vocab)
    total = 4 * 2
    for rec in log.steps:
        assert rec["lr"] == lr_at(rec["step"], total, tc)


# --- AdamW ------------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamWState(p)
    adamw_step(p, state, lr=0.01, weight_decay=0.0)
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_decoupled_decay_multiplies_weights():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamWState(p)
    adamw_step(p, state, lr=0.01, weight_decay=0.1)
    assert np.allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.001), atol=1e-15)


def test_adamw_matches_hand_recurrence_two_steps():
    # scalar, constant gradient 1.0, lr 0.1, no decay; betas (0.9, 0.999)
    w = 0.5
    lr, b1, b2 = 0.1, 0.9, 0.999
    m = v = 0.0
    expected = w
    for t in (1, 2):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        expected -= lr * mh / (math.sqrt(vh) + ADAM_EPS)

    p = {"w": Tensor(np.array(0.5), requires_grad=True)}
    state = AdamWState(p)
    for _ in range(2):
        p["w"].grad = np.array(1.0)
        adamw_step(p, state, lr=lr, weight_decay=0.0)
    assert abs(float(p["w"].data) - expected) < 1e-12


def test_adamw_aborts_on_nan_gradient():
    p = {"w": Tensor(np.array(1.0), requires_grad=True)}
    state = AdamWState(p)
    p["w"].grad = np.array(np.nan)
    with pytest.raises(DivergenceError, match="w"):
        adamw_step(p, state, lr=0.1, weight_decay=0.0)


# --- train ------------------------------------------------------------------------------


def test_train_rejects_empty_dataset():
    vocab, _, _ = tiny_book(4)
    cfg = ModelConfig("dense", d=8, L=1, vocab_size=len(vocab), H=1)
    model = build_model(cfg, seed=0)
    with pytest.raises(ValueError):
        train(model, [], TrainConfig(learning_rate=1e-3, epochs=1, batch_size=2))


def test_train_all_false_mask_only_weight_decay_moves_params():
    vocab, samples, _ = tiny_book(6)
    masked = [Sample(s.tokens, [False] * len(s.tokens), s.answer_span, s.meta) for s in samples]
    cfg = ModelConfig("dense", d=8, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    model = build_model(cfg, seed=2)
    before = model.copy_weights()
    tc = TrainConfig(learning_rate=0.01, weight_decay=0.1, epochs=2, batch_size=3, seed=0)
    _, log = train(model, masked, tc, vocab=vocab)
    assert all(rec["train_loss"] == 0.0 for rec in log.steps)
    total = len(log.steps)
    for name, arr in before.items():
        decay = np.prod([1 - lr_at(s, total, tc) * 0.1 for s in range(total)])
        assert np.allclose(model.params[name].data, arr * decay, atol=1e-12), name


def test_train_all_false_mask_zero_decay_is_identity():
    vocab, samples, _ = tiny_book(6)
    masked = [Sample(s.tokens, [False] * len(s.tokens), s.answer_span, s.meta) for s in samples]
    cfg = ModelConfig("dense", d=8, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    model = build_model(cfg, seed=2)
    before = model.copy_weights()
    tc = TrainConfig(learning_rate=0.01, weight_decay=0.0, epochs=1, batch_size=3, seed=0)
    train(model, masked, tc, vocab=vocab)
    for name, arr in before.items():
        assert np.array_equal(model.params[name].data, arr), name


def test_train_bitwise_deterministic():
    def run():
        vocab, samples, _ = tiny_book(8)
        cfg = ModelConfig("moe", d=8, L=2, vocab_size=len(vocab), H=1, E=4, top_k=2, max_seq_len=20)
        model = build_model(cfg, seed=3)
        tc = TrainConfig(learning_rate=2e-3, epochs=3, batch_size=4, seed=7)
        train(model, samples, tc, vocab=vocab)
        return model.copy_weights()

    w1, w2 = run(), run()
    for name in w1:
        assert np.array_equal(w1[name], w2[name]), name


def test_batch_loss_equals_masked_mean_of_samples():
    vocab, samples, _ = tiny_book(5)
    cfg = ModelConfig("dense", d=8, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    model = build_model(cfg, seed=4)
    toks = np.array([s.tokens for s in samples])
    mask = np.array([s.loss_mask for s in samples])
    out = forward_batch(model, toks[:, :-1])
    batch_loss = float(
        ad.cross_entropy_masked(out.logits, toks[:, 1:], mask[:, 1:]).data
    )
    total, weight = 0.0, 0
    for i in range(len(samples)):
        o = forward_batch(model, toks[i : i + 1, :-1])
        li = float(ad.cross_entropy_masked(o.logits, toks[i : i + 1, 1:], mask[i : i + 1, 1:]).data)
        n_i = int(mask[i, 1:].sum())
        total += li * n_i
        weight += n_i
    assert abs(batch_loss - total / weight) < 1e-10


def test_moe_training_traces_stay_structural():
    vocab, samples, _ = tiny_book(8)
    cfg = ModelConfig("moe", d=8, L=1, vocab_size=len(vocab), H=1, E=4, top_k=2, max_seq_len=20)
    model = build_model(cfg, seed=5)
    toks = np.array([s.tokens for s in samples])

    def checkpoint(m):
        out = forward_batch(m, toks[:, :-1])
        tr = out.traces[0]
        assert tr.expert_indices.shape[1] == 2
        assert np.all(tr.expert_indices[:, 0] != tr.expert_indices[:, 1])
        assert np.all(np.abs(tr.gates.sum(axis=1) - 1) < 1e-9)
        return {"ok": 1}

    tc = TrainConfig(learning_rate=2e-3, epochs=4, batch_size=4, seed=0)
    _, log = train(model, samples, tc, vocab=vocab, eval_every=1, eval_fn=checkpoint)
    assert len(log.evals) == 4


def test_divergence_rolls_back_and_raises():
    vocab, samples, _ = tiny_book(4)
    cfg = ModelConfig("dense", d=8, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    model = build_model(cfg, seed=1)
    # an absurd learning rate pushes norm gains and weights to ~1e160 after
    # the first step; the next attention matmul overflows to inf and the
    # softmax max-subtraction turns it into NaN
    tc = TrainConfig(
        learning_rate=1e160, weight_decay=0.0, warmup_fraction=0.0, epochs=2,
        batch_size=4, seed=0,
    )
    with pytest.raises(DivergenceError):
        train(model, samples, tc, vocab=vocab)


# --- overfit sanity ---------------------------------------------------------------------
#
# With the task's all-positions loss, the first letter of a name is predicted
# from <BOS> alone, so the mean loss has an entropy floor: H(first letters)
# spread over the sequence. The harness-health checks therefore assert
# (a) exact-match memorization, (b) loss within a margin of the computed
# floor, and (c) the spec's <0.01 loss bar on the answer-masked variant,
# where the digits are a deterministic function of the prompt.


def _first_token_entropy_floor(samples) -> float:
    from collections import Counter

    counts = Counter(s.tokens[1] for s in samples)
    n = sum(counts.values())
    h = -sum((c / n) * math.log(c / n) for c in counts.values())
    positions = len(samples[0].tokens) - 1
    return h / positions


def test_overfit_16_entries_memorizes_exactly():
    vocab, samples, queries = tiny_book(16)
    cfg = ModelConfig("dense", d=32, L=2, vocab_size=len(vocab), max_seq_len=20)
    model = build_model(cfg, seed=0)
    tc = TrainConfig(learning_rate=1e-2, epochs=300, batch_size=16, seed=0)
    model, log = train(model, samples, tc, vocab=vocab)
    res = evaluate_exact_match(model, queries, vocab)
    assert res.exact_match == 1.0
    floor = _first_token_entropy_floor(samples)
    assert log.steps[-1]["train_loss"] < floor + 0.05


def test_overfit_answer_masked_loss_below_hundredth():
    vocab, samples, _ = tiny_book(16)
    masked = []
    for s in samples:
        mask = [False] * len(s.tokens)
        for i in range(s.answer_span[0], s.answer_span[1]):
            mask[i] = True
        masked.append(Sample(s.tokens, mask, s.answer_span, s.meta))
    cfg = ModelConfig("dense", d=32, L=2, vocab_size=len(vocab), max_seq_len=20)
    model = build_model(cfg, seed=0)
    tc = TrainConfig(learning_rate=1e-2, epochs=300, batch_size=16, seed=0)
    model, log = train(model, masked, tc, vocab=vocab)
    assert log.steps[-1]["train_loss"] < 0.01


# --- evaluation -------------------------------------------------------------------------


def test_eval_verbatim_model_scores_one():
    vocab, samples, queries = tiny_book(8)
    cfg = ModelConfig("dense", d=32, L=2, vocab_size=len(vocab), max_seq_len=20)
    model = build_model(cfg, seed=0)
    tc = TrainConfig(learning_rate=1e-2, epochs=250, batch_size=8, seed=0)
    model, _ = train(model, samples, tc, vocab=vocab)
    res = evaluate_exact_match(model, queries, vocab)
    assert res.exact_match == 1.0
    assert res.valid_path_accuracy is None

    # one wrong digit in the reference: that query must score 0
    q = queries[0]
    bad = list(q.tokens)
    digit_pos = q.answer_span[0]
    bad[digit_pos] = (bad[digit_pos] + 1 - 26) % 10 + 26  # different digit token
    corrupted = Sample(bad, q.loss_mask, q.answer_span, q.meta)
    res_bad = evaluate_exact_match(model, [corrupted], vocab)
    assert res_bad.exact_match == 0.0


def test_eval_valid_path_superset_of_exact():
    vocab = graph_vocabulary(6)
    _, test = gen_shortest_path_dataset(6, 0.35, 2, 12, seed=1, vocab=vocab)
    cfg = ModelConfig("dense", d=16, L=1, vocab_size=len(vocab), H=1, max_seq_len=80)
    model = build_model(cfg, seed=0)  # untrained: mostly garbage decodes
    res = evaluate_exact_match(model, test, vocab)
    assert res.valid_path_accuracy is not None
    assert res.valid_path_accuracy >= res.exact_match


def test_train_test_gap_identical_sets_zero():
    vocab, samples, queries = tiny_book(6)
    cfg = ModelConfig("dense", d=16, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    model = build_model(cfg, seed=0)
    assert train_test_gap(model, queries, queries, vocab) == 0.0


def test_train_test_gap_requires_nonempty():
    vocab, samples, queries = tiny_book(4)
    cfg = ModelConfig("dense", d=16, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    model = build_model(cfg, seed=0)
    with pytest.raises(ValueError):
        train_test_gap(model, [], queries, vocab)


# --- capacity scan ----------------------------------------------------------------------


def test_capacity_scan_plumbing_all_pass_and_all_fail():
    vocab = phonebook_vocabulary()
    cfg = ModelConfig("dense", d=8, L=1, vocab_size=len(vocab), H=1, max_seq_len=20)
    tc = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=8, seed=0)

    free = phonebook_capacity(
        lambda s: build_model(cfg, s), tc, [4, 8], vocab, threshold=0.0, seed=0, num_queries=4
    )
    assert free.capacity == 8  # every size passes a zero threshold
    assert [r["size"] for r in free.per_size] == [4, 8]
    assert all("total_nonembedding" in r for r in free.per_size)

    impossible = phonebook_capacity(
        lambda s: build_model(cfg, s), tc, [4, 8, 16], vocab, threshold=1.01, seed=0,
        num_queries=4, stop_after_failures=2,
    )
    assert impossible.capacity == 0
    assert len(impossible.per_size) == 2  # stopped after two consecutive failures


def test_capacity_rejects_unsorted_sizes():
    vocab = phonebook_vocabulary()
    with pytest.raises(ValueError):
        phonebook_capacity(lambda s: None, None, [8, 4], vocab)
