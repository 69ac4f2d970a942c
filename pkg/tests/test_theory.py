"""Constructions vs brute-force verifiers: exhaustive length-2 families,
set-disjointness reduction, routing statistics, memorizer postconditions,
quantization behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moelab import theory as th
from moelab.tasks import Graph, bfs_shortest_path, gen_memorization_set
from moelab.theory import (
    MemorizerFitError,
    SignRouter,
    appendix_width,
    build_length2_dense,
    build_moe_memorizer,
    check_disjointness_reduction,
    check_length2_exhaustive,
    check_routing_frequency,
    encode_length2_stream,
    eval_explicit,
    match_params,
    memorizer_predict,
    quantize_array,
    quantize_params,
    routing_loads,
    verify_routing_balance,
)


# --- length-2 construction --------------------------------------------------------


def test_edgeless_graph_is_classified_no_path():
    tf = build_length2_dense(5)
    g = Graph(5, frozenset(), s=tf.source, t=tf.destination)
    assert eval_explicit(tf, g) is False


def test_pre_threshold_value_two_over_v():
    # s and t both adjacent to vertex 3 in |V|=5: pooled coordinate is 2/|V|
    tf = build_length2_dense(5)
    g = Graph(5, frozenset({(tf.source, 3), (3, tf.destination)}), s=tf.source, t=tf.destination)
    stream = encode_length2_stream(tf, g)
    rows = np.array([tf.token_index(u, v) for u, v in stream])
    z = tf.embed[rows].mean(axis=0) @ tf.attn_v * (len(stream) / 5)
    assert abs(z[2] - 2 / 5) < 1e-15  # coordinate of vertex 3
    assert z[2] > float(tf.threshold)
    assert eval_explicit(tf, g) is True


def test_single_shared_neighbor_true():
    tf = build_length2_dense(4)
    g = Graph(4, frozenset({(3, 1), (1, 4)}), s=3, t=4)
    assert eval_explicit(tf, g) is True


def test_disjoint_neighborhoods_false():
    tf = build_length2_dense(5)
    s, t = tf.source, tf.destination
    g = Graph(5, frozenset({(s, 1), (s, 2), (3, t)}), s=s, t=t)
    assert eval_explicit(tf, g) is False


def test_exhaustive_family_matches_bfs_oracle():
    rep = check_length2_exhaustive(6)
    assert rep["passed"], rep["failures"][:3]
    # families: sum over n=3..6 of 4^(n-2)
    assert rep["instance_count"] == 4 + 16 + 64 + 256


def test_wrong_threshold_fails_exhaustive_negative_control():
    rep = check_length2_exhaustive(5, threshold=2.5 / 5)
    assert not rep["passed"]
    assert len(rep["failures"]) > 0


def test_random_graphs_with_middle_edges_agree_with_direct_check():
    n = 20
    tf = build_length2_dense(n)
    s, t = tf.source, tf.destination
    rng = np.random.default_rng(0)
    for trial in range(2000):
        mask = rng.random((n, n)) < 0.08
        np.fill_diagonal(mask, False)
        edges = frozenset((int(u) + 1, int(v) + 1) for u, v in zip(*np.nonzero(mask)))
        g = Graph(n, edges, s=s, t=t)
        truth = any((s, i) in edges and (i, t) in edges for i in range(1, n + 1))
        assert eval_explicit(tf, g) == truth


def test_malformed_stream_rejected():
    tf = build_length2_dense(4)
    with pytest.raises(ValueError):
        tf.token_index(0, 1)
    with pytest.raises(ValueError):
        eval_explicit(tf, Graph(6, frozenset()))  # wrong vertex count


def test_reduction_exhaustive_r4():
    rep = check_disjointness_reduction(4)
    assert rep["passed"]
    assert rep["instance_count"] == 256


# --- sign router ------------------------------------------------------------------


def test_router_requires_power_of_two():
    with pytest.raises(ValueError):
        SignRouter.build(3, 8)


def test_router_k2_sign_rule():
    r = SignRouter.build(2, 4)
    assert r.route(np.array([0.7, 0.1, 0.1, 0.1])) == 0  # +1 pattern
    assert r.route(np.array([-0.7, 0.1, 0.1, 0.1])) == 1  # -1 pattern


def test_router_k4_pattern():
    r = SignRouter.build(4, 6)
    x = np.array([0.5, -0.5, 0.0, 0.0, 0.0, 0.0])
    assert r.route(x) == 1  # (+, -) pattern is expert 01b


def test_router_zero_coordinate_ties_to_lower_index():
    r = SignRouter.build(4, 4)
    assert r.route(np.zeros(4)) == 0
    assert r.route(np.array([0.0, -1.0, 0.0, 0.0])) == 1  # (tie, -) -> 01b


@settings(max_examples=40, deadline=None)
@given(st.floats(min_value=1e-6, max_value=1e6), st.integers(min_value=0, max_value=999))
def test_router_scale_invariance(c, seed):
    r = SignRouter.build(8, 12)
    x = np.random.default_rng(seed).normal(size=12)
    assert r.route(x) == r.route(c * x)


def test_routing_frequency_uniform_one_over_k():
    rep = check_routing_frequency(8, 100_000, dim=8, seed=0)
    assert rep["passed"]
    assert rep["max_abs_deviation"] <= rep["three_sigma"]


def test_balance_k1_trivial():
    rep = verify_routing_balance(100, 4, 1, seeds=3)
    assert rep["passed"]
    assert rep["max_load"] == 100  # 2n/K = 200


def test_balance_bound_holds_on_gaussian_points():
    rep = verify_routing_balance(4096, 16, 8, seeds=50)
    assert rep["seeds_within_bound"] == 50
    assert rep["precondition_met"]


def test_balance_flags_precondition_violation():
    rep = verify_routing_balance(10, 8, 8, seeds=2)
    assert not rep["precondition_met"]


def test_balance_adversarial_identical_points_violates_bound():
    router = SignRouter.build(8, 8)
    points = np.tile(np.ones(8), (64, 1))
    loads = routing_loads(points, router)
    assert loads.max() == 64  # all to one expert
    assert loads.max() > 2 * 64 / 8  # negative control: bound broken


# --- memorizer ------------------------------------------------------------------------


def test_memorizer_one_point_per_expert_width_one():
    # craft one pooled point per sign pattern so width-1 experts suffice
    k, m = 4, 8
    router = SignRouter.build(k, m)
    seqs = []
    for i in range(k):
        x = np.zeros((2, m))
        x[:, :2] = router.vectors[i, :2]
        x[:, 2:] = np.random.default_rng(i).normal(size=(2, m - 2))
        seqs.append(x)
    data = gen_memorization_set(4, 2, m, seed=0)
    data.sequences[...] = np.stack(seqs)
    model, rep = build_moe_memorizer(data, k, expert_width=1, seed=0)
    assert rep["sign_match"]
    assert rep["loads"] == [1, 1, 1, 1]
    assert np.array_equal(memorizer_predict(model, data.sequences), data.labels)


def test_memorizer_small_scale_success_and_structure():
    data = gen_memorization_set(256, 4, 32, seed=5)
    model, rep = build_moe_memorizer(data, 8, seed=1)
    assert rep["sign_match"]
    bits = model.sign_bits
    for expert in model.experts:
        assert np.all(expert.weight[:, :bits] == 0.0)  # router coords unread
    assert sum(rep["loads"]) == 256


def test_memorizer_hard_postcondition_is_exact():
    data = gen_memorization_set(512, 4, 64, seed=9)
    model, rep = build_moe_memorizer(data, 4, seed=2)
    preds = memorizer_predict(model, data.sequences)
    assert np.array_equal(preds, data.labels)


def test_memorizer_fit_failure_names_expert():
    # width-1 ReLU features cannot separate many random labels
    data = gen_memorization_set(128, 2, 16, seed=3)
    with pytest.raises(MemorizerFitError, match="expert 0"):
        build_moe_memorizer(data, 1, expert_width=1, seed=0)


def test_appendix_width_formula():
    # 8 n ln^4(m - log2 K) / (m K), rounded up
    expect = math.ceil(8 * 2048 * math.log(61) ** 4 / (64 * 8))
    assert appendix_width(2048, 64, 8) == expect
    assert appendix_width(4096, 64, 8) == 2 * expect or appendix_width(4096, 64, 8) >= expect
    assert appendix_width(2048, 64, 16) < expect


def test_memorizer_active_order_report():
    data = gen_memorization_set(1024, 4, 64, seed=4)
    _, rep = build_moe_memorizer(data, 8, seed=0)
    assert rep["theorem_active_order"] == math.ceil(1024 / 8) + 8 * 64
    assert rep["dense_param_floor"] == 1024
    assert rep["order_below_dense_floor"] == (rep["theorem_active_order"] < 1024)
    assert rep["total_params"] >= rep["active_params"]


# --- quantization ----------------------------------------------------------------------


def test_quantize_array_is_lossless_on_representable_values():
    w = np.array([0.0, 1.0, -1.0, 0.5])
    q = quantize_array(w, 3)  # levels at multiples of 1/3? max=1, 3 positive levels
    assert np.max(np.abs(q - w)) <= 1.0 / (2**2 - 1) / 2 + 1e-15


def test_quantize_rejects_tiny_bit_budget():
    with pytest.raises(ValueError):
        quantize_array(np.ones(3), 1)


def test_quantized_construction_at_high_bits_is_identical():
    tf = build_length2_dense(6)
    qtf = quantize_params(tf, 52)
    for a, b in [(tf.embed, qtf.embed), (tf.attn_v, qtf.attn_v)]:
        assert np.allclose(a, b, atol=1e-12)
    rng = np.random.default_rng(1)
    s, t = tf.source, tf.destination
    for _ in range(200):
        mask = rng.random((6, 6)) < 0.3
        np.fill_diagonal(mask, False)
        edges = frozenset((int(u) + 1, int(v) + 1) for u, v in zip(*np.nonzero(mask)))
        g = Graph(6, edges, s=s, t=t)
        assert eval_explicit(tf, g) == eval_explicit(qtf, g)


def test_quantized_construction_log_bits_family():
    # ceil(log2 N) + 4 bits at sequence length N = 2|V|
    n = 6
    bits = math.ceil(math.log2(2 * n)) + 4
    tf = build_length2_dense(n)
    qtf = quantize_params(tf, bits)
    s, t = n - 1, n
    mids = range(1, n - 1)
    for amask in range(16):
        for bmask in range(16):
            edges = {(s, i) for b, i in enumerate(mids) if amask >> b & 1}
            edges |= {(i, t) for b, i in enumerate(mids) if bmask >> b & 1}
            g = Graph(n, frozenset(edges), s=s, t=t)
            path = bfs_shortest_path(g, s, t)
            oracle = path is not None and len(path) == 3
            assert eval_explicit(qtf, g) == oracle


def test_quantized_memorizer_retains_signs():
    data = gen_memorization_set(1024, 4, 64, seed=11)
    model, _ = build_moe_memorizer(data, 8, expert_width=appendix_width(1024, 64, 8), seed=0)
    bits = math.ceil(math.log2(1024)) + 4
    qm = quantize_params(model, bits)
    preds = memorizer_predict(qm, data.sequences)
    assert (preds == data.labels).mean() >= 0.99


# --- parameter matching -------------------------------------------------------------------


def test_match_params_paper_example():
    assert match_params(1024, 16) == 256  # m_d / sqrt(K)


def test_match_params_degenerate_and_arithmetic():
    assert match_params(8, 1) == 8
    assert match_params(10, 4) == 5


def test_match_params_rejects_zero_experts():
    with pytest.raises(ValueError):
        match_params(16, 0)
