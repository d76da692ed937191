#!/usr/bin/env python3
"""
Tests for the router, top-k gating, the refuser mixture, task relevance and
the routing / replay / refusal losses
"""

import numpy as np
import pytest
from scipy import special

from unlearning.config import RefusalConfig
from unlearning.errors import DataError, LabelError, ParameterError, RegistryError, ShapeError
from unlearning.numerics import cosine_sim, finite_diff_check, make_rng, softmax
from unlearning.refusal import (
    GateVector,
    RefuserBank,
    RouterOutput,
    RouterState,
    RoutingRecord,
    activation_counts,
    mixture_delta,
    mixture_deltas,
    refusal_ce_loss,
    refusal_routing_loss,
    router_forward,
    router_replay_loss,
    routing_loss_logit_grads,
    steered_ce,
    task_relevance,
    top_k_gate,
    top_k_gates,
    top_k_indices,
)
from unlearning.world import ANSWER, REFUSAL, MockLM

CFG = RefusalConfig(num_refusers=4, top_k=2, temperature=0.5, heads=2, hidden_dim=4, router_init_scale=0.5)


def _router(width=6, seed=0):
    return RouterState.initialise(CFG, width, width, seed)


def test_router_output_is_a_distribution_and_deterministic():
    rng = make_rng(0, "test", "router")
    a, b = rng.standard_normal((2, 6))
    out = router_forward(_router(), a, b)
    assert out.F.shape == (4,)
    assert out.F.sum() == pytest.approx(1.0)
    assert np.all(out.F > 0)
    again = router_forward(_router(), a, b)
    assert np.array_equal(out.logits, again.logits)


def test_router_with_zero_input_and_bias_is_uniform():
    out = router_forward(_router(), np.zeros(6), np.zeros(6))
    assert np.allclose(out.F, 0.25)


def test_router_is_equivariant_to_refuser_relabelling():
    rng = make_rng(0, "test", "perm")
    a, b = rng.standard_normal((2, 6))
    router = _router()
    router.params["router.head.bias"] = rng.standard_normal(4)
    perm = np.array([2, 0, 3, 1])
    permuted = _router()
    permuted.params = dict(router.params)
    permuted.params["router.head.weight"] = router.params["router.head.weight"][perm]
    permuted.params["router.head.bias"] = router.params["router.head.bias"][perm]
    assert np.allclose(router_forward(permuted, a, b).F, router_forward(router, a, b).F[perm])


def test_router_pads_narrow_inputs_and_rejects_wide_ones():
    router = _router(width=6)
    rng = make_rng(0, "test", "pad")
    narrow = rng.standard_normal((3, 4))
    padded = np.hstack([narrow, np.zeros((3, 2))])
    assert np.allclose(router.forward(narrow, narrow)[0], router.forward(padded, padded)[0])
    with pytest.raises(RegistryError):
        router.forward(np.ones((1, 7)), np.ones((1, 6)))


def test_router_rejects_bad_top_k():
    router = _router()
    with pytest.raises(ParameterError):
        RouterState(router.params, heads=2, temperature=0.5, top_k=5)


def test_router_backward_matches_finite_differences():
    router = _router()
    rng = make_rng(0, "test", "router-grad")
    R_img, R_txt = rng.standard_normal((2, 3, 6))
    G = rng.standard_normal((3, 4))

    def loss_fn(params):
        router.load_params(params)
        logits, cache = router.forward(R_img, R_txt)
        return float(np.sum(logits * G)), router.backward(cache, G)

    assert finite_diff_check(loss_fn, dict(router.params)).passed


def test_top_k_tie_break_prefers_lower_index():
    out = RouterOutput(logits=np.array([3.0, 1.0, 1.0, -2.0]), F=softmax(np.array([3.0, 1.0, 1.0, -2.0])))
    gate = top_k_gate(out, 2)
    assert gate.selected == (0, 1)
    assert np.count_nonzero(gate.alpha) == 2
    assert gate.alpha[0] == pytest.approx(special.expit(2.0))


def test_top_k_matches_sorting_oracle():
    rng = make_rng(0, "test", "topk")
    logits = np.round(rng.standard_normal((10_000, 6)), 1)
    for k in (1, 3, 6):
        idx = top_k_indices(logits, k)
        for row, chosen in zip(logits[:200], idx[:200]):
            oracle = sorted(range(6), key=lambda i: (-row[i], i))[:k]
            assert set(chosen.tolist()) == set(oracle)
        alpha = top_k_gates(logits, k)
        assert np.allclose(alpha.sum(axis=1), 1.0)
        assert np.all(np.count_nonzero(alpha, axis=1) == k)


def test_top_k_with_k_equal_n_is_softmax():
    z = np.array([0.3, -1.0, 2.0])
    assert np.allclose(top_k_gates(z, 3)[0], softmax(z))
    with pytest.raises(ParameterError):
        top_k_gates(z, 0)
    with pytest.raises(ParameterError):
        top_k_indices(z, 4)


def test_mixture_delta_linearity_and_batching():
    rng = make_rng(0, "test", "mixture")
    bank = RefuserBank.initialise(4, 5, seed=0, scale=1.0)
    gate = top_k_gate(RouterOutput(logits=np.array([0.1, 2.0, -1.0, 1.5]), F=np.full(4, 0.25)), 2)
    x, y = rng.standard_normal((2, 5))
    combined = mixture_delta(bank, gate, 2.0 * x - 3.0 * y)
    assert np.allclose(combined, 2.0 * mixture_delta(bank, gate, x) - 3.0 * mixture_delta(bank, gate, y))
    batched = mixture_deltas(bank, np.vstack([gate.alpha, gate.alpha]), np.vstack([x, y]))
    assert np.allclose(batched[1], mixture_delta(bank, gate, y))

    zero = RefuserBank(weights=np.zeros((4, 5, 5)))
    assert np.all(mixture_delta(zero, gate, x) == 0.0)
    identity = RefuserBank(weights=np.stack([np.eye(5)] * 4))
    one_hot = GateVector(alpha=np.array([0.0, 1.0, 0.0, 0.0]), selected=(1,))
    assert np.allclose(mixture_delta(identity, one_hot, x), x)
    with pytest.raises(ShapeError):
        mixture_delta(bank, gate, np.ones(3))


def test_task_relevance_endpoints():
    a, b = np.array([1.0, 2.0, 0.0]), np.array([0.0, 1.0, 1.0])
    same = task_relevance(a, b, a, b)
    assert same.raw == pytest.approx(special.expit(1.0))
    assert same.rescaled == pytest.approx(1.0)

    orthogonal = task_relevance(np.array([1.0, 0.0]), b[:2], np.array([0.0, 1.0]), b[:2])
    assert orthogonal.raw == pytest.approx(0.5)
    assert orthogonal.rescaled == pytest.approx(0.5)

    opposite = task_relevance(a, b, -a, b)
    assert opposite.rescaled == pytest.approx(0.0, abs=1e-12)

    degenerate = task_relevance(np.zeros(3), b, a, b)
    assert degenerate.degenerate
    assert degenerate.raw == 0.5 and degenerate.rescaled == pytest.approx(0.5)


def test_task_relevance_is_symmetric():
    rng = make_rng(0, "test", "relevance")
    a1, b1, a2, b2 = rng.standard_normal((4, 7))
    assert task_relevance(a1, b1, a2, b2).raw == pytest.approx(task_relevance(a2, b2, a1, b1).raw)
    with pytest.raises(ShapeError):
        task_relevance(a1, b1, a2[:3], b2)


def test_routing_loss_empty_and_single_record():
    F = softmax(np.array([0.2, 0.1, -0.3, 0.0]))
    empty = refusal_routing_loss(F, [], temperature=0.1)
    assert empty.loss == 0.0 and np.all(empty.grad_F == 0.0)
    for r in (0.0, 0.4, 1.0):
        single = refusal_routing_loss(F, [RoutingRecord(F=softmax(np.ones(4)), relevance=r)], temperature=0.1)
        assert single.loss == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ParameterError):
        refusal_routing_loss(F, [], temperature=0.0)


def test_routing_loss_matches_direct_formula():
    rng = make_rng(0, "test", "routing")
    F = softmax(rng.standard_normal(4))
    prev = [softmax(rng.standard_normal(4)) for _ in range(3)]
    r = np.array([1.0, 0.0, 0.3])
    tau = 0.1
    sims = np.array([cosine_sim(F, p) for p in prev])
    pos = special.log_softmax(sims / tau)
    neg = special.log_softmax(-sims / tau)
    expected = -np.sum(r * pos + (1 - r) * neg)
    records = [RoutingRecord(F=p, relevance=float(x)) for p, x in zip(prev, r)]
    assert refusal_routing_loss(F, records, tau).loss == pytest.approx(expected)


def test_routing_loss_gradient_wrt_router_output():
    rng = make_rng(0, "test", "routing-grad")
    records = [RoutingRecord(F=softmax(rng.standard_normal(4)), relevance=x) for x in (0.8, 0.1, 0.5)]

    def loss_fn(params):
        result = refusal_routing_loss(params["F"], records, temperature=0.5)
        return result.loss, {"F": result.grad_F}

    assert finite_diff_check(loss_fn, {"F": softmax(rng.standard_normal(4))}).passed


@pytest.mark.parametrize("anchor", [None, 0.0])
def test_routing_loss_pulls_toward_relevant_and_away_from_irrelevant(anchor):
    F1 = softmax(np.array([3.0, 0.0, 0.0, 0.0]))
    F2 = softmax(np.array([0.0, 0.0, 0.0, 3.0]))
    records = [RoutingRecord(F=F1, relevance=1.0), RoutingRecord(F=F2, relevance=0.0)]
    z = np.zeros(4)
    start_relevant, start_irrelevant = cosine_sim(softmax(z), F1), cosine_sim(softmax(z), F2)
    for _ in range(100):
        _, d_logits = routing_loss_logit_grads(z[None, :], records, temperature=0.5, anchor=anchor)
        z = z - 1.0 * d_logits[0]
    assert cosine_sim(softmax(z), F1) > start_relevant + 0.05
    assert cosine_sim(softmax(z), F2) < start_irrelevant - 0.05


def test_anchored_routing_loss_acts_on_a_single_record():
    F = softmax(np.array([0.2, 0.1, -0.3, 0.0]))
    prev = softmax(np.array([1.0, 0.0, 0.0, -1.0]))
    tau = 0.1
    s = cosine_sim(F, prev)
    related = refusal_routing_loss(F, [RoutingRecord(F=prev, relevance=1.0)], tau, anchor=0.0)
    assert related.loss == pytest.approx(np.log1p(np.exp(-s / tau)))
    unrelated = refusal_routing_loss(F, [RoutingRecord(F=prev, relevance=0.0)], tau, anchor=0.0)
    assert unrelated.loss == pytest.approx(np.log1p(np.exp(s / tau)))

    step = 1e-3
    assert cosine_sim(F - step * related.grad_F, prev) > s
    assert cosine_sim(F - step * unrelated.grad_F, prev) < s


def test_anchored_routing_loss_gradient_wrt_router_output():
    rng = make_rng(0, "test", "routing-anchor-grad")
    records = [RoutingRecord(F=softmax(rng.standard_normal(4)), relevance=x) for x in (0.8, 0.1)]

    def loss_fn(params):
        result = refusal_routing_loss(params["F"], records, temperature=0.5, anchor=0.0)
        return result.loss, {"F": result.grad_F}

    assert finite_diff_check(loss_fn, {"F": softmax(rng.standard_normal(4))}).passed


def test_replay_loss_values():
    logits = np.array([0.5, -0.2, 1.0, 0.0])
    same = router_replay_loss(logits, softmax(logits))
    assert same.loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(same.grad_logits, 0.0)

    one_hot = router_replay_loss(np.zeros(4), np.array([0.0, 1.0, 0.0, 0.0]))
    assert one_hot.loss == pytest.approx(np.log(4))

    rng = make_rng(0, "test", "replay")
    p, z = softmax(rng.standard_normal(4)), rng.standard_normal(4)
    q = softmax(z)
    result = router_replay_loss(z, p)
    assert result.loss == pytest.approx(np.sum(p * np.log(p / q)))
    assert np.allclose(result.grad_logits, q - p)


def test_replay_loss_rejects_bad_record():
    with pytest.raises(DataError):
        router_replay_loss(np.zeros(3), np.array([0.5, 0.2, 0.2]))
    with pytest.raises(ShapeError):
        router_replay_loss(np.zeros(3), np.array([0.5, 0.5]))


def test_refusal_ce_loss():
    assert refusal_ce_loss(np.zeros(5), 3).loss == pytest.approx(np.log(5))
    assert refusal_ce_loss(np.array([0.0, 40.0]), 1).loss == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(LabelError):
        refusal_ce_loss(np.zeros(5), 7)


def _tiny_lm(rng, dim=5):
    return MockLM(visual_readout=rng.standard_normal((3, dim)), text_readout=rng.standard_normal((3, dim)),
                  class_kinds=(ANSWER, ANSWER, REFUSAL), class_categories=("a", "b", "a"))


def test_unselected_refusers_get_zero_gradient():
    rng = make_rng(0, "test", "steered")
    lm = _tiny_lm(rng)
    bank = RefuserBank.initialise(4, 5, seed=0, scale=0.5)
    router_logits = np.array([[0.5, 2.0, -1.0, 1.0]])
    result = steered_ce(bank, lm, np.eye(5), router_logits, 2, rng.standard_normal(5), rng.standard_normal(5), [2])
    assert np.all(result.grad_bank[0] == 0.0) and np.all(result.grad_bank[2] == 0.0)
    assert np.any(result.grad_bank[1] != 0.0) and np.any(result.grad_bank[3] != 0.0)
    assert result.grad_router_logits[0, 0] == 0.0 and result.grad_router_logits[0, 2] == 0.0


def test_steered_ce_with_zero_beta_ignores_refusers():
    rng = make_rng(0, "test", "steered-beta")
    lm = _tiny_lm(rng)
    x_img, x_txt = rng.standard_normal((2, 5))
    a = steered_ce(RefuserBank.initialise(4, 5, 0, 1.0), lm, np.eye(5), np.zeros((1, 4)), 2, x_img, x_txt, [2], beta=0.0)
    b = steered_ce(RefuserBank.initialise(4, 5, 1, 1.0), lm, np.eye(5), np.zeros((1, 4)), 2, x_img, x_txt, [2], beta=0.0)
    assert a.loss == pytest.approx(b.loss)
    assert np.all(a.grad_bank == 0.0)


def test_activation_counts_sum_to_k_per_sample():
    rng = make_rng(0, "test", "counts")
    logits = rng.standard_normal((7, 4))
    counts = activation_counts(logits, 2, 4)
    assert counts.sum() == 14
    assert counts.shape == (4,)
