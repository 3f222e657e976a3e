import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmdg.gating import GateVariant, Tag, gate_batch, gate_sample, partition

from gate_oracle import grid_distributions, oracle

TAU = 0.95
VARIANTS = [v.value for v in GateVariant]


def dist(max_val, argmax, C=3):
    rest = (1.0 - max_val) / (C - 1)
    p = np.full(C, rest)
    p[argmax] = max_val
    return p


def test_consensus_when_one_modality_agrees():
    d = gate_sample([dist(0.97, 2), dist(0.5, 0)], dist(0.96, 2), TAU)
    assert d.tag is Tag.CONSENSUS and d.pseudo_label == 2


def test_disagreement_without_unimodal_match():
    d = gate_sample([dist(0.97, 1), dist(0.97, 0)], dist(0.96, 2), TAU)
    assert d.tag is Tag.DISAGREEMENT and d.pseudo_label == 2


def test_rejected_when_fused_not_confident():
    d = gate_sample([dist(0.99, 1), dist(0.99, 1)], dist(0.90, 1), TAU)
    assert d.tag is Tag.REJECTED and d.pseudo_label is None


def test_agreeing_but_unconfident_modality_is_disagreement():
    d = gate_sample([dist(0.80, 2), dist(0.9, 0)], dist(0.96, 2), TAU)
    assert d.tag is Tag.DISAGREEMENT and d.pseudo_label == 2


def test_threshold_is_strict():
    d = gate_sample([dist(0.99, 0), dist(0.99, 0)], np.array([0.95, 0.025, 0.025]), TAU)
    assert d.tag is Tag.REJECTED


def test_ties_break_to_lowest_index():
    d = gate_sample([np.array([0.5, 0.5, 0.0])] * 2, np.array([0.0, 0.5, 0.5]), 0.4, GateVariant.FUSED_ONLY)
    assert d.pseudo_label == 1


def test_invalid_inputs():
    with pytest.raises(ValueError):
        gate_sample([dist(0.9, 0)], np.array([0.5, 0.6, 0.0]), TAU)
    with pytest.raises(ValueError):
        gate_sample([dist(0.9, 0)], dist(0.9, 0), 1.0)


def test_batch_utilization_edges():
    rejected = [dist(0.5, 0)] * 4
    _, u = gate_batch([np.stack(rejected)] * 2, np.stack(rejected), TAU)
    assert u == 0.0
    conf = np.stack([dist(0.99, i % 3) for i in range(6)])
    _, u = gate_batch([np.stack([dist(0.4, 0)] * 6)] * 2, conf, TAU)
    assert u == 1.0
    assert gate_batch([np.zeros((0, 3))] * 2, np.zeros((0, 3)), TAU) == ([], 0.0)


def test_fused_only_has_no_disagreement():
    uni = [np.stack([dist(0.99, 1)] * 3)] * 2
    fused = np.stack([dist(0.99, 0), dist(0.96, 2), dist(0.9, 0)])
    decisions, u = gate_batch(uni, fused, TAU, GateVariant.FUSED_ONLY)
    assert [d.tag for d in decisions] == [Tag.CONSENSUS, Tag.CONSENSUS, Tag.REJECTED]
    assert u == pytest.approx(2 / 3)


# --------------------------------------------------------- oracle agreement

GRID = grid_distributions()


@pytest.mark.parametrize("variant", VARIANTS)
def test_exhaustive_grid_matches_oracle(variant):
    for pv, pa, pf in itertools.product(GRID, GRID, GRID):
        d = gate_sample([np.array(pv), np.array(pa)], np.array(pf), TAU, variant)
        tag, y = oracle([pv, pa], pf, TAU, variant)
        assert d.tag.value[0].upper() == tag, (pv, pa, pf, variant)
        assert d.pseudo_label == y


@given(st.integers(0, 2**32 - 1), st.sampled_from(VARIANTS), st.integers(2, 4))
@settings(max_examples=200, deadline=None)
def test_random_batches_match_oracle(seed, variant, M):
    rng = np.random.default_rng(seed)
    C = 4
    n = 8
    logits = rng.normal(scale=6.0, size=(M + 1, n, C))
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    decisions, _ = gate_batch(list(probs[:M]), probs[M], 0.9, variant)
    for i, d in enumerate(decisions):
        tag, y = oracle([probs[m, i].tolist() for m in range(M)], probs[M, i].tolist(), 0.9, variant)
        assert d.tag.value[0].upper() == tag
        assert d.pseudo_label == y


# ---------------------------------------------------------------- properties

def _softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


logit_batches = st.integers(0, 2**32 - 1).map(
    lambda s: np.random.default_rng(s).normal(scale=5.0, size=(3, 10, 3))
)


@given(logit_batches, st.sampled_from(VARIANTS[:-1]))
@settings(max_examples=100, deadline=None)
def test_partition_of_fused_confident(logits, variant):
    p = _softmax(logits)
    decisions, u = gate_batch([p[0], p[1]], p[2], 0.8, variant)
    cons, dis, _ = partition(decisions)
    confident = set(np.flatnonzero(p[2].max(-1) > 0.8).tolist())
    assert not set(cons) & set(dis)
    assert set(cons) | set(dis) == confident
    assert u == pytest.approx(len(confident) / 10)


@given(logit_batches, st.sampled_from(VARIANTS), st.floats(0.5, 0.9), st.floats(0.0, 0.09))
@settings(max_examples=100, deadline=None)
def test_raising_tau_never_admits(logits, variant, tau, bump):
    p = _softmax(logits)
    lo, _ = gate_batch([p[0], p[1]], p[2], tau, variant)
    hi, _ = gate_batch([p[0], p[1]], p[2], tau + bump, variant)
    for a, b in zip(lo, hi):
        if a.tag is Tag.REJECTED:
            assert b.tag is Tag.REJECTED


@given(logit_batches)
@settings(max_examples=100, deadline=None)
def test_strict_consensus_subset_of_full(logits):
    p = _softmax(logits)
    strict, _ = gate_batch([p[0], p[1]], p[2], 0.7, "strict")
    full, _ = gate_batch([p[0], p[1]], p[2], 0.7, "full")
    s = {i for i, d in enumerate(strict) if d.tag is Tag.CONSENSUS}
    f = {i for i, d in enumerate(full) if d.tag is Tag.CONSENSUS}
    assert s <= f


@given(logit_batches, st.floats(0.1, 10.0), st.sampled_from(VARIANTS))
@settings(max_examples=100, deadline=None)
def test_logit_scaling_keeps_pseudo_labels(logits, factor, variant):
    p = _softmax(logits)
    q = _softmax(logits * factor)
    a, _ = gate_batch([p[0], p[1]], p[2], 0.01, variant)
    b, _ = gate_batch([q[0], q[1]], q[2], 0.01, variant)
    assert [d.pseudo_label for d in a] == [d.pseudo_label for d in b]
