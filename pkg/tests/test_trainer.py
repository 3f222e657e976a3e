import copy

import numpy as np
import pytest

from ssmdg import diffcore as dc
from ssmdg.config import ExperimentConfig, apply_overrides
from ssmdg.datagen import leave_one_out
from ssmdg.gating import GateDecision, Tag
from ssmdg.losses import loss_sup
from ssmdg.model import forward, init_model
from ssmdg.prototypes import PrototypeBank, cross_domain_avg
from ssmdg.trainer import (
    SourcePool, assemble_batch, build_datasets, evaluate, metrics_csv, model_config_for,
    pseudo_label_metrics, run_experiment, train_and_eval, train_step,
)

from gate_oracle import oracle

TINY = [
    "task.input_dims=[6,6]", "task.latent_dim=4", "task.class_separation=4.0",
    "split.samples_per_class=12", "split.labels_per_class=2",
    "model.feature_dim=4", "model.encoder_hidden=8", "model.translator_hidden=5",
    "train.batch_size=8", "train.steps=6", "train.eval_interval=3",
]


def tiny(*extra):
    return apply_overrides(ExperimentConfig(), TINY + list(extra))


def fresh(cfg, seed=0, target=0):
    ds = build_datasets(cfg, seed)
    src, test = leave_one_out(ds, target)
    pool = SourcePool.from_sources(src)
    model = init_model(model_config_for(cfg, seed))
    bank = PrototypeBank(model.config.feature_dims, cfg.task.num_classes, cfg.task.num_domains, cfg.cmpa.alpha)
    opt = dc.AdamWState(lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    return pool, test, model, bank, opt


# ------------------------------------------------------------------ batches

def test_batch_sizes_and_provenance():
    cfg = tiny("train.mu_ratio=2")
    pool, test, *_ = fresh(cfg, target=1)
    b = assemble_batch(pool, cfg, 0, 1)
    assert b.labels.size == 8 and b.unlabeled_ids.size == 16
    assert set(b.labeled_domain.tolist()) | set(b.unlabeled_domain.tolist()) <= {0, 2}
    assert not set(test.ids.tolist()) & (set(b.labeled_ids.tolist()) | set(b.unlabeled_ids.tolist()))
    for views in (b.labeled_weak, b.unlabeled_weak, b.unlabeled_strong):
        assert [v.shape[1] for v in views] == [6, 6]


def test_batch_deterministic_per_step():
    cfg = tiny()
    pool, *_ = fresh(cfg)
    a, b, c = assemble_batch(pool, cfg, 0, 4), assemble_batch(pool, cfg, 0, 4), assemble_batch(pool, cfg, 0, 5)
    assert a.unlabeled_strong[0].tobytes() == b.unlabeled_strong[0].tobytes()
    assert a.unlabeled_strong[0].tobytes() != c.unlabeled_strong[0].tobytes()


def test_empty_pool_rejected():
    with pytest.raises(ValueError):
        SourcePool.from_sources([])


# ------------------------------------------------------------------- steps

def test_zero_lambdas_equal_supervised_step():
    cfg = tiny("loss.cdcr=0", "loss.dar=0", "loss.cmpa=0", "gate.tau=0.05")
    pool, _, model, bank, opt = fresh(cfg)
    ref = copy.deepcopy(model)
    ref_opt = copy.deepcopy(opt)
    batch = assemble_batch(pool, cfg, 0, 1)
    m = train_step(model, bank, batch, opt, cfg, 1)
    assert m.n_consensus + m.n_disagreement > 0
    grads = dc.backward(loss_sup(forward(ref, batch.labeled_weak).heads, batch.labels), ref.params)
    dc.adamw_step(ref.params, grads, ref_opt)
    for k in model.params:
        np.testing.assert_array_equal(model.params[k].data, ref.params[k].data)


def test_nothing_accepted_means_total_is_sup():
    cfg = tiny("gate.tau=0.999999")
    pool, _, model, bank, opt = fresh(cfg)
    m = train_step(model, bank, assemble_batch(pool, cfg, 0, 1), opt, cfg, 1)
    assert m.utilization == 0.0 and m.pl_accuracy is None
    assert m.breakdown.total == m.breakdown.sup


def test_breakdown_adds_up_every_step():
    cfg = tiny("gate.tau=0.15")
    pool, _, model, bank, opt = fresh(cfg)
    for step in range(1, 5):
        m = train_step(model, bank, assemble_batch(pool, cfg, 0, step), opt, cfg, step)
        m.breakdown.check()
        assert 0.0 <= m.utilization <= 1.0


# ----------------------------------------- term-by-term reference of one step

def _np_softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _np_mlp(P, pre, x):
    h = np.maximum(x @ P[pre + ".w1"] + P[pre + ".b1"], 0.0)
    return h @ P[pre + ".w2"] + P[pre + ".b2"]


def _np_forward(P, xs):
    z = [_np_mlp(P, f"enc{m}", x) for m, x in enumerate(xs)]
    heads = [_np_softmax(z[m] @ P[f"head{m}.w"] + P[f"head{m}.b"]) for m in range(2)]
    heads.append(_np_softmax(np.concatenate(z, 1) @ P["fused.w"] + P["fused.b"]))
    return z, heads


def _reference_terms(P, bank, batch, cfg):
    """Independent numpy evaluation of every objective term for one batch."""
    lam1, lam2, lam3 = cfg.loss.cdcr, cfg.loss.dar, cfg.loss.cmpa
    zl, hl = _np_forward(P, batch.labeled_weak)
    y = batch.labels
    sup = np.mean(sum(-np.log(h[np.arange(y.size), y]) for h in hl))

    # bank update from labeled features (copy, so the real bank is untouched)
    bank = bank.copy()
    for m in range(2):
        for c, k in sorted(set(zip(y.tolist(), batch.labeled_domain.tolist()))):
            rows = (y == c) & (batch.labeled_domain == k)
            mean = zl[m][rows].mean(0)
            if bank.initialized[m][c, k]:
                bank.protos[m][c, k] = cfg.cmpa.alpha * bank.protos[m][c, k] + (1 - cfg.cmpa.alpha) * mean
            else:
                bank.protos[m][c, k] = mean
                bank.initialized[m][c, k] = True

    zw, hw = _np_forward(P, batch.unlabeled_weak)
    zs, hs = _np_forward(P, batch.unlabeled_strong)
    cons, dis, yhat = [], [], {}
    for i in range(batch.unlabeled_ids.size):
        tag, lab = oracle([hw[0][i].tolist(), hw[1][i].tolist()], hw[2][i].tolist(), cfg.gate.tau, "full")
        if tag == "C":
            cons.append(i)
        elif tag == "D":
            dis.append(i)
        if lab is not None:
            yhat[i] = lab
    cdcr = np.mean([sum(-np.log(h[i, yhat[i]]) for h in hs) for i in cons]) if cons else 0.0
    q = cfg.dar.q
    dar = np.mean([sum((1 - h[i, yhat[i]] ** q) / q for h in hw + hs) for i in dis]) if dis else 0.0

    acc = sorted(cons + dis)
    per_sample = []
    for i in acc:
        k = batch.unlabeled_domain[i]
        s = 0.0
        present = False
        for m in range(2):
            mu = bank.get(m, yhat[i], k)
            bar = cross_domain_avg(bank, m, yhat[i], k)
            for zset in (zw, zs):
                zt = _np_mlp(P, f"trans{1 - m}to{m}", zset[1 - m][i:i + 1])[0]
                for vec in (zset[m][i], zt):
                    if mu is not None:
                        s += np.sum((vec - mu) ** 2)
                        present = True
                    if bar is not None:
                        s += np.sum((vec - bar) ** 2)
                        present = True
        if present:
            per_sample.append(s)
    cmpa = float(np.mean(per_sample)) if per_sample else 0.0
    total = sup + lam1 * cdcr + lam2 * dar + lam3 * cmpa
    return dict(sup=sup, cdcr=cdcr, dar=dar, cmpa=cmpa, total=total, n_cons=len(cons), n_dis=len(dis))


def test_step_matches_reference_on_small_fixture():
    # three unlabeled rows: one consensus, two disagreement at this seed
    cfg = tiny("train.batch_size=3", "gate.tau=0.145")
    pool, _, model, bank, opt = fresh(cfg, seed=5)
    # a few earlier steps so the bank and the optimizer moments are populated
    for step in range(1, 4):
        train_step(model, bank, assemble_batch(pool, cfg, 5, step), opt, cfg, step)
    batch = assemble_batch(pool, cfg, 5, 4)
    P = {k: t.data.copy() for k, t in model.params.items()}
    bank0, opt0 = bank.copy(), copy.deepcopy(opt)
    ref = _reference_terms(P, bank0, batch, cfg)

    m = train_step(model, bank, batch, opt, cfg, 4)
    assert ref["n_cons"] > 0 and ref["n_dis"] > 0
    for name in ("sup", "cdcr", "dar", "cmpa", "total"):
        assert getattr(m.breakdown, name) == pytest.approx(ref[name], rel=1e-10, abs=1e-12), name
    assert (m.n_consensus, m.n_disagreement) == (ref["n_cons"], ref["n_dis"])

    # AdamW update rebuilt from a central-difference gradient of the reference total
    eps, t = 1e-6, opt0.step + 1
    b1, b2 = opt0.beta1, opt0.beta2
    rng = np.random.default_rng(0)
    for k in ("fused.w", "head1.b", "enc0.w2", "enc1.b1", "trans1to0.w2", "trans0to1.b1"):
        idx = tuple(rng.integers(0, n) for n in P[k].shape)
        hi, lo = copy.deepcopy(P), copy.deepcopy(P)
        hi[k][idx] += eps
        lo[k][idx] -= eps
        g = (_reference_terms(hi, bank0, batch, cfg)["total"] - _reference_terms(lo, bank0, batch, cfg)["total"]) / (2 * eps)
        mm = b1 * opt0.m[k][idx] + (1 - b1) * g
        vv = b2 * opt0.v[k][idx] + (1 - b2) * g * g
        upd = (mm / (1 - b1 ** t)) / (np.sqrt(vv / (1 - b2 ** t)) + opt0.eps) + opt0.weight_decay * P[k][idx]
        delta = model.params[k].data[idx] - P[k][idx]
        assert delta == pytest.approx(-opt0.lr * upd, rel=1e-4, abs=1e-12), k


def test_pseudo_label_metric_examples():
    ok = GateDecision(Tag.CONSENSUS, 1, 0.99)
    no = GateDecision(Tag.REJECTED, None, 0.3)
    assert pseudo_label_metrics([ok, ok], [1, 1]) == (1.0, 1.0)
    assert pseudo_label_metrics([no, no], [0, 1]) == (None, 0.0)
    decisions = [ok, ok, GateDecision(Tag.DISAGREEMENT, 2, 0.97)] + [no] * 7
    acc, util = pseudo_label_metrics(decisions, [1, 1, 0] + [0] * 7)
    assert acc == pytest.approx(2 / 3) and util == pytest.approx(0.3)
    with pytest.raises(ValueError):
        pseudo_label_metrics([ok], [1, 2])


# --------------------------------------------------------------- evaluation

def test_zero_fill_evaluation_uses_zero_feature():
    cfg = tiny()
    _, test, model, *_ = fresh(cfg)
    for k, t in model.params.items():
        if k.startswith("trans"):
            t.data[...] = 0.0
    # translators output zero -> translate and zero modes agree
    assert evaluate(model, test, missing=0, mode="zero") == evaluate(model, test, missing=0, mode="translate")


def test_run_is_deterministic_and_isolated():
    cfg = tiny("seeds=[0,1]")
    r1, res1 = run_experiment(cfg)
    r2, res2 = run_experiment(cfg, jobs=2)
    assert metrics_csv(res1) == metrics_csv(res2)
    r1.pop("wall_clock_seconds"), r2.pop("wall_clock_seconds")
    assert r1 == r2
    assert len(res1) == 6
    assert r1["summary"]["n_seeds"] == 2
    for run in r1["runs"]:
        accs = [v["accuracy"] for v in run["per_target"].values()]
        assert run["mean_accuracy"] == pytest.approx(np.mean(accs))


def test_csv_columns():
    cfg = tiny("train.steps=2")
    res = train_and_eval(cfg, 0, 0)
    head, *rows = metrics_csv([res]).strip().split("\n")
    assert head.split(",") == ["step", "sup", "cdcr", "dar", "cmpa", "total", "utilization", "pl_accuracy",
                               "n_consensus", "n_disagreement", "seed", "target"]
    assert len(rows) == 2
