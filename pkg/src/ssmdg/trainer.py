"""Training loop, evaluation and the leave-one-domain-out experiment driver."""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .config import ExperimentConfig
from .datagen import DomainDataset, TestSet, augment_batch, leave_one_out, make_task, sample_split, stream
from .gating import GateVariant, gate_batch, partition
from .losses import LossBreakdown, loss_cdcr, loss_dar, loss_sup, total_objective
from .model import Model, ModelConfig, encode, forward, impute_missing, init_model, predict_heads, translate_into
from .prototypes import CMPASwitches, PrototypeBank, ema_update, loss_cmpa

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "step", "sup", "cdcr", "dar", "cmpa", "total",
    "utilization", "pl_accuracy", "n_consensus", "n_disagreement",
]
# appended after the fixed columns so one file can hold several runs
CSV_RUN_COLUMNS = ["seed", "target"]


class NumericFailure(RuntimeError):
    def __init__(self, step: int, breakdown: LossBreakdown):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {asdict(breakdown)}")


# ------------------------------------------------------------------ batches


@dataclass
class SourcePool:
    """All source-domain samples, pooled, with domain ids."""

    labeled_x: List[np.ndarray]
    labeled_y: np.ndarray
    labeled_domain: np.ndarray
    labeled_ids: np.ndarray
    unlabeled_x: List[np.ndarray]
    unlabeled_domain: np.ndarray
    unlabeled_ids: np.ndarray
    _hidden: np.ndarray = field(repr=False)

    @classmethod
    def from_sources(cls, sources: Sequence[DomainDataset]) -> "SourcePool":
        if not sources:
            raise ValueError("no source domains")
        M = len(sources[0].labeled_x)
        return cls(
            labeled_x=[np.concatenate([s.labeled_x[m] for s in sources]) for m in range(M)],
            labeled_y=np.concatenate([s.labeled_y for s in sources]),
            labeled_domain=np.concatenate([np.full(s.n_labeled, s.domain_id) for s in sources]),
            labeled_ids=np.concatenate([s.labeled_ids for s in sources]),
            unlabeled_x=[np.concatenate([s.unlabeled_x[m] for s in sources]) for m in range(M)],
            unlabeled_domain=np.concatenate([np.full(s.n_unlabeled, s.domain_id) for s in sources]),
            unlabeled_ids=np.concatenate([s.unlabeled_ids for s in sources]),
            _hidden=np.concatenate([s.hidden_labels_for_metrics() for s in sources]),
        )

    @property
    def domains(self) -> set:
        return set(self.labeled_domain.tolist()) | set(self.unlabeled_domain.tolist())


@dataclass
class Batch:
    labeled_weak: List[np.ndarray]
    labels: np.ndarray
    labeled_domain: np.ndarray
    labeled_ids: np.ndarray
    unlabeled_weak: List[np.ndarray]
    unlabeled_strong: List[np.ndarray]
    unlabeled_domain: np.ndarray
    unlabeled_ids: np.ndarray
    _hidden: np.ndarray = field(repr=False)

    def hidden_labels_for_metrics(self) -> np.ndarray:
        return self._hidden


def assemble_batch(pool: SourcePool, cfg: ExperimentConfig, seed: int, step: int) -> Batch:
    """Uniform draws from the pooled labeled and unlabeled sets plus their views."""
    n_l, n_u = pool.labeled_y.size, pool.unlabeled_ids.size
    if n_l == 0 or n_u == 0:
        raise ValueError("empty labeled or unlabeled pool")
    B = cfg.train.batch_size
    U = B * cfg.train.mu_ratio
    rng = stream(seed, "batch", step)
    li = rng.choice(n_l, size=B, replace=n_l < B)
    ui = rng.choice(n_u, size=U, replace=n_u < U)
    aug = stream(seed, "augment", step)
    sigma = cfg.task.noise_sigma
    lw = [augment_batch(x[li], "weak", sigma, aug) for x in pool.labeled_x]
    uw = [augment_batch(x[ui], "weak", sigma, aug) for x in pool.unlabeled_x]
    us = [augment_batch(x[ui], "strong", sigma, aug) for x in pool.unlabeled_x]
    return Batch(
        labeled_weak=lw,
        labels=pool.labeled_y[li],
        labeled_domain=pool.labeled_domain[li],
        labeled_ids=pool.labeled_ids[li],
        unlabeled_weak=uw,
        unlabeled_strong=us,
        unlabeled_domain=pool.unlabeled_domain[ui],
        unlabeled_ids=pool.unlabeled_ids[ui],
        _hidden=pool._hidden[ui],
    )


# -------------------------------------------------------------------- step


@dataclass
class StepMetrics:
    step: int
    breakdown: LossBreakdown
    utilization: float
    pl_accuracy: Optional[float]
    n_consensus: int
    n_disagreement: int
    pl_accuracy_consensus: Optional[float] = None
    pl_accuracy_disagreement: Optional[float] = None

    def csv_row(self) -> list:
        b = self.breakdown
        return [
            self.step, _fmt(b.sup), _fmt(b.cdcr), _fmt(b.dar), _fmt(b.cmpa), _fmt(b.total),
            _fmt(self.utilization), "" if self.pl_accuracy is None else _fmt(self.pl_accuracy),
            self.n_consensus, self.n_disagreement,
        ]


def _fmt(x: float) -> str:
    return repr(float(x))


def _accuracy(pred: np.ndarray, truth: np.ndarray) -> Optional[float]:
    if pred.size == 0:
        return None
    return float((pred == truth).mean())


def pseudo_label_metrics(decisions, hidden_labels) -> Tuple[Optional[float], float]:
    """Accuracy over accepted samples and the accepted fraction."""
    hidden = np.asarray(hidden_labels).reshape(-1)
    if len(decisions) != hidden.size:
        raise ValueError(f"{len(decisions)} decisions for {hidden.size} labels")
    if not decisions:
        return None, 0.0
    acc = [d.pseudo_label == h for d, h in zip(decisions, hidden.tolist()) if d.accepted]
    return (float(np.mean(acc)) if acc else None), len(acc) / len(decisions)


def _rows(heads: Sequence[dc.Tensor], idx: np.ndarray) -> List[dc.Tensor]:
    return [dc.take_rows(h, idx) for h in heads]


def train_step(model: Model, bank: PrototypeBank, batch: Batch, opt: dc.AdamWState,
               cfg: ExperimentConfig, step: int = 0) -> StepMetrics:
    """One optimizer step on the full objective, in place on model/bank/opt."""
    M = model.config.num_modalities

    # supervised term on labeled weak views
    lab = forward(model, batch.labeled_weak)
    sup = loss_sup(lab.heads, batch.labels)

    # prototypes from gradient-isolated labeled features
    for m in range(M):
        ema_update(bank, m, lab.features[m].data.copy(), batch.labels, batch.labeled_domain, cfg.cmpa.alpha)

    # gating on weak unlabeled predictions (values only)
    weak = forward(model, batch.unlabeled_weak)
    decisions, utilization = gate_batch(
        [h.data for h in weak.unimodal], weak.fused.data, cfg.gate.tau, GateVariant(cfg.gate.variant)
    )
    cons, dis, pseudo = partition(decisions)
    strong = forward(model, batch.unlabeled_strong)

    cdcr = loss_cdcr(_rows(strong.heads, cons), pseudo[cons]) if cons.size else loss_cdcr(strong.heads, [])
    if dis.size:
        dar = loss_dar(_rows(weak.heads, dis), _rows(strong.heads, dis), pseudo[dis],
                       q=cfg.dar.q, kind=cfg.dar.kind, views=cfg.dar.views)
    else:
        dar = loss_dar(weak.heads, strong.heads, [], q=cfg.dar.q)

    accepted = np.sort(np.concatenate([cons, dis]))
    if accepted.size:
        feats = {
            "weak": [dc.take_rows(weak.features[m], accepted) for m in range(M)],
            "strong": [dc.take_rows(strong.features[m], accepted) for m in range(M)],
        }
        switches = CMPASwitches(cfg.cmpa.cross_domain, cfg.cmpa.translated, cfg.cmpa.views)
        trans = {}
        if switches.translated:
            for j, zs in feats.items():
                avail = dict(enumerate(zs))
                trans[j] = [translate_into(model, m, avail) for m in range(M)]
        cmpa = loss_cmpa(bank, feats, trans, pseudo[accepted], batch.unlabeled_domain[accepted], switches)
    else:
        cmpa = dc.zeros_scalar()

    counts = {"labeled": int(batch.labels.size), "consensus": int(cons.size), "disagreement": int(dis.size)}
    total, breakdown = total_objective(sup, cdcr, dar, cmpa, cfg.loss.cdcr, cfg.loss.dar, cfg.loss.cmpa, counts)
    if not np.isfinite(breakdown.total):
        raise NumericFailure(step, breakdown)
    grads = dc.backward(total, model.params)
    dc.adamw_step(model.params, grads, opt)

    hidden = batch.hidden_labels_for_metrics()
    pl_acc, _ = pseudo_label_metrics(decisions, hidden)
    return StepMetrics(
        step=step,
        breakdown=breakdown,
        utilization=utilization,
        pl_accuracy=pl_acc,
        n_consensus=int(cons.size),
        n_disagreement=int(dis.size),
        pl_accuracy_consensus=_accuracy(pseudo[cons], hidden[cons]),
        pl_accuracy_disagreement=_accuracy(pseudo[dis], hidden[dis]),
    )


# --------------------------------------------------------------- evaluation


def evaluate(model: Model, data: TestSet, missing: Optional[int] = None, mode: str = "zero") -> float:
    """Fused-head accuracy on raw inputs, optionally with one modality absent."""
    if data.y.size == 0:
        return 0.0
    M = model.config.num_modalities
    feats = {m: encode(model, m, data.x[m]) for m in range(M) if m != missing}
    if missing is not None:
        feats[missing] = impute_missing(model, feats, missing, mode)
    out = predict_heads(model, [feats[m] for m in range(M)])
    return float((out.fused.data.argmax(axis=1) == data.y).mean())


def model_config_for(cfg: ExperimentConfig, seed: int) -> ModelConfig:
    M = cfg.task.num_modalities
    return ModelConfig(
        input_dims=cfg.task.input_dims,
        num_classes=cfg.task.num_classes,
        feature_dims=(cfg.model.feature_dim,) * M,
        encoder_hidden=cfg.model.encoder_hidden,
        translator_hidden=cfg.model.translator_hidden,
        init_seed=int(seed),
        dtype=cfg.model.dtype,
    )


def build_datasets(cfg: ExperimentConfig, seed: int) -> List[DomainDataset]:
    task = make_task(cfg.task)
    return sample_split(task, cfg.split.labels_per_class, seed=seed, samples_per_class=cfg.split.samples_per_class)


@dataclass
class RunResult:
    seed: int
    target: int
    accuracy: float
    missing: Dict[str, float]
    metrics: List[StepMetrics]
    eval_curve: List[Tuple[int, float]]


def train_and_eval(cfg: ExperimentConfig, seed: int, target: int, datasets=None, return_model: bool = False):
    """Train on every domain but ``target`` and evaluate on ``target``."""
    datasets = datasets if datasets is not None else build_datasets(cfg, seed)
    sources, test = leave_one_out(datasets, target)
    pool = SourcePool.from_sources(sources)
    if test.domain_id in pool.domains:
        raise AssertionError("target domain present in training pool")
    model = init_model(model_config_for(cfg, seed))
    bank = PrototypeBank(model.config.feature_dims, cfg.task.num_classes, cfg.task.num_domains, cfg.cmpa.alpha)
    o = cfg.optim
    opt = dc.AdamWState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
    metrics, curve = [], []
    for step in range(1, cfg.train.steps + 1):
        batch = assemble_batch(pool, cfg, _run_seed(seed, target), step)
        metrics.append(train_step(model, bank, batch, opt, cfg, step))
        if step % cfg.train.eval_interval == 0:
            curve.append((step, evaluate(model, test)))
    acc = evaluate(model, test)
    missing = {}
    if cfg.train.missing_eval:
        for m in range(cfg.task.num_modalities):
            for mode in ("zero", "translate"):
                missing[f"missing{m}_{mode}"] = evaluate(model, test, missing=m, mode=mode)
    result = RunResult(seed, target, acc, missing, metrics, curve)
    if return_model:
        return result, model, bank
    return result


def _run_seed(seed: int, target: int) -> int:
    return int(seed) * 1000 + int(target)


def _run_cell(args):
    cfg, seed, target = args
    return train_and_eval(cfg, seed, target)


def run_all(cfg: ExperimentConfig, jobs: int = 1) -> List[RunResult]:
    """Every (seed, target) run; order of results is fixed regardless of ``jobs``."""
    tasks = [(cfg, s, k) for s in cfg.seeds for k in range(cfg.task.num_domains)]
    if jobs <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_cell, tasks))


WARMUP_FRACTION = 0.3


def build_report(cfg: ExperimentConfig, results: List[RunResult], wall_clock: float) -> dict:
    # pseudo-label precision is only summarized after the warm-up window
    warm = int(WARMUP_FRACTION * cfg.train.steps)
    per_seed = []
    for s in cfg.seeds:
        rs = [r for r in results if r.seed == s]
        accs = {str(r.target): r.accuracy for r in rs}
        entry = {
            "seed": s,
            "per_target": {str(r.target): {"accuracy": r.accuracy, "missing": r.missing,
                                           "eval_curve": [list(p) for p in r.eval_curve]} for r in rs},
            "mean_accuracy": float(np.mean(list(accs.values()))),
        }
        late = [m for r in rs for m in r.metrics if m.step > warm]
        cons = [m.pl_accuracy_consensus for m in late if m.pl_accuracy_consensus is not None]
        dis = [m.pl_accuracy_disagreement for m in late if m.pl_accuracy_disagreement is not None]
        entry["pl_accuracy_consensus"] = float(np.mean(cons)) if cons else None
        entry["pl_accuracy_disagreement"] = float(np.mean(dis)) if dis else None
        per_seed.append(entry)
    means = [e["mean_accuracy"] for e in per_seed]
    return {
        "variant": cfg.preset,
        "config": cfg.to_dict(),
        "runs": per_seed,
        "summary": {"mean": float(np.mean(means)), "std": float(np.std(means)), "n_seeds": len(means)},
        "wall_clock_seconds": wall_clock,
    }


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> Tuple[dict, List[RunResult]]:
    """Leave-one-domain-out over every target and seed; returns (report, raw results)."""
    cfg.validate()
    t0 = time.perf_counter()
    results = run_all(cfg, jobs)
    return build_report(cfg, results, time.perf_counter() - t0), results


def metrics_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + CSV_RUN_COLUMNS)
    for r in results:
        for m in r.metrics:
            w.writerow(m.csv_row() + [r.seed, r.target])
    return buf.getvalue()
