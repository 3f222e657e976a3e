"""Pseudo-label selection for unlabeled samples.

Each sample lands in the consensus set, the disagreement set, or is
rejected, based on its weak-view head outputs. Ties in argmax resolve to the
lowest class index (``np.argmax`` semantics) and every confidence test is a
strict ``>``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np


class Tag(str, enum.Enum):
    CONSENSUS = "consensus"
    DISAGREEMENT = "disagreement"
    REJECTED = "rejected"


class GateVariant(str, enum.Enum):
    FULL = "full"
    MEAN = "mean"
    ANY2 = "any2"
    STRICT = "strict"
    FUSED_ONLY = "fused_only"


@dataclass(frozen=True)
class GateDecision:
    tag: Tag
    pseudo_label: Optional[int]
    fused_confidence: float

    @property
    def accepted(self) -> bool:
        return self.tag is not Tag.REJECTED


def _check_dist(p: np.ndarray, what: str) -> None:
    tol = 1e-6 if p.dtype == np.float32 else 1e-9
    if p.ndim != 1 or p.size < 2 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"{what} is not a valid probability vector")


def gate_sample(unimodal: Sequence[np.ndarray], fused: np.ndarray, tau: float, variant=GateVariant.FULL) -> GateDecision:
    """Classify one unlabeled sample from its weak-view predictions."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    variant = GateVariant(variant)
    fused = np.asarray(fused)
    uni = [np.asarray(p) for p in unimodal]
    _check_dist(fused, "fused prediction")
    for m, p in enumerate(uni):
        _check_dist(p, f"modality {m} prediction")
        if p.size != fused.size:
            raise ValueError("head outputs disagree on the number of classes")

    y_hat = int(np.argmax(fused))
    conf = float(fused[y_hat])
    if not conf > tau:
        return GateDecision(Tag.REJECTED, None, conf)

    uni_arg = [int(np.argmax(p)) for p in uni]
    uni_conf = [float(p[a]) for p, a in zip(uni, uni_arg)]

    if variant is GateVariant.FUSED_ONLY:
        agree = True
    elif variant is GateVariant.FULL:
        agree = any(a == y_hat and c > tau for a, c in zip(uni_arg, uni_conf))
    elif variant is GateVariant.STRICT:
        agree = all(a == y_hat and c > tau for a, c in zip(uni_arg, uni_conf))
    elif variant is GateVariant.ANY2:
        heads = list(zip(uni_arg, uni_conf)) + [(y_hat, conf)]
        agree = False
        for i in range(len(heads)):
            for j in range(i + 1, len(heads)):
                (ai, ci), (aj, cj) = heads[i], heads[j]
                if ai == aj == y_hat and ci > tau and cj > tau:
                    agree = True
    else:  # MEAN
        confident = [p for p in [*uni, fused] if p.max() > tau]
        avg = np.mean(confident, axis=0)
        agree = bool(avg.max() > tau) and int(np.argmax(avg)) == y_hat
    return GateDecision(Tag.CONSENSUS if agree else Tag.DISAGREEMENT, y_hat, conf)


def gate_batch(
    unimodal: Sequence[np.ndarray], fused: np.ndarray, tau: float, variant=GateVariant.FULL
) -> Tuple[List[GateDecision], float]:
    """Gate every row; ``unimodal[m]`` and ``fused`` are ``[N, C]`` arrays.

    Utilization is the accepted fraction of the batch (consensus only under
    the fused-only reference gate, which has no disagreement set).
    """
    fused = np.asarray(fused)
    n = 0 if fused.size == 0 else fused.shape[0]
    if n == 0:
        return [], 0.0
    decisions = [gate_sample([u[i] for u in unimodal], fused[i], tau, variant) for i in range(n)]
    used = sum(d.accepted for d in decisions)
    return decisions, used / n


def partition(decisions: Sequence[GateDecision]):
    """Row indices and pseudo-labels of the consensus and disagreement sets."""
    cons = [i for i, d in enumerate(decisions) if d.tag is Tag.CONSENSUS]
    dis = [i for i, d in enumerate(decisions) if d.tag is Tag.DISAGREEMENT]
    labels = np.array([d.pseudo_label if d.accepted else -1 for d in decisions], dtype=np.int64)
    return np.array(cons, dtype=np.int64), np.array(dis, dtype=np.int64), labels
