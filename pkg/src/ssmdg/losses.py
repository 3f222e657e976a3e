"""Objective terms.

Probability inputs are ``[n, C]`` softmax tensors. Per-sample helpers return
``[n, 1]`` columns; set-level losses return shape-``[1]`` tensors and are
exactly zero on an empty set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_FLOOR = 1e-12


def _labels(labels, n: int, C: int) -> np.ndarray:
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    if idx.size != n:
        raise ValueError(f"{idx.size} labels for {n} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= C):
        raise IndexError(f"label out of range for {C} classes")
    return idx


def _rows(p) -> tuple:
    p = dc.as_tensor(p)
    if p.data.ndim == 1:
        return p, 1, p.shape[0]
    return p, p.shape[0], p.shape[1]


def cross_entropy(labels, p) -> Tensor:
    """Per-row ``-log p[label]`` with the probability clamped at 1e-12."""
    p, n, C = _rows(p)
    idx = _labels(labels, n, C)
    picked = dc.clamp_min(dc.gather_index(p, idx), PROB_FLOOR)
    return dc.scale(dc.log(picked), -1.0)


def gce(labels, p, q: float) -> Tensor:
    """Per-row generalized cross-entropy ``(1 - p[label]**q) / q``."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    p, n, C = _rows(p)
    idx = _labels(labels, n, C)
    picked = dc.clamp_min(dc.gather_index(p, idx), PROB_FLOOR)
    powed = dc.pow_scalar(picked, q)
    one = Tensor(np.ones_like(powed.data))
    return dc.scale(dc.sub(one, powed), 1.0 / q)


def _set_mean(per_head_terms: Sequence[Tensor]) -> Tensor:
    return dc.mean_all(dc.sum_all(per_head_terms))


def loss_sup(heads: Sequence[Tensor], labels) -> Tensor:
    """Mean over labeled rows of the summed CE of every unimodal head and the fused head."""
    if heads[0].shape[0] == 0:
        raise ValueError("loss_sup: empty labeled batch")
    return _set_mean([cross_entropy(labels, p) for p in heads])


def loss_cdcr(strong_heads: Sequence[Tensor], pseudo_labels) -> Tensor:
    """Consensus-set consistency: mean of summed strong-view CE against fixed pseudo-labels."""
    if len(np.asarray(pseudo_labels).reshape(-1)) == 0:
        return dc.zeros_scalar(strong_heads[0].data.dtype)
    return _set_mean([cross_entropy(pseudo_labels, p) for p in strong_heads])


def loss_dar(weak_heads: Sequence[Tensor], strong_heads: Sequence[Tensor], pseudo_labels, q: float = 0.7,
             kind: str = "gce", views: str = "both") -> Tensor:
    """Disagreement-set loss over both views and all heads.

    ``kind="ce"`` and ``views`` in {"weak", "strong"} give the ablation forms.
    Weak-view probabilities keep their gradient here.
    """
    ref = weak_heads[0] if weak_heads else strong_heads[0]
    if len(np.asarray(pseudo_labels).reshape(-1)) == 0:
        return dc.zeros_scalar(ref.data.dtype)
    if views not in ("both", "weak", "strong"):
        raise ValueError(f"unknown DAR views {views!r}")
    used = []
    if views in ("both", "weak"):
        used.extend(weak_heads)
    if views in ("both", "strong"):
        used.extend(strong_heads)
    if kind == "gce":
        terms = [gce(pseudo_labels, p, q) for p in used]
    elif kind == "ce":
        terms = [cross_entropy(pseudo_labels, p) for p in used]
    else:
        raise ValueError(f"unknown DAR loss kind {kind!r}")
    return _set_mean(terms)


def align_pair(z: Tensor, mu, mu_bar) -> Tensor:
    """Per-row ``||z - mu||^2 + ||z - mu_bar||^2``; both targets are constants."""
    mu = Tensor(np.asarray(mu.data if isinstance(mu, Tensor) else mu, dtype=z.data.dtype).reshape(z.shape))
    mu_bar = Tensor(np.asarray(mu_bar.data if isinstance(mu_bar, Tensor) else mu_bar, dtype=z.data.dtype).reshape(z.shape))
    return dc.add(dc.sq_l2_dist(z, mu), dc.sq_l2_dist(z, mu_bar))


@dataclass
class LossBreakdown:
    sup: float
    cdcr: float
    dar: float
    cmpa: float
    total: float
    counts: Dict[str, int] = field(default_factory=dict)
    lambdas: tuple = (1.0, 0.1, 0.1)

    def check(self, tol: float = 1e-9) -> None:
        l1, l2, l3 = self.lambdas
        expect = self.sup + l1 * self.cdcr + l2 * self.dar + l3 * self.cmpa
        if abs(expect - self.total) > tol * max(1.0, abs(expect)):
            raise AssertionError(f"loss breakdown does not add up: {expect} vs {self.total}")


def total_objective(sup: Tensor, cdcr: Tensor, dar: Tensor, cmpa: Tensor,
                    lambda_cdcr: float = 1.0, lambda_dar: float = 0.1, lambda_cmpa: float = 0.1,
                    counts=None):
    """Weighted sum of the four terms; returns (differentiable total, LossBreakdown)."""
    lams = (lambda_cdcr, lambda_dar, lambda_cmpa)
    if min(lams) < 0:
        raise ValueError("loss weights must be non-negative")
    total = sup
    for w, term in zip(lams, (cdcr, dar, cmpa)):
        if w != 0.0:
            total = dc.add(total, dc.scale(term, w))
    vals = [t.item() for t in (sup, cdcr, dar, cmpa)]
    breakdown = LossBreakdown(*vals, total=total.item(), counts=dict(counts or {}), lambdas=lams)
    return total, breakdown
