"""Class prototypes per (modality, class, domain) and the prototype alignment loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class PrototypeBank:
    """EMA feature centroids. ``protos[m]`` is ``[C, K, d_m]``; cells start uninitialized."""

    def __init__(self, feature_dims: Sequence[int], num_classes: int, num_domains: int, alpha: float = 0.9):
        if not 0.0 <= alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
        self.alpha = float(alpha)
        self.num_classes = int(num_classes)
        self.num_domains = int(num_domains)
        self.protos: List[np.ndarray] = [np.zeros((num_classes, num_domains, d)) for d in feature_dims]
        self.initialized: List[np.ndarray] = [np.zeros((num_classes, num_domains), dtype=bool) for _ in feature_dims]

    @property
    def num_modalities(self) -> int:
        return len(self.protos)

    def get(self, m: int, c: int, k: int) -> Optional[np.ndarray]:
        return self.protos[m][c, k] if self.initialized[m][c, k] else None

    def copy(self) -> "PrototypeBank":
        out = PrototypeBank([p.shape[-1] for p in self.protos], self.num_classes, self.num_domains, self.alpha)
        for m in range(self.num_modalities):
            out.protos[m][...] = self.protos[m]
            out.initialized[m][...] = self.initialized[m]
        return out


def ema_update(bank: PrototypeBank, m: int, features, classes, domains, alpha: Optional[float] = None) -> PrototypeBank:
    """Blend each touched (m, c, k) cell toward its batch mean.

    An uninitialized cell takes the batch mean directly. Cells with no
    features in the batch are not modified.
    """
    a = bank.alpha if alpha is None else float(alpha)
    if not 0.0 <= a < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {a}")
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    feats = np.atleast_2d(feats)
    if feats.shape[1] != bank.protos[m].shape[-1]:
        raise dc.ShapeError(f"ema_update: feature dim {feats.shape[1]} for prototypes of dim {bank.protos[m].shape[-1]}")
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    domains = np.asarray(domains, dtype=np.int64).reshape(-1)
    cells = sorted(set(zip(classes.tolist(), domains.tolist())))
    for c, k in cells:
        rows = (classes == c) & (domains == k)
        mean = feats[rows].mean(axis=0)
        if bank.initialized[m][c, k]:
            bank.protos[m][c, k] = a * bank.protos[m][c, k] + (1.0 - a) * mean
        else:
            bank.protos[m][c, k] = mean
            bank.initialized[m][c, k] = True
    return bank


def cross_domain_avg(bank: PrototypeBank, m: int, c: int, k: int) -> Optional[np.ndarray]:
    """Mean of the class-``c`` prototypes of every other initialized domain."""
    others = [kk for kk in range(bank.num_domains) if kk != k and bank.initialized[m][c, kk]]
    if not others:
        return None
    return bank.protos[m][c, others].mean(axis=0)


@dataclass(frozen=True)
class CMPASwitches:
    cross_domain: bool = True   # False: Intra-Domain variant (no mu_bar term)
    translated: bool = True     # False: Intra-Modal variant (no translated features)
    views: str = "both"         # "weak" / "strong" for the single-view variants


def _targets(bank: PrototypeBank, m: int, labels: np.ndarray, domains: np.ndarray):
    n, d = labels.size, bank.protos[m].shape[-1]
    mu = np.zeros((n, d))
    bar = np.zeros((n, d))
    has_mu = np.zeros(n, dtype=bool)
    has_bar = np.zeros(n, dtype=bool)
    for i, (c, k) in enumerate(zip(labels.tolist(), domains.tolist())):
        p = bank.get(m, c, k)
        if p is not None:
            mu[i], has_mu[i] = p, True
        q = cross_domain_avg(bank, m, c, k)
        if q is not None:
            bar[i], has_bar[i] = q, True
    return mu, bar, has_mu, has_bar


def loss_cmpa(
    bank: PrototypeBank,
    features: dict,
    translated: dict,
    pseudo_labels,
    domains,
    switches: CMPASwitches = CMPASwitches(),
) -> Tensor:
    """Prototype alignment over accepted unlabeled samples.

    ``features[j][m]`` / ``translated[j][m]`` are ``[n, d_m]`` tensors for
    view ``j`` in {"weak", "strong"}. Distances to a missing prototype target
    are dropped, and the mean runs over samples with at least one present
    term.
    """
    labels = np.asarray(pseudo_labels, dtype=np.int64).reshape(-1)
    domains = np.asarray(domains, dtype=np.int64).reshape(-1)
    n = labels.size
    if n == 0:
        return dc.zeros_scalar()
    views = {"both": ("weak", "strong"), "weak": ("weak",), "strong": ("strong",)}[switches.views]

    terms = []   # (per-row column tensor, presence mask)
    present = np.zeros(n, dtype=bool)
    for m in range(bank.num_modalities):
        mu, bar, has_mu, has_bar = _targets(bank, m, labels, domains)
        for j in views:
            sources = [features[j][m]]
            if switches.translated:
                sources.append(translated[j][m])
            for z in sources:
                mu_t = Tensor(mu.astype(z.data.dtype))
                terms.append((dc.sq_l2_dist(z, mu_t), has_mu))
                present |= has_mu
                if switches.cross_domain:
                    bar_t = Tensor(bar.astype(z.data.dtype))
                    terms.append((dc.sq_l2_dist(z, bar_t), has_bar))
                    present |= has_bar
    n_eff = int(present.sum())
    if n_eff == 0:
        return dc.zeros_scalar()
    parts = [dc.weighted_row_sum(mask / n_eff, col) for col, mask in terms if mask.any()]
    return dc.sum_all(parts)
