"""Synthetic multi-domain, multi-modality classification tasks.

Each sample has a latent vector drawn around its class anchor. Modality ``m``
observes a fixed subset of latent coordinates through an orthonormal mixing
map, then a per-domain affine transform is applied. Only the input
distribution moves between domains; the label semantics do not.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import expm

ID_STRIDE = 1_000_000
MAX_CONDITION = 100.0


class InfeasibleSeparation(RuntimeError):
    pass


def stream(seed: int, tag: str, *ids: int) -> np.random.Generator:
    """Independent generator for (seed, purpose tag, ids...)."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode())]
    words.extend(int(i) & 0xFFFFFFFFFFFFFFFF for i in ids)
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True)
class TaskSpec:
    num_modalities: int = 2
    num_classes: int = 7
    num_domains: int = 3
    input_dims: Tuple[int, ...] = (24, 24)
    latent_dim: int = 16
    class_separation: float = 4.0
    within_class_std: float = 1.0
    domain_shift_scale: float = 1.5
    modality_correlation: float = 0.8
    noise_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        self.validate()

    def validate(self) -> None:
        if self.num_modalities < 2:
            raise ValueError("num_modalities must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")
        if len(self.input_dims) != self.num_modalities:
            raise ValueError(f"input_dims has {len(self.input_dims)} entries for {self.num_modalities} modalities")
        if any(d <= 0 for d in self.input_dims):
            raise ValueError("input_dims must be positive")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if not self.class_separation > 0:
            raise ValueError("class_separation must be > 0")
        if self.within_class_std < 0 or self.domain_shift_scale < 0 or self.noise_sigma < 0:
            raise ValueError("std, shift and noise scales must be >= 0")
        if not 0.0 <= self.modality_correlation <= 1.0:
            raise ValueError("modality_correlation must lie in [0, 1]")


@dataclass
class SyntheticTask:
    spec: TaskSpec
    anchors: np.ndarray                      # [C, L]
    observed: List[np.ndarray]               # latent coordinates seen by each modality
    mixing: List[np.ndarray]                 # [d_m, L], zero columns for unseen coordinates
    transforms: List[List[Tuple[np.ndarray, np.ndarray]]]  # [k][m] -> (matrix, offset)

    def observe(self, latent: np.ndarray, domain: int) -> List[np.ndarray]:
        out = []
        for m, G in enumerate(self.mixing):
            A, b = self.transforms[domain][m]
            out.append(latent @ G.T @ A.T + b)
        return out


def _coordinate_split(L: int, M: int, rho: float) -> List[np.ndarray]:
    n_shared = int(round(rho * L))
    shared = list(range(n_shared))
    private = list(range(n_shared, L))
    seen = []
    for m in range(M):
        own = private[m::M]
        seen.append(np.array(sorted(shared + own), dtype=np.int64))
    return seen


def _place_anchors(spec: TaskSpec, rng: np.random.Generator, max_attempts: int = 2000) -> np.ndarray:
    C, L, sep = spec.num_classes, spec.latent_dim, spec.class_separation
    # radius that comfortably fits C points at mutual distance sep
    radius = sep * max(1.0, 0.75 * C ** (1.0 / L))
    anchors: List[np.ndarray] = []
    attempts = 0
    while len(anchors) < C:
        attempts += 1
        if attempts > max_attempts:
            raise InfeasibleSeparation(
                f"placed {len(anchors)} of {C} anchors at separation {sep} after {max_attempts} attempts"
            )
        cand = rng.normal(size=L)
        cand *= radius * rng.uniform() ** (1.0 / L) / np.linalg.norm(cand)
        if all(np.linalg.norm(cand - a) >= sep for a in anchors):
            anchors.append(cand)
    return np.stack(anchors)


def _domain_transform(d: int, shift: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    S = rng.normal(size=(d, d))
    S = (S - S.T) / 2.0
    S /= np.linalg.norm(S, 2)
    rotation = expm(0.5 * shift * S)
    u = rng.uniform(-1.0, 1.0, size=d)
    log_scale = 0.3 * shift * u
    spread = log_scale.max() - log_scale.min()
    if spread > math.log(MAX_CONDITION):
        log_scale *= math.log(MAX_CONDITION) / spread
    A = rotation @ np.diag(np.exp(log_scale))
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    b = 2.0 * shift * direction
    return A, b


def make_task(spec: TaskSpec) -> SyntheticTask:
    spec.validate()
    M, L = spec.num_modalities, spec.latent_dim
    anchors = _place_anchors(spec, stream(spec.seed, "anchors"))
    observed = _coordinate_split(L, M, spec.modality_correlation)
    mixing = []
    for m, d in enumerate(spec.input_dims):
        cols = observed[m]
        if d < cols.size:
            raise ValueError(f"modality {m} has input dim {d} < {cols.size} observed latent coordinates")
        rng = stream(spec.seed, "mixing", m)
        Q, _ = np.linalg.qr(rng.normal(size=(d, cols.size)))
        G = np.zeros((d, L))
        G[:, cols] = Q
        mixing.append(G)
    transforms = []
    for k in range(spec.num_domains):
        row = []
        for m, d in enumerate(spec.input_dims):
            if k == 0:
                row.append((np.eye(d), np.zeros(d)))
            else:
                row.append(_domain_transform(d, spec.domain_shift_scale, stream(spec.seed, "domain", k, m)))
        transforms.append(row)
    return SyntheticTask(spec, anchors, observed, mixing, transforms)


def generate_domain(task: SyntheticTask, domain: int, per_class: int, seed: int):
    """Raw samples for one domain: (inputs per modality, labels, provenance ids)."""
    spec = task.spec
    rng = stream(seed, "samples", spec.seed, domain)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    latent = task.anchors[labels] + spec.within_class_std * rng.normal(size=(labels.size, spec.latent_dim))
    inputs = task.observe(latent, domain)
    ids = domain * ID_STRIDE + np.arange(labels.size, dtype=np.int64)
    return inputs, labels, ids


@dataclass
class DomainDataset:
    domain_id: int
    labeled_x: List[np.ndarray]
    labeled_y: np.ndarray
    labeled_ids: np.ndarray
    unlabeled_x: List[np.ndarray]
    unlabeled_ids: np.ndarray
    _hidden_labels: np.ndarray = field(repr=False)

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_y.size)

    @property
    def n_unlabeled(self) -> int:
        return int(self.unlabeled_ids.size)

    def hidden_labels_for_metrics(self) -> np.ndarray:
        """True labels of the unlabeled pool. Metrics only; never feed to a loss."""
        return self._hidden_labels


@dataclass
class TestSet:
    domain_id: int
    x: List[np.ndarray]
    y: np.ndarray
    ids: np.ndarray


def _labels_per_class(labels_per_class: Union[int, float, str], per_class: int) -> Tuple[int, str]:
    if isinstance(labels_per_class, str):
        text = labels_per_class.strip()
        if text.endswith("%"):
            return _labels_per_class(float(text[:-1]) / 100.0, per_class)
        return _labels_per_class(int(text), per_class)
    if isinstance(labels_per_class, float) and labels_per_class < 1:
        if not labels_per_class > 0:
            raise ValueError(f"label fraction {labels_per_class} must lie in (0, 1)")
        return max(1, int(round(labels_per_class * per_class))), "percent"
    if float(labels_per_class) != int(labels_per_class):
        raise ValueError(f"label count {labels_per_class} must be integral")
    n = int(labels_per_class)
    if n <= 0:
        raise ValueError("labels_per_class must be positive")
    return n, "count"


def sample_split(
    task: SyntheticTask,
    labels_per_class: Union[int, float, str] = 5,
    n_unlabeled_per_domain: Optional[int] = None,
    seed: int = 0,
    samples_per_class: Optional[int] = None,
) -> List[DomainDataset]:
    """Class-balanced labeled/unlabeled pools for every domain.

    ``labels_per_class`` is an absolute count (``5``) or a fraction of each
    class (``0.05`` or ``"5%"``). The number generated per (domain, class) is
    ``samples_per_class`` if given, else labels plus an even share of
    ``n_unlabeled_per_domain``.
    """
    C = task.spec.num_classes
    if samples_per_class is None:
        if n_unlabeled_per_domain is None:
            raise ValueError("give samples_per_class or n_unlabeled_per_domain")
        probe, mode = _labels_per_class(labels_per_class, 10**6)
        if mode == "percent":
            raise ValueError("fractional labels need samples_per_class")
        samples_per_class = probe + -(-int(n_unlabeled_per_domain) // C)
    n_lab, _ = _labels_per_class(labels_per_class, samples_per_class)
    if n_lab > samples_per_class:
        raise ValueError(f"requested {n_lab} labels per class but only {samples_per_class} generated")

    out = []
    for k in range(task.spec.num_domains):
        xs, y, ids = generate_domain(task, k, samples_per_class, seed)
        rng = stream(seed, "split", task.spec.seed, k)
        lab_rows = []
        for c in range(C):
            rows = np.flatnonzero(y == c)
            lab_rows.append(rng.permutation(rows)[:n_lab])
        lab = np.sort(np.concatenate(lab_rows))
        unl = np.setdiff1d(np.arange(y.size), lab)
        out.append(
            DomainDataset(
                domain_id=k,
                labeled_x=[x[lab] for x in xs],
                labeled_y=y[lab],
                labeled_ids=ids[lab],
                unlabeled_x=[x[unl] for x in xs],
                unlabeled_ids=ids[unl],
                _hidden_labels=y[unl],
            )
        )
    return out


def leave_one_out(datasets: Sequence[DomainDataset], target_k: int) -> Tuple[List[DomainDataset], TestSet]:
    if not 0 <= target_k < len(datasets):
        raise IndexError(f"target domain {target_k} out of range for {len(datasets)} domains")
    sources = [d for i, d in enumerate(datasets) if i != target_k]
    t = datasets[target_k]
    test = TestSet(
        domain_id=t.domain_id,
        x=[np.concatenate([a, b]) for a, b in zip(t.labeled_x, t.unlabeled_x)],
        y=np.concatenate([t.labeled_y, t.hidden_labels_for_metrics()]),
        ids=np.concatenate([t.labeled_ids, t.unlabeled_ids]),
    )
    source_ids = set()
    for s in sources:
        source_ids.update(s.labeled_ids.tolist())
        source_ids.update(s.unlabeled_ids.tolist())
    if source_ids.intersection(test.ids.tolist()):
        raise AssertionError("target samples leaked into source pools")
    return sources, test


# ------------------------------------------------------------ augmentation


def _weak(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    n, d = x.shape
    out = x + sigma * rng.normal(size=x.shape) if sigma > 0 else x.copy()
    col = rng.integers(0, d, size=n)
    sign = rng.choice(np.array([-1.0, 1.0]), size=n)
    out[np.arange(n), col] *= sign
    return out


def _strong(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    n, d = x.shape
    out = x + 3.0 * sigma * rng.normal(size=x.shape) if sigma > 0 else x.copy()
    width = int(math.floor(0.25 * d))
    if width > 0:
        start = rng.integers(0, d - width + 1, size=n)
        cols = start[:, None] + np.arange(width)[None, :]
        out[np.arange(n)[:, None], cols] = 0.0
    return out


def augment_batch(x: np.ndarray, strength: str, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Weak or strong views of every row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if strength == "weak":
        return _weak(x, noise_sigma, rng)
    if strength == "strong":
        return _strong(x, noise_sigma, rng)
    raise ValueError(f"unknown augmentation strength {strength!r}")


def augment(sample: np.ndarray, strength: str, seed: int, noise_sigma: float = 0.2) -> np.ndarray:
    """Single-sample view, fully determined by ``seed``.

    weak: Gaussian noise (sigma) and one coordinate multiplied by a random sign.
    strong: Gaussian noise (3 sigma) and a contiguous block of floor(d/4)
    coordinates set to zero.
    """
    arr = np.asarray(sample, dtype=np.float64)
    view = augment_batch(arr.reshape(1, -1), strength, noise_sigma, stream(seed, "augment-" + strength))
    return view.reshape(arr.shape)


# ------------------------------------------------------------ diagnostics


def oracle_predict(task: SyntheticTask, inputs: Sequence[np.ndarray], domain: int) -> np.ndarray:
    """Nearest-anchor classifier that knows the generative model.

    Coordinates that are exactly zero are treated as masked and left out of
    the latent least-squares fit.
    """
    design = np.concatenate(
        [task.transforms[domain][m][0] @ task.mixing[m] for m in range(len(inputs))], axis=0
    )
    offset = np.concatenate([task.transforms[domain][m][1] for m in range(len(inputs))])
    obs = np.concatenate([np.atleast_2d(x) for x in inputs], axis=1)
    preds = np.empty(obs.shape[0], dtype=np.int64)
    for i, row in enumerate(obs):
        keep = row != 0.0
        latent, *_ = np.linalg.lstsq(design[keep], row[keep] - offset[keep], rcond=None)
        preds[i] = ((task.anchors - latent) ** 2).sum(-1).argmin()
    return preds


def energy_shift(task: SyntheticTask, n: int = 400, seed: int = 0, a: int = 0, b: int = 1) -> float:
    """Mean per-coordinate energy distance between domains ``a`` and ``b``."""
    from scipy.stats import energy_distance

    per_class = max(1, n // task.spec.num_classes)
    xa, _, _ = generate_domain(task, a, per_class, seed)
    xb, _, _ = generate_domain(task, b, per_class, seed)
    vals = []
    for m in range(len(xa)):
        for j in range(xa[m].shape[1]):
            vals.append(energy_distance(xa[m][:, j], xb[m][:, j]))
    return float(np.mean(vals))


# ------------------------------------------------------------- file format

_MAGIC = b"SSMD"
_VERSION = 1


def export_datasets(path: Union[str, Path], spec: TaskSpec, datasets: Sequence[DomainDataset]) -> None:
    """Write ``path`` (binary) and ``path.json`` (TaskSpec sidecar).

    Layout, little-endian: magic, u32 version, u32 M, C, K, M x u32 dims,
    K x (u32 n_l, u32 n_u); then per domain: labeled f64 blocks per
    modality, i32 labels, i64 ids, unlabeled f64 blocks, i32 hidden
    labels, i64 ids.
    """
    path = Path(path)
    M, C, K = spec.num_modalities, spec.num_classes, len(datasets)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", _VERSION, M, C, K))
        fh.write(struct.pack(f"<{M}I", *spec.input_dims))
        for d in datasets:
            fh.write(struct.pack("<2I", d.n_labeled, d.n_unlabeled))
        for d in datasets:
            for x in d.labeled_x:
                fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
            fh.write(d.labeled_y.astype("<i4").tobytes())
            fh.write(d.labeled_ids.astype("<i8").tobytes())
            for x in d.unlabeled_x:
                fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
            fh.write(d.hidden_labels_for_metrics().astype("<i4").tobytes())
            fh.write(d.unlabeled_ids.astype("<i8").tobytes())
    sidecar = asdict(spec)
    sidecar["input_dims"] = list(spec.input_dims)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def import_datasets(path: Union[str, Path]) -> Tuple[TaskSpec, List[DomainDataset]]:
    path = Path(path)
    spec = TaskSpec(**json.loads(Path(str(path) + ".json").read_text()))
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError("not a dataset file")
    off = 4
    version, M, C, K = struct.unpack_from("<4I", buf, off)
    off += 16
    if version != _VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    dims = struct.unpack_from(f"<{M}I", buf, off)
    off += 4 * M
    if tuple(dims) != spec.input_dims or M != spec.num_modalities or C != spec.num_classes:
        raise ValueError("binary header disagrees with JSON sidecar")
    counts = []
    for _ in range(K):
        counts.append(struct.unpack_from("<2I", buf, off))
        off += 8

    def take(dtype, n):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).copy()
        off += arr.nbytes
        return arr

    out = []
    for k, (n_l, n_u) in enumerate(counts):
        lx = [take("<f8", n_l * d).reshape(n_l, d).astype(np.float64) for d in dims]
        ly = take("<i4", n_l).astype(np.int64)
        lid = take("<i8", n_l).astype(np.int64)
        ux = [take("<f8", n_u * d).reshape(n_u, d).astype(np.float64) for d in dims]
        uy = take("<i4", n_u).astype(np.int64)
        uid = take("<i8", n_u).astype(np.int64)
        out.append(DomainDataset(k, lx, ly, lid, ux, uid, uy))
    return spec, out
