import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmdg.datagen import (
    InfeasibleSeparation, TaskSpec, augment, augment_batch, energy_shift, export_datasets, generate_domain,
    import_datasets, leave_one_out, make_task, oracle_predict, sample_split, stream,
)


@pytest.fixture(scope="module")
def task():
    return make_task(TaskSpec())


@pytest.fixture(scope="module")
def splits(task):
    return sample_split(task, 5, seed=3, samples_per_class=40)


def test_taskspec_validation():
    with pytest.raises(ValueError):
        TaskSpec(num_modalities=1, input_dims=(4,))
    with pytest.raises(ValueError):
        TaskSpec(input_dims=(4, 4, 4))
    with pytest.raises(ValueError):
        TaskSpec(modality_correlation=1.5)
    with pytest.raises(ValueError):
        TaskSpec(domain_shift_scale=-1.0)


def test_anchor_separation(task):
    a = task.anchors
    d = np.linalg.norm(a[:, None] - a[None], axis=-1)
    assert d[~np.eye(len(a), dtype=bool)].min() >= task.spec.class_separation


def test_infeasible_separation_reports_attempts():
    from ssmdg.datagen import _place_anchors

    with pytest.raises(InfeasibleSeparation, match="after 3 attempts"):
        _place_anchors(TaskSpec(), stream(0, "anchors"), max_attempts=3)


def test_reference_domain_identity_and_conditioning(task):
    for A, b in task.transforms[0]:
        np.testing.assert_array_equal(A, np.eye(A.shape[0]))
        assert not b.any()
    for row in task.transforms[1:]:
        for A, _ in row:
            assert np.linalg.cond(A) <= 100.0 + 1e-9


def test_zero_shift_means_identical_domains():
    t = make_task(TaskSpec(domain_shift_scale=0.0))
    for row in t.transforms:
        for A, b in row:
            np.testing.assert_allclose(A, np.eye(A.shape[0]), atol=1e-12)
            assert not b.any()


def test_shift_monotone():
    vals = [energy_shift(make_task(TaskSpec(domain_shift_scale=s)), n=280, seed=1) for s in (0.0, 0.5, 1.0, 2.0)]
    assert all(a <= b for a, b in zip(vals, vals[1:])), vals


def test_rho_one_shares_everything():
    t = make_task(TaskSpec(modality_correlation=1.0))
    np.testing.assert_array_equal(t.observed[0], t.observed[1])
    xs, y, _ = generate_domain(t, 0, 40, seed=0)
    accs = []
    for m in range(2):
        design = t.mixing[m]
        latent = np.linalg.lstsq(design, xs[m].T, rcond=None)[0].T
        pred = ((latent[:, None] - t.anchors[None]) ** 2).sum(-1).argmin(1)
        accs.append((pred == y).mean())
    assert accs[0] == accs[1]


def test_rho_zero_is_disjoint():
    t = make_task(TaskSpec(modality_correlation=0.0))
    assert not set(t.observed[0].tolist()) & set(t.observed[1].tolist())
    assert sorted(t.observed[0].tolist() + t.observed[1].tolist()) == list(range(t.spec.latent_dim))


def test_split_counts_and_balance(splits):
    for d in splits:
        assert d.n_labeled == 35
        assert np.all(np.bincount(d.labeled_y, minlength=7) == 5)
        assert d.n_labeled <= d.n_unlabeled
        assert not set(d.labeled_ids.tolist()) & set(d.unlabeled_ids.tolist())


def test_percent_labels(task):
    ds = sample_split(task, "5%", seed=0, samples_per_class=1000)
    assert np.all(np.bincount(ds[0].labeled_y) == 50)
    ds = sample_split(task, 0.05, seed=0, samples_per_class=1000)
    assert ds[1].n_labeled == 350


def test_too_many_labels(task):
    with pytest.raises(ValueError):
        sample_split(task, 50, seed=0, samples_per_class=20)


def test_split_deterministic(task, splits):
    again = sample_split(task, 5, seed=3, samples_per_class=40)
    for a, b in zip(splits, again):
        for x, y in zip(a.labeled_x + a.unlabeled_x, b.labeled_x + b.unlabeled_x):
            assert x.tobytes() == y.tobytes()
        assert a.hidden_labels_for_metrics().tobytes() == b.hidden_labels_for_metrics().tobytes()


def test_unlabeled_count_mode(task):
    ds = sample_split(task, 5, n_unlabeled_per_domain=70, seed=0)
    assert ds[0].n_unlabeled == 70


def test_leave_one_out(splits):
    every = set()
    for k in range(3):
        src, test = leave_one_out(splits, k)
        assert [s.domain_id for s in src] == [j for j in range(3) if j != k]
        ids = set(test.ids.tolist())
        for s in src:
            assert not ids & set(s.labeled_ids.tolist()) | set(s.unlabeled_ids.tolist()) & ids
        union = set(ids)
        for s in src:
            union |= set(s.labeled_ids.tolist()) | set(s.unlabeled_ids.tolist())
        every.add(frozenset(union))
        assert test.y.size == test.ids.size == 280
    assert len(every) == 1
    with pytest.raises(IndexError):
        leave_one_out(splits, 3)


def test_augment_zero_noise_weak_is_sign_flip_only():
    x = np.arange(1.0, 9.0)
    v = augment(x, "weak", seed=2, noise_sigma=0.0)
    diff = np.flatnonzero(v != x)
    assert diff.size <= 1
    if diff.size:
        assert v[diff[0]] == -x[diff[0]]


def test_augment_deterministic_and_shape():
    x = np.random.default_rng(0).normal(size=16)
    for s in ("weak", "strong"):
        a, b = augment(x, s, seed=11), augment(x, s, seed=11)
        assert a.shape == x.shape and a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        augment(x, "medium", seed=0)


@given(st.integers(4, 40), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_strong_mask_block(d, seed):
    x = np.ones((3, d))
    v = augment_batch(x, "strong", 0.0, stream(seed, "t"))
    width = d // 4
    for row in v:
        zeros = np.flatnonzero(row == 0.0)
        assert zeros.size == width
        if width:
            assert zeros[-1] - zeros[0] == width - 1


def test_oracle_survives_strong_views(task, splits):
    correct = total = 0
    for k, d in enumerate(splits):
        rng = stream(0, "oracle-check", k)
        views = [augment_batch(x, "strong", task.spec.noise_sigma, rng) for x in d.unlabeled_x]
        pred = oracle_predict(task, views, k)
        correct += (pred == d.hidden_labels_for_metrics()).sum()
        total += pred.size
    assert correct / total >= 0.95


def test_export_round_trip(tmp_path, splits):
    spec = TaskSpec()
    export_datasets(tmp_path / "data.bin", spec, splits)
    spec2, back = import_datasets(tmp_path / "data.bin")
    assert spec2 == spec
    for a, b in zip(splits, back):
        for x, y in zip(a.labeled_x + a.unlabeled_x, b.labeled_x + b.unlabeled_x):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.labeled_y, b.labeled_y)
        np.testing.assert_array_equal(a.unlabeled_ids, b.unlabeled_ids)
        np.testing.assert_array_equal(a.hidden_labels_for_metrics(), b.hidden_labels_for_metrics())
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "data.bin").read_bytes()[4:])
    (tmp_path / "bad.bin.json").write_text((tmp_path / "data.bin.json").read_text())
    with pytest.raises(ValueError):
        import_datasets(tmp_path / "bad.bin")
