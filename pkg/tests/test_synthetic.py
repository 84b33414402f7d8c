import numpy as np
import pytest

from klue import synthetic


@pytest.fixture(scope="module")
def small_task():
    spec = synthetic.SyntheticTaskSpec(
        feature_dim=24, n_latent=8, n_classes=4, n_train=400, n_val=200, seed=7
    )
    return synthetic.generate_task(spec)


def test_split_shapes(small_task):
    t = small_task
    assert t.train.x.shape == (400, 24)
    assert t.train.labels.shape == (400, 4)
    assert t.train.latents.shape == (400, 8)
    assert len(t.val) == len(t.shifted_val) == 200


def test_determinism_by_seed(small_task):
    again = synthetic.generate_task(small_task.spec)
    np.testing.assert_array_equal(small_task.train.x, again.train.x)
    np.testing.assert_array_equal(small_task.train.labels, again.train.labels)
    assert small_task.class_formulas == again.class_formulas


def test_different_seed_differs(small_task):
    spec = synthetic.SyntheticTaskSpec(**{
        **small_task.spec.to_dict(), "seed": small_task.spec.seed + 1
    })
    other = synthetic.generate_task(spec)
    assert not np.array_equal(small_task.train.x, other.train.x)


def test_basis_is_orthonormal(small_task):
    b = small_task.concept_basis
    np.testing.assert_allclose(b @ b.T, np.eye(b.shape[0]), atol=1e-10)


def test_shifted_basis_angle(small_task):
    # each shifted row keeps unit norm and sits at the configured angle
    # from its original row
    b, s = small_task.concept_basis, small_task.shifted_basis
    np.testing.assert_allclose(np.linalg.norm(s, axis=1), 1.0, atol=1e-10)
    cos = np.sum(b * s, axis=1)
    np.testing.assert_allclose(cos, np.cos(np.deg2rad(15.0)), atol=1e-10)


def test_noiseless_features_recover_latents(small_task):
    # with zero noise, projecting onto the basis recovers the signed latents
    signed = small_task.train.x @ small_task.concept_basis.T
    recovered = (signed > 0).astype(int)
    np.testing.assert_array_equal(recovered, small_task.train.latents)


def test_labels_match_formula_oracle(small_task):
    latents = small_task.train.latents
    for k, terms in enumerate(small_task.class_formulas):
        expected = np.zeros(len(latents), dtype=bool)
        for term in terms:
            expected |= latents[:, list(term)].all(axis=1)
        np.testing.assert_array_equal(small_task.train.labels[:, k], expected)


def test_every_latent_appears_in_some_formula(small_task):
    used = {c for terms in small_task.class_formulas for t in terms for c in t}
    assert used == set(range(small_task.spec.n_latent))


def test_label_flip_rate():
    spec = synthetic.SyntheticTaskSpec(
        feature_dim=24, n_latent=8, n_classes=4, n_train=5000, n_val=100,
        label_flip_prob=0.15, seed=1,
    )
    noisy = synthetic.generate_task(spec)
    clean_spec = synthetic.SyntheticTaskSpec(**{
        **spec.to_dict(), "label_flip_prob": 0.0
    })
    clean = synthetic.generate_task(clean_spec)
    # same latents are drawn before the flip branch diverges the stream,
    # so compare label disagreement against the formula oracle instead
    oracle = synthetic._eval_formulas(noisy.train.latents, noisy.class_formulas)
    rate = (noisy.train.labels != oracle).mean()
    assert rate == pytest.approx(0.15, abs=0.02)
    assert (clean.train.labels == synthetic._eval_formulas(
        clean.train.latents, clean.class_formulas)).all()


def test_task_rulebase_mirrors_formulas(small_task):
    from klue import rulebase as rbm

    rb = synthetic.task_rulebase(small_task)
    assert rbm.validate(rb) == []
    assert rb.T == small_task.spec.n_latent
    forward = {(r.class_index, r.antecedent) for r in rb.forward_rules()}
    expected = {
        (k, tuple(sorted(term)))
        for k, terms in enumerate(small_task.class_formulas)
        for term in terms
    }
    assert forward == expected
    assert len(rb.forward_rules()) == len(rb.converse_rules())
    assert all(r.is_positive() for r in rb.rules)


def test_spec_validation():
    with pytest.raises(synthetic.TaskError, match="feature_dim"):
        synthetic.SyntheticTaskSpec(feature_dim=10, n_latent=8)
    with pytest.raises(synthetic.TaskError, match="term size"):
        synthetic.SyntheticTaskSpec(term_size_min=5, term_size_max=3)
    with pytest.raises(synthetic.TaskError):
        synthetic.SyntheticTaskSpec(n_classes=0)


def test_spec_dict_roundtrip(small_task):
    d = small_task.spec.to_dict()
    assert synthetic.SyntheticTaskSpec.from_dict(d) == small_task.spec


def test_dataset_npz_roundtrip(tmp_path, small_task):
    path = tmp_path / "ds.npz"
    synthetic.save_dataset(path, small_task.val)
    ds = synthetic.load_dataset(path)
    np.testing.assert_array_equal(ds.x, small_task.val.x)
    np.testing.assert_array_equal(ds.labels, small_task.val.labels)
    np.testing.assert_array_equal(ds.latents, small_task.val.latents)


def test_dataset_version_check(tmp_path, small_task):
    path = tmp_path / "ds.npz"
    np.savez_compressed(
        path, format_version=np.int64(99), x=small_task.val.x,
        labels=small_task.val.labels, latents=small_task.val.latents,
    )
    with pytest.raises(synthetic.TaskError, match="version"):
        synthetic.load_dataset(path)


def test_csv_export_roundtrips_values(small_task):
    import csv
    import io

    text = synthetic.dataset_to_csv(small_task.val)
    rows = list(csv.reader(io.StringIO(text)))
    assert len(rows) == len(small_task.val) + 1
    assert rows[0][:2] == ["x0", "x1"]
    first = rows[1]
    f = small_task.spec.feature_dim
    np.testing.assert_array_equal(
        np.array(first[:f], dtype=np.float64), small_task.val.x[0]
    )
    assert [int(v) for v in first[f : f + 4]] == list(small_task.val.labels[0])
