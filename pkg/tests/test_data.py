import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisylab.data import (Dataset, GaussianMixtureSpec, batches, generate_gaussian_mixture, load_csv_dataset,
                           split, split_indices, stream_rng, write_csv_dataset)
from noisylab.errors import ParseError, ValidationError


def two_class_spec(n, priors=None):
    return GaussianMixtureSpec(np.array([[-2.0, 0.0], [2.0, 0.0]]), 1.0, priors, n)


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), [0, 1, 2], 2)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), [0, 1, 1], 1)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), [0, 1, 1], 2, [0, 0])
    ds = Dataset(np.zeros((3, 2)), [0, 1, 1], 2)
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


def test_degenerate_prior():
    ds = generate_gaussian_mixture(GaussianMixtureSpec(np.eye(3), 1.0, np.array([1.0, 0.0, 0.0]), 500), 3)
    assert np.all(ds.clean_labels == 0) and ds.noisy_labels is None


def test_class_means_concentrate():
    ds = generate_gaussian_mixture(two_class_spec(100_000), 0)
    for c, mu in enumerate([[-2.0, 0.0], [2.0, 0.0]]):
        assert np.all(np.abs(ds.features[ds.clean_labels == c].mean(axis=0) - mu) < 0.02)


def test_single_class_covariance():
    n = 100_000
    ds = generate_gaussian_mixture(GaussianMixtureSpec(np.array([[1.0, -1.0], [0.0, 0.0]]), 2.5,
                                                       np.array([1.0, 0.0]), n), 4)
    cov = np.cov(ds.features.T)
    assert np.all(np.abs(cov - 2.5 * np.eye(2)) < 5 * 2.5 / np.sqrt(n))


def test_generation_is_deterministic():
    a = generate_gaussian_mixture(two_class_spec(200), 9)
    b = generate_gaussian_mixture(two_class_spec(200), 9)
    assert a.equals(b)
    assert not a.equals(generate_gaussian_mixture(two_class_spec(200), 10))


@pytest.mark.parametrize("spec", [
    GaussianMixtureSpec(np.eye(2), 1.0, np.array([0.6, 0.6]), 10),
    GaussianMixtureSpec(np.eye(2), 1.0, np.array([1.2, -0.2]), 10),
    GaussianMixtureSpec(np.eye(2), 0.0, None, 10),
    GaussianMixtureSpec(np.eye(2), 1.0, None, 0),
    GaussianMixtureSpec(np.array([[1.0, 2.0]]), 1.0, None, 10),
])
def test_invalid_specs(spec):
    with pytest.raises(ValidationError):
        generate_gaussian_mixture(spec, 0)


def test_stream_rng_separates_operations():
    a = stream_rng(0, "mixture").random(5)
    b = stream_rng(0, "class_noise").random(5)
    assert not np.allclose(a, b)
    assert np.array_equal(a, stream_rng(0, "mixture").random(5))
    gen = np.random.default_rng(1)
    assert stream_rng(gen, "split") is gen


# --- CSV ------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    ds = generate_gaussian_mixture(two_class_spec(50), 1)
    ds = ds.with_noisy_labels(1 - ds.clean_labels)
    path = write_csv_dataset(ds, tmp_path / "d.csv")
    text = path.read_text()
    assert text.splitlines()[0] == "f0,f1,clean_label,noisy_label"
    assert "\r" not in text
    assert load_csv_dataset(path).equals(ds)
    clean_only = generate_gaussian_mixture(two_class_spec(20), 2)
    assert load_csv_dataset(write_csv_dataset(clean_only, tmp_path / "c.csv")).equals(clean_only)


def test_csv_small_file(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("f0,clean_label\n0.5,0\n1.5,1\n2.5,1\n")
    ds = load_csv_dataset(path)
    assert ds.n_samples == 3 and ds.num_classes == 2 and ds.noisy_labels is None
    path.write_text("f0,clean_label,noisy_label\n0.5,0,1\n1.5,1,1\n")
    assert load_csv_dataset(path).noisy_labels.tolist() == [1, 1]


@pytest.mark.parametrize("body, line", [
    ("f0,clean_label\n0.5,0\n1.5,2\n", 3),
    ("f0,clean_label\n0.5,0\nabc,1\n", 3),
    ("f0,clean_label\n0.5,0,1\n", 2),
    ("f0,clean_label\n0.5,x\n", 2),
    ("x0,clean_label\n0.5,0\n", 1),
])
def test_csv_errors_carry_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ParseError) as err:
        load_csv_dataset(path, num_classes=2)
    assert err.value.lineno == line and f"line {line}" in str(err.value)


# --- split and batches -------------------------------------------------------------

def test_split_sizes_and_partition():
    train_idx, test_idx = split_indices(10, 0.2, 3)
    assert (len(train_idx), len(test_idx)) == (8, 2)
    assert sorted(np.concatenate([train_idx, test_idx]).tolist()) == list(range(10))
    again = split_indices(10, 0.2, 3)
    assert np.array_equal(again[0], train_idx) and np.array_equal(again[1], test_idx)
    ds = generate_gaussian_mixture(two_class_spec(10), 0)
    tr, te = split(ds, 0.2, 3)
    assert tr.n_samples == 8 and np.array_equal(te.features, ds.features[test_idx])


@pytest.mark.parametrize("n, frac", [(10, 0.01), (3, 0.9), (10, 0.0), (10, 1.0)])
def test_split_rejects_empty_side(n, frac):
    with pytest.raises(ValidationError):
        split_indices(n, frac, 0)


def test_batch_sizes():
    assert [len(b) for b in batches(10, 4, 0)] == [4, 4, 2]
    assert [len(b) for b in batches(9, 4, 0)] == [4, 4]
    with pytest.raises(ValidationError):
        batches(10, 1, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(2, 50), st.integers(0, 1000))
def test_batches_never_repeat_indices(n, size, seed):
    idx = np.concatenate(batches(n, size, seed)) if n >= 2 else np.array([], dtype=int)
    assert len(set(idx.tolist())) == len(idx)
    assert len(idx) >= n - 1
