"""Datasets: synthetic Gaussian mixtures, CSV ingestion, splitting and batching."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from noisylab.errors import ParseError, ValidationError


# Fixed stream tags keep operations that share an integer seed statistically
# independent (e.g. generating and then corrupting labels with seed 0).
STREAMS = {"mixture": 1, "split": 2, "batches": 3, "class_noise": 4, "instance_noise": 5,
           "downsample": 6, "init": 7, "augment": 8, "projection": 9}


def stream_rng(seed, stream: str) -> np.random.Generator:
    """Generator for one named operation; a Generator passed in is used as is."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream],)))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Features with clean labels and optionally noisy labels.

    Arrays are copied and made read-only on construction, so a Dataset can be
    shared freely.
    """

    features: np.ndarray
    clean_labels: np.ndarray
    num_classes: int
    noisy_labels: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x = _frozen(self.features, np.float64)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1), np.float64)
        y = _frozen(self.clean_labels, np.int64)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "clean_labels", y)
        if self.noisy_labels is not None:
            object.__setattr__(self, "noisy_labels", _frozen(self.noisy_labels, np.int64))
        object.__setattr__(self, "metadata", dict(self.metadata))

        k = int(self.num_classes)
        object.__setattr__(self, "num_classes", k)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(f"features must be a non-empty N x D matrix, got shape {x.shape}")
        if k < 2:
            raise ValidationError(f"num_classes must be >= 2, got {k}")
        n = x.shape[0]
        for name, labels in (("clean_labels", y), ("noisy_labels", self.noisy_labels)):
            if labels is None:
                continue
            if labels.shape != (n,):
                raise ValidationError(f"{name} has shape {labels.shape}, expected ({n},)")
            if labels.size and (labels.min() < 0 or labels.max() >= k):
                raise ValidationError(f"{name} must lie in [0, {k}), found range "
                                      f"[{labels.min()}, {labels.max()}]")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.clean_labels[idx],
            self.num_classes,
            None if self.noisy_labels is None else self.noisy_labels[idx],
            self.metadata,
        )

    def with_noisy_labels(self, noisy_labels, **metadata) -> "Dataset":
        meta = {**self.metadata, **metadata}
        return Dataset(self.features, self.clean_labels, self.num_classes, noisy_labels, meta)

    def equals(self, other: "Dataset") -> bool:
        """Field-by-field equality of the label and feature columns."""
        if self.num_classes != other.num_classes:
            return False
        if (self.noisy_labels is None) != (other.noisy_labels is None):
            return False
        same = (np.array_equal(self.features, other.features)
                and np.array_equal(self.clean_labels, other.clean_labels))
        if self.noisy_labels is not None:
            same = same and np.array_equal(self.noisy_labels, other.noisy_labels)
        return bool(same)


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """K isotropic Gaussians sharing covariance ``shared_cov_scale * I``."""

    means: np.ndarray
    shared_cov_scale: float = 1.0
    class_priors: np.ndarray | None = None
    n_samples: int = 1000

    def validate(self) -> None:
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2 or means.shape[1] < 1:
            raise ValidationError(f"means must be a K x D matrix with K >= 2, got shape {means.shape}")
        if not self.shared_cov_scale > 0:
            raise ValidationError(f"shared_cov_scale must be > 0, got {self.shared_cov_scale}")
        if int(self.n_samples) < 1:
            raise ValidationError(f"n_samples must be >= 1, got {self.n_samples}")
        priors = self.priors()
        if priors.shape != (means.shape[0],):
            raise ValidationError(f"class_priors must have length {means.shape[0]}, got {priors.shape}")
        if np.any(priors < 0):
            raise ValidationError("class_priors must be non-negative")
        if abs(priors.sum() - 1.0) > 1e-12:
            raise ValidationError(f"class_priors must sum to 1 (got {float(priors.sum())!r})")

    def priors(self) -> np.ndarray:
        k = np.asarray(self.means).shape[0]
        if self.class_priors is None:
            return np.full(k, 1.0 / k)
        return np.asarray(self.class_priors, dtype=np.float64)


def generate_gaussian_mixture(spec: GaussianMixtureSpec, seed=None) -> Dataset:
    spec.validate()
    rng = stream_rng(seed, "mixture")
    means = np.asarray(spec.means, dtype=np.float64)
    k, d = means.shape
    n = int(spec.n_samples)
    labels = rng.choice(k, size=n, p=spec.priors())
    noise = rng.standard_normal((n, d))
    features = means[labels] + np.sqrt(spec.shared_cov_scale) * noise
    meta = {"source": "gaussian_mixture", "seed": seed, "shared_cov_scale": float(spec.shared_cov_scale)}
    return Dataset(features, labels, k, metadata=meta)


# --- CSV ---------------------------------------------------------------------

def _format_float(x: float) -> str:
    return repr(float(x))


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = [f"f{j}" for j in range(dataset.n_features)] + ["clean_label"]
    if dataset.noisy_labels is not None:
        header.append("noisy_label")
    writer.writerow(header)
    for n in range(dataset.n_samples):
        row = [_format_float(v) for v in dataset.features[n]]
        row.append(str(int(dataset.clean_labels[n])))
        if dataset.noisy_labels is not None:
            row.append(str(int(dataset.noisy_labels[n])))
        writer.writerow(row)
    return buf.getvalue()


def write_csv_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(dataset))
    return path


def _parse_label(text: str, lineno: int, column: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"non-integer {column} {text!r}", lineno) from None
    if value < 0:
        raise ParseError(f"negative {column} {value}", lineno)
    return value


def load_csv_dataset(path, has_noisy_column: bool | None = None,
                     num_classes: int | None = None) -> Dataset:
    """Read a dataset written by :func:`write_csv_dataset`.

    ``has_noisy_column=None`` detects the column from the header. ``num_classes``
    overrides inference of K (``1 + max label``); labels outside ``[0, K)``
    are then reported with their line number.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file (missing header)", 1)
    header = [h.strip() for h in rows[0]]
    noisy_present = bool(header) and header[-1] == "noisy_label"
    if has_noisy_column is None:
        has_noisy_column = noisy_present
    elif has_noisy_column != noisy_present:
        raise ParseError("header does not match has_noisy_column="
                         f"{has_noisy_column}: {header}", 1)
    n_label_cols = 2 if has_noisy_column else 1
    d = len(header) - n_label_cols
    expected = [f"f{j}" for j in range(d)] + ["clean_label"] + (["noisy_label"] if has_noisy_column else [])
    if d < 1 or header != expected:
        raise ParseError(f"bad header {header}; expected f0..f{{D-1}},clean_label[,noisy_label]", 1)

    feats, clean, noisy = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            feats.append([float(v) for v in row[:d]])
        except ValueError:
            raise ParseError("non-numeric feature value", lineno) from None
        clean.append(_parse_label(row[d], lineno, "clean_label"))
        if has_noisy_column:
            noisy.append(_parse_label(row[d + 1], lineno, "noisy_label"))
        labels_here = clean[-1:] + noisy[-1:]
        if num_classes is not None and max(labels_here) >= num_classes:
            raise ParseError(f"label {max(labels_here)} out of range for K={num_classes}", lineno)
    if not feats:
        raise ParseError("no data rows", 2)

    k = num_classes if num_classes is not None else 1 + max(clean + noisy)
    k = max(k, 2)
    return Dataset(np.array(feats), np.array(clean), k,
                   np.array(noisy) if has_noisy_column else None,
                   metadata={"source": str(path)})


# --- splitting and batching ----------------------------------------------------

def split_indices(n: int, test_fraction: float, seed=None) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n - n_test < 1:
        raise ValidationError(f"split of N={n} at fraction {test_fraction} leaves an empty side")
    perm = stream_rng(seed, "split").permutation(n)
    return perm[n_test:], perm[:n_test]


def split(dataset: Dataset, test_fraction: float, seed=None) -> tuple[Dataset, Dataset]:
    """Shuffle and partition into (train, test)."""
    train_idx, test_idx = split_indices(dataset.n_samples, test_fraction, seed)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def batches(dataset: Dataset | int, batch_size: int, seed=None) -> list[np.ndarray]:
    """One epoch of shuffled index batches; a trailing batch smaller than 2 is dropped.

    ``seed`` may be an int or a ``numpy.random.Generator`` (which is advanced).
    """
    if batch_size < 2:
        raise ValidationError(f"batch_size must be >= 2, got {batch_size}")
    n = dataset if isinstance(dataset, (int, np.integer)) else dataset.n_samples
    perm = stream_rng(seed, "batches").permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out
