"""Label-noise transition matrices, noise injection, and class-balancing down-sampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from noisylab.data import Dataset, stream_rng
from noisylab.errors import ParseError, ValidationError

ROW_SUM_TOL = 1e-12


class NoiseRateWarning(UserWarning):
    """Symmetric noise rate at or above (K-1)/K, where the noisy labels carry no signal."""


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic K x K matrix with entry (i, j) = P(noisy = j | clean = i).

    ``flags`` carries soft diagnostics (for example ``"above_consistency_threshold"``);
    ``empty_rows`` lists clean classes with no support when the matrix was
    estimated from samples.
    """

    entries: np.ndarray
    flags: frozenset = field(default_factory=frozenset)
    empty_rows: tuple = ()

    def __post_init__(self):
        t = np.array(self.entries, dtype=np.float64, copy=True)
        if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] < 2:
            raise ValidationError(f"transition matrix must be K x K with K >= 2, got shape {t.shape}")
        if not np.all(np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0:
            raise ValidationError("transition matrix entries must lie in [0, 1]")
        worst = np.abs(t.sum(axis=1) - 1.0).max()
        if worst > ROW_SUM_TOL:
            raise ValidationError(f"transition matrix rows must sum to 1 (max deviation {worst:.3e})")
        t.setflags(write=False)
        object.__setattr__(self, "entries", t)
        object.__setattr__(self, "flags", frozenset(self.flags))
        object.__setattr__(self, "empty_rows", tuple(int(r) for r in self.empty_rows))

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]

    def to_csv(self) -> str:
        return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in self.entries)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, text: str) -> "TransitionMatrix":
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise ParseError("non-numeric transition entry", lineno) from None
        if len({len(r) for r in rows}) != 1:
            raise ParseError("ragged transition matrix", len(rows))
        return cls(np.array(rows))

    @classmethod
    def load(cls, path) -> "TransitionMatrix":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class BinaryNoiseRates:
    """Class-conditional flip rates for binary labels.

    e_plus = P(noisy=0 | clean=1), e_minus = P(noisy=1 | clean=0).
    """

    e_plus: float
    e_minus: float

    def __post_init__(self):
        for name in ("e_plus", "e_minus"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1), got {v}")
        if self.e_plus + self.e_minus >= 1.0:
            raise ValidationError(f"e_plus + e_minus must be < 1, got {self.e_plus + self.e_minus}")


@dataclass(frozen=True)
class InstanceNoiseSpec:
    mean_rate: float
    rate_std: float = 0.1
    max_rate: float = 1.0
    projection_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mean_rate < self.max_rate <= 1.0:
            raise ValidationError("need 0 <= mean_rate < max_rate <= 1, got "
                                  f"mean_rate={self.mean_rate}, max_rate={self.max_rate}")
        if self.rate_std < 0:
            raise ValidationError(f"rate_std must be >= 0, got {self.rate_std}")


def _check_k(k: int) -> int:
    k = int(k)
    if k < 2:
        raise ValidationError(f"number of classes must be >= 2, got {k}")
    return k


def symmetric_transition(k: int, epsilon: float) -> TransitionMatrix:
    """Uniform flips: diagonal 1 - eps, every off-diagonal eps / (K - 1).

    Rates at or above (K-1)/K are accepted but flagged and warned about.
    """
    k = _check_k(k)
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError(f"epsilon must lie in [0, 1], got {epsilon}")
    t = np.full((k, k), epsilon / (k - 1))
    np.fill_diagonal(t, 1.0 - epsilon)
    flags = frozenset()
    if epsilon >= (k - 1) / k:
        warnings.warn(f"symmetric noise rate {epsilon} >= (K-1)/K = {(k - 1) / k:.4f}; "
                      "the clean/noisy risk relation is degenerate", NoiseRateWarning, stacklevel=2)
        flags = frozenset({"above_consistency_threshold"})
    return TransitionMatrix(t, flags)


def asymmetric_transition(k: int, epsilon: float) -> TransitionMatrix:
    """Flip class i to its successor (i + 1) mod K with probability eps."""
    k = _check_k(k)
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in [0, 1), got {epsilon}")
    t = np.zeros((k, k))
    idx = np.arange(k)
    t[idx, idx] = 1.0 - epsilon
    t[idx, (idx + 1) % k] += epsilon
    return TransitionMatrix(t)


def binary_transition(rates: BinaryNoiseRates) -> TransitionMatrix:
    return TransitionMatrix([[1.0 - rates.e_minus, rates.e_minus],
                             [rates.e_plus, 1.0 - rates.e_plus]])


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # inverse-CDF draw, one uniform per row
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    draw = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(draw, probs.shape[1] - 1)


def apply_class_noise(dataset: Dataset, transition: TransitionMatrix, seed=None) -> Dataset:
    """Draw noisy labels row-wise from ``transition[clean_label]``."""
    if transition.num_classes != dataset.num_classes:
        raise ValidationError(f"transition is {transition.num_classes}x{transition.num_classes} "
                              f"but dataset has K={dataset.num_classes}")
    rng = stream_rng(seed, "class_noise")
    noisy = _sample_rows(transition.entries[dataset.clean_labels], rng)
    flip_rate = float(np.mean(noisy != dataset.clean_labels))
    return dataset.with_noisy_labels(noisy, noise="class", noise_seed=seed, realized_flip_rate=flip_rate)


def apply_instance_noise(dataset: Dataset, spec: InstanceNoiseSpec, seed=None) -> Dataset:
    """Feature-dependent label noise.

    Each sample gets its own flip probability from a normal(mean_rate, rate_std^2)
    truncated to [0, max_rate]. A flipped sample moves to the wrong class whose
    random projection vector has the largest inner product with its features.
    """
    rng = stream_rng(seed, "instance_noise")
    n, k = dataset.n_samples, dataset.num_classes
    eps, std = spec.mean_rate, spec.rate_std
    if std == 0.0:
        q = np.full(n, min(eps, spec.max_rate))
    else:
        lo, hi = (0.0 - eps) / std, (spec.max_rate - eps) / std
        q = stats.truncnorm.rvs(lo, hi, loc=eps, scale=std, size=n, random_state=rng)

    proj = stream_rng(spec.projection_seed, "projection").standard_normal((dataset.n_features, k))
    scores = dataset.features @ proj
    scores[np.arange(n), dataset.clean_labels] = -np.inf
    target = np.argmax(scores, axis=1)

    flip = rng.random(n) < q
    noisy = np.where(flip, target, dataset.clean_labels)
    return dataset.with_noisy_labels(
        noisy, noise="instance", noise_seed=seed,
        mean_instance_rate=float(q.mean()), realized_flip_rate=float(flip.mean()))


def empirical_transition(clean, noisy, k: int) -> TransitionMatrix:
    """Row-normalized confusion counts; rows without support become identity rows."""
    clean = np.asarray(clean, dtype=np.int64)
    noisy = np.asarray(noisy, dtype=np.int64)
    k = _check_k(k)
    if clean.shape != noisy.shape:
        raise ValidationError(f"label vectors differ in length: {clean.shape} vs {noisy.shape}")
    for labels in (clean, noisy):
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValidationError(f"labels must lie in [0, {k})")
    counts = np.bincount(clean * k + noisy, minlength=k * k).reshape(k, k).astype(np.float64)
    totals = counts.sum(axis=1)
    empty = np.flatnonzero(totals == 0)
    counts[empty, empty] = 1.0
    totals[empty] = 1.0
    return TransitionMatrix(counts / totals[:, None], empty_rows=tuple(empty))


# --- down-sampling ---------------------------------------------------------------

def downsample_balance(dataset: Dataset, seed=None) -> Dataset:
    """Subsample every noisy class to the size of the smallest one.

    Kept rows stay in their original order, so an already balanced dataset is
    returned unchanged.
    """
    if dataset.noisy_labels is None:
        raise ValidationError("downsample_balance needs noisy labels")
    counts = np.bincount(dataset.noisy_labels, minlength=dataset.num_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValidationError(f"noisy class {int(empty[0])} is empty; cannot balance")
    target = int(counts.min())
    rng = stream_rng(seed, "downsample")
    keep = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.noisy_labels == c)
        if idx.size > target:
            idx = rng.choice(idx, size=target, replace=False)
        keep.append(idx)
    keep = np.sort(np.concatenate(keep))
    out = dataset.subset(keep)
    return out.with_noisy_labels(out.noisy_labels, downsampled=True, downsample_seed=seed,
                                 per_class_count=target)


def subsampled_class(rates: BinaryNoiseRates) -> int:
    """Observed class that is over-represented under balanced clean priors."""
    return 0 if rates.e_plus >= rates.e_minus else 1


def optimal_downsample_rate(rates: BinaryNoiseRates) -> float:
    """Keep-rate for the over-represented noisy class that makes both flip rates equal.

    For e_plus > e_minus class 0 is subsampled and the rate is
    sqrt(e_minus (1 - e_plus) / (e_plus (1 - e_minus))); the roles swap otherwise.
    See :func:`subsampled_class`.
    """
    big, small = max(rates.e_plus, rates.e_minus), min(rates.e_plus, rates.e_minus)
    if big == small:
        return 1.0
    return math.sqrt(small * (1.0 - big) / (big * (1.0 - small)))


def balance_downsample_rate(rates: BinaryNoiseRates) -> float:
    """Keep-rate that equalizes the two noisy class frequencies (balanced clean priors)."""
    big, small = max(rates.e_plus, rates.e_minus), min(rates.e_plus, rates.e_minus)
    return (1.0 - big + small) / (1.0 - small + big)


def post_downsample_rates(rates: BinaryNoiseRates, r: float,
                          subsampled: int = 0) -> tuple[float, float]:
    """Flip rates (e_plus*, e_minus*) after keeping a fraction r of one noisy class.

    With ``subsampled=0`` (noisy class 0 thinned, the e_plus > e_minus case):
    e_plus* = r e_plus / (1 - e_plus + r e_plus) and
    e_minus* = e_minus / (e_minus + r (1 - e_minus)).
    """
    if not 0.0 < r <= 1.0:
        raise ValidationError(f"down-sampling rate must lie in (0, 1], got {r}")
    ep, em = rates.e_plus, rates.e_minus
    if subsampled == 0:
        return r * ep / (1.0 - ep + r * ep), em / (em + r * (1.0 - em))
    if subsampled == 1:
        return ep / (ep + r * (1.0 - ep)), r * em / (1.0 - em + r * em)
    raise ValidationError(f"subsampled class must be 0 or 1, got {subsampled}")
