"""Reproducible experiment drivers shared by the CLI and the acceptance suite.

Every driver writes plain CSV through :func:`write_csv`, which formats floats
with ``repr`` so reruns with the same seeds give byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from noisylab.data import Dataset, GaussianMixtureSpec, generate_gaussian_mixture
from noisylab.errors import ValidationError
from noisylab.model import EpochRecord, TrainConfig, train
from noisylab import svg
from noisylab.noise import (BinaryNoiseRates, InstanceNoiseSpec, apply_class_noise, apply_instance_noise,
                            asymmetric_transition, balance_downsample_rate, binary_transition,
                            downsample_balance, empirical_transition, optimal_downsample_rate,
                            post_downsample_rates, subsampled_class, symmetric_transition)
from noisylab.theory import GaussianFeatureSpec, simulate_theorem3, theorem3_solutions

METRICS_HEADER = ["epoch", "noisy_train_acc", "clean_train_acc", "clean_test_acc", "loss_sl", "loss_info",
                  "loss_reg"]


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


# --- noise injection ------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "symmetric"  # symmetric | asymmetric | binary | instance | none
    epsilon: float = 0.0
    e_plus: float = 0.0
    e_minus: float = 0.0
    rate_std: float = 0.1
    max_rate: float = 1.0
    projection_seed: int = 0
    seed: int = 0

    def transition(self, k: int):
        if self.kind == "symmetric":
            return symmetric_transition(k, self.epsilon)
        if self.kind == "asymmetric":
            return asymmetric_transition(k, self.epsilon)
        if self.kind == "binary":
            if k != 2:
                raise ValidationError(f"binary noise needs K=2, got K={k}")
            return binary_transition(BinaryNoiseRates(self.e_plus, self.e_minus))
        return None


def inject_noise(dataset: Dataset, noise: NoiseConfig, downsample: bool = False,
                 downsample_seed: int | None = None) -> Dataset:
    if noise.kind == "none":
        out = dataset.with_noisy_labels(dataset.clean_labels, noise="none", realized_flip_rate=0.0)
    elif noise.kind == "instance":
        spec = InstanceNoiseSpec(noise.epsilon, noise.rate_std, noise.max_rate, noise.projection_seed)
        out = apply_instance_noise(dataset, spec, noise.seed)
    elif noise.kind in ("symmetric", "asymmetric", "binary"):
        out = apply_class_noise(dataset, noise.transition(dataset.num_classes), noise.seed)
    else:
        raise ValidationError(f"unknown noise kind {noise.kind!r}")
    if downsample:
        out = downsample_balance(out, noise.seed if downsample_seed is None else downsample_seed)
    return out


def transition_rows(dataset: Dataset) -> list:
    t = empirical_transition(dataset.clean_labels, dataset.noisy_labels, dataset.num_classes)
    return [list(row) for row in t.entries]


# --- training ----------------------------------------------------------------------

@dataclass
class TrainingExperiment:
    """Synthetic Gaussian train/test data, label noise and a grid of (lambda, seed) runs."""

    means: np.ndarray = field(default_factory=lambda: np.array([[-1.5, 0.0], [1.5, 0.0]]))
    shared_cov_scale: float = 1.0
    class_priors: np.ndarray | None = None
    n_train: int = 2000
    n_test: int = 10000
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig("symmetric", 0.4))
    downsample: bool = False
    train_config: TrainConfig = field(default_factory=TrainConfig)
    lambdas: tuple = (0.0, 1.0)
    seeds: tuple = (0, 1, 2, 3, 4)

    def datasets(self, seed: int) -> tuple[Dataset, Dataset]:
        """Train set (noisy) and an independent clean test set for one seed.

        The test draw uses seed + 10_000 so it never shares a stream with the
        training draw of any seed in a small grid.
        """
        tr_spec = GaussianMixtureSpec(self.means, self.shared_cov_scale, self.class_priors, self.n_train)
        te_spec = GaussianMixtureSpec(self.means, self.shared_cov_scale, self.class_priors, self.n_test)
        train_set = generate_gaussian_mixture(tr_spec, seed)
        test_set = generate_gaussian_mixture(te_spec, seed + 10_000)
        noisy = inject_noise(train_set, replace(self.noise, seed=self.noise.seed + seed), self.downsample)
        return noisy, test_set


@dataclass
class RunResult:
    run_id: str
    lam: float
    seed: int
    records: list

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def final_test_acc(self) -> float:
        return float(self.records[-1].clean_test_acc)

    @property
    def peak_test_acc(self) -> float:
        return float(self.column("clean_test_acc").max())


def run_id_for(lam: float, seed: int) -> str:
    return f"lam{lam:g}_seed{seed}"


def _write_metrics_row(fh, rec: EpochRecord):
    fh.write(",".join(fmt(getattr(rec, name)) for name in METRICS_HEADER) + "\n")
    fh.flush()


def run_training(exp: TrainingExperiment, out_dir=None, log=None) -> list[RunResult]:
    """Run every (lambda, seed) pair; with ``out_dir`` each run gets
    ``<run_id>/metrics.csv`` (flushed per epoch), ``model.bin`` and ``meta.json``."""
    results = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for lam in exp.lambdas:
        for seed in exp.seeds:
            run_id = run_id_for(lam, seed)
            train_set, test_set = exp.datasets(seed)
            cfg = replace(exp.train_config, seed=seed, reg=replace(exp.train_config.reg, lam=float(lam)))
            fh = None
            if out_dir is not None:
                run_dir = out_dir / run_id
                run_dir.mkdir(parents=True, exist_ok=True)
                fh = open(run_dir / "metrics.csv", "w", encoding="utf-8", newline="")
                fh.write(",".join(METRICS_HEADER) + "\n")
            try:
                params, trace = train(train_set, test_set, cfg,
                                      on_epoch=(lambda rec: _write_metrics_row(fh, rec)) if fh else None)
            finally:
                if fh is not None:
                    fh.close()
            result = RunResult(run_id, float(lam), seed, trace.records)
            results.append(result)
            if out_dir is not None:
                params.save(run_dir / "model.bin")
                meta = {
                    "run_id": run_id, "lambda": float(lam), "seed": seed,
                    "freeze_encoder": cfg.freeze_encoder, "sl_loss": cfg.sl_loss,
                    "epochs": cfg.epochs, "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
                    "optimizer": cfg.optimizer, "hidden": list(cfg.hidden), "projection_dim": cfg.projection_dim,
                    "temperature": cfg.temperature, "info_weight": cfg.info_weight, "jitter_std": cfg.jitter_std,
                    "regularizer": asdict(cfg.reg), "noise": asdict(exp.noise), "downsample": exp.downsample,
                    "n_train": train_set.n_samples, "n_test": test_set.n_samples,
                    "realized_flip_rate": train_set.metadata.get("realized_flip_rate"),
                    "final_clean_test_acc": result.final_test_acc, "peak_clean_test_acc": result.peak_test_acc,
                }
                (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                                   encoding="utf-8")
            if log is not None:
                log(f"{run_id}: final clean_test_acc={result.final_test_acc:.4f} "
                    f"peak={result.peak_test_acc:.4f}")
    return results


COMPARISON_HEADER = ["lambda", "seed", "final_clean_test_acc", "peak_clean_test_acc", "drop_from_peak",
                     "final_noisy_train_acc"]


def comparison_rows(results: list[RunResult]) -> list:
    rows = []
    for r in results:
        rows.append([r.lam, r.seed, r.final_test_acc, r.peak_test_acc, r.peak_test_acc - r.final_test_acc,
                     float(r.records[-1].noisy_train_acc)])
    return rows


def summarize_lambdas(results: list[RunResult]) -> dict:
    out = {}
    for lam in sorted({r.lam for r in results}):
        runs = [r for r in results if r.lam == lam]
        finals = np.array([r.final_test_acc for r in runs])
        drops = np.array([r.peak_test_acc - r.final_test_acc for r in runs])
        out[lam] = {"mean_final": float(finals.mean()), "drops": drops.tolist()}
    return out


def plot_runs(results: list[RunResult], path) -> Path:
    series = {r.run_id: (r.column("epoch"), r.column("clean_test_acc")) for r in results}
    return svg.write_line_chart(path, series, title="clean test accuracy", xlabel="epoch",
                                ylabel="clean_test_acc")


# --- cross-term oracle sweep ---------------------------------------------------------------

T3_HEADER = ["delta", "e", "closed_plus", "mc_plus", "diff_plus", "closed_minus", "mc_minus", "diff_minus",
             "stderr_plus", "stderr_minus", "golden_plus", "golden_minus", "risk"]


def t3_sweep(deltas, flip_rates, n_mc: int = 200_000, seed: int = 0, shards: int = 8,
             workers: int = 1) -> list:
    rows = []
    for i, delta in enumerate(deltas):
        for j, e in enumerate(flip_rates):
            spec = GaussianFeatureSpec.for_delta(float(delta), float(e), n_mc)
            closed = theorem3_solutions(spec)
            sim = simulate_theorem3(spec, seed=[seed, i, j], shards=shards, workers=workers)
            if sim.vacuous:
                rows.append([delta, e, closed.exp_gf_plus_f, "", "", closed.exp_gf_minus_f, "", "",
                             "", "", "", "", closed.risk])
                continue
            rows.append([delta, e, closed.exp_gf_plus_f, sim.exp_gf_plus_f,
                         abs(sim.exp_gf_plus_f - closed.exp_gf_plus_f), closed.exp_gf_minus_f,
                         sim.exp_gf_minus_f, abs(sim.exp_gf_minus_f - closed.exp_gf_minus_f),
                         sim.stderr_plus, sim.stderr_minus, sim.golden_plus, sim.golden_minus, closed.risk])
    return rows


# --- down-sampling study ----------------------------------------------------------------

DOWNSAMPLE_HEADER = ["e_plus", "e_minus", "subsampled_class", "r_balance", "r_optimal",
                     "post_plus_balance", "post_minus_balance", "post_plus_optimal", "post_minus_optimal",
                     "gap_before", "gap_after_balance", "gap_after_optimal"]


def downsample_grid(points: int = 20) -> list[tuple[float, float]]:
    """Valid (e_plus, e_minus) pairs on a ``points`` x ``points`` lattice of (0, 1)^2."""
    vals = [(i + 1) / (points + 1) for i in range(points)]
    return [(ep, em) for ep in vals for em in vals if ep + em < 1.0]


def downsample_study(points: int = 20) -> list:
    rows = []
    for ep, em in downsample_grid(points):
        rates = BinaryNoiseRates(ep, em)
        sub = subsampled_class(rates)
        r_bal, r_opt = balance_downsample_rate(rates), optimal_downsample_rate(rates)
        bal = post_downsample_rates(rates, r_bal, sub)
        opt = post_downsample_rates(rates, r_opt, sub)
        rows.append([ep, em, sub, r_bal, r_opt, bal[0], bal[1], opt[0], opt[1],
                     abs(ep - em), abs(bal[0] - bal[1]), abs(opt[0] - opt[1])])
    return rows


def plot_downsample(rows: list, path) -> Path:
    """Gap before and after balance down-sampling against e_plus, one curve per e_minus slice."""
    by_em: dict = {}
    for row in rows:
        by_em.setdefault(row[1], []).append(row)
    series = {}
    for em in sorted(by_em)[:: max(1, len(by_em) // 4)]:
        pts = sorted(r for r in by_em[em] if r[0] > em)
        if not pts:
            continue
        series[f"before e-={em:.2f}"] = ([p[0] for p in pts], [p[9] for p in pts])
        series[f"after e-={em:.2f}"] = ([p[0] for p in pts], [p[10] for p in pts])
    return svg.write_line_chart(path, series, title="noise-rate gap before/after down-sampling",
                                xlabel="e_plus", ylabel="|e_plus - e_minus|")
