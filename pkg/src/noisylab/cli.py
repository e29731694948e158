"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 numerical-tolerance failure,
3 I/O failure. Every subcommand accepts ``--config FILE`` holding flat
``key = value`` lines; keys are flag names without the leading dashes and
flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from noisylab import experiments as ex
from noisylab import svg
from noisylab.data import GaussianMixtureSpec, generate_gaussian_mixture, load_csv_dataset, write_csv_dataset
from noisylab.errors import ToleranceError, ValidationError
from noisylab.losses import DISTANCES, SL_LOSSES, RegularizerConfig
from noisylab.model import TrainConfig
from noisylab.noise import (BinaryNoiseRates, balance_downsample_rate, empirical_transition,
                            optimal_downsample_rate, post_downsample_rates, subsampled_class)
from noisylab.theory import (TheoryParams, approximation_bound, consistency_constants, corollary_beta_prime,
                             crossover_beta, effective_noise_rate, estimation_bound, theorem3_solutions_from_delta)


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to the validation exit code."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# --- parsing helpers --------------------------------------------------------------

def float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def matrix(text: str) -> np.ndarray:
    """Rows separated by ';', entries by ','; e.g. ``-1.5,0;1.5,0``."""
    rows = [float_list(r) for r in str(text).split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise argparse.ArgumentTypeError(f"ragged or empty matrix {text!r}")
    return np.array(rows)


def read_config(path) -> list[str]:
    """Turn a key=value file into argv tokens. ``key = true`` sets a switch."""
    tokens = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            tokens.extend([flag, value])
    return tokens


def emit(values: dict, as_json: bool, out=None):
    out = out or sys.stdout
    if as_json:
        out.write(json.dumps(values, sort_keys=False) + "\n")
        return
    for key, value in values.items():
        if isinstance(value, bool):
            text = str(value).lower()
        elif isinstance(value, float):
            text = f"{value:.4f}"
        elif value is None:
            text = "none"
        else:
            text = str(value)
        out.write(f"{key}={text}\n")


def json_ready(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


# --- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = GaussianMixtureSpec(args.means, args.cov_scale,
                               None if args.priors is None else np.array(args.priors), args.n)
    dataset = generate_gaussian_mixture(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv_dataset(dataset, out / "dataset.csv")
    emit({"path": str(path), "n_samples": dataset.n_samples, "num_classes": dataset.num_classes}, args.json)
    return 0


def noise_config(args, seed) -> ex.NoiseConfig:
    return ex.NoiseConfig(args.noise, args.eps, args.e_plus, args.e_minus, args.rate_std, args.max_rate,
                          args.projection_seed, seed)


def cmd_inject_noise(args) -> int:
    dataset = load_csv_dataset(args.input, has_noisy_column=None, num_classes=args.k)
    noisy = ex.inject_noise(dataset, noise_config(args, args.seed), args.downsample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_csv_dataset(noisy, out / "noisy.csv")
    table = empirical_transition(noisy.clean_labels, noisy.noisy_labels, noisy.num_classes)
    table.save(out / "transition.csv")
    flip = float(np.mean(noisy.noisy_labels != noisy.clean_labels))
    counts = np.bincount(noisy.noisy_labels, minlength=noisy.num_classes).tolist()
    if args.json:
        emit({"path": str(path), "n_samples": noisy.n_samples, "flip_rate": flip,
              "noisy_class_counts": counts, "transition": table.entries.tolist()}, True)
        return 0
    print(f"path={path}")
    print(f"n_samples={noisy.n_samples}")
    print("empirical transition (rows clean, columns noisy):")
    for row in table.entries:
        print("  " + " ".join(f"{v:.4f}" for v in row))
    print(f"flip_rate={flip:.4f}")
    print("noisy_class_counts=" + ",".join(str(c) for c in counts))
    return 0


def train_config(args) -> TrainConfig:
    reg = RegularizerConfig(w_sl=args.w_sl, w_ssl=args.w_ssl, distance=args.distance, lam=1.0,
                            couple_ssl=args.couple_ssl)
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       optimizer=args.optimizer, freeze_encoder=args.freeze_encoder, sl_loss=args.loss, reg=reg,
                       temperature=args.temperature, info_weight=args.info_weight, jitter_std=args.jitter,
                       hidden=tuple(args.hidden), projection_dim=args.projection_dim, gce_q=args.gce_q,
                       peer_alpha=args.peer_alpha)


def collect_runs(out_dir: Path) -> dict:
    series = {}
    for metrics in sorted(out_dir.glob("*/metrics.csv")):
        data = np.genfromtxt(metrics, delimiter=",", names=True)
        data = np.atleast_1d(data)
        series[metrics.parent.name] = (data["epoch"], data["clean_test_acc"])
    return series


def cmd_train(args) -> int:
    out = Path(args.out)
    cfg = train_config(args)
    if args.input is not None:
        train_set = load_csv_dataset(args.input)
        if train_set.noisy_labels is None:
            raise ValidationError(f"{args.input}: training CSV needs a noisy_label column")
        if args.test is None:
            raise ValidationError("--test is required with --input")
        test_set = load_csv_dataset(args.test, num_classes=train_set.num_classes)
        if args.loss == "fw":
            cfg = replace(cfg, transition=empirical_transition(train_set.clean_labels, train_set.noisy_labels,
                                                               train_set.num_classes))
        exp = _FixedDataExperiment(train_set, test_set, cfg, tuple(args.lambdas), tuple(args.seeds))
    else:
        noise = noise_config(args, args.seed)
        if args.loss == "fw":
            cfg = replace(cfg, transition=noise.transition(np.asarray(args.means).shape[0]))
        exp = ex.TrainingExperiment(means=args.means, shared_cov_scale=args.cov_scale, n_train=args.n_train,
                                    n_test=args.n_test, noise=noise, downsample=args.downsample,
                                    train_config=cfg, lambdas=tuple(args.lambdas), seeds=tuple(args.seeds))
    log = None if args.json else print
    results = ex.run_training(exp, out, log=log)
    ex.write_csv(out / "comparison.csv", ex.COMPARISON_HEADER, ex.comparison_rows(results))
    if args.plot:
        svg.write_line_chart(out / "clean_test_acc.svg", collect_runs(out), title="clean test accuracy",
                             xlabel="epoch", ylabel="clean_test_acc")
    summary = ex.summarize_lambdas(results)
    if args.json:
        emit({"comparison": str(out / "comparison.csv"),
              "lambdas": {repr(k): v for k, v in summary.items()}}, True)
    else:
        print("lambda,mean_final_clean_test_acc,drops_from_peak")
        for lam, row in summary.items():
            print(f"{lam:g},{row['mean_final']:.4f}," + " ".join(f"{d:.4f}" for d in row["drops"]))
    return 0


class _FixedDataExperiment(ex.TrainingExperiment):
    """Training grid over user-supplied train/test datasets."""

    def __init__(self, train_set, test_set, cfg, lambdas, seeds):
        super().__init__(train_config=cfg, lambdas=lambdas, seeds=seeds,
                         noise=ex.NoiseConfig("none"), n_train=train_set.n_samples, n_test=test_set.n_samples)
        self._data = (train_set, test_set)

    def datasets(self, seed):
        return self._data


def cmd_theory(args) -> int:
    kind = args.quantity
    if kind == "gamma":
        c = consistency_constants(args.k, args.eps)
        values = {"gamma1": c.gamma1, "gamma2": c.gamma2, "error_intercept": c.error_intercept,
                  "degenerate": c.degenerate}
    elif kind == "estimation":
        params = TheoryParams(args.vc, args.n, args.delta, args.eps, args.k)
        values = {"estimation_bound": estimation_bound(params, args.noise_kind, args.bias),
                  "effective_noise_rate": effective_noise_rate(args.eps, args.k, args.noise_kind)}
    elif kind == "approx":
        values = {"approximation_bound": approximation_bound(TheoryParams(1, 1, nodes=args.nodes,
                                                                          alpha_star=args.alpha))}
    elif kind == "beta":
        res = crossover_beta((args.vc1, args.nodes1), (args.vc2, args.nodes2), args.n, args.alpha, args.k)
        values = {"beta": res.beta, "eps_threshold": res.eps_threshold, "regime": res.regime}
    elif kind == "beta-prime":
        res = corollary_beta_prime((args.vc1, args.nodes1, args.alpha1), (args.vc2, args.nodes2, args.alpha2),
                                   args.n, args.k)
        values = {"beta_prime": res.beta, "eps_threshold": res.eps_threshold, "regime": res.regime}
    elif kind == "t3":
        sol = theorem3_solutions_from_delta(args.delta, args.e)
        values = {"delta": args.delta, "e": args.e, "exp_gf_plus_f": sol.exp_gf_plus_f,
                  "exp_gf_minus_f": sol.exp_gf_minus_f, "risk": sol.risk}
    elif kind == "downsample":
        rates = BinaryNoiseRates(args.e_plus, args.e_minus)
        sub = subsampled_class(rates)
        r_bal, r_opt = balance_downsample_rate(rates), optimal_downsample_rate(rates)
        bal, opt = post_downsample_rates(rates, r_bal, sub), post_downsample_rates(rates, r_opt, sub)
        values = {"subsampled_class": sub, "r_balance": r_bal, "r_optimal": r_opt,
                  "post_plus_balance": bal[0], "post_minus_balance": bal[1],
                  "post_plus_optimal": opt[0], "post_minus_optimal": opt[1]}
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown theory quantity {kind!r}")
    emit({k: json_ready(v) for k, v in values.items()}, args.json)
    return 0


def cmd_simulate_t3(args) -> int:
    out = Path(args.out)
    if all(e == 0.0 for e in args.e):
        msg = "vacuous: e=0 leaves no mislabeled samples, nothing to simulate"
        emit({"vacuous": True, "message": msg}, True) if args.json else print(msg)
        return 0
    rows = ex.t3_sweep(args.delta, args.e, args.n_mc, args.seed, args.shards, args.workers)
    path = ex.write_csv(out / "t3_comparison.csv", ex.T3_HEADER, rows)
    worst = max((max(r[4], r[7]) for r in rows if r[4] != ""), default=0.0)
    if args.json:
        emit({"path": str(path), "max_abs_diff": worst, "tolerance": args.tolerance,
              "rows": [dict(zip(ex.T3_HEADER, (json_ready(v) if v != "" else None for v in r))) for r in rows]},
             True)
    else:
        print("delta,e,closed_plus,mc_plus,closed_minus,mc_minus,max_diff")
        for r in rows:
            if r[4] == "":
                print(f"{r[0]:g},{r[1]:g},vacuous")
                continue
            print(f"{r[0]:g},{r[1]:g},{r[2]:.4f},{r[3]:.4f},{r[5]:.4f},{r[6]:.4f},{max(r[4], r[7]):.4f}")
        print(f"max_abs_diff={worst:.4f}")
    if worst > args.tolerance:
        raise ToleranceError(f"max |MC - closed form| = {worst:.4g} exceeds tolerance {args.tolerance}")
    return 0


def cmd_downsample_study(args) -> int:
    out = Path(args.out)
    rows = ex.downsample_study(args.points)
    path = ex.write_csv(out / "downsample.csv", ex.DOWNSAMPLE_HEADER, rows)
    if args.plot:
        ex.plot_downsample(rows, out / "downsample_gap.svg")
    worst_opt = max(r[11] for r in rows)
    emit({"path": str(path), "rows": len(rows), "max_gap_after_optimal": worst_opt}, args.json)
    return 0


# --- parser -------------------------------------------------------------------------

def _common(out_default: str) -> ArgumentParser:
    p = ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--json", action="store_true", help="print a single JSON object")
    p.add_argument("--plot", action="store_true", help="also write an SVG chart")
    p.add_argument("--config", help="key = value file; command-line flags override it")
    return p


def _noise_flags(p):
    p.add_argument("--noise", default="symmetric", choices=["symmetric", "asymmetric", "binary", "instance", "none"])
    p.add_argument("--eps", type=float, default=0.4, help="noise rate (mean rate for instance noise)")
    p.add_argument("--e-plus", type=float, default=0.0, help="binary P(noisy=0 | clean=1)")
    p.add_argument("--e-minus", type=float, default=0.0, help="binary P(noisy=1 | clean=0)")
    p.add_argument("--rate-std", type=float, default=0.1)
    p.add_argument("--max-rate", type=float, default=1.0)
    p.add_argument("--projection-seed", type=int, default=0)
    p.add_argument("--downsample", action="store_true", help="balance noisy classes by subsampling")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="noisylab", description="noisy-label robustness lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[_common("data")], help="write a Gaussian-mixture dataset CSV")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--means", type=matrix, default=matrix("-1.5,0;1.5,0"), help="rows ';', entries ','")
    p.add_argument("--cov-scale", type=float, default=1.0)
    p.add_argument("--priors", type=float_list, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inject-noise", parents=[_common("data")], help="add noisy labels to a dataset CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=None, help="number of classes (default: inferred)")
    _noise_flags(p)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("train", parents=[_common("runs")], help="train over a lambda x seed grid")
    p.add_argument("--input", default=None, help="noisy training CSV (default: synthetic data)")
    p.add_argument("--test", default=None, help="clean test CSV, required with --input")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=10000)
    p.add_argument("--means", type=matrix, default=matrix("-1.5,0;1.5,0"))
    p.add_argument("--cov-scale", type=float, default=1.0)
    _noise_flags(p)
    p.add_argument("--lambdas", type=float_list, default=[0.0, 1.0])
    p.add_argument("--seeds", type=int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--hidden", type=int_list, default=[64, 64])
    p.add_argument("--projection-dim", type=int, default=16)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--loss", default="ce", choices=list(SL_LOSSES))
    p.add_argument("--gce-q", type=float, default=0.7)
    p.add_argument("--peer-alpha", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--info-weight", type=float, default=1.0)
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--w-sl", type=float, default=1.0)
    p.add_argument("--w-ssl", type=float, default=2.0)
    p.add_argument("--distance", default="smooth-l1", choices=list(DISTANCES))
    p.add_argument("--couple-ssl", action="store_true", help="let the regularizer update the projection head")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("theory", help="evaluate a closed-form bound or constant")
    q = p.add_subparsers(dest="quantity", required=True)
    common = _common(".")
    t = q.add_parser("gamma", parents=[common])
    t.add_argument("--k", type=int, required=True)
    t.add_argument("--eps", type=float, required=True)
    t = q.add_parser("estimation", parents=[common])
    t.add_argument("--vc", type=float, required=True)
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--delta", type=float, default=0.05)
    t.add_argument("--eps", type=float, default=0.0)
    t.add_argument("--k", type=int, default=2)
    t.add_argument("--noise-kind", default="symmetric", choices=["symmetric", "asymmetric"])
    t.add_argument("--bias", type=float, default=0.0)
    t = q.add_parser("approx", parents=[common])
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--nodes", type=float, required=True)
    t = q.add_parser("beta", parents=[common])
    for name in ("vc1", "nodes1", "vc2", "nodes2"):
        t.add_argument(f"--{name}", type=float, required=True)
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--k", type=int, default=2)
    t = q.add_parser("beta-prime", parents=[common])
    for name in ("vc1", "nodes1", "alpha1", "vc2", "nodes2", "alpha2"):
        t.add_argument(f"--{name}", type=float, required=True)
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--k", type=int, default=2)
    t = q.add_parser("t3", parents=[common])
    t.add_argument("--delta", type=float, required=True)
    t.add_argument("--e", type=float, required=True)
    t = q.add_parser("downsample", parents=[common])
    t.add_argument("--e-plus", type=float, required=True)
    t.add_argument("--e-minus", type=float, required=True)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("simulate-t3", parents=[_common("t3")], help="Monte-Carlo check of the cross-term minimizers")
    p.add_argument("--delta", type=float_list, default=[0.5, 2.0, 8.0])
    p.add_argument("--e", type=float_list, default=[0.1, 0.2, 0.4])
    p.add_argument("--n-mc", type=int, default=200_000)
    p.add_argument("--shards", type=int, default=8)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=0.01)
    p.set_defaults(func=cmd_simulate_t3)

    p = sub.add_parser("downsample-study", parents=[_common("downsample")], help="sweep the (e+, e-) grid")
    p.add_argument("--points", type=int, default=20)
    p.set_defaults(func=cmd_downsample_study)
    return parser


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        depth = 2 if args.command == "theory" else 1
        argv = argv[:depth] + read_config(args.config) + argv[depth:]
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ToleranceError as err:
        print(f"tolerance failure: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 3
