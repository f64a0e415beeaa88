"""Command-line interface: ``emstop {simulate,reconstruct,sweep,validate}``.

Exit status is 0 on success, 1 on validation, configuration or I/O errors
and 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .core import DomainError, NumericalFailure, RngStream, SingularityError
from .em import DEFAULT_EPSILON, DEFAULT_K_MAX, EmProblem, reconstruct
from .harness import (
    RULES,
    ExperimentConfig,
    lemma5_demo,
    load_config,
    risk_curve,
    run_sweep,
    simulate_data,
    trial_stream,
)
from .io import fmt, load_image, save_image, save_text_image, write_curve_csv
from .metrics import argmin_iteration, first_crossing
from .operators import Psf, convolution_operator, dense_operator
from .risk import half_m_identity_check, log_sum_test_function, stein_lemma_check

log = logging.getLogger("emstop")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

SELECT_RULES = ("paukl", "pukla", "rekl", "pdp", "fixed")
CHECKS = ("stein", "half-m", "adjoint", "homogeneity", "lemma5")


class CheckFailed(Exception):
    """A validation check ran but did not meet its tolerance."""


# -- simulate -----------------------------------------------------------------


def cmd_simulate(args):
    config = load_config(args.config)
    os.makedirs(args.outdir, exist_ok=True)
    sim = simulate_data(config, trial_stream(config, 0).child(0))
    # 16-bit PGM cannot hold very bright pixels; fall back to text then
    data_name = "data.pgm" if sim.y.max() <= 65535 else "data.txt"
    out = lambda name: os.path.join(args.outdir, name)  # noqa: E731
    save_image(out(data_name), sim.y)
    save_text_image(out("psf.txt"), sim.psf.values)
    if sim.psf_exact is not None:
        save_text_image(out("psf_exact.txt"), sim.psf_exact.values)
    save_text_image(out("truth.txt"), sim.x_true)
    save_text_image(out("lambda.txt"), sim.lambda_true)
    manifest = {
        "seed": config.seed,
        "config_sha256": config.digest(),
        "config": config.to_dict(),
        "data": data_name,
        "background": config.background_level,
    }
    with open(out("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {data_name}, psf.txt, truth.txt, lambda.txt to {args.outdir}")
    return EXIT_OK


# -- reconstruct --------------------------------------------------------------


def _background(value, shape):
    try:
        return float(value)
    except ValueError:
        image = load_image(value)
        if image.shape != shape:
            raise DomainError(f"background is {image.shape}, data is {shape}") from None
        return image


def select_iteration(curve, rule, k_max):
    """Iteration chosen by ``rule`` on ``curve``; ``None`` means not reached."""
    if rule == "fixed":
        return k_max
    if rule == "pdp":
        return first_crossing(curve.d_kl, curve.m, curve.k)
    return argmin_iteration(curve.column(rule), curve.k)


def _report_lines(curve, rule, selected, k_used, args):
    lines = [
        f"data: {args.data}",
        f"psf: {args.psf}",
        f"M: {curve.m}",
        f"k_max: {args.k_max}",
        f"epsilon: {fmt(args.epsilon)}",
        f"seed: {args.seed}",
        f"rule: {rule}",
        f"selected_k: {k_used}" + ("" if selected is not None else " (not reached; using k_max)"),
        "",
        "rule            k  value",
    ]
    for name, col in RULES.items():
        values = curve.column(col)
        if values is None:
            continue
        k = argmin_iteration(values, curve.k)
        shown = "not reached" if k is None else f"{k:d}"
        value = values[-1] if k is None else values[k - 1]
        lines.append(f"{name:<10} {shown:>11}  {fmt(value)}")
    crossing = first_crossing(curve.d_kl, curve.m, curve.k)
    lines.append(
        f"{'PDP-cross':<10} {'not reached' if crossing is None else crossing:>11}"
        f"  first k with d_kl < M/2 = {fmt(0.5 * curve.m)}"
    )
    return lines


def cmd_reconstruct(args):
    y = load_image(args.data)
    psf = Psf.from_image(load_image(args.psf))
    if psf.shape != y.shape:
        raise DomainError(f"PSF is {psf.shape}, data is {y.shape}")
    operator = convolution_operator(psf, y.shape)
    background = _background(args.background, y.shape)
    problem = EmProblem(operator, y, background)
    x_true = lambda_true = None
    if args.truth:
        x_true = load_image(args.truth)
        if x_true.shape != y.shape:
            raise DomainError(f"truth is {x_true.shape}, data is {y.shape}")
        if args.lambda_path:
            lambda_true = load_image(args.lambda_path)
        else:
            lambda_true = operator.apply(x_true) + problem.background
    curve, _ = risk_curve(
        problem, args.k_max, args.epsilon, RngStream(args.seed, 0), lambda_true, x_true
    )
    selected = select_iteration(curve, args.rule, args.k_max)
    k_used = args.k_max if selected is None else selected
    os.makedirs(args.out, exist_ok=True)
    save_text_image(os.path.join(args.out, "recon.txt"), reconstruct(problem, k_used))
    write_curve_csv(os.path.join(args.out, "curve.csv"), curve)
    lines = _report_lines(curve, args.rule, selected, k_used, args)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# -- sweep --------------------------------------------------------------------


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cell(value):
    return "" if value is None else (str(value) if isinstance(value, int) else fmt(value))


def cmd_sweep(args):
    config = load_config(args.config)
    result = run_sweep(config, workers=args.workers)
    out = args.outdir
    os.makedirs(os.path.join(out, "curves"), exist_ok=True)
    _write_rows(
        os.path.join(out, "summary.csv"),
        ("rule", "mean_k", "std_k", "n_failed", "n_not_reached"),
        [(rule, fmt(m), fmt(s), nf, nr) for rule, m, s, nf, nr in result.summary()],
    )
    agg = result.aggregate
    names = [n for n in ("pe", "paukl", "pukla", "rekl", "pdp", "d_kl", "err_kl", "err_l2") if n in agg.mean]
    header = ["k"] + [f"{n}_{stat}" for n in names for stat in ("mean", "std")]
    rows = [
        [int(k)] + [fmt(getattr(agg, stat)[n][i]) for n in names for stat in ("mean", "std")]
        for i, k in enumerate(agg.k)
    ]
    _write_rows(os.path.join(out, "spr.csv"), header, rows)
    for i, curve in enumerate(result.curves):
        if curve is not None:
            write_curve_csv(os.path.join(out, "curves", f"trial_{i:03d}.csv"), curve)
    rules = list(RULES)
    _write_rows(
        os.path.join(out, "trials.csv"),
        ["trial", "failed", "floored"] + [f"k_{r}" for r in rules] + ["error"],
        [
            [r.index, int(r.failed), r.floored] + [_cell(r.stops.get(rule)) for rule in rules] + [r.error]
            for r in result.reports
        ],
    )
    for rule, m, s, _, nr in result.summary():
        note = f"  ({nr} not reached)" if nr else ""
        print(f"{rule:<7} {m:9.1f} +/- {s:7.1f}{note}")
    if result.n_failed:
        print(f"{result.n_failed} of {len(result.reports)} trials failed")
    return EXIT_OK


# -- validate -----------------------------------------------------------------


def _verdict(name, ok, observed, expected):
    print(f"{name}: {'PASS' if ok else 'FAIL'}  observed {observed}  expected {expected}")
    return ok


def check_stein(seed, n_draws=1_000_000, m=16, level=100.0):
    """Per-component Stein identity gap against ``max(3 se, 0.5 ||lam||^-1/2)``."""
    f, grad = log_sum_test_function(m)
    lam = np.full(m, level)
    res = stein_lemma_check(f, grad, lam, n_draws, RngStream(seed, 0))
    bound = np.maximum(3 * res.stderr, 0.5 / np.sqrt(np.linalg.norm(lam)))
    worst = int(np.argmax(res.gap / bound))
    return _verdict(
        "stein",
        bool(np.all(res.gap <= bound)),
        f"max gap {res.gap[worst]:.3e} (component {worst})",
        f"<= {bound[worst]:.3e}",
    )


def check_half_m(seed, n_draws=100_000, m=64, level=100.0):
    estimate, se = half_m_identity_check(np.full(m, level), n_draws, RngStream(seed, 0))
    tol = max(3 * se, 0.02 * m)
    return _verdict("half-m", abs(estimate - 0.5 * m) <= tol, f"{estimate:.4f}", f"{0.5 * m} +/- {tol:.4f}")


def check_adjoint(seed, n_psfs=10, n_pairs=100, shape=(8, 8)):
    """FFT convolution against its dense matrix, plus ``<Hx, y> = <x, H^T y>``."""
    gen = RngStream(seed, 0).generator
    worst_fwd = worst_adj = 0.0
    for _ in range(n_psfs):
        psf = Psf.from_image(gen.random(shape))
        op = convolution_operator(psf, shape)
        dense = dense_operator(op.to_dense(), shape, shape)
        for _ in range(n_pairs // n_psfs):
            x, y = gen.random(shape), gen.random(shape)
            hx = op.apply(x)
            worst_fwd = max(worst_fwd, np.linalg.norm(hx - dense.apply(x)) / np.linalg.norm(hx))
            lhs, rhs = np.vdot(hx, y), np.vdot(x, op.apply_adjoint(y))
            worst_adj = max(worst_adj, abs(lhs - rhs) / abs(lhs))
    ok = worst_fwd <= 1e-10 and worst_adj <= 1e-10
    return _verdict("adjoint", ok, f"dense {worst_fwd:.2e}, adjoint {worst_adj:.2e}", "<= 1e-10")


def check_homogeneity(seed, k=50, factor=10.0, size=32):
    config = ExperimentConfig(seed=seed, flux=1e5, size=size, background_level=0.0)
    sim = simulate_data(config, RngStream(seed, 0))
    base = EmProblem(sim.operator, sim.y, 0.0)
    x1 = reconstruct(base, k)
    x10 = reconstruct(base.scaled(factor), k)
    err = float(np.max(np.abs(x10 - factor * x1)) / np.max(np.abs(factor * x1)))
    return _verdict("homogeneity", err <= 1e-10, f"relative error {err:.2e}", "<= 1e-10")


def check_lemma5(seed, k_max=500, size=32):
    config = ExperimentConfig(
        seed=seed,
        flux=2e6,
        size=size,
        background_level=0.0,
        mode="mismatched_psf",
        k_max=k_max,
    )
    result = lemma5_demo(config, [10.0], rng=RngStream(seed, 1))
    err = result.max_scaling_error
    return _verdict("lemma5", err <= 1e-8, f"scaling error {err:.2e}", "<= 1e-8")


CHECK_FUNCTIONS = {
    "stein": check_stein,
    "half-m": check_half_m,
    "adjoint": check_adjoint,
    "homogeneity": check_homogeneity,
    "lemma5": check_lemma5,
}


def cmd_validate(args):
    names = CHECKS if args.check == "all" else (args.check,)
    failed = [n for n in names if not CHECK_FUNCTIONS[n](args.seed)]
    if failed:
        raise CheckFailed(f"failed: {', '.join(failed)}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; 2 is reserved for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(
        prog="emstop",
        description="Early stopping of EM reconstructions of Poisson data.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one data realization from a config")
    p.add_argument("config")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run coupled EM and select a stopping iteration")
    p.add_argument("data", help="count image (PGM or P-TXT)")
    p.add_argument("psf", help="PSF image (P-TXT), centered at (rows//2, cols//2)")
    p.add_argument("--background", default="0", help="constant level or image path (default 0)")
    p.add_argument("--k-max", type=int, default=DEFAULT_K_MAX)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--rule", choices=SELECT_RULES, default="paukl")
    p.add_argument("--seed", type=int, default=0, help="seed of the probe vectors")
    p.add_argument("--truth", help="true object, enables the error columns")
    p.add_argument("--lambda", dest="lambda_path", help="true mean image (default H x* + b)")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sweep", help="run every realization of a config")
    p.add_argument("config")
    p.add_argument("outdir")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="run a statistical or numerical self-check")
    p.add_argument("--check", choices=CHECKS + ("all",), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "k_max", 1) < 1:
        print("error: --k-max must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (NumericalFailure, SingularityError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckFailed as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except (DomainError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
