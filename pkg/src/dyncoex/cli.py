"""Command-line front end.

Subcommands: ``pairwise`` (score test over gene pairs), ``hub``
(local-connectivity screening and testing), ``simulate`` (calibration/power
studies), ``adjust`` (Benjamini-Hochberg). Output tables are tab-separated
with a '#'-commented header block recording the full configuration and
seed, so any run is reproducible byte for byte.

Exit codes: 0 success, 2 usage or config error, 3 data validation error,
4 numerical degeneracy abort.
"""

from __future__ import annotations

import argparse
import itertools
import math
import sys
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    DegenerateCorrelation,
    DuplicateGene,
    DyncoexError,
    EmptyFile,
    EmptyTargets,
    InvalidCorrelation,
    MalformedInput,
    NonMonotoneCorrection,
    NotPositiveDefinite,
    PermutationDegeneracy,
    SingularDesign,
    ValidationError,
    ZeroVariance,
)
from .core import ols_residuals, orthonormalize
from .hub import HubSpec, gamma_sum_pvalue, hub_statistic, permutation_test, build_h_matrix
from .ingest import align, parse_covariates, parse_expression, parse_tf_targets
from .score import chisq_upper_tail, f_vector, honda_coefficients, honda_adjust, pairwise_score
from .sim import SimulationSpec, run_study
from .core import null_mles

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (MalformedInput, DuplicateGene, EmptyFile, AlignmentError, ValidationError)
_NUMERIC_ERRORS = (
    DegenerateCorrelation,
    ZeroVariance,
    SingularDesign,
    NotPositiveDefinite,
    NonMonotoneCorrection,
    PermutationDegeneracy,
    InvalidCorrelation,
    EmptyTargets,
)

# per-hub and per-study sub-seed domains under the master seed
_SEED_DOMAIN_HUB = 3
_SEED_DOMAIN_STUDY = 4


def bh_adjust(pvalues) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order.

    adjusted_(i) = min_{j >= i} p_(j) * m / j over the ascending order
    statistics, clamped to 1.
    """
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if p.size == 0:
        return p.copy()
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValidationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum(1.0, np.minimum.accumulate(scaled[::-1])[::-1])
    out = np.empty(m)
    out[order] = adjusted
    return out


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        if math.isnan(value):
            return "NA"
        return format(value, ".12g")
    return str(value)


def _write_table(path, command: str, config: dict, header: Sequence[str], rows) -> None:
    lines = [f"# dyncoex {command}"]
    for key in sorted(config):
        lines.append(f"# {key}={config[key]}")
    lines.append("\t".join(header))
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _sub_seed(master: int, domain: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(domain, index))
    return int(ss.generate_state(1, np.uint64)[0])


def _split_csv(text: Optional[str]):
    if text is None or text == "":
        return []
    return [t for t in text.split(",") if t]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pairwise(args) -> int:
    expr = parse_expression(args.expr)
    covar = parse_covariates(args.covar)
    dataset = align(expr, covar, _split_csv(args.x_cols), _split_csv(args.z_cols))
    genes = _split_csv(args.genes) or list(dataset.data.gene_ids)
    for g in genes:
        if g not in dataset.data.gene_ids:
            raise ValidationError(f"gene {g!r} not present in the expression file")
    residuals = ols_residuals(dataset.data, dataset.mean)
    xc, _ = orthonormalize(dataset.variance)
    coeffs = honda_coefficients(dataset.variance.X) if args.correction == "honda" else None

    rows = []
    pvals = []
    for gene_a, gene_b in itertools.combinations(genes, 2):
        try:
            res = pairwise_score(
                residuals.column(gene_a),
                residuals.column(gene_b),
                dataset.variance.X,
                gene_a=gene_a,
                gene_b=gene_b,
                correction=args.correction if args.correction != "none" else None,
                coefficients=coeffs,
                xc=xc,
            )
        except (ZeroVariance, DegenerateCorrelation, NonMonotoneCorrection) as exc:
            rows.append([gene_a, gene_b, None, xc.shape[1], None, None, None, None,
                         "score", type(exc).__name__])
            pvals.append(None)
            continue
        effective_p = res.p_adjusted if res.p_adjusted is not None else res.p_asymptotic
        method = "score+honda" if res.q_adjusted is not None else "score"
        rows.append([gene_a, gene_b, res.q, res.df, res.p_asymptotic,
                     res.q_adjusted, res.p_adjusted, None, method, "ok"])
        pvals.append(effective_p)

    valid = [i for i, p in enumerate(pvals) if p is not None]
    if valid:
        adjusted = bh_adjust([pvals[i] for i in valid])
        for i, adj in zip(valid, adjusted):
            rows[i][7] = float(adj)

    config = {
        "expr": args.expr, "covar": args.covar, "x_cols": args.x_cols,
        "z_cols": args.z_cols or "", "genes": ",".join(genes),
        "correction": args.correction, "alpha_level": args.alpha_level,
    }
    header = ["gene_a", "gene_b", "q", "df", "p", "q_honda", "p_honda",
              "p_bh", "method", "status"]
    _write_table(args.out, "pairwise", config, header, rows)
    return EXIT_OK


def cmd_hub(args) -> int:
    expr = parse_expression(args.expr)
    covar = parse_covariates(args.covar)
    dataset = align(expr, covar, _split_csv(args.x_cols), _split_csv(args.z_cols))
    score_filter = args.tf_score_filter
    if score_filter not in ("max", "all"):
        score_filter = float(score_filter)
    tf_map = parse_tf_targets(args.tf_map, score_filter=score_filter)

    data = dataset.data
    residuals = ols_residuals(data, dataset.mean)
    xc, _ = orthonormalize(dataset.variance)
    n = data.n_samples
    df = xc.shape[1]

    # per-hub statistics; hubs ordered canonically for stable sub-seeds
    records = []
    for idx, tf in enumerate(sorted(tf_map.targets)):
        if tf not in data.gene_ids:
            records.append({"hub": tf, "status": "missing_hub"})
            continue
        targets = [t for t in tf_map.targets[tf] if t in data.gene_ids and t != tf]
        dropped = len(tf_map.targets[tf]) - len(targets)
        if not targets:
            records.append({"hub": tf, "status": "no_targets", "dropped": dropped})
            continue
        u1 = residuals.column(tf)
        qs = []
        status = "ok"
        try:
            for t in targets:
                u2 = residuals.column(t)
                f = f_vector(u1, u2, null_mles(u1, u2))
                r = xc.T @ f
                qs.append(float(r @ r))
        except (ZeroVariance, DegenerateCorrelation) as exc:
            records.append({"hub": tf, "status": type(exc).__name__, "dropped": dropped})
            continue
        d, mean_q = hub_statistic(qs)
        records.append({
            "hub": tf, "status": status, "targets": targets, "dropped": dropped,
            "d": d, "mean_q": mean_q, "seed_index": idx,
        })

    scored = [r for r in records if r["status"] == "ok"]
    scored.sort(key=lambda r: (-r["mean_q"], r["hub"]))
    selected = {r["hub"] for r in scored[: args.top]}

    rows = []
    for rec in scored + [r for r in records if r["status"] != "ok"]:
        if rec["status"] != "ok":
            rows.append([rec["hub"], rec.get("dropped", 0), None, None, None,
                         None, None, 0, "none", rec["status"]])
            continue
        hub_seed = _sub_seed(args.seed, _SEED_DOMAIN_HUB, rec["seed_index"])
        spec = HubSpec(hub=rec["hub"], targets=tuple(rec["targets"]))
        p_analytic = None
        p_perm = None
        used = 0
        methods = []
        in_screen = rec["hub"] in selected
        want_analytic = args.analytic == "all" or (args.analytic == "screened" and in_screen)
        if want_analytic and len(rec["targets"]) < n:
            cols = [data.gene_ids.index(rec["hub"])] + [
                data.gene_ids.index(t) for t in rec["targets"]
            ]
            sub = residuals.U[:, cols]
            hmat = build_h_matrix(np.diag(sub.T @ sub / n), sub.T @ sub / n)
            if hmat.is_positive_definite:
                p_analytic = gamma_sum_pvalue(
                    rec["d"], hmat.eigenvalues, df=df, draws=args.mc_draws, seed=hub_seed
                )
                methods.append("gamma-sum")
        if in_screen:
            outcome = permutation_test(
                data, dataset.mean, dataset.variance, spec,
                min_perm=args.min_perm, batch=args.batch, max_perm=args.max_perm,
                exceed_threshold=args.exceed, seed=hub_seed,
            )
            p_perm = outcome.p
            used = outcome.permutations_used
            methods.append("permutation")
        rows.append([
            rec["hub"], len(rec["targets"]), rec["dropped"], rec["d"], rec["mean_q"],
            p_analytic, p_perm, used, "+".join(methods) or "screened-out", "ok",
        ])

    config = {
        "expr": args.expr, "covar": args.covar, "tf_map": args.tf_map,
        "x_cols": args.x_cols, "z_cols": args.z_cols or "",
        "tf_score_filter": args.tf_score_filter, "top": args.top,
        "min_perm": args.min_perm, "batch": args.batch, "max_perm": args.max_perm,
        "exceed": args.exceed, "mc_draws": args.mc_draws, "seed": args.seed,
        "analytic": args.analytic, "alpha_level": args.alpha_level,
    }
    header = ["hub", "n_targets", "dropped_targets", "d", "mean_q",
              "p_analytic", "p_permutation", "permutations_used", "method", "status"]
    _write_table(args.out, "hub", config, header, rows)
    return EXIT_OK


_SIM_KEYS = {
    "n": int, "p": int, "link": str, "alphas": str, "alpha0": float,
    "betas": str, "b0": float, "replicates": int, "level": float, "seed": int,
}


def _read_sim_config(path) -> dict:
    config = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _SIM_KEYS:
                raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                config[key] = _SIM_KEYS[key](value)
            except ValueError:
                raise ValidationError(
                    f"{path}:{lineno}: bad value {value!r} for {key}"
                ) from None
    return config


def cmd_simulate(args) -> int:
    try:
        config = _read_sim_config(args.config)
        seed = args.seed if args.seed is not None else config.get("seed")
        if seed is None:
            raise ValidationError("a seed is required (config key 'seed' or --seed)")
        n = config.get("n", 70)
        p = config.get("p", 1)
        link = config.get("link", "tanh")
        alphas = [float(a) for a in _split_csv(config.get("alphas", "0"))]
        betas = [float(b) for b in _split_csv(config.get("betas", "0"))]
        replicates = config.get("replicates", 1000)
        level = config.get("level", 0.05)
        alpha0 = config.get("alpha0", 0.0)
        b0 = config.get("b0", 0.0)
        if not alphas:
            raise ValidationError("config key 'alphas' selects at least one alpha")
        if not betas:
            betas = [0.0]
        specs = []
        for cell, (beta, alpha) in enumerate(itertools.product(betas, alphas)):
            specs.append(SimulationSpec(
                n=n, p=p, rho_link=link, alpha=(alpha,) * p, alpha0=alpha0,
                beta=beta, b0=b0, replicates=replicates, nominal_level=level,
                seed=_sub_seed(seed, _SEED_DOMAIN_STUDY, cell),
            ))
    except (ValidationError, OSError) as exc:
        print(f"dyncoex simulate: {exc}", file=sys.stderr)
        return EXIT_USAGE

    rows = []
    for spec in specs:
        report = run_study(spec)
        rows.append([
            spec.rho_link, spec.beta, spec.alpha[0], report.rejection_rate,
            report.mc_stderr, report.rejections, report.replicates,
            report.resampled_covariates,
        ])
    config_echo = {
        "config": args.config, "seed": seed, "n": n, "p": p, "link": link,
        "alphas": ",".join(_fmt(a) for a in alphas),
        "betas": ",".join(_fmt(b) for b in betas),
        "replicates": replicates, "level": level, "alpha0": alpha0, "b0": b0,
    }
    header = ["link", "beta", "alpha", "rejection_rate", "mc_stderr",
              "rejections", "replicates", "resampled_covariates"]
    _write_table(args.out, "simulate", config_echo, header, rows)
    return EXIT_OK


def cmd_adjust(args) -> int:
    pvals = []
    with open(args.pvals, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                pvals.append(float(line.split("\t")[0]))
            except ValueError:
                raise MalformedInput(f"not a number: {line!r}", lineno, 1) from None
    if not pvals:
        raise EmptyFile(f"{args.pvals} has no p-values")
    adjusted = bh_adjust(pvals)
    rows = [[p, float(a)] for p, a in zip(pvals, adjusted)]
    _write_table(args.out, "adjust", {"pvals": args.pvals}, ["p", "p_bh"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyncoex",
        description="Tests for gene coexpression that varies with continuous covariates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--expr", required=True, help="expression TSV (genes x samples)")
        p.add_argument("--covar", required=True, help="covariate TSV (samples x covariates)")
        p.add_argument("--x-cols", required=True,
                       help="comma-separated covariate names for the variance model")
        p.add_argument("--z-cols", default="",
                       help="comma-separated covariate names for the mean model "
                            "(intercept always added)")
        p.add_argument("--alpha-level", type=float, default=0.05)
        p.add_argument("--out", default="-", help="output path (default stdout)")

    p_pair = sub.add_parser("pairwise", help="pairwise score tests")
    add_data_flags(p_pair)
    p_pair.add_argument("--genes", default="",
                        help="comma-separated genes to test (all pairs); default all genes")
    p_pair.add_argument("--correction", choices=["none", "honda"], default="none")
    p_pair.set_defaults(func=cmd_pairwise)

    p_hub = sub.add_parser("hub", help="local-connectivity tests per TF")
    add_data_flags(p_hub)
    p_hub.add_argument("--tf-map", required=True, help="TF-target edge TSV")
    p_hub.add_argument("--tf-score-filter", default="max",
                       help="'max' (top score tier per TF), 'all', or a numeric threshold")
    p_hub.add_argument("--top", type=int, default=10,
                       help="number of top hubs (by d/J) to permutation-test")
    p_hub.add_argument("--min-perm", type=int, default=100)
    p_hub.add_argument("--batch", type=int, default=100)
    p_hub.add_argument("--max-perm", type=int, default=10**6)
    p_hub.add_argument("--exceed", type=int, default=2)
    p_hub.add_argument("--mc-draws", type=int, default=10**6)
    p_hub.add_argument("--analytic", choices=["screened", "all", "none"], default="screened")
    p_hub.add_argument("--seed", type=int, required=True)
    p_hub.set_defaults(func=cmd_hub)

    p_sim = sub.add_parser("simulate", help="calibration/power study")
    p_sim.add_argument("--config", required=True, help="key=value study config file")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="master seed (required here or in the config)")
    p_sim.add_argument("--out", default="-")
    p_sim.set_defaults(func=cmd_simulate)

    p_adj = sub.add_parser("adjust", help="Benjamini-Hochberg adjustment")
    p_adj.add_argument("--pvals", required=True, help="file with one p-value per line")
    p_adj.add_argument("--out", default="-")
    p_adj.set_defaults(func=cmd_adjust)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"dyncoex {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"dyncoex {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"dyncoex {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
