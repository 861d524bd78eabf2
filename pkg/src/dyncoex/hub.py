"""Local-connectivity test of one hub gene against its targets.

The hub statistic is the unweighted sum of the pairwise score statistics of
the hub against each target, d = sum_k q_k. Under the global null the
per-pair score components are jointly normal with a correlation matrix H
whose off-diagonal entries have a closed form in the null variances and
covariances; with eigenvalues lambda_k of H,

    d  ~  sum_k Gamma(shape=P/2, scale=2*lambda_k)

(each summand is lambda_k times a chi-squared with P degrees of freedom).
The tail probability is evaluated by Monte Carlo. When H is not numerically
positive definite, or the gene count approaches the sample count, a
sequential permutation test over row shuffles of the variance covariates is
the fallback.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import (
    DataMatrix,
    MeanCovariates,
    VarianceCovariates,
    _design_array,
    null_mles,
    ols_residuals,
    orthonormalize,
)
from .errors import (
    DegenerateCorrelation,
    DyncoexError,
    EmptyTargets,
    NotPositiveDefinite,
    PermutationDegeneracy,
    ValidationError,
)
from .rng import indexed_stream, philox_key, stream
from .score import chisq_upper_tail, f_vector

__all__ = [
    "HubSpec",
    "HMatrix",
    "HubResult",
    "PermutationOutcome",
    "hub_statistic",
    "pair_cross_covariance",
    "build_h_matrix",
    "gamma_sum_pvalue",
    "permutation_test",
    "hub_test",
    "screen_hubs",
]

PD_EIGENVALUE_FLOOR = 1e-10
MIN_MC_DRAWS = 10**5

# stream-path domains under one master seed
_DOMAIN_PERMUTATION = 0
_DOMAIN_GAMMA = 2


@dataclass(frozen=True)
class HubSpec:
    """A hub gene and the ordered targets it is tested against."""

    hub: str
    targets: tuple

    def __post_init__(self):
        targets = tuple(self.targets)
        if not targets:
            raise EmptyTargets(f"hub {self.hub!r} has no targets")
        if len(set(targets)) != len(targets):
            raise ValidationError(f"hub {self.hub!r} has duplicate targets")
        if self.hub in targets:
            raise ValidationError(f"hub {self.hub!r} appears in its own target list")
        object.__setattr__(self, "targets", targets)

    @property
    def n_targets(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class HMatrix:
    """Asymptotic correlation matrix of the per-pair score components."""

    H: np.ndarray
    eigenvalues: np.ndarray  # sorted decreasing
    min_eigenvalue: float

    @property
    def is_positive_definite(self) -> bool:
        return self.min_eigenvalue > PD_EIGENVALUE_FLOOR


@dataclass(frozen=True)
class HubResult:
    """Combined statistic and p-values for one hub gene."""

    hub: str
    targets: tuple
    d: float
    per_target_q: tuple
    mean_q: float
    eigenvalues: Optional[np.ndarray] = None
    p_analytic: Optional[float] = None
    p_permutation: Optional[float] = None
    permutations_used: int = 0
    degenerate_permutations: int = 0


class PermutationOutcome(NamedTuple):
    p: float
    permutations_used: int
    exceedances: int
    degenerate_permutations: int


def hub_statistic(q_values: Sequence[float]) -> tuple:
    """Sum the per-target statistics; returns ``(d, d / n_targets)``."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise EmptyTargets("no per-target statistics to combine")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise ValidationError("per-target statistics must be nonnegative reals")
    d = float(q.sum())
    return d, d / q.size


def pair_cross_covariance(
    s1: float, sk: float, sl: float, r1k: float, r1l: float, rkl: float
) -> float:
    """Per-observation covariance of the score contributions of pairs
    (hub, k) and (hub, l).

    With a = s1, b = sk, c = sl the null variances and r = r1k, s = r1l,
    t = rkl the null covariances, the closed form is the symmetric
    polynomial

        a^3 b c t - a^2 b c r s - a^2 b s^2 t - a^2 c r^2 t
        + 2 a^2 r s t^2 + a b r s^3 + a c r^3 s - 3 a r^2 s^2 t
        + r^3 s^3,

    derived by Isserlis expansion of E[V_k V_l] and verified against the
    k = l variance special case (ab + r^2)(ab - r^2)^2 and a Monte-Carlo
    oracle. Every term carries a covariance factor, so independence in any
    of the three pairs that should decouple the statistics sends it to 0.
    """
    a, b, c, r, s, t = s1, sk, sl, r1k, r1l, rkl
    return (
        a**3 * b * c * t
        - a**2 * b * c * r * s
        - a**2 * b * s**2 * t
        - a**2 * c * r**2 * t
        + 2.0 * a**2 * r * s * t**2
        + a * b * r * s**3
        + a * c * r**3 * s
        - 3.0 * a * r**2 * s**2 * t
        + r**3 * s**3
    )


def build_h_matrix(sigma_sqs: Sequence[float], rhos: np.ndarray) -> HMatrix:
    """Correlation matrix H of the per-pair components for one hub.

    Parameters
    ----------
    sigma_sqs : length-K null variances, hub first.
    rhos : K x K symmetric matrix of null covariances (diagonal ignored).

    The (k, l) entry of H is the cross covariance normalized by the two
    pairs' standard deviations sqrt((s1 sk + r1k^2)(s1 sk - r1k^2)^2).
    Eigenvalues are returned sorted decreasing; ``is_positive_definite``
    reflects a 1e-10 floor on the smallest one, below which the analytic
    null is disabled and the permutation fallback is required.
    """
    s = np.asarray(sigma_sqs, dtype=np.float64).ravel()
    rho = np.asarray(rhos, dtype=np.float64)
    k = s.size
    if k < 2:
        raise ValidationError("need the hub and at least one target")
    if rho.shape != (k, k):
        raise ValidationError(f"rhos must be {k}x{k}, got {rho.shape}")
    if np.any(s <= 0):
        raise ValidationError("variances must be positive")
    if not np.allclose(rho, rho.T, atol=1e-10):
        raise ValidationError("rhos must be symmetric")
    s1 = s[0]
    r1 = rho[0, 1:]
    var_terms = s1 * s[1:]  # s1 * sk for each target
    if np.any(r1 * r1 >= (1.0 - 1e-12) * var_terms):
        raise DegenerateCorrelation("a hub-target pair is perfectly correlated")
    denom_k = np.sqrt(var_terms + r1 * r1) * (var_terms - r1 * r1)
    m = k - 1
    h = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            cov = pair_cross_covariance(
                s1, s[1 + i], s[1 + j], r1[i], r1[j], rho[1 + i, 1 + j]
            )
            h[i, j] = h[j, i] = cov / (denom_k[i] * denom_k[j])
    eigenvalues = np.linalg.eigvalsh(h)[::-1].copy()
    return HMatrix(H=h, eigenvalues=eigenvalues, min_eigenvalue=float(eigenvalues[-1]))


def gamma_sum_pvalue(
    d: float,
    eigenvalues: Sequence[float],
    df: int,
    draws: int = 10**6,
    seed: int = 0,
) -> float:
    """Monte-Carlo upper tail of sum_k lambda_k * chisq(df) at ``d``.

    Each summand is Gamma(shape=df/2, scale=2*lambda_k). Reported with
    add-one smoothing, (hits + 1) / (draws + 1).
    """
    lam = np.asarray(eigenvalues, dtype=np.float64).ravel()
    if np.any(lam <= 0):
        raise NotPositiveDefinite(
            f"eigenvalues must be positive for the analytic null, got min {lam.min():.3g}"
        )
    if draws < MIN_MC_DRAWS:
        raise ValidationError(f"draws must be >= {MIN_MC_DRAWS}, got {draws}")
    if df < 1:
        raise ValidationError(f"df must be >= 1, got {df}")
    rng = stream(seed, _DOMAIN_GAMMA)
    total = np.zeros(draws)
    for lam_k in lam:
        total += lam_k * rng.chisquare(df, size=draws)
    hits = int(np.count_nonzero(total >= d))
    return (hits + 1.0) / (draws + 1.0)


def _pair_f_matrix(U: np.ndarray, hub_col: int, target_cols: Sequence[int]) -> np.ndarray:
    """Stack the per-pair f vectors (N x J); degeneracies propagate."""
    u1 = U[:, hub_col]
    cols = []
    for j in target_cols:
        mles = null_mles(u1, U[:, j])
        cols.append(f_vector(u1, U[:, j], mles))
    return np.column_stack(cols)


def _resolve_columns(Y: DataMatrix, spec: HubSpec) -> tuple:
    hub_col = Y.gene_ids.index(spec.hub) if spec.hub in Y.gene_ids else None
    if hub_col is None:
        raise ValidationError(f"hub gene {spec.hub!r} not present in the data")
    target_cols = []
    for t in spec.targets:
        if t not in Y.gene_ids:
            raise ValidationError(f"target gene {t!r} not present in the data")
        target_cols.append(Y.gene_ids.index(t))
    return hub_col, target_cols


def permutation_test(
    Y: DataMatrix,
    Z: MeanCovariates,
    X: VarianceCovariates,
    spec: HubSpec,
    min_perm: int = 100,
    batch: int = 100,
    max_perm: int = 10**6,
    exceed_threshold: int = 2,
    seed: int = 0,
) -> PermutationOutcome:
    """Sequential permutation test of the hub statistic.

    The observed d is computed once. Each replicate shuffles the rows of
    the variance covariates only; the mean model, residuals and null MLEs
    are untouched, so the per-pair f vectors are computed once and reused.
    After the first ``min_perm`` replicates and then after every ``batch``
    more, the run stops as soon as ``exceed_threshold`` replicates have
    reached the observed d; otherwise it continues to ``max_perm``. The
    p-value is (1 + exceedances) / (1 + B).

    Replicate b draws its shuffle from a Philox stream at counter offset b
    under the master seed, so results are independent of batch size and of
    any parallel schedule, and identical runs are bit-identical.
    """
    if min_perm < 1 or batch < 1 or max_perm < 1 or exceed_threshold < 1:
        raise ValidationError("permutation parameters must be positive")
    if min_perm > max_perm:
        raise ValidationError(f"min_perm={min_perm} exceeds max_perm={max_perm}")
    hub_col, target_cols = _resolve_columns(Y, spec)
    U = ols_residuals(Y, Z).U
    F = _pair_f_matrix(U, hub_col, target_cols)
    xc, _ = orthonormalize(X)
    n = xc.shape[0]
    d_obs = float(np.sum((xc.T @ F) ** 2))

    key = philox_key(seed, _DOMAIN_PERMUTATION)
    hits = 0
    degenerate = 0
    done = 0
    next_check = min_perm
    while done < max_perm:
        stop_at = min(next_check, max_perm)
        while done < stop_at:
            perm = indexed_stream(key, done).permutation(n)
            try:
                d_b = float(np.sum((xc[perm].T @ F) ** 2))
            except DyncoexError:
                degenerate += 1
                done += 1
                continue
            if d_b >= d_obs:
                hits += 1
            done += 1
        if hits >= exceed_threshold:
            break
        next_check = done + batch
    if degenerate > 0.01 * done:
        raise PermutationDegeneracy(
            f"{degenerate} of {done} permutation replicates were degenerate"
        )
    p = (1.0 + hits) / (1.0 + done)
    return PermutationOutcome(
        p=p, permutations_used=done, exceedances=hits, degenerate_permutations=degenerate
    )


def hub_test(
    Y: DataMatrix,
    Z: MeanCovariates,
    X: VarianceCovariates,
    spec: HubSpec,
    *,
    analytic: bool = True,
    permutation: bool = False,
    mc_draws: int = 10**6,
    seed: int = 0,
    min_perm: int = 100,
    batch: int = 100,
    max_perm: int = 10**6,
    exceed_threshold: int = 2,
) -> HubResult:
    """Full local-connectivity test for one hub.

    Computes the per-target statistics and d, the H matrix from the null
    MLEs, the analytic Monte-Carlo p when requested (and available: H
    numerically positive definite and fewer genes than samples), and the
    sequential permutation p when requested.
    """
    hub_col, target_cols = _resolve_columns(Y, spec)
    U = ols_residuals(Y, Z).U
    F = _pair_f_matrix(U, hub_col, target_cols)
    xc, _ = orthonormalize(X)
    S = xc.T @ F
    q = np.sum(S * S, axis=0)
    d, mean_q = hub_statistic(q)

    n = U.shape[0]
    cols = [hub_col] + list(target_cols)
    sub = U[:, cols]
    cross = (sub.T @ sub) / n
    hmat = build_h_matrix(np.diag(cross), cross)

    p_analytic = None
    if analytic and hmat.is_positive_definite and spec.n_targets < n:
        p_analytic = gamma_sum_pvalue(
            d, hmat.eigenvalues, df=xc.shape[1], draws=mc_draws, seed=seed
        )

    p_perm = None
    used = 0
    degenerate = 0
    if permutation:
        outcome = permutation_test(
            Y,
            Z,
            X,
            spec,
            min_perm=min_perm,
            batch=batch,
            max_perm=max_perm,
            exceed_threshold=exceed_threshold,
            seed=seed,
        )
        p_perm = outcome.p
        used = outcome.permutations_used
        degenerate = outcome.degenerate_permutations

    return HubResult(
        hub=spec.hub,
        targets=spec.targets,
        d=d,
        per_target_q=tuple(float(v) for v in q),
        mean_q=mean_q,
        eigenvalues=hmat.eigenvalues,
        p_analytic=p_analytic,
        p_permutation=p_perm,
        permutations_used=used,
        degenerate_permutations=degenerate,
    )


def screen_hubs(results: Sequence[HubResult], top: int) -> list:
    """Rank hubs by mean per-target statistic, descending.

    Ties break lexicographically on the hub id so reports are reproducible.
    Returns the ``top`` highest-ranked entries, the ones to forward to the
    permutation stage.
    """
    if not results:
        raise ValidationError("no hub results to screen")
    if top < 1:
        raise ValidationError(f"top must be positive, got {top}")
    ranked = sorted(results, key=lambda r: (-r.mean_q, r.hub))
    return ranked[:top]


def mean_chi_squared_reference(q_values: Sequence[float], df: int = 1) -> float:
    """Heuristic screening reference: upper tail of chi-squared(df) at the
    mean per-target statistic."""
    _, mean_q = hub_statistic(q_values)
    return chisq_upper_tail(mean_q, df)
