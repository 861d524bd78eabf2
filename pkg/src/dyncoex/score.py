"""Pairwise covariance-heteroskedasticity score test.

For a residual pair (u1, u2) with null MLEs (s1, s2, r) where
s_g = sigma_g^2, each sample contributes

    f_i = [ r (s1 s2 - r^2)
            + (s1 s2 + r^2) u1_i u2_i
            - s1 r u2_i^2
            - s2 r u1_i^2 ] / sqrt( (s1 s2 + r^2) (s1 s2 - r^2)^2 ),

and with X̌ the centered orthonormalized variance covariates, the statistic

    q = sum_p ( sum_i X̌_ip f_i )^2

is asymptotically chi-squared with P degrees of freedom under the null of
covariate-free covariance. The identity sum_i f_i = 0 holds by construction
of the MLEs. The statistic is invariant to rescaling either residual vector
and does not depend on the functional form linking covariates to covariance.

A small-sample correction maps the chi-squared critical value C through a
cubic f(C) whose coefficients depend only on the covariate design, N and P;
the adjusted statistic is the inverse image f^{-1}(q).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import chdtrc, chdtri

from .core import (
    NullMles,
    VarianceCovariates,
    _as_vector,
    _design_array,
    null_mles,
    orthonormalize,
    prepare_covariates,
)
from .errors import NonMonotoneCorrection, ShapeError, ValidationError

__all__ = [
    "FVector",
    "PairScoreResult",
    "HondaCoefficients",
    "f_vector",
    "score_components",
    "pairwise_score",
    "chisq_upper_tail",
    "honda_coefficients",
    "honda_critical",
    "honda_adjust",
]

# The per-sample score contributions f_i sum to zero exactly in real
# arithmetic; floating point leaves O(eps * N) residue.
FVector = np.ndarray

P_FLOOR = 1e-300


@dataclass(frozen=True)
class PairScoreResult:
    """Score statistic for one gene pair."""

    gene_a: str
    gene_b: str
    q: float
    df: int
    p_asymptotic: float
    q_adjusted: Optional[float] = None
    p_adjusted: Optional[float] = None


@dataclass(frozen=True)
class HondaCoefficients:
    """Coefficients of the cubic critical-value correction.

    ``A3`` is a sum of squares of design contractions and is strictly
    positive for generic continuous covariates.
    """

    A1: float
    A2: float
    A3: float
    n_samples: int
    df: int

    def __post_init__(self):
        if self.n_samples < 3:
            raise ValidationError(f"n_samples must be >= 3, got {self.n_samples}")
        if self.df < 1:
            raise ValidationError(f"df must be >= 1, got {self.df}")
        if not self.A3 > 0.0:
            raise ValidationError(f"A3 must be strictly positive, got {self.A3}")
        for name in ("A1", "A2", "A3"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} is not finite")


def f_vector(u1, u2, mles: NullMles) -> FVector:
    """Per-sample score contributions of a residual pair.

    sum(f) = 0 holds up to floating point; f is exactly invariant to
    rescaling u1 or u2 (numerator and denominator are both cubic in the
    scales).
    """
    a = _as_vector(u1, "u1")
    b = _as_vector(u2, "u2")
    if a.shape != b.shape:
        raise ShapeError(f"residual lengths differ: {a.size} vs {b.size}")
    s12 = mles.sigma1_sq * mles.sigma2_sq
    r = mles.rho_hat
    r2 = r * r
    w = np.sqrt((s12 + r2)) * (s12 - r2)
    numer = (
        r * (s12 - r2)
        + (s12 + r2) * a * b
        - mles.sigma1_sq * r * b * b
        - mles.sigma2_sq * r * a * a
    )
    return numer / w


def score_components(f: FVector, xc: np.ndarray) -> np.ndarray:
    """Length-P vector r with r_p = sum_i X̌_ip f_i; q = sum(r^2).

    Each component is asymptotically standard normal under the null, which
    is what the hub-level combination relies on.
    """
    return xc.T @ f


def chisq_upper_tail(q: float, df: int) -> float:
    """Upper-tail chi-squared probability via the regularized incomplete
    gamma, clamped to [1e-300, 1]."""
    if df < 1:
        raise ValidationError(f"df must be >= 1, got {df}")
    if not np.isfinite(q) or q < 0:
        raise ValidationError(f"q must be a nonnegative real, got {q}")
    p = float(chdtrc(df, q))
    return min(1.0, max(P_FLOOR, p))


def pairwise_score(
    u1,
    u2,
    X,
    *,
    gene_a: str = "gene_a",
    gene_b: str = "gene_b",
    correction: Optional[str] = None,
    coefficients: Optional[HondaCoefficients] = None,
    xc: Optional[np.ndarray] = None,
) -> PairScoreResult:
    """Score test of whether the covariance of a residual pair varies with X.

    Parameters
    ----------
    u1, u2 : residual vectors of the two genes (length N).
    X : variance covariates, N x P, no intercept column.
    correction : None (default) or "honda" to also report the small-sample
        adjusted statistic and p-value. The asymptotic p is always reported.
    coefficients : optional explicit correction coefficients; computed from
        X when omitted.
    xc : optional precomputed centered orthonormal basis of X; it does not
        depend on the residual pair, so batch drivers share it across pairs.

    Raises
    ------
    ZeroVariance, DegenerateCorrelation, SingularDesign, ShapeError
    """
    x = _design_array(X, VarianceCovariates)
    a = _as_vector(u1, "u1")
    if x.shape[0] != a.size:
        raise ShapeError(f"u1 has {a.size} entries but X has {x.shape[0]} rows")
    mles = null_mles(u1, u2)
    prepared = prepare_covariates(x, mles, x.shape[0]) if xc is None else None
    basis = prepared.Xc if xc is None else xc
    f = f_vector(u1, u2, mles)
    r = score_components(f, basis)
    q = float(r @ r)
    df = basis.shape[1]
    result = PairScoreResult(
        gene_a=gene_a,
        gene_b=gene_b,
        q=q,
        df=df,
        p_asymptotic=chisq_upper_tail(q, df),
    )
    if correction is None or correction == "none":
        return result
    if correction != "honda":
        raise ValidationError(f"unknown correction {correction!r}")
    if coefficients is None:
        coefficients = honda_coefficients(x)
    q_adj = honda_adjust(q, coefficients)
    return PairScoreResult(
        gene_a=gene_a,
        gene_b=gene_b,
        q=q,
        df=df,
        p_asymptotic=result.p_asymptotic,
        q_adjusted=q_adj,
        p_adjusted=chisq_upper_tail(q_adj, df),
    )


# ---------------------------------------------------------------------------
# small-sample correction
# ---------------------------------------------------------------------------


def honda_coefficients(X, *, n_samples: int = None, df: int = None) -> HondaCoefficients:
    """Cubic-correction coefficients from the covariate design alone.

    With M = X̌ X̌^T the projection onto the centered orthonormalized
    covariates, the chi-squared approximation error of the quadratic-form
    statistic is driven by three design contractions:

        D1 = sum_i M_ii^2,
        G1 = sum_{i,j} M_ij^3  = sum_{pqs} (sum_i X̌_ip X̌_iq X̌_is)^2,
        G2 = sum_{i,j} M_ii M_ij M_jj = sum_p (sum_i M_ii X̌_ip)^2,

    scaled by the squared skewness and excess kurtosis of the per-sample
    score contributions (kappa3^2 = 8, kappa4 = 12 for the classical
    variance-score form):

        A1 = 0,  A2 = 3 kappa4 N D1,  A3 = kappa3^2 N (2 G1 + 3 G2).

    All three are O(1) in N for iid covariates, so every correction term of
    the cubic is O(1/N). G1 and G2 are sums of squares, hence A3 > 0 for any
    design with third-moment structure.
    """
    x = _design_array(X, VarianceCovariates)
    n, p = x.shape
    if n_samples is not None and n_samples != n:
        raise ShapeError(f"n_samples={n_samples} but X has {n} rows")
    if df is not None and df != p:
        raise ShapeError(f"df={df} but X has {p} columns")
    xc, _ = orthonormalize(x)
    leverages = np.einsum("ip,ip->i", xc, xc)
    d1 = float(leverages @ leverages)
    t = np.einsum("ip,iq,is->pqs", xc, xc, xc)
    g1 = float(np.sum(t * t))
    v = xc.T @ leverages
    g2 = float(v @ v)
    kappa3_sq = 8.0
    kappa4 = 12.0
    return HondaCoefficients(
        A1=0.0,
        A2=3.0 * kappa4 * n * d1,
        A3=kappa3_sq * n * (2.0 * g1 + 3.0 * g2),
        n_samples=n,
        df=p,
    )


def _cubic_terms(coeffs: HondaCoefficients) -> tuple:
    n = float(coeffs.n_samples)
    p = float(coeffs.df)
    c1 = (coeffs.A3 - coeffs.A2 + coeffs.A1) / (12.0 * n * p)
    c2 = (coeffs.A2 - 2.0 * coeffs.A3) / (12.0 * n * p * (p + 2.0))
    c3 = coeffs.A3 / (12.0 * n * p * (p + 2.0) * (p + 4.0))
    return c1, c2, c3


def honda_critical(c_gamma: float, coeffs: HondaCoefficients) -> float:
    """Size-corrected critical value f(C); every correction term is O(1/N)."""
    if c_gamma < 0:
        raise ValidationError(f"critical value must be nonnegative, got {c_gamma}")
    c1, c2, c3 = _cubic_terms(coeffs)
    return c_gamma * (1.0 + c1 + c_gamma * (c2 + c_gamma * c3))


def _check_monotone(coeffs: HondaCoefficients, hi: float) -> None:
    """Raise unless f'(C) > 0 on [0, hi].

    f'(C) = (1 + c1) + 2 c2 C + 3 c3 C^2 with c3 > 0 opens upward; it is
    positive on the interval iff positive at both ends and at the vertex
    when the vertex lies inside.
    """
    c1, c2, c3 = _cubic_terms(coeffs)

    def fprime(c):
        return (1.0 + c1) + 2.0 * c2 * c + 3.0 * c3 * c * c

    checkpoints = [0.0, hi]
    if c3 > 0:
        vertex = -c2 / (3.0 * c3)
        if 0.0 < vertex < hi:
            checkpoints.append(vertex)
    if min(fprime(c) for c in checkpoints) <= 0.0:
        raise NonMonotoneCorrection(
            "critical-value correction is not monotone on the working range "
            f"[0, {hi:.3g}] for N={coeffs.n_samples}, P={coeffs.df}"
        )


def honda_adjust(q: float, coeffs: HondaCoefficients) -> float:
    """Adjusted statistic: the unique root of f(t) = q.

    Bisection on a verified bracket refined by Newton, to absolute
    tolerance 1e-10. Raises NonMonotoneCorrection when f is not increasing
    over the bracket (small-N pathologies).
    """
    if q < 0 or not np.isfinite(q):
        raise ValidationError(f"q must be a nonnegative real, got {q}")
    if q == 0.0:
        return 0.0
    lo, hi = 0.0, 2.0 * q + 10.0
    while honda_critical(hi, coeffs) < q:
        hi *= 2.0
        if hi > 1e12:
            raise NonMonotoneCorrection("failed to bracket the adjusted statistic")
    _check_monotone(coeffs, hi)
    c1, c2, c3 = _cubic_terms(coeffs)
    t = min(q, hi)
    for _ in range(200):
        ft = honda_critical(t, coeffs) - q
        if abs(ft) < 1e-10:
            break
        if ft > 0:
            hi = t
        else:
            lo = t
        deriv = (1.0 + c1) + 2.0 * c2 * t + 3.0 * c3 * t * t
        t_newton = t - ft / deriv if deriv > 0 else None
        if t_newton is not None and lo < t_newton < hi:
            t = t_newton
        else:
            t = 0.5 * (lo + hi)
    return t


def honda_reference_grid(df: int, levels=(0.9, 0.95, 0.99, 0.999)) -> np.ndarray:
    """Chi-squared critical values used when examining the correction map."""
    return np.array([float(chdtri(df, 1.0 - level)) for level in levels])
