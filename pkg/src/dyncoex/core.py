"""Residualization, restricted null MLEs, and covariate preparation.

These are the shared ingredients of every test in the package: OLS residuals
of expression on the mean-model covariates, the null maximum-likelihood
estimates (variances and constant covariance) of a residual pair, and the
centered/orthonormalized variance-covariate matrix the score statistic is
evaluated on.

All operations are pure functions of their inputs and are safe to call
concurrently on shared, read-only arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DegenerateCorrelation,
    ShapeError,
    SingularDesign,
    ValidationError,
    ZeroVariance,
)

__all__ = [
    "DataMatrix",
    "MeanCovariates",
    "VarianceCovariates",
    "ResidualMatrix",
    "NullMles",
    "PreparedCovariates",
    "ols_residuals",
    "null_mles",
    "orthonormalize",
    "intercept_weight",
    "prepare_covariates",
]

# rho_hat^2 >= (1 - DEGENERACY_RTOL) * sigma1_sq * sigma2_sq is treated as
# perfect correlation: the statistic's denominator vanishes there.
DEGENERACY_RTOL = 1e-12

# relative cutoff on QR diagonals below which a design is called singular
RANK_RTOL = 1e-10


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def _check_full_rank(mat: np.ndarray, name: str) -> None:
    r = np.linalg.qr(mat, mode="r")
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= RANK_RTOL * max(diag.max(), 1e-30):
        raise SingularDesign(f"{name} is rank deficient")


@dataclass(frozen=True)
class DataMatrix:
    """An N-samples x G-genes expression matrix with row/column identifiers."""

    values: np.ndarray
    gene_ids: tuple
    sample_ids: tuple

    def __post_init__(self):
        values = _as_matrix(self.values, "values")
        gene_ids = tuple(self.gene_ids)
        sample_ids = tuple(self.sample_ids)
        n, g = values.shape
        if n < 3:
            raise ValidationError(f"need at least 3 samples, got {n}")
        if len(gene_ids) != g:
            raise ShapeError(f"{len(gene_ids)} gene ids for {g} columns")
        if len(sample_ids) != n:
            raise ShapeError(f"{len(sample_ids)} sample ids for {n} rows")
        if len(set(gene_ids)) != g:
            raise ValidationError("gene ids are not unique")
        if len(set(sample_ids)) != n:
            raise ValidationError("sample ids are not unique")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_ids", gene_ids)
        object.__setattr__(self, "sample_ids", sample_ids)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    def column(self, gene_id: str) -> np.ndarray:
        try:
            j = self.gene_ids.index(gene_id)
        except ValueError:
            raise KeyError(f"unknown gene id {gene_id!r}") from None
        return self.values[:, j]


@dataclass(frozen=True)
class MeanCovariates:
    """Mean-model design matrix Z (N x R), intercept column included."""

    Z: np.ndarray

    def __post_init__(self):
        z = _as_matrix(self.Z, "Z")
        n, r = z.shape
        if r >= n:
            raise ValidationError(f"mean model has {r} columns for {n} samples")
        _check_full_rank(z, "Z")
        # the intercept may be any column combination spanning the constant
        ones = np.ones(n)
        coef, *_ = np.linalg.lstsq(z, ones, rcond=None)
        if np.linalg.norm(ones - z @ coef) > 1e-8 * np.sqrt(n):
            raise ValidationError("Z must span an intercept column")
        object.__setattr__(self, "Z", z)

    @property
    def n_samples(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class VarianceCovariates:
    """Variance-model covariates X (N x P); the intercept is implicit."""

    X: np.ndarray

    def __post_init__(self):
        x = _as_matrix(self.X, "X")
        n, p = x.shape
        if p >= n:
            raise ValidationError(f"variance model has {p} columns for {n} samples")
        _check_full_rank(x, "X")
        _check_full_rank(np.column_stack([np.ones(n), x]), "[1 | X]")
        object.__setattr__(self, "X", x)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class ResidualMatrix:
    """OLS residuals (N x G), one column per gene."""

    U: np.ndarray
    gene_ids: tuple = None

    def __post_init__(self):
        u = _as_matrix(self.U, "U")
        object.__setattr__(self, "U", u)
        if self.gene_ids is not None:
            gene_ids = tuple(self.gene_ids)
            if len(gene_ids) != u.shape[1]:
                raise ShapeError(f"{len(gene_ids)} gene ids for {u.shape[1]} columns")
            object.__setattr__(self, "gene_ids", gene_ids)

    def column(self, gene_id: str) -> np.ndarray:
        if self.gene_ids is None:
            raise KeyError("residual matrix carries no gene ids")
        try:
            j = self.gene_ids.index(gene_id)
        except ValueError:
            raise KeyError(f"unknown gene id {gene_id!r}") from None
        return self.U[:, j]


@dataclass(frozen=True)
class NullMles:
    """Restricted MLEs (sigma1^2, sigma2^2, rho) of a residual pair under
    the constant-covariance null."""

    sigma1_sq: float
    sigma2_sq: float
    rho_hat: float

    def __post_init__(self):
        s1 = float(self.sigma1_sq)
        s2 = float(self.sigma2_sq)
        r = float(self.rho_hat)
        if s1 <= 0.0 or s2 <= 0.0:
            raise ZeroVariance("residual variance is zero")
        if r * r >= (1.0 - DEGENERACY_RTOL) * s1 * s2:
            raise DegenerateCorrelation(
                f"residuals are numerically perfectly correlated "
                f"(rho^2={r * r:.6g}, sigma1^2*sigma2^2={s1 * s2:.6g})"
            )
        object.__setattr__(self, "sigma1_sq", s1)
        object.__setattr__(self, "sigma2_sq", s2)
        object.__setattr__(self, "rho_hat", r)


@dataclass(frozen=True)
class PreparedCovariates:
    """Centered, orthonormalized variance covariates.

    ``Xc`` has zero-sum, pairwise-orthogonal, unit-sum-of-squares columns;
    ``transform`` is the P x P change of basis with
    ``Xc = (X - column means) @ transform``; ``w`` is the intercept weight
    that block-diagonalizes the information matrix.
    """

    Xc: np.ndarray
    w: float
    transform: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Xc", _as_matrix(self.Xc, "Xc"))
        object.__setattr__(self, "transform", _as_matrix(self.transform, "transform"))
        object.__setattr__(self, "w", float(self.w))


def _design_array(Z, kind) -> np.ndarray:
    if isinstance(Z, kind):
        return Z.Z if kind is MeanCovariates else Z.X
    return _as_matrix(Z, kind.__name__)


def _qr_basis(Z: np.ndarray, name: str = "Z") -> np.ndarray:
    """Orthonormal basis of col(Z), raising SingularDesign on rank defect."""
    q, r = np.linalg.qr(Z, mode="reduced")
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_RTOL * max(diag.max(), 1e-30):
        raise SingularDesign(f"{name} is rank deficient")
    return q


def ols_residuals(Y, Z) -> ResidualMatrix:
    """Project each gene column of ``Y`` off the column space of ``Z``.

    Returns U = (I - Z (Z^T Z)^{-1} Z^T) Y, computed through a QR basis for
    numerical stability. Columns of U are orthogonal to col(Z); with an
    intercept in Z they sum to zero.
    """
    y = Y.values if isinstance(Y, DataMatrix) else _as_matrix(Y, "Y")
    z = _design_array(Z, MeanCovariates)
    if y.shape[0] != z.shape[0]:
        raise ShapeError(
            f"Y has {y.shape[0]} rows but Z has {z.shape[0]}"
        )
    q = _qr_basis(z, "Z")
    u = y - q @ (q.T @ y)
    gene_ids = Y.gene_ids if isinstance(Y, DataMatrix) else None
    return ResidualMatrix(U=u, gene_ids=gene_ids)


def null_mles(u1: Sequence[float], u2: Sequence[float]) -> NullMles:
    """Restricted MLEs of a residual pair under the constant-covariance null.

    sigma_g^2 = sum(u_g^2)/N and rho = sum(u1*u2)/N; N is the sample count,
    not N minus the number of regressors.
    """
    a = _as_vector(u1, "u1")
    b = _as_vector(u2, "u2")
    if a.shape != b.shape:
        raise ShapeError(f"residual lengths differ: {a.size} vs {b.size}")
    n = a.size
    if n < 3:
        raise ValidationError(f"need at least 3 samples, got {n}")
    return NullMles(
        sigma1_sq=float(a @ a) / n,
        sigma2_sq=float(b @ b) / n,
        rho_hat=float(a @ b) / n,
    )


def orthonormalize(X) -> tuple:
    """Center the columns of X and orthonormalize them by Householder QR.

    The sign convention makes every diagonal of the triangular factor
    positive, so the result is deterministic. Returns ``(Xc, transform)``
    with ``Xc = (X - means) @ transform`` and ``Xc^T Xc = I``.
    """
    x = _design_array(X, VarianceCovariates)
    centered = x - x.mean(axis=0)
    q, r = np.linalg.qr(centered, mode="reduced")
    diag = np.diag(r)
    scale = np.abs(diag).max() if diag.size else 0.0
    if diag.size == 0 or np.abs(diag).min() <= RANK_RTOL * max(scale, 1e-30):
        raise SingularDesign("X is rank deficient after centering")
    signs = np.where(diag < 0, -1.0, 1.0)
    q = q * signs
    r = r * signs[:, None]
    transform = solve_triangular(r, np.eye(r.shape[0]))
    return q, transform


def intercept_weight(mles: NullMles, n_samples: int) -> float:
    """Weight replacing the intercept constant so the information matrix is
    block diagonal between the intercept and the centered covariates.

    Equals 1 when rho_hat = 0 and tends to 1 as N grows.
    """
    s12 = mles.sigma1_sq * mles.sigma2_sq
    r2 = mles.rho_hat * mles.rho_hat
    den = (s12 + r2) * (s12 - r2)
    num = den - 4.0 * s12 * r2 / float(n_samples)
    return num / den


def prepare_covariates(X, mles: NullMles, n_samples: int = None) -> PreparedCovariates:
    """Center/orthonormalize X and compute the intercept weight.

    Idempotent on its own output up to the positive-diagonal sign
    convention: re-preparing ``Xc`` returns it unchanged with an identity
    transform.
    """
    x = _design_array(X, VarianceCovariates)
    if n_samples is None:
        n_samples = x.shape[0]
    elif n_samples != x.shape[0]:
        raise ShapeError(f"n_samples={n_samples} but X has {x.shape[0]} rows")
    xc, transform = orthonormalize(x)
    return PreparedCovariates(Xc=xc, w=intercept_weight(mles, n_samples), transform=transform)
