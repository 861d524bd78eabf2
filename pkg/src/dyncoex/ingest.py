"""Tab-separated input parsing and sample alignment.

All readers accept UTF-8 text with LF or CRLF line endings, skip blank lines
and lines starting with '#', and report malformed cells with their 1-based
line and field positions. Decimal points only; scientific notation accepted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import DataMatrix, MeanCovariates, VarianceCovariates
from .errors import (
    AlignmentError,
    DuplicateGene,
    EmptyFile,
    MalformedInput,
    ValidationError,
)

__all__ = [
    "CovariateTable",
    "TfTargetMap",
    "AlignedDataset",
    "parse_expression",
    "parse_covariates",
    "parse_tf_targets",
    "align",
    "write_expression",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CovariateTable:
    """Per-sample numeric covariates keyed by sample id."""

    sample_ids: tuple
    names: tuple
    values: np.ndarray  # len(sample_ids) x len(names)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}") from None
        return self.values[:, j]


@dataclass(frozen=True)
class TfTargetMap:
    """TF -> ordered target list, with optional per-edge binding scores."""

    targets: dict
    scores: Optional[dict] = None
    self_edges_dropped: int = 0
    duplicates_dropped: int = 0

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class AlignedDataset:
    """Expression and covariates restricted to shared samples, in the
    lexicographically sorted sample order."""

    data: DataMatrix
    mean: MeanCovariates
    variance: VarianceCovariates
    sample_ids: tuple
    dropped_expression_samples: int = 0
    dropped_covariate_samples: int = 0


def _rows(path) -> list:
    """(line_number, fields) for each non-comment, non-blank line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            out.append((lineno, line.split("\t")))
    return out


def _parse_float(token: str, lineno: int, col: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedInput(f"not a number: {token!r}", lineno, col) from None
    if not math.isfinite(value):
        raise MalformedInput(f"non-finite value: {token!r}", lineno, col)
    return value


def parse_expression(path) -> DataMatrix:
    """Read a genes-by-samples expression file into a samples x genes matrix.

    Header row holds the sample ids (an optional leading label for the gene
    column is allowed); each body row is a gene id followed by one numeric
    value per sample.
    """
    rows = _rows(path)
    if len(rows) < 2:
        raise EmptyFile(f"{path} has no data rows")
    header_line, header = rows[0]
    body = rows[1:]
    width = len(body[0][1])
    if len(header) == width:
        sample_ids = tuple(header[1:])
    elif len(header) == width - 1:
        sample_ids = tuple(header)
    else:
        raise MalformedInput(
            f"header has {len(header)} fields but rows have {width}",
            header_line,
            1,
        )
    gene_ids = []
    seen = set()
    values = np.empty((len(body), len(sample_ids)))
    for i, (lineno, fields) in enumerate(body):
        if len(fields) != width:
            raise MalformedInput(
                f"expected {width} fields, found {len(fields)}", lineno, len(fields)
            )
        gene = fields[0]
        if gene in seen:
            raise DuplicateGene(f"gene id {gene!r} appears more than once")
        seen.add(gene)
        gene_ids.append(gene)
        for j, token in enumerate(fields[1:], start=2):
            values[i, j - 2] = _parse_float(token, lineno, j)
    return DataMatrix(
        values=values.T, gene_ids=tuple(gene_ids), sample_ids=sample_ids
    )


def write_expression(path, data: DataMatrix) -> None:
    """Write a DataMatrix in the genes-by-samples layout parse_expression
    reads; float values round-trip bit-identically."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_id\t" + "\t".join(data.sample_ids) + "\n")
        for j, gene in enumerate(data.gene_ids):
            cells = "\t".join(repr(v) for v in data.values[:, j])
            fh.write(f"{gene}\t{cells}\n")


def parse_covariates(path) -> CovariateTable:
    """Read a samples-by-covariates file: header is the id column name plus
    covariate names; each row is a sample id followed by numeric values."""
    rows = _rows(path)
    if len(rows) < 2:
        raise EmptyFile(f"{path} has no data rows")
    header_line, header = rows[0]
    if len(header) < 2:
        raise MalformedInput("need an id column and at least one covariate", header_line, 1)
    names = tuple(header[1:])
    body = rows[1:]
    sample_ids = []
    seen = set()
    values = np.empty((len(body), len(names)))
    for i, (lineno, fields) in enumerate(body):
        if len(fields) != len(header):
            raise MalformedInput(
                f"expected {len(header)} fields, found {len(fields)}", lineno, len(fields)
            )
        sid = fields[0]
        if sid in seen:
            raise ValidationError(f"sample id {sid!r} appears more than once in {path}")
        seen.add(sid)
        sample_ids.append(sid)
        for j, token in enumerate(fields[1:], start=2):
            values[i, j - 2] = _parse_float(token, lineno, j)
    return CovariateTable(sample_ids=tuple(sample_ids), names=names, values=values)


def parse_tf_targets(path, score_filter: Union[str, float] = "max") -> TfTargetMap:
    """Read a TF -> target edge list with optional binding scores.

    Self-edges are dropped with a warning; duplicate targets keep their
    first occurrence. score_filter is "max" (keep only each TF's top score
    tier, the default), "all", or a numeric threshold (keep score >=
    threshold). Unscored edges survive only under "all", or under "max"
    for TFs with no scored edges at all.
    """
    if isinstance(score_filter, str) and score_filter not in ("max", "all"):
        raise ValidationError(f"score_filter must be 'max', 'all', or a number, got {score_filter!r}")
    rows = _rows(path)
    if not rows:
        raise EmptyFile(f"{path} has no data rows")
    edges = {}
    scores = {}
    self_edges = 0
    duplicates = 0
    any_scores = False
    for lineno, fields in rows:
        if len(fields) not in (2, 3):
            raise MalformedInput(
                f"expected 2 or 3 fields, found {len(fields)}", lineno, len(fields)
            )
        tf, target = fields[0], fields[1]
        if tf == target:
            self_edges += 1
            logger.warning("dropping self-edge %s -> %s (line %d)", tf, target, lineno)
            continue
        score = None
        if len(fields) == 3 and fields[2] != "":
            score = _parse_float(fields[2], lineno, 3)
            any_scores = True
        bucket = edges.setdefault(tf, [])
        if target in bucket:
            duplicates += 1
            continue
        bucket.append(target)
        scores[(tf, target)] = score

    def keep(tf, target) -> bool:
        score = scores[(tf, target)]
        if score_filter == "all":
            return True
        if isinstance(score_filter, str):  # "max"
            scored = [scores[(tf, t)] for t in edges[tf] if scores[(tf, t)] is not None]
            if not scored:
                return True
            return score is not None and score == max(scored)
        return score is not None and score >= float(score_filter)

    targets = {}
    for tf, bucket in edges.items():
        kept = tuple(t for t in bucket if keep(tf, t))
        if kept:
            targets[tf] = kept
    return TfTargetMap(
        targets=targets,
        scores=scores if any_scores else None,
        self_edges_dropped=self_edges,
        duplicates_dropped=duplicates,
    )


def align(
    expression: DataMatrix,
    covariates: CovariateTable,
    x_cols: Sequence[str],
    z_cols: Sequence[str] = (),
) -> AlignedDataset:
    """Restrict expression and covariates to shared samples.

    The canonical sample order is the lexicographically sorted intersection,
    so the result does not depend on input row order. Z is the selected
    z_cols plus an intercept column; X is the selected x_cols.
    """
    x_cols = list(x_cols)
    z_cols = list(z_cols)
    if not x_cols:
        raise ValidationError("at least one variance covariate column is required")
    expr_ids = set(expression.sample_ids)
    covar_ids = set(covariates.sample_ids)
    shared = sorted(expr_ids & covar_ids)
    if not shared:
        raise AlignmentError("expression and covariate files share no sample ids")
    dropped_expr = len(expr_ids - covar_ids)
    dropped_covar = len(covar_ids - expr_ids)
    if dropped_expr:
        logger.warning("dropping %d expression samples without covariates", dropped_expr)
    if dropped_covar:
        logger.warning("dropping %d covariate samples without expression", dropped_covar)

    expr_index = {sid: i for i, sid in enumerate(expression.sample_ids)}
    covar_index = {sid: i for i, sid in enumerate(covariates.sample_ids)}
    expr_rows = [expr_index[sid] for sid in shared]
    covar_rows = [covar_index[sid] for sid in shared]

    data = DataMatrix(
        values=expression.values[expr_rows, :],
        gene_ids=expression.gene_ids,
        sample_ids=tuple(shared),
    )
    x = np.column_stack([covariates.column(c)[covar_rows] for c in x_cols])
    n = len(shared)
    if z_cols:
        z = np.column_stack(
            [np.ones(n)] + [covariates.column(c)[covar_rows] for c in z_cols]
        )
    else:
        z = np.ones((n, 1))
    return AlignedDataset(
        data=data,
        mean=MeanCovariates(Z=z),
        variance=VarianceCovariates(X=x),
        sample_ids=tuple(shared),
        dropped_expression_samples=dropped_expr,
        dropped_covariate_samples=dropped_covar,
    )
