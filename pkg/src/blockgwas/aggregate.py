"""Collapse contiguous SNP clusters into aggregated-SNP variables.

Each cluster becomes the per-individual count of minor alleles it carries,
then columns are centered and scaled to unit sample variance so clusters of
different sizes are comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import IO

import numpy as np

from .constrained_hac import ClusterAssignment
from .genotype_model import GenotypeMatrix


@dataclass(frozen=True)
class AggregatedMatrix:
    values: np.ndarray
    spans: tuple[tuple[int, int], ...]
    degenerate: np.ndarray  # True for columns that were constant before scaling
    standardized: bool = False

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def g(self) -> int:
        return self.values.shape[1]

    @property
    def labels(self) -> list[str]:
        return [f"cluster_{k}:{a}-{b}" for k, (a, b) in enumerate(self.spans)]

    def take_rows(self, rows) -> "AggregatedMatrix":
        return replace(self, values=self.values[np.asarray(rows, dtype=int)])

    def write_tsv(self, stream: IO[str]) -> None:
        stream.write("\t".join(self.labels) + "\n")
        for row in self.values:
            stream.write("\t".join(repr(float(v)) for v in row) + "\n")


def aggregate_raw(gm: GenotypeMatrix | np.ndarray, assignment: ClusterAssignment) -> AggregatedMatrix:
    """Per-individual sum of genotypes over each cluster (unscaled)."""
    values = gm.values if isinstance(gm, GenotypeMatrix) else np.asarray(gm, dtype=float)
    if values.shape[1] != assignment.labels.size:
        raise ValueError(
            f"assignment covers {assignment.labels.size} SNPs, matrix has {values.shape[1]}"
        )
    if np.isnan(values).any():
        raise ValueError("aggregation needs a complete genotype matrix; impute first")
    spans = tuple(assignment.spans())
    starts = np.array([a for a, _ in spans], dtype=int)
    if values.shape[0] == 0:
        summed = np.zeros((0, len(spans)))
    else:
        summed = np.add.reduceat(values, starts, axis=1)
    degenerate = np.all(summed == summed[:1], axis=0) if summed.shape[0] else np.ones(len(spans), bool)
    return AggregatedMatrix(summed, spans, degenerate, False)


def column_moments(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and sample standard deviations (``ddof=1``)."""
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(values.shape[1])
    return mean, sd


def standardize(
    agg: AggregatedMatrix, mean: np.ndarray | None = None, sd: np.ndarray | None = None
) -> AggregatedMatrix:
    """Center each column and divide by its sample standard deviation.

    Constant columns become all-zero and are flagged degenerate. Passing
    ``mean``/``sd`` applies another sample's moments (e.g. training rows to
    test rows) instead of this matrix's own.
    """
    if mean is None or sd is None:
        mean, sd = column_moments(agg.values)
    degenerate = ~(sd > 0)
    scale = np.where(degenerate, 1.0, sd)
    values = (agg.values - mean) / scale
    values[:, degenerate] = 0.0
    return AggregatedMatrix(values, agg.spans, degenerate, True)


def aggregate(gm: GenotypeMatrix | np.ndarray, assignment: ClusterAssignment) -> AggregatedMatrix:
    return standardize(aggregate_raw(gm, assignment))
