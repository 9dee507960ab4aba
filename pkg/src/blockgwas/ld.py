"""Genotypic linkage disequilibrium and the banded ``1 - r^2`` dissimilarity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO

import numpy as np

from .genotype_model import GenotypeMatrix

DEFAULT_BANDWIDTH = 500


class ConstantColumnError(ValueError):
    """r^2 is undefined for a SNP column with zero variance."""

    def __init__(self, index: int):
        super().__init__(f"SNP column {index} is constant; r^2 undefined")
        self.index = index


@dataclass(frozen=True)
class LdDissimilarity:
    """Banded LD dissimilarity ``d(j, j+k) = 1 - r^2`` for ``1 <= k <= bandwidth``.

    ``band[j, k - 1]`` holds ``d(j, j + k)``; slots running past the last SNP
    are ``NaN``. Pairs outside the band are treated as maximally dissimilar.
    """

    band: np.ndarray
    bandwidth: int

    @property
    def p(self) -> int:
        return self.band.shape[0]

    def get(self, j: int, j2: int) -> float:
        if j == j2:
            return 0.0
        lo, hi = min(j, j2), max(j, j2)
        if hi - lo > self.bandwidth:
            return 1.0
        return float(self.band[lo, hi - lo - 1])

    def to_dense(self) -> np.ndarray:
        p, h = self.p, self.bandwidth
        dense = np.ones((p, p))
        np.fill_diagonal(dense, 0.0)
        for k in range(1, min(h, p - 1) + 1):
            idx = np.arange(p - k)
            dense[idx, idx + k] = dense[idx + k, idx] = self.band[: p - k, k - 1]
        return dense

    @classmethod
    def from_dense(cls, d, bandwidth: int | None = None) -> "LdDissimilarity":
        """Band a symmetric dissimilarity matrix (default: keep every pair)."""
        d = np.asarray(d, dtype=float)
        p = d.shape[0]
        h = max(p - 1, 1) if bandwidth is None else int(bandwidth)
        if h < 1:
            raise ValueError("bandwidth must be >= 1")
        band = np.full((p, h), np.nan)
        for k in range(1, min(h, p - 1) + 1):
            idx = np.arange(p - k)
            band[: p - k, k - 1] = d[idx, idx + k]
        return cls(band, h)

    def write_tsv(self, stream: IO[str]) -> None:
        stream.write("j\tj2\td\n")
        for j in range(self.p):
            for k in range(1, min(self.bandwidth, self.p - 1 - j) + 1):
                stream.write(f"{j}\t{j + k}\t{self.band[j, k - 1]!r}\n")


def _standardized(values: np.ndarray, allow_constant: bool = False) -> np.ndarray:
    centered = values - values.mean(axis=0)
    sd = np.sqrt((centered**2).mean(axis=0))
    const = sd == 0
    if const.any() and not allow_constant:
        raise ConstantColumnError(int(np.flatnonzero(const)[0]))
    sd[const] = 1.0
    return centered / sd


def r_squared(gm: GenotypeMatrix, j: int, j2: int) -> float:
    """Squared Pearson correlation of two complete genotype columns."""
    cols = gm.values[:, [j, j2]]
    if np.isnan(cols).any():
        raise ValueError("r_squared needs complete columns; impute first")
    for idx, col in zip((j, j2), cols.T):
        if np.all(col == col[0]):
            raise ConstantColumnError(idx)
    z = _standardized(cols)
    r = float(np.mean(z[:, 0] * z[:, 1]))
    return min(max(r * r, 0.0), 1.0)


def ld_band(
    gm: GenotypeMatrix | np.ndarray,
    h: int = DEFAULT_BANDWIDTH,
    barriers=None,
    allow_constant: bool = False,
    chunk: int = 512,
) -> LdDissimilarity:
    """Compute ``1 - r^2`` for all SNP pairs at most ``h`` columns apart.

    Pairs that straddle a chromosome boundary get ``d = 1``. With
    ``allow_constant`` a zero-variance column is given ``r^2 = 0`` against
    every other column instead of raising.
    """
    if h < 1:
        raise ValueError("bandwidth must be >= 1")
    if isinstance(gm, GenotypeMatrix):
        values = gm.values
        if barriers is None:
            barriers = gm.chromosome_barriers()
    else:
        values = np.asarray(gm, dtype=float)
    if np.isnan(values).any():
        raise ValueError("ld_band needs a complete genotype matrix; impute first")
    n, p = values.shape
    z = _standardized(values, allow_constant=allow_constant)
    band = np.full((p, h), np.nan)
    offsets = np.arange(1, h + 1)
    for start in range(0, p, chunk):
        stop = min(start + chunk, p)
        wstop = min(stop + h, p)
        corr = z[:, start:stop].T @ z[:, start:wstop] / n
        rows = np.arange(stop - start)
        cols = rows[:, None] + offsets[None, :]
        valid = cols < (wstop - start)
        r = np.where(valid, corr[rows[:, None], np.minimum(cols, wstop - start - 1)], np.nan)
        band[start:stop] = 1.0 - np.clip(r * r, 0.0, 1.0)
    if barriers:
        chrom = np.zeros(p, dtype=int)
        chrom[np.asarray(barriers, dtype=int)] = 1
        chrom = np.cumsum(chrom)
        j = np.arange(p)[:, None]
        partner = np.minimum(j + offsets[None, :], p - 1)
        cross = (chrom[partner] != chrom[j]) & (j + offsets[None, :] < p)
        band[cross] = 1.0
    return LdDissimilarity(band, int(h))
