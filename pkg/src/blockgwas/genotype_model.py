"""In-memory genotype, phenotype and covariate containers.

Genotypes are stored as an ``n x P`` float array holding 0/1/2 minor-allele
counts with ``NaN`` marking missing calls. Two text layouts are supported:

* ``tsv``: first line tab-separated SNP ids, second line ``chrom:pos`` per SNP,
  then one individual per line with tokens in ``{0, 1, 2, NA}``.
* ``plink_raw``: the additive recode written by ``plink --recode A``
  (``FID IID PAT MAT SEX PHENOTYPE snp1 ...``).
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"NA", "na", "NaN", "nan", "."})
PLINK_RAW_FIXED = ("FID", "IID", "PAT", "MAT", "SEX", "PHENOTYPE")


class GenotypeFormatError(ValueError):
    """Raised when a genotype or phenotype file cannot be parsed."""


class EmptyMatrixError(ValueError):
    """Raised when filtering leaves no SNP columns."""


@dataclass(frozen=True)
class SnpMeta:
    id: str
    chromosome: str
    position: int
    index: int


@dataclass(frozen=True)
class GenotypeMatrix:
    """``n x P`` genotype matrix with per-SNP genomic metadata.

    Parameters
    ----------
    values : ndarray of shape (n, P)
        Minor-allele counts in ``{0, 1, 2}``; ``NaN`` for missing calls.
    snps : sequence of SnpMeta
        One record per column, in genomic order.
    """

    values: np.ndarray
    snps: tuple[SnpMeta, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"genotype values must be 2-D, got shape {values.shape}")
        snps = tuple(self.snps)
        if values.shape[1] != len(snps):
            raise ValueError(
                f"{values.shape[1]} genotype columns but {len(snps)} SNP records"
            )
        observed = values[~np.isnan(values)]
        if observed.size and not np.isin(observed, (0.0, 1.0, 2.0)).all():
            raise ValueError("genotype entries must be 0, 1, 2 or missing")
        _check_snp_order(snps)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "snps", snps)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.snps]

    @property
    def chromosomes(self) -> list[str]:
        return [s.chromosome for s in self.snps]

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.snps], dtype=np.int64)

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())

    def chromosome_barriers(self) -> list[int]:
        """Column indices where a new chromosome starts (excluding 0)."""
        chroms = self.chromosomes
        return [j for j in range(1, len(chroms)) if chroms[j] != chroms[j - 1]]

    def take_columns(self, cols: Sequence[int]) -> "GenotypeMatrix":
        cols = np.asarray(cols, dtype=int)
        snps = [
            SnpMeta(self.snps[c].id, self.snps[c].chromosome, self.snps[c].position, k)
            for k, c in enumerate(cols)
        ]
        return GenotypeMatrix(self.values[:, cols], tuple(snps))

    def take_rows(self, rows: Sequence[int]) -> "GenotypeMatrix":
        return GenotypeMatrix(self.values[np.asarray(rows, dtype=int)], self.snps)

    @classmethod
    def from_array(
        cls,
        values,
        ids: Sequence[str] | None = None,
        chromosomes: Sequence[str] | None = None,
        positions: Sequence[int] | None = None,
    ) -> "GenotypeMatrix":
        """Build a matrix with default metadata (chromosome ``1``, positions 1..P)."""
        values = np.asarray(values, dtype=float)
        p = values.shape[1]
        ids = list(ids) if ids is not None else [f"snp{j}" for j in range(p)]
        chromosomes = list(chromosomes) if chromosomes is not None else ["1"] * p
        positions = list(positions) if positions is not None else list(range(1, p + 1))
        snps = tuple(
            SnpMeta(ids[j], str(chromosomes[j]), int(positions[j]), j) for j in range(p)
        )
        return cls(values, snps)


@dataclass(frozen=True)
class CovariateMatrix:
    """``n x C`` real covariates; columns are centered on construction."""

    values: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        labels = tuple(self.labels) or tuple(f"cov{k + 1}" for k in range(values.shape[1]))
        if len(labels) != values.shape[1]:
            raise ValueError(f"{values.shape[1]} covariate columns but {len(labels)} labels")
        values = values - values.mean(axis=0) if values.shape[0] else values
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def c(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, n: int) -> "CovariateMatrix":
        return cls(np.zeros((n, 0)), ())


def covariate_array(cov, n: int) -> np.ndarray:
    """Coerce ``None``, a CovariateMatrix or an array to an ``n x C`` array."""
    if cov is None:
        return np.zeros((n, 0))
    arr = cov.values if isinstance(cov, CovariateMatrix) else np.asarray(cov, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != n:
        raise ValueError(f"covariates have {arr.shape[0]} rows, expected {n}")
    return arr


def as_phenotype(y, n: int | None = None, require_both: bool = False) -> np.ndarray:
    """Validate a case-control vector and return it as an int8 array of 0/1."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError("phenotype must be one-dimensional")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("phenotype entries must be 0 or 1")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"phenotype has {arr.shape[0]} entries, expected {n}")
    arr = arr.astype(np.int8)
    if require_both and (arr.min(initial=1) == arr.max(initial=0)):
        raise ValueError("phenotype must contain both cases and controls")
    return arr


def _check_snp_order(snps: Sequence[SnpMeta]) -> None:
    seen_ids: set[str] = set()
    finished: set[str] = set()
    prev: SnpMeta | None = None
    for s in snps:
        if s.id in seen_ids:
            raise GenotypeFormatError(f"duplicate SNP id {s.id!r}")
        seen_ids.add(s.id)
        if s.position < 0:
            raise GenotypeFormatError(f"negative position for SNP {s.id!r}")
        if prev is not None and s.chromosome != prev.chromosome:
            finished.add(prev.chromosome)
            if s.chromosome in finished:
                raise GenotypeFormatError(
                    f"chromosome {s.chromosome!r} is not contiguous (SNP {s.id!r})"
                )
        elif prev is not None and s.position <= prev.position:
            raise GenotypeFormatError(
                f"positions not increasing on chromosome {s.chromosome}: "
                f"{prev.id}@{prev.position} then {s.id}@{s.position}"
            )
        prev = s


def _parse_token(tok: str, row: int, col: int) -> float:
    if tok in MISSING_TOKENS:
        return np.nan
    if tok in ("0", "1", "2"):
        return float(tok)
    raise GenotypeFormatError(f"invalid genotype token {tok!r} at row {row}, column {col}")


def _text_stream(source) -> IO[str]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode())
    if isinstance(source, io.TextIOBase):
        return source
    if hasattr(source, "read"):
        return io.TextIOWrapper(source, encoding="utf-8")
    raise TypeError("source must be bytes or a file object")


def load_genotypes(source, format: str = "tsv") -> GenotypeMatrix:
    """Parse genotypes from bytes or an open (binary or text) stream.

    Row/column numbers in error messages are 1-based over individuals and SNPs.
    """
    stream = _text_stream(source)
    lines = [ln.rstrip("\r\n") for ln in stream if ln.strip()]
    if format == "tsv":
        return _parse_tsv(lines)
    if format == "plink_raw":
        return _parse_plink_raw(lines)[0]
    raise ValueError(f"unknown genotype format {format!r}")


def load_plink_raw(source) -> tuple[GenotypeMatrix, np.ndarray | None]:
    """Parse a PLINK ``.raw`` file, also returning the phenotype if fully coded 1/2."""
    return _parse_plink_raw([ln.rstrip("\r\n") for ln in _text_stream(source) if ln.strip()])


def _parse_tsv(lines: list[str]) -> GenotypeMatrix:
    if len(lines) < 2:
        raise GenotypeFormatError("TSV genotype file needs an id line and a chrom:pos line")
    ids = lines[0].split("\t")
    locs = lines[1].split("\t")
    if len(locs) != len(ids):
        raise GenotypeFormatError(
            f"line 2 has {len(locs)} chrom:pos fields, expected {len(ids)}"
        )
    chroms, positions = [], []
    for col, loc in enumerate(locs, start=1):
        chrom, sep, pos = loc.rpartition(":")
        if not sep or not pos.isdigit():
            raise GenotypeFormatError(f"bad chrom:pos field {loc!r} in column {col}")
        chroms.append(chrom)
        positions.append(int(pos))
    rows = []
    for r, line in enumerate(lines[2:], start=1):
        toks = line.split("\t")
        if len(toks) != len(ids):
            raise GenotypeFormatError(
                f"row {r} has {len(toks)} fields, expected {len(ids)}"
            )
        rows.append([_parse_token(t, r, c) for c, t in enumerate(toks, start=1)])
    values = np.array(rows, dtype=float).reshape(len(rows), len(ids))
    return GenotypeMatrix.from_array(values, ids, chroms, positions)


def _parse_plink_raw(lines: list[str]) -> tuple[GenotypeMatrix, np.ndarray | None]:
    if not lines:
        raise GenotypeFormatError("empty PLINK .raw file")
    header = lines[0].split()
    if tuple(header[:6]) != PLINK_RAW_FIXED:
        raise GenotypeFormatError(f"PLINK .raw header must start with {' '.join(PLINK_RAW_FIXED)}")
    ids = header[6:]
    rows, pheno = [], []
    for r, line in enumerate(lines[1:], start=1):
        toks = line.split()
        if len(toks) != len(header):
            raise GenotypeFormatError(
                f"row {r} has {len(toks)} fields, expected {len(header)}"
            )
        pheno.append(toks[5])
        rows.append([_parse_token(t, r, c) for c, t in enumerate(toks[6:], start=1)])
    values = np.array(rows, dtype=float).reshape(len(rows), len(ids))
    # .raw carries no map information: file order stands in for position.
    gm = GenotypeMatrix.from_array(values, ids)
    y = None
    if pheno and all(p in ("1", "2") for p in pheno):
        y = np.array([int(p) - 1 for p in pheno], dtype=np.int8)
    return gm, y


def write_genotypes(gm: GenotypeMatrix, stream: IO[str]) -> None:
    """Serialize in the ``tsv`` layout accepted by :func:`load_genotypes`."""
    stream.write("\t".join(gm.ids) + "\n")
    stream.write("\t".join(f"{s.chromosome}:{s.position}" for s in gm.snps) + "\n")
    for row in gm.values:
        stream.write("\t".join("NA" if np.isnan(v) else str(int(v)) for v in row) + "\n")


def load_phenotype(source, n: int | None = None) -> np.ndarray:
    stream = _text_stream(source)
    toks = [ln.strip() for ln in stream if ln.strip()]
    bad = [t for t in toks if t not in ("0", "1")]
    if bad:
        raise GenotypeFormatError(f"phenotype tokens must be 0 or 1, found {bad[0]!r}")
    return as_phenotype(np.array([int(t) for t in toks]), n=n)


def write_phenotype(y, stream: IO[str]) -> None:
    for v in np.asarray(y):
        stream.write(f"{int(v)}\n")


def load_covariates(source, n: int | None = None) -> CovariateMatrix:
    """Tab-separated covariates with a single header line of labels."""
    stream = _text_stream(source)
    lines = [ln.rstrip("\r\n") for ln in stream if ln.strip()]
    if not lines:
        raise GenotypeFormatError("empty covariate file")
    labels = lines[0].split("\t")
    try:
        values = np.array([[float(t) for t in ln.split("\t")] for ln in lines[1:]])
    except ValueError as exc:
        raise GenotypeFormatError(f"non-numeric covariate value: {exc}") from None
    values = values.reshape(len(lines) - 1, len(labels))
    if n is not None and values.shape[0] != n:
        raise GenotypeFormatError(f"covariate file has {values.shape[0]} rows, expected {n}")
    return CovariateMatrix(values, tuple(labels))


def write_covariates(cov: CovariateMatrix, stream: IO[str]) -> None:
    stream.write("\t".join(cov.labels) + "\n")
    for row in cov.values:
        stream.write("\t".join(repr(float(v)) for v in row) + "\n")


def modal_genotypes(values: np.ndarray) -> np.ndarray:
    """Most frequent observed genotype per column; ties go to the smaller value."""
    counts = np.stack([(values == g).sum(axis=0) for g in (0.0, 1.0, 2.0)])
    if (counts.sum(axis=0) == 0).any():
        bad = int(np.flatnonzero(counts.sum(axis=0) == 0)[0])
        raise ValueError(f"column {bad} has no observed genotype")
    # argmax returns the first maximum, i.e. the smallest genotype on ties
    return counts.argmax(axis=0).astype(float)


def impute_most_frequent(gm: GenotypeMatrix) -> GenotypeMatrix:
    values = np.array(gm.values)
    missing = np.isnan(values)
    if not missing.any():
        return gm
    modes = modal_genotypes(values)
    values[missing] = np.broadcast_to(modes, values.shape)[missing]
    return GenotypeMatrix(values, gm.snps)


def drop_monomorphic(gm: GenotypeMatrix) -> tuple[GenotypeMatrix, list[str]]:
    """Remove columns with zero variance once missing calls take the modal value."""
    filled = impute_most_frequent(gm).values if gm.p else gm.values
    keep = filled.var(axis=0) > 0 if gm.n > 1 else np.zeros(gm.p, dtype=bool)
    dropped = [s.id for s, k in zip(gm.snps, keep) if not k]
    if not keep.any():
        raise EmptyMatrixError("every SNP column is monomorphic")
    if dropped:
        logger.info("dropped %d monomorphic SNPs", len(dropped))
    return gm.take_columns(np.flatnonzero(keep)), dropped


def pca_covariates(gm: GenotypeMatrix, k: int = 5) -> CovariateMatrix:
    """Top-``k`` principal component scores of the column-standardized genotypes.

    Each component's sign is fixed so that its largest-magnitude loading is
    positive.
    """
    if gm.has_missing:
        raise ValueError("PCA needs a complete genotype matrix; impute first")
    n, p = gm.values.shape
    if k < 0 or k > min(n - 1, p):
        raise ValueError(f"k={k} outside [0, min(n-1, P)] = [0, {min(n - 1, p)}]")
    if k == 0:
        return CovariateMatrix.empty(n)
    sd = gm.values.std(axis=0, ddof=1)
    if (sd == 0).any():
        raise ValueError(
            f"zero-variance SNP column {int(np.flatnonzero(sd == 0)[0])}; run drop_monomorphic first"
        )
    z = (gm.values - gm.values.mean(axis=0)) / sd
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    u, s, vt = u[:, :k], s[:k], vt[:k]
    flip = np.sign(vt[np.arange(k), np.abs(vt).argmax(axis=1)])
    scores = u * (s * flip)
    return CovariateMatrix(scores, tuple(f"PC{i + 1}" for i in range(k)))


def concat_covariates(parts: Iterable[CovariateMatrix]) -> CovariateMatrix:
    parts = list(parts)
    return CovariateMatrix(
        np.hstack([p.values for p in parts]), tuple(l for p in parts for l in p.labels)
    )
