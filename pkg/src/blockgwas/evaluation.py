"""Score association results against simulation ground truth.

Results are matched to the truth through genomic coordinates: every result
record covers the mapped (chip) SNPs lying on its chromosome between
``pos_first`` and ``pos_last``. A causal SNP missing from the chip is credited
through its nearest mapped SNP.

Counting rules
--------------
snp_level
    Units are the individual SNPs covered by the results; a SNP is declared
    significant when the record covering it is. Causal SNPs are the causal SNPs
    themselves (``singleSNP``) or every mapped SNP inside a causal cluster
    (``clusSNP``).
cluster_level (SASA only)
    Units are the tested clusters; a cluster is causal when it contains at
    least one causal SNP, which for ``clusSNP`` means it shares a SNP with a
    causal cluster.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .association import AssociationResult
from .simulate import GroundTruth, nearest_mapped_snp

METHODS = ("sma", "sasa")
UNITS = ("snp_level", "cluster_level")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    unit: str

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Region:
    """Minimal view of a result record: where it sits and whether it was called."""

    chrom: str
    pos_first: int
    pos_last: int
    significant: bool
    tested: bool = True


def recall(c: ConfusionCounts) -> float | None:
    denom = c.tp + c.fn
    return c.tp / denom if denom else None


def precision(c: ConfusionCounts) -> float | None:
    denom = c.tp + c.fp
    return c.tp / denom if denom else None


def causal_snp_set(truth: GroundTruth) -> set[int]:
    """Mapped full-matrix SNP indices that count as causal."""
    mask = np.asarray(truth.mapped_mask, dtype=bool)
    mapped = np.flatnonzero(mask)
    out: set[int] = set()
    if truth.scenario == "singleSNP":
        for j in truth.causal_snps:
            if mask[j]:
                out.add(j)
            elif j in truth.nearest_mapped:
                out.add(truth.nearest_mapped[j])
            else:
                out.add(nearest_mapped_snp(j, mapped, truth.positions, truth.chromosomes))
    else:
        for a, b in truth.causal_spans:
            inside = [j for j in range(a, b + 1) if mask[j]]
            if not inside:
                inside = [nearest_mapped_snp(a, mapped, truth.positions, truth.chromosomes)]
            out.update(inside)
    return out


def _covered(regions: Sequence[Region], truth: GroundTruth) -> list[np.ndarray]:
    mask = np.asarray(truth.mapped_mask, dtype=bool)
    pos = np.asarray(truth.positions)
    by_chrom: dict[str, np.ndarray] = defaultdict(lambda: np.zeros(0, dtype=int))
    chroms = np.asarray(truth.chromosomes)
    for c in set(truth.chromosomes):
        by_chrom[c] = np.flatnonzero(mask & (chroms == c))
    out = []
    for r in regions:
        idx = by_chrom[str(r.chrom)]
        p = pos[idx]
        out.append(idx[np.searchsorted(p, r.pos_first, "left"):np.searchsorted(p, r.pos_last, "right")])
    return out


def _regions(res) -> list[Region]:
    if isinstance(res, AssociationResult):
        regions = [Region(r.chrom, r.pos_first, r.pos_last, r.significant, r.tested) for r in res.records]
    else:
        regions = list(res)
    # untested (constant or degenerate) variables are not units
    return [r for r in regions if r.tested]


def match_results(res, truth: GroundTruth, method: str, unit: str) -> ConfusionCounts:
    """Confusion counts for SMA or SASA output at SNP or cluster resolution.

    ``res`` is an :class:`AssociationResult` or a sequence of :class:`Region`.
    """
    if method not in METHODS or unit not in UNITS:
        raise ValueError(f"unknown method/unit {method!r}/{unit!r}")
    if method == "sma" and unit == "cluster_level":
        raise ValueError("cluster-level scoring is undefined for single-marker results")
    regions = _regions(res)
    covered = _covered(regions, truth)
    causal = causal_snp_set(truth)
    if unit == "cluster_level":
        is_causal = np.array([bool(causal.intersection(c.tolist())) for c in covered], dtype=bool)
        sig = np.array([r.significant for r in regions], dtype=bool)
    else:
        snp_sig: dict[int, bool] = {}
        for r, c in zip(regions, covered):
            for j in c.tolist():
                snp_sig[j] = snp_sig.get(j, False) or r.significant
        units = sorted(snp_sig)
        is_causal = np.array([j in causal for j in units], dtype=bool)
        sig = np.array([snp_sig[j] for j in units], dtype=bool)
    tp = int(np.sum(sig & is_causal))
    fp = int(np.sum(sig & ~is_causal))
    fn = int(np.sum(~sig & is_causal))
    tn = int(np.sum(~sig & ~is_causal))
    return ConfusionCounts(tp, fp, tn, fn, unit)


def mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(counts: Sequence[ConfusionCounts]) -> tuple[float | None, float | None]:
    """Replicate-averaged recall and precision, skipping undefined values."""
    return mean_defined(recall(c) for c in counts), mean_defined(precision(c) for c in counts)


def read_results_tsv(stream: IO[str]) -> list[Region]:
    lines = [ln.rstrip("\n") for ln in stream if ln.strip()]
    header = lines[0].split("\t")
    col = {name: k for k, name in enumerate(header)}
    for need in ("chrom", "pos_first", "pos_last", "p", "significant"):
        if need not in col:
            raise ValueError(f"results TSV lacks column {need!r}")
    out = []
    for line in lines[1:]:
        f = line.split("\t")
        out.append(Region(f[col["chrom"]], int(f[col["pos_first"]]), int(f[col["pos_last"]]),
                          f[col["significant"]] == "1", f[col["p"]] != "NA"))
    return out


SCORES_HEADER = ("scenario", "ell", "method", "unit", "recall", "precision", "n_replicates")


def write_scores_tsv(rows: Iterable[tuple], stream: IO[str]) -> None:
    def fmt(v):
        if v is None:
            return "NA"
        return repr(float(v)) if isinstance(v, float) else str(v)

    stream.write("\t".join(SCORES_HEADER) + "\n")
    for row in rows:
        stream.write("\t".join(fmt(v) for v in row) + "\n")
