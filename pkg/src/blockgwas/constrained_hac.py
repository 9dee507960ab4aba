"""Adjacency-constrained Ward clustering of SNPs and dendrogram cutting.

Only clusters that are neighbours in genomic order may merge, so every
cluster is a contiguous run of SNPs and the candidate set at any step is the
list of adjacent cluster pairs.

Ward costs are evaluated from similarity sums rather than by carrying a full
cluster-by-cluster Lance-Williams matrix. With ``s = 1 - d`` (``s(j, j) = 1``,
``s = 0`` beyond the band) the Lance-Williams Ward recursion started from
``d`` is identically

    delta(A, B) = |A||B| / (|A| + |B|)
                  * (S_AA / |A|^2 + S_BB / |B|^2 - 2 S_AB / (|A||B|))

where ``S_XY`` sums ``s`` over ``X x Y``. For adjacent contiguous ``A`` and
``B``, ``S_AB`` only involves pairs inside the band and is read off
per-diagonal prefix sums in ``O(bandwidth)``; ``S_AA`` is carried along the
merges. A merge therefore touches only its two neighbouring candidate pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .ld import LdDissimilarity

# Relative tolerance under which two Ward costs count as tied.
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int
    # first SNP index of the right-hand cluster: the boundary removed by this merge
    split: int


@dataclass(frozen=True)
class Dendrogram:
    """Ordered merges of a constrained clustering.

    Leaves are ``0..p-1``; the cluster created at step ``t`` gets id ``p + t``.
    With chromosome barriers the result is a forest of ``n_trees`` trees and
    holds ``p - n_trees`` merges.
    """

    p: int
    merges: tuple[Merge, ...]
    barriers: tuple[int, ...] = ()

    @property
    def n_trees(self) -> int:
        return self.p - len(self.merges)

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])

    def write_tsv(self, stream: IO[str]) -> None:
        stream.write("step\tleft\tright\theight\tsize\n")
        for t, m in enumerate(self.merges):
            stream.write(f"{t}\t{m.left}\t{m.right}\t{m.height!r}\t{m.size}\n")

    @classmethod
    def read_tsv(cls, stream: IO[str], p: int, barriers: Sequence[int] = ()) -> "Dendrogram":
        lines = [ln.rstrip("\n") for ln in stream if ln.strip()]
        if lines[0].split("\t") != ["step", "left", "right", "height", "size"]:
            raise ValueError("not a dendrogram TSV")
        first = {j: j for j in range(p)}
        merges = []
        for t, line in enumerate(lines[1:]):
            _, left, right, height, size = line.split("\t")
            left, right = int(left), int(right)
            first[p + t] = first[left]
            merges.append(Merge(left, right, float(height), int(size), first[right]))
        return cls(p, tuple(merges), tuple(barriers))


@dataclass(frozen=True)
class ClusterAssignment:
    """Contiguous clustering: ``labels[j]`` is the cluster of SNP ``j``."""

    labels: np.ndarray

    @property
    def g(self) -> int:
        return int(self.labels[-1]) + 1 if self.labels.size else 0

    def spans(self) -> list[tuple[int, int]]:
        """Inclusive ``(first, last)`` SNP index of each cluster."""
        starts = np.flatnonzero(np.diff(self.labels, prepend=-1) != 0)
        ends = np.append(starts[1:] - 1, self.labels.size - 1)
        return [(int(a), int(b)) for a, b in zip(starts, ends)]

    @classmethod
    def from_spans(cls, spans: Sequence[tuple[int, int]]) -> "ClusterAssignment":
        sizes = [b - a + 1 for a, b in spans]
        return cls(np.repeat(np.arange(len(spans)), sizes))


def _check_barriers(barriers: Sequence[int], p: int) -> tuple[int, ...]:
    out = tuple(int(b) for b in barriers)
    if any(b < 1 or b >= p for b in out):
        raise ValueError(f"barriers must lie in [1, {p}), got {list(out)}")
    if any(b2 <= b1 for b1, b2 in zip(out, out[1:])):
        raise ValueError("barriers must be strictly increasing")
    return out


class _BandSums:
    """Prefix sums of the similarity band along each diagonal."""

    def __init__(self, d: LdDissimilarity):
        p, h = d.p, d.bandwidth
        sim = 1.0 - d.band
        sim[np.isnan(sim)] = 0.0
        self.h = h
        self.cum = np.zeros((p + 1, h))
        np.cumsum(sim, axis=0, out=self.cum[1:])
        self.offsets = np.arange(1, h + 1)

    def cross(self, a: int, b: int, c: int) -> float:
        """Sum of ``s(i, j)`` over ``i in [a, b]``, ``j in [b + 1, c]``, ``j - i <= h``."""
        kmax = min(self.h, c - a)
        k = self.offsets[:kmax]
        lo = np.maximum(a, b + 1 - k)
        hi = np.minimum(b, c - k)
        ok = hi >= lo
        k, lo, hi = k[ok], lo[ok], hi[ok]
        return float(np.sum(self.cum[hi + 1, k - 1] - self.cum[lo, k - 1]))


def ward_cost(n_a: int, s_aa: float, n_b: int, s_bb: float, s_ab: float) -> float:
    """Ward merge cost of two clusters from their similarity sums."""
    return (n_a * n_b / (n_a + n_b)) * (
        s_aa / n_a**2 + s_bb / n_b**2 - 2.0 * s_ab / (n_a * n_b)
    )


def pick_merge(costs: np.ndarray) -> int:
    """Index of the minimal cost; near-ties go to the smallest index."""
    best = costs.min()
    tol = TIE_RTOL * max(1.0, abs(best))
    return int(np.argmax(costs <= best + tol))


def build(d: LdDissimilarity, barriers: Sequence[int] = ()) -> Dendrogram:
    """Greedy adjacency-constrained Ward agglomeration.

    Parameters
    ----------
    d : LdDissimilarity
        Banded ``1 - r^2`` dissimilarities; out-of-band pairs count as 1.
    barriers : sequence of int
        First SNP index of each chromosome after the first. Clusters are
        never merged across a barrier.
    """
    p = d.p
    barriers = _check_barriers(barriers, p) if p else ()
    if p < 2:
        return Dendrogram(p, (), barriers)
    sums = _BandSums(d)
    end = np.arange(p)  # end[start] = last SNP of the cluster starting at start
    prev = np.arange(-1, p - 1)
    nxt = np.arange(1, p + 1)  # nxt[start] = start of the next cluster (p if none)
    size = np.ones(p, dtype=np.int64)
    s_self = np.ones(p)  # S_AA for the cluster starting here
    node = np.arange(p)
    blocked = np.zeros(p + 1, dtype=bool)
    blocked[list(barriers)] = True

    costs = np.full(p, np.inf)
    for a in range(p - 1):
        if not blocked[a + 1]:
            costs[a] = ward_cost(1, 1.0, 1, 1.0, sums.cross(a, a, a + 1))

    merges: list[Merge] = []
    for t in range(p - 1 - len(barriers)):
        a = pick_merge(costs)
        b = nxt[a]
        height = float(costs[a])
        s_ab = sums.cross(a, end[a], end[b])
        merges.append(Merge(int(node[a]), int(node[b]), height, int(size[a] + size[b]), int(b)))
        # absorb cluster b into a
        s_self[a] = s_self[a] + s_self[b] + 2.0 * s_ab
        size[a] += size[b]
        end[a] = end[b]
        node[a] = p + t
        costs[b] = np.inf
        nxt[a] = nxt[b]
        if nxt[a] < p:
            prev[nxt[a]] = a
            c = nxt[a]
            if blocked[c]:
                costs[a] = np.inf
            else:
                costs[a] = ward_cost(
                    size[a], s_self[a], size[c], s_self[c], sums.cross(a, end[a], end[c])
                )
        else:
            costs[a] = np.inf
        left = prev[a]
        if left >= 0 and not blocked[a]:
            costs[left] = ward_cost(
                size[left], s_self[left], size[a], s_self[a], sums.cross(left, end[left], end[a])
            )
    return Dendrogram(p, tuple(merges), barriers)


def cut(tree: Dendrogram, g: int) -> ClusterAssignment:
    """Undo the latest merges until exactly ``g`` clusters remain."""
    if not tree.n_trees <= g <= tree.p:
        raise ValueError(f"cluster count {g} outside [{tree.n_trees}, {tree.p}]")
    applied = tree.p - g
    boundary = np.ones(tree.p, dtype=bool)
    boundary[0] = False
    for m in tree.merges[:applied]:
        boundary[m.split] = False
    return ClusterAssignment(np.cumsum(boundary))
