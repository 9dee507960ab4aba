"""Block-structured genotype and case-control phenotype simulation.

Genotypes: SNPs are split into contiguous blocks. Every haplotype carries one
latent uniform ``u`` per block; SNP ``j`` in the block copies the allele
``1[u < maf_j]`` with probability ``q`` and otherwise draws an independent
allele with the same frequency. Two SNPs in a block then have population
genotypic ``r^2 = q^4 c_jk^2``, where ``c_jk`` is the largest correlation two
binary alleles with those frequencies can reach; ``q`` is set so the average
over the MAF distribution equals the requested within-block ``r^2``. Blocks
are independent of each other.

Phenotypes follow a logistic model with intercept ``ln(pi / (1 - pi))`` and a
common effect on centered causal predictors: single SNPs (``singleSNP``) or
aggregated clusters from a constrained Ward hierarchy (``clusSNP``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.special import expit, roots_legendre

from . import constrained_hac
from .aggregate import aggregate_raw, standardize
from .association import logistic_fit
from .genotype_model import GenotypeMatrix, drop_monomorphic
from .ld import DEFAULT_BANDWIDTH, ld_band

SCENARIOS = ("singleSNP", "clusSNP")
BETA_CAP = 1e4
CAUSAL_CLUSTER_SIZE = 20


class InfeasibleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    p: int = 5000
    block_size_mean: int = 20
    block_size_jitter: int = 5
    within_block_r2: float = 0.8
    maf_range: tuple[float, float] = (0.35, 0.5)
    scenario: str = "clusSNP"
    ell: int = 1
    prevalence: float = 0.5
    chip_fraction: float = 0.4
    target_mse: float = 0.05
    bandwidth: int = DEFAULT_BANDWIDTH
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "maf_range", tuple(float(v) for v in self.maf_range))
        lo, hi = self.maf_range
        checks = [
            (self.n >= 2, "n must be >= 2"),
            (self.p >= 2, "p must be >= 2"),
            (self.block_size_mean >= 1, "block_size_mean must be >= 1"),
            (0 <= self.block_size_jitter < self.block_size_mean, "need 0 <= jitter < block_size_mean"),
            (0 <= self.within_block_r2 < 1, "within_block_r2 must lie in [0, 1)"),
            (0 < lo <= hi <= 0.5, "maf_range must satisfy 0 < low <= high <= 0.5"),
            (self.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}"),
            (self.ell >= 1, "ell must be >= 1"),
            (0 < self.prevalence < 1, "prevalence must lie in (0, 1)"),
            (0 < self.chip_fraction <= 1, "chip_fraction must lie in (0, 1]"),
            (self.target_mse > 0, "target_mse must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["maf_range"] = list(self.maf_range)
        return d


@dataclass
class GroundTruth:
    scenario: str
    ell: int
    beta0: float
    beta: float
    causal_snps: list[int]
    causal_spans: list[tuple[int, int]]
    block_starts: list[int]
    ids: list[str]
    chromosomes: list[str]
    positions: list[int]
    mapped_mask: list[bool] = field(default_factory=list)
    nearest_mapped: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mapped_mask:
            self.mapped_mask = [True] * len(self.ids)

    def to_json(self) -> str:
        d = asdict(self)
        d["causal_spans"] = [list(s) for s in self.causal_spans]
        d["nearest_mapped"] = {str(k): v for k, v in sorted(self.nearest_mapped.items())}
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        d["causal_spans"] = [tuple(s) for s in d["causal_spans"]]
        d["nearest_mapped"] = {int(k): int(v) for k, v in d["nearest_mapped"].items()}
        return cls(**d)


@dataclass
class SimulationBundle:
    config: SimConfig
    full: GenotypeMatrix
    chip: GenotypeMatrix
    phenotype: np.ndarray
    truth: GroundTruth
    x_tilde: np.ndarray


def _seed(seed, *stream) -> list[int]:
    base = [int(v) for v in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + list(stream)


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng(_seed(seed, *stream))


def intercept(prevalence: float) -> float:
    return math.log(prevalence / (1.0 - prevalence))


def mean_max_corr_sq(maf_range: Sequence[float], order: int = 64) -> float:
    """Average of c(f1, f2)^2 for f1, f2 iid uniform on ``maf_range``.

    ``c`` is the largest correlation attainable between two binary alleles
    with frequencies ``f1`` and ``f2``.
    """
    lo, hi = maf_range
    if hi - lo < 1e-12:
        return 1.0
    x, w = roots_legendre(order)
    f = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    w = w / 2.0
    a, b = np.meshgrid(f, f, indexing="ij")
    c = (np.minimum(a, b) - a * b) / np.sqrt(a * (1 - a) * b * (1 - b))
    return float(np.einsum("i,j,ij->", w, w, c * c))


def copy_probability(within_block_r2: float, maf_range: Sequence[float]) -> float:
    """Copy probability ``q`` giving the requested average population r^2."""
    if within_block_r2 == 0:
        return 0.0
    ceiling = mean_max_corr_sq(maf_range)
    if within_block_r2 > ceiling:
        raise InfeasibleConfigError(
            f"within_block_r2={within_block_r2} exceeds the maximum average r^2 "
            f"{ceiling:.3f} reachable with MAFs in {tuple(maf_range)}; narrow maf_range"
        )
    return (within_block_r2 / ceiling) ** 0.25


def block_layout(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Start index of each block."""
    starts, pos = [], 0
    while pos < cfg.p:
        starts.append(pos)
        pos += int(rng.integers(cfg.block_size_mean - cfg.block_size_jitter,
                                cfg.block_size_mean + cfg.block_size_jitter + 1))
    return np.array(starts, dtype=int)


def simulate_genotypes(cfg: SimConfig) -> tuple[GenotypeMatrix, np.ndarray]:
    """Simulate a single-chromosome ``n x p`` genotype matrix and its block starts."""
    q = copy_probability(cfg.within_block_r2, cfg.maf_range)
    rng = _rng(cfg.seed, 0)
    starts = block_layout(cfg, rng)
    maf = rng.uniform(*cfg.maf_range, size=cfg.p)
    values = np.empty((cfg.n, cfg.p), dtype=np.int8)
    bounds = np.append(starts, cfg.p)
    for a, b in zip(bounds[:-1], bounds[1:]):
        f = maf[a:b]
        latent = rng.random((cfg.n, 2, 1)) < f
        own = rng.random((cfg.n, 2, b - a)) < f
        copies = rng.random((cfg.n, 2, b - a)) < q
        values[:, a:b] = np.where(copies, latent, own).sum(axis=1)
    gaps = rng.integers(500, 1501, size=cfg.p)
    positions = 10_000 + np.cumsum(gaps)
    ids = [f"snp{j:06d}" for j in range(cfg.p)]
    gm = GenotypeMatrix.from_array(values, ids, ["1"] * cfg.p, positions)
    return gm, starts


def simulate_phenotype(x_tilde, beta0: float, beta, seed) -> np.ndarray:
    """Bernoulli draws from ``expit(beta0 + x_centered @ beta)``.

    ``beta`` is a common scalar effect or one coefficient per column.
    """
    x = np.asarray(x_tilde, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    x = x - x.mean(axis=0)
    coef = np.broadcast_to(np.asarray(beta, dtype=float), (x.shape[1],))
    prob = expit(beta0 + x @ coef)
    u = _rng(seed).random(x.shape[0])
    return (u < prob).astype(np.int8)


def fitted_mse(x_tilde, y) -> float:
    """In-sample mean squared error between ``y`` and logistic fitted probabilities."""
    y = np.asarray(y, dtype=float)
    if y.min() == y.max():
        return 0.0
    x = np.asarray(x_tilde, dtype=float).reshape(y.size, -1)
    X = np.hstack([np.ones((y.size, 1)), x - x.mean(axis=0)])
    fit = logistic_fit(X, y)
    return float(np.mean((y - expit(X @ fit.coef)) ** 2))


def calibrate_beta(
    x_tilde,
    prevalence: float,
    target_mse: float = 0.05,
    seed=0,
    n_draws: int = 3,
    max_steps: int = 60,
    trace: list | None = None,
) -> float:
    """Smallest common effect whose phenotypes a logistic fit predicts to ``target_mse``.

    The MSE at a candidate effect is averaged over ``n_draws`` phenotypes drawn
    with fixed seeds. Search doubles from 1 and then bisects; every evaluated
    ``(beta, mse)`` pair is appended to ``trace`` when given.
    """
    if target_mse <= 0:
        raise ValueError("target_mse must be positive")
    b0 = intercept(prevalence)

    def mse(beta):
        val = float(np.mean([
            fitted_mse(x_tilde, simulate_phenotype(x_tilde, b0, beta, _seed(seed, 3, r)))
            for r in range(n_draws)
        ]))
        if trace is not None:
            trace.append((beta, val))
        return val

    steps = 1
    if mse(0.0) <= target_mse:
        return 0.0
    lo, hi = 0.0, 1.0
    while mse(hi) > target_mse:
        steps += 1
        lo, hi = hi, hi * 2.0
        if hi > BETA_CAP or steps >= max_steps:
            raise InfeasibleConfigError(
                f"target_mse={target_mse} not reached for beta <= {BETA_CAP:g}; use a larger target"
            )
    while steps < max_steps and hi - lo > 1e-3 * hi:
        steps += 1
        mid = 0.5 * (lo + hi)
        if mse(mid) <= target_mse:
            hi = mid
        else:
            lo = mid
    return hi


def _cluster_spans(gm: GenotypeMatrix, g: int, bandwidth: int) -> list[tuple[int, int]]:
    """Spans (in ``gm`` column indices) of a ``g``-cluster constrained Ward cut.

    Monomorphic columns are left out of the clustering and absorbed into the
    cluster on their left.
    """
    kept, _ = drop_monomorphic(gm)
    kept_ids = set(kept.ids)
    keep_idx = np.array([s.index for s in gm.snps if s.id in kept_ids])
    h = min(bandwidth, max(kept.p - 1, 1))
    tree = constrained_hac.build(ld_band(kept, h), kept.chromosome_barriers())
    g = min(max(g, tree.n_trees), kept.p)
    spans = constrained_hac.cut(tree, g).spans()
    full_starts = [0] + [int(keep_idx[a]) for a, _ in spans[1:]]
    full_ends = [s - 1 for s in full_starts[1:]] + [gm.p - 1]
    return list(zip(full_starts, full_ends))


def make_causal(
    cfg: SimConfig, gm: GenotypeMatrix, block_starts: Sequence[int]
) -> tuple[np.ndarray, GroundTruth]:
    """Pick causal units and build the causal design for the configured scenario."""
    rng = _rng(cfg.seed, 1)
    values = gm.values
    block_starts = np.asarray(block_starts, dtype=int)
    causal_snps: list[int] = []
    causal_spans: list[tuple[int, int]] = []
    if cfg.scenario == "singleSNP":
        block_of = np.searchsorted(block_starts, np.arange(gm.p), side="right") - 1
        candidates = np.flatnonzero(values.std(axis=0) > 0)
        for _ in range(cfg.ell):
            if candidates.size == 0:
                raise ValueError(f"ell={cfg.ell} exceeds the number of usable blocks")
            pick = int(rng.choice(candidates))
            causal_snps.append(pick)
            candidates = candidates[block_of[candidates] != block_of[pick]]
        causal_snps.sort()
        x_tilde = values[:, causal_snps].astype(float)
    else:
        g = max(1, int(round(gm.p / CAUSAL_CLUSTER_SIZE)))
        spans = _cluster_spans(gm, g, cfg.bandwidth)
        if cfg.ell > len(spans):
            raise ValueError(f"ell={cfg.ell} exceeds the {len(spans)} available clusters")
        chosen = np.sort(rng.choice(len(spans), size=cfg.ell, replace=False))
        causal_spans = [spans[k] for k in chosen]
        x_tilde = causal_design(gm, causal_spans)
    truth = GroundTruth(
        scenario=cfg.scenario,
        ell=cfg.ell,
        beta0=intercept(cfg.prevalence),
        beta=0.0,
        causal_snps=causal_snps,
        causal_spans=causal_spans,
        block_starts=[int(b) for b in block_starts],
        ids=gm.ids,
        chromosomes=gm.chromosomes,
        positions=[int(v) for v in gm.positions],
    )
    return x_tilde, truth


def causal_design(gm: GenotypeMatrix, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Standardized aggregated-SNP columns for the given spans."""
    out = []
    for a, b in spans:
        raw = aggregate_raw(gm.values[:, a:b + 1], constrained_hac.ClusterAssignment(np.zeros(b - a + 1, int)))
        out.append(standardize(raw).values[:, 0])
    return np.column_stack(out)


def nearest_mapped_snp(j: int, mapped: np.ndarray, positions, chromosomes) -> int:
    """Closest mapped SNP to ``j`` by base-pair distance on its chromosome (ties: smaller position)."""
    same = mapped[[chromosomes[m] == chromosomes[j] for m in mapped]]
    if same.size == 0:
        raise ValueError(f"no mapped SNP on chromosome {chromosomes[j]}")
    pos = np.asarray(positions)
    dist = np.abs(pos[same] - pos[j])
    best = dist.min()
    return int(same[dist == best][np.argmin(pos[same][dist == best])])


def mask_to_chip(
    gm: GenotypeMatrix, fraction: float, seed, truth: GroundTruth | None = None
) -> tuple[GenotypeMatrix, GroundTruth | None]:
    """Keep a uniform random subset of ``round(fraction * p)`` SNPs in genomic order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = int(round(fraction * gm.p))
    if fraction == 1 or k >= gm.p:
        keep = np.arange(gm.p)
    else:
        keep = np.sort(_rng(seed, 4).choice(gm.p, size=k, replace=False))
    chroms = gm.chromosomes
    lost = set(chroms) - {chroms[j] for j in keep}
    if lost:
        raise ValueError(f"chip fraction {fraction} leaves no SNP on chromosome(s) {sorted(lost)}")
    chip = gm.take_columns(keep)
    if truth is not None:
        mask = np.zeros(gm.p, dtype=bool)
        mask[keep] = True
        truth.mapped_mask = mask.tolist()
        truth.nearest_mapped = {
            j: nearest_mapped_snp(j, keep, truth.positions, truth.chromosomes)
            for j in truth.causal_snps
            if not mask[j]
        }
    return chip, truth


def simulate_bundle(cfg: SimConfig) -> SimulationBundle:
    """Full protocol: genotypes, causal units, effect calibration, phenotype, chip mask."""
    full, starts = simulate_genotypes(cfg)
    x_tilde, truth = make_causal(cfg, full, starts)
    beta = calibrate_beta(x_tilde, cfg.prevalence, cfg.target_mse, seed=cfg.seed)
    truth.beta = beta
    y = simulate_phenotype(x_tilde, truth.beta0, beta, _seed(cfg.seed, 2))
    chip, truth = mask_to_chip(full, cfg.chip_fraction, cfg.seed, truth)
    return SimulationBundle(cfg, full, chip, y, truth, x_tilde)
