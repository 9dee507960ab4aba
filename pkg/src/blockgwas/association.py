"""Per-variable logistic likelihood-ratio tests with multiplicity control.

SMA tests every SNP column; SASA tests every aggregated-SNP column. Each test
compares ``logit P(y=1) = intercept + covariates`` against the same model plus
one predictor, referring twice the log-likelihood gain to chi-square(1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from scipy import linalg, stats
from scipy.special import expit

from .aggregate import AggregatedMatrix
from .genotype_model import GenotypeMatrix, as_phenotype, covariate_array

logger = logging.getLogger(__name__)

DEFAULT_PHI = 0.05
MAX_ITER = 50
# |linear predictor| beyond this puts a fitted probability within ~3e-7 of 0/1;
# on separated data the likelihood goes flat before much larger values are reached
SEPARATION_ETA = 15.0


@dataclass(frozen=True)
class TestRecord:
    id: str
    chrom: str
    pos_first: int
    pos_last: int
    first: int
    last: int
    statistic: float
    p_value: float
    effect: float
    significant: bool = False
    separated: bool = False
    skipped: str = ""

    @property
    def tested(self) -> bool:
        return not self.skipped


@dataclass
class AssociationResult:
    records: list[TestRecord]
    threshold: float
    method: str
    level: float
    kind: str = "sma"

    @property
    def n_significant(self) -> int:
        return sum(r.significant for r in self.records)

    @property
    def p_values(self) -> np.ndarray:
        return np.array([r.p_value for r in self.records])

    def write_tsv(self, stream: IO[str]) -> None:
        stream.write("id\tchrom\tpos_first\tpos_last\tstatistic\tp\tsignificant\n")
        for r in self.records:
            stat = "NA" if np.isnan(r.statistic) else repr(float(r.statistic))
            p = "NA" if np.isnan(r.p_value) else repr(float(r.p_value))
            stream.write(
                f"{r.id}\t{r.chrom}\t{r.pos_first}\t{r.pos_last}\t{stat}\t{p}\t{int(r.significant)}\n"
            )

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "method": self.method,
            "level": self.level,
            "threshold": self.threshold,
            "n_tests": sum(r.tested for r in self.records),
            "n_skipped": sum(not r.tested for r in self.records),
            "n_significant": self.n_significant,
            "n_separated": sum(r.separated for r in self.records),
        }


@dataclass
class LogisticFit:
    coef: np.ndarray
    loglik: float
    converged: bool
    separated: bool
    n_iter: int = 0
    trace: list[float] = field(default_factory=list)


def _loglik(eta, y):
    return np.sum(y * eta - np.logaddexp(0.0, eta), axis=0)


def logistic_fit(X, y, max_iter: int = MAX_ITER, tol: float = 1e-8) -> LogisticFit:
    """Unpenalized maximum-likelihood logistic regression (Newton, step halving).

    ``X`` must already contain an intercept column if one is wanted.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.zeros(X.shape[1])
    eta = X @ beta
    ll = float(_loglik(eta, y))
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        grad = X.T @ (y - p)
        if np.max(np.abs(grad), initial=0.0) <= tol:
            converged = True
            break
        w = p * (1.0 - p)
        hess = (X * w[:, None]).T @ X
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(hess, grad)[0]
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            cand_eta = X @ cand
            cand_ll = float(_loglik(cand_eta, y))
            if cand_ll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            converged = True  # no ascent direction left at working precision
            break
        gain = cand_ll - ll
        beta, eta, ll = cand, cand_eta, max(cand_ll, ll)
        trace.append(ll)
        if 0 <= gain <= 1e-12 * max(1.0, abs(ll)) and np.max(np.abs(step)) < 1e-8:
            converged = True
            break
    separated = bool(np.max(np.abs(eta), initial=0.0) > SEPARATION_ETA)
    return LogisticFit(beta, ll, converged and not separated, separated, it, trace)


def _batch_lrt(X, y, U, max_iter: int = MAX_ITER, tol: float = 1e-8):
    """Fit ``y ~ U + x_j`` for every column ``x_j`` of ``X`` at once.

    Returns statistics, slopes, separation flags and the null log-likelihood.
    """
    n, m = X.shape
    k0 = U.shape[1]
    null = logistic_fit(U, y, max_iter=max_iter)
    ll0 = null.loglik
    gam = np.repeat(null.coef[:, None], m, axis=1)  # (k0, m)
    b = np.zeros(m)
    eta = (U @ gam) + X * b
    ll = _loglik(eta, y[:, None])
    done = np.zeros(m, dtype=bool)
    yv = y[:, None]
    for _ in range(max_iter):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        Xa = X[:, active]
        ea = eta[:, active]
        p = expit(ea)
        r = yv - p
        w = p * (1.0 - p)
        g = np.vstack([U.T @ r, np.sum(Xa * r, axis=0)[None, :]])  # (k0+1, a)
        small = np.max(np.abs(g), axis=0) <= tol
        done[active[small]] = True
        keep = ~small
        if not keep.any():
            break
        active, Xa, ea, w, g = active[keep], Xa[:, keep], ea[:, keep], w[:, keep], g[:, keep]
        H = np.empty((active.size, k0 + 1, k0 + 1))
        H[:, :k0, :k0] = np.einsum("ia,ij,ib->jab", U, w, U)
        cross = np.einsum("ia,ij->ja", U, w * Xa)
        H[:, :k0, k0] = cross
        H[:, k0, :k0] = cross
        H[:, k0, k0] = np.sum(w * Xa * Xa, axis=0)
        H[:, np.arange(k0 + 1), np.arange(k0 + 1)] += 1e-12
        step = np.linalg.solve(H, g.T[:, :, None])[:, :, 0].T  # (k0+1, a)
        old = ll[active]
        t = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        new_eta = ea
        new_ll = old
        for _ in range(30):
            cand_g = gam[:, active] + t * step[:k0]
            cand_b = b[active] + t * step[k0]
            cand_eta = U @ cand_g + Xa * cand_b
            cand_ll = _loglik(cand_eta, yv)
            ok = (cand_ll >= old - 1e-12 * np.abs(old)) & ~accepted
            if ok.any():
                idx = np.flatnonzero(ok)
                gam[:, active[idx]] = cand_g[:, idx]
                b[active[idx]] = cand_b[idx]
                eta[:, active[idx]] = cand_eta[:, idx]
                ll[active[idx]] = np.maximum(cand_ll[idx], old[idx])
                accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, t * 0.5)
        # columns with no ascent direction left, or a negligible gain, are done
        gain = ll[active] - old
        stalled = ~accepted | ((gain <= 1e-12 * np.maximum(1.0, np.abs(old))) & (np.max(np.abs(step), axis=0) < 1e-8))
        done[active[stalled]] = True
    stat = np.maximum(2.0 * (ll - ll0), 0.0)
    separated = np.max(np.abs(eta), axis=0) > SEPARATION_ETA if n else np.zeros(m, bool)
    return stat, b, separated, ll0


def lrt_single(x, y, cov=None) -> tuple[float, float, float]:
    """Likelihood-ratio test of one predictor; returns (statistic, p_value, slope)."""
    x = np.asarray(x, dtype=float).ravel()
    y = as_phenotype(y, n=x.size, require_both=True).astype(float)
    if np.all(x == x[0]):
        raise ValueError("predictor is constant")
    U = np.hstack([np.ones((x.size, 1)), covariate_array(cov, x.size)])
    stat, slope, separated, _ = _batch_lrt(x[:, None], y, U)
    if separated[0]:
        logger.warning("complete or quasi-complete separation; statistic taken at the iteration cap")
    return float(stat[0]), float(stats.chi2.sf(stat[0], 1)), float(slope[0])


def bh_fdr(pvalues: Sequence[float], phi: float = DEFAULT_PHI) -> tuple[np.ndarray, float]:
    """Benjamini-Hochberg step-up: flags and the realized p-value cutoff (0 if none)."""
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        raise ValueError("no p-values supplied")
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < phi < 1:
        raise ValueError("phi must lie in (0, 1)")
    m = p.size
    ordered = np.sort(p)
    below = np.flatnonzero(ordered <= phi * np.arange(1, m + 1) / m)
    if below.size == 0:
        return np.zeros(m, dtype=bool), 0.0
    threshold = float(ordered[below[-1]])
    return p <= threshold, threshold


def bonferroni(pvalues: Sequence[float], alpha: float = 0.05) -> np.ndarray:
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        raise ValueError("no p-values supplied")
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise ValueError("p-values must lie in [0, 1]")
    return p <= alpha / p.size


def _run(values, skip_reasons, meta, y, cov, phi, method, kind, chunk=4096):
    n, m = values.shape
    y = as_phenotype(y, n=n, require_both=True).astype(float)
    if m == 0:
        raise ValueError("no variables to test")
    U = np.hstack([np.ones((n, 1)), covariate_array(cov, n)])
    stat = np.full(m, np.nan)
    slope = np.full(m, np.nan)
    sep = np.zeros(m, dtype=bool)
    testable = np.flatnonzero([not r for r in skip_reasons])
    for start in range(0, testable.size, chunk):
        cols = testable[start:start + chunk]
        s, b, sp, _ = _batch_lrt(values[:, cols], y, U)
        stat[cols], slope[cols], sep[cols] = s, b, sp
    pvals = np.where(np.isnan(stat), np.nan, stats.chi2.sf(np.nan_to_num(stat), 1))
    flags = np.zeros(m, dtype=bool)
    threshold = 0.0
    if testable.size:
        if method == "bh":
            f, threshold = bh_fdr(pvals[testable], phi)
        elif method == "bonferroni":
            f = bonferroni(pvals[testable], phi)
            threshold = phi / testable.size
        else:
            raise ValueError(f"unknown multiplicity method {method!r}")
        flags[testable] = f
    records = [
        TestRecord(*meta[j], float(stat[j]), float(pvals[j]), float(slope[j]),
                   bool(flags[j]), bool(sep[j]), skip_reasons[j])
        for j in range(m)
    ]
    if sep.any():
        logger.warning("%d variables show separation", int(sep.sum()))
    return AssociationResult(records, threshold, method, phi, kind)


def run_sma(gm: GenotypeMatrix, y, cov=None, phi: float = DEFAULT_PHI, method: str = "bh") -> AssociationResult:
    """Single marker analysis over every SNP column."""
    if gm.p == 0:
        raise ValueError("empty genotype matrix")
    if gm.has_missing:
        raise ValueError("run_sma needs a complete genotype matrix; impute first")
    values = gm.values
    const = np.all(values == values[:1], axis=0)
    reasons = ["constant" if c else "" for c in const]
    meta = [(s.id, s.chromosome, s.position, s.position, j, j) for j, s in enumerate(gm.snps)]
    return _run(values, reasons, meta, y, cov, phi, method, "sma")


def run_sasa(
    agg: AggregatedMatrix,
    y,
    cov=None,
    phi: float = DEFAULT_PHI,
    method: str = "bh",
    gm: GenotypeMatrix | None = None,
) -> AssociationResult:
    """Single aggregated-SNP analysis; ``gm`` supplies genomic coordinates for spans."""
    if agg.g == 0:
        raise ValueError("empty aggregated matrix")
    reasons = ["degenerate" if d else "" for d in agg.degenerate]
    meta = []
    for k, (a, b) in enumerate(agg.spans):
        if gm is not None:
            sa, sb = gm.snps[a], gm.snps[b]
            meta.append((f"cluster_{k}:{sa.id}-{sb.id}", sa.chromosome, sa.position, sb.position, a, b))
        else:
            meta.append((f"cluster_{k}:{a}-{b}", "NA", a, b, a, b))
    return _run(agg.values, reasons, meta, y, cov, phi, method, "sasa")
