"""Supervised choice of the dendrogram cut level.

The hierarchy is built on training individuals only. For each candidate
cluster count the training and test genotypes are aggregated with that
hierarchy, a ridge-penalized logistic regression is fitted on the training
block, and the test AUC-ROC is recorded. The level with the largest test AUC
wins (smallest cluster count on ties).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit
from scipy.stats import rankdata

from . import constrained_hac
from .aggregate import AggregatedMatrix, aggregate, aggregate_raw, column_moments, standardize
from .genotype_model import GenotypeMatrix, as_phenotype, covariate_array
from .ld import DEFAULT_BANDWIDTH, ld_band

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(10.0**k for k in range(-3, 4))
DEFAULT_SPLIT = 2.0 / 3.0
MAX_ITER = 100
GRAD_TOL = 1e-6


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, grad_norm: float):
        super().__init__(f"{msg} (gradient max-norm {grad_norm:.3g})")
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class RidgeFit:
    intercept: float
    covariate_coefs: np.ndarray
    coefs: np.ndarray
    lam: float
    n_iter: int = 0
    grad_norm: float = 0.0
    history: tuple[float, ...] = ()
    # solver coordinates, reusable as a warm start for a nearby penalty
    state: tuple = field(default=(), repr=False, compare=False)


@dataclass
class CutLevelResult:
    candidates: list[tuple[int, float]]
    best_level: int
    lambdas: dict[int, float]
    train: np.ndarray
    test: np.ndarray
    seed: int
    tree: constrained_hac.Dendrogram | None = field(default=None, repr=False)

    def auc_of(self, g: int) -> float:
        return dict(self.candidates)[g]


# ---------------------------------------------------------------------------
# split and metrics


def split_train_test(y, fraction: float = DEFAULT_SPLIT, seed: int = 0):
    """Stratified random split; returns sorted (train, test) index arrays."""
    y = as_phenotype(y)
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train = []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if idx.size < 2:
            raise ValueError(f"class {cls} has {idx.size} member(s); need at least 2 to split")
        k = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        train.append(rng.permutation(idx)[:k])
    train = np.sort(np.concatenate(train))
    test = np.setdiff1d(np.arange(y.size), train)
    return train, test


def auc_roc(y, scores) -> float:
    """Mann-Whitney AUC: P(case score > control score) + 0.5 P(tie)."""
    y = as_phenotype(y)
    scores = np.asarray(scores, dtype=float)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both cases and controls")
    ranks = rankdata(scores)
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def _stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    folds = [[] for _ in range(k)]
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == cls))
        for f, chunk in enumerate(np.array_split(idx, k)):
            folds[f].extend(chunk.tolist())
    return [np.sort(np.array(f, dtype=int)) for f in folds]


# ---------------------------------------------------------------------------
# ridge logistic regression


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _fit_primal(X, y, n_unpen, lam, init, max_iter, tol):
    n, k = X.shape
    pen = np.zeros(k)
    pen[n_unpen:] = lam
    theta = np.zeros(k) if init is None else np.array(init, dtype=float)

    def objective(th):
        eta = X @ th
        return _loglik(eta, y) - 0.5 * float(np.sum(pen * th * th)), eta

    obj, eta = objective(theta)
    history = [obj]
    for it in range(max_iter + 1):
        p = expit(eta)
        grad = X.T @ (y - p) - pen * theta
        gnorm = float(np.max(np.abs(grad))) if k else 0.0
        if gnorm <= tol:
            return theta, it, gnorm, history
        if it == max_iter:
            break
        w = p * (1.0 - p)
        hess = (X * w[:, None]).T @ X + np.diag(pen)
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(hess, grad)[0]
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            new_obj, new_eta = objective(cand)
            if new_obj >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            break
        theta, obj, eta = cand, max(new_obj, obj), new_eta
        history.append(new_obj)
    raise ConvergenceError("ridge logistic fit did not converge", gnorm)


def _fit_dual(D, K, y, U, lam, init, max_iter, tol):
    """IRLS in the representer parametrization ``beta = D.T @ a`` (needs lam > 0)."""
    n = y.size
    gamma = np.zeros(U.shape[1]) if init is None else np.array(init[0], dtype=float)
    a = np.zeros(n) if init is None else np.array(init[1], dtype=float)

    def objective(g, a_):
        ka = K @ a_
        eta = U @ g + ka
        return _loglik(eta, y) - 0.5 * lam * float(a_ @ ka), eta

    obj, eta = objective(gamma, a)
    history = [obj]
    for it in range(max_iter + 1):
        p = expit(eta)
        resid = y - p
        beta = D.T @ a
        gnorm = max(
            float(np.max(np.abs(U.T @ resid))),
            float(np.max(np.abs(D.T @ resid - lam * beta))) if beta.size else 0.0,
        )
        if gnorm <= tol:
            return gamma, a, it, gnorm, history
        if it == max_iter:
            break
        w = np.clip(p * (1.0 - p), 1e-12, None)
        z = eta + resid / w
        M = K + np.diag(lam / w)
        try:
            cf = linalg.cho_factor(M)
            solve = lambda rhs: linalg.cho_solve(cf, rhs)  # noqa: E731
        except linalg.LinAlgError:
            solve = lambda rhs: linalg.lstsq(M, rhs)[0]  # noqa: E731
        m_u = solve(U)
        m_z = solve(z)
        g_new = linalg.solve(U.T @ m_u, U.T @ m_z, assume_a="pos")
        a_new = m_z - m_u @ g_new
        t = 1.0
        for _ in range(40):
            cg, ca = gamma + t * (g_new - gamma), a + t * (a_new - a)
            new_obj, new_eta = objective(cg, ca)
            if new_obj >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            break
        gamma, a, obj, eta = cg, ca, max(new_obj, obj), new_eta
        history.append(new_obj)
    raise ConvergenceError("ridge logistic fit did not converge", gnorm)


def _design(D, n) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(D, AggregatedMatrix):
        return D.values, ~np.asarray(D.degenerate, dtype=bool)
    D = np.asarray(D, dtype=float).reshape(n, -1)
    return D, np.ones(D.shape[1], dtype=bool)


def _use_dual(n: int, g: int, lam: float, have_kernel: bool) -> bool:
    if lam <= 0 or g == 0:
        return False
    primal = n * g * g + g**3 / 3.0
    dual = n**3 / 3.0 + (0 if have_kernel else n * n * g)
    return dual < primal


def ridge_logistic_fit(
    D,
    y,
    cov=None,
    lam: float = 1.0,
    max_iter: int = MAX_ITER,
    tol: float = GRAD_TOL,
    kernel: np.ndarray | None = None,
    init: RidgeFit | None = None,
) -> RidgeFit:
    """Maximize the ridge-penalized logistic log-likelihood.

    The objective is ``sum(y*eta - log(1 + exp(eta))) - lam/2 * ||coefs||^2``
    with an unpenalized intercept and covariate effects. Newton/IRLS with
    step halving; when there are more penalized columns than individuals the
    iteration runs in the ``n``-dimensional representer space. ``kernel`` may
    carry a precomputed ``D @ D.T`` over the active columns; ``init`` warm-starts
    from an earlier fit on the same design.

    Raises
    ------
    ConvergenceError
        If the gradient max-norm is still above ``tol`` after ``max_iter``
        iterations.
    """
    y = as_phenotype(y).astype(float)
    n = y.size
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    values, active = _design(D, n)
    if values.shape[0] != n:
        raise ValueError(f"design has {values.shape[0]} rows, phenotype has {n}")
    cov_arr = covariate_array(cov, n)
    U = np.hstack([np.ones((n, 1)), cov_arr])
    Da = values[:, active]
    coefs = np.zeros(values.shape[1])
    start = init.state if init is not None else ()
    if _use_dual(n, Da.shape[1], lam, kernel is not None):
        K = Da @ Da.T if kernel is None else kernel
        warm = start[1:] if start[:1] == ("dual",) else None
        gamma, a, it, gnorm, hist = _fit_dual(Da, K, y, U, lam, warm, max_iter, tol)
        coefs[active] = Da.T @ a
        state = ("dual", gamma, a)
    else:
        warm = start[1] if start[:1] == ("primal",) else None
        theta, it, gnorm, hist = _fit_primal(
            np.hstack([U, Da]), y, U.shape[1], lam, warm, max_iter, tol
        )
        gamma = theta[: U.shape[1]]
        coefs[active] = theta[U.shape[1]:]
        state = ("primal", theta)
    return RidgeFit(
        float(gamma[0]), np.array(gamma[1:]), coefs, float(lam), it, gnorm, tuple(hist), state
    )


def predict_prob(fit: RidgeFit, D, cov=None) -> np.ndarray:
    values = D.values if isinstance(D, AggregatedMatrix) else np.asarray(D, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[1] != fit.coefs.size:
        raise ValueError(f"design has {values.shape[1]} columns, fit has {fit.coefs.size}")
    cov_arr = covariate_array(cov, values.shape[0])
    if cov_arr.shape[1] != fit.covariate_coefs.size:
        raise ValueError(
            f"{cov_arr.shape[1]} covariates supplied, fit has {fit.covariate_coefs.size}"
        )
    eta = fit.intercept + cov_arr @ fit.covariate_coefs + values @ fit.coefs
    return expit(eta)


# ---------------------------------------------------------------------------
# penalty selection and the level sweep


def choose_lambda(
    D: np.ndarray,
    y: np.ndarray,
    cov: np.ndarray,
    lambdas=DEFAULT_LAMBDAS,
    n_folds: int = 5,
    seed: int = 0,
) -> tuple[float, dict[float, float]]:
    """Pick the penalty maximizing mean inner-fold AUC (ties: larger penalty)."""
    y = np.asarray(y)
    k = min(n_folds, int(y.sum()), int(y.size - y.sum()))
    lambdas = sorted(lambdas, reverse=True)
    if k < 2:
        return lambdas[len(lambdas) // 2], {}
    folds = _stratified_folds(y, k, np.random.default_rng(seed))
    K_full = D @ D.T if D.shape[1] else None
    scores: dict[float, list[float]] = {lam: [] for lam in lambdas}
    for held in folds:
        fit_idx = np.setdiff1d(np.arange(y.size), held)
        Dk = D[fit_idx]
        Kk = K_full[np.ix_(fit_idx, fit_idx)] if K_full is not None else None
        warm = None
        for lam in lambdas:
            try:
                fit = ridge_logistic_fit(Dk, y[fit_idx], cov[fit_idx], lam, kernel=Kk, init=warm)
            except ConvergenceError as exc:
                logger.debug("lambda %g skipped in inner CV: %s", lam, exc)
                scores[lam].append(np.nan)
                continue
            warm = fit
            prob = predict_prob(fit, D[held], cov[held])
            scores[lam].append(auc_roc(y[held], prob))
    means = {lam: float(np.mean(v)) for lam, v in scores.items() if not np.isnan(v).any()}
    if not means:
        return lambdas[len(lambdas) // 2], {}
    best = max(means.values())
    # lambdas are in decreasing order, so the first hit is the largest penalty
    chosen = next(lam for lam in lambdas if lam in means and means[lam] == best)
    return chosen, means


def default_grid(p: int, n_chrom: int = 1, size: int = 20) -> list[int]:
    """About ``size`` geometrically spaced cluster counts from max(n_chrom, 50) to p."""
    lo = max(n_chrom, min(50, p))
    grid = np.unique(np.round(np.geomspace(lo, p, size)).astype(int))
    return [int(g) for g in grid if n_chrom <= g <= p]


def _evaluate_level(g, tree, x_train, x_test, y_train, y_test, c_train, c_test, lambdas, n_folds, seed):
    assignment = constrained_hac.cut(tree, g)
    raw_train = aggregate_raw(x_train, assignment)
    mean, sd = column_moments(raw_train.values)
    d_train = standardize(raw_train, mean, sd)
    d_test = standardize(aggregate_raw(x_test, assignment), mean, sd)
    active = ~d_train.degenerate
    dtr = d_train.values[:, active]
    lam, _ = choose_lambda(dtr, y_train, c_train, lambdas, n_folds, seed)
    fit = ridge_logistic_fit(dtr, y_train, c_train, lam)
    prob = predict_prob(fit, d_test.values[:, active], c_test)
    return auc_roc(y_test, prob), lam


def training_tree(
    gm: GenotypeMatrix,
    y,
    split_fraction: float = DEFAULT_SPLIT,
    seed: int = 0,
    bandwidth: int = DEFAULT_BANDWIDTH,
) -> tuple[np.ndarray, np.ndarray, constrained_hac.Dendrogram]:
    """Split individuals and build the constrained hierarchy on the training rows only."""
    y = as_phenotype(y, n=gm.n, require_both=True)
    barriers = gm.chromosome_barriers()
    train, test = split_train_test(y, split_fraction, seed)
    d = ld_band(gm.values[train], min(bandwidth, max(gm.p - 1, 1)), barriers, allow_constant=True)
    return train, test, constrained_hac.build(d, barriers)


def select_cut_level(
    gm: GenotypeMatrix,
    y,
    cov=None,
    grid=None,
    split_fraction: float = DEFAULT_SPLIT,
    seed: int = 0,
    bandwidth: int = DEFAULT_BANDWIDTH,
    lambdas=DEFAULT_LAMBDAS,
    n_folds: int = 5,
    threads: int = 1,
) -> tuple[CutLevelResult, AggregatedMatrix]:
    """Sweep cut levels of a training-set hierarchy and keep the best test AUC.

    Returns the sweep summary and the standardized aggregated matrix of all
    individuals at the selected level.
    """
    if gm.has_missing:
        raise ValueError("select_cut_level needs a complete genotype matrix; impute first")
    y = as_phenotype(y, n=gm.n, require_both=True)
    cov_arr = covariate_array(cov, gm.n)
    barriers = gm.chromosome_barriers()
    n_trees = len(barriers) + 1
    grid = default_grid(gm.p, n_trees) if grid is None else sorted({int(g) for g in grid})
    if not grid or grid[0] < n_trees or grid[-1] > gm.p:
        raise ValueError(f"grid values must lie in [{n_trees}, {gm.p}]")

    train, test, tree = training_tree(gm, y, split_fraction, seed, bandwidth)
    x_train, x_test = gm.values[train], gm.values[test]

    args = (tree, x_train, x_test, y[train], y[test], cov_arr[train], cov_arr[test], lambdas, n_folds, seed)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(lambda g: _evaluate_level(g, *args), grid))
    else:
        outcomes = [_evaluate_level(g, *args) for g in grid]
    candidates = [(g, auc) for g, (auc, _) in zip(grid, outcomes)]
    lams = {g: lam for g, (_, lam) in zip(grid, outcomes)}
    best_auc = max(a for _, a in candidates)
    best = min(g for g, a in candidates if a == best_auc)
    logger.info("best cut level G=%d (test AUC %.4f)", best, best_auc)
    result = CutLevelResult(candidates, best, lams, train, test, seed, tree)
    return result, aggregate(gm, constrained_hac.cut(tree, best))
