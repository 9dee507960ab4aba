import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from blockgwas.aggregate import aggregate
from blockgwas.constrained_hac import build, cut
from blockgwas.cutlevel import (
    ConvergenceError,
    RidgeFit,
    auc_roc,
    choose_lambda,
    default_grid,
    predict_prob,
    ridge_logistic_fit,
    select_cut_level,
    split_train_test,
    training_tree,
)
from blockgwas.genotype_model import CovariateMatrix, GenotypeMatrix
from blockgwas.ld import ld_band
from blockgwas.simulate import SimConfig, simulate_bundle

from oracles import auc_pairs, ridge_scipy


def _gradient(fit, D, y, U):
    eta = U @ np.r_[fit.intercept, fit.covariate_coefs] + D @ fit.coefs
    r = y - expit(eta)
    return np.r_[U.T @ r, D.T @ r - fit.lam * fit.coefs]


class TestSplit:
    def test_stratified_counts(self):
        y = np.r_[np.ones(50, int), np.zeros(50, int)]
        train, test = split_train_test(y, 2 / 3, seed=1)
        assert y[train].sum() in (33, 34) and (1 - y[train]).sum() in (33, 34)
        assert np.intersect1d(train, test).size == 0 and train.size + test.size == 100

    def test_deterministic(self):
        y = np.random.default_rng(0).integers(0, 2, 40)
        a, b = split_train_test(y, 0.5, 3), split_train_test(y, 0.5, 3)
        np.testing.assert_array_equal(a[0], b[0])

    def test_single_class(self):
        with pytest.raises(ValueError):
            split_train_test(np.ones(10, int), 0.5, 0)

    def test_too_few_members(self):
        with pytest.raises(ValueError):
            split_train_test(np.r_[np.ones(9, int), 0], 0.5, 0)


class TestAuc:
    def test_perfect(self):
        assert auc_roc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_all_tied(self):
        assert auc_roc([0, 1, 0, 1], [3.0] * 4) == 0.5

    def test_hand_example(self):
        assert auc_roc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == pytest.approx(0.75, abs=1e-15)

    def test_single_class(self):
        with pytest.raises(ValueError):
            auc_roc([1, 1], [0.2, 0.3])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_pair_counting(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 5, n).astype(float)
        assert auc_roc(y, s) == pytest.approx(auc_pairs(y, s), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_invariance_and_reflection(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, 30)
        y[:2] = [0, 1]
        s = rng.normal(size=30)
        base = auc_roc(y, s)
        assert auc_roc(y, np.exp(3 * s) + 7) == base
        assert auc_roc(y, np.arctan(s)) == base
        assert base + auc_roc(y, -s) == pytest.approx(1.0, abs=1e-12)


class TestRidge:
    def _data(self, seed, n=8, g=2, c=0):
        rng = np.random.default_rng(seed)
        D = rng.normal(size=(n, g))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        U = np.hstack([np.ones((n, 1)), rng.normal(size=(n, c))])
        return D, y, U

    def test_zero_columns_balanced(self):
        fit = ridge_logistic_fit(np.zeros((6, 3)), [0, 1, 0, 1, 0, 1], lam=1.0)
        np.testing.assert_allclose(fit.coefs, 0.0, atol=1e-12)
        assert fit.intercept == pytest.approx(0.0, abs=1e-12)

    def test_large_penalty(self):
        D, y, _ = self._data(1, n=30, g=5)
        fit = ridge_logistic_fit(D, y, lam=1e8)
        assert np.linalg.norm(fit.coefs) <= 1e-3

    def test_small_instance_matches_optimizer(self):
        D, y, U = self._data(2)
        fit = ridge_logistic_fit(D, y, lam=1.0)
        gamma, beta = ridge_scipy(D, y, U, 1.0)
        np.testing.assert_allclose(fit.coefs, beta, atol=1e-4)
        assert fit.intercept == pytest.approx(gamma[0], abs=1e-4)
        assert fit.grad_norm <= 1e-6

    @pytest.mark.parametrize("seed", range(6))
    def test_dual_path_matches_optimizer(self, seed):
        # more columns than rows exercises the representer solver
        D, y, U = self._data(10 + seed, n=12, g=40, c=1)
        cov = CovariateMatrix(U[:, 1:])
        fit = ridge_logistic_fit(D, y, cov, lam=0.5)
        assert fit.state[0] == "dual"
        gamma, beta = ridge_scipy(D, y, np.hstack([np.ones((12, 1)), cov.values]), 0.5)
        np.testing.assert_allclose(fit.coefs, beta, atol=1e-4)
        assert np.max(np.abs(_gradient(fit, D, y, np.hstack([np.ones((12, 1)), cov.values])))) <= 1e-6

    def test_objective_non_decreasing(self):
        D, y, _ = self._data(3, n=40, g=6)
        fit = ridge_logistic_fit(D * 3, y, lam=0.01)
        assert np.all(np.diff(fit.history) >= -1e-9 * np.abs(fit.history[:-1]))

    def test_warm_start_reaches_same_optimum(self):
        D, y, _ = self._data(4, n=30, g=50)
        cold = ridge_logistic_fit(D, y, lam=1.0)
        warm = ridge_logistic_fit(D, y, lam=1.0, init=ridge_logistic_fit(D, y, lam=10.0))
        np.testing.assert_allclose(warm.coefs, cold.coefs, atol=1e-6)

    def test_non_convergence_reports_gradient(self):
        x = np.r_[-np.ones(5), np.ones(5)]
        y = (x > 0).astype(int)
        with pytest.raises(ConvergenceError) as err:
            ridge_logistic_fit(x[:, None], y, lam=0.0, max_iter=3)
        assert err.value.grad_norm > 1e-6

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            ridge_logistic_fit(np.zeros((4, 1)), [0, 1, 0, 1], lam=-1)


class TestPredict:
    def test_zero_fit(self):
        fit = RidgeFit(0.0, np.zeros(0), np.zeros(2), 1.0)
        np.testing.assert_allclose(predict_prob(fit, np.ones((3, 2))), 0.5)

    def test_intercept_only(self):
        fit = RidgeFit(np.log(3.0), np.zeros(0), np.zeros(0), 1.0)
        np.testing.assert_allclose(predict_prob(fit, np.zeros((2, 0))), 0.75)

    def test_unit_linear_predictor(self):
        fit = RidgeFit(0.0, np.zeros(0), np.array([1.0]), 1.0)
        assert predict_prob(fit, np.ones((1, 1)))[0] == pytest.approx(0.7310586, abs=1e-7)

    def test_dimension_mismatch(self):
        fit = RidgeFit(0.0, np.zeros(0), np.zeros(2), 1.0)
        with pytest.raises(ValueError):
            predict_prob(fit, np.ones((3, 3)))


def _block_data(seed, n=300, p=120):
    cfg = SimConfig(n=n, p=p, seed=seed, chip_fraction=1.0)
    b = simulate_bundle(cfg)
    return b.chip, b.phenotype


class TestSelectCutLevel:
    def test_default_grid(self):
        grid = default_grid(5000)
        assert grid[0] == 50 and grid[-1] == 5000 and len(grid) == 20
        assert default_grid(30) == [30]
        assert default_grid(200, n_chrom=3)[0] == 50

    def test_grid_of_p_only(self):
        gm, y = _block_data(0)
        res, D = select_cut_level(gm, y, grid=[gm.p], seed=0)
        assert res.best_level == gm.p
        z = (gm.values - gm.values.mean(0)) / gm.values.std(0, ddof=1)
        np.testing.assert_allclose(D.values, z, atol=1e-10)

    def test_best_level_is_argmax_smallest_tie(self):
        gm, y = _block_data(1)
        res, D = select_cut_level(gm, y, grid=[10, 20, 40, gm.p], seed=1)
        best = max(a for _, a in res.candidates)
        assert res.auc_of(res.best_level) == best
        assert res.best_level == min(g for g, a in res.candidates if a == best)
        assert D.g == res.best_level
        assert set(res.lambdas) == {10, 20, 40, gm.p}

    def test_deterministic_and_thread_independent(self):
        gm, y = _block_data(2)
        a, da = select_cut_level(gm, y, grid=[10, 30, 60], seed=5)
        b, db = select_cut_level(gm, y, grid=[10, 30, 60], seed=5, threads=3)
        assert a.candidates == b.candidates and a.lambdas == b.lambdas
        np.testing.assert_array_equal(da.values, db.values)

    def test_no_leakage_from_test_rows(self):
        gm, y = _block_data(3)
        res, _ = select_cut_level(gm, y, grid=[10, 30], seed=2)
        noisy = gm.values.copy()
        rng = np.random.default_rng(0)
        noisy[res.test] = rng.integers(0, 3, (res.test.size, gm.p))
        gm2 = GenotypeMatrix(noisy, gm.snps)
        res2, _ = select_cut_level(gm2, y, grid=[10, 30], seed=2)
        assert res.tree.merges == res2.tree.merges
        assert res.lambdas == res2.lambdas

    def test_training_tree_matches_sweep(self):
        gm, y = _block_data(4)
        res, D = select_cut_level(gm, y, grid=[12], seed=9)
        train, _, tree = training_tree(gm, y, seed=9)
        np.testing.assert_array_equal(train, res.train)
        np.testing.assert_array_equal(aggregate(gm, cut(tree, 12)).values, D.values)

    def test_tree_built_on_training_rows(self):
        gm, y = _block_data(5)
        res, _ = select_cut_level(gm, y, grid=[20], seed=4)
        own = build(ld_band(gm.values[res.train], gm.p - 1, allow_constant=True))
        assert own.merges == res.tree.merges

    def test_grid_out_of_range(self):
        gm, y = _block_data(0)
        with pytest.raises(ValueError):
            select_cut_level(gm, y, grid=[gm.p + 1])

    def test_choose_lambda_prefers_larger_on_ties(self):
        y = np.array([0, 1] * 10)
        lam, scores = choose_lambda(np.zeros((20, 2)), y, np.zeros((20, 0)), (0.1, 1.0, 10.0))
        assert lam == 10.0 and len(scores) == 3

    def test_aggregation_helps_on_block_signal(self):
        # causal signal spread over a block: over 20 replicates the block-scale level beats G = P
        gains = []
        for seed in range(20):
            gm, y = _block_data(seed, n=400, p=200)
            res, _ = select_cut_level(gm, y, grid=[10, gm.p], seed=seed)
            gains.append(res.auc_of(10) - res.auc_of(gm.p))
        assert np.mean(gains) >= 0.0
