"""End-to-end acceptance checks.

Each test prints one ``PASS criterion N: ...`` or ``FAIL criterion N: ...`` line
and then asserts, so ``pytest tests/test_acceptance.py -v`` shows the verdicts
next to the test outcomes.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from blockgwas.association import bh_fdr, run_sasa, run_sma
from blockgwas.cli import AUC_HEADER, RESULTS_HEADER, validate_tsv
from blockgwas.constrained_hac import build
from blockgwas.cutlevel import auc_roc, ridge_logistic_fit, select_cut_level
from blockgwas.evaluation import SCORES_HEADER, match_results, mean_defined, precision, recall
from blockgwas.genotype_model import CovariateMatrix, drop_monomorphic
from blockgwas.ld import LdDissimilarity
from blockgwas.simulate import SimConfig, simulate_bundle

from oracles import auc_pairs, bh_bruteforce, ridge_scipy, ward_bruteforce

HERE = Path(__file__).resolve().parent


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
    return emit


def test_criterion_1_hac_oracle(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        p = int(rng.integers(2, 33))
        d = np.triu(rng.random((p, p)), 1)
        d = d + d.T
        got = [(m.left, m.right, m.size, m.split) for m in build(LdDissimilarity.from_dense(d)).merges]
        want = [(m[0], m[1], m[3], m[4]) for m in ward_bruteforce(d)]
        mismatches += got != want
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    report(1, ok, f"{200 - mismatches}/200 merge sequences identical, {elapsed:.1f} s")
    assert ok


def test_criterion_2_bh_oracle(report):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    flags, _ = bh_fdr([0.01, 0.02, 0.03, 0.5], 0.05)
    hand = int(flags.sum()) == 3
    bad = 0
    for _ in range(1000):
        m = int(rng.integers(1, 201))
        # mix of null and small p-values, with some exact ties
        p = np.where(rng.random(m) < 0.3, rng.random(m) * 1e-3, rng.random(m))
        p[rng.random(m) < 0.1] = 0.01
        phi = float(rng.choice([0.01, 0.05, 0.1, 0.2]))
        bad += not np.array_equal(bh_fdr(p, phi)[0], bh_bruteforce(p, phi))
    elapsed = time.perf_counter() - t0
    ok = hand and bad == 0 and elapsed < 5
    report(2, ok, f"hand case {'ok' if hand else 'wrong'}, {1000 - bad}/1000 vectors match, {elapsed:.1f} s")
    assert ok


def test_criterion_3_auc_oracle(report):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, int(rng.integers(1, 6)) + 1, n).astype(float)
        bad += auc_roc(y, s) != auc_pairs(y, s)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 5
    report(3, ok, f"{1000 - bad}/1000 instances exact, {elapsed:.1f} s")
    assert ok


def test_criterion_4_ridge(report):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst_grad = worst_coef = 0.0
    for k in range(50):
        # n >= 20 with at most one unpenalized covariate keeps the optimum finite;
        # tiny n with several covariates can be separable in the unpenalized part
        n = int(rng.integers(20, 61))
        g = int(rng.integers(1, 120))  # both n > G and G > n
        c = int(rng.integers(0, 2))
        D = rng.normal(size=(n, g)) * rng.uniform(0.5, 2)
        y = (rng.random(n) < expit(D[:, 0])).astype(int)
        y[:2] = [0, 1]
        C = rng.normal(size=(n, c))
        lam = float(10 ** rng.uniform(-1, 1.5))
        cov = CovariateMatrix(C) if c else None
        fit = ridge_logistic_fit(D, y, cov, lam=lam)
        U = np.hstack([np.ones((n, 1)), cov.values if c else np.zeros((n, 0))])
        eta = U @ np.r_[fit.intercept, fit.covariate_coefs] + D @ fit.coefs
        r = y - expit(eta)
        grad = np.r_[U.T @ r, D.T @ r - lam * fit.coefs]
        gamma, beta = ridge_scipy(D, y, U, lam)
        worst_grad = max(worst_grad, float(np.max(np.abs(grad))))
        worst_coef = max(worst_coef, float(np.max(np.abs(np.r_[fit.intercept, fit.covariate_coefs, fit.coefs]
                                                         - np.r_[gamma, beta]))))
    elapsed = time.perf_counter() - t0
    ok = worst_grad <= 1e-6 and worst_coef <= 1e-4 and elapsed < 30
    report(4, ok, f"max gradient {worst_grad:.2e}, max coefficient gap {worst_coef:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_5_null_calibration(report):
    t0 = time.perf_counter()
    # unlinked SNPs: with block LD the 2000 p-values are strongly correlated and
    # the KS spread reflects ~100 effective tests, not calibration
    bundle = simulate_bundle(SimConfig(n=500, p=2000, within_block_r2=0.0, chip_fraction=1.0, seed=0))
    ks, clean = [], 0
    for r in range(50):
        y = np.random.default_rng([5, r]).permutation(bundle.phenotype)
        res = run_sma(bundle.chip, y)
        p = np.array([rec.p_value for rec in res.records if rec.tested])
        ks.append(stats.kstest(p, "uniform").statistic)
        clean += res.n_significant == 0
    elapsed = time.perf_counter() - t0
    ok = max(ks) <= 0.05 and clean >= 45 and elapsed < 120
    report(5, ok, f"max KS {max(ks):.4f}, zero discoveries in {clean}/50, {elapsed:.1f} s")
    assert ok


def test_criterion_6_auc_curve(report):
    t0 = time.perf_counter()
    hits, gains = 0, []
    for seed in range(10):
        b = simulate_bundle(SimConfig(n=1000, p=5000, ell=1, chip_fraction=1.0, seed=seed))
        chip, _ = drop_monomorphic(b.chip)
        res, _ = select_cut_level(chip, b.phenotype, seed=seed)
        aucs = dict(res.candidates)
        hits += res.best_level <= chip.p / 2
        gains.append(max(aucs.values()) - aucs[chip.p])
    elapsed = time.perf_counter() - t0
    ok = hits >= 8 and np.mean(gains) >= 0.02 and elapsed < 900
    report(6, ok, f"argmax at G <= P/2 in {hits}/10, mean gain {np.mean(gains):.4f}, {elapsed:.0f} s")
    assert ok


def test_criterion_7_precision_trend(report):
    t0 = time.perf_counter()
    lines, ok = [], True
    for ell in (1, 5):
        p_sasa, p_sma, r_clus = [], [], []
        for seed in range(10):
            b = simulate_bundle(SimConfig(n=1000, p=5000, ell=ell, chip_fraction=1.0, seed=seed))
            chip, _ = drop_monomorphic(b.chip)
            _, D = select_cut_level(chip, b.phenotype, seed=seed)
            sasa = run_sasa(D, b.phenotype, gm=chip, phi=0.05)
            sma = run_sma(chip, b.phenotype, phi=0.05)
            p_sasa.append(precision(match_results(sasa, b.truth, "sasa", "snp_level")))
            p_sma.append(precision(match_results(sma, b.truth, "sma", "snp_level")))
            r_clus.append(recall(match_results(sasa, b.truth, "sasa", "cluster_level")))
        ps, pm, rc = mean_defined(p_sasa), mean_defined(p_sma), mean_defined(r_clus)
        ok &= ps is not None and pm is not None and ps >= pm
        if ell == 1:
            ok &= rc is not None and rc > 0
        lines.append(f"ell={ell} precision sasa {ps:.4f} vs sma {pm:.4f}, sasa cluster recall {rc:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1200
    report(7, ok, "; ".join(lines) + f", {elapsed:.0f} s")
    assert ok


PROPERTY_TESTS = [
    "test_aggregate.py::TestAggregateRaw::test_sum_preservation_and_row_equivariance",
    "test_aggregate.py::TestStandardize::test_moments_and_idempotence",
    "test_association.py::TestLrt::test_affine_invariance",
    "test_association.py::TestMultiplicity::test_matches_bruteforce",
    "test_association.py::TestMultiplicity::test_monotone_in_phi_and_bonferroni_subset",
    "test_cutlevel.py::TestAuc::test_monotone_invariance_and_reflection",
    "test_cutlevel.py::TestAuc::test_matches_pair_counting",
    "test_cutlevel.py::TestSelectCutLevel::test_deterministic_and_thread_independent",
    "test_constrained_hac.py::TestCut::test_contiguous_and_nested",
    "test_constrained_hac.py::TestBuild::test_deterministic",
    "test_ld.py::TestRSquared::test_symmetry_and_recoding",
    "test_simulate.py::TestConfig::test_intercept_is_log_odds",
    "test_simulate.py::TestGenotypes::test_deterministic",
    "test_simulate.py::TestPhenotype::test_reproducible",
    "test_simulate.py::TestChip::test_bundle_deterministic",
    "test_evaluation.py::TestProperties",
]


def test_criterion_8_property_suites(report):
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
                         cwd=HERE, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    ok = out.returncode == 0 and elapsed < 120
    tail = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr.strip()[-200:]
    report(8, ok, f"{tail}, {elapsed:.1f} s")
    assert ok, out.stdout[-3000:]


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "blockgwas", *args], capture_output=True, text=True)


def _pipeline(out):
    steps = [
        ("simulate", "--n", "500", "--p", "2000", "--seed", "1", "--out-dir", out),
        ("cutlevel", "--genotypes", f"{out}/genotypes.tsv", "--phenotype", f"{out}/phenotype.txt",
         "--seed", "1", "--out-dir", out),
        ("assoc", "--genotypes", f"{out}/genotypes.tsv", "--phenotype", f"{out}/phenotype.txt",
         "--mode", "sasa", "--cutlevel-manifest", f"{out}/cutlevel_manifest.json", "--seed", "1",
         "--out-dir", out),
        ("evaluate", "--results", f"{out}/results_sasa.tsv", "--truth", f"{out}/truth.json",
         "--method", "sasa", "--out-dir", out),
    ]
    codes = [_cli(*s).returncode for s in steps]
    snap = {}
    for f in sorted(Path(out).iterdir()):
        if f.name.endswith("_manifest.json"):
            m = json.loads(f.read_text())
            m.pop("timestamp")
            snap[f.name] = json.dumps(m, sort_keys=True).encode()
        else:
            snap[f.name] = f.read_bytes()
    return codes, snap


def _schema_ok(out):
    validate_tsv(out / "auc_curve.tsv", AUC_HEADER)
    validate_tsv(out / "results_sasa.tsv", RESULTS_HEADER)
    validate_tsv(out / "scores_sasa.tsv", SCORES_HEADER)
    for name in ("simulate", "cutlevel", "assoc_sasa", "evaluate_sasa"):
        m = json.loads((out / f"{name}_manifest.json").read_text())
        keys = {"command", "config", "seeds", "inputs", "outputs", "timestamp", "version"}
        if not keys <= set(m) or not all(Path(p).is_file() for p in m["outputs"]):
            return False
    return True


def test_criterion_9_pipeline_smoke(report, tmp_path):
    t0 = time.perf_counter()
    out = tmp_path / "run"
    codes1, first = _pipeline(str(out))
    schema = _schema_ok(out)
    codes2, second = _pipeline(str(out))
    elapsed = time.perf_counter() - t0
    differing = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    ok = codes1 == [0] * 4 and codes2 == [0] * 4 and schema and not differing and elapsed < 180
    report(9, ok, f"exit codes {codes1}/{codes2}, schema {'valid' if schema else 'invalid'}, "
                  f"{len(first)} files, differing {differing or 'none'}, {elapsed:.1f} s")
    assert ok
