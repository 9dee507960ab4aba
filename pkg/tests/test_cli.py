import json
import subprocess
import sys

import pytest

from blockgwas.cli import (
    AUC_HEADER,
    DENDROGRAM_HEADER,
    RESULTS_HEADER,
    input_digest,
    main,
    validate_tsv,
)
from blockgwas.evaluation import SCORES_HEADER


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    rc = main(["simulate", "--n", "200", "--p", "300", "--ell", "2", "--chip-fraction", "0.5",
               "--seed", "3", "--out-dir", str(out)])
    assert rc == 0
    return out


def _load(path):
    return json.loads(path.read_text())


class TestSimulate:
    def test_outputs(self, bundle):
        for name in ("genotypes.tsv", "genotypes_full.tsv", "phenotype.txt", "truth.json",
                     "simulate_manifest.json"):
            assert (bundle / name).is_file()
        m = _load(bundle / "simulate_manifest.json")
        assert m["config"]["n"] == 200 and m["config"]["chip_fraction"] == 0.5
        assert m["seeds"] == {"seed": 3}
        header = (bundle / "genotypes.tsv").read_text().splitlines()[0].split("\t")
        assert len(header) == 150
        assert len((bundle / "phenotype.txt").read_text().split()) == 200

    def test_config_then_flag_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n": 40, "p": 60, "seed": 1, "chip_fraction": 1.0}))
        assert main(["simulate", "--config", str(cfg), "--p", "80", "--out-dir", str(tmp_path)]) == 0
        m = _load(tmp_path / "simulate_manifest.json")
        assert (m["config"]["n"], m["config"]["p"], m["seeds"]["seed"]) == (40, 80, 1)

    def test_invalid_config_value(self, tmp_path, capsys):
        assert main(["simulate", "--n", "40", "--p", "60", "--prevalence", "1.5",
                     "--out-dir", str(tmp_path)]) == 1
        assert "prevalence" in capsys.readouterr().err


class TestAnalysis:
    def test_cluster(self, bundle, tmp_path):
        assert main(["cluster", "--genotypes", str(bundle / "genotypes.tsv"), "--out-dir", str(tmp_path)]) == 0
        assert validate_tsv(tmp_path / "dendrogram.tsv", DENDROGRAM_HEADER) == 149
        m = _load(tmp_path / "cluster_manifest.json")
        assert m["inputs"][str(bundle / "genotypes.tsv")] == input_digest(bundle / "genotypes.tsv")

    def test_pipeline(self, bundle, tmp_path):
        common = ["--genotypes", str(bundle / "genotypes.tsv"), "--phenotype", str(bundle / "phenotype.txt"),
                  "--out-dir", str(tmp_path), "--seed", "3"]
        assert main(["cutlevel", *common, "--grid", "10,40,150"]) == 0
        cut = _load(tmp_path / "cutlevel_manifest.json")
        assert cut["best_level"] in (10, 40, 150)
        assert validate_tsv(tmp_path / "auc_curve.tsv", AUC_HEADER) == 3

        assert main(["assoc", *common, "--mode", "sasa",
                     "--cutlevel-manifest", str(tmp_path / "cutlevel_manifest.json")]) == 0
        assert validate_tsv(tmp_path / "results_sasa.tsv", RESULTS_HEADER) == cut["best_level"]
        summary = _load(tmp_path / "results_sasa_summary.json")
        assert summary["n_tests"] + summary["n_skipped"] == cut["best_level"] and summary["method"] == "bh"

        assert main(["assoc", *common, "--mode", "sma", "--method", "bonferroni"]) == 0
        assert validate_tsv(tmp_path / "results_sma.tsv", RESULTS_HEADER) == 150

        for method in ("sasa", "sma"):
            assert main(["evaluate", "--results", str(tmp_path / f"results_{method}.tsv"),
                         "--truth", str(bundle / "truth.json"), "--method", method,
                         "--out-dir", str(tmp_path)]) == 0
        assert validate_tsv(tmp_path / "scores_sasa.tsv", SCORES_HEADER) == 2
        assert validate_tsv(tmp_path / "scores_sma.tsv", SCORES_HEADER) == 1

    def test_manifest_from_other_genotypes_rejected(self, bundle, tmp_path):
        common = ["--genotypes", str(bundle / "genotypes.tsv"), "--phenotype", str(bundle / "phenotype.txt"),
                  "--out-dir", str(tmp_path)]
        assert main(["cutlevel", *common, "--grid", "20,150"]) == 0
        other = tmp_path / "other.tsv"
        lines = (bundle / "genotypes.tsv").read_text().splitlines()
        other.write_text("\n".join(lines[:-1] + [lines[1]]) + "\n")
        rc = main(["assoc", "--genotypes", str(other), "--phenotype", str(bundle / "phenotype.txt"),
                   "--out-dir", str(tmp_path), "--mode", "sasa",
                   "--cutlevel-manifest", str(tmp_path / "cutlevel_manifest.json")])
        assert rc != 0


class TestErrors:
    def test_missing_input(self, tmp_path, capsys):
        missing = tmp_path / "nope.tsv"
        rc = main(["cluster", "--genotypes", str(missing), "--out-dir", str(tmp_path)])
        assert rc == 2
        assert f"input file not found: {missing}" in capsys.readouterr().err

    def test_missing_phenotype(self, bundle, tmp_path):
        assert main(["cutlevel", "--genotypes", str(bundle / "genotypes.tsv"), "--out-dir", str(tmp_path)]) == 2

    def test_sma_cluster_unit(self, bundle, tmp_path):
        res = tmp_path / "r.tsv"
        res.write_text("\t".join(RESULTS_HEADER) + "\n")
        rc = main(["evaluate", "--results", str(res), "--truth", str(bundle / "truth.json"),
                   "--method", "sma", "--unit", "cluster_level", "--out-dir", str(tmp_path)])
        assert rc != 0

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "blockgwas", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.strip()
