"""Command-line entry point: ``blockgwas <subcommand> [options]``.

Every subcommand writes its outputs into ``--out-dir`` together with a JSON
run manifest (command, resolved configuration, seeds, SHA-256 digests of the
inputs, output paths, timestamp and tool version). Settings are resolved as
built-in defaults, then the ``--config`` JSON file, then explicit flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, constrained_hac, cutlevel, evaluation, simulate
from .aggregate import aggregate
from .association import DEFAULT_PHI, run_sasa, run_sma
from .genotype_model import (
    CovariateMatrix,
    GenotypeMatrix,
    concat_covariates,
    drop_monomorphic,
    impute_most_frequent,
    load_covariates,
    load_genotypes,
    load_phenotype,
    load_plink_raw,
    pca_covariates,
    write_genotypes,
    write_phenotype,
)
from .ld import DEFAULT_BANDWIDTH, ld_band

logger = logging.getLogger("blockgwas")

AUC_HEADER = ("G", "auc")
RESULTS_HEADER = ("id", "chrom", "pos_first", "pos_last", "statistic", "p", "significant")
DENDROGRAM_HEADER = ("step", "left", "right", "height", "size")

ANALYSIS_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out_dir": ".",
    "format": "tsv",
    "bandwidth": DEFAULT_BANDWIDTH,
    "grid": None,
    "split_fraction": cutlevel.DEFAULT_SPLIT,
    "lambdas": list(cutlevel.DEFAULT_LAMBDAS),
    "n_folds": 5,
    "pcs": 0,
    "phi": DEFAULT_PHI,
    "method": "bh",
}
SIM_KEYS = tuple(f.name for f in fields(simulate.SimConfig))


class CliError(Exception):
    """User-facing failure; the message is printed and the exit code is nonzero."""


# ---------------------------------------------------------------------------
# io helpers


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_digest(path: Path) -> str:
    """SHA-256 of an input; run manifests are hashed without their timestamp."""
    if path.name.endswith("_manifest.json"):
        data = json.loads(path.read_text())
        data.pop("timestamp", None)
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()
    return sha256(path)


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {p}")
    return p


def _write_text(path: Path, writer) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        writer(fh)
    os.replace(tmp, path)
    return path


def validate_tsv(path: Path, header: Sequence[str]) -> int:
    """Check the header and that every row has as many fields; returns the row count."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != tuple(header):
        raise CliError(f"{path}: unexpected header {lines[0] if lines else ''!r}")
    for k, line in enumerate(lines[1:], start=2):
        if len(line.split("\t")) != len(header):
            raise CliError(f"{path}: line {k} has the wrong number of fields")
    return len(lines) - 1


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: Path, data: dict) -> Path:
    return _write_text(path, lambda fh: fh.write(
        json.dumps(data, indent=1, sort_keys=True, default=_json_default) + "\n"))


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                   inputs: Sequence[Path], outputs: Sequence[Path], extra: dict | None = None) -> Path:
    path = out_dir / f"{command}_manifest.json"
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): input_digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    return write_json(path, manifest)


# ---------------------------------------------------------------------------
# argument handling


def _common(sub: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps subparser copies from clobbering values given before the subcommand
    sub.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    sub.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap")
    sub.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory")
    sub.add_argument("--config", default=argparse.SUPPRESS, help="JSON configuration file")


def _genotype_inputs(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--genotypes", required=True, help="genotype file")
    sub.add_argument("--format", choices=("tsv", "plink_raw"), default=None)


def _cutlevel_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--phenotype", help="phenotype file (0/1 per line)")
    sub.add_argument("--covariates", help="covariate TSV with a header line")
    sub.add_argument("--pcs", type=int, default=None, help="append this many genotype PCs")
    sub.add_argument("--bandwidth", type=int, default=None)
    sub.add_argument("--grid", default=None, help="comma-separated cluster counts")
    sub.add_argument("--split-fraction", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockgwas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    _common(parser)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("simulate", help="simulate a genotype/phenotype bundle")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--scenario", choices=simulate.SCENARIOS)
    p.add_argument("--ell", type=int)
    p.add_argument("--within-block-r2", type=float)
    p.add_argument("--maf-range", type=float, nargs=2)
    p.add_argument("--block-size-mean", type=int)
    p.add_argument("--block-size-jitter", type=int)
    p.add_argument("--prevalence", type=float)
    p.add_argument("--chip-fraction", type=float)
    p.add_argument("--target-mse", type=float)
    p.add_argument("--bandwidth", type=int)

    p = subs.add_parser("cluster", help="build the adjacency-constrained hierarchy")
    _common(p)
    _genotype_inputs(p)
    p.add_argument("--bandwidth", type=int, default=None)

    p = subs.add_parser("cutlevel", help="choose the cut level by test AUC")
    _common(p)
    _genotype_inputs(p)
    _cutlevel_options(p)

    p = subs.add_parser("assoc", help="logistic association tests")
    _common(p)
    _genotype_inputs(p)
    _cutlevel_options(p)
    p.add_argument("--mode", choices=("sma", "sasa"), default=None)
    p.add_argument("--phi", type=float, default=None, help="FDR or FWER level")
    p.add_argument("--method", choices=("bh", "bonferroni"), default=None)
    p.add_argument("--cutlevel-manifest", default=None,
                   help="reuse the level chosen by a previous cutlevel run")

    p = subs.add_parser("evaluate", help="score results against simulation truth")
    _common(p)
    p.add_argument("--results", nargs="+", required=True, help="results TSV per replicate")
    p.add_argument("--truth", nargs="+", required=True, help="ground-truth JSON (one, or one per replicate)")
    p.add_argument("--method", choices=evaluation.METHODS, required=True)
    p.add_argument("--unit", choices=evaluation.UNITS, action="append", default=None)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file, then explicit flags."""
    cfg = dict(ANALYSIS_DEFAULTS)
    if getattr(args, "config", None):
        loaded = json.loads(_require(args.config).read_text())
        if not isinstance(loaded, dict):
            raise CliError(f"{args.config}: configuration must be a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config", "verbose"):
            cfg[key] = value
    if isinstance(cfg.get("grid"), str):
        cfg["grid"] = [int(t) for t in cfg["grid"].split(",") if t.strip()]
    return cfg


# ---------------------------------------------------------------------------
# shared loading


def _load_inputs(cfg: dict, need_phenotype: bool = True):
    """Genotypes (imputed, monomorphic columns dropped), phenotype, covariates, inputs used."""
    gpath = _require(cfg["genotypes"])
    inputs = [gpath]
    with open(gpath, "rb") as fh:
        data = fh.read()
    y = None
    if cfg["format"] == "plink_raw":
        gm, y = load_plink_raw(data)
    else:
        gm = load_genotypes(data, "tsv")
    if gm.has_missing:
        gm = impute_most_frequent(gm)
    gm, dropped = drop_monomorphic(gm)
    if dropped:
        logger.info("dropped %d monomorphic SNPs", len(dropped))
    if cfg.get("phenotype"):
        ppath = _require(cfg["phenotype"])
        inputs.append(ppath)
        y = load_phenotype(ppath.read_bytes(), n=gm.n)
    if need_phenotype and y is None:
        raise CliError("a phenotype is required (--phenotype, or PHENOTYPE in a plink_raw file)")
    parts = []
    if cfg.get("covariates"):
        cpath = _require(cfg["covariates"])
        inputs.append(cpath)
        parts.append(load_covariates(cpath.read_bytes(), n=gm.n))
    if cfg.get("pcs"):
        parts.append(pca_covariates(gm, int(cfg["pcs"])))
    cov = concat_covariates(parts) if parts else CovariateMatrix.empty(gm.n)
    return gm, y, cov, inputs, dropped


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _analysis_config(cfg: dict, keys: Sequence[str]) -> dict:
    return {k: cfg.get(k) for k in keys}


def _write_auc(path: Path, result: cutlevel.CutLevelResult) -> Path:
    def body(fh):
        fh.write("\t".join(AUC_HEADER) + "\n")
        for g, auc in result.candidates:
            fh.write(f"{g}\t{auc!r}\n")

    _write_text(path, body)
    validate_tsv(path, AUC_HEADER)
    return path


def _cutlevel_summary(result: cutlevel.CutLevelResult) -> dict:
    return {
        "best_level": result.best_level,
        "best_auc": result.auc_of(result.best_level),
        "lambda_per_level": {str(g): lam for g, lam in sorted(result.lambdas.items())},
        "n_train": int(result.train.size),
        "n_test": int(result.test.size),
    }


CUT_KEYS = ("format", "bandwidth", "grid", "split_fraction", "lambdas", "n_folds", "pcs", "threads")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict) -> list[Path]:
    sim = {k: cfg[k] for k in SIM_KEYS if k in cfg}
    sim_cfg = simulate.SimConfig.from_dict(sim)
    out = _out_dir(cfg)
    bundle = simulate.simulate_bundle(sim_cfg)
    outputs = [
        _write_text(out / "genotypes.tsv", lambda fh: write_genotypes(bundle.chip, fh)),
        _write_text(out / "genotypes_full.tsv", lambda fh: write_genotypes(bundle.full, fh)),
        _write_text(out / "phenotype.txt", lambda fh: write_phenotype(bundle.phenotype, fh)),
        _write_text(out / "truth.json", lambda fh: fh.write(bundle.truth.to_json() + "\n")),
    ]
    write_manifest(out, "simulate", sim_cfg.to_dict(), {"seed": sim_cfg.seed}, [], outputs,
                   {"beta": bundle.truth.beta, "beta0": bundle.truth.beta0})
    return outputs


def cmd_cluster(cfg: dict) -> list[Path]:
    gm, _, _, inputs, dropped = _load_inputs(cfg, need_phenotype=False)
    out = _out_dir(cfg)
    barriers = gm.chromosome_barriers()
    d = ld_band(gm, min(int(cfg["bandwidth"]), max(gm.p - 1, 1)), barriers)
    tree = constrained_hac.build(d, barriers)
    path = _write_text(out / "dendrogram.tsv", tree.write_tsv)
    validate_tsv(path, DENDROGRAM_HEADER)
    write_manifest(out, "cluster", _analysis_config(cfg, ("format", "bandwidth")),
                   {"seed": cfg["seed"]}, inputs, [path],
                   {"n_snps": gm.p, "barriers": barriers, "dropped_monomorphic": dropped})
    return [path]


def cmd_cutlevel(cfg: dict) -> list[Path]:
    gm, y, cov, inputs, dropped = _load_inputs(cfg)
    out = _out_dir(cfg)
    result, _ = cutlevel.select_cut_level(
        gm, y, cov, grid=cfg["grid"], split_fraction=cfg["split_fraction"], seed=cfg["seed"],
        bandwidth=cfg["bandwidth"], lambdas=cfg["lambdas"], n_folds=cfg["n_folds"],
        threads=cfg["threads"],
    )
    path = _write_auc(out / "auc_curve.tsv", result)
    extra = _cutlevel_summary(result)
    extra["dropped_monomorphic"] = dropped
    write_manifest(out, "cutlevel", _analysis_config(cfg, CUT_KEYS), {"seed": cfg["seed"]},
                   inputs, [path], extra)
    return [path]


def _sasa_from_manifest(cfg: dict, gm: GenotypeMatrix, y, inputs: Sequence[Path]):
    mpath = _require(cfg["cutlevel_manifest"])
    manifest = json.loads(mpath.read_text())
    digest = sha256(inputs[0])
    if digest not in manifest.get("inputs", {}).values():
        raise CliError(f"{mpath} was produced from different genotypes than {inputs[0]}")
    used = manifest["config"]
    seed = manifest["seeds"]["seed"]
    g = int(manifest["best_level"])
    _, _, tree = cutlevel.training_tree(gm, y, used["split_fraction"], seed, used["bandwidth"])
    return aggregate(gm, constrained_hac.cut(tree, g)), {"best_level": g, "cutlevel_seed": seed}, mpath


def cmd_assoc(cfg: dict) -> list[Path]:
    mode = cfg.get("mode") or "sma"
    gm, y, cov, inputs, dropped = _load_inputs(cfg)
    out = _out_dir(cfg)
    outputs: list[Path] = []
    extra: dict = {"mode": mode, "dropped_monomorphic": dropped}
    if mode == "sma":
        res = run_sma(gm, y, cov, cfg["phi"], cfg["method"])
    elif cfg.get("cutlevel_manifest"):
        agg, info, mpath = _sasa_from_manifest(cfg, gm, y, inputs)
        inputs = [*inputs, mpath]
        extra.update(info)
        res = run_sasa(agg, y, cov, cfg["phi"], cfg["method"], gm=gm)
    else:
        result, agg = cutlevel.select_cut_level(
            gm, y, cov, grid=cfg["grid"], split_fraction=cfg["split_fraction"], seed=cfg["seed"],
            bandwidth=cfg["bandwidth"], lambdas=cfg["lambdas"], n_folds=cfg["n_folds"],
            threads=cfg["threads"],
        )
        outputs.append(_write_auc(out / "assoc_sasa_auc_curve.tsv", result))
        extra.update(_cutlevel_summary(result))
        res = run_sasa(agg, y, cov, cfg["phi"], cfg["method"], gm=gm)
    path = _write_text(out / f"results_{mode}.tsv", res.write_tsv)
    validate_tsv(path, RESULTS_HEADER)
    summary = write_json(out / f"results_{mode}_summary.json", res.summary())
    outputs += [path, summary]
    keys = ("mode", "phi", "method", *CUT_KEYS) if mode == "sasa" else ("mode", "phi", "method", "format", "pcs")
    write_manifest(out, f"assoc_{mode}", _analysis_config(cfg, keys), {"seed": cfg["seed"]},
                   inputs, outputs, extra)
    return outputs


def cmd_evaluate(cfg: dict) -> list[Path]:
    results = [_require(p) for p in cfg["results"]]
    truths = [_require(p) for p in cfg["truth"]]
    if len(truths) not in (1, len(results)):
        raise CliError("give one truth file, or one per results file")
    if len(truths) == 1:
        truths = truths * len(results)
    method = cfg["method"]
    units = cfg.get("unit") or (["snp_level"] if method == "sma" else list(evaluation.UNITS))
    if isinstance(units, str):
        units = [units]
    out = _out_dir(cfg)
    loaded = []
    for r, t in zip(results, truths):
        truth = simulate.GroundTruth.from_json(t.read_text())
        with open(r) as fh:
            loaded.append((evaluation.read_results_tsv(fh), truth))
    scenarios = {(t.scenario, t.ell) for _, t in loaded}
    if len(scenarios) != 1:
        raise CliError("all replicates must share one scenario and ell")
    scenario, ell = scenarios.pop()
    rows = []
    counts_out = {}
    for unit in units:
        counts = [evaluation.match_results(reg, t, method, unit) for reg, t in loaded]
        rec, prec = evaluation.summarize(counts)
        rows.append((scenario, ell, method, unit, rec, prec, len(counts)))
        counts_out[unit] = [[c.tp, c.fp, c.tn, c.fn] for c in counts]
    path = _write_text(out / f"scores_{method}.tsv", lambda fh: evaluation.write_scores_tsv(rows, fh))
    validate_tsv(path, evaluation.SCORES_HEADER)
    write_manifest(out, f"evaluate_{method}", {"method": method, "units": units},
                   {"seed": cfg["seed"]}, sorted(set(results + truths), key=str), [path],
                   {"counts_tp_fp_tn_fn": counts_out})
    return [path]


COMMANDS = {
    "simulate": cmd_simulate,
    "cluster": cmd_cluster,
    "cutlevel": cmd_cutlevel,
    "assoc": cmd_assoc,
    "evaluate": cmd_evaluate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        outputs = COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"blockgwas {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"blockgwas {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for p in outputs:
        print(p)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
