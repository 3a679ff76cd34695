"""Command-line driver: generate synthetic catalogs, run single experiments,
sweep model/seed grids into comparison tables, and evaluate checkpoints.

Exit codes: 0 success, 1 run failure, 2 config/validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio
from .config import (
    DEFAULT_CONFIG,
    ExperimentConfig,
    load_experiment_config,
    model_label,
)
from .env import SynthSpec, synth_generate
from .errors import BanditSimError, ConfigurationError
from .metrics import log_loss, pr_auc, rce, roc_auc
from .posterior import point_predict
from .seeding import derive_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_FAILURE = 2

# the offline comparison grid: (cell name, config overrides)
TABLE1_CELLS: list[tuple[str, dict[str, str]]] = [
    ("greedy", {"policy.kind": "greedy", "sampler.kind": "sgd_ensemble",
                "sampler.member_count": "1"}),
    ("epsilon_greedy", {"policy.kind": "epsilon_greedy", "sampler.kind": "sgd_ensemble",
                        "sampler.member_count": "1"}),
    ("dropout_ts", {"policy.kind": "thompson", "sampler.kind": "mc_dropout"}),
    ("dropout_ucb", {"policy.kind": "ucb", "sampler.kind": "mc_dropout"}),
    ("bootstrap_ts", {"policy.kind": "thompson", "sampler.kind": "bootstrap"}),
    ("bootstrap_ucb", {"policy.kind": "ucb", "sampler.kind": "bootstrap"}),
    ("sgd_ucb", {"policy.kind": "ucb", "sampler.kind": "sgd_ensemble"}),
    ("multihead_ucb", {"policy.kind": "ucb", "sampler.kind": "multihead"}),
    ("multihead_sgd_ucb", {"policy.kind": "ucb", "sampler.kind": "multihead_sgd"}),
    ("hybrid_ts", {"policy.kind": "thompson", "sampler.kind": "hybrid"}),
    ("hybrid_ucb", {"policy.kind": "ucb", "sampler.kind": "hybrid"}),
]


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("BSIM_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set needs key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} already exists and is not empty (use --force)", file=sys.stderr)
        return EXIT_CONFIG_FAILURE
    spec = SynthSpec(users=args.users, ads=args.ads, user_dim=args.user_dim,
                     ad_dim=args.ad_dim, base_rate=args.base_rate, seed=args.seed)
    catalog = synth_generate(spec)
    written = dataio.write_catalog_csvs(catalog, out)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n",
                                         encoding="utf-8")
    for path in written:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def _table_row(label: str, uplift: float, test_pr_auc: float | None) -> str:
    pr = "n/a" if test_pr_auc is None else f"{test_pr_auc:.4f}"
    return f"{label:<22} {uplift:>10.2f} {pr:>10}"


def _table_header() -> str:
    return f"{'Model':<22} {'CTR (+%)':>10} {'PR-AUC':>10}"


def cmd_simulate(args) -> int:
    experiment = load_experiment_config(args.config, overrides=_parse_overrides(args.set),
                                        cli_seed=args.seed, cli_out=args.out, force=args.force)
    if args.dry_run:
        print(f"config ok: {model_label(experiment)} "
              f"(digest {dataio.canonical_config_digest(experiment)[:12]})")
        return EXIT_OK
    from .loop import run_experiment

    output = run_experiment(experiment)
    print(_table_header())
    print(_table_row(model_label(experiment), output.report.ctr_uplift_pct,
                     output.report.test_pr_auc))
    if experiment.output_dir:
        print(f"artifacts: {experiment.output_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- sweep


def derive_run_seed(master_seed: int, cell_index: int, seed_index: int) -> int:
    """Splittable per-run seed: a sweep cell reruns standalone with this seed."""
    return derive_seed(master_seed, "sweep", cell_index, seed_index)


def derive_world_seed(master_seed: int, seed_index: int) -> int:
    """One synthetic world per seed index, shared by every cell for pairing."""
    return derive_seed(master_seed, "world", seed_index)


def build_sweep_run_config(base: dict, cell_index: int, cell_overrides: dict[str, str],
                           seed_index: int, master_seed: int,
                           out_dir: str | None, force: bool = False) -> ExperimentConfig:
    overrides = dict(cell_overrides)
    env = base.get("environment", {}) if isinstance(base, dict) else {}
    if env.get("kind", "synthetic") == "synthetic" and env.get("seed") is None:
        overrides.setdefault("environment.seed", str(derive_world_seed(master_seed, seed_index)))
    if env.get("holdout_seed") is None:
        overrides.setdefault("environment.holdout_seed",
                             str(derive_world_seed(master_seed, seed_index) + 1))
    if out_dir is None:
        # never let every run inherit one shared output_dir from the base config
        overrides.setdefault("output_dir", "null")
    return load_experiment_config(base, overrides=overrides,
                                  cli_seed=derive_run_seed(master_seed, cell_index, seed_index),
                                  cli_out=out_dir, force=force)


def _sweep_worker(payload: tuple) -> tuple[str, int, dict | None, str | None]:
    cell_name, experiment = payload
    from .loop import run_experiment

    try:
        output = run_experiment(experiment)
        r = output.report
        return cell_name, experiment.seed, {
            "cumulative_ctr": r.cumulative_ctr,
            "ctr_uplift_pct": r.ctr_uplift_pct,
            "random_policy_ctr": r.random_policy_ctr,
            "test_pr_auc": r.test_pr_auc,
            "model": r.metadata["model"],
        }, None
    except Exception as exc:  # a failed run must not kill the sweep
        logger.exception("sweep run %s/seed %d failed", cell_name, experiment.seed)
        return cell_name, experiment.seed, None, f"{type(exc).__name__}: {exc}"


def collect_sweep_runs(base_config: dict, cells: list[tuple[str, dict[str, str]]],
                       seeds: list[int], master_seed: int, out_dir: str | None = None,
                       jobs: int = 1, force: bool = False):
    """Run the cells x seeds grid and return per-run results:
    (list of (cell_name, seed_index, payload), failures)."""
    tasks = []
    indices = []
    config_failures: list[str] = []
    for ci, (name, cell_over) in enumerate(cells):
        for si, _ in enumerate(seeds):
            run_out = None
            if out_dir is not None:
                run_out = str(Path(out_dir) / name / f"seed_{si}")
            try:
                tasks.append((name, build_sweep_run_config(base_config, ci, cell_over, si,
                                                           master_seed, run_out, force=force)))
                indices.append((name, si))
            except ConfigurationError as exc:
                config_failures.append(f"{name} (seed index {si}): {exc}")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, tasks))
    else:
        results = [_sweep_worker(t) for t in tasks]

    runs = []
    failures = list(config_failures)
    for (name, si), (cell_name, seed, payload, error) in zip(indices, results):
        if error is not None:
            failures.append(f"{cell_name} (seed {seed}): {error}")
        else:
            runs.append((name, si, payload))
    return runs, failures


def run_sweep(base_config: dict, cells: list[tuple[str, dict[str, str]]], seeds: list[int],
              master_seed: int, out_dir: str | None, jobs: int = 1, force: bool = False):
    """Cross product of cells x seeds; returns (aggregated rows, failures)."""
    runs, failures = collect_sweep_runs(base_config, cells, seeds, master_seed,
                                        out_dir=out_dir, jobs=jobs, force=force)
    by_cell: dict[str, list[dict]] = {}
    for cell_name, _, payload in runs:
        by_cell.setdefault(cell_name, []).append(payload)

    rows = []
    for name, _ in cells:
        runs = by_cell.get(name, [])
        if not runs:
            continue
        uplift = np.array([r["ctr_uplift_pct"] for r in runs])
        ctr = np.array([r["cumulative_ctr"] for r in runs])
        aucs = [r["test_pr_auc"] for r in runs if r["test_pr_auc"] is not None]
        rows.append({
            "cell": name,
            "model": runs[0]["model"],
            "runs": len(runs),
            "ctr_uplift_mean": float(uplift.mean()),
            "ctr_uplift_std": float(uplift.std(ddof=1)) if len(runs) > 1 else 0.0,
            "cumulative_ctr_mean": float(ctr.mean()),
            "cumulative_ctr_std": float(ctr.std(ddof=1)) if len(runs) > 1 else 0.0,
            "test_pr_auc_mean": float(np.mean(aucs)) if aucs else None,
            "test_pr_auc_std": float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0,
        })
    return rows, failures


def format_sweep_table(rows: list[dict]) -> str:
    lines = [f"{'Model':<22} {'CTR (+%)':>18} {'PR-AUC':>18}"]
    lines.append(f"{'Random':<22} {'0':>18} {'0.5':>18}")
    for row in rows:
        up = f"{row['ctr_uplift_mean']:.2f} ± {row['ctr_uplift_std']:.2f}"
        if row["test_pr_auc_mean"] is None:
            pr = "n/a"
        else:
            pr = f"{row['test_pr_auc_mean']:.4f} ± {row['test_pr_auc_std']:.4f}"
        lines.append(f"{row['model']:<22} {up:>18} {pr:>18}")
    return "\n".join(lines)


def write_sweep_csv(rows: list[dict], path) -> None:
    cols = ["cell", "model", "runs", "ctr_uplift_mean", "ctr_uplift_std",
            "cumulative_ctr_mean", "cumulative_ctr_std", "test_pr_auc_mean", "test_pr_auc_std"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        fh.write("random,Random,0,0.0,0.0,,,0.5,0.0\n")
        for row in rows:
            fh.write(",".join("" if row[c] is None else str(row[c]) for c in cols) + "\n")


def cmd_sweep(args) -> int:
    if args.config is not None:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    else:
        base = {}
    for key, value in _parse_overrides(args.set).items():
        # fold --set into the base dict so every run inherits it
        parts = key.split(".")
        node = base
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        try:
            node[parts[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[parts[-1]] = value

    if args.cells is not None:
        spec = json.loads(Path(args.cells).read_text(encoding="utf-8"))
        cells = [(c["name"], {k: json.dumps(v) if not isinstance(v, str) else v
                              for k, v in c.get("overrides", {}).items()}) for c in spec]
    else:
        cells = TABLE1_CELLS

    seeds = list(range(args.num_seeds)) if args.seeds is None else \
        [int(s) for s in args.seeds.split(",")]
    load_experiment_config(base)  # validate the base once, before any work

    rows, failures = run_sweep(base, cells, seeds, master_seed=args.seed,
                               out_dir=args.out, jobs=args.jobs, force=args.force)
    table = format_sweep_table(rows)
    print(table)
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_sweep_csv(rows, Path(args.out) / "sweep.csv")
        (Path(args.out) / "sweep.txt").write_text(table + "\n", encoding="utf-8")
    if failures:
        print(f"{len(failures)} run(s) failed:", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    from .config import build_catalog
    from .errors import CompatibilityError

    experiment = load_experiment_config(args.config)
    catalog = build_catalog(experiment)
    sampler = dataio.load_checkpoint(args.checkpoint)
    expected = sampler.config.net_config.input_dim
    if expected != catalog.context_dim:
        raise CompatibilityError(
            f"checkpoint expects {expected}-dim contexts, catalog provides {catalog.context_dim}"
        )
    if args.split == "holdout":
        cells = np.argwhere(catalog.holdout)
    else:
        cells = np.argwhere(np.ones_like(catalog.holdout, dtype=bool))
    if cells.size == 0:
        print("error: no cells to evaluate (empty holdout?)", file=sys.stderr)
        return EXIT_CONFIG_FAILURE
    X = np.hstack([catalog.user_features[cells[:, 0]], catalog.ad_features[cells[:, 1]]])
    scores = point_predict(sampler, X)
    labels = catalog.labels[cells[:, 0], cells[:, 1]]
    values = {"cells": len(cells), "split": args.split}
    for name, fn in (("pr_auc", pr_auc), ("roc_auc", roc_auc), ("rce", rce),
                     ("log_loss", log_loss)):
        try:
            values[name] = round(float(fn(scores, labels)), 6)
        except BanditSimError:
            values[name] = None
    print(json.dumps(values, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="banditsim",
        description="Contextual-bandit CTR simulation: generate catalogs, run "
                    "self-training experiments, sweep model grids, evaluate checkpoints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic catalog as CSV files")
    gen.add_argument("--users", type=int, default=120)
    gen.add_argument("--ads", type=int, default=300)
    gen.add_argument("--user-dim", type=int, default=DEFAULT_CONFIG["environment"]["user_dim"])
    gen.add_argument("--ad-dim", type=int, default=DEFAULT_CONFIG["environment"]["ad_dim"])
    gen.add_argument("--base-rate", type=float, default=DEFAULT_CONFIG["environment"]["base_rate"])
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    sim = sub.add_parser("simulate", help="run one experiment from a config file")
    sim.add_argument("config", nargs="?", default=None,
                     help="JSON config; omitted runs the reference recipe")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", default=None)
    sim.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config key (dotted path)")
    sim.add_argument("--force", action="store_true")
    sim.add_argument("--dry-run", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="run a model/seed grid and print a comparison table")
    sw.add_argument("config", nargs="?", default=None)
    sw.add_argument("--cells", default=None,
                    help="JSON list of {name, overrides}; default is the 12-row model table")
    sw.add_argument("--seeds", default=None, help="comma-separated seed indices")
    sw.add_argument("--num-seeds", type=int, default=10)
    sw.add_argument("--seed", type=int, default=0, help="master seed for derivation")
    sw.add_argument("--set", action="append", metavar="KEY=VALUE")
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--out", default=None)
    sw.add_argument("--force", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    ev = sub.add_parser("evaluate", help="score a checkpoint on held-out catalog cells")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True,
                    help="experiment config describing the environment")
    ev.add_argument("--split", choices=("holdout", "all"), default="holdout")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_FAILURE
    except BanditSimError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
