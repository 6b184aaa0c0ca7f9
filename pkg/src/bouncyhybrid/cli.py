"""Command-line front end: ``bouncyhybrid {run,benchmark,gentest,truth}``.

Outputs are CSV (first line ``# schema: <name>/<version>``, then a header row,
floats with 17 significant digits) and JSON (sorted keys, ``schema`` field).
All files of a command are rendered in memory first and then written through
temp-file-and-rename, so a failing command leaves no partial output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analysis
from .config import ConfigError, ExperimentConfig, load_config
from .event_times import BoundViolation
from .samplers import Skeleton, UnsupportedInstance, run_bhs, run_cbhs, run_gibbs_truncated_mvn, run_qbhs

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

MSE_ROWS = (("MSE(mu1)", "mu1"), ("MSE(mu2)", "mu2"), ("MSE(var1)", "var1"), ("MSE(var2)", "var2"))


# ------------------------------------------------------------------ formatting


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def render_csv(schema: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [f"# schema: {schema}/{SCHEMA_VERSION}", ",".join(header)]
    for row in rows:
        lines.append(",".join(c if isinstance(c, str) else fmt(c) for c in row))
    return "\n".join(lines) + "\n"


def render_json(schema: str, payload: dict) -> str:
    body = {"schema": f"{schema}/{SCHEMA_VERSION}", **payload}
    return json.dumps(body, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    """Write every file via a sibling temp file and an atomic rename."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        path = out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


def _coord_names(prefix: str, d: int) -> list[str]:
    return [f"{prefix}_{i}" for i in range(1, d + 1)]


# ------------------------------------------------------------------ running chains


def run_chain(cfg: ExperimentConfig, seed: int, sampler: str | None = None) -> Skeleton | np.ndarray:
    """One chain of the configured sampler; Gibbs returns its sample array."""
    sampler = sampler or cfg.experiment.sampler
    target = cfg.build_target()
    if sampler == "gibbs":
        x0 = np.array(cfg.sampler.initial_position or cfg.target.mean)
        return run_gibbs_truncated_mvn(target, cfg.build_constraints(), cfg.gibbs.n_samples, seed, x0)
    sc = cfg.sampler_config(seed)
    state = cfg.initial_state(seed)
    if sampler == "bhs":
        return run_bhs(target, sc, state)
    if sampler == "cbhs":
        return run_cbhs(target, sc, state)
    return run_qbhs(target, cfg.build_constraints(), cfg.build_P(), cfg.qbhs.a, sc, state)


def map_replications(fn: Callable[[int], object], n: int, jobs: int) -> list:
    """fn(0..n-1) on up to ``jobs`` threads; results in replication order."""
    if jobs <= 1 or n == 1:
        return [fn(r) for r in range(n)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, range(n)))


def _chain_files(cfg: ExperimentConfig, result, runtime: float, seed: int) -> dict[str, str]:
    d = cfg.dim
    xs_names, vs_names = _coord_names("x", d), _coord_names("v", d)
    files = {}
    summary: dict = {"sampler": cfg.experiment.sampler, "seed": seed, "dim": d}
    if isinstance(result, Skeleton):
        rows = [[e.time, *e.position, *e.velocity, e.label] for e in result.events]
        files["skeleton.csv"] = render_csv("skeleton", ["t", *xs_names, *vs_names, "event_kind"], rows)
        chain = analysis.discretize(result, cfg.sampler.delta)
        files["samples.csv"] = render_csv(
            "samples",
            ["t", *xs_names, *vs_names],
            np.column_stack([chain.times, chain.positions, chain.velocities]).tolist(),
        )
        summary["events"] = result.counts()
        summary["T_total"] = result.T_total
        summary["delta"] = chain.delta
        positions = chain.positions
        kept = chain.after_burn_in(cfg.experiment.burn_in).positions
    else:
        positions = result
        files["samples.csv"] = render_csv(
            "samples", ["iteration", *xs_names], [[str(i + 1), *row] for i, row in enumerate(result.tolist())]
        )
        kept = result[int(cfg.experiment.burn_in * len(result)) :]
    summary["N"] = int(len(positions))
    summary["N_after_burn_in"] = int(len(kept))
    constraints = cfg.build_constraints()
    summary["feasible"] = bool(constraints.m == 0 or np.all(constraints.values(positions) >= -1e-8))
    summary["moments"] = analysis.moment_report(kept).as_dict()
    summary["runtime_seconds"] = runtime

    lo, hi = cfg.output.histogram_range
    edges = np.linspace(lo, hi, cfg.output.histogram_bins + 1)
    counts = {name: np.histogram(kept[:, i], bins=edges)[0].tolist() for i, name in enumerate(xs_names)}
    files["histogram.json"] = render_json(
        "histogram", {"edges": edges.tolist(), "counts": counts, "N": int(len(kept))}
    )
    files["summary.json"] = render_json("summary", summary)
    return files


# ------------------------------------------------------------------ commands


def cmd_run(cfg: ExperimentConfig, jobs: int = 1) -> int:
    seed0, n = cfg.experiment.seed, cfg.experiment.replications

    def one(r: int) -> dict[str, str]:
        t0 = time.perf_counter()
        result = run_chain(cfg, seed0 + r)
        return _chain_files(cfg, result, time.perf_counter() - t0, seed0 + r)

    per_rep = map_replications(one, n, jobs)
    files = {}
    for r, rep in enumerate(per_rep):
        prefix = "" if n == 1 else f"rep_{r:04d}/"
        files.update({prefix + k: v for k, v in rep.items()})
    write_outputs(Path(cfg.output.dir), files)
    return EXIT_OK


def benchmark_replication(cfg: ExperimentConfig, r: int) -> tuple[analysis.MomentReport, analysis.MomentReport]:
    """Gibbs and QBHS moment estimates for replication ``r`` (seed = base + r)."""
    seed = cfg.experiment.seed + r
    burn = cfg.experiment.burn_in
    gibbs = run_chain(cfg, seed, "gibbs")
    g_est = analysis.moment_report(gibbs[int(burn * len(gibbs)) :])
    skel = run_chain(cfg, seed, "qbhs")
    chain = analysis.discretize(skel, cfg.sampler.delta).after_burn_in(burn)
    return g_est, analysis.moment_report(chain)


def benchmark(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    target, constraints = cfg.build_target(), cfg.build_constraints()
    truth = analysis.quadrature_truth_truncated_mvn(target, constraints)
    reps = map_replications(lambda r: benchmark_replication(cfg, r), cfg.experiment.replications, jobs)
    gibbs_mse = analysis.mse_report([g for g, _ in reps], truth)
    qbhs_mse = analysis.mse_report([q for _, q in reps], truth)
    return {"truth": truth, "gibbs": gibbs_mse, "qbhs": qbhs_mse, "replications": len(reps)}


def cmd_benchmark(cfg: ExperimentConfig, jobs: int = 1) -> int:
    if cfg.dim != 2:
        raise ConfigError("target.mean: the benchmark needs a two-dimensional target")
    if cfg.experiment.replications < 2:
        raise ConfigError("experiment.replications: the benchmark needs at least 2")
    t0 = time.perf_counter()
    res = benchmark(cfg, jobs)
    rows = [[label, res["gibbs"][key], res["qbhs"][key]] for label, key in MSE_ROWS]
    n_qbhs = analysis.grid_size(cfg.sampler.T_total, cfg.sampler.delta)
    files = {
        "mse_table.csv": render_csv("mse_table", ["quantity", "gibbs", "qbhs"], rows),
        "benchmark.json": render_json(
            "benchmark",
            {
                "replications": res["replications"],
                "truth": res["truth"].as_dict(),
                "mse": {"gibbs": res["gibbs"], "qbhs": res["qbhs"]},
                "samples_per_replication": {"gibbs": cfg.gibbs.n_samples, "qbhs": n_qbhs},
                "runtime_seconds": time.perf_counter() - t0,
            },
        ),
    }
    write_outputs(Path(cfg.output.dir), files)
    return EXIT_OK


def gentest(cfg: ExperimentConfig) -> list[analysis.GeneratorResult]:
    if cfg.experiment.sampler == "gibbs":
        raise ConfigError("experiment.sampler: the generator test needs a PDMP sampler")
    fns = (
        [analysis.TestFunction.parse(t, cfg.dim) for t in cfg.gentest.functions]
        if cfg.gentest.functions is not None
        else analysis.default_suite(cfg.dim)
    )
    skeleton = run_chain(cfg, cfg.experiment.seed)
    return analysis.generator_invariance_test(
        skeleton, cfg.build_target(), fns, cfg.sampler.delta, cfg.experiment.burn_in
    )


def cmd_gentest(cfg: ExperimentConfig) -> int:
    results = gentest(cfg)
    threshold = cfg.gentest.threshold
    worst = max(abs(r.z) for r in results)
    payload = {
        "threshold": threshold,
        "passed": worst <= threshold,
        "max_abs_z": worst,
        "results": [{"function": r.name, "mean": r.mean, "stderr": r.stderr, "z": r.z} for r in results],
    }
    write_outputs(Path(cfg.output.dir), {"gentest.json": render_json("gentest", payload)})
    return EXIT_OK if worst <= threshold else EXIT_CHECK_FAILED


def cmd_truth(cfg: ExperimentConfig) -> int:
    rep = analysis.quadrature_truth_truncated_mvn(cfg.build_target(), cfg.build_constraints())
    text = render_json("truth", {"moments": rep.as_dict()})
    write_outputs(Path(cfg.output.dir), {"truth.json": text})
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bouncyhybrid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run the configured sampler and write skeleton, samples, histogram and summary"),
        ("benchmark", "replicated Gibbs vs QBHS comparison; writes the MSE table"),
        ("gentest", "generator invariance z-scores; exit 1 if any exceeds the threshold"),
        ("truth", "quadrature moments of the configured (truncated) bivariate Gaussian"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for replications")
        p.add_argument("--seed-override", type=int, default=None, help="replace experiment.seed")
        p.add_argument("--out-dir", default=None, help="replace output.dir")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            if args.seed_override < 0:
                raise ConfigError("--seed-override: must be non-negative")
            cfg = cfg.with_seed(args.seed_override)
        if args.out_dir is not None:
            cfg = cfg.with_out_dir(args.out_dir)
        if args.command == "run":
            return cmd_run(cfg, args.jobs)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, args.jobs)
        if args.command == "gentest":
            return cmd_gentest(cfg)
        return cmd_truth(cfg)
    except (ConfigError, UnsupportedInstance, BoundViolation, ValueError, analysis.QuadratureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
