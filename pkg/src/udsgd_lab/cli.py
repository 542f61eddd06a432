"""Command-line entry point: ``udsgd-lab {run,ensemble,analyze,compare,diag}``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration/schema error,
3 model validation error (non-ergodic chain, non-Hurwitz drift, bad mixing
matrix, ...), 4 divergence of a run.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import clt, engine
from .communication import (CommPattern, IntervalSchedule, StepSchedule, contraction_exact,
                            schedule_diagnostics, slem, verify_contraction)
from .config import (ConfigError, build_checkpoints, build_pattern, build_problem, build_run,
                     build_samplers, config_hash, parse_config, replicate_problem)
from .graph import GraphError
from .markov import MarkovError
from .problems import ProblemError, solve_optimum
from .sampling import SamplerError

log = logging.getLogger("udsgd_lab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3, 4

NETWORK_PATTERNS = {
    "centralized": ({"kind": "full_average"}, {"kind": "constant", "K": 1}),
    "lsgd_fp": ({"kind": "full_average"}, {"kind": "constant", "K": 5}),
    "dsgd_vt": ({"kind": "decentralized_time_varying", "count": 5}, {"kind": "constant", "K": 1}),
    "dfl": ({"kind": "decentralized_fixed"}, {"kind": "log_growth", "K": 1}),
}


class Output:
    """Writes CSVs into one directory, each tagged with the config hash."""

    def __init__(self, out_dir: str, cfg: dict):
        self.dir = out_dir
        self.tag = f"config_sha256={config_hash(cfg)} seed={cfg['seed']}"
        os.makedirs(out_dir, exist_ok=True)
        self.files: List[str] = []

    def write(self, name: str, header, rows) -> str:
        path = os.path.join(self.dir, name)
        engine.write_csv(path, header, rows, self.tag)
        self.files.append(path)
        return path

    def matrices(self, name: str, mats: Dict[str, np.ndarray]) -> str:
        d = next(iter(mats.values())).shape[-1]
        manifest = " ".join(mats)
        path = os.path.join(self.dir, name)
        engine.write_csv(path, ["matrix", "row"] + [f"c{j}" for j in range(d)],
                         engine.matrix_block_rows(mats), f"{self.tag} matrices={manifest}")
        self.files.append(path)
        return path


def _mc(cfg):
    return dict(n=cfg["mc"]["n"], trials=cfg["mc"]["trials"], seed=cfg["seed"])


def _report(run_cfg: engine.RunConfig, cfg: dict) -> clt.CovarianceReport:
    opt = run_cfg.optimum or solve_optimum(run_cfg.problem)
    return clt.covariance_report(run_cfg.problem, run_cfg.samplers, run_cfg.step, opt, mc=_mc(cfg))


def _ensemble(run_cfg, cfg, out: Output, prefix: str, threads: int) -> engine.EnsembleStats:
    trials = engine.run_trials(run_cfg, cfg["trials"], threads)
    stats = engine.summarize(trials, engine.prepare(run_cfg).theta_star)
    out.write(f"{prefix}trajectories.csv", engine.TRAJECTORY_COLUMNS, engine.trajectory_rows(trials))
    out.write(f"{prefix}ensemble.csv", engine.ENSEMBLE_COLUMNS, engine.ensemble_rows(stats))
    out.matrices(f"{prefix}covariance.csv", {f"C_n{int(n)}": C for n, C in zip(stats.n, stats.C)})
    return stats


def exp_single_run(cfg, out, threads):
    rc = build_run(cfg)
    t = engine.run(rc, 0)
    out.write("trajectories.csv", engine.TRAJECTORY_COLUMNS, engine.trajectory_rows([t]))
    out.write("summary.csv", ("n", "mse", "pr_mse", "consensus"),
              [(int(t.n[-1]), float(t.mse[-1]), float(t.pr_mse[-1]), float(t.consensus[-1]))])


def exp_ensemble(cfg, out, threads):
    rc = build_run(cfg)
    s = _ensemble(rc, cfg, out, "", threads)
    out.write("summary.csv", ("n", "trials", "mse_mean", "mse_se", "trace_C", "trace_C_se"),
              [(int(s.n[-1]), s.trials, float(s.mse_mean[-1]), float(s.mse_se[-1]),
                float(s.trace_C[-1]), float(s.trace_C_se[-1]))])


def exp_clt_compare(cfg, out, threads):
    rc = build_run(cfg)
    rep = _report(rc, cfg)
    s = _ensemble(rc, cfg, out, "", threads)
    out.matrices("report.csv", rep.matrices())
    cmp = clt.compare(rep, s)
    cols = list(cmp["rows"][0])
    out.write("comparison.csv", cols, [tuple(r[c] for c in cols) for r in cmp["rows"]])
    last = cmp["rows"][-1]
    out.write("summary.csv", ("n", "predicted_trace_V", "empirical_trace_C", "empirical_se",
                              "rel_error", "trace_V_prime"),
              [(last["n"], rep.trace_V, last["empirical_trace"], last["empirical_trace_se"],
                last["rel_error"], rep.trace_V_prime)])


def exp_speedup_sweep(cfg, out, threads):
    base = build_problem(cfg)
    base_specs = build_samplers(cfg, base, cfg["agents"])
    rows = []
    for k in cfg["replicate"]:
        problem = replicate_problem(base, k)
        specs = tuple(s for s in base_specs for _ in range(k))
        rc = engine.RunConfig(problem, specs, build_pattern(cfg, N=problem.N),
                              *_schedules(cfg), horizon=cfg["horizon"],
                              checkpoints=build_checkpoints(cfg), seed=cfg["seed"])
        rep = _report(rc, cfg)
        s = _ensemble(rc, cfg, out, f"N{problem.N}_", threads)
        rows.append((problem.N, k, rep.trace_V, float(s.mse_mean[-1]), float(s.mse_se[-1]),
                     float(s.scaled_mse[-1])))
    out.write("summary.csv", ("N", "replicate", "trace_V", "mse_mean", "mse_se", "scaled_mse"), rows)


def _schedules(cfg, schedule=None):
    sch = cfg["schedule"] if schedule is None else schedule
    return (IntervalSchedule(sch["kind"], sch.get("K", 1)),
            StepSchedule(cfg["step"]["gamma_star"], cfg["step"]["a"]))


def exp_network_independence(cfg, out, threads):
    """The four communication patterns with identical samplers and seeds."""
    problem = build_problem(cfg)
    specs = build_samplers(cfg, problem, cfg["agents"])
    mixing_graph = cfg["pattern"].get("graph", {"kind": "random_connected", "edge_prob": 0.5})
    rows = []
    for name, (pat, sch) in NETWORK_PATTERNS.items():
        if pat["kind"] != "full_average":
            pat = dict(pat, graph=mixing_graph)
        rc = engine.RunConfig(problem, specs, build_pattern(cfg, pat), *_schedules(cfg, sch),
                              horizon=cfg["horizon"], checkpoints=build_checkpoints(cfg),
                              seed=cfg["seed"])
        rep = _report(rc, cfg)
        s = _ensemble(rc, cfg, out, f"{name}_", threads)
        rows.append((name, rep.trace_V, float(s.mse_mean[-1]), float(s.mse_se[-1]),
                     float(s.scaled_mse[-1]), float(s.consensus_mean[-1])))
    ref = rows[0][4]
    out.write("summary.csv", ("pattern", "trace_V", "mse_mean", "mse_se", "scaled_mse",
                              "consensus_mean", "scaled_mse_ratio"),
              [r + (r[4] / ref,) for r in rows])


def exp_sampling_sweep(cfg, out, threads):
    problem = build_problem(cfg)
    pattern = build_pattern(cfg)
    rows = []
    for name, groups in cfg["variants"].items():
        rc = build_run(cfg, groups=groups, pattern=pattern, problem=problem)
        s = _ensemble(rc, cfg, out, f"{name}_", threads)
        rows.append((name, float(s.mse_mean[-1]), float(s.mse_se[-1]),
                     float(s.pr_mse_mean[-1]), float(s.pr_mse_se[-1])))
    out.write("summary.csv", ("variant", "mse_mean", "mse_se", "pr_mse_mean", "pr_mse_se"), rows)


EXPERIMENTS = {
    "single_run": exp_single_run,
    "ensemble": exp_ensemble,
    "clt_compare": exp_clt_compare,
    "speedup_sweep": exp_speedup_sweep,
    "network_independence": exp_network_independence,
    "sampling_sweep": exp_sampling_sweep,
}


def run_experiment(cfg: dict, out_dir: str, threads: int = 1) -> List[str]:
    """Run the configured experiment; returns the files written."""
    out = Output(out_dir, cfg)
    EXPERIMENTS[cfg["experiment"]](cfg, out, threads)
    return out.files


def analyze(cfg: dict, out_dir: str) -> List[str]:
    out = Output(out_dir, cfg)
    rep = _report(build_run(cfg), cfg)
    out.matrices("report.csv", rep.matrices())
    out.write("summary.csv", ("trace_V", "trace_V_prime", "mu"),
              [(rep.trace_V, rep.trace_V_prime, rep.mu)])
    return out.files


def diagnostics(cfg: dict, out_dir: str) -> List[str]:
    out = Output(out_dir, cfg)
    interval, step = _schedules(cfg)
    rep = schedule_diagnostics(step, interval, cfg["horizon"])
    out.write("schedule.csv", ("l", "ratio"), zip(rep.ratio_l.tolist(), rep.ratio.tolist()))
    pattern = build_pattern(cfg)
    exact = contraction_exact(pattern) if pattern.kind != "partial_participation" or \
        _subsets(pattern) <= 5000 else float("nan")
    mc = verify_contraction(pattern, draws=10000, seed=cfg["seed"])
    second = max((slem(W) for W in pattern.matrices), default=float("nan"))
    out.write("diagnostics.csv", ("quantity", "value"), [
        ("tail_ratio", rep.tail_ratio), ("tail_increment_fraction", rep.tail_increment_fraction),
        ("sum_converging", int(rep.sum_converging)), ("ratio_near_one", int(rep.ratio_near_one)),
        ("contraction_exact", exact), ("contraction_mc", mc.value),
        ("lambda2_squared", second ** 2),
    ])
    return out.files


def _subsets(pattern: CommPattern) -> int:
    return math.comb(pattern.N, pattern.participation) ** 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="udsgd-lab", description="UD-SGD simulator and CLT verifier")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [("run", "run the experiment named in the config"),
                        ("ensemble", "run an ensemble of trials"),
                        ("analyze", "closed-form covariance report only"),
                        ("compare", "predicted vs empirical covariance"),
                        ("diag", "schedule and contraction diagnostics")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--trials", type=int, help="override the number of trials")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results unchanged)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with open(args.config) as fh:
            text = fh.read()
        cfg = parse_config(text, base_dir=os.path.dirname(os.path.abspath(args.config)))
        if args.trials is not None:
            cfg["trials"] = args.trials
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.command == "ensemble":
            cfg["experiment"] = "ensemble"
        elif args.command == "compare":
            cfg["experiment"] = "clt_compare"
        if args.command == "analyze":
            files = analyze(cfg, args.out)
        elif args.command == "diag":
            files = diagnostics(cfg, args.out)
        else:
            files = run_experiment(cfg, args.out, max(1, args.threads))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except engine.DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (MarkovError, clt.CLTError, ProblemError, GraphError, SamplerError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
