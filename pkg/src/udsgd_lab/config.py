"""Experiment configuration: YAML text -> validated, default-filled dict ->
engine objects.

Every config names an ``experiment`` and a ``seed``; there is no implicit
entropy. Objects built from the config (datasets, agent graphs, mixing
graphs) draw from streams keyed by ``(seed, SETUP_KEY, ...)`` so they never
overlap with the per-trial streams of the engine.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import jsonschema
import numpy as np
import yaml

from . import graph as graphs
from .communication import CommPattern, IntervalSchedule, StepSchedule, mh_matrix
from .engine import RunConfig, log_checkpoints
from .problems import (Partition, Problem, logistic_problem, parse_libsvm, partition,
                       quadratic_problem, synthetic_classification)
from .sampling import SamplerSpec

EXPERIMENTS = ("single_run", "ensemble", "clt_compare", "speedup_sweep",
               "network_independence", "sampling_sweep")
SETUP_KEY = 1 << 30


class ConfigError(ValueError):
    pass


_graph = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["path", "ring", "complete", "random_connected", "file"]},
        "edge_prob": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "path": {"type": "string"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_sampler = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["iid", "shuffle", "srw", "nbrw", "srrw"]},
        "graph": _graph,
        "alpha": {"type": "number", "minimum": 0},
        "b": {"type": "number", "exclusiveMinimum": 0.5, "maximum": 1},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_agents = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "properties": {"count": {"type": "integer", "minimum": 1}, "sampler": _sampler},
        "required": ["count", "sampler"],
        "additionalProperties": False,
    },
}

SCHEMA = {
    "type": "object",
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer", "minimum": 0},
        "N": {"type": "integer", "minimum": 1},
        "problem": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["quadratic", "logistic"]},
                "d": {"type": "integer", "minimum": 1},
                "points_per_agent": {"type": "integer", "minimum": 1},
                "A": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "eig_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                              "minItems": 2, "maxItems": 2},
                "center_scale": {"type": "number", "minimum": 0},
                "n_points": {"type": "integer", "minimum": 1},
                "separation": {"type": "number"},
                "data_file": {"type": "string"},
                "partition": {"enum": ["even", "dirichlet"]},
                "dirichlet_alpha": {"type": "number", "exclusiveMinimum": 0},
                "kappa": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "sampler": _sampler,
        "agents": _agents,
        "pattern": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["full_average", "partial_participation", "decentralized_fixed",
                                  "decentralized_time_varying"]},
                "participation": {"type": "integer", "minimum": 1},
                "graph": _graph,
                "count": {"type": "integer", "minimum": 1},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "schedule": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["constant", "log_growth", "loglog_growth"]},
                "K": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "step": {
            "type": "object",
            "properties": {
                "gamma_star": {"type": "number", "exclusiveMinimum": 0},
                "a": {"type": "number", "exclusiveMinimum": 0.5, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "horizon": {"type": "integer", "minimum": 1},
        "checkpoints": {"oneOf": [
            {"type": "integer", "minimum": 1},
            {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        ]},
        "trials": {"type": "integer", "minimum": 1},
        "replicate": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "variants": {"type": "object", "additionalProperties": _agents, "minProperties": 1},
        "mc": {
            "type": "object",
            "properties": {"n": {"type": "integer", "minimum": 1000},
                           "trials": {"type": "integer", "minimum": 50}},
            "additionalProperties": False,
        },
    },
    "required": ["experiment", "seed", "problem", "pattern"],
    "additionalProperties": False,
}

DEFAULTS = {
    "horizon": 10000,
    "checkpoints": 20,
    "trials": 20,
    "schedule": {"kind": "constant", "K": 1},
    "step": {"gamma_star": 1.0, "a": 1.0},
    "mc": {"n": 100000, "trials": 100},
}

PROBLEM_DEFAULTS = {
    "quadratic": {"d": 2, "points_per_agent": 5, "eig_range": [1.0, 2.0], "center_scale": 1.0},
    "logistic": {"d": 5, "n_points": 200, "separation": 1.0, "partition": "even",
                 "dirichlet_alpha": 0.5, "kappa": 1.0},
}


def _key_path(err: jsonschema.ValidationError) -> str:
    path = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        return f"{path}: unknown key(s) {', '.join(map(repr, extra))}"
    if err.validator == "required":
        return f"{path}: {err.message}"
    return f"{path}: {err.message}"


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_config(text: str, base_dir: Optional[str] = None) -> Dict[str, Any]:
    """Parse and validate YAML config text; returns the config with every
    default filled in."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        raise ConfigError("; ".join(_key_path(e) for e in errors))
    cfg = _merge(DEFAULTS, raw)
    cfg["problem"] = _merge(PROBLEM_DEFAULTS[cfg["problem"]["kind"]], cfg["problem"])
    if ("sampler" in cfg) == ("agents" in cfg) and cfg["experiment"] != "sampling_sweep":
        raise ConfigError("give exactly one of 'sampler' (with N) or 'agents'")
    if "sampler" in cfg:
        if "N" not in cfg:
            raise ConfigError("'sampler' requires 'N'")
        cfg["agents"] = [{"count": cfg["N"], "sampler": cfg.pop("sampler")}]
    if cfg["experiment"] == "sampling_sweep":
        if "variants" not in cfg:
            raise ConfigError("sampling_sweep requires 'variants'")
        sizes = {sum(g["count"] for g in v) for v in cfg["variants"].values()}
        if len(sizes) != 1:
            raise ConfigError("variants: every variant must have the same number of agents")
        cfg.setdefault("agents", next(iter(cfg["variants"].values())))
    N = sum(g["count"] for g in cfg["agents"])
    if cfg.get("N", N) != N:
        raise ConfigError(f"N = {cfg['N']} but agent groups sum to {N}")
    cfg["N"] = N
    if cfg["experiment"] == "speedup_sweep":
        cfg.setdefault("replicate", [1, 2])
    for src in _graph_specs(cfg):
        if src["kind"] == "random_connected" and "edge_prob" not in src:
            raise ConfigError("random_connected graph needs 'edge_prob'")
        if src["kind"] == "file":
            if "path" not in src:
                raise ConfigError("file graph needs 'path'")
            src["path"] = _resolve(src["path"], base_dir)
    if "data_file" in cfg["problem"]:
        cfg["problem"]["data_file"] = _resolve(cfg["problem"]["data_file"], base_dir)
    if cfg["step"]["a"] != 1.0 and cfg["schedule"]["kind"] != "constant":
        raise ConfigError("schedule: growing intervals require step.a = 1")
    pat = cfg["pattern"]
    if pat["kind"] == "partial_participation" and "participation" not in pat:
        raise ConfigError("pattern: partial_participation needs 'participation'")
    if pat["kind"].startswith("decentralized") and "graph" not in pat:
        raise ConfigError(f"pattern: {pat['kind']} needs 'graph'")
    return cfg


def _resolve(path: str, base_dir: Optional[str]) -> str:
    full = path if os.path.isabs(path) or base_dir is None else os.path.join(base_dir, path)
    if not os.path.exists(full):
        raise ConfigError(f"referenced file does not exist: {path}")
    return full


def _graph_specs(cfg):
    groups = list(cfg["agents"]) + [g for v in cfg.get("variants", {}).values() for g in v]
    for g in groups:
        if "graph" in g["sampler"]:
            yield g["sampler"]["graph"]
    if "graph" in cfg["pattern"]:
        yield cfg["pattern"]["graph"]


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def setup_seed(cfg: dict, *key: int) -> int:
    ss = np.random.SeedSequence(cfg["seed"], spawn_key=(SETUP_KEY, *key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def build_graph(spec: dict, n: int, seed: int) -> graphs.Graph:
    if spec["kind"] == "file":
        with open(spec["path"]) as fh:
            g = graphs.load_edge_list(fh.read())
        if g.num_nodes != n:
            raise ConfigError(f"graph file {spec['path']} has {g.num_nodes} nodes, need {n}")
        return g
    return graphs.generate(spec["kind"], n, spec.get("edge_prob"), seed=seed)


def build_problem(cfg: dict) -> Problem:
    p = cfg["problem"]
    N = cfg["N"]
    rng = np.random.default_rng(setup_seed(cfg, 0))
    if p["kind"] == "quadratic":
        d = p["d"]
        if "A" in p:
            A = np.asarray(p["A"], dtype=float)
        else:
            Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
            A = (Q * np.linspace(*p["eig_range"], d)) @ Q.T
            A = 0.5 * (A + A.T)
        centers = [p["center_scale"] * rng.normal(size=(p["points_per_agent"], d)) for _ in range(N)]
        return quadratic_problem(A, centers)
    if "data_file" in p:
        with open(p["data_file"]) as fh:
            data = parse_libsvm(fh.read())
    else:
        data = synthetic_classification(p["n_points"], p["d"], p["separation"],
                                        seed=setup_seed(cfg, 1))
    part = partition(len(data.labels), N, p["partition"], seed=setup_seed(cfg, 2),
                     labels=data.labels, alpha_dir=p["dirichlet_alpha"])
    return logistic_problem(data, part, p["kappa"])


def build_samplers(cfg: dict, problem: Problem, groups: List[dict]) -> Tuple[SamplerSpec, ...]:
    """Agent ``i`` in group order; walk graphs are generated per agent with as
    many nodes as the agent holds data points. Graph seeds depend only on the
    agent index, so variants sharing a graph spec share graphs."""
    specs = []
    i = 0
    for grp in groups:
        s = grp["sampler"]
        for _ in range(grp["count"]):
            g = None
            if s["kind"] in ("srw", "nbrw", "srrw"):
                if "graph" not in s:
                    raise ConfigError(f"agents: {s['kind']} sampler needs 'graph'")
                g = build_graph(s["graph"], problem.local_size(i), setup_seed(cfg, 3, i))
            specs.append(SamplerSpec(s["kind"], g, s.get("alpha", 20.0), s.get("b", 0.8)))
            i += 1
    if i != problem.N:
        raise ConfigError(f"{i} samplers for {problem.N} agents")
    return tuple(specs)


def build_pattern(cfg: dict, pat: Optional[dict] = None, N: Optional[int] = None) -> CommPattern:
    pat = cfg["pattern"] if pat is None else pat
    N = cfg["N"] if N is None else N
    kind = pat["kind"]
    if kind == "full_average":
        return CommPattern(kind, N)
    if kind == "partial_participation":
        return CommPattern(kind, N, participation=pat["participation"])
    count = 1 if kind == "decentralized_fixed" else pat.get("count", 5)
    mats = tuple(mh_matrix(build_graph(pat["graph"], N, setup_seed(cfg, 4, c))) for c in range(count))
    return CommPattern(kind, N, matrices=mats)


def build_checkpoints(cfg: dict, horizon: Optional[int] = None) -> Tuple[int, ...]:
    horizon = cfg["horizon"] if horizon is None else horizon
    cp = cfg["checkpoints"]
    if isinstance(cp, int):
        return log_checkpoints(horizon, cp)
    cps = tuple(sorted(set(int(c) for c in cp)))
    if cps[-1] > horizon:
        raise ConfigError(f"checkpoints: {cps[-1]} exceeds horizon {horizon}")
    return cps


def build_run(cfg: dict, groups: Optional[List[dict]] = None, pattern: Optional[CommPattern] = None,
              problem: Optional[Problem] = None) -> RunConfig:
    problem = build_problem(cfg) if problem is None else problem
    samplers = build_samplers(cfg, problem, cfg["agents"] if groups is None else groups)
    return RunConfig(
        problem=problem, samplers=samplers,
        pattern=build_pattern(cfg) if pattern is None else pattern,
        schedule=IntervalSchedule(cfg["schedule"]["kind"], cfg["schedule"].get("K", 1)),
        step=StepSchedule(cfg["step"]["gamma_star"], cfg["step"]["a"]),
        horizon=cfg["horizon"], checkpoints=build_checkpoints(cfg), seed=cfg["seed"],
    )


def replicate_problem(problem: Problem, k: int) -> Problem:
    """Every agent duplicated ``k`` times (copies share the data points)."""
    if k == 1:
        return problem
    blocks = [ix for ix in problem.partition.agent_indices for _ in range(k)]
    return Problem(problem.kind, problem.data, Partition(tuple(blocks)), problem.labels,
                   problem.A, problem.kappa)
