"""Experiment configuration, instance generation, runs and metric tables.

Config files are JSON with ``"schema": "skippylab.run"`` and ``"version": 1``.
Top-level keys::

    instance   {"generator": name, "params": {...}} or {"path": file}
    eps, zeta  accuracy and failure probability
    mode       "theory" | "practical"
    opt1       "search" (default) | "oracle" (needs policy enumeration)
    overrides  constant overrides (practical mode), e.g. {"n": 200}
    seed       root seed (int)
    repeats    number of runs; run r uses seed + r
    out        output directory
    episode_cap, restarts, iterations   learner budgets

Unknown keys are rejected.
"""
from __future__ import annotations

import csv
import io as _io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import instances, io
from .geometry import compute_constants
from .learner import LearnerConfig, run_skippy_eleanor
from .mdp import optimal_values, validate_mdp
from .oracles import enumerate_policies
from .features import range_table

SCHEMA = "skippylab.run"
VERSION = 1
SUMMARY_HEADER = ["seed", "instance", "v_star", "v_pi", "episodes", "q_updates", "terminated_by"]
SERIES_HEADER = ["seed", "instance", "m", "m_prime", "branch", "sum_sigma", "x", "C"]


@dataclass
class InstanceSpec:
    generator: str | None = None
    params: dict = field(default_factory=dict)
    path: str | None = None

    def __post_init__(self):
        if (self.generator is None) == (self.path is None):
            raise ValueError("instance needs exactly one of 'generator' or 'path'")
        if self.generator is not None and self.generator not in instances.GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.path is not None and not os.path.exists(self.path):
            raise FileNotFoundError(self.path)

    @property
    def name(self):
        return self.generator or os.path.splitext(os.path.basename(self.path))[0]


@dataclass
class RunConfig:
    instance: InstanceSpec
    eps: float = 0.1
    zeta: float = 0.1
    mode: str = "practical"
    opt1: str = "search"
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    repeats: int = 1
    out: str = "runs"
    episode_cap: int = 1_000_000
    restarts: int = 32
    iterations: int = 8

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if doc.pop("schema", SCHEMA) != SCHEMA or doc.pop("version", VERSION) != VERSION:
            raise ValueError(f"config must declare schema {SCHEMA!r} version {VERSION}")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        inst = doc.pop("instance", None)
        if not isinstance(inst, dict):
            raise ValueError("config needs an 'instance' object")
        bad = set(inst) - {"generator", "params", "path"}
        if bad:
            raise ValueError(f"unknown instance keys {sorted(bad)}")
        return cls(InstanceSpec(**inst), **doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        doc = asdict(self)
        doc["instance"] = {k: v for k, v in doc["instance"].items() if v not in (None, {})}
        return {"schema": SCHEMA, "version": VERSION, **doc}


def generate_instance(spec):
    """Build or load an instance and attach its misspecification certificate and range table."""
    if isinstance(spec, dict):
        spec = InstanceSpec(**spec)
    if spec.path is not None:
        mdp, features = io.load(spec.path)
    else:
        mdp, features = instances.make(spec.generator, **spec.params)
    problems = validate_mdp(mdp)
    if problems:
        raise ValueError(f"invalid instance: {problems[:3]}")
    meta = {"name": spec.name, "S": mdp.S, "A": mdp.A, "H": mdp.H, "d": features.d}
    try:
        enum = enumerate_policies(mdp, features)
    except ValueError as exc:
        meta["eta_hat"] = None
        meta["note"] = str(exc)
        meta["ranges"] = None
        return mdp, features, meta
    meta["eta_hat"] = enum.eta
    meta["policies"] = enum.count
    meta["ranges"] = range_table(mdp, features, enum.samples).tolist()
    meta["enumeration"] = enum
    return mdp, features, meta


def _learner_config(cfg, mdp, features, meta, seed, log_path):
    consts = compute_constants(features.d, mdp.H, cfg.eps, cfg.zeta, features.L1, features.L2,
                               mode=cfg.mode, overrides=cfg.overrides or None)
    enum = meta.get("enumeration")
    samples = enum.samples if enum is not None else None
    return LearnerConfig(cfg.eps, cfg.zeta, consts, opt1=cfg.opt1, theta_samples=samples,
                         restarts=cfg.restarts, iterations=cfg.iterations, seed=seed,
                         episode_cap=cfg.episode_cap, log_path=log_path)


def run_once(cfg, seed, mdp=None, features=None, meta=None, out_dir=None):
    """One learner run; returns (summary row dict, LearnerResult or None)."""
    if mdp is None:
        mdp, features, meta = generate_instance(cfg.instance)
    v_star = float(optimal_values(mdp)[0].v[0])
    log_path = os.path.join(out_dir, f"run_{seed}.jsonl") if out_dir else None
    row = {"seed": seed, "instance": cfg.instance.name, "v_star": v_star}
    try:
        lc = _learner_config(cfg, mdp, features, meta, seed, log_path)
        res = run_skippy_eleanor(mdp, features, lc)
    except (AssertionError, RuntimeError) as exc:
        row.update(v_pi=float("nan"), episodes=0, q_updates=0, terminated_by=f"failed: {exc}")
        return row, None
    row.update(v_pi=res.value, episodes=res.episodes, q_updates=res.q_updates,
               terminated_by=res.terminated_by)
    return row, res


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run_experiment(cfg):
    """Run every repeat, writing run logs, summary.csv and series.csv under ``cfg.out``."""
    os.makedirs(cfg.out, exist_ok=True)
    mdp, features, meta = generate_instance(cfg.instance)
    rows, logs = [], []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        row, res = run_once(cfg, seed, mdp, features, meta, cfg.out)
        rows.append(row)
        logs.append((seed, cfg.instance.name, res.log if res else []))
    write_table(os.path.join(cfg.out, "summary.csv"), SUMMARY_HEADER, rows)
    series, _ = emit_metrics(logs)
    write_table(os.path.join(cfg.out, "series.csv"), SERIES_HEADER, series)
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    return rows


def emit_metrics(logs):
    """Flatten run logs into per-iteration series rows and a suboptimality table.

    ``logs`` is an iterable of (seed, instance, records).
    """
    series, final = [], []
    for seed, name, records in logs:
        for rec in records:
            if not isinstance(rec, dict) or "event" not in rec:
                raise ValueError(f"malformed log record {rec!r}")
            if rec["event"] == "iteration":
                series.append({"seed": seed, "instance": name, "m": rec["m"], "m_prime": rec["m_prime"],
                               "branch": rec["branch"], "sum_sigma": rec["sum_sigma"], "x": rec["x"],
                               "C": rec["C"]})
            elif rec["event"] == "final":
                final.append({"seed": seed, "instance": name, "value": rec["value"],
                              "terminated_by": rec["terminated_by"]})
    return series, final


def table_text(header, rows):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_enumeration(meta):
    """Metadata without the (large) enumeration object, ready for JSON."""
    out = {k: v for k, v in meta.items() if k != "enumeration"}
    if isinstance(out.get("ranges"), np.ndarray):
        out["ranges"] = out["ranges"].tolist()
    return out
