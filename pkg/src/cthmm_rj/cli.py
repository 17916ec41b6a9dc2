"""Command-line interface: simulate, fit, cluster-fit, summarize."""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .chain import k_posterior, run_chain
from .clustering import run_clustering
from .data import ObservationSet
from .emission import EmissionFamily
from .errors import CTHMMError, StructuralError
from .experiments import ScenarioConfig, available_presets, generate_scenario, load_preset
from .model import ModelState, PriorConfig
from .summary import (TraceWriter, count_posterior, membership_summary, read_trace, state_count_table,
                      summarize_records)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "pandas"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(df, path) -> None:
    df.to_csv(path, index=False, float_format="%.17g")


def _require_seed(args):
    if args.seed is None:
        raise UsageError("--seed is required: every run must be reproducible from an explicit seed")


# ---------------------------------------------------------------- configs

def load_scenario(args) -> ScenarioConfig:
    if bool(args.preset) == bool(args.config):
        raise UsageError("give exactly one of --preset or --config")
    if args.preset:
        return load_preset(args.preset)
    try:
        d = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    try:
        return ScenarioConfig.from_dict(d)
    except TypeError as exc:
        raise StructuralError(f"{args.config}: {exc}") from exc


def model_config(path) -> dict:
    """Model config JSON: ``{"family", "sigma", "prior", "theta_init"}``; a scenario file is also accepted."""
    if path is None:
        return {"family": "gaussian", "sigma": 1.0, "prior": {}}
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(d, dict):
        raise StructuralError(f"{path}: top level must be an object")
    allowed = {"family", "sigma", "prior", "theta_init"}
    if "components" in d:
        d = {k: d[k] for k in allowed if k in d}
    unknown = set(d) - allowed
    if unknown:
        raise StructuralError(f"{path}: unknown fields {sorted(unknown)}")
    cfg = {"family": d.get("family", "gaussian"), "sigma": float(d.get("sigma", 1.0)), "prior": d.get("prior", {})}
    if "theta_init" in d:
        cfg["theta_init"] = d["theta_init"]
    _build_model(cfg)
    return cfg


def _build_model(cfg: dict):
    try:
        fam = EmissionFamily(cfg["family"], cfg["sigma"])
    except ValueError as exc:
        raise StructuralError(f"family: {exc}") from exc
    try:
        prior = PriorConfig.from_dict(cfg["prior"])
    except (TypeError, ValueError) as exc:
        raise StructuralError(f"prior: {exc}") from exc
    return fam, prior


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> dict:
    _require_seed(args)
    cfg = load_scenario(args)
    cfg = cfg.replace(seed=args.seed)
    if args.subjects is not None:
        cfg = cfg.with_subjects(*args.subjects)
    obs, truth = generate_scenario(cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.name or cfg.name
    data_path = out / f"{stem}.csv"
    obs.to_csv(data_path)
    _write_json(out / f"{stem}_truth.json", {"scenario": cfg.to_dict(), "truth": truth.to_dict()})
    return {"data": str(data_path), "subjects": obs.n_subjects, "visits": obs.n_visits}


def _run_manifest(args, command: str) -> dict:
    if args.manifest:
        m = json.loads(Path(args.manifest).read_text())
        if m.get("command") != command:
            raise UsageError(f"manifest was written by {m.get('command')!r}, not {command!r}")
        data = args.data or m["data"]
        if file_digest(data) != m["data_sha256"]:
            raise StructuralError(f"{data}: contents differ from the manifest's data digest")
        m = dict(m, data=str(data))
        return m
    if args.data is None:
        raise UsageError("--data is required")
    _require_seed(args)
    m = {
        "command": command,
        "data": str(args.data),
        "data_sha256": file_digest(args.data),
        "model": model_config(args.config),
        "iterations": args.iterations,
        "burn_in": args.burn_in,
        "thin": args.thin,
        "seed": args.seed,
        "params": not args.no_params,
    }
    if command == "fit":
        m["sampler"] = args.sampler
        m["k_init"] = args.k_init
    else:
        m["m_init"] = args.m_init
        m["k_init"] = args.k_init
    return m


def _check_run_args(m):
    if m["iterations"] < 1 or m["burn_in"] < 0 or m["thin"] < 1:
        raise UsageError("iterations and thin must be positive, burn-in nonnegative")
    if m["burn_in"] >= m["iterations"]:
        raise UsageError("burn-in must be smaller than the iteration count")


def _load_data(m) -> ObservationSet:
    obs = ObservationSet.from_csv(m["data"])
    if obs.n_subjects == 0:
        raise StructuralError(f"{m['data']}: no subjects")
    return obs


def _initial_theta(m, fam, obs):
    d = m["model"].get("theta_init")
    if d is None:
        return None
    try:
        theta = ModelState(d["pi"], d["Q"], d["B"], fam)
    except (KeyError, TypeError, ValueError) as exc:
        raise StructuralError(f"theta_init: {exc}") from exc
    if theta.D != obs.n_coefficients:
        raise StructuralError(
            f"theta_init.B has {theta.D} rows but the data have {obs.n_covariates} covariates "
            f"({obs.n_coefficients} coefficients)"
        )
    return theta


def cmd_fit(args) -> dict:
    m = _run_manifest(args, "fit")
    _check_run_args(m)
    fam, prior = _build_model(m["model"])
    obs = _load_data(m)
    theta = _initial_theta(m, fam, obs)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    m["versions"] = _versions()
    _write_json(out / "manifest.json", m)
    rng = np.random.default_rng(m["seed"])
    with TraceWriter(out / "trace.jsonl") as tw:
        records, _ = run_chain(obs, fam, prior, m["iterations"], rng, sampler=m["sampler"], burn_in=m["burn_in"],
                               thin=m["thin"], k_init=m["k_init"], theta_init=theta, params=m["params"],
                               on_record=tw)
    table = count_posterior(records, "K")
    _write_csv(table, out / "posterior_k.csv")
    post = k_posterior(records)
    return {"records": len(records), "k_mode": max(post, key=post.get), "output": str(out)}


def cmd_cluster_fit(args) -> dict:
    m = _run_manifest(args, "cluster-fit")
    _check_run_args(m)
    fam, prior = _build_model(m["model"])
    if "theta_init" in m["model"]:
        raise UsageError("theta_init applies to fit only")
    obs = _load_data(m)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    m["versions"] = _versions()
    _write_json(out / "manifest.json", m)
    rng = np.random.default_rng(m["seed"])
    with TraceWriter(out / "trace.jsonl") as tw:
        records, _ = run_clustering(obs, fam, prior, m["iterations"], rng, burn_in=m["burn_in"], thin=m["thin"],
                                    m_init=m["m_init"], k_init=m["k_init"], params=m["params"], on_record=tw)
    _write_csv(count_posterior(records, "M"), out / "posterior_m.csv")
    _write_csv(count_posterior(records, "M_filled"), out / "posterior_m_filled.csv")
    _write_csv(state_count_table(records), out / "state_counts.csv")
    _write_csv(membership_summary(records), out / "membership.csv")
    ms = [r["M"] for r in records]
    return {"records": len(records), "m_mode": max(set(ms), key=ms.count), "output": str(out)}


def cmd_summarize(args) -> dict:
    records = read_trace(args.trace)
    if not records:
        raise StructuralError(f"{args.trace}: trace is empty")
    tables = summarize_records(records, args.burn_in, level=args.level)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for name, df in tables.items():
        _write_csv(df, out / f"{name}.csv")
    return {"tables": sorted(tables), "records": len(records) - args.burn_in, "output": str(out)}


def cmd_presets(args) -> dict:
    return {name: load_preset(name).description for name in available_presets()}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cthmm-rj", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a dataset and its ground truth")
    s.add_argument("--preset", help=f"one of: {', '.join(available_presets())}")
    s.add_argument("--config", help="scenario JSON file")
    s.add_argument("--seed", type=int, help="RNG seed (required)")
    s.add_argument("--subjects", type=int, nargs="+", help="override subjects per component")
    s.add_argument("--name", help="output file stem (defaults to the scenario name)")
    s.add_argument("-o", "--output", default=".", help="output directory")
    s.set_defaults(func=cmd_simulate)

    def run_args(q, clustering):
        q.add_argument("--data", help="CSV with columns subject_id,time,outcome,z1..zD")
        q.add_argument("--config", help="model JSON: family, sigma, prior")
        q.add_argument("--manifest", help="rerun exactly from a previous manifest.json")
        q.add_argument("--iterations", type=int, default=1000)
        q.add_argument("--burn-in", type=int, default=0)
        q.add_argument("--thin", type=int, default=1)
        q.add_argument("--seed", type=int, help="RNG seed (required unless --manifest)")
        q.add_argument("--k-init", type=int, default=1, help="initial number of states")
        if clustering:
            q.add_argument("--m-init", type=int, default=1, help="initial number of components")
        q.add_argument("--no-params", action="store_true", help="omit parameter snapshots from the trace")
        q.add_argument("-o", "--output", default="run", help="output directory")

    f = sub.add_parser("fit", help="sample the number of states")
    run_args(f, clustering=False)
    f.add_argument("--sampler", choices=("rj", "bd"), default="rj")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cluster-fit", help="sample the number of components and their states")
    run_args(c, clustering=True)
    c.set_defaults(func=cmd_cluster_fit)

    m = sub.add_parser("summarize", help="posterior tables and trace series from a trace file")
    m.add_argument("--trace", required=True)
    m.add_argument("--burn-in", type=int, default=0, help="leading records to drop")
    m.add_argument("--level", type=float, default=0.95, help="credible level")
    m.add_argument("-o", "--output", default="summary")
    m.set_defaults(func=cmd_summarize)

    ls = sub.add_parser("presets", help="list scenario presets")
    ls.set_defaults(func=cmd_presets)
    return p


def _fail(kind: str, exc: Exception, code: int) -> int:
    err = {"error": kind, "message": str(exc)}
    subject = getattr(exc, "subject", None)
    if subject is not None:
        err["subject"] = subject
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except CTHMMError as exc:
        return _fail(type(exc).__name__, exc, 1)
    except (ValueError, OSError, KeyError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
