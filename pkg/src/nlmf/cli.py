"""Config-driven batch runner.

Config files are flat ``key = value`` lines; keys may carry one dotted section
(``problem.N``, ``solver.restarts``, ``grid.u``).  ``#`` starts a comment.

    nlmf run   --config rate.cfg [--seed 7] [--out DIR] [--jobs 2] [--format both]
    nlmf sweep --config sweep.cfg
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .functionals import (
    ConstantFunctional,
    PatternGraph,
    QuadraticFunctional,
    SpinHamiltonian,
    SpinSystem,
    TriangleCount,
    triangle_expectation,
)
from .measures import FiniteSupport, ProductMeasure, TruncatedExponential
from .meanfield import MFConfig, rate_function_simplex, rate_function_triangle, spin_mf_value
from .validate import StageError

OUT_ENV = "NLMF_OUT_DIR"
COMMANDS = ("rate-simplex", "rate-triangle", "spin-mf", "theorem1", "mc-tail", "validate-suite")
RUNTIME_KEYS = {"solver.jobs", "output.dir", "output.format"}


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, key: str | None = None):
        where = "config"
        if line is not None:
            where += f":{line}"
        if key is not None:
            where += f": {key}"
        super().__init__(f"{where}: {msg}")


# ---------------------------------------------------------------------------
# parsing


def parse_config(text: str) -> tuple[dict, dict]:
    """Return ``(values, lines)``: raw string values and the line each key came from."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", lineno)
        key, val = (s.strip() for s in body.split("=", 1))
        if not key or key.count(".") > 1 or any(not part for part in key.split(".")):
            raise ConfigError("keys have at most one dotted section", lineno, key or None)
        if key in values:
            raise ConfigError("duplicate key", lineno, key)
        values[key] = val
        lines[key] = lineno
    return values, lines


_SOLVER_TYPES = {f.name: f.type for f in fields(MFConfig)}

PROBLEM_DEFAULTS = {
    "rate-triangle": {"N": "20", "u": "2.0"},
    "rate-simplex": {"N": "8", "l": "2", "u": "1.5", "pattern": "triangle", "H": ""},
    "spin-mf": {"n": "12", "beta": "1.0", "h": "0.0", "A": "", "J": "", "hvec": "", "site": "pm1"},
    "theorem1": {"functional": "squared-sum", "n": "8", "s": "1.0", "beta": "1.0", "epsilon": "0.5",
                 "cover": "analytic", "value": "1.0"},
    "mc-tail": {"N": "6", "u": "2.0", "samples": "200000", "importance": "true"},
    "validate-suite": {},
}
SOLVER_DEFAULTS = {"restarts": "8"}
INT_KEYS = {"N", "l", "n", "samples"}
FLOAT_KEYS = {"u", "beta", "h", "s", "epsilon", "value"}
BOOL_KEYS = {"importance"}


def _convert(key, raw, line):
    name = key.split(".")[-1]
    try:
        if key.startswith("solver."):
            if name not in _SOLVER_TYPES:
                raise ConfigError("unknown solver knob", line, key)
            return int(raw) if _SOLVER_TYPES[name] in ("int", int) else float(raw)
        if name in INT_KEYS:
            return int(raw)
        if name in FLOAT_KEYS:
            return float(raw)
        if name in BOOL_KEYS:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
    except ValueError:
        raise ConfigError(f"bad value {raw!r}", line, key) from None
    return raw


def resolve(values: dict, lines: dict, seed_override: int | None = None, grid_ok: bool = False) -> dict:
    """Fill defaults, check required fields and types; returns a flat dict of typed values."""
    cmd = values.get("command")
    if cmd is None:
        raise ConfigError("missing required field", key="command")
    if cmd not in COMMANDS:
        raise ConfigError(f"unknown command {cmd!r}", lines.get("command"), "command")
    if seed_override is None and "seed" not in values:
        raise ConfigError("missing required field", key="seed")
    out = {"command": cmd}
    try:
        out["seed"] = int(values["seed"]) if seed_override is None else int(seed_override)
    except ValueError:
        raise ConfigError(f"bad value {values['seed']!r}", lines.get("seed"), "seed") from None
    known = {"command", "seed"}
    for k, v in PROBLEM_DEFAULTS[cmd].items():
        key = f"problem.{k}"
        known.add(key)
        out[key] = _convert(key, values.get(key, v), lines.get(key))
    for f in fields(MFConfig):
        if f.name == "seed":
            continue
        key = f"solver.{f.name}"
        known.add(key)
        default = SOLVER_DEFAULTS.get(f.name, str(f.default))
        out[key] = _convert(key, values.get(key, default), lines.get(key))
    out["output.dir"] = values.get("output.dir", "nlmf-out")
    out["output.format"] = values.get("output.format", "both")
    known |= {"output.dir", "output.format"}
    if out["output.format"] not in ("csv", "jsonl", "both"):
        raise ConfigError("format must be csv, jsonl or both", lines.get("output.format"), "output.format")
    grid = {}
    for key, raw in values.items():
        if key.startswith("grid."):
            target = "problem." + key[5:]
            if target not in out:
                raise ConfigError("grid axis is not a problem field", lines.get(key), key)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            grid[target] = [_convert(target, s, lines.get(key)) for s in items]
            continue
        if key not in known:
            raise ConfigError("unknown field", lines.get(key), key)
    if grid and not grid_ok:
        raise ConfigError("grid axes are only allowed for 'nlmf sweep'")
    out["grid"] = grid
    try:
        mf_config(out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return out


def mf_config(cfg: dict) -> MFConfig:
    kw = {f.name: cfg[f"solver.{f.name}"] for f in fields(MFConfig) if f.name != "seed"}
    return MFConfig(seed=cfg["seed"], **kw)


def canonical(cfg: dict) -> str:
    """Manifest text: every resolved field except runtime-only ones, sorted, rerunnable as a config."""
    rows = [f"# nlmf {__version__} manifest", f"command = {cfg['command']}", f"seed = {cfg['seed']}"]
    for key in sorted(k for k in cfg if "." in k and k not in RUNTIME_KEYS):
        rows.append(f"{key} = {_render(cfg[key])}")
    for key, vals in sorted(cfg.get("grid", {}).items()):
        rows.append(f"grid.{key.split('.', 1)[1]} = " + ", ".join(_render(v) for v in vals))
    return "\n".join(rows) + "\n"


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(cfg: dict) -> str:
    body = canonical(cfg).split("\n", 1)[1]
    return hashlib.sha256((__version__ + "\n" + body).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands; each returns (events, rows, ok)


def _load_matrix(path):
    return np.atleast_2d(np.loadtxt(path, dtype=float))


def _pattern(cfg):
    if cfg["problem.H"]:
        return PatternGraph.parse(Path(cfg["problem.H"]).read_text())
    name = cfg["problem.pattern"]
    named = {"triangle": PatternGraph.triangle(), "edge": PatternGraph.single_edge()}
    if name in named:
        return named[name]
    if name.startswith("path") and name[4:].isdigit():
        return PatternGraph.path(int(name[4:]))
    if name.startswith("cycle") and name[5:].isdigit():
        return PatternGraph.cycle(int(name[5:]))
    raise ConfigError(f"unknown pattern {name!r}", key="problem.pattern")


def _rate_rows(cfg, res, extra):
    events = [{"event": "restart", "restart": k, "value": v} for k, v in enumerate(res.restart_values)]
    summary = {
        "value": res.value,
        "ansatz_value": res.ansatz_value,
        "feasible": res.feasible,
        "constraint_violation": res.constraint_violation,
        "threshold": res.threshold,
        "expectation": res.expectation,
        "restarts_used": res.restarts_used,
    }
    events.append({"event": "result", **extra, **summary})
    return events, [{**extra, **summary}], True


def cmd_rate_triangle(cfg, jobs):
    u, N = cfg["problem.u"], cfg["problem.N"]
    if not 1.0 < u < 8.0:
        raise ConfigError("u must lie in (1, 8)", key="problem.u")
    res = rate_function_triangle(u, N, _solver(cfg, jobs))
    return _rate_rows(cfg, res, {"u": u, "N": N})


def cmd_rate_simplex(cfg, jobs):
    H = _pattern(cfg)
    l, u, N = cfg["problem.l"], cfg["problem.u"], cfg["problem.N"]
    res = rate_function_simplex(H, l, u, N, _solver(cfg, jobs))
    return _rate_rows(cfg, res, {"pattern": cfg["problem.H"] or cfg["problem.pattern"], "l": l, "u": u, "N": N})


def _spin_system(cfg):
    if cfg["problem.A"]:
        A = _load_matrix(cfg["problem.A"])
        J = _load_matrix(cfg["problem.J"]) if cfg["problem.J"] else np.array([[cfg["problem.beta"]]])
        h = np.atleast_1d(np.loadtxt(cfg["problem.hvec"])) if cfg["problem.hvec"] else np.full(J.shape[0], cfg["problem.h"])
    else:
        n = cfg["problem.n"]
        A = np.full((n, n), 1.0 / n)
        J = np.array([[cfg["problem.beta"]]])
        h = np.array([cfg["problem.h"]])
    site = cfg["problem.site"]
    if site == "pm1":
        if J.shape[0] != 1:
            raise ConfigError("pm1 sites need a 1 x 1 J", key="problem.site")
        mu1 = FiniteSupport.uniform([[-1.0], [1.0]])
    elif site == "potts":
        mu1 = FiniteSupport.simplex_vertices(J.shape[0])
    else:
        raise ConfigError(f"unknown site {site!r}", key="problem.site")
    return SpinSystem(A, J, h, mu1)


def cmd_spin_mf(cfg, jobs):
    from .functionals import spin_condition_check
    from .validate import exact_log_partition

    sysm = _spin_system(cfg)
    mf = spin_mf_value(sysm, _solver(cfg, jobs))
    diag = spin_condition_check(sysm.A)
    row = {"n": sysm.n, "beta": cfg["problem.beta"], "h": cfg["problem.h"], "mf": mf.value,
           "tr_A2_over_n": diag["tr_A2_over_n"], "rowsum_sup_over_n": diag["rowsum_sup_over_n"]}
    if len(sysm.site.weights) ** sysm.n <= 1 << 20:
        logZ = exact_log_partition(SpinHamiltonian(sysm), sysm.product_measure())
        row.update(logZ=logZ, gap_over_n=(logZ - mf.value) / sysm.n)
    events = [{"event": "start", "start": k, "value": v} for k, v in enumerate(mf.start_values)]
    events.append({"event": "result", **row})
    return events, [row], True


def _theorem1_instance(cfg):
    name, n = cfg["problem.functional"], cfg["problem.n"]
    bern = ProductMeasure.iid(FiniteSupport.uniform([[0.0], [1.0]]), n)
    if name == "squared-sum":
        return QuadraticFunctional.squared_sum(n, cfg["problem.s"]), bern
    if name == "quadratic-random":
        rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(7,)))
        Q = rng.normal(size=(n, n))
        return QuadraticFunctional((Q + Q.T) / 2, rng.normal(size=n)), bern
    if name == "curie-weiss":
        sysm = SpinSystem.curie_weiss(n, cfg["problem.beta"])
        return SpinHamiltonian(sysm), sysm.product_measure()
    if name == "constant":
        return ConstantFunctional(cfg["problem.value"], n), bern
    raise ConfigError(f"unknown functional {name!r}", key="problem.functional")


def cmd_theorem1(cfg, jobs):
    from .validate import theorem1_experiment

    F, mu = _theorem1_instance(cfg)
    rep = theorem1_experiment(F, mu, cfg["problem.epsilon"], _solver(cfg, jobs), cover=cfg["problem.cover"])
    events = [
        {"event": "bounds", **rep["bounds"]},
        {"event": "cover", "log_cover": rep["log_cover"]},
        {"event": "meanfield", "mf_value": rep["mf_value"]},
        {"event": "budget", **rep["budget"]},
        {"event": "sandwich", "logZ": rep["logZ"], **rep["sandwich"]},
    ]
    sw = rep["sandwich"]
    row = {"functional": cfg["problem.functional"], "n": mu.n, "epsilon": cfg["problem.epsilon"],
           "logZ": rep["logZ"], "mf_value": rep["mf_value"], "lower_slack": rep["budget"]["lower_slack"],
           "upper_total": rep["budget"]["upper_total"], "lower_ok": sw["lower_ok"], "upper_ok": sw["upper_ok"]}
    return events, [row], bool(rep["ok"])


def cmd_mc_tail(cfg, jobs):
    from .validate import mc_tail_probability, tilted_importance_estimate, truncexp_product

    N, u, samples = cfg["problem.N"], cfg["problem.u"], cfg["problem.samples"]
    F = TriangleCount(N)
    mu = ProductMeasure.iid(TruncatedExponential(0.0), F.n)
    thr = u * triangle_expectation(N)
    seed = cfg["seed"]
    ests = [mc_tail_probability(F, mu, thr, samples, seed, jobs)]
    if cfg["problem.importance"]:
        res = rate_function_triangle(u, N, _solver(cfg, jobs))
        nu = truncexp_product(res.argument)
        ests.append(tilted_importance_estimate(F, mu, thr, nu, samples, seed + 1, jobs))
    rows = [{"N": N, "u": u, "threshold": thr, **{k: e.as_dict()[k] for k in
             ("method", "p_hat", "log_p_hat", "std_err", "n_samples", "ess")}} for e in ests]
    events = [{"event": "estimate", **e.as_dict()} for e in ests]
    return events, rows, True


def cmd_validate_suite(cfg, jobs):
    from .validate import run_suite

    checks = run_suite(_solver(cfg, jobs))
    events = [{"event": "check", **c} for c in checks]
    rows = [{"check": c["name"], "passed": c["passed"], "detail": c["detail"]} for c in checks]
    return events, rows, all(c["passed"] for c in checks)


def _solver(cfg, jobs):
    base = mf_config(cfg)
    return MFConfig(**{**{f.name: getattr(base, f.name) for f in fields(MFConfig)}, "jobs": max(1, jobs)})


HANDLERS = {
    "rate-triangle": cmd_rate_triangle,
    "rate-simplex": cmd_rate_simplex,
    "spin-mf": cmd_spin_mf,
    "theorem1": cmd_theorem1,
    "mc-tail": cmd_mc_tail,
    "validate-suite": cmd_validate_suite,
}


# ---------------------------------------------------------------------------
# output


def _jsonable(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _csv_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.10g" % v
    return str(v)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_outputs(out_dir: Path, cfg: dict, events: list, rows: list, fmt: str):
    digest = config_hash(cfg)
    tag = {"seed": cfg["seed"], "config_hash": digest}
    if fmt in ("jsonl", "both"):
        lines = [json.dumps({**tag, **{k: _jsonable(v) for k, v in e.items()}}) for e in events]
        _atomic_write(out_dir / "events.jsonl", "\n".join(lines) + "\n")
    if fmt in ("csv", "both"):
        cols = ["command", "seed", "config_hash"]
        for r in rows:
            cols += [k for k in r if k not in cols]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            full = {"command": cfg["command"], **tag, **r}
            w.writerow([_csv_cell(full.get(c, "")) for c in cols])
        _atomic_write(out_dir / "summary.csv", buf.getvalue())
    _atomic_write(out_dir / "manifest.cfg", canonical(cfg))


def run(cfg: dict, out_dir: Path, jobs: int = 1, fmt: str = "both") -> int:
    events, rows, ok = HANDLERS[cfg["command"]](cfg, jobs)
    write_outputs(out_dir, cfg, events, rows, fmt)
    return 0 if ok else 1


def sweep(cfg: dict, out_dir: Path, jobs: int = 1, fmt: str = "both") -> int:
    grid = cfg["grid"]
    if not 1 <= len(grid) <= 2 or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("a sweep needs one or two non-empty grid axes")
    axes = sorted(grid)
    cells = [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]

    def one(cell):
        sub = {**cfg, **cell, "grid": {}}
        return HANDLERS[cfg["command"]](sub, 1)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(one, cells))
    else:
        results = [one(c) for c in cells]
    events, rows, ok = [], [], True
    for idx, (cell, (ev, rw, good)) in enumerate(zip(cells, results)):
        labels = {"cell": idx, **{a.split(".", 1)[1]: v for a, v in cell.items()}}
        events += [{**labels, **e} for e in ev]
        rows += [{**labels, **r} for r in rw]
        ok &= good
    write_outputs(out_dir, cfg, events, rows, fmt)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlmf", description="Mean-field large-deviation experiments")
    p.add_argument("--version", action="version", version=f"nlmf {__version__}")
    sub = p.add_subparsers(dest="action", required=True)
    for name in ("run", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--format", choices=("csv", "jsonl", "both"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
        values, lines = parse_config(text)
        cfg = resolve(values, lines, args.seed, grid_ok=args.action == "sweep")
        out = args.out or os.environ.get(OUT_ENV) or cfg["output.dir"]
        fmt = args.format or cfg["output.format"]
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        action = sweep if args.action == "sweep" else run
        return action(cfg, Path(out), args.jobs, fmt)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"nlmf: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"nlmf: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
