"""``mvlab`` command line.

    mvlab <simulate|invariant|verify|phase-diagram|probe> [--config PATH]
          [--seed U64] [--threads N] [--out DIR] [key=value ...]

Configs are YAML.  ``key=value`` overrides use dotted keys
(``simulation.t_end=5``) and YAML scalars for values.  ``MVLAB_SEED``,
``MVLAB_N`` and ``MVLAB_OUT`` override the seed, particle count and output
root; explicit flags win over the environment.

Exit codes: 0 ok, 2 bad configuration, 3 numerical failure or
non-convergence, 4 a verified claim did not hold.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import yaml

from . import __version__, _accel
from .dissipativity import (
    BUILTIN_POINTS,
    PhaseControls,
    builtin_config,
    phase_diagram,
    verify_hypotheses,
)
from .dynamics import (
    DEFAULT_LADDER,
    ProbeControls,
    comparison_probe,
    connecting_orbit_trace,
    instability_probe,
    middle_indices,
    multi_well_suite,
    shrinking_neighborhood_probe,
)
from .errors import ClaimFailure, ConfigError, MVLabError
from .invariant import PsiControls, _w2, canonical_seeds, find_invariant_measures
from .model import ModelSpec, fit_dissipative_constants, from_config
from .particle import IntegrationSchedule, InitialLaw, init_ensemble, simulate

COMMANDS = ("simulate", "invariant", "verify", "phase-diagram", "probe")
PROBES = ("instability", "orbit", "shrinking", "comparison", "suite")
U64 = 1 << 64


def fmt(v) -> str:
    """Machine format: round-trips every double."""
    return f"{float(v):.17g}"


def hfmt(v) -> str:
    return f"{float(v):.6g}"


# -- configuration ---------------------------------------------------------------


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"config {path} does not parse{where}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return data


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    node = cfg
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            nxt = {}
            node[p] = nxt
        node = nxt
    node[parts[-1]] = value


def parse_seed(v) -> int:
    try:
        s = int(str(v), 0)
    except ValueError:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {v!r}") from None
    if not 0 <= s < U64:
        raise ConfigError(f"seed {s} is outside [0, 2^64)")
    return s


def resolve_config(args, overrides: List[str]) -> dict:
    """File < environment < flags < key=value overrides."""
    cfg = copy.deepcopy(load_config(args.config))
    env = os.environ
    if "MVLAB_SEED" in env:
        cfg["seed"] = env["MVLAB_SEED"]
    if "MVLAB_N" in env:
        cfg["n_particles"] = env["MVLAB_N"]
    if "MVLAB_OUT" in env:
        cfg["out"] = env["MVLAB_OUT"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    for item in overrides:
        apply_override(cfg, item)
    cfg["seed"] = parse_seed(cfg.get("seed", 0))
    if "n_particles" in cfg:
        cfg["n_particles"] = _int(cfg["n_particles"], "n_particles", 1)
    return cfg


def _int(v, name, lo=0) -> int:
    try:
        out = int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"field {name!r} must be an integer, got {v!r}") from None
    if out != float(v) or out < lo:
        raise ConfigError(f"field {name!r} must be an integer >= {lo}")
    return out


def _float(v, name) -> float:
    try:
        out = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"field {name!r} must be a number, got {v!r}") from None
    if not math.isfinite(out):
        raise ConfigError(f"field {name!r} must be finite")
    return out


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _model(cfg: dict) -> ModelSpec:
    if "model" not in cfg:
        raise ConfigError("missing section 'model'")
    return from_config(cfg["model"])


def _n(cfg: dict, sec: dict, default: int) -> int:
    if "n_particles" in sec:
        return _int(sec["n_particles"], "n_particles", 1)
    return int(cfg.get("n_particles", default))


def psi_controls(cfg: dict, threads: int) -> PsiControls:
    sec = _section(cfg, "invariant")
    base = PsiControls()
    kw = {}
    for name in ("dt", "tol", "burn_in", "window", "snapshot_every", "merge_radius"):
        if name in sec:
            kw[name] = _float(sec[name], f"invariant.{name}")
    for name in ("patience", "max_iter"):
        if name in sec:
            kw[name] = _int(sec[name], f"invariant.{name}", 1)
    if "scheme" in sec:
        kw["scheme"] = str(sec["scheme"])
    return PsiControls(n_particles=_n(cfg, sec, base.n_particles), seed=cfg["seed"], threads=threads, **kw)


def probe_controls(cfg: dict, threads: int) -> ProbeControls:
    sec = _section(cfg, "probe")
    base = ProbeControls()
    kw = {}
    for name in ("dt", "check_every", "capture_radius", "horizon", "horizon_floor"):
        if name in sec and sec[name] is not None:
            kw[name] = _float(sec[name], f"probe.{name}")
    if "scheme" in sec:
        kw["scheme"] = str(sec["scheme"])
    return ProbeControls(n_particles=_n(cfg, sec, base.n_particles), seed=cfg["seed"], threads=threads, **kw)


# -- run persistence ------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    run_id: str = ""
    artifacts: Dict[str, str] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)
    environment: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.run_id:
            self.run_id = run_id(self.command, self.config)

    def directory(self, root: str) -> str:
        return os.path.join(root, f"{self.command}-{self.run_id}")

    def index(self, run_dir: str) -> None:
        """Record every file written under the run directory."""
        for base, _, files in os.walk(run_dir):
            for f in sorted(files):
                if f == "manifest.json":
                    continue
                rel = os.path.relpath(os.path.join(base, f), run_dir)
                self.artifacts[rel] = rel

    def write(self, run_dir: str) -> str:
        self.index(run_dir)
        missing = [p for p in self.artifacts.values() if not os.path.exists(os.path.join(run_dir, p))]
        if missing:
            raise MVLabError(f"manifest references missing artifacts: {missing}")
        path = os.path.join(run_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(
                {
                    "run_id": self.run_id,
                    "command": self.command,
                    "config": self.config,
                    "artifacts": dict(sorted(self.artifacts.items())),
                    "timing": self.timing,
                    "environment": self.environment,
                },
                fh,
                indent=2,
                default=_plain,
            )
        return path


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def run_id(command: str, config: dict) -> str:
    blob = json.dumps({"command": command, "config": config, "version": __version__}, sort_keys=True, default=_plain)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def environment() -> Dict[str, str]:
    import numba
    import scipy

    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "backend": _accel.backend(),
        "mvlab": __version__,
    }


def _write_json(path: str, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=_plain)


def _table(headers: List[str], rows: List[List[str]], out=None) -> None:
    out = out or sys.stdout
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    print("  ".join(h.rjust(w) for h, w in zip(headers, widths)), file=out)
    for r in rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=out)


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(cfg: dict, run_dir: str, threads: int) -> int:
    model = _model(cfg)
    sec = _section(cfg, "simulation")
    n = _n(cfg, sec, 10_000)
    t_end = _float(sec.get("t_end", 10.0), "simulation.t_end")
    every = _float(sec.get("checkpoint_every", 1.0), "simulation.checkpoint_every")
    dt = _float(sec.get("dt", 1e-3), "simulation.dt")
    sched = IntegrationSchedule.uniform(t_end, every, dt, str(sec.get("scheme", "euler_maruyama")))
    init = sec.get("initial") or {"kind": "dirac", "point": [0.0] * model.dimension}
    law = InitialLaw.from_config(init)
    ens = init_ensemble(law, n, cfg["seed"])
    res = simulate(ens, model, sched)
    first = res.laws[0]
    rows_m, rows_h = [], []
    for k, (t, mu) in enumerate(res):
        mu.save(os.path.join(run_dir, f"checkpoint_{k:04d}.mvlm"))
        w = _w2(mu, first, cfg["seed"])
        norm = math.sqrt(mu.second_moment)
        rows_m.append([fmt(t)] + [fmt(v) for v in mu.mean] + [fmt(norm), fmt(w)])
        rows_h.append([hfmt(t)] + [hfmt(v) for v in mu.mean] + [hfmt(norm), hfmt(w)])
    heads = ["time"] + [f"mean_{i}" for i in range(model.dimension)] + ["norm2", "w2_to_initial"]
    with open(os.path.join(run_dir, "summary.csv"), "w") as fh:
        fh.write(",".join(heads) + "\n")
        for r in rows_m:
            fh.write(",".join(r) + "\n")
    _table(heads, rows_h)
    return 0


def cmd_invariant(cfg: dict, run_dir: str, threads: int) -> int:
    model = _model(cfg)
    fit_dissipative_constants(model)  # unsupported models fail before any simulation
    pc = psi_controls(cfg, threads)
    sec = _section(cfg, "invariant")
    if "seeds" in sec:
        seeds = [InitialLaw.dirac(p) if not isinstance(p, dict) else InitialLaw.from_config(p) for p in sec["seeds"]]
    else:
        seeds = canonical_seeds(model)
    rep = find_invariant_measures(model, seeds, pc)
    rep.to_json(run_dir)
    rows = []
    for k, (mu, r, c) in enumerate(zip(rep.measures, rep.fixed_point_residuals, rep.moment_certificates)):
        rows.append([str(k), " ".join(hfmt(v) for v in mu.mean), hfmt(mu.second_moment), hfmt(r), "pass" if c.passed else "FAIL"])
    print(f"{rep.count} invariant measure(s); chain ordered: {rep.chain_ordered}")
    _table(["k", "mean", "second_moment", "residual", "moment_bound"], rows)
    for s in rep.seed_runs:
        if not s.converged:
            print(f"seed {s.index} did not converge: {s.message}")
    return 0 if rep.all_converged else 3


def cmd_verify(cfg: dict, run_dir: str, threads: int, positional: List[str]) -> int:
    sec = _section(cfg, "verify")
    vals = list(positional)
    family = vals[0] if vals else sec.get("family")
    beta = vals[1] if len(vals) > 1 else sec.get("beta")
    sigma_sq = vals[2] if len(vals) > 2 else sec.get("sigma_sq")
    if family is None or beta is None or sigma_sq is None:
        raise ConfigError("verify needs FAMILY BETA SIGMA_SQ")
    if family not in BUILTIN_POINTS:
        raise ConfigError(f"verify supports {', '.join(BUILTIN_POINTS)}; got {family!r}")
    beta, sigma_sq = _float(beta, "beta"), _float(sigma_sq, "sigma_sq")
    rep = verify_hypotheses(family, beta, sigma_sq)
    v = rep.verdict
    doc = {
        "threshold": v.to_dict(),
        "checks": [
            dict(c.to_dict(), a=cfg_.a.tolist(), g=cfg_.g.pretty()) for cfg_, c in zip(rep.configs, rep.checks)
        ],
        "separation": {"passed": rep.separation.passed, "margins": rep.separation.margins},
        "passed": bool(v.inside and rep.passed),
    }
    _write_json(os.path.join(run_dir, "verify.json"), doc)
    print(f"{family}: beta={hfmt(beta)} sigma^2={hfmt(sigma_sq)} -> {'inside' if v.inside else 'outside'}")
    print(f"  beta threshold   {v.beta_threshold[0]} = {hfmt(v.beta_threshold[1])}  margin {hfmt(v.margins[0])}")
    print(f"  sigma^2 threshold {v.sigma_sq_threshold[0]} = {hfmt(v.sigma_sq_threshold[1])}  margin {hfmt(v.margins[1])}")
    rows = []
    for cfg_, c in zip(rep.configs, rep.checks):
        rows.append([
            " ".join(hfmt(x) for x in cfg_.a), hfmt(c.r), "-" if c.r_bar is None else hfmt(c.r_bar),
            _yn(c.domination), _yn(c.tail_ok), _yn(c.convex) + ("*" if c.convexified else ""), _yn(c.w_monotone),
            _yn(c.positive), hfmt(c.t_hat),
        ])
    _table(["a", "r", "r_bar", "dominated", "tail", "convex", "w_mono", "positive", "T_hat"], rows)
    if any(c.convexified for c in rep.checks):
        print("  * convexity via the convex minorant of g")
    print(f"  separation: {'pass' if rep.separation.passed else 'FAIL'} (margins {', '.join(hfmt(m) for m in rep.separation.margins)})")
    return 0 if doc["passed"] else ClaimFailure.exit_code


def _yn(b) -> str:
    return "yes" if b else "NO"


def _grid(spec, name) -> List[float]:
    if isinstance(spec, dict):
        for k in ("start", "stop", "num"):
            if k not in spec:
                raise ConfigError(f"phase_diagram.{name} needs {k!r}")
        return np.linspace(_float(spec["start"], name), _float(spec["stop"], name), _int(spec["num"], name)).tolist()
    if isinstance(spec, (list, tuple)):
        return [_float(x, name) for x in spec]
    raise ConfigError(f"phase_diagram.{name} must be a list or a start/stop/num mapping")


def cmd_phase_diagram(cfg: dict, run_dir: str, threads: int) -> int:
    sec = _section(cfg, "phase_diagram")
    for k in ("family", "beta", "sigma_sq"):
        if k not in sec:
            raise ConfigError(f"phase_diagram needs field {k!r}")
    mode = str(sec.get("mode", "analytic"))
    base = PhaseControls()
    ctl = PhaseControls(
        n_particles=_n(cfg, sec, base.n_particles),
        dt=_float(sec.get("dt", base.dt), "phase_diagram.dt"),
        tol=_float(sec.get("tol", base.tol), "phase_diagram.tol"),
        burn_in=_float(sec.get("burn_in", base.burn_in), "phase_diagram.burn_in"),
        window=_float(sec.get("window", base.window), "phase_diagram.window"),
        max_iter=_int(sec.get("max_iter", base.max_iter), "phase_diagram.max_iter", 1),
        seed=cfg["seed"],
        threads=threads,
    )
    recs = phase_diagram(str(sec["family"]), _grid(sec["beta"], "beta"), _grid(sec["sigma_sq"], "sigma_sq"), mode, ctl, run_dir)
    inside = sum(r["analytic_inside"] for r in recs)
    print(f"{len(recs)} cells, {inside} inside the sufficient region")
    if mode == "empirical":
        rows = [[hfmt(r["beta"]), hfmt(r["sigma_sq"]), _yn(r["analytic_inside"]), str(r["empirical_count"])] for r in recs]
        _table(["beta", "sigma_sq", "inside", "count"], rows)
    return 0


def cmd_probe(cfg: dict, run_dir: str, threads: int, name: str, direction: Optional[str]) -> int:
    if name not in PROBES:
        raise ConfigError(f"unknown probe {name!r}; choose from {', '.join(PROBES)}")
    model = _model(cfg)
    sec = _section(cfg, "probe")
    pc = probe_controls(cfg, threads)
    if name == "comparison":
        n = pc.n_particles
        init = sec.get("initial") or {"kind": "gaussian", "mean": [0.0] * model.dimension, "cov": 0.25}
        shift = _float(sec.get("shift", 0.3), "probe.shift")
        mu0 = init_ensemble(InitialLaw.from_config(init), n, cfg["seed"]).law()
        t_end = _float(sec.get("t_end", 10.0), "probe.t_end")
        sched = IntegrationSchedule.uniform(t_end, t_end / _int(sec.get("checkpoints", 20), "probe.checkpoints", 1), pc.dt)
        rep = comparison_probe(model, mu0, mu0.shifted(np.full(model.dimension, shift)), sched, n, cfg["seed"])
        _write_json(os.path.join(run_dir, "comparison.json"), {
            "times": rep.times.tolist(), "verdicts": [v.to_dict() for v in rep.verdicts],
            "order_fraction": rep.order_fraction.tolist(), "tolerance": rep.tolerance, "cooperative": rep.cooperative,
            "passed": rep.passed,
        })
        print(f"order kept at {len(rep.verdicts) - rep.violations}/{len(rep.verdicts)} checkpoints; "
              f"min pathwise fraction {hfmt(rep.order_fraction.min())}")
        return 0 if rep.passed else ClaimFailure.exit_code
    if name == "shrinking":
        beta = model.params.get("beta")
        if beta is None or model.family not in BUILTIN_POINTS:
            raise ConfigError("shrinking probe needs a built-in family")
        pts = BUILTIN_POINTS[model.family]
        point = sec.get("point", pts[-1])
        bcfg = builtin_config(model.family, point, float(beta), model.sigma_sq_sup)
        rep = shrinking_neighborhood_probe(model, bcfg, n_particles=pc.n_particles, seed=cfg["seed"], threads=threads)
        _write_json(os.path.join(run_dir, "shrinking.json"), {
            "a": rep.a.tolist(), "r": rep.r, "r_bar": rep.r_bar, "t_hat": rep.t_hat, "horizon": rep.horizon,
            "runs": [{"label": b.label, "initial_radius": b.initial_radius, "entry_time": b.entry_time,
                      "stayed_in_outer": b.stayed_in_outer, "stayed_in_inner": b.stayed_in_inner,
                      "times": b.times.tolist(), "radii": b.radii.tolist()} for b in rep.runs],
            "passed": rep.passed,
        })
        rows = [[b.label, hfmt(b.initial_radius), _yn(b.stayed_in_outer), "-" if b.entry_time is None else hfmt(b.entry_time)] for b in rep.runs]
        print(f"r={hfmt(rep.r)} r_bar={hfmt(rep.r_bar)} T_hat={hfmt(rep.t_hat)}")
        _table(["law", "radius", "in_r_bar", "entry"], rows)
        return 0 if rep.passed else ClaimFailure.exit_code
    if name == "suite":
        rep = multi_well_suite(model, psi_controls(cfg, threads), pc)
        _write_json(os.path.join(run_dir, "suite.json"), rep.to_dict())
        for i, j, tr in rep.orbits:
            tr.write(os.path.join(run_dir, "orbits"), f"orbit_{i}_{j}")
        print(json.dumps(rep.to_dict(), indent=2, default=_plain))
        if rep.partial and rep.count_ok:
            return 3
        return 0 if rep.passed else ClaimFailure.exit_code
    inv = find_invariant_measures(model, canonical_seeds(model), psi_controls(cfg, threads))
    inv.to_json(run_dir)
    mids = middle_indices(inv.count)
    if not mids:
        raise ClaimFailure(f"found {inv.count} invariant measure(s); no middle measure to probe")
    k = _int(sec.get("middle_index", mids[0]), "probe.middle_index")
    if name == "instability":
        ladder = [float(e) for e in sec.get("epsilon_ladder", DEFAULT_LADDER)]
        rep = instability_probe(model, inv, k, ladder, pc)
        _write_json(os.path.join(run_dir, "instability.json"), rep.to_dict())
        rows = [[hfmt(o.epsilon), "+" if o.direction > 0 else "-", o.outcome, str(o.target_index), "-" if o.time is None else hfmt(o.time)] for o in rep.outcomes]
        _table(["eps", "dir", "outcome", "target", "time"], rows)
        print(f"verdict: {'unstable' if rep.verdict else 'not shown unstable'}")
        return 0 if rep.verdict else ClaimFailure.exit_code
    direction = direction or sec.get("direction", "increasing")
    if direction not in ("increasing", "decreasing"):
        raise ConfigError("orbit direction must be increasing or decreasing")
    j = k + 1 if direction == "increasing" else k - 1
    tr = connecting_orbit_trace(model, inv.measures[k], inv.measures[j], direction, _float(sec.get("epsilon", 0.05), "probe.epsilon"), pc)
    tr.write(run_dir, "orbit")
    s = tr.summary()
    print(f"{direction} orbit {k} -> {j}: {len(tr.checkpoints)} checkpoints, captured={s['captured']} "
          f"at t={'-' if s['capture_time'] is None else hfmt(s['capture_time'])}, terminal W2 {hfmt(s['terminal_w2_to_target'])}, "
          f"order violations {s['order_violations']}")
    return 0 if tr.accepted else ClaimFailure.exit_code


# -- entry point -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", help="root seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("--out", help="output root directory")
    common.add_argument("rest", nargs="*", help="positional arguments and key=value overrides")
    p = argparse.ArgumentParser(prog="mvlab", description="Mean-field SDE laboratory")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate the particle system")
    sub.add_parser("invariant", parents=[common], help="find invariant measures")
    sub.add_parser("verify", parents=[common], help="check thresholds and dissipativity: verify FAMILY BETA SIGMA_SQ")
    sub.add_parser("phase-diagram", parents=[common], help="sweep a (beta, sigma^2) grid")
    pr = sub.add_parser("probe", parents=[common], help=f"run a dynamics probe: probe {{{','.join(PROBES)}}}")
    pr.add_argument("--direction", choices=("increasing", "decreasing"))
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    positional = [r for r in args.rest if "=" not in r]
    overrides = [r for r in args.rest if "=" in r]
    if args.command == "probe":
        if not positional:
            parser.error("probe needs a probe name: " + ", ".join(PROBES))
        if positional[0] not in PROBES:
            parser.error(f"unknown probe {positional[0]!r}; choose from {', '.join(PROBES)}")
    elif args.command != "verify" and positional:
        parser.error(f"unexpected arguments: {' '.join(positional)}")
    try:
        cfg = resolve_config(args, overrides)
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        out_root = str(cfg.pop("out", "runs"))
        snapshot = dict(cfg)
        if args.command in ("verify", "probe"):
            snapshot["argv"] = positional
        if args.command == "probe" and args.direction:
            snapshot["direction"] = args.direction
        man = RunManifest(args.command, snapshot, environment=environment())
        run_dir = man.directory(out_root)
        os.makedirs(run_dir, exist_ok=True)
        t0 = time.perf_counter()
        if args.command == "simulate":
            code = cmd_simulate(cfg, run_dir, threads)
        elif args.command == "invariant":
            code = cmd_invariant(cfg, run_dir, threads)
        elif args.command == "verify":
            code = cmd_verify(cfg, run_dir, threads, positional)
        elif args.command == "phase-diagram":
            code = cmd_phase_diagram(cfg, run_dir, threads)
        else:
            code = cmd_probe(cfg, run_dir, threads, positional[0], args.direction)
        man.timing = {"wall_seconds": time.perf_counter() - t0}
        man.write(run_dir)
        print(f"run {man.run_id} -> {run_dir}")
        return code
    except MVLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # argument validation inside the library
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
