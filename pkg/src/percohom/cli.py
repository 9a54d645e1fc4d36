"""Command-line entry point: run pipelines, run the acceptance suite, export clouds, inspect graphs."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .cloud import Box, Cube, ParameterError, TriadicCube, read_cloud, sample_poisson, write_cloud, write_cloud_csv
from .solver import SolverFailure

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4
KINDS = ("coeffs", "correctors", "dirichlet", "regularity", "green", "percolation")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "coeffs"
    d: int = 2
    lam: float = 4.0
    levels: tuple = (3, 4)
    radii: tuple = (4.0, 8.0, 16.0)
    l: int = 1
    N: int = 8
    seed: int = 0
    tol: float = 1e-10
    abar: float = 0.0  # scalar homogenized coefficient for kind=dirichlet; 0 estimates it
    side: int = 0  # box side for kind=correctors/green; 0 picks one from the radii
    out: str = "percohom-out"
    workers: int = 1

    def validate(self):
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}")
        if self.d not in (2, 3):
            raise ParameterError("d must be 2 or 3 at desk scale")
        if not self.lam > 0:
            raise ParameterError("lam must be positive")
        if list(self.levels) != sorted(self.levels) or not self.levels:
            raise ParameterError("levels must be a nonempty nondecreasing list")
        if self.l < 0 or self.l >= min(self.levels):
            raise ParameterError("need 0 <= l < min(levels)")
        if self.N < 1 or self.workers < 1:
            raise ParameterError("N and workers must be positive")
        if self.side and self.side % 2 == 0:
            raise ParameterError("side must be odd")
        return self

    def hash(self):
        keep = {k: v for k, v in asdict(self).items() if k not in ("out", "workers")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(kind, text):
    text = text.strip()
    if kind is tuple:
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(float(p) if any(c in p for c in ".eE") else int(p) for p in parts)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


_TYPES = {f.name: type(f.default) for f in fields(ExperimentConfig)}


def read_config(path):
    """Flat `key = value` text; `#` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ParameterError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _parse_value(_TYPES[key], val)
    return out


def build_config(args):
    values = {}
    if os.environ.get("PERCOHOM_OUT"):
        values["out"] = os.environ["PERCOHOM_OUT"]
    if os.environ.get("PERCOHOM_WORKERS"):
        values["workers"] = int(os.environ["PERCOHOM_WORKERS"])
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = _parse_value(_TYPES[f.name], v)
    try:
        return ExperimentConfig(**values).validate()
    except (TypeError, ValueError) as exc:
        raise ParameterError(str(exc)) from exc


# ---------------------------------------------------------------------------
# pipelines; each returns (rows, notes)


def _coeffs(cfg):
    from .homog import mc_coefficients, tau_defect

    co = mc_coefficients(cfg.lam, cfg.d, cfg.levels, cfg.l, max(cfg.N, 2), cfg.seed, workers=cfg.workers)
    rows = co.rows()
    if len(cfg.levels) > 1:
        ts = tau_defect(co)
        for m, t, s in zip(ts.levels, ts.tau, ts.se):
            rows.append({"level": m, "tau": t, "tau_se": s})
    notes = {}
    if co.extrapolated is not None:
        notes["abar_scalar"] = co.scalar
    return rows, notes


def _correctors(cfg):
    from .cgq import CGQConfig
    from .corrector import variance_scaling

    vs = variance_scaling(cfg.lam, cfg.d, cfg.radii, cfg.N, cfg.seed, cfg.l, CGQConfig(l=cfg.l), cfg.workers, cfg.side or None)
    rows = [{"r": r, "var": v, "ci_lo": a, "ci_hi": b} for r, v, a, b in zip(vs.radii, vs.var, vs.ci_lo, vs.ci_hi)]
    return rows, {"slope": vs.slope, "slope_se": vs.slope_se, "side": vs.side, "rejected": vs.n_rejected}


def _dirichlet(cfg):
    from .dirichlet import error_experiment
    from .homog import mc_coefficients

    abar = cfg.abar
    if abar <= 0:
        lv = tuple(sorted(set(cfg.levels)))[-2:]
        if len(lv) < 2 or lv[0] <= cfg.l:
            lv = (max(lv) - 1, max(lv))
        abar = mc_coefficients(cfg.lam, cfg.d, lv, cfg.l, max(cfg.N, 2), cfg.seed, workers=cfg.workers).scalar
    curve = error_experiment(cfg.lam, cfg.d, cfg.levels, cfg.N, abar * np.eye(cfg.d), seed=cfg.seed, workers=cfg.workers)
    rows = [{"level": r.level, "sample": r.sample, "rel_l2": r.rel_l2, "n_vertices": r.n_vertices, "rho": r.rho} for r in curve.records]
    return rows, {"abar": abar, "slope": curve.slope, "slope_se": curve.slope_se}


def _regularity(cfg):
    from .analysis import lipschitz_experiment

    recs = lipschitz_experiment(cfg.lam, cfg.d, cfg.radii, cfg.N, seed=cfg.seed, workers=cfg.workers)
    rows = [{"R": r.R, "r": r.r, "sample": r.sample, "ratio": r.ratio, "oscillation": r.oscillation} for r in recs]
    return rows, {}


def _green(cfg):
    from .analysis import greens_decay

    fit = greens_decay(cfg.lam, cfg.d, cfg.radii, cfg.N, side=cfg.side or None, seed=cfg.seed, workers=cfg.workers)
    rows = [
        {"sample": r.sample, "r_nominal": r.nominal, "r": r.r, "source": r.source, "target": r.target, "oscillation": r.oscillation}
        for r in fit.records
    ]
    return rows, {"exponent": fit.exponent, "exponent_se": fit.exponent_se, "symmetry": fit.symmetry}


def _percolation(cfg):
    from .cluster import estimate_theta, substream, well_connected_check

    th = estimate_theta(cfg.lam, cfg.d)
    rows = []
    top = TriadicCube.origin(max(cfg.levels), cfg.d)
    for i in range(cfg.N):
        cloud = sample_poisson(top.box, cfg.lam, substream(cfg.seed, "percolation", i))
        for m in cfg.levels:
            rep = well_connected_check(cloud, TriadicCube.origin(m, cfg.d), th.theta if th.theta > 0 else 1e-12)
            rows.append(
                {
                    "sample": i,
                    "level": m,
                    "passed": rep.passed,
                    "n_large": rep.n_large_components,
                    "count_ratio": rep.count_ratio,
                    "max_distance": rep.max_distance,
                }
            )
    notes = {"theta": th.theta, "theta_se": th.se, "subcritical": th.subcritical}
    return rows, notes


PIPELINES = {
    "coeffs": _coeffs,
    "correctors": _correctors,
    "dirichlet": _dirichlet,
    "regularity": _regularity,
    "green": _green,
    "percolation": _percolation,
}


def run(cfg):
    """Run one pipeline, write <kind>.csv and manifest.json; returns the manifest dict."""
    from .acceptance import rows_to_csv

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows, notes = PIPELINES[cfg.kind](cfg)
    wall = time.perf_counter() - t0
    chash = cfg.hash()
    text = rows_to_csv(rows, cfg.seed, chash)
    csv_path = out / f"{cfg.kind}.csv"
    csv_path.write_text(text)
    digest = hashlib.sha256(text.encode()).hexdigest()
    msgs = sorted({str(w.message) for w in caught if issubclass(w.category, RuntimeWarning) and "subcritical" in str(w.message)})
    notes = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in notes.items()}
    manifest = {
        "config": asdict(cfg),
        "config_hash": chash,
        "code_version": __version__,
        "outputs": {csv_path.name: digest},
        "notes": notes,
        "warnings": msgs,
        "wall_time": {cfg.kind: round(wall, 3)},
    }
    manifest["manifest_hash"] = hashlib.sha256(json.dumps([chash, __version__, digest]).encode()).hexdigest()[:16]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return manifest


def _json_default(o):
    if isinstance(o, (np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    cfg = build_config(args)
    m = run(cfg)
    for w in m["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps({k: m[k] for k in ("config_hash", "manifest_hash", "outputs", "notes")}, default=_json_default))
    return EXIT_OK


def cmd_check(args):
    from . import acceptance as acc

    profile = acc.PROFILES[args.profile]
    workers = args.workers or int(os.environ.get("PERCOHOM_WORKERS", "1"))
    crit = tuple(int(c) for c in args.criteria.split(",")) if args.criteria else tuple(range(1, 13))
    out = Path(args.out or os.environ.get("PERCOHOM_OUT", "percohom-out")) / "acceptance"
    out.mkdir(parents=True, exist_ok=True)
    verdicts = acc.run_all(profile, args.seed, workers, crit, out)
    failed = [v.number for v in verdicts if not v.passed]
    print(f"{len(verdicts) - len(failed)}/{len(verdicts)} criteria passed" + (f"; failed: {failed}" if failed else ""))
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def cmd_export_cloud(args):
    d = args.d
    box = TriadicCube.origin(args.level, d).box if args.level is not None else Cube((0,) * d, args.side).box
    cloud = sample_poisson(box, args.lam, args.seed)
    path = Path(args.path)
    if path.suffix == ".csv":
        write_cloud_csv(cloud, path)
    else:
        write_cloud(cloud, path)
    print(f"{len(cloud)} points -> {path}")
    return EXIT_OK


def cmd_inspect_graph(args):
    from .cluster import build_graph, estimate_theta, well_connected_check

    cloud = read_cloud(args.path)
    g = build_graph(cloud)
    star = g.largest()
    sizes = np.bincount(g.labels) if g.n else np.zeros(0, dtype=int)
    info = {
        "points": len(cloud),
        "d": cloud.d,
        "lam": cloud.intensity,
        "edges": int(g.adj.nnz // 2),
        "components": g.n_components,
        "largest": int(star.n),
        "second_largest": int(np.sort(sizes)[-2]) if len(sizes) > 1 else 0,
        "mean_degree": float(g.degrees().mean()) if g.n else 0.0,
    }
    side = int(np.floor(np.min(cloud.box.sides)))
    side -= 1 - side % 2
    if side >= 3:
        th = estimate_theta(cloud.intensity, cloud.d).theta
        cube = Cube(tuple(np.round((np.asarray(cloud.box.lo) + np.asarray(cloud.box.hi)) / 2).astype(int)), side)
        if all(cube.box.lo[i] >= cloud.box.lo[i] and cube.box.hi[i] <= cloud.box.hi[i] for i in range(cloud.d)):
            info["well_connected"] = json.loads(well_connected_check(cloud, cube, th).to_json())
    print(json.dumps(info, indent=2))
    return EXIT_OK


def make_parser():
    p = argparse.ArgumentParser(prog="percohom", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser(
        "run",
        help="run one experiment pipeline",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        description="Flags override values read from --config (flat key = value text). "
        "PERCOHOM_OUT and PERCOHOM_WORKERS override the out/workers defaults.",
    )
    r.add_argument("--config", help="flat key = value config file")
    for f in fields(ExperimentConfig):
        default = f.default if not isinstance(f.default, tuple) else ",".join(map(str, f.default))
        help_ = f"{_TYPES[f.name].__name__}; default {default}"
        if f.name == "kind":
            help_ += f"; one of {', '.join(KINDS)}"
        r.add_argument(f"--{f.name}", default=None, help=help_)
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("check", help="run the acceptance suite and print a pass/fail table")
    c.add_argument("--profile", choices=("full", "reduced"), default="full")
    c.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--workers", type=int, default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_check)

    e = sub.add_parser("export-cloud", help="sample a Poisson cloud and write it (.pcld binary or .csv)")
    e.add_argument("path")
    e.add_argument("--lam", type=float, default=4.0)
    e.add_argument("--d", type=int, default=2)
    e.add_argument("--seed", type=int, default=0)
    g = e.add_mutually_exclusive_group()
    g.add_argument("--level", type=int, default=None, help="origin triadic cube of this level")
    g.add_argument("--side", type=int, default=27, help="odd side of a cube centred at 0")
    e.set_defaults(fn=cmd_export_cloud)

    i = sub.add_parser("inspect-graph", help="summarise the unit-distance graph of a stored cloud")
    i.add_argument("path")
    i.set_defaults(fn=cmd_inspect_graph)
    return p


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
