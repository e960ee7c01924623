"""Command-line driver.

    mlcoag <command> --config cfg.json [--set path=value ...] [--out DIR] [--dry-run]

Every run writes its outputs plus ``manifest.json`` (resolved config, its
hash, seed, package versions, wall time) into the output directory.  Exit
status: 0 success, 1 runtime error, 2 invalid config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import config as C

EXIT_OK, EXIT_RUNTIME, EXIT_SCHEMA = 0, 1, 2


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def write_json(path: Path, obj) -> Path:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _finite(x):
    return x if x is not None and math.isfinite(x) else None


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg, out: Path):
    from .simulator import simulate, summary_rows
    log = simulate(C.sim_config(cfg))
    p = out / "events.jsonl"
    with open(p, "w") as fh:
        for line in log.to_jsonl_lines():
            fh.write(line + "\n")
    L_list = cfg.get("L_list", [cfg.get("L", 100)])
    times = cfg.get("times", list(np.linspace(0, cfg["T"], 11)))
    rows = summary_rows(log, times, L_list)
    N = float(cfg["N"])
    rows = [[float(r[0]), r[1]] + [m / N for m in r[2:]] for r in rows]
    s = write_csv(out / "summary.csv", ["t", "particles"] + [f"non_gel_mass_L{L}" for L in L_list], rows)
    return [p, s]


def cmd_decompose(cfg, out: Path):
    from .simulator import simulate
    from .trajectories import decompose
    forest = decompose(simulate(C.sim_config(cfg)))
    p = out / "trees.jsonl"
    with open(p, "w") as fh:
        for tr in forest.trees:
            fh.write(json.dumps(tr.to_json()) + "\n")
    s = write_csv(out / "tree_sizes.csv", ["tree", "size"], enumerate(forest.sizes.tolist()))
    return [p, s]


def cmd_observables(cfg, out: Path):
    from .plotting import plot_histogram
    from .simulator import simulate
    from .trajectories import final_sizes, observables_from_sizes
    obs = observables_from_sizes(final_sizes(simulate(C.sim_config(cfg))), float(cfg["N"]), cfg["L_list"])
    a = write_csv(out / "observables.csv", ["L", "non_gel_mass"], zip(obs.L, obs.non_gel_mass))
    b = write_csv(out / "size_hist.csv", ["size", "count"], obs.size_hist)
    c = write_json(out / "observables.json", {"second_moment": obs.second_moment, "N": obs.N})
    plot_histogram(obs.size_hist, out / "size_hist.png")
    return [a, b, c, out / "size_hist.png"]


def cmd_qmass(cfg, out: Path):
    from .kernels import compute_H
    from .measures import Configuration
    from .reference import SigmaTable, mc_q_limit, q_mass, q_mass_bound
    o = C.build_objects(cfg)
    K, U, T = o["kernel"], o["placement"], float(cfg["T"])
    H, _ = compute_H(K)
    site = cfg["k"][0] if "k" in cfg else 0
    table = SigmaTable(K, U)
    rows = []
    for n in range(1, min(int(cfg["n_max"]), 12) + 1):
        rows.append([n, q_mass(Configuration.atoms([site] * n), T, K, U, table), "exact", q_mass_bound(n, T, H)])
    files = [write_csv(out / "qmass.csv", ["n", "value", "method", "bound"], rows)]
    if "mc" in cfg:
        k = cfg.get("k", [0, 0, 0])
        res = mc_q_limit(k, T, K, cfg["mc"].get("N_list", [100, 1000, 10000]),
                         cfg["mc"].get("replicas", 100_000), U, seed=int(cfg.get("seed", 0)),
                         method=cfg.get("method", "tilted"))
        exact = q_mass(k, T, K, U) if len(k) <= 12 else float("nan")
        files.append(write_csv(out / "qlimit.csv", ["N", "estimate", "std_err", "hits", "replicas", "q_mass"],
                               [[r.N, r.estimate, r.std_err, r.hits, r.replicas, exact] for r in res]))
    return files


def cmd_mtable(cfg, out: Path):
    from .kernels import compute_H
    from .plotting import plot_size_table
    from .reference import m_moment_bound, size_mass_table
    o = C.build_objects(cfg)
    T, b = float(cfg["T"]), float(cfg.get("b", 1.0))
    H, _ = compute_H(o["kernel"])
    tab = size_mass_table(o["kernel"], o["placement"], o["space"], T, b, int(cfg["n_max"]),
                          seed=int(cfg.get("seed", 0)))
    n = tab.sizes()
    bounds = [m_moment_bound(int(i), T, H, b) for i in n]
    p = write_csv(out / "mtable.csv", ["n", "value", "method", "bound", "std_err"],
                  zip(n.tolist(), tab.M.tolist(), tab.method, bounds, tab.std_err.tolist()))
    plot_size_table(n, tab.M, bounds, out / "mtable.png", "M_n")
    return [p, out / "mtable.png"]


def cmd_el_solve(cfg, out: Path):
    from .analysis import el_fixed_point, el_second_moment_bound, supercritical_D_bounds
    from .kernels import compute_H, compute_h
    from .plotting import plot_size_table
    from .reference import size_mass_table
    o = C.build_objects(cfg)
    K = o["kernel"]
    if not (K.variant == "multiplicative" and o["space"].site_count == 1):
        raise ValueError("el-solve needs the nonspatial multiplicative kernel (size-reduced equation)")
    T, L = float(cfg["T"]), int(cfg["L"])
    H, h = compute_H(K)[0], compute_h(K)[0]
    tab = size_mass_table(K, o["placement"], o["space"], T, 1.0, L)
    sol = el_fixed_point(T, tab, L, cfg.get("damping", 0.5), cfg.get("tol", 1e-13), cfg.get("max_iter", 100_000))
    report = {"T": T, "L": L, "D": sol.D, "converged": sol.converged, "iterations": sol.iterations,
              "residual": sol.residual, "second_moment": sol.second_moment,
              "second_moment_bound": _finite(el_second_moment_bound(T, H)),
              "supercritical_bounds": {k: _finite(v) for k, v in supercritical_D_bounds(T, H, h).items()}}
    a = write_json(out / "el.json", report)
    n = np.arange(1, L + 1)
    b = write_csv(out / "el_nu.csv", ["n", "nu", "M"], zip(n.tolist(), sol.nu_n.tolist(), tab.M[:L].tolist()))
    plot_size_table(n, sol.nu_n, tab.M[:L], out / "el_nu.png", "nu_n (bound: M_n)")
    return [a, b, out / "el_nu.png"]


def cmd_gel_bounds(cfg, out: Path):
    from .analysis import gelation_bounds
    from .kernels import compute_H, compute_h
    from .plotting import plot_i_lower
    if "kernel" in cfg:
        K = C.build_objects(cfg)["kernel"]
        H, h = compute_H(K)[0], compute_h(K)[0]
    else:
        H, h = float(cfg["H"]), float(cfg["h"])
    rep = gelation_bounds(H, h)
    a = write_json(out / "gel_bounds.json", {"H": rep.H, "h": rep.h, "t_gel_lower": rep.t_gel_lower,
                                              "uniqueness_T": rep.uniqueness_T, "t_gel_upper": rep.t_gel_upper})
    b = write_csv(out / "i_lower.csv", ["T", "I_lower"], rep.I_lower)
    plot_i_lower(rep.I_lower, rep.t_gel_upper, out / "i_lower.png")
    return [a, b, out / "i_lower.png"]


def cmd_gibbs_check(cfg, out: Path):
    from .analysis import gibbs_check
    r = gibbs_check(C.sim_config(cfg), cfg.get("f", "one"), float(cfg.get("b", 1.0)),
                    int(cfg.get("replicas", 20_000)))
    return [write_json(out / "gibbs.json", {"lhs": r.lhs, "lhs_err": r.lhs_err, "rhs": r.rhs,
                                            "rhs_err": r.rhs_err, "z": r.z_score,
                                            "reference_mass": r.reference_mass,
                                            "truncation_tail": r.truncation_tail})]


def cmd_ng_scan(cfg, out: Path):
    from .analysis import ng_scan
    from .plotting import plot_ng_scan
    o = C.build_objects(cfg)
    rows = ng_scan(o["kernel"], cfg["T_list"], cfg["N_list"], cfg["L_list"], int(cfg["replicas"]),
                   o["placement"], o["space"], int(cfg.get("seed", 0)), cfg.get("workers"))
    p = write_csv(out / "ng_scan.csv", ["T", "N", "L", "mean", "std_err", "gel"],
                  [[r["T"], r["N"], r["L"], r["mean"], r["std_err"], int(r["gel"])] for r in rows])
    plot_ng_scan(rows, out / "ng_scan.png")
    return [p, out / "ng_scan.png"]


def cmd_smol(cfg, out: Path):
    from .plotting import plot_smol
    from .smoluchowski import DensityGrid, smol_solve
    o = C.build_objects(cfg)
    T, L = float(cfg["T"]), int(cfg["L"])
    times = cfg.get("times", [T])
    snaps = smol_solve(DensityGrid.monodisperse(o["space"], L), o["kernel"], o["placement"], T,
                       float(cfg["dt"]), times, cfg.get("half", True))
    rows = []
    for g in snaps:
        for x in range(g.rho.shape[0]):
            for m in range(L):
                rows.append([g.T_current, x, m + 1, float(g.rho[x, m])])
    a = write_csv(out / "smol.csv", ["t", "site", "mass", "density"], rows)
    b = write_json(out / "smol.json", [{"t": g.T_current, "mass": g.total_mass(), "second_moment": g.moment(2),
                                         "leaked_mass": g.leaked_mass, "clamped_mass": g.clamped_mass}
                                        for g in snaps])
    plot_smol(snaps, out / "smol.png")
    return [a, b, out / "smol.png"]


def cmd_smol_vs_sim(cfg, out: Path):
    from .plotting import plot_distances
    from .smoluchowski import smol_vs_simulation
    rows = smol_vs_simulation(C.sim_config(cfg), int(cfg["L"]), float(cfg["dt"]), cfg["t_checkpoints"],
                              int(cfg.get("replicas", 20)))
    p = write_csv(out / "smol_vs_sim.csv", ["t", "distance", "mc_err", "distance_no_half"],
                  [[r["t"], r["distance"], r["mc_err"], r["distance_no_half"]] for r in rows])
    plot_distances(rows, out / "smol_vs_sim.png")
    return [p, out / "smol_vs_sim.png"]


COMMANDS = {
    "simulate": cmd_simulate, "decompose": cmd_decompose, "observables": cmd_observables,
    "qmass": cmd_qmass, "mtable": cmd_mtable, "el-solve": cmd_el_solve,
    "gel-bounds": cmd_gel_bounds, "gibbs-check": cmd_gibbs_check, "ng-scan": cmd_ng_scan,
    "smol": cmd_smol, "smol-vs-sim": cmd_smol_vs_sim,
}


def _versions():
    import matplotlib
    from importlib import metadata
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "matplotlib": matplotlib.__version__, "mlcoag": own}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(command: str, config_path: str | None, overrides=(), out_dir: str | None = None,
        dry_run: bool = False, stream=None) -> int:
    stream = stream or sys.stdout
    try:
        cfg = {}
        if config_path:
            with open(config_path) as fh:
                cfg = json.load(fh)
            if not isinstance(cfg, dict):
                raise C.ConfigError("invalid config\n  $: top level must be an object")
        for ov in overrides:
            cfg = C.apply_override(cfg, ov)
        if cfg.get("command", command) != command:
            raise C.ConfigError(f"invalid config\n  $.command: config is for {cfg['command']!r}, not {command!r}")
        cfg.pop("command", None)
        C.validate(cfg, command)
    except (C.ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"mlcoag {command}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA

    out = Path(out_dir or cfg.get("out", "out"))
    plan = {"command": command, "config": cfg, "config_hash": C.config_hash(cfg), "out": str(out),
            "workers_cap": os.environ.get("MLCOAG_WORKERS")}
    if dry_run:
        print(json.dumps(plan, indent=2, sort_keys=True), file=stream)
        return EXIT_OK
    try:
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            files = COMMANDS[command](cfg, out)
        wall = time.perf_counter() - t0
    except Exception as exc:  # noqa: BLE001
        print(f"mlcoag {command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    manifest = {
        "command": command, "config": cfg, "config_hash": plan["config_hash"],
        "seed": cfg.get("seed", 0), "versions": _versions(), "wall_time_s": wall,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "warnings": [str(w.message) for w in caught],
        "outputs": {p.name: _sha256(p) for p in files},
    }
    write_json(out / "manifest.json", manifest)
    for p in files:
        print(p, file=stream)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlcoag", description="Spatial coagulation experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field, e.g. kernel.variant=additive")
        p.add_argument("--out", "-o", help="output directory (default: config 'out' or ./out)")
        p.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.set, args.out, args.dry_run)


if __name__ == "__main__":
    sys.exit(main())
