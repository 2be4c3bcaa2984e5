"""Experiment runner: ``w2delta <subcommand> --config cfg.json --out dir``.

Config schema (JSON object; every key optional unless a subcommand needs it)::

    domain    {"profile", "amplitude", "frequency", "alpha", "R", "n", "center"}
    h         mesh width (a power of two for "chain"); "verify" takes "hs": [...]
    s_max     finest Whitney level (2..24)
    spec      {"delta", "delta0", "p", "alpha", "alpha0", "alpha_bar", "lam", "Lam"}
    solution  {"name", "alpha0", "k", "A", "b", "c", "coeffs", "solve", "method"}
    options   subcommand-specific settings (see SUBCOMMAND_OPTIONS)

Data files in --out are deterministic for a fixed config and seed; the
timestamp and wall time live only in manifest.json.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from .errors import ConfigError, ConvergenceError, CoverGapError
from .estimates import (Chart, QuasiNormSpec, combined_size, cube_chain_report, global_patch,
                        holder_boundary_fit, theorem_ratio, threshold_table)
from .geom import GraphDomain
from .pucci import Ellipticity, hand_examples, identity_suite, in_S_discrete
from .solutions import CutCellGrid, ManufacturedSolution, sample, solve_linear
from .whitney import (S_MAX_RANGE, audit_cover, decompose, dyadic_sum, export_cover_csv, layers,
                      log2_slope, overlap_count, sample_domain, verify_cover_inclusion)

__version__ = "0.1.0"

TOP_KEYS = {"domain", "h", "hs", "s_max", "spec", "solution", "options"}
SUBCOMMAND_OPTIONS = {
    "decompose": {"overlap_samples", "inclusion_samples"},
    "sums": {"q", "s_min"},
    "pucci-check": {"count"},
    "solve": {"report_tol", "trunc_const"},
    "boundary-fit": {"radii", "x0"},
    "chain": {"min_cells", "s_maxes"},
    "verify": {"inner_radius"},
    "patch": {"charts", "T", "omega_prime", "samples"},
    "sharpness": {"alpha0s", "deltas", "levels"},
}


# ---------------------------------------------------------------------------
# config

def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not text.strip():
        raise ConfigError("config file is empty")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or not cfg:
        raise ConfigError("config must be a non-empty JSON object")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _options(cfg, sub):
    opts = dict(cfg.get("options", {}))
    unknown = set(opts) - SUBCOMMAND_OPTIONS[sub]
    if unknown:
        raise ConfigError(f"unknown options for {sub}: {sorted(unknown)}")
    return opts


def _domain(cfg):
    return GraphDomain.from_dict(cfg.get("domain", {}))


def _spec(cfg, n):
    d = dict(cfg.get("spec", {}))
    lam, Lam = float(d.pop("lam", 1.0)), float(d.pop("Lam", 2.0))
    allowed = {"delta", "delta0", "p", "alpha", "alpha0", "alpha_bar"}
    if set(d) - allowed:
        raise ConfigError(f"unknown spec keys: {sorted(set(d) - allowed)}")
    return QuasiNormSpec(n=n, **{k: float(v) for k, v in d.items()}), Ellipticity(lam, Lam)


def _s_max(cfg, default=10):
    s = int(cfg.get("s_max", default))
    if not S_MAX_RANGE[0] <= s <= S_MAX_RANGE[1]:
        raise ConfigError(f"s_max must lie in {S_MAX_RANGE}")
    return s


def _h(cfg, default=1 / 128):
    h = float(cfg.get("h", default))
    if not 0 < h < 1:
        raise ConfigError("h must lie in (0, 1)")
    return h


def _solution(cfg, domain, ellipticity):
    d = dict(cfg.get("solution", {"name": "smooth-bump"}))
    solve = bool(d.pop("solve", True))
    method = d.pop("method", "direct")
    name = d.pop("name", "smooth-bump")
    for key in ("A", "b", "k", "coeffs"):
        if key in d:
            d[key] = np.asarray(d[key], dtype=float)
    ms = ManufacturedSolution(name, n=domain.dim, ellipticity=ellipticity, **d)
    return ms, solve, method


def _grid_data(domain, h, ms, solve, method):
    grid = CutCellGrid(domain, h)
    u, f, g = sample(ms, grid)
    if solve:
        u = solve_linear(domain, tuple(ms.coeffs), f, g, h, method=method, grid=grid,
                         ellipticity=ms.ellipticity)
    return grid, u, f, g


# ---------------------------------------------------------------------------
# output helpers

def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows, columns=None):
    columns = columns or list(rows[0]) if rows else (columns or [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


# ---------------------------------------------------------------------------
# subcommands; each returns a summary dict and writes data files into ``out``

def cmd_decompose(cfg, out, seed, threads):
    opts = _options(cfg, "decompose")
    dom = _domain(cfg)
    cover = decompose(dom, _s_max(cfg, 12))
    audit = audit_cover(cover)
    pts = sample_domain(dom, int(opts.get("overlap_samples", 100_000)), seed=seed)
    counts = overlap_count(cover, pts)
    inclusion = verify_cover_inclusion(cover, samples=int(opts.get("inclusion_samples", 10_000)), seed=seed)
    export_cover_csv(cover, out / "cover.csv")
    rows = [{"s": L.s, "cubes": len(L), "diam": L.diam} for L in layers(cover)]
    write_csv(out / "layers.csv", rows, ["s", "cubes", "diam"])
    summary = dict(audit, overlap_max=int(counts.max()), overlap_bound=12 ** dom.dim,
                   cover_inclusion=inclusion)
    summary["passed"] = bool(audit["disjoint"] and audit["maximal"] and audit["property_iii"]
                             and counts.max() <= 12 ** dom.dim and inclusion)
    return summary


def cmd_sums(cfg, out, seed, threads):
    opts = _options(cfg, "sums")
    dom = _domain(cfg)
    cover = decompose(dom, _s_max(cfg, 12))
    s_min = int(opts.get("s_min", 5))
    rows, table = [], []
    for q in opts.get("q", [1.0, 1.25, 1.5, 2.0]):
        total, per = dyadic_sum(cover, float(q))
        lv = list(range(s_min, cover.s_max + 1))
        slope = log2_slope([per[s] for s in lv], lv)
        convergent = bool(slope < -0.1)
        table.append({"q": float(q), "total": total, "slope": slope, "expected_slope": -(float(q) - dom.dim + 1),
                      "convergent": convergent})
        for s, v in enumerate(per):
            rows.append({"q": float(q), "s": s, "S_s": v, "slope": slope, "convergent": convergent})
    write_csv(out / "sums.csv", rows, ["q", "s", "S_s", "slope", "convergent"])
    write_csv(out / "slopes.csv", table, ["q", "total", "slope", "expected_slope", "convergent"])
    return {"rows": table}


def cmd_pucci_check(cfg, out, seed, threads):
    opts = _options(cfg, "pucci-check")
    _, e = _spec(cfg, 2)
    count = int(opts.get("count", 100_000))
    dims = [2, 3]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        results = list(ex.map(lambda n: identity_suite(count, n, e, seed + n), dims))
    rows = [{"n": n, "identity": k, "max_violation": v} for n, r in zip(dims, results) for k, v in r.items()]
    write_csv(out / "identities.csv", rows, ["n", "identity", "max_violation"])
    hand = {k: list(v) for k, v in hand_examples(e).items()}
    worst = max(r["max_violation"] for r in rows)
    return {"max_violation": worst, "hand_examples": hand, "passed": worst <= 1e-9}


def cmd_solve(cfg, out, seed, threads):
    opts = _options(cfg, "solve")
    dom = _domain(cfg)
    _, e = _spec(cfg, dom.dim)
    ms, solve, method = _solution(cfg, dom, e)
    h = _h(cfg)
    grid, u, f, g = _grid_data(dom, h, ms, solve, method)
    exact = sample(ms, grid)[0]
    err = float(np.max(np.abs(u.values[: grid.n_interior] - exact.values[: grid.n_interior])))
    rep = in_S_discrete(u, f, e, report_tol=float(opts.get("report_tol", 1e-8)),
                        trunc_const=float(opts.get("trunc_const", 0.0)))
    u.to_csv(out / "u.csv")
    rep.to_csv(out / "membership.csv")
    return {"h": h, "n_interior": grid.n_interior, "max_error": err, "membership_fraction": rep.fraction,
            "min_margin": rep.min_margin, "tau": rep.tau, "residual": u.meta.get("residual", 0.0)}


def cmd_boundary_fit(cfg, out, seed, threads):
    opts = _options(cfg, "boundary-fit")
    dom = _domain(cfg)
    spec, e = _spec(cfg, dom.dim)
    ms, solve, method = _solution(cfg, dom, e)
    grid, u, f, g = _grid_data(dom, _h(cfg, 1 / 256), ms, solve, method)
    radii = [float(r) for r in opts.get("radii", [2.0**-k for k in range(3, 7)])]
    if "x0" in opts:
        x0 = np.asarray(opts["x0"], dtype=float)
    else:
        b = grid.points[grid.graph_boundary_nodes()]
        x0 = b[np.argmin(np.linalg.norm(b[:, :-1] - dom.c[:-1], axis=1))]
    fit = holder_boundary_fit(u, x0, spec, radii)
    rows = [{"r": r, "ratio": v} for r, v in zip(fit.radii, fit.per_radius)]
    write_csv(out / "fit.csv", rows, ["r", "ratio"])
    return {"x0": fit.x0, "value": fit.value, "slope": fit.slope, "C_fit": fit.C_fit,
            "spread": float(fit.per_radius.max() / fit.per_radius.min())}


def cmd_chain(cfg, out, seed, threads):
    opts = _options(cfg, "chain")
    dom = _domain(cfg)
    spec, e = _spec(cfg, dom.dim)
    ms, solve, method = _solution(cfg, dom, e)
    grid, u, f, g = _grid_data(dom, _h(cfg), ms, solve, method)
    s_maxes = [int(s) for s in opts.get("s_maxes", [_s_max(cfg)])]
    H = combined_size(u, f, g, spec)
    summaries = {}
    for s in s_maxes:
        rep = cube_chain_report(u, f, decompose(dom, s), spec, g=g, H=H["H"],
                                min_cells=int(opts.get("min_cells", 8)))
        rep.summary.update(H)
        rep.to_csv(str(out / f"chain_s{s}"))
        rep.to_json(out / f"chain_s{s}.json")
        summaries[f"s_max={s}"] = {"summary": rep.summary, "verdicts": rep.verdicts, "flags": rep.flags}
    return summaries


def cmd_verify(cfg, out, seed, threads):
    opts = _options(cfg, "verify")
    dom = _domain(cfg)
    spec, e = _spec(cfg, dom.dim)
    ms, solve, method = _solution(cfg, dom, e)
    hs = [float(h) for h in cfg.get("hs", [1 / 64, 1 / 128, 1 / 256])]
    inner = float(opts.get("inner_radius", 1 / 12))

    def one(h):
        grid, u, f, g = _grid_data(dom, h, ms, solve, method)
        return {"h": h, "theorem_ratio": theorem_ratio(u, f, g, spec, inner_radius=inner)}

    with ThreadPoolExecutor(max_workers=threads) as ex:
        rows = list(ex.map(one, hs))
    vals = [r["theorem_ratio"] for r in rows]
    finite = all(math.isfinite(v) for v in vals)
    spread = max(vals) / min(vals) if finite and min(vals) > 0 else (1.0 if finite and max(vals) == 0 else math.inf)
    write_csv(out / "ratios.csv", rows, ["h", "theorem_ratio"])
    return {"ratios": rows, "spread": spread, "verdict": "stable" if finite and spread <= 3 else "unstable",
            "admissible": spec.admissible, "violations": spec.violations()}


def cmd_patch(cfg, out, seed, threads):
    opts = _options(cfg, "patch")
    dom = _domain(cfg)
    spec, e = _spec(cfg, dom.dim)
    ms, solve, method = _solution(cfg, dom, e)
    grid, u, f, g = _grid_data(dom, _h(cfg, 1 / 512), ms, solve, method)
    charts = [Chart.at(dom, c["x"], c["r"]) for c in opts.get("charts", [{"x": -0.008, "r": 0.24},
                                                                         {"x": 0.008, "r": 0.24}])]
    T = opts.get("T", [-0.025, 0.025])
    op = opts.get("omega_prime", {"center": list(dom.center), "r": 0.012})
    try:
        res = global_patch(charts, u, f, spec, T, (np.asarray(op["center"], dtype=float), float(op["r"])),
                           g=g, samples=int(opts.get("samples", 10_000)))
    except CoverGapError as exc:
        write_csv(out / "uncovered.csv", [{"x%d" % i: p[i] for i in range(dom.dim)} for p in exc.uncovered],
                  [f"x{i}" for i in range(dom.dim)])
        return {"cover_gap": True, "uncovered": len(exc.uncovered), "message": str(exc)}
    rows = [{"chart": i, "x": c.center, "r": c.r, "ratio": v} for i, (c, v) in enumerate(zip(charts, res.local))]
    rows.append({"chart": "interior", "x": "", "r": "", "ratio": res.interior})
    write_csv(out / "patch.csv", rows, ["chart", "x", "r", "ratio"])
    return {"cover_gap": False, "global_ratio": res.value, "finite": math.isfinite(res.value)}


def cmd_sharpness(cfg, out, seed, threads):
    opts = _options(cfg, "sharpness")
    a0s = [float(a) for a in opts.get("alpha0s", [0.3, 0.4, 0.5, 0.6, 0.7])]
    ds = [float(d) for d in opts.get("deltas", [0.5, 1.0, 1.25, 1.55, 1.85])]
    levels = [int(v) for v in opts.get("levels", [7, 8, 9, 10, 11])]
    rows = threshold_table(a0s, ds, levels)
    cols = ["alpha0", "delta", "predicted_stable", "stable", "slope", "value", "closed_form", "rel_err"]
    write_csv(out / "threshold.csv", rows, cols)
    agree = all(r["stable"] == r["predicted_stable"] for r in rows)
    errs = [r["rel_err"] for r in rows if r["stable"]]
    return {"verdicts_agree": agree, "max_rel_err": max(errs) if errs else math.nan}


COMMANDS = {
    "decompose": cmd_decompose,
    "sums": cmd_sums,
    "pucci-check": cmd_pucci_check,
    "solve": cmd_solve,
    "boundary-fit": cmd_boundary_fit,
    "chain": cmd_chain,
    "verify": cmd_verify,
    "patch": cmd_patch,
    "sharpness": cmd_sharpness,
}


def build_parser():
    p = argparse.ArgumentParser(prog="w2delta", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
    return p


def run(command, config_path, out, seed=0, threads=1):
    """Execute one subcommand; returns the summary dict."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown subcommand {command!r}")
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    cfg = load_config(config_path)
    _spec(cfg, _domain(cfg).dim)  # validate shared sections for every subcommand
    _options(cfg, command)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary = COMMANDS[command](cfg, out, seed % 2**32, threads)
    wall = time.perf_counter() - t0
    write_json(out / "summary.json", {"command": command, "seed": seed, "config": cfg, "result": summary})
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    write_json(out / "manifest.json", {
        "command": command, "seed": seed, "threads": threads,
        "config_sha256": hashlib.sha256(canonical).hexdigest(),
        "versions": {"w2delta": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "wall_time_s": wall, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "files": {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in files},
    })
    return summary


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        summary = run(args.command, args.config, args.out, args.seed, args.threads)
    except (ConfigError, ConvergenceError, ValueError) as exc:
        print(f"w2delta {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(_clean(summary), sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
