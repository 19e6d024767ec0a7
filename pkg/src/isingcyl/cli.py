"""Command-line interface: batch experiment runner and verification harness.

Every verb computes a library quantity, optionally verifies it against its
independent oracle, and emits machine-readable output (JSON for structured
results, CSV for tabular data) with a metadata header carrying the package
version, a hash of the effective configuration and the tolerances in
force.

Exit codes: 0 success, 1 configuration error, 2 verification failure,
3 numerical failure (root instability, singular inversion, non-converged
sums).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import re
import sys

import numpy as np

from . import __version__
from .freecorr import (
    CorrelationRequest, FreeCorrelator, enumerate_cumulant, enumerate_gibbs,
    evaluate_request, partition_function_free,
)
from .lattice import CylinderGeometry, Edge
from .multiscale import (
    LEQ, ScaleCutoff, bulk_edge_split, edge_decay_profile, envelope_decay_fit,
    scale_norm_profile, scale_propagator, smooth_sector_propagator,
)
from .propagators import (
    DoublingError, LazyCriticalTable, ModelParams, RootCountError,
    critical_propagator_direct, critical_propagator_fourier,
    massive_propagator, massive_propagator_direct, max_block_difference,
    scaling_propagator,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VERIFY = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    """Invalid configuration, reported with exit code 1."""


class VerificationError(Exception):
    """A verify-mode residual exceeded its tolerance (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Output plumbing.
# ---------------------------------------------------------------------------


def _metadata(config, tolerances):
    blob = json.dumps(config, sort_keys=True, default=str)
    return {
        "version": __version__,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
        "config": config,
        "tolerances": tolerances,
    }


def _emit_json(doc, path):
    text = json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _emit_csv(metadata, header, rows, path):
    out = io.StringIO()
    for key in ("version", "config_hash"):
        out.write(f"# {key}: {metadata[key]}\n")
    out.write(f"# tolerances: {json.dumps(metadata['tolerances'], sort_keys=True)}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if path:
        with open(path, "w") as fh:
            fh.write(out.getvalue())
    else:
        sys.stdout.write(out.getvalue())


def _build_params(args):
    try:
        if getattr(args, "beta", None) is not None:
            params = ModelParams.from_beta(args.beta, args.J1, args.J2)
            if getattr(args, "critical", False):
                raise ConfigError("--critical conflicts with --beta; "
                                  "give --t1 instead")
            return params
        if getattr(args, "t1", None) is None:
            raise ConfigError("either --t1 or --beta is required")
        if getattr(args, "critical", True):
            return ModelParams.critical(args.t1)
        if getattr(args, "t2", None) is None:
            raise ConfigError("non-critical parameters need both --t1 and --t2")
        return ModelParams(t1=args.t1, t2=args.t2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build_geom(args):
    try:
        return CylinderGeometry(args.L, args.M)
    except (ValueError, AssertionError) as exc:
        raise ConfigError(str(exc)) from exc


def _beta_for(params):
    """(beta, J1, J2) reproducing (t1, t2) in the spin model."""
    beta = math.atanh(params.t1)
    return beta, 1.0, math.atanh(params.t2) / beta


# ---------------------------------------------------------------------------
# Verbs.
# ---------------------------------------------------------------------------


def cmd_propagator(args):
    geom = _build_geom(args)
    params = _build_params(args)
    tols = {"verify": args.tol}
    if args.variant == "critical":
        if not params.is_critical:
            raise ConfigError("the critical variant requires critical "
                              "parameters (--critical with --t1)")
        table = critical_propagator_fourier(geom, params)
    else:
        table = massive_propagator(geom, params)

    config = {"command": "propagator", "L": args.L, "M": args.M,
              "t1": params.t1, "t2": params.t2, "variant": args.variant}
    meta = _metadata(config, tols)

    report = {"metadata": meta, "variant": table.variant}
    if args.verify:
        direct = (critical_propagator_direct(geom, params)
                  if args.variant == "critical"
                  else massive_propagator_direct(geom, params))
        residual = max_block_difference(table, direct, geom.sites())
        report["oracle_residual"] = residual
        if args.variant == "critical":
            worst = 0.0
            for x in range(1, geom.L + 1):
                for z in [(1, 1), (geom.L, geom.M)]:
                    bd = table.block((x, 0), z)
                    bu = table.block((x, geom.M + 1), z)
                    worst = max(worst, abs(bd[0, 0]), abs(bd[0, 1]),
                                abs(bu[1, 0]), abs(bu[1, 1]))
            report["boundary_residual"] = worst
        if max(report.get("oracle_residual", 0.0),
               report.get("boundary_residual", 0.0)) > args.tol:
            _emit_json(report, args.output if args.format == "json" else None)
            raise VerificationError(
                f"propagator residual above {args.tol}")

    if args.format == "json":
        entries = []
        for x2 in range(0, geom.M + 2):
            for x1p in range(1, geom.L + 1):
                for x2p in range(0, geom.M + 2):
                    blk = table.block((1, x2), (x1p, x2p))
                    entries.append({"z": [1, x2], "zp": [x1p, x2p],
                                    "block": np.real(blk).tolist()})
        report["entries"] = entries
        _emit_json(report, args.output)
    else:
        rows = []
        for x2 in range(0, geom.M + 2):
            for x1p in range(1, geom.L + 1):
                for x2p in range(0, geom.M + 2):
                    blk = table.block((1, x2), (x1p, x2p))
                    for w in (0, 1):
                        for wp in (0, 1):
                            v = complex(blk[w, wp])
                            rows.append([1, x2, x1p, x2p, w, wp,
                                         f"{v.real:.17g}", f"{v.imag:.17g}"])
        _emit_csv(meta, ["z1", "z2", "z1p", "z2p", "omega", "omegap",
                         "re", "im"], rows, args.output)
    return EXIT_OK


def cmd_partition(args):
    geom = _build_geom(args)
    z = partition_function_free(geom, args.beta, args.J1, args.J2)
    config = {"command": "partition", "L": args.L, "M": args.M,
              "beta": args.beta, "J1": args.J1, "J2": args.J2}
    report = {"metadata": _metadata(config, {"verify": args.tol}),
              "Z": z, "log_Z": math.log(z)}
    if args.verify:
        try:
            z_enum = enumerate_gibbs(geom, args.beta, args.J1, args.J2).Z
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        delta = abs(z - z_enum) / z_enum
        report["Z_enumeration"] = z_enum
        report["delta_rel"] = delta
        if delta > args.tol:
            _emit_json(report, args.output)
            raise VerificationError(
                f"partition delta {delta:.3e} above {args.tol}")
    _emit_json(report, args.output)
    return EXIT_OK


def _load_request(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read request {path}: {exc}") from exc
    try:
        p = doc["params"]
        geom = CylinderGeometry(p["L"], p["M"])
        if p.get("critical", True):
            params = ModelParams.critical(p["t1"])
        else:
            params = ModelParams(t1=p["t1"], t2=p["t2"])
        edges = tuple(Edge((e["x1"], e["x2"]), e["dir"])
                      for e in doc["edges"])
        return CorrelationRequest(geom=geom, edges=edges,
                                  mode=doc.get("mode", "truncated"),
                                  params=params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid request: {exc}") from exc


def cmd_correlate(args):
    request = _load_request(args.request)
    value = evaluate_request(request)
    config = {"command": "correlate", "L": request.geom.L,
              "M": request.geom.M, "t1": request.params.t1,
              "t2": request.params.t2, "mode": request.mode,
              "edges": [[e.base[0], e.base[1], e.direction]
                        for e in request.edges]}
    report = {"metadata": _metadata(config, {"verify": args.tol}),
              "mode": request.mode, "value": value,
              "variant": "pfaffian-cumulant"}
    if args.verify:
        beta, J1, J2 = _beta_for(request.params)
        try:
            if request.mode == "truncated":
                oracle = enumerate_cumulant(request.geom, beta, J1, J2,
                                            request.edges)
            else:
                rec = enumerate_gibbs(request.geom, beta, J1, J2,
                                      request.edges)
                oracle = rec.moments[frozenset(range(len(request.edges)))]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        report["oracle"] = oracle
        report["oracle_delta"] = abs(value - oracle)
        if report["oracle_delta"] > args.tol:
            _emit_json(report, args.output)
            raise VerificationError(
                f"correlation delta {report['oracle_delta']:.3e} "
                f"above {args.tol}")
    _emit_json(report, args.output)
    return EXIT_OK


_POINT_RE = re.compile(r"\(\s*([0-9.eE+-]+)\s*,\s*([0-9.eE+-]+)\s*\)")


def _parse_points(text):
    pts = [(float(a), float(b)) for a, b in _POINT_RE.findall(text)]
    if len(pts) != 2:
        raise ConfigError(f"expected exactly two points, got {text!r}")
    return pts


def cmd_scaling(args):
    params = ModelParams.critical(args.t1)
    z, zp = _parse_points(args.points)
    if args.halvings < 1:
        raise ConfigError("--halvings must be at least 1")
    target = scaling_propagator(z, zp, 1.0, 1.0, params)
    rows = []
    errors = []
    n = args.start
    for _ in range(args.halvings + 1):
        geom = CylinderGeometry(n, n)
        table = (critical_propagator_fourier(geom, params) if n <= 32
                 else LazyCriticalTable(geom, params))
        blk = table.block((int(round(z[0] * n)), int(round(z[1] * n))),
                          (int(round(zp[0] * n)), int(round(zp[1] * n)))) * n
        err = float(np.max(np.abs(blk - target)))
        errors.append(err)
        rows.append({"a": 1.0 / n, "n": n, "error": err})
        n *= 2
    config = {"command": "scaling", "t1": args.t1, "points": [z, zp],
              "halvings": args.halvings, "start": args.start}
    report = {"metadata": _metadata(config, {}),
              "target_block": target.tolist(), "series": rows,
              "strictly_decreasing": all(
                  a > b for a, b in zip(errors, errors[1:]))}
    if args.verify and not report["strictly_decreasing"]:
        _emit_json(report, args.output)
        raise VerificationError("error column is not strictly decreasing")
    _emit_json(report, args.output)
    return EXIT_OK


def cmd_multiscale(args):
    geom = _build_geom(args)
    params = ModelParams.critical(args.t1)
    cut = ScaleCutoff.for_geometry(geom)
    smooth = smooth_sector_propagator(geom, params, cut)
    acc = scale_propagator(LEQ, geom, params, cut).data.copy()
    for h in cut.scales:
        acc += scale_propagator(h, geom, params, cut).data
    reconstruction = float(np.max(np.abs(acc - smooth.data)))

    h_fit = args.h if args.h is not None else min(cut.scales, default=0)
    split = bulk_edge_split(h_fit, geom, params, cut)
    split_residual = float(np.max(np.abs(
        split["bulk"].data + split["edge"].data - split["full"].data)))
    d, nrm = edge_decay_profile(h_fit, geom, params, cut, split=split)
    bin_width = args.bin_width
    if bin_width is None:
        # at least four envelope bins across the sampled distance range
        bin_width = max(1, int(np.ptp(d) // 4))
    fit = envelope_decay_fit(d, nrm, bin_width=bin_width)

    config = {"command": "multiscale", "L": args.L, "M": args.M,
              "t1": args.t1, "h": h_fit}
    meta = _metadata(config, {"reconstruction": args.tol})
    profile = scale_norm_profile(geom, params, cut)
    report = {
        "metadata": meta,
        "h_star": cut.h_star,
        "reconstruction_residual": reconstruction,
        "bulk_edge_residual": split_residual,
        "scale_norm_profile": {str(h): v for h, v in profile.items()},
        "edge_decay_fit": fit,
    }
    if args.format == "csv":
        rows = [[h_fit, float(di), f"{ni:.17g}"] for di, ni in zip(d, nrm)]
        _emit_csv(meta, ["h", "d_edge", "norm"], rows, args.output)
    else:
        report["edge_decay_profile"] = [
            {"d_edge": float(di), "norm": float(ni)}
            for di, ni in zip(d, nrm)]
        _emit_json(report, args.output)
    if args.verify and max(reconstruction, split_residual) > args.tol:
        raise VerificationError(
            f"multiscale residual above {args.tol}")
    return EXIT_OK


def cmd_kernels(args):
    from .acceptance import (
        check_kernel_cancellations, check_norm_battery, check_rg_step,
    )
    records = [
        check_kernel_cancellations(seed=args.seed),
        check_norm_battery(seed=args.seed, runs=args.runs),
        check_rg_step(seed=args.seed),
    ]
    config = {"command": "kernels", "seed": args.seed, "runs": args.runs}
    report = {
        "metadata": _metadata(config, {r["name"]: r["tolerance"]
                                       for r in records}),
        "checks": records,
        "all_passed": all(r["passed"] for r in records),
    }
    _emit_json(report, args.output)
    if args.verify and not report["all_passed"]:
        raise VerificationError("a kernel-calculus check failed")
    return EXIT_OK


def cmd_selftest(args):
    from .acceptance import run_acceptance
    only = set(args.only) if args.only else None
    records = run_acceptance(seed=args.seed, only=only)
    config = {"command": "selftest", "seed": args.seed,
              "only": sorted(only) if only else None}
    report = {
        "metadata": _metadata(config, {r["name"]: r["tolerance"]
                                       for r in records}),
        "criteria": records,
        "all_passed": all(r["passed"] for r in records),
    }
    _emit_json(report, args.output)
    if not report["all_passed"]:
        raise VerificationError("acceptance criteria failed: " + ", ".join(
            str(r["criterion"]) for r in records if not r["passed"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------


def _add_common(sub, geometry=True, output=True):
    if geometry:
        sub.add_argument("--L", type=int, required=True,
                         help="circumference (even)")
        sub.add_argument("--M", type=int, required=True, help="height")
    if output:
        sub.add_argument("--output", help="output path (default stdout)")
    sub.add_argument("--seed", type=int, default=0,
                     help="seed for randomized batteries")


def build_parser():
    parser = _Parser(prog="isingcyl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("propagator", help="propagator tables and residuals")
    _add_common(p)
    p.add_argument("--t1", type=float)
    p.add_argument("--t2", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--J1", type=float, default=1.0)
    p.add_argument("--J2", type=float, default=1.0)
    p.add_argument("--critical", action="store_true", default=True)
    p.add_argument("--no-critical", dest="critical", action="store_false")
    p.add_argument("--variant", choices=["critical", "massive"],
                   default="critical")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_propagator)

    p = sub.add_parser("partition", help="Pfaffian partition function")
    _add_common(p)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--J1", type=float, default=1.0)
    p.add_argument("--J2", type=float, default=1.0)
    p.add_argument("--verify", action="store_true")
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("correlate", help="energy moments and cumulants")
    _add_common(p, geometry=False)
    p.add_argument("--request", required=True,
                   help="JSON request file: {edges, mode, params}")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("scaling", help="continuum-limit convergence series")
    _add_common(p, geometry=False)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--points", required=True,
                   help='two continuum points, e.g. "(0.25,0.5),(0.625,0.375)"')
    p.add_argument("--halvings", type=int, default=4)
    p.add_argument("--start", type=int, default=16,
                   help="initial inverse lattice spacing")
    p.add_argument("--verify", action="store_true")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("multiscale",
                       help="scale decomposition residuals and decay fits")
    _add_common(p)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--h", type=int, help="scale for the bulk/edge split")
    p.add_argument("--bin-width", type=int,
                   help="envelope bin width (default: range/4)")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--tol", type=float, default=1e-12)
    p.set_defaults(func=cmd_multiscale)

    p = sub.add_parser("kernels",
                       help="cancellation demos and norm batteries")
    _add_common(p, geometry=False)
    p.add_argument("--runs", type=int, default=10,
                   help="runs per norm inequality")
    p.add_argument("--verify", action="store_true")
    p.set_defaults(func=cmd_kernels)

    p = sub.add_parser("selftest", help="full acceptance suite")
    _add_common(p, geometry=False)
    p.add_argument("--only", type=int, nargs="*",
                   help="criteria ids to run (default all)")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None):
    threads = os.environ.get("ISINGCYL_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (RootCountError, DoublingError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        if "singular" in str(exc).lower():
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
