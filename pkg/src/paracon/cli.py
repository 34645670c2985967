"""Command-line interface: manifest ingestion, command dispatch, report emission.

Commands: ``analyze`` (full pipeline), ``flag --point``, ``holonomy --loop``,
``global``, and ``corpus --id`` (golden-value run).  Exit codes: 0 for a
completed run with a definite verdict, 2 for a completed run that is
inconclusive or not regular, 1 for errors.

Reports are canonical JSON: UTF-8, lower_snake_case keys sorted, reals in
shortest round-trip decimal form.  A report is a pure function of
(manifest, seed, steps), so two runs produce byte-identical files; wall-clock
per stage goes to stderr instead of the report.  The environment variable
``PARACON_THREADS`` caps the worker count (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .bundle import BundleError
from .expr import ExprError
from .flag import (IrregularPoint, NotSym2Bundle, derived_flag,
                   local_metricity, regularity_scan)
from .globalmetric import (CHART_ONLY_CAVEAT, LOOP_GENERATION_CAVEAT,
                           GlobalVerdict, fixed_subspace, global_metricity)
from .manifest import Manifest, ManifestError, load_manifest
from .transport import DefectTooLarge, TransportError, holonomy_matrix

__all__ = ["main", "run", "build_report", "canonical_json"]

MATRIX_KIND_CAVEAT = ("fiber is an abstract bundle (kind=matrix): the metric "
                      "question is not posed; reporting flat-bundle data only")


def worker_count() -> int:
    raw = os.environ.get("PARACON_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = min(os.cpu_count() or 1, 8)
    return n


def _plain(obj):
    """Recursively convert numpy scalars/arrays for JSON emission."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if v != v or v in (float("inf"), float("-inf")):
            return None
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def canonical_json(doc: dict) -> str:
    return json.dumps(_plain(doc), sort_keys=True, indent=2,
                      ensure_ascii=False) + "\n"


def _finalize(report: dict) -> dict:
    body = canonical_json(report).encode("utf-8")
    report["report_digest"] = hashlib.sha256(body).hexdigest()
    return report


class _Timer:
    def __init__(self):
        self.stages = []

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages.append((name, time.perf_counter() - self.t0))

        return _Ctx()

    def report(self, stream=sys.stderr):
        for name, dt in self.stages:
            print(f"[paracon] {name}: {dt:.3f}s", file=stream)


def _scan_dict(scan):
    return {
        "grid_axes": scan.axes,
        "dims": scan.dims,
        "regular_on_grid": scan.regular_on_grid,
        "jumps": [{"from": a, "to": b, "dim_from": da, "dim_to": db}
                  for a, b, da, db in scan.jumps],
        "irregular_points": scan.irregular_points,
    }


def _trace_dict(tr):
    return {
        "point": tr.point,
        "dims": tr.dims,
        "stabilization_level": tr.stabilization_level,
        "terminal_dim": tr.terminal.dim,
        "terminal_basis": tr.terminal.basis,
        "sv_gap": None if tr.terminal.sv_gap == float("inf")
                  else tr.terminal.sv_gap,
    }


def _verdict_dict(v: GlobalVerdict):
    out = {
        "status": v.status,
        "regular_on_grid": v.regular_on_grid,
        "wtilde_rank": v.wtilde_rank,
        "fixed_dim": None if v.fixed is None else v.fixed.dim,
        "fixed_fiber_basis": v.fixed_fiber_basis,
        "rank_wm": v.rank_wm,
        "rank_tau_reported": v.rank_tau_reported,
        "notes": v.notes,
    }
    if v.pd_result is not None:
        out["pd"] = {
            "status": v.pd_result.status,
            "best_lambda": v.pd_result.best_lambda,
            "coefficients": v.pd_result.coefficients,
            "cholesky": v.pd_result.cholesky,
            "witness": v.pd_result.witness,
        }
    if v.phi is not None:
        out["phi_periods"] = {
            "loops": v.phi.loop_names,
            "periods": v.phi.periods,
            "period_tols": v.period_tols,
        }
    return out


def build_report(man: Manifest, command: str, max_workers: int = 1) -> tuple:
    """Run the pipeline stages a command needs; returns (report, exit_code)."""
    spec, tol, steps = man.spec, man.tolerances, man.steps
    timer = _Timer()
    effective_tol = dict(tol)
    if effective_tol["stencil_h"] is None:
        from .flag import default_stencil
        effective_tol["stencil_h"] = default_stencil(spec)
    report = {
        "tool_version": __version__,
        "command": command,
        "manifest_id": man.id,
        "manifest_digest": man.digest(),
        "effective": {
            "tolerances": effective_tol,
            "steps": steps,
            "seed": man.seed,
            "pd_restarts": man.pd_restarts,
        },
        "caveats": [LOOP_GENERATION_CAVEAT, CHART_ONLY_CAVEAT],
    }
    exit_code = 0

    with timer.stage("regularity_scan"):
        scan = regularity_scan(spec, man.grid_axes, tol["stencil_h"],
                               tol["rank_tol"], max_workers)
    report["regularity"] = _scan_dict(scan)

    with timer.stage("flag_traces"):
        mesh = np.meshgrid(*man.grid_axes, indexing="ij")
        grid_pts = np.stack([m.ravel() for m in mesh], axis=1)
        traces, local = [], []
        for p in grid_pts:
            try:
                tr = derived_flag(spec, p, tol["stencil_h"],
                                  rank_tol=tol["rank_tol"])
            except IrregularPoint:
                traces.append({"point": p, "irregular": True})
                local.append({"point": p, "locally_metric": None,
                              "status": "irregular"})
                continue
            traces.append(_trace_dict(tr))
            if spec.kind == "christoffel":
                lm = local_metricity(spec, p, tr, tol["pd_tol"],
                                     man.pd_restarts, man.seed)
                local.append({"point": p, "locally_metric": lm.locally_metric,
                              "status": lm.status,
                              "best_lambda": lm.best_lambda})
    report["flag_traces"] = traces
    report["local_metricity"] = local if spec.kind == "christoffel" else None

    base_trace = None
    holos = []
    holonomy_failed = None
    if command in ("analyze", "global"):
        with timer.stage("holonomy"):
            try:
                base_trace = derived_flag(spec, man.base_point,
                                          tol["stencil_h"],
                                          rank_tol=tol["rank_tol"])
                for loop in man.loops:
                    holos.append(holonomy_matrix(
                        spec, base_trace.point, base_trace.terminal, loop,
                        steps["rk4"], tol["holonomy_tol"]))
            except (IrregularPoint, DefectTooLarge) as exc:
                holonomy_failed = str(exc)
        report["holonomy"] = ([{"loop": h.loop_name, "matrix": h.matrix,
                                "defect": h.defect} for h in holos]
                              if holonomy_failed is None else None)
        if holonomy_failed:
            report.setdefault("notes", []).append(
                f"holonomy stage failed: {holonomy_failed}")

    if command in ("analyze", "global"):
        if spec.kind == "christoffel":
            with timer.stage("global_metricity"):
                verdict = global_metricity(
                    spec, man.base_point, man.loops, man.grid_axes,
                    rank_tol=tol["rank_tol"], stencil_h=tol["stencil_h"],
                    holonomy_tol=tol["holonomy_tol"],
                    fixed_tol=tol["fixed_tol"], pd_tol=tol["pd_tol"],
                    pd_restarts=man.pd_restarts, rk4_steps=steps["rk4"],
                    quadrature_steps=steps["quadrature"],
                    period_tol=tol["period_tol"], seed=man.seed,
                    max_workers=max_workers)
            report["global_verdict"] = _verdict_dict(verdict)
            if verdict.status in ("inconclusive", "not_regular"):
                exit_code = 2
        else:
            # abstract fiber: report the flat-bundle answer instead
            report["caveats"].append(MATRIX_KIND_CAVEAT)
            report["global_verdict"] = None
            if base_trace is not None and holonomy_failed is None:
                fixed = fixed_subspace(holos, dim=base_trace.terminal.dim,
                                       rank_tol=tol["rank_tol"],
                                       fixed_tol=tol["fixed_tol"])
                report["flat_bundle"] = {
                    "wtilde_rank": base_trace.terminal.dim,
                    "fixed_dim": fixed.dim,
                    "fixed_basis": base_trace.terminal.basis @ fixed.basis,
                    "parallel_frame": fixed.dim == base_trace.terminal.dim,
                }
            else:
                report["flat_bundle"] = None
                exit_code = 2

    timer.report()
    return _finalize(report), exit_code


def _format_text(report: dict) -> str:
    lines = [f"paracon {report['tool_version']}: {report['command']} "
             f"(manifest {report['manifest_id'] or 'unnamed'})"]
    reg = report.get("regularity")
    if reg:
        lines.append(f"  regular on grid: {reg['regular_on_grid']}; "
                     f"terminal dims {reg['dims']}")
        for j in reg["jumps"]:
            lines.append(f"  jump {j['from']} (dim {j['dim_from']}) -> "
                         f"{j['to']} (dim {j['dim_to']})")
    tr = report.get("flag_trace")
    if tr:
        lines.append(f"  flag dims {tr['dims']}, terminal dim "
                     f"{tr['terminal_dim']}")
    hol = report.get("holonomy")
    if hol:
        for h in ([hol] if isinstance(hol, dict) else hol):
            lines.append(f"  holonomy[{h['loop']}]: defect {h['defect']:.2e}")
    gv = report.get("global_verdict")
    if gv:
        lines.append(f"  global status: {gv['status']} "
                     f"(rank_wm {gv['rank_wm']}, "
                     f"wtilde rank {gv['wtilde_rank']})")
        if gv.get("phi_periods"):
            lines.append(f"  phi periods: {gv['phi_periods']['periods']}")
        for n in gv.get("notes", []):
            lines.append(f"  note: {n}")
    fb = report.get("flat_bundle")
    if fb:
        lines.append(f"  flat bundle: rank {fb['wtilde_rank']}, fixed "
                     f"{fb['fixed_dim']}, parallel frame "
                     f"{fb['parallel_frame']}")
    for c in report.get("caveats", []):
        lines.append(f"  caveat: {c}")
    return "\n".join(lines) + "\n"


def _write_report(report: dict, out_path: str, fmt: str):
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(report))
    if fmt == "text":
        sys.stdout.write(_format_text(report))
    else:
        print(f"report written to {out_path}")


def _parse_point(text: str, man: Manifest):
    # trailing coordinates may be omitted; they fall back to the base point
    parts = [float(v) for v in text.split(",") if v.strip()]
    dim = man.domain.dim
    if not 1 <= len(parts) <= dim:
        raise ManifestError("/point", f"expected 1..{dim} coordinates")
    out = np.array(man.base_point, dtype=float)
    out[:len(parts)] = parts
    return out


def _apply_cli_overrides(args):
    overrides = {}
    for item in args.param or []:
        if "=" not in item:
            raise ManifestError("/param", f"expected name=value, got {item!r}")
        name, value = item.split("=", 1)
        overrides[name] = float(value)
    return overrides


def run(command: str, manifest_path: str, args) -> int:
    """Dispatch one command; returns the process exit code."""
    overrides = _apply_cli_overrides(args)
    man = load_manifest(manifest_path, overrides)
    if args.seed is not None:
        man.seed = int(args.seed)
    if args.steps is not None:
        man.steps = {"rk4": int(args.steps), "quadrature": int(args.steps)}
    workers = worker_count()

    if command == "flag":
        point = _parse_point(args.point, man)
        try:
            tr = derived_flag(man.spec, point, man.tolerances["stencil_h"],
                              rank_tol=man.tolerances["rank_tol"])
        except IrregularPoint as exc:
            print(f"irregular point: {exc}", file=sys.stderr)
            return 2
        report = _finalize({
            "tool_version": __version__, "command": "flag",
            "manifest_id": man.id, "manifest_digest": man.digest(),
            "flag_trace": _trace_dict(tr),
            "caveats": [CHART_ONLY_CAVEAT],
        })
        _write_report(report, args.out, args.format)
        return 0

    if command == "holonomy":
        loop = next((l for l in man.loops if l.name == args.loop), None)
        if loop is None:
            print(f"no loop named {args.loop!r} in manifest", file=sys.stderr)
            return 1
        tr = derived_flag(man.spec, man.base_point,
                          man.tolerances["stencil_h"],
                          rank_tol=man.tolerances["rank_tol"])
        try:
            h = holonomy_matrix(man.spec, tr.point, tr.terminal, loop,
                                man.steps["rk4"],
                                man.tolerances["holonomy_tol"])
        except DefectTooLarge as exc:
            print(f"holonomy defect too large: {exc}", file=sys.stderr)
            return 2
        report = _finalize({
            "tool_version": __version__, "command": "holonomy",
            "manifest_id": man.id, "manifest_digest": man.digest(),
            "holonomy": {"loop": h.loop_name, "matrix": h.matrix,
                         "defect": h.defect,
                         "wtilde_rank": tr.terminal.dim},
            "caveats": [CHART_ONLY_CAVEAT],
        })
        _write_report(report, args.out, args.format)
        return 0

    report, code = build_report(man, command, workers)
    _write_report(report, args.out, args.format)
    return code


def _run_corpus(args) -> int:
    from .corpus import get_entry, run_entry
    try:
        entry = get_entry(args.id)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return 1
    checks, _ = run_entry(entry, max_workers=worker_count())
    all_ok = True
    for c in checks:
        mark = "PASS" if c.ok else "FAIL"
        print(f"{mark} {entry.id}.{c.name}: {c.detail}")
        all_ok = all_ok and c.ok
    return 0 if all_ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="paracon",
        description="Decide whether a chart connection is locally and "
                    "globally metric.")
    parser.add_argument("--version", action="version",
                        version=f"paracon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("manifest", help="path to the manifest JSON")
        p.add_argument("--out", default="./report.json",
                       help="report output path (default ./report.json)")
        p.add_argument("--steps", type=int, default=None,
                       help="override RK4 and quadrature step counts")
        p.add_argument("--seed", type=int, default=None,
                       help="override the manifest seed")
        p.add_argument("--format", choices=("json", "text"), default="json")
        p.add_argument("--param", action="append", metavar="NAME=VALUE",
                       help="override a manifest parameter")

    common(sub.add_parser("analyze", help="full pipeline"))
    p_flag = sub.add_parser("flag", help="derived flag at one point")
    common(p_flag)
    p_flag.add_argument("--point", required=True,
                        help="comma-separated coordinates")
    p_hol = sub.add_parser("holonomy", help="holonomy of one declared loop")
    common(p_hol)
    p_hol.add_argument("--loop", required=True, help="loop name")
    common(sub.add_parser("global", help="global metricity verdict"))
    p_cor = sub.add_parser("corpus", help="run a built-in golden entry")
    p_cor.add_argument("--id", required=True, help="corpus entry id")
    p_cor.add_argument("--param", action="append", metavar="NAME=VALUE")

    args = parser.parse_args(argv)
    try:
        if args.command == "corpus":
            return _run_corpus(args)
        return run(args.command, args.manifest, args)
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return 1
    except (BundleError, ExprError, TransportError, NotSym2Bundle) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
