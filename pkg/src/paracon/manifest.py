"""Manifest ingestion: JSON documents describing a chart, a connection,
loops, a sample grid and tolerances.

Validation failures carry JSON-pointer-style paths into the offending field.
Christoffel entries are keyed ``gamma[upper]["k,i"]`` by coordinate name,
where ``k`` is the derivative direction (first lower index); omitted entries
are zero and lower-index symmetry is not assumed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bundle import ConnectionSpec, Domain
from .expr import ExprError, parse_expr
from .transport import Curve

__all__ = ["Manifest", "ManifestError", "load_manifest", "manifest_from_dict",
           "manifest_digest", "DEFAULT_TOLERANCES", "DEFAULT_STEPS"]

DEFAULT_TOLERANCES = {
    "rank_tol": 1e-7,
    "stencil_h": None,       # None -> 1e-4 * coordinate range scale
    "holonomy_tol": 1e-5,
    "period_tol": None,      # None -> 1e-4 * (1 + loop length)
    "pd_tol": 1e-8,
    "fixed_tol": 1e-6,
}
DEFAULT_STEPS = {"rk4": 4096, "quadrature": 4096}
_GRID_INSET = 0.1


class ManifestError(ValueError):
    def __init__(self, pointer, message):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


def _parse(pointer, text):
    try:
        return parse_expr(str(text))
    except ExprError as exc:
        raise ManifestError(pointer, f"bad expression: {exc}") from None


@dataclass
class Manifest:
    """Validated manifest with constructed domain, spec, loops and grid."""

    raw: dict
    domain: Domain
    spec: ConnectionSpec
    base_point: np.ndarray
    loops: list
    grid_axes: list
    tolerances: dict
    steps: dict
    seed: int
    pd_restarts: int

    @property
    def id(self):
        return self.raw.get("id", "")

    def digest(self) -> str:
        return manifest_digest(self.raw)


def manifest_digest(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _require(doc, key, pointer, typ=None):
    if key not in doc:
        raise ManifestError(f"{pointer}/{key}", "missing required field")
    val = doc[key]
    if typ is not None and not isinstance(val, typ):
        raise ManifestError(f"{pointer}/{key}",
                            f"expected {typ.__name__}, got {type(val).__name__}")
    return val


def _build_domain(doc) -> Domain:
    coords = _require(doc, "coords", "", list)
    if not coords:
        raise ManifestError("/coords", "at least one coordinate required")
    names, lows, highs, periods = [], [], [], []
    for i, c in enumerate(coords):
        ptr = f"/coords/{i}"
        name = _require(c, "name", ptr, str)
        rng = _require(c, "range", ptr, list)
        if len(rng) != 2:
            raise ManifestError(f"{ptr}/range", "range must be [low, high]")
        lo = -math.inf if rng[0] is None else float(rng[0])
        hi = math.inf if rng[1] is None else float(rng[1])
        if not lo < hi:
            raise ManifestError(f"{ptr}/range", "range must be non-degenerate")
        names.append(name)
        lows.append(lo)
        highs.append(hi)
        periods.append(float(c["period"]) if c.get("period") else None)
    if len(set(names)) != len(names):
        raise ManifestError("/coords", "coordinate names must be unique")
    excluded = tuple(_parse(f"/excluded/{i}", e)
                     for i, e in enumerate(doc.get("excluded", [])))
    radius = float(doc.get("exclusion_radius", 1e-6))
    return Domain(tuple(names), tuple(lows), tuple(highs), tuple(periods),
                  excluded, radius)


def _build_spec(doc, domain: Domain, params: dict) -> ConnectionSpec:
    conn = _require(doc, "connection", "", dict)
    kind = _require(conn, "kind", "/connection", str)
    index = {name: i for i, name in enumerate(domain.names)}
    if kind == "christoffel":
        gamma = {}
        for upper, entries in conn.get("gamma", {}).items():
            if upper not in index:
                raise ManifestError(f"/connection/gamma/{upper}",
                                    "unknown coordinate name")
            for key, text in entries.items():
                ptr = f"/connection/gamma/{upper}/{key}"
                parts = [s.strip() for s in key.split(",")]
                if len(parts) != 2 or any(p not in index for p in parts):
                    raise ManifestError(ptr, "key must be 'direction,second' "
                                             "coordinate names")
                gamma[(index[upper], index[parts[0]], index[parts[1]])] = \
                    _parse(ptr, text)
        return ConnectionSpec(domain, kind="christoffel", params=params,
                              gamma=gamma)
    if kind == "matrix":
        N = int(_require(conn, "fiber_dim", "/connection"))
        rows = _require(conn, "omega", "/connection", list)
        if len(rows) != N or any(len(r) != N for r in rows):
            raise ManifestError("/connection/omega",
                                f"omega must be {N}x{N} lists of per-coordinate "
                                "expressions")
        omega = []
        for i in range(N):
            row = []
            for j in range(N):
                cell = rows[i][j]
                ptr = f"/connection/omega/{i}/{j}"
                if not isinstance(cell, list) or len(cell) != domain.dim:
                    raise ManifestError(ptr, "one expression per coordinate "
                                             "required")
                row.append([_parse(f"{ptr}/{k}", t) for k, t in enumerate(cell)])
            omega.append(row)
        return ConnectionSpec(domain, kind="matrix", params=params,
                              fiber_dim=N, omega=omega)
    raise ManifestError("/connection/kind", f"unknown kind {kind!r}")


def _build_loops(doc, domain: Domain, params: dict) -> list:
    loops = []
    names = set()
    for i, entry in enumerate(doc.get("loops", [])):
        ptr = f"/loops/{i}"
        name = _require(entry, "name", ptr, str)
        if name in names:
            raise ManifestError(f"{ptr}/name", f"duplicate loop name {name!r}")
        names.add(name)
        exprs = _require(entry, "exprs", ptr, list)
        if len(exprs) != domain.dim:
            raise ManifestError(f"{ptr}/exprs",
                                "one coordinate expression per dimension")
        t_range = _require(entry, "t_range", ptr, list)
        curve = Curve(domain, [_parse(f"{ptr}/exprs/{k}", t)
                               for k, t in enumerate(exprs)],
                      float(t_range[0]), float(t_range[1]),
                      name=name, params=params)
        if not curve.closed:
            raise ManifestError(ptr, "declared loop is not closed "
                                     "(after period reduction)")
        loops.append(curve)
    return loops


def _build_grid(doc, domain: Domain) -> list:
    grid = doc.get("grid")
    if grid is None:
        raise ManifestError("/grid", "missing required field")
    if "values" in grid:
        axes = grid["values"]
        if len(axes) != domain.dim:
            raise ManifestError("/grid/values", "one value list per coordinate")
        return [[float(v) for v in axis] for axis in axes]
    if "counts" in grid:
        counts = grid["counts"]
        if len(counts) != domain.dim:
            raise ManifestError("/grid/counts", "one count per coordinate")
        axes = []
        for i, cnt in enumerate(counts):
            lo, hi = domain.lows[i], domain.highs[i]
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ManifestError(f"/grid/counts/{i}",
                                    "counts need a finite coordinate range")
            span = hi - lo
            axes.append(list(np.linspace(lo + _GRID_INSET * span,
                                         hi - _GRID_INSET * span, int(cnt))))
        return axes
    raise ManifestError("/grid", "grid needs 'values' or 'counts'")


def manifest_from_dict(doc: dict) -> Manifest:
    if not isinstance(doc, dict):
        raise ManifestError("", "manifest must be a JSON object")
    params = {k: float(v) for k, v in doc.get("params", {}).items()}
    domain = _build_domain(doc)
    spec = _build_spec(doc, domain, params)
    base = _require(doc, "base_point", "", list)
    if len(base) != domain.dim:
        raise ManifestError("/base_point", "one value per coordinate")
    base = np.array([float(v) for v in base])
    if not domain.admissible(base, params):
        raise ManifestError("/base_point", "base point not in the domain")
    loops = _build_loops(doc, domain, params)
    grid_axes = _build_grid(doc, domain)

    tol = dict(DEFAULT_TOLERANCES)
    for k, v in doc.get("tolerances", {}).items():
        if k not in tol:
            raise ManifestError(f"/tolerances/{k}", "unknown tolerance")
        tol[k] = None if v is None else float(v)
    steps = dict(DEFAULT_STEPS)
    for k, v in doc.get("steps", {}).items():
        if k not in steps:
            raise ManifestError(f"/steps/{k}", "unknown step setting")
        steps[k] = int(v)
    return Manifest(doc, domain, spec, base, loops, grid_axes, tol, steps,
                    seed=int(doc.get("seed", 0)),
                    pd_restarts=int(doc.get("pd_restarts", 32)))


def load_manifest(path, overrides: Optional[dict] = None) -> Manifest:
    """Read and validate a manifest file; ``overrides`` patch parameters."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError("", f"invalid JSON: {exc}") from None
    if overrides:
        doc = json.loads(json.dumps(doc))  # private copy
        doc.setdefault("params", {}).update(overrides)
    return manifest_from_dict(doc)
