"""Global metricity: the rank-1 de Rham period obstruction and the general
regular case via holonomy-fixed subspaces plus positive-definite feasibility.

For a regular connection, the global parallel sections of the terminal
subspace are the vectors fixed by every declared holonomy generator; the
connection is globally metric exactly when that fixed space meets the open
positive-definite cone.  When the terminal subspace has rank one the same
question is answered by vanishing of the periods of the 1-form defined by
``nabla s = s (x) Phi`` for a tracked positive generator section s, and the
two criteria are cross-checked against each other.

Everything here is conditional on the declared loops generating the
fundamental group of the chart domain, which the tool cannot verify; every
verdict carries that caveat.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import pdcone
from .bundle import ConnectionSpec, omega_stack
from .expr import Expr, compile_expr
from .flag import (DEFAULT_RANK_TOL, FlagTrace, IrregularPoint,
                   NotSym2Bundle, RegularityReport, Subspace,
                   batch_terminal_bases, default_stencil, derived_flag,
                   kernel_intersection, regularity_scan)
from .transport import Curve, DefectTooLarge, HolonomyResult, holonomy_matrix

__all__ = [
    "GlobalError", "RankNotOne", "GeneratorNotPD", "PhiSampler", "PhiPeriods",
    "GlobalVerdict", "phi_form", "phi_periods", "fixed_subspace",
    "invariant_inner_product", "global_metricity",
    "LOOP_GENERATION_CAVEAT", "CHART_ONLY_CAVEAT", "DEFAULT_FIXED_TOL",
]

DEFAULT_FIXED_TOL = 1e-6

LOOP_GENERATION_CAVEAT = (
    "conditional on declared loops generating the fundamental group of the "
    "chart domain; the tool cannot verify generation")
CHART_ONLY_CAVEAT = (
    "verdict certified on the declared coordinate chart only")


class GlobalError(RuntimeError):
    pass


class RankNotOne(GlobalError):
    pass


class GeneratorNotPD(GlobalError):
    """The tracked generator is not positive-definite, so the de Rham
    criterion does not apply (the connection is not locally metric there)."""


class PhiSampler:
    """Callable sampler of the 1-form Phi defined by ``nabla s = s (x) Phi``.

    The tracked section s(q) is the normalized projection of the base-point
    generator onto the terminal subspace at q, sign-fixed to positive trace;
    for a rank-one terminal subspace this is the unit positive-trace
    generator.  A near-vanishing projection or trace marks a tracker
    discontinuity (sign flip) and raises :class:`GeneratorNotPD`.

    ``gauge`` arguments rescale the tracked section by a positive factor
    (callable on point batches, or a DSL expression), realizing alternative
    sections of the positive cone for gauge-invariance checks.
    """

    def __init__(self, spec: ConnectionSpec, base_point, wtilde: Optional[Subspace] = None,
                 fd_h: Optional[float] = None, stencil_h: Optional[float] = None,
                 rank_tol: float = DEFAULT_RANK_TOL, trace_tol: float = 1e-8,
                 pd_tol: float = 1e-8, pd_restarts: int = 8, seed: int = 0):
        if spec.kind != "christoffel":
            raise NotSym2Bundle("Phi tracking needs the Sym^2 fiber")
        self.spec = spec
        self.base_point = np.asarray(base_point, dtype=float)
        self.stencil_h = stencil_h if stencil_h is not None else default_stencil(spec)
        self.fd_h = fd_h if fd_h is not None else self.stencil_h
        self.rank_tol = rank_tol
        self.trace_tol = trace_tol
        if wtilde is None:
            wtilde = derived_flag(spec, base_point, self.stencil_h,
                                  rank_tol=rank_tol).terminal
        if wtilde.dim != 1:
            raise RankNotOne(f"terminal subspace has rank {wtilde.dim}, not 1")
        g = wtilde.basis[:, 0]
        g = g * np.sign(self._traces(g[None, :])[0] or 1.0)
        span = pdcone.SymSpan.from_fiber_vectors(spec.sym, g[:, None])
        res = pdcone.pd_feasible(span, tol=pd_tol, restarts=pd_restarts, seed=seed)
        if res.status != "feasible":
            raise GeneratorNotPD(
                "terminal generator is not positive-definite; the connection "
                "is not locally metric at the base point")
        self.base_generator = g
        self._cache = {}

    def _traces(self, vecs):
        # diagonal pairs occupy the first n fiber slots
        return vecs[:, : self.spec.n].sum(axis=1)

    def generators(self, points) -> np.ndarray:
        """Tracked unit sections at an (m, n) batch of points; shape (m, N)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        key = (pts.shape, hash(pts.tobytes()))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        bases = batch_terminal_bases(self.spec, pts, self.stencil_h,
                                     self.rank_tol)
        proj = np.einsum("mia,ma->mi", bases,
                         np.einsum("mia,i->ma", bases, self.base_generator))
        norms = np.linalg.norm(proj, axis=1)
        if np.min(norms) < 0.5:
            raise GeneratorNotPD(
                "tracked generator projection degenerates along the sample "
                "set (possible sign flip of the terminal line bundle)")
        s = proj / norms[:, None]
        tr = self._traces(s)
        if np.min(np.abs(tr)) < self.trace_tol:
            raise GeneratorNotPD("tracked generator trace crosses zero")
        s = s * np.sign(tr)[:, None]
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = s
        return s

    def _gauge_values(self, gauge, pts):
        if gauge is None:
            return np.ones(pts.shape[0])
        if isinstance(gauge, Expr):
            env = self.spec.domain.env(pts, self.spec.params)
            vals = np.broadcast_to(np.asarray(compile_expr(gauge)(env), dtype=float),
                                   (pts.shape[0],))
        else:
            vals = np.asarray(gauge(pts), dtype=float)
        if np.any(vals <= 0.0):
            raise GlobalError("gauge factor must be positive")
        return vals

    def __call__(self, points, gauge=None) -> np.ndarray:
        """Phi at an (m, n) batch of points; shape (m, n)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m, n = pts.shape
        h = self.fd_h
        s0 = self.generators(pts)
        f0 = self._gauge_values(gauge, pts)
        omega = omega_stack(self.spec, pts)  # (m, n, N, N)
        st0 = f0[:, None] * s0
        denom = np.sum(st0 * st0, axis=1)
        phi = np.empty((m, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            sp = self.generators(pts + e)
            sm = self.generators(pts - e)
            fp = self._gauge_values(gauge, pts + e)
            fm = self._gauge_values(gauge, pts - e)
            ds = (fp[:, None] * sp - fm[:, None] * sm) / (2.0 * h)
            nabla = ds + np.einsum("mij,mj->mi", omega[:, k], st0)
            phi[:, k] = np.sum(nabla * st0, axis=1) / denom
        return phi


def phi_form(spec: ConnectionSpec, point, wtilde: Optional[Subspace] = None,
             **kwargs) -> PhiSampler:
    """Sampler for the 1-form Phi of a rank-one terminal subspace."""
    return PhiSampler(spec, point, wtilde, **kwargs)


@dataclass
class PhiPeriods:
    loop_names: list
    periods: list
    samples: list  # per-loop (m, n) Phi values along the loop

    def max_abs(self):
        return max((abs(p) for p in self.periods), default=0.0)


def phi_periods(sampler: PhiSampler, loops: Sequence[Curve],
                quadrature_steps: int = 4096, gauge=None) -> PhiPeriods:
    """Trapezoid-rule loop periods of the sampled Phi.

    For closed loops the trapezoid rule over the uniform parameter grid
    coincides with the left-endpoint sum, which is what is computed.
    """
    names, periods, samples = [], [], []
    for loop in loops:
        if not loop.closed:
            raise GlobalError(f"loop '{loop.name}' is not closed")
        ts = np.linspace(loop.t0, loop.t1, quadrature_steps, endpoint=False)
        dt = (loop.t1 - loop.t0) / quadrature_steps
        pts = loop.points(ts)
        vel = loop.velocities(ts)
        phi = sampler(pts, gauge=gauge)
        period = float(np.sum(phi * vel) * dt)
        names.append(loop.name)
        periods.append(period)
        samples.append(phi)
    return PhiPeriods(names, periods, samples)


def fixed_subspace(holonomies: Sequence[HolonomyResult],
                   dim: Optional[int] = None,
                   rank_tol: float = DEFAULT_RANK_TOL,
                   fixed_tol: float = DEFAULT_FIXED_TOL) -> Subspace:
    """Common fixed vectors of the holonomy matrices, in terminal coordinates.

    With no declared loops the domain is taken as simply connected and the
    full terminal subspace is returned.  ``fixed_tol`` is an absolute floor
    on the rank decision for ``H - I``, sized to sit above the integrator
    noise carried by the holonomy matrices.
    """
    if not holonomies:
        if dim is None:
            raise GlobalError("dim required when no holonomies are given")
        return Subspace.full(dim)
    d = holonomies[0].matrix.shape[0]
    base = holonomies[0].base_point
    for h in holonomies:
        if h.matrix.shape != (d, d):
            raise GlobalError("holonomy matrices must share one basis")
        if np.max(np.abs(h.base_point - base)) > 1e-9:
            raise GlobalError("holonomy matrices must share the base point")
    if d == 0:
        return Subspace(0, np.zeros((0, 0)))
    mats = [h.matrix - np.eye(d) for h in holonomies]
    return kernel_intersection(mats, rank_tol, abs_floor=fixed_tol)


def invariant_inner_product(s, h, hp) -> float:
    """tr(s^-1 h s^-1 h'), the transport-invariant pairing induced by a
    parallel metric s; raises on singular s."""
    s = np.asarray(s, dtype=float)
    h = np.asarray(h, dtype=float)
    hp = np.asarray(hp, dtype=float)
    try:
        x = np.linalg.solve(s, h)
        y = np.linalg.solve(s, hp)
    except np.linalg.LinAlgError:
        raise GlobalError("inner-product base form is singular") from None
    return float(np.trace(x @ y))


@dataclass
class GlobalVerdict:
    """Outcome of the global pipeline with certificates and diagnostics."""

    status: str  # metric | not_metric | inconclusive | not_regular
    regular_on_grid: bool
    scan: Optional[RegularityReport] = None
    trace: Optional[FlagTrace] = None
    wtilde_rank: Optional[int] = None
    holonomies: list = field(default_factory=list)
    fixed: Optional[Subspace] = None
    fixed_fiber_basis: Optional[np.ndarray] = None
    rank_wm: int = 0
    rank_tau_reported: Optional[int] = None
    pd_result: Optional[pdcone.PDResult] = None
    phi: Optional[PhiPeriods] = None
    period_tols: list = field(default_factory=list)
    caveats: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def global_metricity(spec: ConnectionSpec, point, loops: Sequence[Curve],
                     grid_axes, *,
                     rank_tol: float = DEFAULT_RANK_TOL,
                     stencil_h: Optional[float] = None,
                     holonomy_tol: float = 1e-5,
                     fixed_tol: float = DEFAULT_FIXED_TOL,
                     pd_tol: float = 1e-8,
                     pd_restarts: int = 32,
                     rk4_steps: int = 4096,
                     quadrature_steps: int = 4096,
                     period_tol: Optional[float] = None,
                     seed: int = 0,
                     max_workers: int = 1) -> GlobalVerdict:
    """Full global pipeline: regularity scan, flag, holonomy, fixed subspace,
    PD feasibility, and the rank-one period cross-check.

    Regularity on the sample grid is a precondition of the global theory;
    any dimension jump short-circuits to ``not_regular``.
    """
    if spec.kind != "christoffel":
        raise NotSym2Bundle("global metricity is posed on the Sym^2 bundle")
    caveats = [LOOP_GENERATION_CAVEAT, CHART_ONLY_CAVEAT]
    notes = []
    if stencil_h is None:
        stencil_h = default_stencil(spec)

    scan = regularity_scan(spec, grid_axes, stencil_h, rank_tol, max_workers)
    if not scan.regular_on_grid:
        notes.append("terminal dimension varies over the sample grid; the "
                     "global existence problem is not posed")
        return GlobalVerdict("not_regular", False, scan=scan,
                             caveats=caveats, notes=notes)

    trace = derived_flag(spec, point, stencil_h, rank_tol=rank_tol)
    wrank = trace.terminal.dim
    if wrank == 0:
        notes.append("terminal subspace is zero: no nonzero parallel "
                     "sections exist even locally")
        return GlobalVerdict("not_metric", True, scan=scan, trace=trace,
                             wtilde_rank=0, rank_tau_reported=0,
                             caveats=caveats, notes=notes)

    holonomies = []
    try:
        for loop in loops:
            holonomies.append(holonomy_matrix(spec, trace.point, trace.terminal,
                                              loop, rk4_steps, holonomy_tol))
    except DefectTooLarge as exc:
        notes.append(f"holonomy defect exceeded tolerance: {exc}")
        return GlobalVerdict("inconclusive", True, scan=scan, trace=trace,
                             wtilde_rank=wrank, holonomies=holonomies,
                             caveats=caveats, notes=notes)

    fixed = fixed_subspace(holonomies, dim=wrank, rank_tol=rank_tol,
                           fixed_tol=fixed_tol)
    fiber_basis = trace.terminal.basis @ fixed.basis  # (N, m)
    m = fixed.dim

    pd_res = None
    if m == 0:
        pd_status = "infeasible_certified"
        notes.append("no holonomy-fixed directions: no global parallel "
                     "sections at all")
    else:
        span = pdcone.SymSpan.from_fiber_vectors(spec.sym, fiber_basis)
        pd_res = pdcone.pd_feasible(span, tol=pd_tol, restarts=pd_restarts,
                                    seed=seed)
        pd_status = pd_res.status

    status = {"feasible": "metric", "infeasible_certified": "not_metric",
              "inconclusive": "inconclusive"}[pd_status]
    rank_wm = m if status == "metric" else 0

    phi = None
    period_tols = []
    if wrank == 1 and loops:
        try:
            sampler = PhiSampler(spec, trace.point, trace.terminal,
                                 stencil_h=stencil_h, rank_tol=rank_tol,
                                 pd_tol=pd_tol, seed=seed)
            phi = phi_periods(sampler, loops, quadrature_steps)
            period_tols = [(period_tol if period_tol is not None
                            else 1e-4 * (1.0 + loop.length()))
                           for loop in loops]
            periods_zero = all(abs(p) < tol for p, tol
                               in zip(phi.periods, period_tols))
            if status in ("metric", "not_metric"):
                if periods_zero != (status == "metric"):
                    notes.append(
                        "rank-one period criterion disagrees with the "
                        "holonomy criterion; downgrading to inconclusive")
                    status = "inconclusive"
                    rank_wm = 0
        except GeneratorNotPD as exc:
            notes.append(f"de Rham route skipped: {exc}")
        except (RankNotOne, IrregularPoint) as exc:
            notes.append(f"de Rham route failed: {exc}")

    return GlobalVerdict(status, True, scan=scan, trace=trace,
                         wtilde_rank=wrank, holonomies=holonomies,
                         fixed=fixed, fixed_fiber_basis=fiber_basis,
                         rank_wm=rank_wm,
                         rank_tau_reported=wrank - m,
                         pd_result=pd_res, phi=phi, period_tols=period_tols,
                         caveats=caveats, notes=notes)
