"""Parallel transport along curves, holonomy on the terminal subspace, and
extension of fiber vectors to sampled local parallel sections.

Transport integrates the parallel equation ``v'(t) = -A(t) v(t)`` with
``A(t) = sum_k Omega_k(gamma(t)) gamma'^k(t)`` by classical fixed-step RK4.
The integrator is exactly linear in the initial vector, so bases transport as
matrices.  Holonomy composes as ``H(g2 . g1) = H(g2) H(g1)`` with ``g1``
traversed first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bundle import ConnectionSpec, Domain, PointOutsideDomain, omega_stack
from .expr import Binary, Const, Expr, Name, compile_expr, diff
from .flag import Subspace

__all__ = [
    "Curve", "TransportResult", "HolonomyResult", "TransportError",
    "CurveNotClosed", "DefectTooLarge", "transport", "holonomy_matrix",
    "parallel_extend", "line_curve",
]

_CLOSURE_TOL = 1e-9


class TransportError(RuntimeError):
    pass


class CurveNotClosed(TransportError):
    pass


class DefectTooLarge(TransportError):
    """Transport left the terminal subspace beyond the holonomy tolerance."""


class Curve:
    """Coordinate curve t -> (x_1(t), ..., x_n(t)) over [t0, t1].

    Closedness is decided from the endpoints after reducing coordinate
    differences modulo the domain's declared periods.
    """

    def __init__(self, domain: Domain, exprs: Sequence[Expr], t0: float,
                 t1: float, name: str = "", params: Optional[dict] = None):
        if len(exprs) != domain.dim:
            raise TransportError("one coordinate expression per chart dimension")
        if not t1 > t0:
            raise TransportError("curve parameter range is degenerate")
        self.domain = domain
        self.exprs = tuple(exprs)
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.name = name
        self.params = dict(params or {})
        self._pos = [compile_expr(e) for e in exprs]
        self._vel = [compile_expr(diff(e, "t")) for e in exprs]
        mismatch = domain.wrap_delta(self.point(self.t1) - self.point(self.t0))
        self.closed = bool(np.max(np.abs(mismatch)) < _CLOSURE_TOL)

    def _env(self, ts):
        env = {"t": np.asarray(ts, dtype=float)}
        env.update(self.params)
        return env

    def points(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        env = self._env(ts)
        cols = [np.broadcast_to(np.asarray(f(env), dtype=float), ts.shape)
                for f in self._pos]
        return np.stack(cols, axis=-1)

    def velocities(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        env = self._env(ts)
        cols = [np.broadcast_to(np.asarray(f(env), dtype=float), ts.shape)
                for f in self._vel]
        return np.stack(cols, axis=-1)

    def point(self, t) -> np.ndarray:
        return self.points(np.array([t]))[0]

    def length(self, steps: int = 512) -> float:
        ts = np.linspace(self.t0, self.t1, steps + 1)
        speed = np.linalg.norm(self.velocities(ts), axis=1)
        trapezoid = getattr(np, "trapezoid", None) or np.trapz
        return float(trapezoid(speed, ts))

    def reversed(self) -> "Curve":
        # substitute t -> t0 + t1 - t
        sub = Binary("sub", Const(self.t0 + self.t1), Name("t"))
        rev = [_substitute(e, "t", sub) for e in self.exprs]
        return Curve(self.domain, rev, self.t0, self.t1,
                     name=self.name + "~rev", params=self.params)


def _substitute(e: Expr, name: str, replacement: Expr) -> Expr:
    from .expr import Binary as B, Const as C, Name as N, Piecewise as P, Unary as U
    if isinstance(e, C):
        return e
    if isinstance(e, N):
        return replacement if e.name == name else e
    if isinstance(e, U):
        return U(e.op, _substitute(e.arg, name, replacement))
    if isinstance(e, B):
        return B(e.op, _substitute(e.left, name, replacement),
                 _substitute(e.right, name, replacement))
    if isinstance(e, P):
        return P(e.cmp, _substitute(e.lhs, name, replacement),
                 _substitute(e.rhs, name, replacement),
                 _substitute(e.then, name, replacement),
                 _substitute(e.other, name, replacement))
    raise TypeError(f"not an Expr: {e!r}")


def line_curve(domain: Domain, start, end, params: Optional[dict] = None,
               name: str = "segment") -> Curve:
    """Straight coordinate segment from start to end, parametrized on [0, 1]."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    exprs = []
    for a, b in zip(start, end):
        exprs.append(Binary("add", Const(float(a)),
                            Binary("mul", Name("t"), Const(float(b - a)))))
    return Curve(domain, exprs, 0.0, 1.0, name=name, params=params)


@dataclass
class TransportResult:
    final: np.ndarray
    steps: int
    invariance_residual: Optional[float] = None


def _generator_stack(spec: ConnectionSpec, curve: Curve, steps: int):
    """A(t) at the 2*steps + 1 RK4 half-step nodes; shape (2S+1, N, N)."""
    ts = np.linspace(curve.t0, curve.t1, 2 * steps + 1)
    pts = curve.points(ts)
    spec.domain.require_admissible(pts, spec.params)
    vel = curve.velocities(ts)
    omega = omega_stack(spec, pts)  # (m, n, N, N)
    return np.einsum("mk,mkab->mab", vel, omega)


def transport(spec: ConnectionSpec, curve: Curve, v0, steps: int = 4096,
              wtilde_end: Optional[Subspace] = None) -> TransportResult:
    """Parallel transport of a fiber vector (or basis matrix) along a curve.

    When ``wtilde_end`` is given, the result carries the distance of the
    transported vectors from that subspace (the invariance residual of the
    terminal bundle at the endpoint).
    """
    if steps < 16:
        raise TransportError("at least 16 RK4 steps required")
    v = np.asarray(v0, dtype=float)
    single = v.ndim == 1
    if single:
        v = v[:, None]
    A = _generator_stack(spec, curve, steps)
    h = (curve.t1 - curve.t0) / steps
    for j in range(steps):
        a0, am, a1 = A[2 * j], A[2 * j + 1], A[2 * j + 2]
        k1 = -a0 @ v
        k2 = -am @ (v + 0.5 * h * k1)
        k3 = -am @ (v + 0.5 * h * k2)
        k4 = -a1 @ (v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    residual = None
    if wtilde_end is not None:
        B = wtilde_end.basis
        residual = float(np.linalg.norm(v - B @ (B.T @ v)))
    out = v[:, 0] if single else v
    return TransportResult(out, steps, invariance_residual=residual)


@dataclass
class HolonomyResult:
    base_point: np.ndarray
    loop_name: str
    matrix: np.ndarray  # (d, d) in the terminal-subspace basis
    defect: float


def holonomy_matrix(spec: ConnectionSpec, point, wtilde: Subspace, loop: Curve,
                    steps: int = 4096, holonomy_tol: float = 1e-5) -> HolonomyResult:
    """Transport of the terminal basis around a loop, expressed in that basis.

    The reprojection defect measures how far the transported basis left the
    subspace; a large defect indicates irregularity or tolerance failure and
    raises :class:`DefectTooLarge`.
    """
    p = np.asarray(point, dtype=float)
    if not loop.closed:
        raise CurveNotClosed(f"loop '{loop.name}' is not closed")
    start_gap = spec.domain.wrap_delta(loop.point(loop.t0) - p)
    if np.max(np.abs(start_gap)) > 1e-9:
        raise TransportError("loop must start at the base point")
    B = wtilde.basis
    T = transport(spec, loop, B, steps).final
    H = B.T @ T
    defect = float(np.linalg.norm(T - B @ H, 2)) if B.size else 0.0
    if defect >= holonomy_tol:
        raise DefectTooLarge(
            f"transport left the terminal subspace (defect {defect:.3e})")
    if H.size and abs(np.linalg.det(H)) < 1e-12:
        raise TransportError("holonomy matrix is numerically singular")
    return HolonomyResult(p, loop.name, H, defect)


@dataclass
class SampledSection:
    nodes: np.ndarray   # (m, n)
    values: np.ndarray  # (m, N)
    residual: float     # path-independence check


def parallel_extend(spec: ConnectionSpec, point, w, radius: float,
                    grid_res: int = 3, steps: int = 256,
                    wtilde: Optional[Subspace] = None,
                    check_pairs: int = 6) -> SampledSection:
    """Sample the local parallel section through w on a coordinate ball.

    The value at each grid node is the transport of w along the straight
    coordinate ray from the base point; the reported residual is the largest
    disagreement against transport along an axis-aligned two-leg path over a
    deterministic sample of nodes.
    """
    p = np.asarray(point, dtype=float)
    w = np.asarray(w, dtype=float)
    if wtilde is not None and not wtilde.contains(w, tol=1e-6):
        raise TransportError("vector does not lie in the terminal subspace")
    axes = [np.linspace(p[i] - radius, p[i] + radius, grid_res)
            for i in range(spec.n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    keep = np.linalg.norm(nodes - p, axis=1) <= radius + 1e-12
    nodes = nodes[keep]
    for q in nodes:
        if not spec.domain.admissible(q, spec.params):
            raise PointOutsideDomain(
                f"extension ball exits the domain at {q.tolist()}")

    values = np.empty((len(nodes), spec.N))
    for i, q in enumerate(nodes):
        if np.allclose(q, p, atol=1e-15):
            values[i] = w
            continue
        ray = line_curve(spec.domain, p, q, params=spec.params)
        values[i] = transport(spec, ray, w, steps).final

    residual = 0.0
    far = np.argsort(-np.linalg.norm(nodes - p, axis=1))[:check_pairs]
    for i in far:
        q = nodes[i]
        corner = p.copy()
        corner[0] = q[0]
        if not spec.domain.admissible(corner, spec.params):
            continue
        if np.allclose(corner, p, atol=1e-15):
            v_mid = w
        else:
            v_mid = transport(spec, line_curve(spec.domain, p, corner,
                                               params=spec.params), w, steps).final
        if np.allclose(corner, q, atol=1e-15):
            v_two = v_mid
        else:
            v_two = transport(spec, line_curve(spec.domain, corner, q,
                                               params=spec.params), v_mid, steps).final
        residual = max(residual, float(np.linalg.norm(values[i] - v_two)))
    return SampledSection(nodes, values, residual)
