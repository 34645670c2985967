"""Chart domain, connection specification, induced connection and curvature.

The fiber convention throughout: a section with component vector ``h``
satisfies ``nabla_k h = d_k h + Omega_k h``, i.e. ``Omega_k`` is the frame
connection matrix and the parallel equation reads ``v' = -Omega(gamma') v``.
For Christoffel input the induced covariant derivative on a symmetric
two-tensor is ``d_k h_ij - G^l_ki h_lj - G^l_kj h_il`` (first lower index of
``G`` is the derivative direction), so ``Omega_k`` is minus that Gamma action
re-indexed through :class:`SymIndex`.  Curvature is

    R_ij = d_i Omega_j - d_j Omega_i + Omega_i Omega_j - Omega_j Omega_i

with the overall sign pinned by the sphere-connection golden values in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .expr import Expr, compile_expr, diff, free_names, parse_expr

__all__ = [
    "Domain", "SymIndex", "ConnectionSpec", "BundleError",
    "PointOutsideDomain", "ExpressionEvalFailure",
    "connection_matrices", "curvature_operators", "curvature_pairs",
    "omega_stack", "curvature_stack", "nudge_off_breakpoints",
]


class BundleError(ValueError):
    """Base class for chart/connection failures."""


class PointOutsideDomain(BundleError):
    pass


class ExpressionEvalFailure(BundleError):
    pass


@dataclass(frozen=True)
class Domain:
    """Open coordinate box with optional periodic coordinates and exclusions.

    A point is excluded when any excluded-set expression evaluates to a value
    with absolute value below ``exclusion_radius``.
    """

    names: tuple
    lows: tuple
    highs: tuple
    periods: tuple = None
    excluded: tuple = ()
    exclusion_radius: float = 1e-6

    def __post_init__(self):
        n = len(self.names)
        if n < 1 or len(self.lows) != n or len(self.highs) != n:
            raise BundleError("coordinate names and ranges disagree")
        for lo, hi in zip(self.lows, self.highs):
            if not lo < hi:
                raise BundleError(f"degenerate range [{lo}, {hi}]")
        if self.periods is None:
            object.__setattr__(self, "periods", (None,) * n)
        elif len(self.periods) != n:
            raise BundleError("one period entry per coordinate required")

    @property
    def dim(self):
        return len(self.names)

    @property
    def scale(self):
        """Smallest finite coordinate span; 1.0 if every range is infinite."""
        spans = []
        for lo, hi, per in zip(self.lows, self.highs, self.periods):
            if np.isfinite(lo) and np.isfinite(hi):
                spans.append(hi - lo)
            elif per is not None:
                spans.append(per)
        return min(spans) if spans else 1.0

    def env(self, points, params):
        """Evaluation environment for an (m, n) batch or a single point."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        env = {name: pts[:, i] for i, name in enumerate(self.names)}
        env.update(params)
        return env

    def contains(self, point):
        # periodic coordinates wind around the whole circle; the declared
        # range only fixes how closed curves are interpreted
        p = np.asarray(point, dtype=float)
        for i, per in enumerate(self.periods):
            if per is None and not (self.lows[i] < p[i] < self.highs[i]):
                return False
        return True

    def excluded_near(self, point, params=None):
        if not self.excluded:
            return False
        ctx_env = self.env(point, params or {})
        for e in self.excluded:
            fn = compile_expr(e)
            val = np.asarray(fn(ctx_env), dtype=float)
            if np.any(np.abs(val) < self.exclusion_radius):
                return True
        return False

    def admissible(self, point, params=None):
        return self.contains(point) and not self.excluded_near(point, params)

    def require_admissible(self, points, params=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.ones(pts.shape[0], dtype=bool)
        for i, per in enumerate(self.periods):
            if per is None:
                inside &= (pts[:, i] > self.lows[i]) & (pts[:, i] < self.highs[i])
        if not np.all(inside):
            bad = pts[~inside][0]
            raise PointOutsideDomain(f"point {bad.tolist()} outside chart box")
        if self.excluded:
            env = self.env(pts, params or {})
            for e in self.excluded:
                val = np.abs(np.asarray(compile_expr(e)(env), dtype=float))
                val = np.broadcast_to(val, (pts.shape[0],))
                if np.any(val < self.exclusion_radius):
                    bad = pts[val < self.exclusion_radius][0]
                    raise PointOutsideDomain(
                        f"point {bad.tolist()} inside excluded set")

    def wrap_delta(self, delta):
        """Reduce a coordinate difference modulo declared periods."""
        d = np.array(delta, dtype=float)
        for i, per in enumerate(self.periods):
            if per is not None:
                d[i] = (d[i] + per / 2.0) % per - per / 2.0
        return d


class SymIndex:
    """Bijection between unordered coordinate pairs (i <= j) and fiber slots.

    Diagonal pairs come first, so for n = 2 the basis order is
    ``dx1 (x) dx1``, ``dx2 (x) dx2``, ``dx1 (x) dx2 + dx2 (x) dx1``.
    The per-slot weight (1 on diagonal pairs, 2 off) is the multiplicity of
    the slot inside the full matrix, used by the invariant inner product.
    """

    def __init__(self, n: int):
        self.n = n
        self.pairs = [(i, i) for i in range(n)] + \
            [(i, j) for i in range(n) for j in range(i + 1, n)]
        self.N = len(self.pairs)
        assert self.N == n * (n + 1) // 2
        self._index = {p: a for a, p in enumerate(self.pairs)}
        self.weights = np.array(
            [1.0 if i == j else 2.0 for i, j in self.pairs])
        # basis matrices E_A, shape (N, n, n)
        basis = np.zeros((self.N, n, n))
        for a, (i, j) in enumerate(self.pairs):
            basis[a, i, j] = 1.0
            basis[a, j, i] = 1.0
        self.basis = basis

    def index_of(self, i, j):
        return self._index[(min(i, j), max(i, j))]

    def to_matrix(self, vec):
        """Coefficient vector -> symmetric n x n matrix."""
        v = np.asarray(vec, dtype=float)
        return np.einsum("...a,aij->...ij", v, self.basis)

    def to_vec(self, mat):
        """Symmetric matrix -> coefficient vector (reads entries at i <= j)."""
        m = np.asarray(mat, dtype=float)
        return np.stack([m[..., i, j] for i, j in self.pairs], axis=-1)


class ConnectionSpec:
    """A connection given by chart Christoffel symbols or raw form matrices.

    ``kind='christoffel'``: ``gamma[(l, k, i)]`` holds the expression for
    ``G^l_{ki}`` (k the derivative direction); omitted entries are zero and
    symmetry in the lower indices is NOT assumed.  The fiber is the
    ``n(n+1)/2``-dimensional space of symmetric two-tensor coefficients.

    ``kind='matrix'``: ``omega[i][j][k]`` holds the expression for the
    ``(i, j)`` entry of ``Omega_k`` on an abstract rank-``fiber_dim`` bundle,
    used verbatim under the sign convention in the module docstring.
    """

    def __init__(self, domain: Domain, *, kind: str, params: Optional[dict] = None,
                 gamma: Optional[dict] = None, fiber_dim: Optional[int] = None,
                 omega: Optional[Sequence] = None):
        if kind not in ("christoffel", "matrix"):
            raise BundleError(f"unknown connection kind {kind!r}")
        self.domain = domain
        self.kind = kind
        self.params = dict(params or {})
        n = domain.dim
        self.n = n
        declared = set(domain.names) | set(self.params) | {"pi"}

        if kind == "christoffel":
            self.sym = SymIndex(n)
            self.N = self.sym.N
            self.gamma = dict(gamma or {})
            for (l, k, i), e in self.gamma.items():
                if not (0 <= l < n and 0 <= k < n and 0 <= i < n):
                    raise BundleError(f"christoffel index {(l, k, i)} out of range")
                self._check_names(e, declared)
            self.omega = None
        else:
            if fiber_dim is None or fiber_dim < 1:
                raise BundleError("matrix connection needs fiber_dim >= 1")
            self.N = int(fiber_dim)
            self.sym = None
            self.gamma = None
            self.omega = omega
            for i in range(self.N):
                for j in range(self.N):
                    for k in range(n):
                        self._check_names(omega[i][j][k], declared)
        for e in domain.excluded:
            self._check_names(e, declared)
        self._compiled = None

    @staticmethod
    def _check_names(e: Expr, declared):
        extra = free_names(e) - declared
        if extra:
            raise BundleError(f"undeclared names {sorted(extra)} in '{e}'")

    # -- compiled entry tables ------------------------------------------------

    def _tables(self):
        if self._compiled is not None:
            return self._compiled
        n, N = self.n, self.N
        zero = compile_expr(parse_expr("0"))
        if self.kind == "christoffel":
            gam = [[[zero] * n for _ in range(n)] for _ in range(n)]
            dgam = [[[[zero] * n for _ in range(n)] for _ in range(n)]
                    for _ in range(n)]
            for (l, k, i), e in self.gamma.items():
                gam[l][k][i] = compile_expr(e)
                for d, name in enumerate(self.domain.names):
                    dgam[l][k][i][d] = compile_expr(diff(e, name))
            self._compiled = ("christoffel", gam, dgam)
        else:
            om = [[[None] * n for _ in range(N)] for _ in range(N)]
            dom = [[[[None] * n for _ in range(n)] for _ in range(N)]
                   for _ in range(N)]
            for i in range(N):
                for j in range(N):
                    for k in range(n):
                        e = self.omega[i][j][k]
                        om[i][j][k] = compile_expr(e)
                        for d, name in enumerate(self.domain.names):
                            dom[i][j][d][k] = compile_expr(diff(e, name))
            self._compiled = ("matrix", om, dom)
        return self._compiled

    def piecewise_conditions(self):
        """All (lhs - rhs) condition expressions appearing in the spec."""
        conds = []

        def walk(e):
            from .expr import Binary, Piecewise, Unary
            if isinstance(e, Piecewise):
                conds.append(Binary("sub", e.lhs, e.rhs))
                walk(e.lhs); walk(e.rhs); walk(e.then); walk(e.other)
            elif isinstance(e, Unary):
                walk(e.arg)
            elif isinstance(e, Binary):
                walk(e.left); walk(e.right)

        exprs = (list(self.gamma.values()) if self.kind == "christoffel"
                 else [self.omega[i][j][k] for i in range(self.N)
                       for j in range(self.N) for k in range(self.n)])
        for e in exprs:
            walk(e)
        return conds


def nudge_off_breakpoints(spec: ConnectionSpec, point, eps: float = 1e-12):
    """Shift a point landing exactly on a piecewise breakpoint by +eps."""
    p = np.array(point, dtype=float)
    conds = spec.piecewise_conditions()
    if not conds:
        return p
    env = spec.domain.env(p, spec.params)
    for c in conds:
        val = np.asarray(compile_expr(c)(env), dtype=float)
        if np.any(val == 0.0):
            return p + eps
    return p


def _entry(fn, env, m):
    """Evaluate a compiled entry and broadcast to batch length m."""
    out = np.asarray(fn(env), dtype=float)
    if out.shape != (m,):
        out = np.broadcast_to(out, (m,)).copy()
    return out


def omega_stack(spec: ConnectionSpec, points) -> np.ndarray:
    """Connection matrices Omega_k over an (m, n) batch; shape (m, n, N, N)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0]
    n, N = spec.n, spec.N
    env = spec.domain.env(pts, spec.params)
    kind, tab, _ = spec._tables()
    with np.errstate(all="ignore"):
        if kind == "christoffel":
            G = np.zeros((m, n, n, n))  # G[m, k, l, i] = Gamma^l_{ki}
            for (l, k, i), e in spec.gamma.items():
                G[:, k, l, i] = _entry(tab[l][k][i], env, m)
            omega = -_gamma_action(G, spec.sym)
        else:
            omega = np.zeros((m, n, N, N))
            for i in range(N):
                for j in range(N):
                    for k in range(n):
                        omega[:, k, i, j] = _entry(tab[i][j][k], env, m)
    if not np.all(np.isfinite(omega)):
        bad = pts[~np.all(np.isfinite(omega), axis=(1, 2, 3))][0]
        raise ExpressionEvalFailure(
            f"connection entries not finite at {bad.tolist()}")
    return omega


def _domega_stack(spec: ConnectionSpec, points) -> np.ndarray:
    """Partial derivatives d_d Omega_k; shape (m, n_d, n_k, N, N)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0]
    n, N = spec.n, spec.N
    env = spec.domain.env(pts, spec.params)
    kind, _, dtab = spec._tables()
    with np.errstate(all="ignore"):
        if kind == "christoffel":
            dG = np.zeros((m, n, n, n, n))  # dG[m, d, k, l, i]
            for (l, k, i), e in spec.gamma.items():
                for d in range(n):
                    dG[:, d, k, l, i] = _entry(dtab[l][k][i][d], env, m)
            out = np.empty((m, n, n, N, N))
            for d in range(n):
                out[:, d] = -_gamma_action(dG[:, d], spec.sym)
        else:
            out = np.zeros((m, n, n, N, N))
            for i in range(N):
                for j in range(N):
                    for d in range(n):
                        for k in range(n):
                            out[:, d, k, i, j] = _entry(dtab[i][j][d][k], env, m)
    if not np.all(np.isfinite(out)):
        bad = pts[~np.all(np.isfinite(out), axis=(1, 2, 3, 4))][0]
        raise ExpressionEvalFailure(
            f"connection derivative not finite at {bad.tolist()}")
    return out


def _gamma_action(G, sym: SymIndex):
    """Matrix of h -> G_k^T H + H G_k on SymIndex coefficients.

    G has shape (m, n, n, n) indexed [batch, direction k, upper l, lower i];
    returns (m, n, N, N).
    """
    E = sym.basis  # (N, n, n)
    # (G_k^T E_B)_{ij} = sum_l G[l,i] E_B[l,j];  (E_B G_k)_{ij} = sum_l E_B[i,l] G[l,j]
    act = np.einsum("mkli,Blj->mkBij", G, E) + np.einsum("Bil,mklj->mkBij", E, G)
    # read row A of the action matrix: entry (i_A, j_A) of act[..., B, :, :]
    rows = [act[:, :, :, i, j] for i, j in sym.pairs]
    return np.stack(rows, axis=2)  # (m, k, A, B)


def curvature_pairs(n: int):
    """Ordered coordinate pairs (i, j), i < j, indexing curvature operators."""
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def curvature_stack(spec: ConnectionSpec, points) -> np.ndarray:
    """Curvature operators R_ij over an (m, n) batch; shape (m, P, N, N)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0]
    pairs = curvature_pairs(spec.n)
    if not pairs:
        return np.zeros((m, 0, spec.N, spec.N))
    omega = omega_stack(spec, pts)
    domega = _domega_stack(spec, pts)
    out = np.empty((m, len(pairs), spec.N, spec.N))
    for idx, (i, j) in enumerate(pairs):
        oi, oj = omega[:, i], omega[:, j]
        out[:, idx] = (domega[:, i, j] - domega[:, j, i]
                       + np.matmul(oi, oj) - np.matmul(oj, oi))
    return out


def connection_matrices(spec: ConnectionSpec, point) -> np.ndarray:
    """Stack of n matrices Omega_k at a point; shape (n, N, N)."""
    p = np.asarray(point, dtype=float)
    spec.domain.require_admissible(p, spec.params)
    return omega_stack(spec, p)[0]


def curvature_operators(spec: ConnectionSpec, point) -> np.ndarray:
    """Stack of curvature operators R_ij (i < j) at a point; shape (P, N, N).

    Pair order matches :func:`curvature_pairs`.
    """
    p = np.asarray(point, dtype=float)
    spec.domain.require_admissible(p, spec.params)
    return curvature_stack(spec, p)[0]
