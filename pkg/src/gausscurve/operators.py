"""Discrete convexified curvature operator on a point cloud.

Interior rows evaluate

    max( -det_h(u) + kappa(x) * (1 + |grad_h u|^2)^2 , -lambda1_h(u) )

where ``det_h`` is the minimum over orthogonal direction pairs of the
product of positive parts of directional second differences,
``|grad_h u|^2`` the upwind (eikonal-style) squared gradient from the
axis-direction pairs, and ``lambda1_h`` the minimum directional second
difference.  Boundary rows enforce the Dirichlet data strongly:
``u(x) - g(x)``.  All ingredients are non-decreasing in ``u(x0)`` and
non-increasing in the neighbour values, so the scheme is degenerate
elliptic (monotone).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .geometry import Domain, PointCloud
from .stencil import DirectionalStencil, StencilTable

# Exponent (n+2)/2 with the dimension fixed at n = 2.
GRAD_EXPONENT = 2.0

# Total curvature bound: integral of (1+|p|^2)^{-2} over the plane.
TOTAL_CURVATURE_LIMIT = float(np.pi)

# Relative strictness margin used when deciding whether the compatibility
# inequality holds "strictly" in floating point.
COMPATIBILITY_MARGIN = 0.01


@dataclass(frozen=True)
class ProblemSpec:
    """Continuous problem data: domain, curvature field, Dirichlet data.

    ``kappa`` and ``g`` are vectorised callables of ``(x, y)``; curvature
    must be non-negative.  The dimension is fixed at 2.
    """

    domain: Domain
    kappa: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def kappa_at(self, pts: np.ndarray) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.kappa(pts[:, 0], pts[:, 1]), dtype=float),
            (pts.shape[0],)).copy()

    def g_at(self, pts: np.ndarray) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.g(pts[:, 0], pts[:, 1]), dtype=float),
            (pts.shape[0],)).copy()


@dataclass
class GridFunction:
    """Real values indexed by cloud point id."""

    values: np.ndarray
    cloud: PointCloud = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.cloud.n_points,):
            raise ValueError("values shape does not match the cloud")
        if not np.isfinite(self.values).all():
            raise ValueError("grid function contains non-finite values")

    def copy(self) -> "GridFunction":
        return GridFunction(self.values.copy(), self.cloud)


def R(p_sq) -> np.ndarray:
    """Gradient factor ``(1 + |p|^2)^{(n+2)/2}`` with n = 2, taking the
    squared gradient magnitude."""
    p_sq = np.asarray(p_sq, dtype=float)
    return (1.0 + p_sq) ** GRAD_EXPONENT


def second_diff(u: GridFunction, s: DirectionalStencil) -> float:
    """Directional second difference ``sum_j a_j (u(x_j) - u(x0))``."""
    du = u.values[s.neighbor_ids] - u.values[s.center]
    return float(np.dot(s.a, du))


class _Fields(NamedTuple):
    d2: np.ndarray        # (n_int, 2N) directional second differences
    lam1: np.ndarray      # (n_int,)
    det: np.ndarray       # (n_int,) min over valid pairs (+inf if none)
    pair_vals: np.ndarray  # (n_int, 2, 2) upwind pair values
    m: np.ndarray         # (n_int, 2) clamped axis slopes
    gsq: np.ndarray       # (n_int,)
    f_int: np.ndarray     # (n_int,)


class AssembledScheme:
    """Vectorised evaluator for repeated residual computations.

    Precomputes curvature and boundary data at the cloud points plus the
    coefficient-sum bounds used for explicit step-size control.
    """

    def __init__(self, spec: ProblemSpec, cloud: PointCloud,
                 table: StencilTable):
        if table.cloud is not cloud:
            raise ValueError("table was built for a different cloud")
        self.spec = spec
        self.cloud = cloud
        self.table = table
        self.n_pairs = table.dirs.n_pairs
        self.interior = table.interior_ids
        self.boundary = cloud.boundary_ids
        pts = cloud.points
        self.kappa_int = spec.kappa_at(pts[self.interior])
        if (self.kappa_int < 0).any():
            raise ValueError("curvature must be non-negative (H3)")
        self.g_bdy = spec.g_at(pts[self.boundary])
        # Coefficient sums for Lipschitz/step bounds.
        self.A = np.abs(table.d2_a).sum(axis=2)              # (n_int, 2N)
        b = table.grad_b
        self.beta = np.stack([
            np.maximum(-(b[:, :, 0] + b[:, :, 3]), 0.0),
            np.maximum(-(b[:, :, 1] + b[:, :, 2]), 0.0)], axis=2)

    def fields(self, values: np.ndarray) -> _Fields:
        t = self.table
        u0 = values[self.interior][:, None, None]
        du = values[t.d2_nbr] - u0
        d2 = (t.d2_a * du).sum(axis=2)
        d2m = np.where(t.d2_valid, d2, np.inf)
        lam1 = d2m.min(axis=1)
        pos = np.maximum(d2, 0.0)
        n = self.n_pairs
        pair_valid = t.d2_valid[:, :n] & t.d2_valid[:, n:]
        prod = np.where(pair_valid, pos[:, :n] * pos[:, n:], np.inf)
        det = prod.min(axis=1)

        dug = values[t.grad_nbr] - u0
        b = t.grad_b
        vf = b[:, :, 0] * dug[:, :, 0] + b[:, :, 3] * dug[:, :, 3]
        vb = b[:, :, 1] * dug[:, :, 1] + b[:, :, 2] * dug[:, :, 2]
        pair_vals = np.stack([vf, vb], axis=2)
        masked = np.where(t.grad_pair_ok, pair_vals, -np.inf)
        m = np.maximum(np.maximum(masked[:, :, 0], masked[:, :, 1]), 0.0)
        gsq = (m * m).sum(axis=1)

        with np.errstate(invalid="ignore"):
            f_det = -det + self.kappa_int * (1.0 + gsq) ** GRAD_EXPONENT
        f_int = np.maximum(np.where(np.isinf(det), -np.inf, f_det), -lam1)
        return _Fields(d2, lam1, det, pair_vals, m, gsq, f_int)

    def residual_values(self, values: np.ndarray) -> np.ndarray:
        out = np.empty_like(values)
        out[self.interior] = self.fields(values).f_int
        out[self.boundary] = values[self.boundary] - self.g_bdy
        return out

    def row_lipschitz(self, values: np.ndarray,
                      fields: _Fields | None = None) -> np.ndarray:
        """Per-point bound on the slope of the residual in ``u(x0)``.

        Uses the active branch at the current iterate: the attaining
        direction's coefficient sum for the eigenvalue term, the attaining
        pair's product rule for the determinant term, and the active
        upwind pairs for the gradient term.  Boundary rows have slope 1.
        """
        f = fields if fields is not None else self.fields(values)
        t = self.table
        n = self.n_pairs
        rows = np.arange(len(self.interior))

        d2m = np.where(t.d2_valid, f.d2, np.inf)
        lam_K = self.A[rows, d2m.argmin(axis=1)]

        pos = np.maximum(f.d2, 0.0)
        pair_valid = t.d2_valid[:, :n] & t.d2_valid[:, n:]
        prod = np.where(pair_valid, pos[:, :n] * pos[:, n:], np.inf)
        p = prod.argmin(axis=1)
        det_K = np.where(
            np.isinf(prod[rows, p]), 0.0,
            self.A[rows, p] * pos[rows, p + n]
            + self.A[rows, p + n] * pos[rows, p])

        masked = np.where(t.grad_pair_ok, f.pair_vals, -np.inf)
        active = masked.argmax(axis=2)
        beta_act = np.take_along_axis(self.beta, active[:, :, None],
                                      axis=2)[:, :, 0]
        slope = np.where(f.m > 0.0, beta_act, 0.0)
        grad_K = (self.kappa_int * GRAD_EXPONENT * (1.0 + f.gsq)
                  * 2.0 * (f.m * slope).sum(axis=1))

        out = np.ones_like(values)
        out[self.interior] = np.maximum(lam_K, det_K + grad_K)
        return out


def det_plus_h(u: GridFunction, x0: int, table: StencilTable) -> float:
    """Discrete positive-part determinant: min over orthogonal direction
    pairs of the product of clamped second differences."""
    return float(_point_fields(u, x0, table).det[0])


def grad_mag_sq_h(u: GridFunction, x0: int, table: StencilTable) -> float:
    """Upwind squared gradient magnitude from the axis-direction pairs."""
    return float(_point_fields(u, x0, table).gsq[0])


def lambda1_h(u: GridFunction, x0: int, table: StencilTable) -> float:
    """Smallest directional second difference over the direction set."""
    return float(_point_fields(u, x0, table).lam1[0])


def F_interior(u: GridFunction, x0: int, spec: ProblemSpec,
               table: StencilTable) -> float:
    """Interior residual row at cloud point ``x0``."""
    f = _point_fields(u, x0, table)
    x, y = u.cloud.points[x0]
    kap = float(np.asarray(spec.kappa(np.array([x]), np.array([y])),
                           dtype=float).reshape(-1)[0])
    det = f.det[0]
    f_det = -np.inf if np.isinf(det) else -det + kap * R(f.gsq[0])
    return float(max(f_det, -f.lam1[0]))


def F_boundary(u: GridFunction, x0: int, spec: ProblemSpec) -> float:
    """Strong Dirichlet row: ``u(x0) - g(x0)``."""
    if not u.cloud.is_boundary[x0]:
        raise ValueError(f"point {x0} is not a boundary point")
    x, y = u.cloud.points[x0]
    gval = float(np.asarray(spec.g(np.array([x]), np.array([y])),
                            dtype=float).reshape(-1)[0])
    return float(u.values[x0] - gval)


def residual(u: GridFunction, spec: ProblemSpec,
             table: StencilTable) -> GridFunction:
    """Full residual: interior operator rows and boundary Dirichlet rows."""
    scheme = AssembledScheme(spec, u.cloud, table)
    return GridFunction(scheme.residual_values(u.values), u.cloud)


class CompatibilityResult(NamedTuple):
    lhs: float
    rhs: float
    ok: bool


def check_compatibility(spec: ProblemSpec,
                        resolution: int = 512) -> CompatibilityResult:
    """Total-curvature bound: midpoint quadrature of the curvature over
    the domain against the planar limit ``pi``.

    ``ok`` requires the inequality to hold with a relative margin of
    ``COMPATIBILITY_MARGIN`` so that data sitting exactly on the limit
    (where uniqueness fails) is flagged as non-strict.
    """
    xmin, ymin, xmax, ymax = spec.domain.bbox
    dx = (xmax - xmin) / resolution
    dy = (ymax - ymin) / resolution
    cx = xmin + dx * (np.arange(resolution) + 0.5)
    cy = ymin + dy * (np.arange(resolution) + 0.5)
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    inside = spec.domain.contains(centers)
    vals = np.asarray(spec.kappa(centers[inside, 0], centers[inside, 1]),
                      dtype=float)
    lhs = float(np.sum(np.broadcast_to(vals, (int(inside.sum()),)))
                * dx * dy)
    rhs = TOTAL_CURVATURE_LIMIT
    return CompatibilityResult(lhs, rhs,
                               lhs < (1.0 - COMPATIBILITY_MARGIN) * rhs)


def _point_fields(u: GridFunction, x0: int, table: StencilTable) -> _Fields:
    """Fields for a single interior point, via the vectorised kernel."""
    i = table.row(x0)
    t = table
    values = u.values
    n = t.dirs.n_pairs

    du = values[t.d2_nbr[i]] - values[x0]
    d2 = (t.d2_a[i] * du).sum(axis=1)
    lam1 = np.where(t.d2_valid[i], d2, np.inf).min()
    pos = np.maximum(d2, 0.0)
    pair_valid = t.d2_valid[i, :n] & t.d2_valid[i, n:]
    det = np.where(pair_valid, pos[:n] * pos[n:], np.inf).min()

    dug = values[t.grad_nbr[i]] - values[x0]
    b = t.grad_b[i]
    vf = b[:, 0] * dug[:, 0] + b[:, 3] * dug[:, 3]
    vb = b[:, 1] * dug[:, 1] + b[:, 2] * dug[:, 2]
    pair_vals = np.stack([vf, vb], axis=1)
    masked = np.where(t.grad_pair_ok[i], pair_vals, -np.inf)
    m = np.maximum(np.maximum(masked[:, 0], masked[:, 1]), 0.0)
    gsq = float((m * m).sum())
    return _Fields(d2[None], np.array([lam1]), np.array([det]),
                   pair_vals[None], m[None], np.array([gsq]),
                   np.array([np.nan]))
