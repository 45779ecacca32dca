"""Wide-stencil construction: direction sets, neighbour selection, weights.

For each interior point and each direction ``nu`` in the finite direction
set, one neighbour is selected per quadrant of the ``(nu, nu^perp)`` frame,
chosen to align as closely as possible with the line through ``x0`` along
``nu``.  Writing the neighbours in polar coordinates ``(r_j, phi_j)`` and

    S_j = r_j sin(phi_j),   C_j = r_j cos(phi_j),

the second-derivative weights ``a_j`` satisfy (exactly, by construction)

    sum a_j C_j = 0,  sum a_j S_j = 0,  sum a_j C_j^2 = 2,

so the four-point difference ``sum a_j (u(x_j) - u(x0))`` is consistent
with ``u_{nu nu}``, and the quadrant sign pattern forces ``a_j >= 0``.
The gradient pairs ``(b_1, b_4)`` / ``(b_2, b_3)`` reproduce the one-sided
differences ``-u_nu`` / ``+u_nu`` used by the upwind eikonal scheme.

A lattice point lying extremely close to the boundary can own a quadrant
sector that leaves the domain through a boundary window narrower than the
boundary sample spacing; such a sector contains no discretisation point at
any radius.  ``build_stencil_table`` omits those directions at those
points (recorded in ``StencilTable.dropped``) and falls back to one-sided
gradient differences, which preserves monotonicity and consistency at
fixed interior points under refinement.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStencilError, IncompleteStencilError
from .geometry import PointCloud

# Neighbours whose |sin(phi)| all fall below this are treated as collinear
# with the stencil axis (non-uniform centred difference branch).
ALIGNED_TOL = 1e-9

# Relative threshold on the common denominator, scaled by r_max^4.
DEGENERATE_TOL = 1e-14

# A lone gradient-pair point carries no axis information when nearly
# perpendicular to it; below this |cos(phi)| the pair is disabled instead.
ONE_SIDED_MIN_COS = 0.1

_AXES = np.array([[1.0, 0.0], [0.0, 1.0]])


@dataclass(frozen=True)
class DirectionSet:
    """Finite set of orthogonal direction pairs with its search radius.

    ``nu[j]`` is ``(cos((j+1) d_theta), sin((j+1) d_theta))`` and
    ``nu_perp[j]`` its 90-degree rotation; ``n_pairs * d_theta == pi/2``.
    """

    d_theta: float
    nu: np.ndarray        # (N, 2)
    nu_perp: np.ndarray   # (N, 2)
    delta: float          # search radius

    @property
    def n_pairs(self) -> int:
        return self.nu.shape[0]

    def frames(self) -> tuple:
        """Axes for all 2N directional stencils.

        Row ``i`` (i < N) is direction angle ``(i+1) d_theta``; row ``N+i``
        is its perpendicular, angle ``(i+1) d_theta + pi/2``.  Together
        they cover ``i * d_theta`` for ``i = 1 .. pi/d_theta``.
        """
        axes = np.vstack([self.nu, self.nu_perp])
        perps = np.vstack([self.nu_perp, -self.nu])
        return axes, perps


def make_direction_set(h: float) -> DirectionSet:
    """Build the direction set for spacing ``h``.

    The target angular resolution ``(pi/2) * h^{1/4}`` is capped at
    ``pi/4`` and rounded so that ``pi/2`` is an exact multiple of
    ``d_theta``; this keeps the axis pair and the perpendicular closure in
    the set.  The resulting pair count is ``max(2, ceil(h^{-1/4}))``:
    2 pairs for h >= 2^-4, 3 for 2^-5..2^-6, 4 for 2^-7..2^-8, and so on.
    """
    if h <= 0:
        raise ValueError(f"spacing must be positive, got h={h}")
    d0 = min(0.5 * np.pi * h ** 0.25, np.pi / 4.0)
    n = int(np.ceil(np.pi / (2.0 * d0)))
    d_theta = np.pi / (2.0 * n)
    ang = d_theta * np.arange(1, n + 1)
    nu = np.column_stack([np.cos(ang), np.sin(ang)])
    # Snap components that should be exactly 0 or +-1 (axis directions),
    # so lattice points land on stencil axes with S exactly zero.
    snap0 = np.abs(nu) < 1e-15
    nu[snap0] = 0.0
    snap1 = np.abs(np.abs(nu) - 1.0) < 1e-15
    nu[snap1] = np.sign(nu[snap1])
    nu_perp = np.column_stack([-nu[:, 1], nu[:, 0]])
    t = d_theta / 2.0
    delta = h * (1.0 + np.cos(t) * (np.cos(t) / np.sin(t)) + np.sin(t))
    nu.setflags(write=False)
    nu_perp.setflags(write=False)
    return DirectionSet(float(d_theta), nu, nu_perp, float(delta))


def _quadrants(S: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Quadrant index 0..3 with on-axis ties: phi=0 -> Q1, pi/2 -> Q2,
    pi -> Q3, 3pi/2 -> Q4."""
    return np.where(S > 0, np.where(C > 0, 0, 1),
                    np.where(S < 0, np.where(C < 0, 2, 3),
                             np.where(C > 0, 0, 2)))


def _pick_per_quadrant(ids, r, sin2, quad):
    """Index (into the candidate arrays) of the best-aligned point per
    quadrant: argmin of sin^2(phi), ties by smaller r then smaller id.
    Returns -1 for empty quadrants."""
    order = np.lexsort((ids, r, sin2))
    qs = quad[order]
    uq, first = np.unique(qs, return_index=True)
    sel = np.full(4, -1, dtype=np.int64)
    sel[uq] = order[first]
    return sel


def select_neighbors(cloud: PointCloud, x0: int, nu, delta: float):
    """Quadrant neighbours of cloud point ``x0`` for direction ``nu``.

    Returns the 4 point ids, one per quadrant of the ``(nu, nu_perp)``
    frame, each minimising ``sin^2(phi)`` over the ball of radius
    ``delta``; raises :class:`IncompleteStencilError` on an empty quadrant.
    """
    nu = np.asarray(nu, dtype=float)
    nup = np.array([-nu[1], nu[0]])
    center = cloud.points[x0]
    ids = np.asarray(cloud.tree.query_ball_point(center, delta),
                     dtype=np.int64)
    ids = ids[ids != x0]
    d = cloud.points[ids] - center
    C = d @ nu
    S = d @ nup
    r2 = S * S + C * C
    sel = _pick_per_quadrant(ids, np.sqrt(r2), S * S / r2,
                             _quadrants(S, C))
    if (sel < 0).any():
        quadrant = int(np.flatnonzero(sel < 0)[0]) + 1
        raise IncompleteStencilError(x0, nu, quadrant)
    return ids[sel]


def _d2_weights_sc(S: np.ndarray, C: np.ndarray):
    """Vectorised second-derivative weights from (..., 4) sign-pattern data.

    Returns ``(a, aligned)``; rows flagged aligned use the non-uniform
    3-point collinear formula.  Raises on a vanishing denominator in the
    non-aligned branch.
    """
    S = np.asarray(S, dtype=float)
    C = np.asarray(C, dtype=float)
    r = np.hypot(S, C)
    aligned = (np.abs(S) / r).max(axis=-1) < ALIGNED_TOL

    t23 = C[..., 2] * S[..., 1] - C[..., 1] * S[..., 2]
    t14 = C[..., 0] * S[..., 3] - C[..., 3] * S[..., 0]
    q14 = C[..., 0] ** 2 * S[..., 3] - C[..., 3] ** 2 * S[..., 0]
    q23 = C[..., 2] ** 2 * S[..., 1] - C[..., 1] ** 2 * S[..., 2]
    den = t23 * q14 - t14 * q23

    bad = (~aligned) & (np.abs(den) <
                        DEGENERATE_TOL * r.max(axis=-1) ** 4)
    if bad.any():
        raise DegenerateStencilError(
            "degenerate stencil: vanishing denominator in "
            f"{int(bad.sum())} configuration(s)")

    safe = np.where(den == 0.0, 1.0, den)
    a = np.empty_like(S)
    a[..., 0] = 2.0 * S[..., 3] * t23 / safe
    a[..., 1] = 2.0 * S[..., 2] * t14 / safe
    a[..., 2] = -2.0 * S[..., 1] * t14 / safe
    a[..., 3] = -2.0 * S[..., 0] * t23 / safe

    if aligned.any():
        al = np.flatnonzero(np.atleast_1d(aligned))
        ra = r.reshape(-1, 4)[al]
        aa = np.zeros_like(ra)
        fwd = np.where(ra[:, 0] <= ra[:, 3], 0, 3)
        bwd = np.where(ra[:, 1] <= ra[:, 2], 1, 2)
        rows = np.arange(len(al))
        rp = ra[rows, fwd]
        rm = ra[rows, bwd]
        aa[rows, fwd] = 2.0 / (rp * (rp + rm))
        aa[rows, bwd] = 2.0 / (rm * (rp + rm))
        a.reshape(-1, 4)[al] = aa
    return a, aligned


def _grad_pair_weights(Si, Ci, Sj, Cj, target):
    """Weights ``(b_i, b_j)`` for one gradient quadrant pair (vectorised).

    Solves ``b_i S_i + b_j S_j = 0`` and ``b_i C_i + b_j C_j = target``
    with ``target = -1`` for the forward pair (quadrants 1, 4) and ``+1``
    for the backward pair (2, 3).  A pair lying entirely on the axis
    collapses to the one-sided difference ``-1/r`` on the closer point.
    """
    ri = np.hypot(Si, Ci)
    rj = np.hypot(Sj, Cj)
    den = Si * Cj - Ci * Sj
    pair_aligned = np.maximum(np.abs(Si) / ri, np.abs(Sj) / rj) < ALIGNED_TOL
    bad = (~pair_aligned) & (np.abs(den) <
                             DEGENERATE_TOL * np.maximum(ri, rj) ** 2)
    if bad.any():
        raise DegenerateStencilError(
            "degenerate stencil: vanishing gradient-pair denominator in "
            f"{int(bad.sum())} configuration(s)")
    safe = np.where(den == 0.0, 1.0, den)
    bi = -target * Sj / safe
    bj = target * Si / safe
    # On-axis pair: b = target / C on the closer point, and |C| = r with
    # sign(C) = -target there, so b = -1/r for either orientation.
    use_i = pair_aligned & (ri <= rj)
    use_j = pair_aligned & (ri > rj)
    bi = np.where(use_i, -1.0 / ri, np.where(use_j, 0.0, bi))
    bj = np.where(use_j, -1.0 / rj, np.where(use_i, 0.0, bj))
    return bi, bj


def _check_sign_pattern(S, C):
    tol = -1e-12 * float(np.hypot(S, C).max())
    ok = (S[0] >= tol and S[1] >= tol and S[2] <= -tol and S[3] <= -tol
          and C[0] >= tol and C[3] >= tol and C[1] <= -tol and C[2] <= -tol)
    if not ok:
        raise ValueError("points do not satisfy the quadrant sign pattern")


def d2_coefficients(r, phi):
    """Second-derivative weights for one 4-point polar configuration.

    Parameters are quadrant-ordered arrays of length 4.  Returns
    ``(a, aligned)``.
    """
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    S = r * np.sin(phi)
    C = r * np.cos(phi)
    _check_sign_pattern(S, C)
    a, aligned = _d2_weights_sc(S[None, :], C[None, :])
    return a[0], bool(aligned[0])


def grad_coefficients(r, phi):
    """Upwind gradient weights ``(b_1, b_2, b_3, b_4)`` for one
    quadrant-ordered polar configuration."""
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    S = r * np.sin(phi)
    C = r * np.cos(phi)
    _check_sign_pattern(S, C)
    b = np.zeros(4)
    b[0], b[3] = _grad_pair_weights(S[0], C[0], S[3], C[3], -1.0)
    b[1], b[2] = _grad_pair_weights(S[1], C[1], S[2], C[2], +1.0)
    return b


@dataclass(frozen=True)
class DirectionalStencil:
    """One direction's worth of stencil data at a single interior point."""

    center: int               # cloud point id of x0
    nu: np.ndarray            # (2,)
    neighbor_ids: np.ndarray  # (4,) quadrant order
    r: np.ndarray             # (4,)
    phi: np.ndarray           # (4,) w.r.t. (nu, nu_perp)
    a: np.ndarray             # (4,) second-derivative weights
    b: np.ndarray             # (4,) gradient weights
    aligned: bool

    @property
    def b_fwd(self):
        return self.b[0], self.b[3]

    @property
    def b_bwd(self):
        return self.b[1], self.b[2]


class StencilTable:
    """Precomputed stencils for every interior point of a cloud.

    Packed layout: ``d2_*`` arrays have shape ``(n_int, 2N, 4)`` covering
    the directions ``i*d_theta``, ``i = 1..2N`` (orthogonal pair ``j``
    is rows ``j`` and ``j+N``); ``grad_*`` have shape ``(n_int, 2, 4)``
    for the axis directions e1, e2.  ``d2_valid`` masks directions omitted
    at boundary-trapped points (see module docstring; also ``dropped``),
    and ``grad_pair_ok[:, axis, k]`` flags the forward (k=0) / backward
    (k=1) upwind pairs.  Immutable after construction.
    """

    def __init__(self, cloud: PointCloud, dirs: DirectionSet,
                 d2_nbr, d2_a, d2_b, d2_S, d2_C, d2_aligned, d2_valid,
                 grad_nbr, grad_b, grad_S, grad_C, grad_pair_ok,
                 dropped, build_seconds):
        self.cloud = cloud
        self.dirs = dirs
        self.d2_nbr = d2_nbr
        self.d2_a = d2_a
        self.d2_b = d2_b
        self.d2_S = d2_S
        self.d2_C = d2_C
        self.d2_aligned = d2_aligned
        self.d2_valid = d2_valid
        self.grad_nbr = grad_nbr
        self.grad_b = grad_b
        self.grad_S = grad_S
        self.grad_C = grad_C
        self.grad_pair_ok = grad_pair_ok
        self.dropped = tuple(dropped)
        self.build_seconds = build_seconds
        self.interior_ids = cloud.interior_ids
        self._row_of = np.full(cloud.n_points, -1, dtype=np.int64)
        self._row_of[self.interior_ids] = np.arange(len(self.interior_ids))
        for arr in (self.d2_nbr, self.d2_a, self.d2_b, self.d2_S, self.d2_C,
                    self.d2_aligned, self.d2_valid, self.grad_nbr,
                    self.grad_b, self.grad_S, self.grad_C,
                    self.grad_pair_ok, self._row_of):
            arr.setflags(write=False)

    @property
    def n_interior(self) -> int:
        return self.d2_nbr.shape[0]

    @property
    def n_directions(self) -> int:
        return self.d2_nbr.shape[1]

    def row(self, point_id: int) -> int:
        r = int(self._row_of[point_id])
        if r < 0:
            raise KeyError(f"point {point_id} is not an interior point")
        return r

    def _pack(self, center, nu, nbr, S, C, a, b, aligned) -> DirectionalStencil:
        r = np.hypot(S, C)
        phi = np.arctan2(S, C) % (2.0 * np.pi)
        return DirectionalStencil(int(center), nu, nbr.copy(), r, phi,
                                  a.copy(), b.copy(), bool(aligned))

    def stencil(self, point_id: int, direction: int) -> DirectionalStencil:
        """Directional stencil ``direction`` (0-based, angle
        ``(direction+1)*d_theta``) at an interior point."""
        i = self.row(point_id)
        if not self.d2_valid[i, direction]:
            raise KeyError(f"direction {direction} was dropped at point "
                           f"{point_id} (boundary-trapped sector)")
        axes, _ = self.dirs.frames()
        return self._pack(point_id, axes[direction], self.d2_nbr[i, direction],
                          self.d2_S[i, direction], self.d2_C[i, direction],
                          self.d2_a[i, direction], self.d2_b[i, direction],
                          self.d2_aligned[i, direction])

    def gradient_stencil(self, point_id: int, axis: int) -> DirectionalStencil:
        """Axis-direction stencil used by the eikonal gradient
        (``axis`` 0 -> e1, 1 -> e2)."""
        i = self.row(point_id)
        S = self.grad_S[i, axis]
        C = self.grad_C[i, axis]
        return self._pack(point_id, _AXES[axis], self.grad_nbr[i, axis], S, C,
                          np.zeros(4), self.grad_b[i, axis], False)


def build_stencil_table(cloud: PointCloud, dirs: DirectionSet) -> StencilTable:
    """Select neighbours and compute weights for every interior point.

    Work is split over ``GAUSSCURVE_THREADS`` workers when that variable
    is set above 1; the result is identical either way.  Directions whose
    quadrant sector cannot be filled by any cloud point are dropped at
    that point (collected in ``StencilTable.dropped``, reported via a
    warning); a point that loses every direction raises
    :class:`IncompleteStencilError`.
    """
    t0 = time.perf_counter()
    axes, perps = dirs.frames()
    n_dir = axes.shape[0]
    frames = np.vstack([axes, _AXES])          # d2 frames then e1, e2
    frame_perps = np.vstack([perps, np.array([[0.0, 1.0], [-1.0, 0.0]])])
    m = frames.shape[0]

    interior = cloud.interior_ids
    n_int = len(interior)
    pts = cloud.points
    nbr = np.empty((n_int, m, 4), dtype=np.int64)
    S_all = np.zeros((n_int, m, 4))
    C_all = np.zeros((n_int, m, 4))
    present = np.zeros((n_int, m, 4), dtype=bool)

    neighbor_lists = cloud.tree.query_ball_point(pts[interior], dirs.delta)

    def fill(i):
        pid = int(interior[i])
        ids = np.asarray(neighbor_lists[i], dtype=np.int64)
        ids = ids[ids != pid]
        d = pts[ids] - pts[pid]
        C = d @ frames.T                      # (k, m)
        S = d @ frame_perps.T
        r2 = S * S + C * C
        sin2 = S * S / r2
        r = np.sqrt(r2)
        nbr[i] = pid                          # placeholder: self, weight 0
        for f in range(m):
            quad = _quadrants(S[:, f], C[:, f])
            sel = _pick_per_quadrant(ids, r[:, f], sin2[:, f], quad)
            ok = sel >= 0
            safe = np.where(ok, sel, 0)
            nbr[i, f, ok] = ids[safe[ok]]
            S_all[i, f, ok] = S[safe, f][ok]
            C_all[i, f, ok] = C[safe, f][ok]
            present[i, f] = ok

    n_workers = int(os.environ.get("GAUSSCURVE_THREADS", "1") or "1")
    if n_workers > 1 and n_int > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            list(ex.map(fill, range(n_int)))
    else:
        for i in range(n_int):
            fill(i)

    # Second-difference weights on complete directions; drop the rest.
    d2_present = present[:, :n_dir]
    d2_valid = d2_present.all(axis=2)
    dropped = []
    for i, f in zip(*np.nonzero(~d2_valid)):
        q = int(np.flatnonzero(~d2_present[i, f])[0]) + 1
        dropped.append((int(interior[i]), int(f), q))
    if not d2_valid.any(axis=1).all():
        bad = int(interior[np.flatnonzero(~d2_valid.any(axis=1))[0]])
        raise IncompleteStencilError(bad, axes[0], 0)

    d2_a = np.zeros((n_int, n_dir, 4))
    d2_b = np.zeros((n_int, n_dir, 4))
    d2_aligned = np.zeros((n_int, n_dir), dtype=bool)
    rows = d2_valid.reshape(-1)
    Sv = S_all[:, :n_dir].reshape(-1, 4)[rows]
    Cv = C_all[:, :n_dir].reshape(-1, 4)[rows]
    try:
        av, alv = _d2_weights_sc(Sv, Cv)
        b14 = _grad_pair_weights(Sv[:, 0], Cv[:, 0], Sv[:, 3], Cv[:, 3],
                                 -1.0)
        b23 = _grad_pair_weights(Sv[:, 1], Cv[:, 1], Sv[:, 2], Cv[:, 2],
                                 +1.0)
    except DegenerateStencilError as e:
        raise DegenerateStencilError(f"{e} while building stencil table")
    d2_a.reshape(-1, 4)[rows] = av
    d2_aligned.reshape(-1)[rows] = alv
    bv = np.column_stack([b14[0], b23[0], b23[1], b14[1]])
    d2_b.reshape(-1, 4)[rows] = bv

    # Gradient weights for the axis frames, with one-sided fallbacks when
    # a quadrant of an upwind pair is missing.
    gS = S_all[:, n_dir:]
    gC = C_all[:, n_dir:]
    gpres = present[:, n_dir:]
    grad_b = np.zeros((n_int, 2, 4))
    grad_pair_ok = np.zeros((n_int, 2, 2), dtype=bool)
    for k, (i0, j0, target) in enumerate(((0, 3, -1.0), (1, 2, +1.0))):
        Si, Ci = gS[..., i0], gC[..., i0]
        Sj, Cj = gS[..., j0], gC[..., j0]
        pi, pj = gpres[..., i0], gpres[..., j0]
        both = pi & pj
        if both.any():
            bi, bj = _grad_pair_weights(
                np.where(both, Si, 1.0), np.where(both, Ci, 1.0),
                np.where(both, Sj, -1.0), np.where(both, Cj, 1.0),
                target)
            grad_b[..., i0] = np.where(both, bi, 0.0)
            grad_b[..., j0] = np.where(both, bj, 0.0)
        ri = np.hypot(Si, Ci)
        rj = np.hypot(Sj, Cj)
        only_i = pi & ~pj & (np.abs(Ci) > ONE_SIDED_MIN_COS * ri)
        only_j = pj & ~pi & (np.abs(Cj) > ONE_SIDED_MIN_COS * rj)
        grad_b[..., i0][only_i] = -1.0 / np.abs(Ci[only_i])
        grad_b[..., j0][only_j] = -1.0 / np.abs(Cj[only_j])
        grad_pair_ok[..., k] = both | only_i | only_j

    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} directional stencil(s) at "
            f"{len({d[0] for d in dropped})} boundary-trapped point(s)",
            RuntimeWarning, stacklevel=2)

    return StencilTable(cloud, dirs,
                        nbr[:, :n_dir].copy(), d2_a, d2_b,
                        S_all[:, :n_dir].copy(), C_all[:, :n_dir].copy(),
                        d2_aligned, d2_valid,
                        nbr[:, n_dir:].copy(), grad_b,
                        gS.copy(), gC.copy(), grad_pair_ok,
                        dropped, time.perf_counter() - t0)


def stencil_dump(table: StencilTable, point_id: int, direction: int) -> str:
    """JSON description of one stencil, for debugging."""
    s = table.stencil(point_id, direction)
    cloud = table.cloud
    return json.dumps({
        "point_id": int(point_id),
        "point": [float(c) for c in cloud.points[point_id]],
        "nu": [float(c) for c in s.nu],
        "neighbor_ids": [int(i) for i in s.neighbor_ids],
        "neighbors": [[float(c) for c in cloud.points[i]]
                      for i in s.neighbor_ids],
        "r": [float(v) for v in s.r],
        "phi": [float(v) for v in s.phi],
        "a": [float(v) for v in s.a],
        "b": [float(v) for v in s.b],
        "aligned": s.aligned,
    }, indent=2)
