"""Generator L, its discrete adjoint L*, and forward-equation solvers.

L phi = 1/2 sum_ij a^ij d_ij phi + sum_i b^i d_i phi with a = sigma sigma^T.
Two discretizations of L* are provided:

* ``dirichlet0``: L is assembled with zero-extension central stencils and
  L* is literally its matrix transpose, so the discrete adjoint identity
  <L phi, u> = <phi, L* u> holds to rounding for interior-supported fields
  (mass may leak through the boundary; the leak is reported).
* ``zeroflux``: L* is assembled in interface-flux form (diagonal diffusion
  only) with zero boundary fluxes, so total mass is conserved exactly; drift
  faces switch to upwinding when the local Peclet number exceeds 2 and the
  switch count is reported.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .density import DensityGrid
from .fields import CoefficientPair
from .flow import FlowEnsemble
from .util import weighted_mean_and_stderr

__all__ = [
    "GeneratorGrid",
    "WeakSolutionPath",
    "apply_L",
    "step_adjoint",
    "solve_fpe",
    "cfl_max_dt",
    "duality_check",
    "DualityReport",
    "uniqueness_experiment",
    "UniquenessExperimentReport",
]

SCHEMES = ("explicit", "implicit", "crank-nicolson")


@dataclass
class GeneratorGrid:
    """Coefficients a^ij, b^i tabulated at cell centers of a uniform box grid."""

    box: tuple
    resolution: tuple
    a: np.ndarray          # (*res, d, d), symmetric PSD per cell
    b: np.ndarray          # (*res, d)
    boundary: str = "zeroflux"
    pair: Optional[CoefficientPair] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.boundary not in ("dirichlet0", "zeroflux"):
            raise ValueError("boundary must be 'dirichlet0' or 'zeroflux'")
        self.resolution = tuple(int(r) for r in self.resolution)

    @classmethod
    def from_pair(cls, pair: CoefficientPair, box, resolution,
                  boundary: str = "zeroflux") -> "GeneratorGrid":
        d = pair.dim_d
        resolution = tuple(int(r) for r in (resolution if np.iterable(resolution)
                                            else (resolution,) * d))
        proto = DensityGrid(box, resolution, np.zeros(resolution), 0.0, "pde")
        pts = proto.centers()
        a = pair.a_matrix(pts).reshape(resolution + (d, d))
        b = pair.eval_b(pts).reshape(resolution + (d,))
        return cls(box, resolution, a, b, boundary, pair=pair)

    # -- geometry -----------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.a.shape[-1]

    def _proto(self) -> DensityGrid:
        return DensityGrid(self.box, self.resolution,
                           np.zeros(self.resolution), 0.0, "pde")

    @property
    def spacing(self) -> np.ndarray:
        return self._proto().spacing

    @property
    def cell_volume(self) -> float:
        return self._proto().cell_volume

    def new_density(self, values: np.ndarray, t: float = 0.0) -> DensityGrid:
        return DensityGrid(self.box, self.resolution, values, t, "pde")

    # -- operator assembly --------------------------------------------------
    def _shifted(self, offset):
        """Row/col flat indices for a stencil offset, dropping off-grid pairs."""
        res = self.resolution
        idx = np.indices(res).reshape(len(res), -1)
        tgt = idx + np.asarray(offset).reshape(-1, 1)
        ok = np.all((tgt >= 0) & (tgt < np.asarray(res).reshape(-1, 1)), axis=0)
        rows = np.ravel_multi_index(idx[:, ok], res)
        cols = np.ravel_multi_index(tgt[:, ok], res)
        return rows, cols, ok

    def operator_L(self) -> sparse.csr_matrix:
        """Central-difference L with zero extension outside the box."""
        if "L" in self._cache:
            return self._cache["L"]
        d, res = self.dim, self.resolution
        h = self.spacing
        n = int(np.prod(res))
        rows_all, cols_all, vals_all = [], [], []

        # the coefficient lives on the ROW cell (the evaluation point)
        def add2(offset, coeff_grid):
            rows, cols, ok = self._shifted(offset)
            c = coeff_grid.reshape(-1)
            rows_all.append(rows)
            cols_all.append(cols)
            vals_all.append(c[rows])

        for i in range(d):
            ei = np.zeros(d, dtype=int)
            ei[i] = 1
            bi = self.b[..., i]
            add2(ei, bi / (2 * h[i]))
            add2(-ei, -bi / (2 * h[i]))
            aii = self.a[..., i, i]
            add2(ei, 0.5 * aii / h[i] ** 2)
            add2(-ei, 0.5 * aii / h[i] ** 2)
            add2(np.zeros(d, dtype=int), -aii / h[i] ** 2)
            for j in range(i + 1, d):
                ej = np.zeros(d, dtype=int)
                ej[j] = 1
                aij = self.a[..., i, j]
                for si in (1, -1):
                    for sj in (1, -1):
                        add2(si * ei + sj * ej,
                             si * sj * aij / (4 * h[i] * h[j]))
        mat = sparse.coo_matrix(
            (np.concatenate(vals_all),
             (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(n, n)).tocsr()
        self._cache["L"] = mat
        return mat

    def operator_adjoint(self) -> sparse.csr_matrix:
        if "Astar" in self._cache:
            return self._cache["Astar"]
        if self.boundary == "dirichlet0":
            mat = self.operator_L().T.tocsr()
        else:
            mat = self._assemble_flux_adjoint()
        self._cache["Astar"] = mat
        return mat

    def _assemble_flux_adjoint(self) -> sparse.csr_matrix:
        d, res = self.dim, self.resolution
        h = self.spacing
        n = int(np.prod(res))
        offdiag = self.a - np.einsum("...ij,ij->...ij", self.a, np.eye(d))
        if np.max(np.abs(offdiag)) > 1e-12 * max(np.max(np.abs(self.a)), 1e-300):
            raise NotImplementedError(
                "zero-flux adjoint assembly supports diagonal diffusion only; "
                "use boundary='dirichlet0' for cross terms")
        rows_all, cols_all, vals_all = [], [], []
        upwind_faces = 0
        total_faces = 0
        for i in range(d):
            # faces between cell c and its +e_i neighbour
            sl_lo = [slice(None)] * d
            sl_lo[i] = slice(0, res[i] - 1)
            sl_hi = [slice(None)] * d
            sl_hi[i] = slice(1, res[i])
            flat = np.arange(n).reshape(res)
            c_lo = flat[tuple(sl_lo)].ravel()
            c_hi = flat[tuple(sl_hi)].ravel()
            a_lo = self.a[..., i, i][tuple(sl_lo)].ravel()
            a_hi = self.a[..., i, i][tuple(sl_hi)].ravel()
            b_face = 0.5 * (self.b[..., i][tuple(sl_lo)].ravel()
                            + self.b[..., i][tuple(sl_hi)].ravel())
            a_face = 0.5 * (a_lo + a_hi)
            peclet = 2.0 * np.abs(b_face) * h[i] / np.maximum(a_face, 1e-300)
            up = peclet > 2.0
            upwind_faces += int(up.sum())
            total_faces += up.size
            # diffusive flux F = (a_hi u_hi - a_lo u_lo) / (2 h)
            cd = 0.5 / h[i]
            # advective flux F += -b_face * u_face
            w_lo = np.where(up, np.where(b_face > 0, 1.0, 0.0), 0.5)
            w_hi = 1.0 - w_lo
            # du_lo += F/h ; du_hi -= F/h
            inv_h = 1.0 / h[i]
            for sign, rows in ((+1.0, c_lo), (-1.0, c_hi)):
                rows_all += [rows, rows]
                cols_all += [c_hi, c_lo]
                vals_all += [sign * inv_h * (cd * a_hi - b_face * w_hi),
                             sign * inv_h * (-cd * a_lo - b_face * w_lo)]
        mat = sparse.coo_matrix(
            (np.concatenate(vals_all),
             (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(n, n)).tocsr()
        self._cache["upwind_fraction"] = upwind_faces / max(total_faces, 1)
        return mat

    @property
    def upwind_fraction(self) -> float:
        self.operator_adjoint()
        return self._cache.get("upwind_fraction", 0.0)

    def solver(self, scheme: str, dt: float):
        key = ("solver", scheme, dt)
        if key not in self._cache:
            n = int(np.prod(self.resolution))
            eye = sparse.identity(n, format="csc")
            a_star = self.operator_adjoint()
            if scheme == "implicit":
                self._cache[key] = splu((eye - dt * a_star).tocsc())
            elif scheme == "crank-nicolson":
                self._cache[key] = (splu((eye - 0.5 * dt * a_star).tocsc()),
                                    (eye + 0.5 * dt * a_star).tocsr())
        return self._cache.get(key)


def apply_L(grid: GeneratorGrid, phi: np.ndarray) -> np.ndarray:
    """Second-order central-difference L phi (phi must vanish near the boundary)."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != grid.resolution:
        raise ValueError("phi shape must match the generator grid")
    ring = _boundary_ring(phi)
    if np.any(ring != 0.0):
        warnings.warn("apply_L called on a field that is nonzero on the "
                      "boundary ring; the contract assumes interior support",
                      stacklevel=2)
    return (grid.operator_L() @ phi.ravel()).reshape(grid.resolution)


def _boundary_ring(u: np.ndarray) -> np.ndarray:
    mask = np.zeros(u.shape, dtype=bool)
    for axis in range(u.ndim):
        sl = [slice(None)] * u.ndim
        sl[axis] = 0
        mask[tuple(sl)] = True
        sl[axis] = -1
        mask[tuple(sl)] = True
    return u[mask]


def cfl_max_dt(grid: GeneratorGrid) -> float:
    """Admissible explicit step: min(h^2/(2 d max a), h / max |b|)."""
    h = float(np.min(grid.spacing))
    d = grid.dim
    max_a = float(np.max(np.abs(grid.a)))
    max_b = float(np.max(np.abs(grid.b)))
    dt = np.inf
    if max_a > 0:
        dt = min(dt, h * h / (2.0 * d * max_a))
    if max_b > 0:
        dt = min(dt, h / max_b)
    return dt


def step_adjoint(grid: GeneratorGrid, u: DensityGrid, dt: float,
                 scheme: str = "implicit") -> DensityGrid:
    """One step of du/dt = L* u in divergence form."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if u.values.shape != grid.resolution:
        raise ValueError("density resolution must match the generator grid")
    a_star = grid.operator_adjoint()
    v = u.values.ravel()
    if scheme == "explicit":
        dt_max = cfl_max_dt(grid)
        if dt > dt_max:
            raise ValueError(f"explicit step dt={dt:g} violates CFL; "
                             f"required dt <= {dt_max:g}")
        out = v + dt * (a_star @ v)
    elif scheme == "implicit":
        out = grid.solver(scheme, dt).solve(v)
    else:
        lu, rhs_op = grid.solver(scheme, dt)
        out = lu.solve(rhs_op @ v)
    return DensityGrid(grid.box, grid.resolution, out.reshape(grid.resolution),
                       u.time_label + dt, "pde")


@dataclass
class WeakSolutionPath:
    """Snapshots of the forward solve with class-membership bookkeeping.

    The sup-in-time L1 and Linf norms are the numerical surrogate for the
    uniqueness class; negative values are clipped only in the reported
    snapshots with the clipped mass per snapshot on record.  The solve lives
    on a truncated box, not the whole space; every report carries that note.
    """

    snapshots: list
    scheme: str
    dt: float
    times: np.ndarray
    mass: np.ndarray
    l1: np.ndarray
    linf: np.ndarray
    clipped_mass: np.ndarray
    note: str = "box-truncated analogue of the whole-space equation"

    @property
    def sup_l1(self) -> float:
        return float(self.l1.max())

    @property
    def sup_linf(self) -> float:
        return float(self.linf.max())


def solve_fpe(grid: GeneratorGrid, u0: DensityGrid, horizon: float, dt: float,
              scheme: str = "crank-nicolson",
              snapshot_times: Sequence[float] = ()) -> WeakSolutionPath:
    """March d_t u = L* u from u0 to the horizon, recording snapshots."""
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(horizon, 1.0):
        raise ValueError("dt must divide the horizon")
    snap_steps = sorted({int(round(t / dt)) for t in snapshot_times} | {0, n_steps})
    for t in snapshot_times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(abs(t), 1.0):
            raise ValueError(f"snapshot time {t} is not on the solver grid")
    u = u0
    snaps, times, mass, l1, linf, clipped = [], [], [], [], [], []

    def record(u_now: DensityGrid):
        vals = u_now.values
        neg = np.minimum(vals, 0.0)
        clip_mass = float(-neg.sum() * u_now.cell_volume)
        snap = DensityGrid(u_now.box, u_now.resolution, np.maximum(vals, 0.0),
                           u_now.time_label, "pde")
        snaps.append(snap)
        times.append(u_now.time_label)
        mass.append(float(vals.sum() * u_now.cell_volume))
        l1.append(float(np.abs(vals).sum() * u_now.cell_volume))
        linf.append(float(np.abs(vals).max()))
        clipped.append(clip_mass)

    if 0 in snap_steps:
        record(u)
    for k in range(1, n_steps + 1):
        u = step_adjoint(grid, u, dt, scheme)
        if k in snap_steps:
            record(u)
    return WeakSolutionPath(snaps, scheme, dt, np.asarray(times),
                            np.asarray(mass), np.asarray(l1), np.asarray(linf),
                            np.asarray(clipped))


@dataclass
class DualityReport:
    rows: list
    max_rel_discrepancy: float
    all_passed: bool
    note: str = "box-truncated analogue of the whole-space equation"


def duality_check(grid: GeneratorGrid, ensemble: FlowEnsemble,
                  path: WeakSolutionPath,
                  test_functions: Sequence, grid_budget: float = 0.01
                  ) -> DualityReport:
    """Compare int phi u_t dx (grid quadrature) with E phi(X_t) (Monte Carlo).

    Test functions may be callables on points or arrays on the generator
    grid (interpolated for the particle side).  A row passes when the
    discrepancy is within 3 MC standard errors plus ``grid_budget`` of the
    PDE value's magnitude.
    """
    proto = grid._proto()
    centers = proto.centers()
    axes = proto.axes()
    rows = []
    w = ensemble.starts.weights
    for fi, phi in enumerate(test_functions):
        if callable(phi):
            phi_grid = np.asarray(phi(centers), dtype=float).reshape(grid.resolution)
            phi_points = phi
        else:
            phi_grid = np.asarray(phi, dtype=float)
            interp = RegularGridInterpolator(axes, phi_grid, bounds_error=False,
                                             fill_value=0.0)
            phi_points = interp
        for snap in path.snapshots:
            t = snap.time_label
            pde_val = float(np.sum(phi_grid * snap.values) * snap.cell_volume)
            xt = ensemble.snapshot(t)                       # (P, Q, d)
            vals = np.asarray(phi_points(xt.reshape(-1, xt.shape[2])),
                              dtype=float).reshape(xt.shape[0], xt.shape[1])
            per_path = vals @ w
            mc_val, mc_se = weighted_mean_and_stderr(per_path)
            disc = abs(pde_val - mc_val)
            tol = 3.0 * (mc_se if np.isfinite(mc_se) else 0.0) \
                + grid_budget * abs(pde_val)
            rows.append({
                "test_function": fi, "t": t, "pde": pde_val, "mc": mc_val,
                "mc_stderr": mc_se, "discrepancy": disc, "tolerance": tol,
                "rel_discrepancy": disc / max(abs(pde_val), 1e-300),
                "passed": disc <= tol,
            })
    max_rel = max((r["rel_discrepancy"] for r in rows), default=0.0)
    return DualityReport(rows, max_rel, all(r["passed"] for r in rows))


@dataclass
class UniquenessExperimentReport:
    distance_coarse: float
    distance_fine: float
    ratio: float
    threshold: float
    passed: bool
    scheme_a: str
    scheme_b: str
    note: str = "box-truncated analogue of the whole-space equation"


def uniqueness_experiment(grid: GeneratorGrid, u0_fn: Callable, horizon: float,
                          dt: float, schemes: tuple[str, str] = ("implicit", "crank-nicolson"),
                          refine: int = 2, n_snapshots: int = 5,
                          threshold: float = 0.6) -> UniquenessExperimentReport:
    """Two independent discretizations of the same forward problem, compared
    in sup_t L1, at the base resolution and simultaneously refined by
    ``refine`` (spatial resolution x refine, dt / refine).  Shrinking distance
    under refinement (ratio < threshold) is the numerical echo of uniqueness.
    """
    if grid.pair is None:
        raise ValueError("uniqueness_experiment needs a generator built from_pair")
    n_steps = int(round(horizon / dt))
    snap_steps = sorted({max(1, round(n_steps * k / n_snapshots))
                         for k in range(1, n_snapshots + 1)})
    snapshot_times = [s * dt for s in snap_steps]

    def run(g: GeneratorGrid, step: float) -> float:
        u0 = _density_from_fn(g, u0_fn)
        pa = solve_fpe(g, u0, horizon, step, schemes[0], snapshot_times)
        pb = solve_fpe(g, u0, horizon, step, schemes[1], snapshot_times)
        dists = [float(np.abs(sa.values - sb.values).sum() * sa.cell_volume)
                 for sa, sb in zip(pa.snapshots, pb.snapshots)]
        return max(dists)

    d_coarse = run(grid, dt)
    fine = GeneratorGrid.from_pair(grid.pair, grid.box,
                                   tuple(r * refine for r in grid.resolution),
                                   boundary=grid.boundary)
    d_fine = run(fine, dt / refine)
    ratio = d_fine / d_coarse if d_coarse > 0 else 0.0
    return UniquenessExperimentReport(d_coarse, d_fine, ratio, threshold,
                                      ratio < threshold, schemes[0], schemes[1])


def _density_from_fn(grid: GeneratorGrid, u0_fn: Callable) -> DensityGrid:
    proto = grid._proto()
    vals = np.asarray(u0_fn(proto.centers()), dtype=float).reshape(grid.resolution)
    return DensityGrid(grid.box, grid.resolution, vals, 0.0, "pde")
