"""Ensemble SDE integration with Brownian paths shared across coefficient levels.

The coupling discipline is the whole point: every comparison between two
flows (mollification rungs, step-count refinements, scheme variants) must
ride on the *same* Brownian store, so that pathwise differences measure the
coefficients and not the noise.  Comparison operations refuse to run
otherwise.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .fields import CoefficientPair
from .moduli import AuxiliaryFunction
from .util import WeightedPoints, weighted_mean_and_stderr

__all__ = [
    "BrownianStore",
    "FlowEnsemble",
    "integrate",
    "sup_distance",
    "psi_stability",
    "moment_report",
    "uniqueness_probe",
    "uniqueness_probe_sweep",
    "ladder_supdist",
    "UniquenessProbeReport",
]

_TWO53 = 2 ** 53


@dataclass(frozen=True)
class BrownianStore:
    """Shared Brownian increments on a uniform time grid.

    increments[p, s] is N(0, dt I_m), a pure function of
    (master_seed, path p, step s): each path owns a Philox stream keyed by
    (master_seed, p), uniform draws consume exactly one 64-bit word each, and
    normals come from the inverse CDF, so there is no state leakage between
    steps or paths.  Coarsened copies (for step-refinement couplings) keep
    the root fingerprint.
    """

    master_seed: int
    n_paths: int
    dim_m: int
    horizon: float
    n_steps: int
    increments: np.ndarray = field(repr=False, compare=False)
    root_steps: int = 0

    @classmethod
    def generate(cls, master_seed: int, n_paths: int, dim_m: int,
                 horizon: float, n_steps: int) -> "BrownianStore":
        if n_paths < 1 or n_steps < 1 or dim_m < 1 or not horizon > 0:
            raise ValueError("n_paths, n_steps, dim_m must be >= 1 and horizon > 0")
        dt = horizon / n_steps
        inc = np.empty((n_paths, n_steps, dim_m))
        scale = math.sqrt(dt)
        for p in range(n_paths):
            bg = np.random.Philox(key=np.array([master_seed % 2**64, p], dtype=np.uint64))
            gen = np.random.Generator(bg)
            raw = gen.integers(0, _TWO53, size=(n_steps, dim_m), dtype=np.int64)
            inc[p] = ndtri((raw * 2 + 1) * (0.5 ** 54)) * scale
        return cls(master_seed, n_paths, dim_m, horizon, n_steps, inc,
                   root_steps=n_steps)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def fingerprint(self) -> tuple:
        return (self.master_seed, self.n_paths, self.dim_m, self.horizon,
                self.root_steps)

    def coarsen(self, factor: int) -> "BrownianStore":
        """Sum consecutive increment blocks: the same paths on a coarser grid."""
        if factor < 1 or self.n_steps % factor:
            raise ValueError("factor must divide the step count")
        if factor == 1:
            return self
        inc = self.increments.reshape(
            self.n_paths, self.n_steps // factor, factor, self.dim_m).sum(axis=2)
        return BrownianStore(self.master_seed, self.n_paths, self.dim_m,
                             self.horizon, self.n_steps // factor, inc,
                             root_steps=self.root_steps)


@dataclass
class FlowEnsemble:
    """Trajectories of one coefficient pair over (paths x particles).

    ``sup_norm`` tracks the running uniform norm per state, ``stopped_at``
    the first step index at/after which the state is frozen (n_steps when
    never stopped), and ``diverged`` flags states that went non-finite (they
    are frozen at their last finite value, never dropped).
    """

    pair_name: str
    noise: BrownianStore
    starts: WeightedPoints
    scheme: str
    stopping_radius: Optional[float]
    final: np.ndarray                 # (P, Q, d)
    sup_norm: np.ndarray              # (P, Q)
    stopped_at: np.ndarray            # (P, Q) int
    diverged: np.ndarray              # (P, Q) bool
    trajectories: Optional[np.ndarray] = None       # (P, Q, n_steps+1, d)
    snapshots: dict = field(default_factory=dict)   # time -> (P, Q, d)

    @property
    def n_paths(self) -> int:
        return self.final.shape[0]

    @property
    def n_particles(self) -> int:
        return self.final.shape[1]

    def snapshot(self, t: float) -> np.ndarray:
        key = min(self.snapshots, key=lambda s: abs(s - t), default=None)
        if key is None or abs(key - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no snapshot recorded at t={t}")
        return self.snapshots[key]


def _euler_chunk(pair: CoefficientPair, x0: np.ndarray, inc: np.ndarray,
                 dt: float, scheme: str, stopping_radius, record: bool,
                 snapshot_steps: Sequence[int]):
    """Evolve one path-chunk; x0 has shape (P, Q, d), inc (P, S, m)."""
    P, Q, d = x0.shape
    S = inc.shape[1]
    m = inc.shape[2]
    x = x0.copy()
    alive = np.ones((P, Q), dtype=bool)
    stopped_at = np.full((P, Q), S, dtype=np.int64)
    diverged = np.zeros((P, Q), dtype=bool)
    sup = np.linalg.norm(x, axis=2)
    if stopping_radius is not None:
        hit0 = sup >= stopping_radius
        stopped_at[hit0] = 0
        alive &= ~hit0
    traj = np.empty((P, Q, S + 1, d)) if record else None
    if record:
        traj[:, :, 0] = x
    snaps = {}
    milstein = scheme == "milstein"
    if milstein and not (d == 1 and m == 1):
        raise ValueError("milstein scheme is offered for d = m = 1 only")
    for s in range(S):
        flat = x.reshape(-1, d)
        with np.errstate(over="ignore", invalid="ignore"):
            drift = pair.eval_b(flat).reshape(P, Q, d)
            sig = pair.eval_sigma(flat).reshape(P, Q, d, m)
            db = inc[:, s]                              # (P, m)
            step = drift * dt + np.einsum("pqdm,pm->pqd", sig, db)
            if milstein:
                h = 1e-5
                sig_p = pair.eval_sigma((flat + h).reshape(-1, 1)).reshape(P, Q)
                sig_m = pair.eval_sigma((flat - h).reshape(-1, 1)).reshape(P, Q)
                dsig = (sig_p - sig_m) / (2 * h)
                corr = 0.5 * sig[:, :, 0, 0] * dsig * (db[:, None, 0] ** 2 - dt)
                step[:, :, 0] += corr
            x_new = np.where(alive[:, :, None], x + step, x)
        bad = ~np.all(np.isfinite(x_new), axis=2) & alive
        if np.any(bad):
            x_new[bad] = x[bad]
            diverged |= bad
            stopped_at[bad] = s
            alive &= ~bad
        x = x_new
        r = np.linalg.norm(x, axis=2)
        np.maximum(sup, np.where(alive, r, sup), out=sup)
        if stopping_radius is not None:
            hit = (r >= stopping_radius) & alive
            stopped_at[hit] = s + 1
            alive &= ~hit
        if record:
            traj[:, :, s + 1] = x
        if s + 1 in snapshot_steps:
            snaps[s + 1] = x.copy()
    return x, sup, stopped_at, diverged, traj, snaps


def integrate(pair: CoefficientPair, starts: WeightedPoints, noise: BrownianStore,
              scheme: str = "euler", stopping_radius: Optional[float] = None,
              record: str = "none", snapshot_times: Sequence[float] = (),
              workers: int = 1) -> FlowEnsemble:
    """Euler-Maruyama (or 1-d Milstein) over all (path, particle) states.

    X_{k+1} = X_k + sigma(X_k) dB_k + b(X_k) dt, deterministic given the
    store.  ``record="full"`` keeps whole trajectories (memory permitting);
    summaries (running sup norm, stop indices) are always kept.  Worker
    count only parallelizes over fixed path chunks and never changes the
    result.
    """
    if record not in ("none", "full"):
        raise ValueError("record must be 'none' or 'full'")
    if scheme not in ("euler", "milstein"):
        raise ValueError("scheme must be 'euler' or 'milstein'")
    if starts.dim != pair.dim_d:
        raise ValueError("start dimension does not match the pair")
    if noise.dim_m != pair.dim_m:
        raise ValueError("noise dimension does not match the pair")
    P, Q, d = noise.n_paths, starts.n, pair.dim_d
    dt = noise.dt
    grid = noise.time_grid
    snapshot_steps = {}
    for t in snapshot_times:
        k = int(round(t / dt))
        if not (0 <= k <= noise.n_steps) or abs(grid[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"snapshot time {t} is not on the time grid")
        snapshot_steps[k] = float(grid[k])
    x0_full = np.broadcast_to(starts.points[None, :, :], (P, Q, d)).copy()

    n_chunks = min(P, 8)
    bounds = np.linspace(0, P, n_chunks + 1).astype(int)
    results = [None] * n_chunks

    def run(i):
        lo, hi = bounds[i], bounds[i + 1]
        results[i] = _euler_chunk(pair, x0_full[lo:hi], noise.increments[lo:hi],
                                  dt, scheme, stopping_radius, record == "full",
                                  set(snapshot_steps))

    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(n_chunks)))
    else:
        for i in range(n_chunks):
            run(i)

    final = np.concatenate([r[0] for r in results], axis=0)
    sup = np.concatenate([r[1] for r in results], axis=0)
    stopped = np.concatenate([r[2] for r in results], axis=0)
    diverged = np.concatenate([r[3] for r in results], axis=0)
    traj = (np.concatenate([r[4] for r in results], axis=0)
            if record == "full" else None)
    snaps = {}
    for k, t in snapshot_steps.items():
        if k == 0:
            snaps[t] = x0_full
        else:
            snaps[t] = np.concatenate([r[5][k] for r in results], axis=0)
    return FlowEnsemble(pair.name, noise, starts, scheme, stopping_radius,
                        final, sup, stopped, diverged, traj, snaps)


def _require_coupled(a: FlowEnsemble, b: FlowEnsemble):
    if a.noise is not b.noise:
        raise ValueError("flows are not coupled: they must share one BrownianStore")
    if a.starts is not b.starts and not (
            a.starts.points.shape == b.starts.points.shape
            and np.array_equal(a.starts.points, b.starts.points)):
        raise ValueError("flows must share start points")


def sup_distance(a: FlowEnsemble, b: FlowEnsemble) -> np.ndarray:
    """Per-(path, particle) uniform distance max_k |X_k - Y_k| over the grid."""
    _require_coupled(a, b)
    if a.trajectories is None or b.trajectories is None:
        raise ValueError("sup_distance needs ensembles integrated with record='full'")
    if a.trajectories.shape != b.trajectories.shape:
        raise ValueError("mismatched trajectory grids")
    diff = a.trajectories - b.trajectories
    return np.linalg.norm(diff, axis=3).max(axis=2)


def psi_stability(a: FlowEnsemble, b: FlowEnsemble, aux: AuxiliaryFunction,
                  level_R: float, weights: Optional[np.ndarray] = None) -> float:
    """Monte Carlo estimate of E int_{G_R} psi_delta(||X - Y||_{inf,T}^2) dmu.

    G_R keeps the particles whose running sup norm stays within R for *both*
    flows; the outer mean runs over paths, the inner weighted sum over
    particles of the start cloud.
    """
    _require_coupled(a, b)
    w = a.starts.weights if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    sd = sup_distance(a, b)
    in_level = (a.sup_norm <= level_R) & (b.sup_norm <= level_R)
    vals = aux.eval_many(sd ** 2) * in_level
    return float(np.mean(vals @ w))


def moment_report(ensemble: FlowEnsemble, exponent_2q1: float,
                  weights: Optional[np.ndarray] = None) -> float:
    """Monte Carlo estimate of int E sup_{t<=T} |X_t(x)|^{2 q1} dmu(x)."""
    if exponent_2q1 <= 0:
        raise ValueError("moment exponent must be positive")
    w = ensemble.starts.weights if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    return float(np.mean((ensemble.sup_norm ** exponent_2q1) @ w))


@dataclass
class UniquenessProbeReport:
    """Markov-inequality consistency check for a coupled pair of integrations."""

    delta: float
    eta: float
    stopping_radius: float
    p_exceed: float
    p_stderr: float
    mean_psi: float
    psi_at_eta_sq: float
    bound: float
    bound_holds: bool


def _coupled_refinement_gap(pair: CoefficientPair, noise: BrownianStore,
                            starts: WeightedPoints, lam: float,
                            refine_factor: int, scheme: str,
                            scheme_fine: Optional[str]) -> np.ndarray:
    """|Z_{T and tau_lambda}| for the same pair integrated at two step counts."""
    fine = integrate(pair, starts, noise, scheme=scheme_fine or scheme,
                     record="full")
    coarse = integrate(pair, starts, noise.coarsen(refine_factor),
                       scheme=scheme, record="full")
    tf = fine.trajectories[:, :, ::refine_factor]   # restrict to the coarse grid
    tc = coarse.trajectories
    radius = np.maximum(np.linalg.norm(tf, axis=3), np.linalg.norm(tc, axis=3))
    S = tc.shape[2] - 1
    exceeded = radius >= lam
    first = np.where(exceeded.any(axis=2), exceeded.argmax(axis=2), S)
    stop = np.minimum(first, S)
    P, Q = stop.shape
    ip, iq = np.ogrid[:P, :Q]
    z = tf[ip, iq, stop] - tc[ip, iq, stop]
    return np.linalg.norm(z, axis=2)


def uniqueness_probe(pair: CoefficientPair, noise: BrownianStore,
                     starts: WeightedPoints, aux: AuxiliaryFunction, eta: float,
                     lam: float, refine_factor: int = 2, scheme: str = "euler",
                     scheme_fine: Optional[str] = None) -> UniquenessProbeReport:
    """Probe pathwise uniqueness via the gauge: two integrations of the SAME
    pair under shared noise (step counts N vs refine_factor*N, optionally a
    different scheme on the fine grid) and the Markov bound
    P(|Z| > eta) <= E psi_delta(|Z|^2) / psi_delta(eta^2).
    """
    gap = _coupled_refinement_gap(pair, noise, starts, lam, refine_factor,
                                  scheme, scheme_fine)
    return _probe_report(gap, aux, eta, lam, starts)


def uniqueness_probe_sweep(pair: CoefficientPair, noise: BrownianStore,
                           starts: WeightedPoints, deltas: Sequence[float],
                           modulus, eta: float, lam: float,
                           refine_factor: int = 2, scheme: str = "euler",
                           scheme_fine: Optional[str] = None
                           ) -> list[UniquenessProbeReport]:
    """Run the probe once and evaluate the Markov bound for every delta."""
    gap = _coupled_refinement_gap(pair, noise, starts, lam, refine_factor,
                                  scheme, scheme_fine)
    return [_probe_report(gap, AuxiliaryFunction(modulus, d), eta, lam, starts)
            for d in deltas]


def _probe_report(gap: np.ndarray, aux: AuxiliaryFunction, eta: float,
                  lam: float, starts: WeightedPoints) -> UniquenessProbeReport:
    w = starts.weights / starts.weights.sum()
    exceed = (gap > eta).astype(float) @ w
    p, p_se = weighted_mean_and_stderr(exceed)
    mean_psi = float(np.mean(aux.eval_many(gap ** 2) @ w))
    psi_eta = aux(eta ** 2)
    bound = mean_psi / psi_eta
    return UniquenessProbeReport(
        delta=aux.delta, eta=eta, stopping_radius=lam,
        p_exceed=p, p_stderr=p_se, mean_psi=mean_psi, psi_at_eta_sq=psi_eta,
        bound=bound, bound_holds=p <= bound + 3 * (p_se if np.isfinite(p_se) else 0.0))


def ladder_supdist(pairs: Sequence[CoefficientPair], noise: BrownianStore,
                   starts: WeightedPoints, workers: int = 1) -> dict:
    """Jointly evolve several coefficient levels under one store and track,
    per (path, particle), the running sup distance of each level to the last
    (reference) level plus each level's own sup norm.

    Memory stays O(levels x paths x particles); this is the engine behind the
    ladder Cauchy experiment where full trajectories would not fit.
    """
    L = len(pairs)
    if L < 2:
        raise ValueError("need at least two levels (last one is the reference)")
    d = pairs[0].dim_d
    if any(p.dim_d != d or p.dim_m != noise.dim_m for p in pairs):
        raise ValueError("all levels must share dimensions with the store")
    P, Q = noise.n_paths, starts.n
    dt = noise.dt

    scalar = d == 1 and noise.dim_m == 1

    def run_chunk(lo, hi):
        pc = hi - lo
        x = np.broadcast_to(starts.points[None, :, :], (pc, Q, d)).copy()
        xs = [x.copy() for _ in range(L)]
        sup2 = np.zeros((L - 1, pc, Q))
        supn = [np.linalg.norm(xl, axis=2) for xl in xs]
        inc = noise.increments[lo:hi]
        for s in range(noise.n_steps):
            db = inc[:, s]
            for l in range(L):
                flat = xs[l].reshape(-1, d)
                drift = pairs[l].eval_b(flat).reshape(pc, Q, d)
                sig = pairs[l].eval_sigma(flat)
                if scalar:
                    xs[l] += drift * dt
                    xs[l][:, :, 0] += sig[:, 0, 0].reshape(pc, Q) * db[:, 0][:, None]
                    np.maximum(supn[l], np.abs(xs[l][:, :, 0]), out=supn[l])
                else:
                    sig = sig.reshape(pc, Q, d, noise.dim_m)
                    xs[l] += drift * dt + np.einsum("pqdm,pm->pqd", sig, db)
                    np.maximum(supn[l], np.linalg.norm(xs[l], axis=2), out=supn[l])
            ref = xs[-1]
            for l in range(L - 1):
                if scalar:
                    diff = xs[l][:, :, 0] - ref[:, :, 0]
                    np.maximum(sup2[l], diff * diff, out=sup2[l])
                else:
                    diff = xs[l] - ref
                    np.maximum(sup2[l], np.einsum("pqd,pqd->pq", diff, diff),
                               out=sup2[l])
        return sup2, np.stack(supn)

    n_chunks = min(P, 8)
    bounds = np.linspace(0, P, n_chunks + 1).astype(int)
    parts = [None] * n_chunks

    def job(i):
        parts[i] = run_chunk(bounds[i], bounds[i + 1])

    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, range(n_chunks)))
    else:
        for i in range(n_chunks):
            job(i)

    sup2 = np.concatenate([p[0] for p in parts], axis=1)
    supn = np.concatenate([p[1] for p in parts], axis=1)
    return {"supdist2": sup2, "sup_norm": supn}
