"""Osgood moduli rho and the concave gauge psi_delta(xi) = int_0^xi ds/(rho(s)+delta).

A modulus here is a nondecreasing function rho with rho(0)=0, normalized so
that rho(s) >= s.  Osgood moduli additionally satisfy int_{0+} ds/rho(s) =
infinity, which we certify numerically (never prove).  The gauge psi_delta
blows up as delta -> 0 exactly for Osgood moduli; that blow-up is what the
stability and uniqueness diagnostics in :mod:`sdelab.flow` rely on.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad

__all__ = [
    "ModulusKind",
    "OsgoodModulus",
    "AuxiliaryFunction",
    "DivergenceReport",
    "eval_rho",
    "eval_psi",
    "certify_osgood_divergence",
    "get_modulus",
    "modulus_from_csv",
    "MODULUS_KEYS",
]

E_M2 = math.exp(-2.0)


class ModulusKind(enum.Enum):
    LINEAR = "linear"
    LOGLINEAR = "loglinear"
    CUSTOM = "custom"


@dataclass(frozen=True)
class OsgoodModulus:
    """A modulus rho with vectorized evaluator and one-sided derivative.

    ``breakpoint`` marks the splice of piecewise definitions (0 when there is
    none); quadrature routines split there because the integrand may have a
    kink.
    """

    kind: ModulusKind
    breakpoint: float
    evaluator: Callable[[np.ndarray], np.ndarray]
    derivative_evaluator: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def __call__(self, s):
        return eval_rho(self, s)

    def derivative(self, s):
        s = _as_nonneg_array(s)
        return self.derivative_evaluator(s)

    def check_normalization(self, s_min: float = 1e-10, s_max: float = 1e2,
                            n: int = 400) -> dict:
        """Sample rho on a log grid and test rho(0)=0, monotonicity, rho>=s.

        Returns a dict with boolean verdicts and the worst offending sample.
        This is the type guard exercised by the divergence certificate.
        """
        grid = np.logspace(math.log10(s_min), math.log10(s_max), n)
        vals = self.evaluator(grid)
        zero = float(self.evaluator(np.array([0.0]))[0])
        mono = bool(np.all(np.diff(vals) >= -1e-14 * np.maximum(vals[1:], 1.0)))
        ge_s = vals >= grid * (1.0 - 1e-12)
        worst = None
        if not np.all(ge_s):
            k = int(np.argmin(vals / grid))
            worst = (float(grid[k]), float(vals[k]))
        return {
            "zero_at_zero": abs(zero) <= 1e-14,
            "nondecreasing": mono,
            "rho_geq_s": bool(np.all(ge_s)),
            "worst_rho_geq_s_sample": worst,
        }


def _as_nonneg_array(s) -> np.ndarray:
    arr = np.asarray(s, dtype=float)
    if np.any(arr < 0):
        raise ValueError("modulus argument must be nonnegative")
    return arr


def eval_rho(modulus: OsgoodModulus, s):
    """Evaluate rho(s) for scalar or array s >= 0."""
    arr = _as_nonneg_array(s)
    out = modulus.evaluator(arr)
    if np.isscalar(s) or (isinstance(s, np.ndarray) and s.ndim == 0):
        return float(out)
    return out


def _linear() -> OsgoodModulus:
    return OsgoodModulus(
        kind=ModulusKind.LINEAR,
        breakpoint=0.0,
        evaluator=lambda s: np.asarray(s, dtype=float).copy(),
        derivative_evaluator=lambda s: np.ones_like(np.asarray(s, dtype=float)),
        name="linear",
    )


def _loglinear() -> OsgoodModulus:
    # s*log(1/s) up to e^{-2}, then the tangent line s + e^{-2}; both branches
    # equal 2e^{-2} (and have slope 1) at the splice.
    def ev(s):
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        lo = s <= E_M2
        sl = s[lo]
        safe = np.where(sl > 0.0, sl, 1.0)
        out[lo] = np.where(sl > 0.0, sl * np.log(1.0 / safe), 0.0)
        out[~lo] = s[~lo] + E_M2
        return out

    def dv(s):
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        lo = s <= E_M2
        sl = np.where(s[lo] > 0.0, s[lo], 1.0)
        out[lo] = np.where(s[lo] > 0.0, np.log(1.0 / sl) - 1.0, np.inf)
        out[~lo] = 1.0
        return out

    return OsgoodModulus(
        kind=ModulusKind.LOGLINEAR,
        breakpoint=E_M2,
        evaluator=ev,
        derivative_evaluator=dv,
        name="loglinear",
    )


def _loglinear_smooth() -> OsgoodModulus:
    # s*log(1/s + e): globally defined, no splice needed.
    def ev(s):
        s = np.asarray(s, dtype=float)
        safe = np.where(s > 0.0, s, 1.0)
        return np.where(s > 0.0, s * np.log(1.0 / safe + math.e), 0.0)

    def dv(s):
        s = np.asarray(s, dtype=float)
        safe = np.where(s > 0.0, s, 1.0)
        val = np.log(1.0 / safe + math.e) - 1.0 / (1.0 + math.e * safe)
        return np.where(s > 0.0, val, np.inf)

    return OsgoodModulus(
        kind=ModulusKind.CUSTOM,
        breakpoint=0.0,
        evaluator=ev,
        derivative_evaluator=dv,
        name="loglinear-smooth",
    )


MODULUS_KEYS = ("linear", "loglinear", "loglinear-smooth")


def get_modulus(key: str) -> OsgoodModulus:
    """Look up a built-in modulus by config key."""
    if key == "linear":
        return _linear()
    if key == "loglinear":
        return _loglinear()
    if key == "loglinear-smooth":
        return _loglinear_smooth()
    raise KeyError(f"unknown modulus key {key!r}; known: {MODULUS_KEYS}")


def modulus_from_csv(path) -> OsgoodModulus:
    """Load a tabulated modulus from CSV rows (s, rho(s)), s > 0 ascending.

    Interpolation is linear in log-log space, clamped to the tabulated range;
    rho(0) is pinned to 0.
    """
    s_tab, r_tab = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                sv, rv = float(row[0]), float(row[1])
            except ValueError:
                continue  # header row
            s_tab.append(sv)
            r_tab.append(rv)
    s_arr = np.asarray(s_tab, dtype=float)
    r_arr = np.asarray(r_tab, dtype=float)
    if s_arr.size < 2 or np.any(s_arr <= 0) or np.any(np.diff(s_arr) <= 0):
        raise ValueError("tabulated modulus needs >= 2 rows with ascending s > 0")
    if np.any(r_arr <= 0):
        raise ValueError("tabulated rho values must be positive")
    ls, lr = np.log(s_arr), np.log(r_arr)

    def ev(s):
        s = np.asarray(s, dtype=float)
        safe = np.where(s > 0.0, s, s_arr[0])
        out = np.exp(np.interp(np.log(safe), ls, lr))
        return np.where(s > 0.0, out, 0.0)

    def dv(s, h=1e-6):
        s = np.asarray(s, dtype=float)
        return (ev(s * (1 + h)) - ev(np.maximum(s * (1 - h), 0.0))) / (2 * h * np.where(s > 0, s, 1.0))

    return OsgoodModulus(ModulusKind.CUSTOM, 0.0, ev, dv, name="csv")


@dataclass(frozen=True)
class AuxiliaryFunction:
    """The gauge psi_delta built from a modulus: psi_delta' = 1/(rho+delta).

    psi_delta is strictly increasing and concave, psi_delta(0)=0, and for a
    fixed xi it grows without bound as delta shrinks when rho is Osgood.
    """

    modulus: OsgoodModulus
    delta: float

    def __post_init__(self):
        if not self.delta > 0.0:
            raise ValueError("delta must be positive")

    def __call__(self, xi):
        return eval_psi(self, xi)

    def eval_many(self, xis: np.ndarray) -> np.ndarray:
        """Vectorized psi_delta over an array of nonnegative arguments.

        Uses the closed form for the linear modulus; otherwise composite
        Gauss-Legendre accumulated over the sorted arguments (with a mandatory
        split at the modulus breakpoint), which keeps the whole batch at one
        integrand sweep instead of one adaptive call per element.
        """
        xis = np.asarray(xis, dtype=float)
        if np.any(xis < 0):
            raise ValueError("psi argument must be nonnegative")
        if self.modulus.kind is ModulusKind.LINEAR:
            return np.log1p(xis / self.delta)
        flat = xis.ravel()
        uniq, inv = np.unique(flat, return_inverse=True)
        bp = self.modulus.breakpoint
        knots = uniq[uniq > 0.0]
        if bp > 0.0 and (knots.size == 0 or bp < knots[-1]):
            knots = np.unique(np.concatenate([knots, [bp]]))
        if knots.size:
            # rho' may blow up at 0 (log-type moduli); dyadic refinement keeps
            # every Gauss panel inside one octave, where the integrand is tame
            ladder = knots[-1] * 2.0 ** -np.arange(1, 80, dtype=float)
            knots = np.unique(np.concatenate([knots, ladder[ladder > 0.0]]))
        edges = np.concatenate([[0.0], knots])
        nodes, weights = leggauss(24)
        a, b = edges[:-1], edges[1:]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        pts = mid[:, None] + half[:, None] * nodes[None, :]
        integrand = 1.0 / (self.modulus.evaluator(pts.ravel()).reshape(pts.shape) + self.delta)
        seg = half * (integrand @ weights)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        psi_at = dict(zip(edges.tolist(), cum.tolist()))
        vals = np.array([psi_at[u] if u > 0.0 else 0.0 for u in uniq])
        return vals[inv].reshape(xis.shape)


def eval_psi(aux: AuxiliaryFunction, xi) -> float:
    """psi_delta(xi) for a scalar xi >= 0, to relative accuracy ~1e-10."""
    xi = float(xi)
    if xi < 0:
        raise ValueError("psi argument must be nonnegative")
    if xi == 0.0:
        return 0.0
    if aux.modulus.kind is ModulusKind.LINEAR:
        return math.log1p(xi / aux.delta)
    f = lambda s: 1.0 / (float(aux.modulus.evaluator(np.array([s]))[0]) + aux.delta)
    bp = aux.modulus.breakpoint
    pts = [bp] if 0.0 < bp < xi else None
    val, _ = quad(f, 0.0, xi, points=pts, epsabs=1e-14, epsrel=1e-11, limit=200)
    return val


@dataclass
class DivergenceReport:
    """Numerical certificate for int_{0+} ds/rho(s) = infinity (advisory)."""

    epsilons: np.ndarray
    integrals: np.ndarray
    strictly_increasing: bool
    growth_ratio: float
    ratio_threshold: float
    unbounded_looking: bool
    normalization: dict

    @property
    def passed(self) -> bool:
        return (self.strictly_increasing and self.unbounded_looking
                and self.normalization["rho_geq_s"])


def certify_osgood_divergence(modulus: OsgoodModulus,
                              epsilons,
                              ratio_threshold: float = 3.0) -> DivergenceReport:
    """Tabulate I(eps) = int_eps^1 ds/rho(s) along epsilons decreasing to 0.

    The certificate reports strict growth of I and whether the last/first
    ratio exceeds ``ratio_threshold`` ("unbounded-looking").  It also runs the
    modulus normalization check down to the smallest epsilon, so a non-Osgood
    table like rho(s)=s^2 is flagged for violating rho >= s rather than
    silently certified.
    """
    eps = np.asarray(list(epsilons), dtype=float)
    if eps.size == 0:
        raise ValueError("epsilons must be nonempty")
    if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("epsilons must be positive and strictly decreasing")
    norm = modulus.check_normalization(s_min=float(eps[-1]), s_max=1.0)
    f = lambda s: 1.0 / float(modulus.evaluator(np.array([s]))[0])
    bp = modulus.breakpoint
    vals = []
    for e in eps:
        pts = [bp] if e < bp < 1.0 else None
        v, _ = quad(f, e, 1.0, points=pts, epsabs=1e-13, epsrel=1e-11, limit=200)
        vals.append(v)
    vals = np.asarray(vals)
    increasing = bool(np.all(np.diff(vals) > 0))
    ratio = float(vals[-1] / vals[0]) if vals[0] > 0 else math.inf
    return DivergenceReport(
        epsilons=eps,
        integrals=vals,
        strictly_increasing=increasing,
        growth_ratio=ratio,
        ratio_threshold=ratio_threshold,
        unbounded_looking=ratio > ratio_threshold,
        normalization=norm,
    )
