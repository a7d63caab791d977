"""Coefficient fields (sigma, b) with gradients, divergences, maximal functions,
and sampling-based certification of the mixed Osgood/Sobolev drift condition.

Conventions: evaluators are vectorized over points, ``x`` has shape (n, d);
``sigma(x)`` returns (n, d, m), ``b(x)`` returns (n, d).  Gradient layouts are
``grad_sigma[n, i, j, k] = d_i sigma^{jk}`` and ``grad_b[n, i, j] = d_i b^j``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .moduli import OsgoodModulus
from .util import UniformTable1D, make_rng

__all__ = [
    "Smoothness",
    "CoefficientPair",
    "OsgoodCertificate",
    "eval_V_series",
    "VSeriesTable",
    "local_maximal_function",
    "maximal_radii",
    "certify_Hq",
    "certify_Hsigma",
    "sweep_constant_certificate",
    "divergence",
    "div_sigma_columns",
    "empirical_lq_norm",
    "get_field",
    "field_from_csv",
    "FIELD_KEYS",
]


class Smoothness(enum.Enum):
    ANALYTIC = "analytic"
    GRID_TABULATED = "grid-tabulated"
    MOLLIFIED = "mollified"


@dataclass(frozen=True)
class CoefficientPair:
    """A diffusion matrix field sigma and a drift field b on R^d.

    Optional analytic derivative callables may be omitted; consumers fall
    back to central differences (see :func:`divergence`).
    """

    dim_d: int
    dim_m: int
    sigma: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    smoothness: Smoothness
    grad_sigma: Optional[Callable[[np.ndarray], np.ndarray]] = None
    div_b: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_b: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"

    def eval_sigma(self, x: np.ndarray) -> np.ndarray:
        x = _points(x, self.dim_d)
        out = np.asarray(self.sigma(x), dtype=float)
        if out.shape != (x.shape[0], self.dim_d, self.dim_m):
            raise ValueError(f"sigma returned shape {out.shape}, expected "
                             f"{(x.shape[0], self.dim_d, self.dim_m)}")
        return out

    def eval_b(self, x: np.ndarray) -> np.ndarray:
        x = _points(x, self.dim_d)
        out = np.asarray(self.b(x), dtype=float)
        if out.shape != (x.shape[0], self.dim_d):
            raise ValueError(f"b returned shape {out.shape}, expected "
                             f"{(x.shape[0], self.dim_d)}")
        return out

    def a_matrix(self, x: np.ndarray) -> np.ndarray:
        """Diffusion matrix a = sigma sigma^T, shape (n, d, d)."""
        s = self.eval_sigma(x)
        return np.einsum("nik,njk->nij", s, s)

    def b_bar(self, x: np.ndarray) -> np.ndarray:
        """Rescaled drift b(x)/(1+|x|)."""
        x = _points(x, self.dim_d)
        return self.eval_b(x) / (1.0 + np.linalg.norm(x, axis=1))[:, None]

    def sigma_bar(self, x: np.ndarray) -> np.ndarray:
        """Rescaled diffusion sigma(x)/(1+|x|)."""
        x = _points(x, self.dim_d)
        return self.eval_sigma(x) / (1.0 + np.linalg.norm(x, axis=1))[:, None, None]


def _points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, d) if d == 1 else x.reshape(1, d)
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected points of shape (n, {d}), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# The V-series drift: V(t) = sum_k |sin(kt)|/k^2, applied componentwise.

def eval_V_series(t, truncation_K: int):
    """Partial sum sum_{k<=K} |sin(kt)|/k^2 and the tail bound 1/K.

    The series is absolutely summable, so the truncation error is below
    sum_{k>K} 1/k^2 < 1/K regardless of t.  Returns (values, tail_bound).

    sin(kt) is advanced by the angle-addition recurrence
    sin(kt) = 2 cos(t) sin((k-1)t) - sin((k-2)t); its companion matrix is a
    rotation, so roundoff grows only linearly in K (~K ulp, far below the
    tail bound).
    """
    if truncation_K < 1:
        raise ValueError("truncation_K must be >= 1")
    t_arr = np.asarray(t, dtype=float)
    flat = np.atleast_1d(t_arr).ravel().astype(float)
    s_prev = np.sin(flat)
    out = np.abs(s_prev)
    if truncation_K >= 2:
        s_cur = np.sin(2.0 * flat)
        out += 0.25 * np.abs(s_cur)
        two_cos = 2.0 * np.cos(flat)
        free = np.empty_like(flat)
        abs_buf = np.empty_like(flat)
        for k in range(3, truncation_K + 1):
            np.multiply(two_cos, s_cur, out=free)
            free -= s_prev
            s_prev, s_cur, free = s_cur, free, s_prev
            np.abs(s_cur, out=abs_buf)
            abs_buf *= 1.0 / (k * k)
            out += abs_buf
    tail = 1.0 / truncation_K
    if t_arr.ndim == 0:
        return float(out[0]), tail
    return out.reshape(t_arr.shape), tail


@dataclass(frozen=True)
class VSeriesTable:
    """V tabulated on a fine uniform grid for high-throughput evaluation.

    The table step is far below every mollification scale used by the flow
    experiments, so the tabulated field carries the same roughness at the
    scales that matter while evaluating in O(1) per query.
    """

    table: UniformTable1D
    truncation_K: int

    @classmethod
    def build(cls, t_min: float = -32.0, t_max: float = 32.0,
              step: float = 1e-3, truncation_K: int = 10_000) -> "VSeriesTable":
        n = int(round((t_max - t_min) / step)) + 1
        ts = t_min + step * np.arange(n)
        vals, _ = eval_V_series(ts, truncation_K)
        return cls(UniformTable1D(t_min, step, vals), truncation_K)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return self.table(t)


_VSERIES_CACHE: dict = {}


def _vseries_table(K: int = 10_000) -> VSeriesTable:
    if K not in _VSERIES_CACHE:
        _VSERIES_CACHE[K] = VSeriesTable.build(truncation_K=K)
    return _VSERIES_CACHE[K]


# ---------------------------------------------------------------------------
# Local maximal function on uniform grids.

def maximal_radii(h: float, radius_R: float, radii_count: int) -> np.ndarray:
    """The log-spaced radius ladder shared by implementation and oracles."""
    if radius_R < h:
        raise ValueError("radius_R must be at least one grid step")
    return np.geomspace(h, radius_R, radii_count)


def local_maximal_function(f: np.ndarray, h: float, radius_R: float,
                           radii_count: int = 16) -> np.ndarray:
    """Discrete local maximal function sup_{r<=R} (mean of f over B_r).

    ``f`` is a nonnegative scalar field on a uniform grid with spacing ``h``
    (any dimension).  Ball averages use cells within Euclidean distance r of
    the center, intersected with the grid, so constants are exactly
    preserved at the boundary.  The sup runs over :func:`maximal_radii`.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("maximal function input must be nonnegative")
    extent = min(f.shape) * h
    if radius_R > 0.5 * extent:
        raise ValueError("radius_R exceeds half the grid extent")
    out = np.full_like(f, -np.inf)
    ones = np.ones_like(f)
    for r in maximal_radii(h, radius_R, radii_count):
        k = int(math.floor(r / h + 1e-12))
        axes = np.meshgrid(*([np.arange(-k, k + 1)] * f.ndim), indexing="ij")
        dist = np.sqrt(sum(a.astype(float)**2 for a in axes)) * h
        kernel = (dist <= r).astype(float)
        sums = ndimage.convolve(f, kernel, mode="constant", cval=0.0)
        counts = ndimage.convolve(ones, kernel, mode="constant", cval=0.0)
        np.maximum(out, sums / counts, out=out)
    return out


# ---------------------------------------------------------------------------
# Certification of the pointwise drift / diffusion conditions.

@dataclass(frozen=True)
class OsgoodCertificate:
    """Empirical pair-sampling certificate for the drift/diffusion condition.

    ``violation_rate`` is the fraction of sampled pairs where the left side
    exceeds (g(x)+g(y)) * rho(|x-y|^2); negligible-set exceptions of the
    continuous statement show up here as a tolerated nonzero rate.
    """

    radius_R: float
    modulus_name: str
    which: str
    violation_rate: float
    worst_ratio: float
    n_pairs: int
    seed: int
    g_description: str = ""


def _sample_pairs(d: int, box, radius_R: float, n_pairs: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = (np.full(d, float(box[0])), np.full(d, float(box[1]))) \
        if np.isscalar(box[0]) else (np.asarray(box[0], float), np.asarray(box[1], float))
    x = lo + (hi - lo) * rng.random((n_pairs, d))
    direction = rng.standard_normal((n_pairs, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radii = radius_R * rng.random(n_pairs) ** (1.0 / d)
    return x, x + direction * radii[:, None]


def _as_g_callable(g_R, d: int) -> Callable[[np.ndarray], np.ndarray]:
    if callable(g_R):
        return g_R
    c = float(g_R)
    if c < 0:
        raise ValueError("g_R must be nonnegative")
    return lambda x: np.full(x.shape[0], c)


def _certify(pair: CoefficientPair, modulus: OsgoodModulus, g_R, radius_R: float,
             n_pairs: int, seed: int, box, which: str) -> OsgoodCertificate:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = make_rng(seed, 17)
    x, y = _sample_pairs(pair.dim_d, box, radius_R, n_pairs, rng)
    g = _as_g_callable(g_R, pair.dim_d)
    gx, gy = np.asarray(g(x), float), np.asarray(g(y), float)
    if np.any(gx < 0) or np.any(gy < 0):
        raise ValueError("g_R must be nonnegative on sampled points")
    if which == "drift":
        lhs = np.abs(np.einsum("ni,ni->n", x - y, pair.eval_b(x) - pair.eval_b(y)))
    else:
        ds = pair.eval_sigma(x) - pair.eval_sigma(y)
        lhs = np.einsum("nij,nij->n", ds, ds)
    rho_sq = modulus.evaluator(np.sum((x - y)**2, axis=1))
    rhs = (gx + gy) * rho_sq
    pos = rhs > 0
    ratio = np.zeros(n_pairs)
    ratio[pos] = lhs[pos] / rhs[pos]
    violations = (lhs > rhs * (1 + 1e-12) + 1e-300)
    return OsgoodCertificate(
        radius_R=radius_R,
        modulus_name=modulus.name,
        which=which,
        violation_rate=float(np.mean(violations)),
        worst_ratio=float(ratio.max(initial=0.0)),
        n_pairs=n_pairs,
        seed=seed,
        g_description=("constant" if not callable(g_R) else "field"),
    )


def certify_Hq(pair: CoefficientPair, modulus: OsgoodModulus, g_R, radius_R: float,
               n_pairs: int, seed: int, box=(-2.0, 2.0)) -> OsgoodCertificate:
    """Sample pairs with |x-y| <= R and test
    |<x-y, b(x)-b(y)>| <= (g(x)+g(y)) rho(|x-y|^2)."""
    return _certify(pair, modulus, g_R, radius_R, n_pairs, seed, box, "drift")


def certify_Hsigma(pair: CoefficientPair, modulus: OsgoodModulus, g_R, radius_R: float,
                   n_pairs: int, seed: int, box=(-2.0, 2.0)) -> OsgoodCertificate:
    """As :func:`certify_Hq` with ||sigma(x)-sigma(y)||_F^2 on the left side."""
    return _certify(pair, modulus, g_R, radius_R, n_pairs, seed, box, "diffusion")


def sweep_constant_certificate(pair: CoefficientPair, modulus: OsgoodModulus,
                               radius_R: float, n_pairs: int, seed: int,
                               box=(-2.0, 2.0), which: str = "drift"
                               ) -> tuple[float, OsgoodCertificate]:
    """Maximize LHS/(2 rho) over sampled pairs to fit a constant g_R.

    Returns (C0, certificate at g_R == C0 on the same sampled pairs); by
    construction the certificate has violation_rate 0, so the sweep doubles
    as the oracle for the constant's existence.  The field is evaluated once
    for both the sweep and the certificate.
    """
    rng = make_rng(seed, 17)
    x, y = _sample_pairs(pair.dim_d, box, radius_R, n_pairs, rng)
    if which == "drift":
        lhs = np.abs(np.einsum("ni,ni->n", x - y, pair.eval_b(x) - pair.eval_b(y)))
    else:
        ds = pair.eval_sigma(x) - pair.eval_sigma(y)
        lhs = np.einsum("nij,nij->n", ds, ds)
    rho_sq = modulus.evaluator(np.sum((x - y)**2, axis=1))
    pos = rho_sq > 0
    c0 = float(np.max(lhs[pos] / (2.0 * rho_sq[pos]), initial=0.0))
    rhs = 2.0 * c0 * rho_sq
    ratio = np.zeros(n_pairs)
    ratio[pos] = lhs[pos] / np.where(pos, rhs, 1.0)[pos]
    violations = lhs > rhs * (1 + 1e-12) + 1e-300
    cert = OsgoodCertificate(
        radius_R=radius_R, modulus_name=modulus.name, which=which,
        violation_rate=float(np.mean(violations)),
        worst_ratio=float(ratio.max(initial=0.0)),
        n_pairs=n_pairs, seed=seed, g_description="swept-constant")
    return c0, cert


# ---------------------------------------------------------------------------
# Divergence helpers.

def divergence(pair: CoefficientPair, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """div b at points x: analytic when available, else central differences."""
    x = _points(x, pair.dim_d)
    if pair.div_b is not None:
        return np.asarray(pair.div_b(x), dtype=float)
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    out = np.zeros(x.shape[0])
    for i in range(pair.dim_d):
        e = np.zeros(pair.dim_d)
        e[i] = h
        out += (pair.eval_b(x + e)[:, i] - pair.eval_b(x - e)[:, i]) / (2 * h)
    return out


def div_sigma_columns(pair: CoefficientPair, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Divergence of each column of sigma: out[n, k] = sum_i d_i sigma^{ik}."""
    x = _points(x, pair.dim_d)
    if pair.grad_sigma is not None:
        g = np.asarray(pair.grad_sigma(x), dtype=float)  # (n, i, j, k)
        return np.einsum("niik->nk", g)
    out = np.zeros((x.shape[0], pair.dim_m))
    for i in range(pair.dim_d):
        e = np.zeros(pair.dim_d)
        e[i] = h
        out += (pair.eval_sigma(x + e)[:, i, :] - pair.eval_sigma(x - e)[:, i, :]) / (2 * h)
    return out


def empirical_lq_norm(g: Callable[[np.ndarray], np.ndarray], q: float,
                      box, d: int, resolution: int = 256) -> float:
    """Grid-quadrature L^q norm of a scalar field on a box (no membership claim)."""
    lo, hi = float(box[0]), float(box[1])
    h = (hi - lo) / resolution
    axes = [lo + h * (np.arange(resolution) + 0.5)] * d
    pts = np.stack([c.ravel() for c in np.meshgrid(*axes, indexing="ij")], axis=1)
    vals = np.abs(np.asarray(g(pts), dtype=float))
    return float((np.sum(vals**q) * h**d) ** (1.0 / q))


# ---------------------------------------------------------------------------
# Built-in fields.

def _const_sigma(d, m, mat):
    mat = np.asarray(mat, dtype=float).reshape(d, m)
    return lambda x: np.broadcast_to(mat, (x.shape[0], d, m)).copy()


def _zero_grad_sigma(d, m):
    return lambda x: np.zeros((x.shape[0], d, d, m))


def _make_frozen(d=1, m=1):
    return CoefficientPair(
        d, m, _const_sigma(d, m, np.zeros((d, m))),
        lambda x: np.zeros_like(x), Smoothness.ANALYTIC,
        grad_sigma=_zero_grad_sigma(d, m),
        div_b=lambda x: np.zeros(x.shape[0]),
        grad_b=lambda x: np.zeros((x.shape[0], d, d)),
        name="frozen")


def _make_linear(d=1, m=1, sigma_scale=0.0):
    return CoefficientPair(
        d, m, _const_sigma(d, m, sigma_scale * np.eye(d, m)),
        lambda x: x.copy(), Smoothness.ANALYTIC,
        grad_sigma=_zero_grad_sigma(d, m),
        div_b=lambda x: np.full(x.shape[0], float(d)),
        grad_b=lambda x: np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy(),
        name="linear")


def _make_ou(d=1, m=None, sigma_scale=math.sqrt(2.0)):
    m = d if m is None else m
    return CoefficientPair(
        d, m, _const_sigma(d, m, sigma_scale * np.eye(d, m)),
        lambda x: -x, Smoothness.ANALYTIC,
        grad_sigma=_zero_grad_sigma(d, m),
        div_b=lambda x: np.full(x.shape[0], -float(d)),
        grad_b=lambda x: np.broadcast_to(-np.eye(d), (x.shape[0], d, d)).copy(),
        name="ou")


def _make_ou_mult(sigma_scale=math.sqrt(2.0)):
    # Mean reversion with state-dependent noise; sigma*sigma' != 0 a.e., so
    # Euler-Maruyama self-converges at strong order 1/2 (additive noise would
    # give order 1 and break order-1/2 rate studies).
    def sig(x):
        return (sigma_scale * np.cos(x))[:, :, None]

    def gsig(x):
        return (-sigma_scale * np.sin(x))[:, None, :, None]

    return CoefficientPair(
        1, 1, sig, lambda x: -x, Smoothness.ANALYTIC,
        grad_sigma=gsig,
        div_b=lambda x: np.full(x.shape[0], -1.0),
        name="ou-mult")


def _make_vseries(d=1, m=None, sigma_scale=0.5, truncation_K=10_000, tabulated=True):
    m = d if m is None else m
    if tabulated:
        vt = _vseries_table(truncation_K)
        bfun = lambda x: vt(x)
    else:
        bfun = lambda x: eval_V_series(x, truncation_K)[0]
    return CoefficientPair(
        d, m, _const_sigma(d, m, sigma_scale * np.eye(d, m)),
        bfun, Smoothness.GRID_TABULATED if tabulated else Smoothness.ANALYTIC,
        grad_sigma=_zero_grad_sigma(d, m),
        name="vseries")


def _make_tanh():
    return CoefficientPair(
        1, 1, lambda x: np.tanh(x)[:, :, None],
        lambda x: np.zeros_like(x), Smoothness.ANALYTIC,
        grad_sigma=lambda x: (1.0 / np.cosh(x)**2)[:, None, :, None],
        div_b=lambda x: np.zeros(x.shape[0]),
        name="tanh")


def _make_sobolev_power(exponent=0.9):
    def sig(x):
        return (np.abs(x) ** exponent)[:, :, None]

    def gsig(x):
        ax = np.abs(x)
        safe = np.where(ax > 0, ax, 1.0)
        g = exponent * safe ** (exponent - 1.0) * np.sign(x)
        return np.where(ax[:, None, :, None] > 0, g[:, None, :, None], 0.0)

    return CoefficientPair(
        1, 1, sig, lambda x: np.zeros_like(x), Smoothness.ANALYTIC,
        grad_sigma=gsig, div_b=lambda x: np.zeros(x.shape[0]),
        name="sobolev-power")


def _make_contracting(sigma_scale=0.3):
    return CoefficientPair(
        1, 1, _const_sigma(1, 1, [[sigma_scale]]),
        lambda x: -x, Smoothness.ANALYTIC,
        grad_sigma=_zero_grad_sigma(1, 1),
        div_b=lambda x: np.full(x.shape[0], -1.0),
        name="contracting")


def _make_rotation(sigma_scale=0.1):
    def b(x):
        return np.stack([-x[:, 1], x[:, 0]], axis=1)

    return CoefficientPair(
        2, 2, _const_sigma(2, 2, sigma_scale * np.eye(2)),
        b, Smoothness.ANALYTIC,
        grad_sigma=_zero_grad_sigma(2, 2),
        div_b=lambda x: np.zeros(x.shape[0]),
        name="rotation")


_FIELD_FACTORIES = {
    "frozen": _make_frozen,
    "linear": _make_linear,
    "ou": _make_ou,
    "ou-mult": _make_ou_mult,
    "vseries": _make_vseries,
    "tanh": _make_tanh,
    "sobolev-power": _make_sobolev_power,
    "contracting": _make_contracting,
    "rotation": _make_rotation,
}

FIELD_KEYS = tuple(sorted(_FIELD_FACTORIES))


def get_field(key: str, **params) -> CoefficientPair:
    """Instantiate a built-in coefficient pair by config key."""
    try:
        factory = _FIELD_FACTORIES[key]
    except KeyError:
        raise KeyError(f"unknown field key {key!r}; known: {FIELD_KEYS}") from None
    return factory(**params)


def field_from_csv(path) -> CoefficientPair:
    """Load a 1-d grid-tabulated pair from CSV with a header row.

    Columns: x, b, and optionally sigma.  Values are linearly interpolated
    with constant extension outside the tabulated range.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            if row:
                rows.append([float(v) for v in row])
    data = np.asarray(rows, dtype=float)
    if data.shape[0] < 2:
        raise ValueError("tabulated field needs at least two rows")
    xs = data[:, 0]
    if np.any(np.diff(xs) <= 0):
        raise ValueError("x column must be strictly increasing")
    has_sigma = data.shape[1] >= 3 and len(header) >= 3

    def bfun(x):
        return np.interp(x[:, 0], xs, data[:, 1])[:, None]

    if has_sigma:
        sfun = lambda x: np.interp(x[:, 0], xs, data[:, 2])[:, None, None]
    else:
        sfun = _const_sigma(1, 1, [[0.0]])
    return CoefficientPair(1, 1, sfun, bfun, Smoothness.GRID_TABULATED,
                           name="csv")
