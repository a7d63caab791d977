import math

import numpy as np
import pytest

from sdelab import fields, moduli, mollify
from sdelab.flow import (BrownianStore, integrate, ladder_supdist,
                         moment_report, psi_stability, sup_distance,
                         uniqueness_probe, uniqueness_probe_sweep)
from sdelab.util import WeightedPoints

from .oracles import euler_ode_path, ou_second_moment


@pytest.fixture(scope="module")
def small_store():
    return BrownianStore.generate(101, n_paths=64, dim_m=1, horizon=1.0,
                                  n_steps=128)


class TestBrownianStore:
    def test_reproducible_from_seed(self):
        a = BrownianStore.generate(7, 5, 2, 1.0, 16)
        b = BrownianStore.generate(7, 5, 2, 1.0, 16)
        assert np.array_equal(a.increments, b.increments)

    def test_paths_differ(self):
        a = BrownianStore.generate(7, 2, 1, 1.0, 64)
        assert not np.array_equal(a.increments[0], a.increments[1])

    def test_increment_moments(self):
        store = BrownianStore.generate(11, 400, 1, 2.0, 64)
        flat = store.increments.ravel()
        dt = store.dt
        assert abs(flat.mean()) < 4 * math.sqrt(dt / flat.size)
        assert flat.var() == pytest.approx(dt, rel=0.02)

    def test_coarsen_sums_blocks(self):
        store = BrownianStore.generate(3, 4, 2, 1.0, 32)
        half = store.coarsen(2)
        assert half.n_steps == 16
        manual = store.increments.reshape(4, 16, 2, 2).sum(axis=2)
        assert np.array_equal(half.increments, manual)
        assert half.fingerprint == store.fingerprint

    def test_coarsen_factor_must_divide(self):
        store = BrownianStore.generate(3, 1, 1, 1.0, 10)
        with pytest.raises(ValueError):
            store.coarsen(3)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            BrownianStore.generate(0, 0, 1, 1.0, 4)


class TestIntegrate:
    def test_frozen_dynamics(self, small_store):
        pair = fields.get_field("frozen")
        starts = WeightedPoints.equal(np.array([[0.3], [-1.2]]))
        ens = integrate(pair, starts, small_store, record="full")
        assert np.allclose(ens.trajectories, ens.trajectories[:, :, :1])
        assert np.allclose(ens.sup_norm, np.abs(starts.points[:, 0]))

    def test_ode_decay_with_order_one_error(self):
        # sigma = 0, b = -x, x0 = 1: X_T = e^{-1}; halving dt halves the error
        pair = fields.get_field("contracting", sigma_scale=0.0)
        starts = WeightedPoints.equal(np.array([[1.0]]))
        errs = []
        for n_steps in (64, 128):
            store = BrownianStore.generate(1, 1, 1, 1.0, n_steps)
            ens = integrate(pair, starts, store)
            errs.append(abs(float(ens.final[0, 0, 0]) - math.exp(-1.0)))
        assert errs[1] / errs[0] == pytest.approx(0.5, abs=0.05)

    def test_euler_matches_ode_oracle_exactly(self):
        pair = fields.get_field("contracting", sigma_scale=0.0)
        starts = WeightedPoints.equal(np.array([[0.7]]))
        store = BrownianStore.generate(2, 1, 1, 1.0, 32)
        ens = integrate(pair, starts, store, record="full")
        oracle = euler_ode_path(lambda x: -x, 0.7, 1.0, 32)
        assert np.allclose(ens.trajectories[0, 0, :, 0], oracle, atol=1e-14)

    def test_ito_isometry_variance(self):
        # dX = sqrt(2) dB: Var X_T = 2T at any step count
        pair = fields.get_field("ou")
        pair = fields.CoefficientPair(1, 1, pair.sigma,
                                      lambda x: np.zeros_like(x),
                                      fields.Smoothness.ANALYTIC)
        store = BrownianStore.generate(21, 200_000, 1, 1.0, 16)
        ens = integrate(pair, WeightedPoints.equal(np.array([[0.0]])), store)
        sample = ens.final[:, 0, 0]
        est = sample.var()
        se = 2.0 * math.sqrt(2.0 / (sample.size - 1))
        assert abs(est - 2.0) < 3 * se

    def test_deterministic_across_workers(self, small_store):
        pair = fields.get_field("ou-mult")
        starts = WeightedPoints.equal(np.array([[0.5], [1.5], [-0.4]]))
        a = integrate(pair, starts, small_store, record="full", workers=1)
        b = integrate(pair, starts, small_store, record="full", workers=4)
        assert np.array_equal(a.trajectories, b.trajectories)

    def test_milstein_beats_euler_on_multiplicative_noise(self):
        pair = fields.get_field("ou-mult")
        starts = WeightedPoints.equal(np.array([[1.0]]))
        root = BrownianStore.generate(5, 2048, 1, 1.0, 256)
        ref = integrate(pair, starts, root, scheme="milstein", record="full")
        gaps = {}
        for scheme in ("euler", "milstein"):
            coarse = integrate(pair, starts, root.coarsen(8), scheme=scheme,
                               record="full")
            diff = np.abs(ref.trajectories[:, :, ::8] - coarse.trajectories)
            gaps[scheme] = float(np.sqrt(np.mean(diff.max(axis=2) ** 2)))
        assert gaps["milstein"] < 0.5 * gaps["euler"]

    def test_milstein_requires_scalar(self, small_store):
        pair = fields.get_field("rotation")
        store = BrownianStore.generate(1, 2, 2, 1.0, 8)
        with pytest.raises(ValueError):
            integrate(pair, WeightedPoints.equal(np.zeros((1, 2))), store,
                      scheme="milstein")

    def test_divergence_flagged_not_dropped(self):
        # explosive cubic drift overflows quickly at coarse steps
        def b(x):
            return x ** 3
        pair = fields.CoefficientPair(
            1, 1, lambda x: np.zeros((x.shape[0], 1, 1)), b,
            fields.Smoothness.ANALYTIC, name="cubic")
        store = BrownianStore.generate(4, 1, 1, 10.0, 20)
        ens = integrate(pair, WeightedPoints.equal(np.array([[2.0]])), store)
        assert ens.diverged.any()
        assert np.all(np.isfinite(ens.final))

    def test_stopping_freezes_trajectories(self):
        pair = fields.get_field("linear", sigma_scale=0.0)     # b = x, growth
        store = BrownianStore.generate(6, 1, 1, 2.0, 64)
        ens = integrate(pair, WeightedPoints.equal(np.array([[1.0]])), store,
                        stopping_radius=2.0, record="full")
        stop = int(ens.stopped_at[0, 0])
        assert stop < 64
        tail = ens.trajectories[0, 0, stop:, 0]
        assert np.all(tail == tail[0])
        assert abs(tail[0]) >= 2.0
        assert np.all(np.abs(ens.trajectories[0, 0, :stop, 0]) < 2.0)

    def test_snapshots_on_grid_only(self, small_store):
        pair = fields.get_field("frozen")
        starts = WeightedPoints.equal(np.array([[0.0]]))
        with pytest.raises(ValueError):
            integrate(pair, starts, small_store, snapshot_times=[0.33333])


class TestComparisons:
    def test_sup_distance_zero_on_self(self, small_store):
        pair = fields.get_field("ou")
        starts = WeightedPoints.equal(np.array([[0.2], [1.0]]))
        ens = integrate(pair, starts, small_store, record="full")
        assert np.all(sup_distance(ens, ens) == 0.0)

    def test_sup_distance_constant_shift(self, small_store):
        import copy
        pair = fields.get_field("ou")
        starts = WeightedPoints.equal(np.array([[0.2], [1.0]]))
        a = integrate(pair, starts, small_store, record="full")
        b = copy.deepcopy(a)
        b.trajectories = b.trajectories + 0.37
        b.noise = a.noise          # keep the coupling identity
        b.starts = a.starts
        assert np.allclose(sup_distance(a, b), 0.37, atol=1e-14)

    def test_sup_distance_matches_recomputation(self, small_store):
        raw = fields.get_field("ou")
        starts = WeightedPoints.equal(np.linspace(-1, 1, 5)[:, None])
        m1 = mollify.mollify_pair(raw, mollify.MollifierSpec(4, quadrature_points=16))
        m2 = mollify.mollify_pair(raw, mollify.MollifierSpec(16, quadrature_points=16))
        a = integrate(m1, starts, small_store, record="full")
        b = integrate(m2, starts, small_store, record="full")
        got = sup_distance(a, b)
        manual = np.abs(a.trajectories - b.trajectories)[:, :, :, 0].max(axis=2)
        assert np.array_equal(got, manual)

    def test_uncoupled_comparison_refused(self):
        pair = fields.get_field("ou")
        starts = WeightedPoints.equal(np.array([[0.0]]))
        s1 = BrownianStore.generate(1, 4, 1, 1.0, 16)
        s2 = BrownianStore.generate(1, 4, 1, 1.0, 16)
        a = integrate(pair, starts, s1, record="full")
        b = integrate(pair, starts, s2, record="full")
        with pytest.raises(ValueError):
            sup_distance(a, b)

    def test_psi_stability_zero_on_self(self, small_store):
        pair = fields.get_field("ou")
        starts = WeightedPoints.equal(np.array([[0.4]]))
        ens = integrate(pair, starts, small_store, record="full")
        aux = moduli.AuxiliaryFunction(moduli.get_modulus("loglinear"), 0.1)
        assert psi_stability(ens, ens, aux, level_R=10.0) == 0.0

    def test_psi_stability_deterministic_gap_oracle(self):
        # sigma = 0: flows are Euler ODE maps; the gap recursion is exact
        eps = 0.05
        b1 = fields.CoefficientPair(
            1, 1, lambda x: np.zeros((x.shape[0], 1, 1)),
            lambda x: -x, fields.Smoothness.ANALYTIC)
        b2 = fields.CoefficientPair(
            1, 1, lambda x: np.zeros((x.shape[0], 1, 1)),
            lambda x: -x + eps, fields.Smoothness.ANALYTIC)
        store = BrownianStore.generate(9, 2, 1, 1.0, 64)
        starts = WeightedPoints(np.array([[0.5], [-0.25]]), np.array([0.25, 0.75]))
        ens1 = integrate(b1, starts, store, record="full")
        ens2 = integrate(b2, starts, store, record="full")
        aux = moduli.AuxiliaryFunction(moduli.get_modulus("linear"), 0.5)
        got = psi_stability(ens1, ens2, aux, level_R=50.0)
        gaps = []
        for x0 in (0.5, -0.25):
            p1 = euler_ode_path(lambda x: -x, x0, 1.0, 64)
            p2 = euler_ode_path(lambda x: -x + eps, x0, 1.0, 64)
            gaps.append(np.max(np.abs(p1 - p2)))
        expected = 0.25 * math.log1p(gaps[0]**2 / 0.5) \
            + 0.75 * math.log1p(gaps[1]**2 / 0.5)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_level_set_excludes_far_particles(self, small_store):
        pair = fields.get_field("frozen")
        starts = WeightedPoints.equal(np.array([[0.1], [5.0]]))
        a = integrate(pair, starts, small_store, record="full")
        b = integrate(pair, starts, small_store, record="full")
        b.trajectories = b.trajectories + 0.5
        b.noise, b.starts = a.noise, a.starts
        aux = moduli.AuxiliaryFunction(moduli.get_modulus("linear"), 1.0)
        # R = 1 keeps only the first particle (weight 1/2)
        got = psi_stability(a, b, aux, level_R=1.0)
        assert got == pytest.approx(0.5 * math.log1p(0.25), rel=1e-12)


class TestMomentReport:
    def test_frozen_equals_start_moment(self, small_store):
        pair = fields.get_field("frozen")
        pts = np.array([[0.5], [-2.0], [1.5]])
        w = np.array([0.2, 0.3, 0.5])
        ens = integrate(pair, WeightedPoints(pts, w), small_store)
        expected = float(np.sum(w * np.abs(pts[:, 0]) ** 2))
        assert moment_report(ens, 2.0) == pytest.approx(expected, rel=1e-14)

    def test_explosive_linear_drift(self):
        # b = x, sigma = 0: sup |X| = |x| (1+dt)^N -> e at T=1
        pair = fields.get_field("linear", sigma_scale=0.0)
        store = BrownianStore.generate(3, 1, 1, 1.0, 1024)
        pts = np.array([[1.0], [0.5]])
        ens = integrate(pair, WeightedPoints.equal(pts), store)
        expected = (1 + store.dt) ** (2 * 1024) * float(np.mean(pts**2))
        got = moment_report(ens, 2.0)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(math.e**2 * np.mean(pts**2), rel=5e-3)

    def test_ou_bounded_by_closed_form_band(self):
        pair = fields.get_field("ou")
        store = BrownianStore.generate(13, 4000, 1, 2.0, 256)
        x0 = 1.5
        ens = integrate(pair, WeightedPoints.equal(np.array([[x0]])), store)
        got = moment_report(ens, 2.0)
        lower = max(ou_second_moment(t, x0) for t in np.linspace(0, 2.0, 9))
        # Doob-type headroom: E sup |X|^2 <= 4 sup_t E|X_t|^2 comfortably
        assert lower <= got <= 4.0 * lower
        finer = integrate(pair, WeightedPoints.equal(np.array([[x0]])),
                          BrownianStore.generate(13, 4000, 1, 2.0, 512))
        assert moment_report(finer, 2.0) == pytest.approx(got, rel=0.05)

    def test_exponent_must_be_positive(self, small_store):
        pair = fields.get_field("frozen")
        ens = integrate(pair, WeightedPoints.equal(np.array([[1.0]])), small_store)
        with pytest.raises(ValueError):
            moment_report(ens, 0.0)


class TestUniquenessProbe:
    def test_identical_refinement_factor_one(self):
        pair = fields.get_field("ou")
        store = BrownianStore.generate(31, 256, 1, 1.0, 64)
        starts = WeightedPoints.equal(np.array([[0.3]]))
        aux = moduli.AuxiliaryFunction(moduli.get_modulus("linear"), 1e-3)
        rep = uniqueness_probe(pair, store, starts, aux, eta=1e-9, lam=50.0,
                               refine_factor=1)
        assert rep.p_exceed == 0.0
        assert rep.bound_holds

    def test_probability_decays_with_steps(self):
        pair = fields.get_field("ou-mult")
        starts = WeightedPoints.equal(np.array([[1.0]]))
        aux = moduli.AuxiliaryFunction(moduli.get_modulus("linear"), 1e-2)
        ps = []
        for n in (32, 128, 512):
            store = BrownianStore.generate(41, 2048, 1, 1.0, 2 * n)
            rep = uniqueness_probe(pair, store, starts, aux, eta=0.05, lam=50.0)
            ps.append(rep.p_exceed)
        assert ps[0] > ps[-1]
        assert ps[-1] < 0.05

    def test_markov_bound_holds_across_delta_sweep(self):
        pair = fields.get_field("ou")
        store = BrownianStore.generate(43, 4096, 1, 1.0, 256)
        starts = WeightedPoints.equal(np.array([[0.5]]))
        reports = uniqueness_probe_sweep(
            pair, store, starts, deltas=[1e-1, 1e-2, 1e-3, 1e-4],
            modulus=moduli.get_modulus("loglinear"), eta=0.02, lam=20.0)
        for rep in reports:
            assert rep.bound_holds
            assert rep.p_exceed <= rep.bound + 3 * rep.p_stderr + 1e-12


class TestLadder:
    def test_matches_pairwise_integration(self):
        raw = fields.get_field("vseries", sigma_scale=0.5)
        specs = [mollify.MollifierSpec(n, quadrature_points=16) for n in (4, 16)]
        pairs = [mollify.tabulate_mollified_pair_1d(raw, s, -8.0, 8.0)
                 for s in specs]
        store = BrownianStore.generate(51, 8, 1, 0.5, 32)
        starts = WeightedPoints.equal(np.linspace(-1, 1, 7)[:, None])
        res = ladder_supdist(pairs, store, starts)
        a = integrate(pairs[0], starts, store, record="full")
        b = integrate(pairs[1], starts, store, record="full")
        manual = sup_distance(a, b)
        assert np.allclose(np.sqrt(res["supdist2"][0]), manual, atol=1e-12)
        assert np.allclose(res["sup_norm"][0], a.sup_norm, atol=1e-12)

    def test_workers_do_not_change_result(self):
        raw = fields.get_field("vseries", sigma_scale=0.5)
        pairs = [mollify.tabulate_mollified_pair_1d(
            raw, mollify.MollifierSpec(n, quadrature_points=16), -8.0, 8.0)
            for n in (4, 8, 16)]
        store = BrownianStore.generate(53, 16, 1, 0.5, 32)
        starts = WeightedPoints.equal(np.linspace(-1, 1, 9)[:, None])
        r1 = ladder_supdist(pairs, store, starts, workers=1)
        r4 = ladder_supdist(pairs, store, starts, workers=4)
        assert np.array_equal(r1["supdist2"], r4["supdist2"])
        assert np.array_equal(r1["sup_norm"], r4["sup_norm"])

    def test_needs_two_levels(self):
        raw = fields.get_field("frozen")
        store = BrownianStore.generate(1, 2, 1, 1.0, 8)
        with pytest.raises(ValueError):
            ladder_supdist([raw], store, WeightedPoints.equal(np.zeros((1, 1))))
