import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdelab import moduli
from sdelab.moduli import AuxiliaryFunction, ModulusKind, OsgoodModulus

from .oracles import divergence_integral_loglinear, psi_simpson, rho_loglinear

E_M2 = math.exp(-2.0)


def custom_square_modulus():
    # rho(s) = s^2: integrable near 0, so NOT Osgood; violates rho >= s
    return OsgoodModulus(
        ModulusKind.CUSTOM, 0.0,
        lambda s: np.asarray(s, float) ** 2,
        lambda s: 2.0 * np.asarray(s, float),
        name="square")


class TestEvalRho:
    def test_loglinear_splice_value(self):
        m = moduli.get_modulus("loglinear")
        assert moduli.eval_rho(m, E_M2) == pytest.approx(2 * E_M2, abs=1e-15)
        assert moduli.eval_rho(m, E_M2) == pytest.approx(0.270670566, abs=1e-9)

    def test_zero_for_all_builtins(self):
        for key in moduli.MODULUS_KEYS:
            assert moduli.eval_rho(moduli.get_modulus(key), 0.0) == 0.0

    def test_loglinear_linear_branch(self):
        m = moduli.get_modulus("loglinear")
        assert moduli.eval_rho(m, 0.5) == pytest.approx(0.5 + E_M2, rel=1e-14)

    def test_negative_argument_rejected(self):
        with pytest.raises(ValueError):
            moduli.eval_rho(moduli.get_modulus("linear"), -1.0)

    def test_splice_continuity_both_branches(self):
        bp = E_M2
        left = bp * math.log(1.0 / bp)
        right = bp + E_M2
        assert abs(left - right) <= 1e-12

    def test_one_sided_derivatives_agree_at_splice(self):
        m = moduli.get_modulus("loglinear")
        # both branches have slope 1 at the splice point
        assert m.derivative(E_M2) == pytest.approx(1.0, abs=1e-12)
        assert m.derivative(E_M2 * 1.0000001) == pytest.approx(1.0, abs=1e-6)

    def test_normalization_check_flags_square(self):
        report = custom_square_modulus().check_normalization()
        assert not report["rho_geq_s"]
        good = moduli.get_modulus("loglinear").check_normalization()
        assert good["rho_geq_s"] and good["nondecreasing"] and good["zero_at_zero"]

    def test_rho_geq_s_on_log_grid(self):
        grid = np.logspace(-9, 2, 300)
        for key in moduli.MODULUS_KEYS:
            m = moduli.get_modulus(key)
            vals = m.evaluator(grid)
            assert np.all(vals >= grid * (1 - 1e-12)), key
            assert np.all(np.diff(vals) > 0), key


class TestEvalPsi:
    def test_linear_closed_form(self):
        aux = AuxiliaryFunction(moduli.get_modulus("linear"), 1.0)
        assert moduli.eval_psi(aux, math.e - 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_zero_argument(self):
        for key in moduli.MODULUS_KEYS:
            aux = AuxiliaryFunction(moduli.get_modulus(key), 0.3)
            assert moduli.eval_psi(aux, 0.0) == 0.0

    def test_loglinear_against_simpson_oracle(self):
        # frozen from the composite-Simpson oracle at 10x the panel density
        aux = AuxiliaryFunction(moduli.get_modulus("loglinear"), 0.1)
        oracle = 1.2397309529875145
        assert psi_simpson(rho_loglinear, 0.1, 0.5) == pytest.approx(oracle, rel=1e-11)
        assert moduli.eval_psi(aux, 0.5) == pytest.approx(oracle, rel=1e-9)

    def test_eval_many_matches_quad(self):
        for key in ("loglinear", "loglinear-smooth"):
            aux = AuxiliaryFunction(moduli.get_modulus(key), 0.02)
            xis = np.array([0.0, 1e-10, 1e-5, 0.01, float(E_M2), 0.4, 2.0, 17.0])
            many = aux.eval_many(xis)
            for xi, v in zip(xis, many):
                assert v == pytest.approx(moduli.eval_psi(aux, xi),
                                          rel=1e-8, abs=1e-13)

    def test_delta_must_be_positive(self):
        with pytest.raises(ValueError):
            AuxiliaryFunction(moduli.get_modulus("linear"), 0.0)

    def test_monotone_in_inverse_delta(self):
        m = moduli.get_modulus("loglinear")
        vals = [moduli.eval_psi(AuxiliaryFunction(m, d), 0.7)
                for d in (1.0, 0.1, 0.01, 0.001)]
        assert np.all(np.diff(vals) > 0)

    def test_blowup_as_delta_vanishes(self):
        # psi_delta(1) grows without bound as delta -> 0 for Osgood moduli
        for key in moduli.MODULUS_KEYS:
            m = moduli.get_modulus(key)
            vals = [moduli.eval_psi(AuxiliaryFunction(m, 10.0**-k), 1.0)
                    for k in range(1, 13)]
            assert np.all(np.diff(vals) > 0), key
            assert vals[-1] > 2.0 * vals[0], key

    @settings(max_examples=40, deadline=None)
    @given(st.floats(min_value=1e-4, max_value=10.0),
           st.floats(min_value=1e-3, max_value=1.0))
    def test_strictly_increasing_hypothesis(self, xi, delta):
        aux = AuxiliaryFunction(moduli.get_modulus("loglinear"), delta)
        assert moduli.eval_psi(aux, xi * 1.5) > moduli.eval_psi(aux, xi)

    def test_concavity_random_triples(self, rng):
        # chord inequality on 1000 random triples for every builtin
        for key in moduli.MODULUS_KEYS:
            aux = AuxiliaryFunction(moduli.get_modulus(key), 0.05)
            a = rng.uniform(0, 5, size=1000)
            b = a + rng.uniform(1e-6, 3, size=1000)
            c = b + rng.uniform(1e-6, 3, size=1000)
            pa, pb, pc = (aux.eval_many(v) for v in (a, b, c))
            chord = ((c - b) * pa + (b - a) * pc) / (c - a)
            assert np.all(pb >= chord - 1e-9), key

    def test_linear_closed_form_grid(self):
        # |psi - log(1+xi/delta)| <= 1e-10 * (1 + |log(1+xi/delta)|)
        aux_grid = np.geomspace(1e-6, 10.0, 40)
        for delta in (1.0, 0.1, 0.01):
            aux = AuxiliaryFunction(moduli.get_modulus("linear"), delta)
            for xi in aux_grid:
                expected = math.log1p(xi / delta)
                err = abs(moduli.eval_psi(aux, xi) - expected)
                assert err <= 1e-10 * (1.0 + abs(expected))


class TestDivergenceCertificate:
    def test_linear_closed_form(self):
        eps = [10.0**-k for k in range(1, 7)]
        r = moduli.certify_osgood_divergence(moduli.get_modulus("linear"), eps)
        for e, v in zip(r.epsilons, r.integrals):
            assert v == pytest.approx(math.log(1.0 / e), rel=1e-10)
        assert r.integrals[0] == pytest.approx(2.302585093, rel=1e-8)
        assert r.integrals[-1] == pytest.approx(13.815510558, rel=1e-8)
        assert r.strictly_increasing and r.unbounded_looking and r.passed

    def test_loglinear_against_closed_form_oracle(self):
        eps = [1e-1, 1e-2, 1e-4, 1e-6, 1e-8]
        r = moduli.certify_osgood_divergence(moduli.get_modulus("loglinear"), eps)
        for e, v in zip(r.epsilons, r.integrals):
            assert v == pytest.approx(divergence_integral_loglinear(e), rel=1e-9)
        assert r.strictly_increasing
        # log log growth: the default last/first ratio threshold is NOT met
        assert r.growth_ratio == pytest.approx(2.3205603, rel=1e-6)
        assert not r.unbounded_looking

    def test_square_modulus_flagged(self):
        eps = [1e-1, 1e-2, 1e-3]
        r = moduli.certify_osgood_divergence(custom_square_modulus(), eps)
        for e, v in zip(r.epsilons, r.integrals):
            assert v == pytest.approx(1.0 / e - 1.0, rel=1e-9)
        assert not r.normalization["rho_geq_s"]
        assert not r.passed

    def test_empty_epsilons_rejected(self):
        with pytest.raises(ValueError):
            moduli.certify_osgood_divergence(moduli.get_modulus("linear"), [])

    def test_nondecreasing_epsilons_rejected(self):
        with pytest.raises(ValueError):
            moduli.certify_osgood_divergence(moduli.get_modulus("linear"),
                                             [1e-3, 1e-2])


class TestCsvModulus:
    def test_roundtrip_interpolation(self, tmp_path):
        s = np.geomspace(1e-8, 10.0, 200)
        m_ref = moduli.get_modulus("loglinear-smooth")
        table = tmp_path / "mod.csv"
        rows = ["s,rho"] + [f"{float(si)!r},{float(ri)!r}"
                            for si, ri in zip(s, m_ref.evaluator(s))]
        table.write_text("\n".join(rows))
        m = moduli.modulus_from_csv(table)
        probe = np.geomspace(2e-8, 8.0, 50)
        assert np.allclose(m.evaluator(probe), m_ref.evaluator(probe), rtol=1e-3)
        assert m.evaluator(np.array([0.0]))[0] == 0.0
