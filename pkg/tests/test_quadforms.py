import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ibrsafe.model import DEFAULT_PARAMS, build_matrices, control_law
from ibrsafe.quadforms import (Pencil, QuadraticForm, assemble_pencils, disturbance_quadratic,
                               evaluate, forms_json, homogenize, input_quadratics,
                               invariance_derivative_quadratic, state_quadratic_x,
                               state_quadratic_z)
from conftest import unit_gain

elems = st.floats(-100, 100, allow_nan=False)


def hom_eval(h, z):
    zz = np.append(z, 1.0)
    return zz @ h @ zz


class TestQuadraticForm:
    def test_symmetrized(self):
        q = QuadraticForm([[1.0, 2.0], [0.0, 3.0]], [0, 0])
        np.testing.assert_array_equal(q.q_mat, q.q_mat.T)
        assert q.q_mat[0, 1] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            QuadraticForm(np.eye(2), [0, 0, 0])

    def test_zero_form(self, rng):
        q = QuadraticForm(np.zeros((3, 3)), np.zeros(3))
        assert evaluate(q, rng.normal(size=3)) == 0.0

    def test_json_round_trip(self, rng):
        q = QuadraticForm(rng.normal(size=(3, 3)), rng.normal(size=3), 2.5)
        back = QuadraticForm.from_json(q.to_json())
        np.testing.assert_array_equal(back.q_mat, q.q_mat)
        np.testing.assert_array_equal(back.r_vec, q.r_vec)
        assert back.c == q.c

    def test_batched_evaluate(self, rng):
        q = QuadraticForm(rng.normal(size=(3, 3)), rng.normal(size=3), 1.0)
        z = rng.normal(size=(7, 3))
        np.testing.assert_allclose(evaluate(q, z), [evaluate(q, zi) for zi in z], rtol=1e-14)


class TestHomogenize:
    def test_pure_quadratic_block(self):
        q = QuadraticForm(np.diag([1.0, 2.0]), [0, 0], 0)
        np.testing.assert_array_equal(homogenize(q), np.diag([1.0, 2.0, 0.0]))

    def test_identity_minus_one(self):
        h = homogenize(QuadraticForm(np.eye(3), np.zeros(3), -1.0))
        np.testing.assert_array_equal(h, np.diag([1.0, 1.0, 1.0, -1.0]))

    @given(arrays(float, (3, 3), elements=elems), arrays(float, 3, elements=elems), elems,
           arrays(float, 3, elements=elems))
    def test_congruence(self, qm, r, c, z):
        q = QuadraticForm(qm, r, c)
        h = homogenize(q)
        np.testing.assert_array_equal(h, h.T)
        scale = 1.0 + np.abs(qm).sum() * (1 + np.abs(z).max()) ** 2 + abs(c) + np.abs(r).sum() * (1 + np.abs(z).max())
        assert abs(hom_eval(h, z) - evaluate(q, z)) <= 1e-12 * scale


class TestStateForms:
    def test_x_values(self):
        q = state_quadratic_x(0.95)
        np.testing.assert_allclose(q.q_mat, np.diag([0.0975, -0.9025]), rtol=1e-14)
        assert evaluate(q, [1000.0, 0.0]) == pytest.approx(97500.0, rel=1e-12)

    def test_x_boundary(self):
        p = 700.0
        q = p * np.sqrt(1 - 0.95**2) / 0.95
        assert abs(evaluate(state_quadratic_x(0.95), [p, q])) <= 1e-9 * p**2

    def test_z_embedding(self, rng):
        qx, qz = state_quadratic_x(0.95), state_quadratic_z(0.95)
        for _ in range(20):
            p, q, v2 = rng.normal(size=3) * 1000
            assert evaluate(qz, [v2, p, q]) == pytest.approx(evaluate(qx, [p, q]), rel=1e-14)
        assert evaluate(qz, [12100.0, 1000.0, 0.0]) == pytest.approx(97500.0, rel=1e-12)
        assert evaluate(qz, [12100.0, 0.0, 0.0]) == 0.0


class TestDisturbance:
    def test_roots(self):
        q = disturbance_quadratic(105.6, 114.4)
        for v in (105.6, 114.4):
            assert abs(evaluate(q, [v**2, 0, 0])) <= 1e-6 * v**4

    def test_table_coefficients(self):
        q = disturbance_quadratic(105.6, 114.4)
        assert q.r_vec[0] == pytest.approx(24238.72, rel=1e-12)
        assert -q.c == pytest.approx(11151.36 * 13087.36, rel=1e-12)
        assert -q.c == pytest.approx(1.459435e8, rel=2e-5)  # quoted figure is rounded

    def test_inside_outside(self):
        q = disturbance_quadratic(105.6, 114.4)
        assert evaluate(q, [110.0**2, 0, 0]) == pytest.approx(
            -110.0**4 + 24238.72 * 110.0**2 - 105.6**2 * 114.4**2, rel=1e-12)
        assert evaluate(q, [110.0**2, 0, 0]) > 0
        assert evaluate(q, [100.0**2, 0, 0]) < 0
        assert evaluate(q, [120.0**2, 0, 0]) < 0


class TestInvarianceDerivative:
    def test_chain_rule(self, mats, rng):
        d = np.diag([2 * 0.0975, -2 * 0.9025])
        for _ in range(100):
            k = rng.uniform(-1, 1, (2, 2))
            x, r = rng.uniform(-3000, 3000, 2), rng.uniform(-3000, 3000, 2)
            qb = invariance_derivative_quadratic(mats, k, r, 0.95)
            expect = (d @ x) @ (mats.closed_loop(k) @ (x - r))
            scale = np.abs(d @ x).max() * np.abs(mats.closed_loop(k) @ (x - r)).max() * 2 + 1
            assert abs(evaluate(qb, x) - expect) <= 1e-9 * scale

    def test_unit_decay(self, mats, rng):
        k = unit_gain(mats)
        qb = invariance_derivative_quadratic(mats, k, [0.0, 0.0], 0.95)
        for _ in range(10):
            p, q = rng.normal(size=2) * 100
            expect = -2 * 0.0975 * p**2 + 2 * 0.9025 * q**2
            assert evaluate(qb, [p, q]) == pytest.approx(expect, rel=1e-9)

    def test_zero_setpoint_no_linear_term(self, mats):
        qb = invariance_derivative_quadratic(mats, np.zeros((2, 2)), [0.0, 0.0], 0.95)
        np.testing.assert_array_equal(qb.r_vec, [0, 0])
        assert qb.c == 0.0

    def test_finite_difference_along_flow(self, mats):
        # central difference of Q_a along the exact linear flow
        from scipy.linalg import expm
        k = np.array([[0.3, 0.1], [-0.2, 0.4]])
        r = np.array([1300.0, 120.0])
        acl = mats.closed_loop(k)
        x0 = np.array([1000.0, 50.0])
        qa, qb = state_quadratic_x(0.95), invariance_derivative_quadratic(mats, k, r, 0.95)
        h = 1e-6
        xs = [r + expm(acl * t) @ (x0 - r) for t in (-h, h)]
        fd = (evaluate(qa, xs[1]) - evaluate(qa, xs[0])) / (2 * h)
        assert fd == pytest.approx(evaluate(qb, x0), rel=1e-6)


def _u_norm2(mats, k, r, z):
    v = np.sqrt(z[0])
    return np.sum(control_law(z[1:], r, k, v, mats) ** 2)


class TestInputForms:
    def test_control_law_oracle(self, mats, rng):
        p = DEFAULT_PARAMS
        for _ in range(100):
            k = rng.uniform(-1, 1, (2, 2))
            r = rng.uniform(-3000, 3000, 2)
            z = np.array([rng.uniform(100, 120) ** 2, *rng.uniform(-3000, 3000, 2)])
            lo, hi = input_quadratics(mats, k, r, p.u_out_min, p.u_out_max)
            n2 = _u_norm2(mats, k, r, z)
            scale = 1 + n2 + p.u_out_max**2 * z[0]
            assert abs(evaluate(lo, z) - (n2 - p.u_out_min**2 * z[0])) <= 1e-9 * scale
            assert abs(evaluate(hi, z) - (p.u_out_max**2 * z[0] - n2)) <= 1e-9 * scale

    @given(arrays(float, 4, elements=st.floats(-1, 1)), arrays(float, 2, elements=elems),
           arrays(float, 3, elements=elems))
    @settings(max_examples=50)
    def test_complementary(self, kv, r, z):
        m = build_matrices(DEFAULT_PARAMS)
        lo, hi = input_quadratics(m, kv.reshape(2, 2), r, 104.5, 115.5)
        total = evaluate(lo, z) + evaluate(hi, z)
        expect = (115.5**2 - 104.5**2) * z[0]
        assert abs(total - expect) <= 1e-9 * (1 + np.abs(lo.q_mat).sum() * (1 + np.abs(z).max()) ** 2)

    def test_zero_gain_zero_setpoint(self, mats):
        lo, _ = input_quadratics(mats, np.zeros((2, 2)), [0.0, 0.0], 104.5, 115.5)
        for v in (105.6, 110.0, 114.4):
            z = [v**2, 123.0, -45.0]
            assert evaluate(lo, z) == pytest.approx(v**4 - 104.5**2 * v**2, rel=1e-12)


class TestPencils:
    def test_sizes_and_lambda_zero(self, mats):
        pens = assemble_pencils(mats, np.eye(2) * 0.1, [1300.0, 120.0], DEFAULT_PARAMS)
        assert [p.size for p in pens] == [3, 4, 4]
        for p in pens:
            np.testing.assert_array_equal(p.at(0.0), p.m_b)

    def test_congruence(self, mats, rng):
        from ibrsafe.quadforms import disturbance_quadratic as dq
        p = DEFAULT_PARAMS
        for _ in range(20):
            k = rng.uniform(-1, 1, (2, 2))
            r = rng.uniform(0, 3000, 2)
            lam = rng.uniform(0, 10)
            pens = assemble_pencils(mats, k, r, p)
            x = rng.uniform(-3000, 3000, 2)
            z = np.array([rng.uniform(100, 120) ** 2, *x])
            qa_sc = state_quadratic_x(p.pf_min)
            qb_sc = invariance_derivative_quadratic(mats, k, r, p.pf_min)
            got = hom_eval(pens.sc.at(lam), x)
            expect = evaluate(qb_sc, x) - lam * evaluate(qa_sc, x)
            assert abs(got - expect) <= 1e-10 * (1 + abs(evaluate(qb_sc, x)) + lam * abs(evaluate(qa_sc, x)))
            lo, hi = input_quadratics(mats, k, r, p.u_out_min, p.u_out_max)
            prem = evaluate(state_quadratic_z(p.pf_min), z) + evaluate(dq(p.v_g_min, p.v_g_max), z)
            for pen, qb in ((pens.ic1, lo), (pens.ic2, hi)):
                got = hom_eval(pen.at(lam), z)
                expect = evaluate(qb, z) - lam * prem
                scale = 1 + abs(evaluate(qb, z)) + lam * (abs(prem) + z[0] ** 2)
                assert abs(got - expect) <= 1e-10 * scale

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            Pencil([[0.0, 1.0], [0.0, 0.0]], np.eye(2))

    def test_forms_json(self, mats):
        data = forms_json(mats, np.zeros((2, 2)), [1300.0, 120.0], DEFAULT_PARAMS)
        assert data["coordinates"] == ["V_G^2", "P", "Q"]
        assert set(data["pencils"]) == {"sc", "ic1", "ic2"}
        assert np.array(data["pencils"]["ic1"]["m_b"]).shape == (4, 4)
