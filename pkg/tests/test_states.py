import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcoct import (
    DensityMatrix, DimensionMismatchError, Operator, StateVector, ZeroNormError,
    expectation, hs_overlap, normalize,
)


def _random_state(rng, dim=5):
    return StateVector(rng.normal(size=dim) + 1j * rng.normal(size=dim))


class TestStateVector:
    def test_amplitudes_are_immutable(self):
        psi = StateVector([1.0, 0.0])
        with pytest.raises(ValueError):
            psi.amplitudes[0] = 2.0

    def test_norm_sq(self):
        psi = StateVector([3.0, 4.0j])
        assert psi.norm_sq == 25.0

    def test_overlap_conjugate_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = _random_state(rng), _random_state(rng)
        assert a.overlap(b) == pytest.approx(np.conj(b.overlap(a)))

    def test_overlap_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            StateVector([1.0]).overlap(StateVector([1.0, 0.0]))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            StateVector([np.nan, 0.0])

    def test_rejects_empty_and_matrix_input(self):
        with pytest.raises(ValueError):
            StateVector([])
        with pytest.raises(ValueError):
            StateVector(np.zeros((2, 2)))

    @given(scale=st.floats(min_value=-10, max_value=10,
                           allow_nan=False, allow_infinity=False))
    @settings(max_examples=25, deadline=None)
    def test_norm_sq_quadratic_in_scale(self, scale):
        psi = StateVector([1.0, 2.0j, -0.5])
        scaled = StateVector(scale * psi.amplitudes)
        assert scaled.norm_sq == pytest.approx(scale * scale * psi.norm_sq)


class TestOperator:
    def test_hermitian_tag_checked(self):
        with pytest.raises(ValueError):
            Operator(np.array([[0.0, 1.0], [0.0, 0.0]]), hermitian=True)

    def test_hermitian_tag_accepts_hermitian(self):
        op = Operator(np.array([[1.0, 2.0j], [-2.0j, 3.0]]), hermitian=True)
        assert op.hermitian

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            Operator(np.zeros((2, 3)))

    def test_dagger_involution(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        op = Operator(m)
        np.testing.assert_array_equal(op.dagger().dagger().to_dense(), m)
        np.testing.assert_allclose(op.dagger().to_dense(), m.conj().T)

    def test_apply_matches_dense(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
        psi = _random_state(rng)
        out = Operator(m).apply(psi)
        np.testing.assert_allclose(out.amplitudes, m @ psi.amplitudes)

    def test_apply_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            Operator(np.eye(3)).apply(StateVector([1.0, 0.0]))


class TestDensityMatrix:
    def test_hermiticity_enforced(self):
        with pytest.raises(ValueError):
            DensityMatrix(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_from_state_projector(self):
        psi, _ = normalize(StateVector([1.0, 1.0j]))
        rho = DensityMatrix.from_state(psi)
        assert rho.trace == pytest.approx(1.0)
        np.testing.assert_allclose(rho.matrix @ rho.matrix, rho.matrix,
                                   atol=1e-15)

    def test_trace(self):
        rho = DensityMatrix(np.diag([0.25, 0.75]))
        assert rho.trace == 1.0


class TestFunctions:
    def test_expectation_real_for_hermitian(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
        herm = Operator(0.5 * (m + m.conj().T), hermitian=True)
        val = expectation(herm, _random_state(rng))
        assert abs(val.imag) < 1e-12

    def test_expectation_matches_dense(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        psi = _random_state(rng, 4)
        want = np.vdot(psi.amplitudes, m @ psi.amplitudes)
        assert expectation(Operator(m), psi) == pytest.approx(want)

    def test_hs_overlap_matches_trace(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        got = hs_overlap(Operator(a), Operator(b))
        assert got == pytest.approx(np.trace(a.conj().T @ b))

    def test_hs_overlap_self_nonnegative(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        val = hs_overlap(Operator(a), Operator(a))
        assert val.imag == pytest.approx(0.0, abs=1e-14)
        assert val.real >= 0.0

    def test_hs_overlap_mixed_types(self):
        rho = DensityMatrix(np.diag([0.5, 0.5]))
        op = Operator(np.eye(2), hermitian=True)
        assert hs_overlap(op, rho) == pytest.approx(1.0)

    def test_normalize(self):
        psi = StateVector([3.0, 4.0])
        unit, ns = normalize(psi)
        assert ns == 25.0
        assert unit.norm_sq == pytest.approx(1.0)

    def test_normalize_idempotent(self):
        rng = np.random.default_rng(7)
        psi = StateVector(rng.normal(size=6) + 1j * rng.normal(size=6))
        once, _ = normalize(psi)
        twice, ns = normalize(once)
        assert ns == pytest.approx(1.0, abs=1e-14)
        np.testing.assert_allclose(twice.amplitudes, once.amplitudes,
                                   atol=1e-14)

    def test_normalize_zero_raises(self):
        with pytest.raises(ZeroNormError):
            normalize(StateVector([0.0, 0.0]))
