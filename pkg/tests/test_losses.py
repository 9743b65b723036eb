"""Loss-term tests: hand-computed cases, a 64-bit direct-summation
oracle, and property checks on the stated invariances."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlvicx.losses import (
    LossBreakdown,
    VicWeights,
    cov_loss,
    cov_matrix,
    inv_loss,
    mlvicx_loss,
    var_loss,
    vic_term,
)
from mlvicx.tensor import ShapeError, Tensor
from oracles import oracle_cov, oracle_cov_matrix, oracle_inv, oracle_tier, oracle_var


# ----------------------------------------------------------------------
# hand cases
# ----------------------------------------------------------------------

class TestInvLoss:
    def test_identical_batches_give_zero(self, rng):
        z = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        assert inv_loss(z, Tensor(z.data.copy())).item() == 0.0

    def test_hand_case_three_four(self):
        z = Tensor([[0.0, 0.0]])
        zp = Tensor([[3.0, 4.0]])
        assert inv_loss(z, zp).item() == pytest.approx(25.0, abs=1e-6)

    def test_pairing_is_positional(self):
        z = Tensor([[1.0, 0.0], [0.0, 1.0]])
        zp = Tensor([[0.0, 1.0], [1.0, 0.0]])
        swapped = Tensor([[1.0, 0.0], [0.0, 1.0]])
        assert inv_loss(z, zp).item() > 0.0
        assert inv_loss(z, swapped).item() == 0.0

    def test_symmetry(self, rng):
        z = Tensor(rng.standard_normal((5, 6)).astype(np.float32))
        zp = Tensor(rng.standard_normal((5, 6)).astype(np.float32))
        assert inv_loss(z, zp).item() == inv_loss(zp, z).item()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            inv_loss(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0, 3.0]]))


class TestVarLoss:
    def test_spread_batch_inactive_hinge(self):
        z = Tensor([[0.0, 0.0], [2.0, 2.0]])
        assert var_loss(z, var_target=1.0, epsilon=0.0).item() == pytest.approx(0.0, abs=1e-7)

    def test_constant_batch_full_hinge(self):
        z = Tensor(np.full((4, 3), 0.7, dtype=np.float32))
        assert var_loss(z, var_target=1.0, epsilon=0.0).item() == pytest.approx(1.0, abs=1e-7)

    def test_scaling_drives_hinge_to_zero(self, rng):
        z = rng.standard_normal((6, 4)).astype(np.float32)
        z *= np.float32(0.2 / z.std(axis=0, ddof=1).max())  # hinge active everywhere
        assert var_loss(Tensor(z), var_target=1.0, epsilon=0.0).item() > 0.0
        scale = float(1.0 / z.std(axis=0, ddof=1).min()) * 1.5
        loss = var_loss(Tensor(z * np.float32(scale)), var_target=1.0, epsilon=0.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_translation_invariance(self, rng):
        z = rng.standard_normal((5, 4)).astype(np.float32)
        shift = rng.standard_normal(4).astype(np.float32)
        a = var_loss(Tensor(z)).item()
        b = var_loss(Tensor(z + shift)).item()
        assert a == pytest.approx(b, rel=1e-5, abs=1e-6)

    def test_single_row_rejected(self):
        with pytest.raises(ShapeError):
            var_loss(Tensor([[1.0, 2.0]]))


class TestCovariance:
    def test_hand_matrix(self):
        z = Tensor([[0.0, 0.0], [2.0, 2.0]])
        c = cov_matrix(z)
        np.testing.assert_allclose(c.data, [[2.0, 2.0], [2.0, 2.0]], atol=1e-6)

    def test_matrix_is_symmetric_with_variance_diagonal(self, rng):
        z = rng.standard_normal((6, 5)).astype(np.float32)
        c = cov_matrix(Tensor(z)).data
        np.testing.assert_allclose(c, c.T, atol=1e-6)
        np.testing.assert_allclose(np.diag(c), z.std(axis=0, ddof=1) ** 2, rtol=1e-4)

    def test_centering_invariance(self, rng):
        z = rng.standard_normal((4, 3)).astype(np.float32)
        shift = np.float32(2.5)
        a = cov_matrix(Tensor(z)).data
        b = cov_matrix(Tensor(z + shift)).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_hand_cov_loss(self):
        z = Tensor([[0.0, 0.0], [2.0, 2.0]])
        assert cov_loss(z).item() == pytest.approx(4.0, abs=1e-6)

    def test_sign_pattern_batch_decorrelates(self):
        z = Tensor([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
        assert cov_loss(z).item() <= 1e-10

    def test_single_dimension_has_no_off_diagonal(self, rng):
        z = Tensor(rng.standard_normal((5, 1)).astype(np.float32))
        assert cov_loss(z).item() == 0.0

    def test_row_permutation_invariance(self, rng):
        z = rng.standard_normal((6, 4)).astype(np.float32)
        perm = rng.permutation(6)
        a = cov_loss(Tensor(z)).item()
        b = cov_loss(Tensor(z[perm])).item()
        assert a == pytest.approx(b, rel=1e-5, abs=1e-7)


class TestComposites:
    def test_zero_weights_zero_loss(self, rng):
        z = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
        zp = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
        w = VicWeights(alpha=0.0, beta=0.0, gamma=0.0)
        term, *_ = vic_term(z, zp, w)
        assert term.item() == 0.0

    def test_identical_spread_decorrelated_batch_vanishes(self):
        z = Tensor([[1.5, 1.5], [-1.5, 1.5], [1.5, -1.5], [-1.5, -1.5]])
        term, *_ = vic_term(z, Tensor(z.data.copy()), VicWeights(epsilon=0.0))
        assert term.item() == pytest.approx(0.0, abs=1e-6)

    def test_balance_zero_reduces_to_global_tier(self, rng):
        z = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
        zp = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
        m = Tensor(rng.standard_normal((4, 5)).astype(np.float32))
        mp = Tensor(rng.standard_normal((4, 5)).astype(np.float32))
        w = VicWeights(balance=0.0)
        bd = mlvicx_loss(z, zp, m, mp, w)
        assert bd.total_value == pytest.approx(bd.l_g)

    def test_tier_masking_matches_zeroed_coefficients(self, rng):
        z = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
        zp = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
        m = Tensor(rng.standard_normal((4, 5)).astype(np.float32))
        mp = Tensor(rng.standard_normal((4, 5)).astype(np.float32))
        w = VicWeights()
        local_only = mlvicx_loss(z, zp, m, mp, w, use_global=False)
        assert local_only.l_g == 0.0
        assert local_only.total_value == pytest.approx(w.balance * local_only.l_l)

    def test_breakdown_identity_and_nonnegativity(self, rng):
        z = Tensor(rng.standard_normal((5, 7)).astype(np.float32))
        zp = Tensor(rng.standard_normal((5, 7)).astype(np.float32))
        m = Tensor(rng.standard_normal((5, 3)).astype(np.float32))
        mp = Tensor(rng.standard_normal((5, 3)).astype(np.float32))
        bd = mlvicx_loss(z, zp, m, mp, VicWeights(balance=0.7))
        assert bd.total_value == pytest.approx(bd.l_g + 0.7 * bd.l_l, abs=1e-6)
        assert bd.total.item() == pytest.approx(bd.total_value, rel=1e-5, abs=1e-5)
        for value in (bd.inv_g, bd.var_g, bd.cov_g, bd.inv_l, bd.var_l, bd.cov_l,
                      bd.l_g, bd.l_l):
            assert value >= 0.0

    def test_gradient_matches_finite_differences(self, rng):
        from mlvicx.tensor import grad_check_params

        # pair offsets of at least 0.4 per coordinate keep every gradient
        # entry resolvable in 32-bit
        z_ = rng.uniform(-1, 1, (3, 4)).astype(np.float32)
        off = (rng.uniform(0.4, 1.2, (3, 4)) * rng.choice([-1, 1], (3, 4))).astype(np.float32)
        m_ = rng.uniform(-1, 1, (3, 4)).astype(np.float32)
        moff = (rng.uniform(0.4, 1.2, (3, 4)) * rng.choice([-1, 1], (3, 4))).astype(np.float32)
        z = Tensor(z_, requires_grad=True)
        m = Tensor(m_, requires_grad=True)
        zp, mp = Tensor(z_ - off), Tensor(m_ - moff)
        w = VicWeights(alpha=1.0, beta=1.0, gamma=1.0, epsilon=1e-2)
        res = grad_check_params(
            lambda: mlvicx_loss(z, zp, m, mp, w).total, {"z": z, "m": m},
            step=5e-3, tol=1e-3,
        )
        assert res.passed, str(res)


class TestOracleEquivalence:
    def test_random_batches_match_64bit_oracle(self):
        rng = np.random.default_rng(77)
        w = VicWeights(alpha=25.0, beta=25.0, gamma=1.0, balance=1.0)
        for _ in range(25):
            b = int(rng.integers(2, 9))
            r = int(rng.integers(2, 17))
            z = rng.standard_normal((b, r)).astype(np.float32)
            zp = rng.standard_normal((b, r)).astype(np.float32)
            assert inv_loss(Tensor(z), Tensor(zp)).item() == pytest.approx(
                oracle_inv(z, zp), rel=1e-5, abs=1e-6)
            assert var_loss(Tensor(z), w.var_target, w.epsilon).item() == pytest.approx(
                oracle_var(z, w.var_target, w.epsilon), rel=1e-5, abs=1e-6)
            assert cov_loss(Tensor(z)).item() == pytest.approx(
                oracle_cov(z), rel=1e-5, abs=1e-6)
            term, *_ = vic_term(Tensor(z), Tensor(zp), w)
            expected = oracle_tier(z, zp, w.alpha, w.beta, w.gamma, w.var_target, w.epsilon)
            assert term.item() == pytest.approx(expected, rel=1e-5, abs=1e-5)


@st.composite
def embedding_batches(draw):
    b = draw(st.integers(2, 6))
    r = draw(st.integers(1, 8))
    values = draw(st.lists(st.floats(-5, 5, width=32), min_size=b * r, max_size=b * r))
    return np.asarray(values, dtype=np.float32).reshape(b, r)


class TestProperties:
    @given(embedding_batches())
    @settings(max_examples=60, deadline=None)
    def test_all_terms_nonnegative(self, z):
        t = Tensor(z)
        assert var_loss(t).item() >= 0.0
        assert cov_loss(t).item() >= 0.0
        assert inv_loss(t, Tensor(np.zeros_like(z))).item() >= 0.0

    @given(embedding_batches())
    @settings(max_examples=60, deadline=None)
    def test_inv_symmetric_exactly(self, z):
        zp = np.roll(z, 1, axis=0)
        a = inv_loss(Tensor(z), Tensor(zp)).item()
        b = inv_loss(Tensor(zp), Tensor(z)).item()
        assert a == b

    @given(embedding_batches(), st.floats(-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_var_loss_translation_invariant(self, z, shift):
        a = var_loss(Tensor(z)).item()
        b = var_loss(Tensor(z + np.float32(shift))).item()
        assert a == pytest.approx(b, rel=1e-4, abs=1e-5)
