import math

import numpy as np
import pytest

from mmkg_align import losses as L
from mmkg_align import tensor as T
from mmkg_align.tensor import Tensor


def random_pairs(rng, b=4, d=5):
    return (Tensor(rng.normal(size=(b, d)), requires_grad=True),
            Tensor(rng.normal(size=(b, d)), requires_grad=True))


class TestAlignmentProbabilities:
    def test_shape_rows_and_positive_map(self):
        rng = np.random.default_rng(0)
        left, right = random_pairs(rng, b=5, d=3)
        q, pos = L.alignment_probabilities(left, right, 0.5)
        assert q.shape == (5, 9)
        np.testing.assert_allclose(q.data.sum(axis=1), np.ones(5), atol=1e-12)
        np.testing.assert_array_equal(pos, [4, 5, 6, 7, 8])

    def test_two_pairs_orthogonal_closed_form(self):
        left = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        q, pos = L.alignment_probabilities(left, left, 1.0)
        want = math.e / (math.e + 2.0)
        np.testing.assert_allclose(q.data[0, pos[0]], want, rtol=1e-12)
        np.testing.assert_allclose(q.data[1, pos[1]], want, rtol=1e-12)

    def test_batch_of_one_rejected(self):
        x = Tensor(np.ones((1, 3)))
        with pytest.raises(ValueError):
            L.alignment_probabilities(x, x, 0.1)


class TestContrastiveLoss:
    def test_all_tied_candidates_give_log7(self):
        row = np.array([0.3, -1.2, 0.5])
        x = Tensor(np.tile(row, (4, 1)))
        loss = L.contrastive_loss(x, x, 0.1)
        assert abs(loss.item() - math.log(7.0)) < 1e-9

    def test_perfect_separation_is_tiny(self):
        left = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        loss = L.contrastive_loss(left, left, 0.1)
        assert 0.0 <= loss.item() < 1e-7

    def test_symmetric_in_direction(self):
        rng = np.random.default_rng(1)
        left, right = random_pairs(rng)
        a = L.contrastive_loss(left, right, 0.2).item()
        b = L.contrastive_loss(right, left, 0.2).item()
        assert a == b

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        left, right = random_pairs(rng)

        def f(ps):
            return L.contrastive_loss(ps[0], ps[1], 0.5)

        assert T.grad_check(f, [left, right]) < 1e-5


class TestDistillLoss:
    def test_zero_when_student_equals_teacher(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        y = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        loss = L.distill_loss(x, y, x, y, 4.0)
        assert abs(loss.item()) < 1e-12

    def test_nonnegative_on_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            b = int(rng.integers(2, 7))
            d = int(rng.integers(2, 6))
            jl, jr = Tensor(rng.normal(size=(b, d))), Tensor(rng.normal(size=(b, d)))
            ml, mr = Tensor(rng.normal(size=(b, d))), Tensor(rng.normal(size=(b, d)))
            assert L.distill_loss(jl, jr, ml, mr, 4.0).item() >= 0.0

    def test_teacher_path_gets_no_gradient(self):
        rng = np.random.default_rng(5)
        jl, jr = random_pairs(rng)
        ml, mr = random_pairs(rng)
        with T.GradTape():
            loss = L.distill_loss(jl, jr, ml, mr, 4.0)
        T.backward(loss)
        assert jl.grad is None and jr.grad is None
        assert ml.grad is not None and mr.grad is not None

    def test_gradient_matches_cross_entropy_form(self):
        rng = np.random.default_rng(6)
        jl, jr = random_pairs(rng, b=3)
        ml, mr = random_pairs(rng, b=3)
        with T.GradTape():
            loss = L.distill_loss(jl, jr, ml, mr, 4.0)
        T.backward(loss)
        got_l, got_r = ml.grad.copy(), mr.grad.copy()

        T.zero_grads([ml, mr])
        t12, _ = L.alignment_probabilities(jl.detach(), jr.detach(), 4.0)
        t21, _ = L.alignment_probabilities(jr.detach(), jl.detach(), 4.0)
        with T.GradTape():
            s12, _ = L.alignment_probabilities(ml, mr, 4.0)
            s21, _ = L.alignment_probabilities(mr, ml, 4.0)
            ce = -(
                (Tensor(t12.data) * T.log(T.clip_min(s12, L.PROB_FLOOR))).sum()
                + (Tensor(t21.data) * T.log(T.clip_min(s21, L.PROB_FLOOR))).sum()
            ) * (0.5 / 3.0)
        T.backward(ce)
        np.testing.assert_allclose(got_l, ml.grad, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(got_r, mr.grad, rtol=1e-12, atol=1e-15)

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        jl, jr = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5)))
        ml, mr = random_pairs(rng)

        def f(ps):
            return L.distill_loss(jl, jr, ps[0], ps[1], 2.0)

        assert T.grad_check(f, [ml, mr]) < 1e-5


class TestCombinedLoss:
    def build(self, rng, adaptive=True, modal_contrastive=True, distill=True,
              s_cl=None, s_kd=None):
        order = ["structure", "name"]
        ml = {m: Tensor(rng.normal(size=(4, 3)), requires_grad=True) for m in order}
        mr = {m: Tensor(rng.normal(size=(4, 3)), requires_grad=True) for m in order}
        jl = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        jr = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        u_cl = Tensor(np.zeros(3) if s_cl is None else s_cl, requires_grad=True)
        u_kd = Tensor(np.zeros(2) if s_kd is None else s_kd, requires_grad=True)
        with T.GradTape():
            out = L.combined_loss(ml, mr, jl, jr, order, u_cl, u_kd, 0.1, 4.0,
                                  modal_contrastive=modal_contrastive,
                                  distill=distill, adaptive_weights=adaptive)
        return out, u_cl, u_kd

    def test_total_reconstructs_from_parts(self):
        rng = np.random.default_rng(8)
        s_cl = np.array([0.3, -0.2, 9.9])
        s_kd = np.array([-0.5, 0.7])
        out, _, _ = self.build(rng, s_cl=s_cl, s_kd=s_kd)
        want = out.fused_contrastive
        for i, m in enumerate(["structure", "name"]):
            want += math.exp(-s_cl[i]) * out.contrastive[m] + 0.5 * s_cl[i]
            want += math.exp(-s_kd[i]) * out.distill[m] + 0.5 * s_kd[i]
            assert abs(out.alpha[m] - math.exp(0.5 * s_cl[i])) < 1e-12
            assert abs(out.beta[m] - math.exp(0.5 * s_kd[i])) < 1e-12
        assert abs(out.total.item() - want) < 1e-10

    def test_reserved_uncertainty_slot_stays_out(self):
        rng = np.random.default_rng(9)
        out, u_cl, u_kd = self.build(rng)
        T.backward(out.total)
        assert u_cl.grad is not None
        assert u_cl.grad[2] == 0.0
        assert u_cl.grad[:2].any() and u_kd.grad.any()

    def test_toggles_change_total(self):
        rng = np.random.default_rng(10)
        full, _, _ = self.build(np.random.default_rng(10))
        no_cl, _, _ = self.build(np.random.default_rng(10), modal_contrastive=False)
        no_kd, _, _ = self.build(np.random.default_rng(10), distill=False)
        assert abs(no_cl.total.item() - (full.total.item()
                                          - sum(full.contrastive.values()))) < 1e-10
        assert abs(no_kd.total.item() - (full.total.item()
                                          - sum(full.distill.values()))) < 1e-10

    def test_adaptive_off_keeps_uncertainty_fixed(self):
        rng = np.random.default_rng(11)
        out, u_cl, u_kd = self.build(rng, adaptive=False)
        T.backward(out.total)
        assert u_cl.grad is None and u_kd.grad is None
        assert all(v == 1.0 for v in out.alpha.values())
        want = out.fused_contrastive + sum(out.contrastive.values()) + sum(out.distill.values())
        assert abs(out.total.item() - want) < 1e-10

    def test_uncertainty_stationary_point(self):
        # the per-term weight exp(-s) * l + s/2 is stationary where
        # exp(s) = 2 l, i.e. weight alpha = exp(s/2) = sqrt(2 l)
        loss_value = 0.5
        s_star = math.log(2.0 * loss_value)
        eps = 1e-5
        term = lambda s: math.exp(-s) * loss_value + 0.5 * s
        numeric = (term(s_star + eps) - term(s_star - eps)) / (2 * eps)
        assert abs(numeric) < 1e-6
        assert abs(math.exp(0.5 * s_star) - math.sqrt(2 * loss_value)) < 1e-12


class TestBatchPairs:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            L.BatchPairs(np.array([1, 1]), np.array([2, 3]))
        with pytest.raises(ValueError):
            L.BatchPairs(np.array([1, 2]), np.array([3, 3]))
        bp = L.BatchPairs(np.array([1, 2]), np.array([3, 4]))
        assert len(bp) == 2
