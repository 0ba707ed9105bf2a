"""Tests for confidence alignment, the Sinkhorn solver and the exact oracle"""

import math

import numpy as np
import pytest
import torch

from adaptrack.config import TCAConfig
from adaptrack.errors import DimensionError, SinkhornConvergenceWarning, ValidationError
from adaptrack.numerics import DTYPE
from adaptrack.tca import (
    ConfidenceSource,
    benchmark_solver,
    confidence_batch,
    cost_map,
    dual_objective,
    duality_gap,
    lp_oracle,
    psot_loss,
    psot_terms,
    random_instance,
    sinkhorn,
)


def _peaked(values, grid=3, cells=None):
    """Score maps that are zero except for one positive peak per sample"""
    scores = torch.zeros((len(values), grid, grid), dtype=DTYPE)
    for i, v in enumerate(values):
        r, c = cells[i] if cells else (0, 0)
        scores[i, r, c] = v
    return scores


class TestConfidenceBatch:
    def test_peaks_and_values(self):
        scores = _peaked([0.2, 0.8], cells=[(1, 2), (0, 1)])
        cb = confidence_batch(scores, source=ConfidenceSource.TEACHER)
        assert cb.cells.tolist() == [[1, 2], [0, 1]]
        np.testing.assert_allclose(cb.values.numpy(), np.exp([0.2, 0.8]))
        assert cb.source == ConfidenceSource.TEACHER
        assert bool((cb.values > 0).all())

    def test_anchor_cells(self):
        scores = torch.rand((2, 4, 4), dtype=DTYPE)
        anchor = torch.tensor([[3, 3], [0, 1]])
        cb = confidence_batch(scores, anchor=anchor)
        assert cb.scores.tolist() == [scores[0, 3, 3].item(), scores[1, 0, 1].item()]

    def test_anchor_outside_grid(self):
        with pytest.raises(ValidationError, match="outside"):
            confidence_batch(torch.rand((1, 4, 4), dtype=DTYPE), anchor=torch.tensor([[4, 0]]))

    def test_needs_three_dims(self):
        with pytest.raises(DimensionError):
            confidence_batch(torch.rand((4, 4), dtype=DTYPE))


class TestCostMap:
    def test_hand_case(self):
        student = confidence_batch(_peaked([0.2, 0.8]))
        teacher = confidence_batch(_peaked([0.4, 0.9]))
        cost = cost_map(student, teacher)
        np.testing.assert_allclose(
            cost.conf, [[0.2 / 0.7, 1.0], [0.4 / 0.7, 0.1 / 0.7]], atol=1e-12
        )
        np.testing.assert_array_equal(cost.pos, np.zeros((2, 2)))

    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        for n in (5, 16):
            s = confidence_batch(torch.as_tensor(rng.uniform(size=(n, 5, 5)), dtype=DTYPE))
            t = confidence_batch(torch.as_tensor(rng.uniform(size=(n, 5, 5)), dtype=DTYPE))
            conf = np.zeros((n, n))
            pos = np.zeros((n, n))
            for i in range(n):
                for j in range(n):
                    conf[i, j] = abs(s.scores[i].item() - t.scores[j].item())
                    di = (s.cells[i] - t.cells[j]).to(DTYPE)
                    pos[i, j] = math.sqrt(float((di**2).sum()))
            conf = conf / conf.max() if conf.max() > 0 else conf
            pos = pos / pos.max() if pos.max() > 0 else pos
            cost = cost_map(s, t)
            np.testing.assert_allclose(cost.conf, conf, atol=1e-12)
            np.testing.assert_allclose(cost.pos, pos, atol=1e-12)
            for component in (cost.conf, cost.pos):
                assert component.max() in (0.0, 1.0)

    def test_single_sample_costs_nothing(self):
        s = confidence_batch(_peaked([0.2], cells=[(2, 2)]))
        t = confidence_batch(_peaked([0.9]))
        cost = cost_map(s, t)
        np.testing.assert_array_equal(cost.total, [[0.0]])

    def test_anchored_drops_position(self):
        rng = np.random.default_rng(3)
        s = confidence_batch(torch.as_tensor(rng.uniform(size=(4, 5, 5)), dtype=DTYPE))
        t = confidence_batch(torch.as_tensor(rng.uniform(size=(4, 5, 5)), dtype=DTYPE))
        cost = cost_map(s, t, anchored=True)
        np.testing.assert_array_equal(cost.pos, np.zeros((4, 4)))
        np.testing.assert_allclose(cost.conf, cost_map(s, t).conf, atol=0)

    def test_size_mismatch(self):
        s = confidence_batch(_peaked([0.2, 0.8]))
        t = confidence_batch(_peaked([0.4]))
        with pytest.raises(ValidationError, match="batch sizes differ"):
            cost_map(s, t)


class TestSinkhorn:
    def test_marginals_and_gauge(self):
        rng = np.random.default_rng(1)
        C, a, b = random_instance(4, rng, uniform=False)
        plan, pot = sinkhorn(C, a, b, epsilon=0.05, max_iter=20000, epsilon_scaling=True)
        assert pot.converged and pot.residual < 1e-9
        np.testing.assert_allclose(plan.P.sum(axis=1), a, atol=1e-9)
        np.testing.assert_allclose(plan.P.sum(axis=0), b, atol=1e-9)
        assert plan.mass == pytest.approx(1.0, abs=1e-9)
        assert abs(pot.mu.mean()) < 1e-12

    def test_duality_gap(self):
        rng = np.random.default_rng(2)
        C, a, b = random_instance(3, rng, uniform=True)
        plan, pot = sinkhorn(C, a, b, epsilon=0.05, max_iter=20000, epsilon_scaling=True)
        assert pot.converged
        assert abs(duality_gap(plan, pot, C, a, b)) < 1e-6

    def test_two_by_two_closed_form(self):
        C = np.array([[0.0, 0.7], [0.4, 0.1]])
        a = b = np.array([0.5, 0.5])
        eps = 0.1
        plan, pot = sinkhorn(C, a, b, epsilon=eps, max_iter=20000)
        assert pot.converged
        # the cross ratio P01 P10 / (P00 P11) is exp(-(C01 + C10 - C00 - C11) / eps)
        q = math.exp(-(0.7 + 0.4 - 0.0 - 0.1) / (2 * eps))
        p00 = 0.5 / (1.0 + q)
        np.testing.assert_allclose(plan.P, [[p00, 0.5 - p00], [0.5 - p00, p00]], atol=1e-9)

    def test_close_to_exact_optimum(self):
        rng = np.random.default_rng(3)
        eps = 0.01
        for n in (2, 3, 4):
            for _ in range(5):
                C, a, b = random_instance(n, rng, uniform=True)
                plan, pot = sinkhorn(C, a, b, epsilon=eps, max_iter=20000, epsilon_scaling=True)
                lp_cost, _ = lp_oracle(C, a, b)
                cost = float(np.sum(plan.P * C))
                slack = 2.0 * pot.residual + 1e-9
                assert cost >= lp_cost - slack
                # entropic bias is at most eps * KL(P* || a b^T) <= eps * log n
                assert cost <= lp_cost + eps * math.log(n) + slack

    def test_cost_decreases_with_epsilon(self):
        rng = np.random.default_rng(4)
        C, a, b = random_instance(4, rng, uniform=True)
        costs = []
        for eps in (0.5, 0.1, 0.02):
            plan, _ = sinkhorn(C, a, b, epsilon=eps, max_iter=20000, epsilon_scaling=True)
            costs.append(float(np.sum(plan.P * C)))
        assert costs[0] >= costs[1] - 1e-6
        assert costs[1] >= costs[2] - 1e-6
        assert costs[2] >= lp_oracle(C, a, b)[0] - 1e-6

    def test_non_convergence_is_flagged(self):
        rng = np.random.default_rng(5)
        C, a, b = random_instance(4, rng, uniform=False)
        _, pot = sinkhorn(C, a, b, epsilon=0.01, max_iter=1)
        assert not pot.converged
        assert pot.residual > 1e-9
        assert pot.iterations == 1

    def test_bad_epsilon(self):
        a = np.array([0.5, 0.5])
        with pytest.raises(ValidationError, match="epsilon"):
            sinkhorn(np.zeros((2, 2)), a, a, epsilon=0.0)

    def test_bad_marginal(self):
        with pytest.raises(ValidationError, match="sum to 1"):
            sinkhorn(np.zeros((2, 2)), np.array([0.5, 0.6]), np.array([0.5, 0.5]))

    def test_dual_objective(self):
        rng = np.random.default_rng(6)
        C, a, b = random_instance(3, rng)
        _, pot = sinkhorn(C, a, b)
        assert dual_objective(pot, a, b) == pytest.approx(pot.mu @ b + pot.nu @ a)


class TestLpOracle:
    def test_identity_cost(self):
        C = 1.0 - np.eye(3)
        a = np.full(3, 1 / 3)
        cost, plan = lp_oracle(C, a, a)
        assert cost == pytest.approx(0.0)
        np.testing.assert_allclose(plan, np.eye(3) / 3)

    def test_bounds_sinkhorn(self):
        rng = np.random.default_rng(7)
        C, a, b = random_instance(3, rng)
        plan, pot = sinkhorn(C, a, b, epsilon=0.05, max_iter=20000, epsilon_scaling=True)
        assert lp_oracle(C, a, b)[0] <= float(np.sum(plan.P * C)) + 2 * pot.residual + 1e-12

    def test_too_large(self):
        with pytest.raises(ValidationError, match="N <= 6"):
            lp_oracle(np.zeros((7, 7)), np.full(7, 1 / 7), np.full(7, 1 / 7))


class TestPsot:
    def test_loss_is_dual_value(self):
        student = torch.rand((4, 3, 3), dtype=DTYPE)
        teacher = torch.rand((4, 3, 3), dtype=DTYPE)
        result = psot_terms(student, teacher, TCAConfig(epsilon=0.1))
        a = result.student.values / result.student.values.sum()
        b = result.teacher.values / result.teacher.values.sum()
        expected = result.potentials.mu @ b.numpy() + result.potentials.nu @ a.numpy()
        assert result.loss.item() == pytest.approx(expected, abs=1e-12)

    def test_gradients_reach_both_maps(self):
        student = torch.rand((3, 3, 3), dtype=DTYPE, requires_grad=True)
        teacher = torch.rand((3, 3, 3), dtype=DTYPE, requires_grad=True)
        psot_loss(student, teacher, TCAConfig(epsilon=0.1)).backward()
        assert student.grad.abs().sum() > 0
        assert teacher.grad.abs().sum() > 0

    def test_anchored_mode_reads_teacher_cells(self):
        student = torch.rand((3, 4, 4), dtype=DTYPE)
        teacher = torch.rand((3, 4, 4), dtype=DTYPE)
        result = psot_terms(student, teacher, TCAConfig(position_mode="anchored"))
        assert torch.equal(result.student.cells, result.teacher.cells)
        np.testing.assert_array_equal(result.cost.pos, np.zeros((3, 3)))

    def test_single_sample_loss_is_zero(self):
        student = torch.rand((1, 4, 4), dtype=DTYPE)
        teacher = torch.rand((1, 4, 4), dtype=DTYPE)
        result = psot_terms(student, teacher)
        np.testing.assert_array_equal(result.cost.total, [[0.0]])
        assert result.loss.item() == 0.0

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_self_matching_is_bounded_by_entropy(self, n):
        generator = torch.Generator().manual_seed(n)
        maps = torch.rand((n, 4, 4), dtype=DTYPE, generator=generator)
        cfg = TCAConfig(epsilon=0.05)
        loss = psot_loss(maps, maps.clone(), cfg).item()
        assert -1e-9 <= loss <= cfg.epsilon * math.log(n) + 1e-9

    def test_constant_offset_leaves_loss_unchanged(self):
        student = torch.rand((4, 4, 4), dtype=DTYPE)
        teacher = torch.rand((4, 4, 4), dtype=DTYPE)
        base = psot_terms(student, teacher, TCAConfig(epsilon=0.1))
        shifted = psot_terms(student + 0.7, teacher + 0.7, TCAConfig(epsilon=0.1))
        np.testing.assert_allclose(shifted.cost.total, base.cost.total, atol=1e-12)
        assert shifted.loss.item() == pytest.approx(base.loss.item(), abs=1e-9)

    def test_precomputed_potentials_skip_solve(self):
        student = torch.rand((3, 3, 3), dtype=DTYPE)
        teacher = torch.rand((3, 3, 3), dtype=DTYPE)
        first = psot_terms(student, teacher)
        again = psot_terms(student, teacher, potentials=first.potentials)
        assert again.plan is None
        assert again.loss.item() == pytest.approx(first.loss.item(), abs=1e-12)

    def test_warns_when_not_converged(self):
        student = torch.rand((4, 3, 3), dtype=DTYPE)
        teacher = torch.rand((4, 3, 3), dtype=DTYPE)
        cfg = TCAConfig(max_iter=1, epsilon_scaling=False, check_every=1)
        with pytest.warns(SinkhornConvergenceWarning, match="did not converge"):
            loss = psot_loss(student, teacher, cfg)
        assert torch.isfinite(loss)


class TestBenchmark:
    def test_rows(self):
        rows = benchmark_solver(sizes=(2, 3), epsilons=(0.05,), instances=2, seed=0)
        assert len(rows) == 4
        assert set(rows[0]) == {
            "N", "epsilon", "sinkhorn_cost", "lp_cost", "gap", "iters", "residual"
        }
        for row in rows:
            assert row["gap"] == pytest.approx(row["sinkhorn_cost"] - row["lp_cost"])
            assert row["gap"] >= -1e-6
