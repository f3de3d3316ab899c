import numpy as np
import pytest

from marlbarrier.diffcore import DiffError, ParameterStore, Tape
from marlbarrier.losses import (
    GradientPair,
    barrier_invariance_loss,
    barrier_invariance_loss_t,
    barrier_regression_loss,
    barrier_regression_loss_t,
    empirical_barrier,
    huber_quantile_loss,
    huber_quantile_loss_t,
    pcgrad_combine,
)
from marlbarrier.mixnet import JointQuantileBatch


def jqb(taus, values):
    return JointQuantileBatch(np.asarray(taus, float), np.asarray(values, float))


class TestHuberQuantileLoss:
    def test_zero_residual(self):
        pred = jqb([0.25, 0.75], [3.0, 3.0])
        assert huber_quantile_loss(pred, [3.0, 3.0]) == 0.0

    def test_single_sample_under_prediction(self):
        # d = 1 - 0 = 1, Huber_1(1) = 0.5, weight |0.5 - 0| = 0.5
        pred = jqb([0.5], [0.0])
        assert huber_quantile_loss(pred, [1.0], kappa=1.0) == pytest.approx(0.25)

    def test_single_sample_over_prediction_symmetric_at_median(self):
        pred = jqb([0.5], [1.0])
        assert huber_quantile_loss(pred, [0.0], kappa=1.0) == pytest.approx(0.25)

    def test_rejects_empty(self):
        pred = jqb([0.5], [0.0])
        with pytest.raises(DiffError):
            huber_quantile_loss(pred, [])

    def test_minimized_at_zero_iff_samples_match(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            k, kp = rng.integers(1, 5, size=2)
            taus = np.sort(rng.uniform(0.05, 0.95, size=k))
            p = rng.normal(size=k)
            t = rng.normal(size=kp)
            loss = huber_quantile_loss(jqb(taus, p), t)
            assert loss >= 0.0
            matches = np.all(p[:, None] == t[None, :])
            assert (loss == 0.0) == matches

    def test_tape_twin_matches_numpy(self):
        rng = np.random.default_rng(6)
        store = ParameterStore()
        store.add("pred", rng.normal(size=(4, 3)))
        taus = np.sort(rng.uniform(0.05, 0.95, size=(4, 3)), axis=1)
        targets = rng.normal(size=(4, 5))
        tape = Tape(store)
        out = huber_quantile_loss_t(tape, tape.param("pred"), taus, targets, kappa=1.0)
        expected = np.mean([
            huber_quantile_loss(jqb(taus[i], store["pred"][i]), targets[i])
            for i in range(4)
        ])
        assert out.item() == pytest.approx(expected, abs=1e-12)

    def test_tape_twin_respects_row_weights(self):
        store = ParameterStore()
        store.add("pred", np.array([[0.0], [100.0]]))
        taus = np.full((2, 1), 0.5)
        targets = np.array([[1.0], [100.0]])
        tape = Tape(store)
        out = huber_quantile_loss_t(tape, tape.param("pred"), taus, targets,
                                    weights=np.array([1.0, 0.0]))
        assert out.item() == pytest.approx(0.25)


class TestEmpiricalBarrier:
    def test_no_deaths(self):
        np.testing.assert_array_equal(empirical_barrier([0, 0, 0], 0.5), [0, 0, 0])

    def test_hand_recursion(self):
        np.testing.assert_allclose(empirical_barrier([1, 0, 2], 0.5), [1.5, 1.0, 2.0])

    def test_terminal_boundary(self):
        np.testing.assert_array_equal(empirical_barrier([2], 0.9), [2.0])

    def test_matches_closed_form_discounted_sum(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 200))
            gamma = float(rng.choice([0.4, 0.5, 0.7, 0.9, 0.99]))
            deaths = rng.integers(0, 4, size=n).astype(float)
            got = empirical_barrier(deaths, gamma)
            # independent oracle: forward discounted sums
            powers = gamma ** np.arange(n)
            want = np.array([np.sum(powers[: n - t] * deaths[t:]) for t in range(n)])
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rejects_empty_and_bad_gamma(self):
        with pytest.raises(DiffError):
            empirical_barrier([], 0.5)
        with pytest.raises(DiffError):
            empirical_barrier([1.0], 1.0)


class TestBarrierInvarianceLoss:
    def test_exact_decay_is_zero(self):
        assert barrier_invariance_loss([2.0, 1.0, 0.5], 0.5) == 0.0

    def test_flat_series_penalized(self):
        assert barrier_invariance_loss([1.0, 1.0], 0.5) == pytest.approx(0.25)

    def test_increase_from_zero_penalized(self):
        assert barrier_invariance_loss([0.0, 1.0], 0.5) == pytest.approx(0.5)

    def test_geometric_decay_boundary(self):
        lam = 0.3
        series = 2.0 * (1.0 - lam) ** np.arange(6)
        assert barrier_invariance_loss(series, lam) == 0.0
        bumped = series.copy()
        bumped[3] += 1e-6
        assert barrier_invariance_loss(bumped, lam) > 0.0

    def test_rejects_short_series(self):
        with pytest.raises(DiffError):
            barrier_invariance_loss([1.0], 0.5)

    def test_tape_twin_matches_numpy(self):
        rng = np.random.default_rng(8)
        store = ParameterStore()
        store.add("b", rng.normal(size=5))
        tape = Tape(store)
        out = barrier_invariance_loss_t(tape, tape.param("b"), 0.4)
        assert out.item() == pytest.approx(barrier_invariance_loss(store["b"], 0.4),
                                           abs=1e-12)


class TestBarrierRegressionLoss:
    def test_exact_fit(self):
        assert barrier_regression_loss([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_single_error(self):
        assert barrier_regression_loss([0.0], [2.0]) == pytest.approx(4.0)

    def test_hand_mse(self):
        assert barrier_regression_loss([1.0, 3.0], [2.0, 1.0]) == pytest.approx(2.5)

    def test_rejects_length_mismatch(self):
        with pytest.raises(DiffError):
            barrier_regression_loss([1.0], [1.0, 2.0])

    def test_tape_twin_matches_numpy(self):
        store = ParameterStore()
        store.add("b", np.array([1.0, 3.0]))
        tape = Tape(store)
        out = barrier_regression_loss_t(tape, tape.param("b"), np.array([2.0, 1.0]))
        assert out.item() == pytest.approx(2.5)


class TestPCGrad:
    def test_worked_conflict_example(self):
        pair = GradientPair(np.array([1.0, 0.0]), np.array([-1.0, 1.0]))
        assert pair.conflict
        np.testing.assert_array_equal(pcgrad_combine(pair), [0.25, 0.75])

    def test_orthogonal_no_conflict(self):
        pair = GradientPair(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert not pair.conflict
        np.testing.assert_array_equal(pcgrad_combine(pair), [0.5, 0.5])

    def test_parallel(self):
        pair = GradientPair(np.array([2.0, 0.0]), np.array([2.0, 0.0]))
        np.testing.assert_array_equal(pcgrad_combine(pair), [2.0, 0.0])

    def test_zero_gradient_short_circuits(self):
        g = np.array([3.0, -1.0])
        np.testing.assert_array_equal(
            pcgrad_combine(GradientPair(g, np.zeros(2))), 0.5 * g)
        np.testing.assert_array_equal(
            pcgrad_combine(GradientPair(np.zeros(2), g)), 0.5 * g)

    def test_projection_orthogonality(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            gq = rng.normal(size=6)
            gb = rng.normal(size=6)
            if np.dot(gq, gb) >= 0:
                gb = -gb - gq * 1e-3  # force a conflict half the time
                if np.dot(gq, gb) >= 0:
                    continue
            gq_plus = gq - np.dot(gq, gb) / np.dot(gb, gb) * gb
            gb_plus = gb - np.dot(gb, gq) / np.dot(gq, gq) * gq
            assert abs(np.dot(gq_plus, gb)) <= 1e-10 * max(1, np.linalg.norm(gq) * np.linalg.norm(gb))
            assert abs(np.dot(gb_plus, gq)) <= 1e-10 * max(1, np.linalg.norm(gq) * np.linalg.norm(gb))

    def test_combined_gradient_never_conflicts_with_either_task(self):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            pair = GradientPair(rng.normal(size=8), rng.normal(size=8))
            g = pcgrad_combine(pair)
            scale = max(1.0, np.linalg.norm(g))
            assert np.dot(g, pair.g_q) >= -1e-10 * scale
            assert np.dot(g, pair.g_b) >= -1e-10 * scale

    def test_branches_agree_at_orthogonality(self):
        gq = np.array([1.0, 2.0, 0.0])
        gb = np.array([-2.0, 1.0, 0.5])
        gb -= np.dot(gq, gb) / np.dot(gq, gq) * gq
        gb[np.abs(gb) < 1e-15] = 0.0
        assert np.dot(gq, gb) == pytest.approx(0.0, abs=1e-15)
        pair = GradientPair(gq, gb)
        conflict_branch = 0.5 * (gq - np.dot(gq, gb) / np.dot(gb, gb) * gb) \
            + 0.5 * (gb - np.dot(gb, gq) / np.dot(gq, gq) * gq)
        np.testing.assert_allclose(pcgrad_combine(pair), conflict_branch, atol=0)

    def test_rejects_length_mismatch(self):
        with pytest.raises(DiffError):
            GradientPair(np.zeros(3), np.zeros(4))

    def test_cos_theta_definition(self):
        pair = GradientPair(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
        assert pair.cos_theta == pytest.approx(-1.0)
        pair = GradientPair(np.zeros(2), np.array([1.0, 0.0]))
        assert pair.cos_theta == 0.0
