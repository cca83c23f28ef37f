import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlmf.bounds import (
    analytic_cover,
    cover_distance,
    covering_estimate,
    error_budget,
    gradient_box,
    greedy_cover,
    grid_cover,
    sandwich,
)
from nlmf.functionals import FunctionalBounds, QuadraticFunctional, derivative_bounds

from helpers import builtin_cases, hull_points
from oracles import budget_reference, greedy_net_reference


def random_bounds(rng, n):
    b = rng.uniform(0, 2, size=n)
    c = rng.uniform(0, 1, size=(n, n))
    return FunctionalBounds(rng.uniform(0, 5), b, (c + c.T) / 2, rng.uniform(0.1, 2))


class TestErrorBudget:
    def test_hand_computed(self):
        # n = 1, a = b = c = M = 1, eps = 0: B1 = 4 sqrt(1 + 1 + 1 + 2) and B2 = 4 + 1
        fb = FunctionalBounds(1.0, np.ones(1), np.ones((1, 1)), 1.0)
        bud = error_budget(fb, 0.0, cover_size=1)
        assert bud.B1 == pytest.approx(4 * math.sqrt(5))
        assert bud.B2 == pytest.approx(5.0)
        assert bud.log_cover_term == pytest.approx(math.log(2))
        assert bud.lower_slack == 0.5

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 7), st.floats(0, 3), st.integers(1, 10**6), st.integers(0, 2**31))
    def test_matches_loop_reference(self, n, eps, cover, seed):
        fb = random_bounds(np.random.default_rng(seed), n)
        bud = error_budget(fb, eps, cover_size=cover)
        B1, B2, slack = budget_reference(fb.a, fb.b, fb.c, fb.M, eps, n)
        assert bud.B1 == pytest.approx(B1, rel=1e-12)
        assert bud.B2 == pytest.approx(B2, rel=1e-12)
        assert bud.lower_slack == pytest.approx(slack, rel=1e-12)
        assert bud.log_cover_term == pytest.approx(math.log(2) + math.log(cover), rel=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31))
    def test_monotone_in_every_input(self, n, seed):
        rng = np.random.default_rng(seed)
        fb = random_bounds(rng, n)
        eps = rng.uniform(0, 1)
        base = error_budget(fb, eps, cover_size=3)
        i, j = rng.integers(n, size=2)
        b = fb.b.copy()
        b[i] += rng.uniform(0, 1)
        c = fb.c.copy()
        bump = rng.uniform(0, 1)
        c[i, j] += bump
        if i != j:
            c[j, i] += bump
        for other, e in (
            (FunctionalBounds(fb.a + 1, fb.b, fb.c, fb.M), eps),
            (FunctionalBounds(fb.a, b, fb.c, fb.M), eps),
            (FunctionalBounds(fb.a, fb.b, c, fb.M), eps),
            (FunctionalBounds(fb.a, fb.b, fb.c, fb.M * 1.5), eps),
            (fb, eps + 0.5),
        ):
            bud = error_budget(other, e, cover_size=3)
            assert bud.B1 >= base.B1 * (1 - 1e-12)
            assert bud.B2 >= base.B2 * (1 - 1e-12)

    def test_worked_examples(self):
        zero = FunctionalBounds(0.0, np.zeros(3), np.zeros((3, 3)), 1.0)
        bud = error_budget(zero, 0.0, cover_size=1)
        assert bud.B1 == bud.B2 == bud.lower_slack == 0.0
        a_only = FunctionalBounds(7.0, np.zeros(3), np.zeros((3, 3)), 2.0)
        bud = error_budget(a_only, 0.3, cover_size=1)
        assert bud.B2 == pytest.approx(4 * 2.0**2 * 3 * 0.3**2 + 2.0 * 3 * 0.3, rel=1e-14)
        assert bud.B1 == 0.0
        generic = FunctionalBounds(2.0, np.ones(4), np.eye(4) / 2, 1.0)
        bud = error_budget(generic, 0.1, cover_size=5)
        B1, B2, slack = budget_reference(2.0, np.ones(4), np.eye(4) / 2, 1.0, 0.1, 4)
        assert (bud.B1, bud.B2, bud.lower_slack) == pytest.approx((B1, B2, slack), rel=1e-14)

    def test_preconditions(self):
        fb = FunctionalBounds(1.0, np.ones(2), np.ones((2, 2)), 1.0)
        with pytest.raises(ValueError):
            error_budget(fb, 0.1, cover_size=0)
        with pytest.raises(ValueError):
            error_budget(fb, -0.1, cover_size=1)

    def test_serialisation(self):
        fb = FunctionalBounds(1.0, np.ones(2), np.ones((2, 2)), 1.0)
        bud = error_budget(fb, 0.1, cover_size=4)
        text = bud.to_text()
        assert f"B1 = {bud.B1!r}" in text
        assert '"upper_total"' in bud.to_json()


class TestGreedyCover:
    def test_covering_condition_replay(self):
        rng = np.random.default_rng(0)
        S = rng.normal(size=(80, 4, 2))
        for eps in (0.2, 0.7, 1.5):
            est = greedy_cover(S, eps)
            d = np.array([cover_distance(s, est.centers).min() for s in S])
            assert np.all(d <= eps**2 * 4 * (1 + 1e-12))
            assert est.residual_max <= 1.0
            for s, a in zip(S, est.assignment):
                dist = cover_distance(s, est.centers)
                assert dist[a] <= eps**2 * 4 and not np.any(dist[:a] <= eps**2 * 4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 4), st.integers(0, 2**31))
    def test_size_nonincreasing_in_epsilon(self, count, n, seed):
        S = np.random.default_rng(seed).normal(size=(count, n, 1))
        sizes = [greedy_cover(S, e).size for e in np.linspace(0, 3, 31)]
        assert all(b <= a for a, b in zip(sizes, sizes[1:]))
        assert sizes[-1] >= 1 and sizes[0] <= count

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(8)
        S = rng.normal(size=(20, 2, 1))
        for eps in (0.05, 0.2, 0.5, 1.0):
            assert greedy_cover(S, eps).size == greedy_net_reference(S, eps)

    def test_trivial_sizes(self):
        g = np.tile(np.array([[1.0], [-2.0]]), (30, 1, 1))
        assert greedy_cover(g, 0.01).size == 1
        S = np.random.default_rng(9).uniform(size=(30, 3, 1))
        assert greedy_cover(S, 10.0).size == 1

    def test_zero_epsilon_counts_distinct(self):
        S = np.array([[[1.0]], [[2.0]], [[1.0]], [[2.0]], [[3.0]]])
        assert greedy_cover(S, 0.0).size == 3

    def test_covering_estimate_reproducible(self):
        F = QuadraticFunctional(np.array([[0.0, 1.0], [1.0, 0.0]]))
        atoms = np.array([[0.0], [1.0]])
        sampler = lambda r: F.gradient(atoms[r.integers(2, size=2)])
        a = covering_estimate(sampler, 0.1, 50, np.random.default_rng(3))
        b = covering_estimate(sampler, 0.1, 50, np.random.default_rng(3))
        # the gradient (x2, x1) takes all four values of {0,1}^2
        assert a.size == b.size == 4 and a.sample_count == 50


class TestAnalyticCover:
    @pytest.mark.parametrize("name,F,mu", builtin_cases(), ids=[c[0] for c in builtin_cases()])
    def test_grid_cover_contains_sampled_gradients(self, name, F, mu):
        rng = np.random.default_rng(5)
        eps = 0.3
        grid = analytic_cover(F, mu, eps)
        lo, hi = gradient_box(F, mu)
        for x in hull_points(mu, rng, 200):
            g = F.gradient(x)
            assert np.all(g >= lo - 1e-9) and np.all(g <= hi + 1e-9)
            assert cover_distance(g, grid.nearest(g)[None])[0] <= eps**2 * F.n * (1 + 1e-12)

    def test_grid_size(self):
        grid = grid_cover(np.zeros((2, 1)), np.array([[1.0], [0.0]]), 0.25)
        assert grid.log_size == pytest.approx(math.log(2))
        assert grid_cover(np.zeros((1, 1)), np.ones((1, 1)), 0.0).log_size == math.inf

    def test_quadratic_box_is_exact(self):
        F = QuadraticFunctional(np.array([[0.0, 2.0], [2.0, 0.0]]), np.array([1.0, -1.0]))
        mu = builtin_cases()[0][2]
        from nlmf.measures import ProductMeasure

        mu = ProductMeasure(mu.sites[:2])
        lo, hi = gradient_box(F, mu)
        np.testing.assert_allclose(lo[:, 0], [1.0, -1.0])
        np.testing.assert_allclose(hi[:, 0], [3.0, 1.0])
        assert derivative_bounds(F, mu).b.tolist() == [3.0, 1.0]


class TestSandwich:
    def budget(self):
        return error_budget(FunctionalBounds(1.0, np.ones(2), np.eye(2), 1.0), 0.1, cover_size=2)

    def test_inside(self):
        rep = sandwich(1.0, 1.2, self.budget())
        assert rep.lower_ok and rep.upper_ok

    def test_violations(self):
        bud = self.budget()
        assert not sandwich(1.0, 1.0 + bud.lower_slack + 1e-3, bud).lower_ok
        assert not sandwich(1.0 + bud.upper_total + 1e-3, 1.0, bud).upper_ok

    def test_tolerance_edge(self):
        bud = self.budget()
        logZ = 10.0
        tol = 1e-9 * 11
        assert sandwich(logZ, logZ + bud.lower_slack + 0.5 * tol, bud).lower_ok
        assert not sandwich(logZ, logZ + bud.lower_slack + 2 * tol, bud).lower_ok

    def test_upper_uses_supplied_bound(self):
        bud = self.budget()
        logZ = 5.0 + bud.upper_total + 0.5
        assert not sandwich(logZ, 5.0, bud).upper_ok
        assert sandwich(logZ, 5.0, bud, mf_upper=5.6).upper_ok
        assert sandwich(logZ, 5.0, bud, mf_certified=False).heuristic_mf
