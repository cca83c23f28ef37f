"""Mean-field variational values, naive mean-field fixed points and rate-function solvers."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .functionals import (
    Functional,
    MonoHomCount,
    PatternGraph,
    SpinHamiltonian,
    SpinSystem,
    n_pairs,
    triangle_count,
    triangle_expectation,
    triangle_gradient,
)
from .measures import ProductMeasure, lambda_for_mean, truncexp_kl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MFConfig:
    damping: float = 1.0
    tol: float = 1e-10
    max_iter: int = 5000
    restarts: int = 8
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_rounds: int = 5
    inner_iter: int = 400
    step: float = 0.5
    feas_tol: float = 1e-9
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        for name in ("tol", "max_iter", "restarts", "penalty_init", "penalty_growth", "penalty_rounds",
                     "inner_iter", "step", "feas_tol", "jobs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RateResult:
    value: float
    argument: np.ndarray | None
    feasible: bool
    iterations: int
    constraint_violation: float
    restarts_used: int
    threshold: float
    expectation: float
    ansatz_value: float
    restart_values: list = field(default_factory=list)
    boundary_distance: float = math.nan


def _restart_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def _run_restarts(fn, count: int, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, range(count)))
    return [fn(k) for k in range(count)]


# ---------------------------------------------------------------------------
# mean-field objective and fixed points


def mf_objective(tilts, functional: Functional, mu: ProductMeasure) -> float:
    """``f(m(nu)) - sum_i KL(nu_i || mu_i)`` for the product of exponential tilts of ``mu``."""
    means, _, kl = mu.tilt_stats(tilts)
    return float(functional.value(means) - kl.sum())


@dataclass
class FixedPoint:
    tilts: np.ndarray
    means: np.ndarray
    iterations: int
    converged: bool
    residual: float


def naive_mf_fixed_point(functional: Functional, mu: ProductMeasure, init_tilts=None,
                         cfg: MFConfig = MFConfig()) -> FixedPoint:
    """Damped iteration ``p <- (1 - g) p + g * tiltmean(mu, grad f(p))``.

    Stops once ``||p - tiltmean(mu, grad f(p))||_inf <= tol``; otherwise returns the last
    iterate with ``converged=False``.
    """
    D0 = np.zeros((mu.n, mu.dim)) if init_tilts is None else np.asarray(init_tilts, dtype=float).reshape(mu.n, mu.dim)
    p = mu.tilt_stats(D0)[0]
    resid = math.inf
    for it in range(1, cfg.max_iter + 1):
        q = mu.tilt_stats(functional.gradient(p))[0]
        resid = float(np.abs(q - p).max())
        if resid <= cfg.tol:
            return FixedPoint(functional.gradient(p), p, it - 1, True, resid)
        p = (1.0 - cfg.damping) * p + cfg.damping * q
    D = functional.gradient(p)
    resid = float(np.abs(mu.tilt_stats(D)[0] - p).max())
    return FixedPoint(D, p, cfg.max_iter, resid <= cfg.tol, resid)


@dataclass
class MFValue:
    value: float
    tilts: np.ndarray
    means: np.ndarray
    converged: bool
    start_values: list


def mf_value(functional: Functional, mu: ProductMeasure, cfg: MFConfig = MFConfig()) -> MFValue:
    """Best mean-field objective over multi-start fixed points (a lower bound on the supremum).

    Starts: zero tilt, one tilt towards each support atom, then random tilts.
    """
    starts = [np.zeros((mu.n, mu.dim))]
    atoms = mu.shared_atoms()
    if atoms is not None and len(atoms) > 1:
        centre = atoms.mean(axis=0)
        for atom in atoms:
            starts.append(np.tile(4.0 * (atom - centre), (mu.n, 1)))
    for k in range(max(0, cfg.restarts - len(starts))):
        starts.append(_restart_rng(cfg.seed, k).normal(scale=2.0, size=(mu.n, mu.dim)))

    def run(j):
        fp = naive_mf_fixed_point(functional, mu, starts[j], cfg)
        return fp, mf_objective(fp.tilts, functional, mu)

    results = _run_restarts(run, len(starts), cfg.jobs)
    values = [v for _, v in results]
    best = int(np.argmax(values))
    fp = results[best][0]
    return MFValue(values[best], fp.tilts, fp.means, fp.converged, values)


def spin_mf_value(sys: SpinSystem, cfg: MFConfig = MFConfig()) -> MFValue:
    return mf_value(SpinHamiltonian(sys), sys.product_measure(), cfg)


# ---------------------------------------------------------------------------
# monochromatic homomorphism rate


def simplex_kl(x, l: int) -> float:
    """``sum x log(x l)`` with ``0 log 0 = 0``."""
    x = np.asarray(x, dtype=float)
    pos = x > 0
    return max(float(np.sum(x[pos] * np.log(x[pos] * l))), 0.0)


def clique_coloring(N: int, l: int, r: int) -> np.ndarray:
    """Colour ``e_1`` inside the clique on vertices ``0..r-1``, the centroid elsewhere."""
    iu, ju = np.triu_indices(N, 1)
    x = np.full((len(iu), l), 1.0 / l)
    inside = ju < r
    x[inside] = 0.0
    x[inside, 0] = 1.0
    return x


@dataclass(frozen=True)
class CliqueBound:
    value: float
    r: int | None
    feasible: bool
    threshold: float


def clique_ansatz_bound(H: PatternGraph, l: int, u: float, N: int, feas_tol: float = 1e-9) -> CliqueBound:
    """Smallest monochromatic clique meeting ``T >= u E[T]``; its cost is ``C(r,2) log l``."""
    F = MonoHomCount(H, N, l)
    target = u * F.expectation()
    for r in range(N + 1):
        if r == 1:
            continue
        if F.value(clique_coloring(N, l, r)) >= target * (1.0 - feas_tol):
            return CliqueBound(math.comb(r, 2) * math.log(l), r, True, target)
    return CliqueBound(math.inf, None, False, target)


def _md_round(x, F, target, rho, l, cfg, iters):
    n = x.shape[0]

    def obj(z):
        T = F.value(z)
        v = max(0.0, 1.0 - T / target)
        return simplex_kl(z, l) + rho * n * v * v, T, v

    f, T, v = obj(x)
    step = cfg.step
    for _ in range(iters):
        g = np.log(np.maximum(x, 1e-300) * l) + 1.0
        if v > 0:
            g = g - 2.0 * rho * n * v / target * F.gradient(x)
        while True:
            logits = np.log(np.maximum(x, 1e-300)) - step * g
            logits -= logits.max(axis=1, keepdims=True)
            y = np.exp(logits)
            y /= y.sum(axis=1, keepdims=True)
            fy, Ty, vy = obj(y)
            if fy <= f or step < 1e-12:
                break
            step *= 0.5
        moved = float(np.abs(y - x).max())
        x, f, v = y, fy, vy
        step = min(step * 1.5, 50.0)
        if moved < 1e-13:
            break
    return x


def _project_feasible(x, anchor, value_fn, target, feas_tol):
    """Move ``x`` towards the feasible ``anchor`` until the constraint holds (bisection on the mix)."""
    if value_fn(x) >= target * (1.0 - feas_tol):
        return x
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if value_fn((1 - mid) * x + mid * anchor) >= target * (1.0 - feas_tol):
            hi = mid
        else:
            lo = mid
    return (1 - hi) * x + hi * anchor


def rate_function_simplex(H: PatternGraph, l: int, u: float, N: int, cfg: MFConfig = MFConfig()) -> RateResult:
    """Minimise ``sum x log(x l)`` over simplex-valued arrays subject to ``T(x) >= u E[T]``.

    Entropic mirror descent on the quadratic-penalty objective with an escalating weight,
    followed by a feasibility projection towards the clique ansatz.
    """
    F = MonoHomCount(H, N, l)
    E = F.expectation()
    target = u * E
    n = n_pairs(N)
    clique = clique_ansatz_bound(H, l, u, N, cfg.feas_tol)
    if not clique.feasible:
        return RateResult(math.inf, None, False, 0, float(max(0.0, target - F.value(clique_coloring(N, l, N)))),
                          0, target, E, math.inf)
    centroid = np.full((n, l), 1.0 / l)
    if u <= 1.0:
        # the centroid attains T = E[T] at zero cost
        return RateResult(0.0, centroid, True, 0, 0.0, 0, target, E, clique.value, [0.0], 1.0 / l)
    anchor = clique_coloring(N, l, clique.r)

    e1 = np.zeros(l)
    e1[0] = 1.0

    def start(k, rng):
        # the exact centroid is a symmetric saddle, so most starts lean towards one colour
        if k == 0:
            return centroid.copy()
        if k == 1:
            return 0.9 * anchor + 0.1 * centroid
        if k == 2:
            return 0.9 * centroid + 0.1 * e1
        if k % 2:
            return rng.dirichlet(np.ones(l), size=n)
        lean = rng.uniform(0.05, 0.5)
        return (1 - lean) * rng.dirichlet(np.full(l, 20.0), size=n) + lean * e1

    def run(k):
        rng = _restart_rng(cfg.seed, k)
        x = start(k, rng)
        rho = cfg.penalty_init
        for _ in range(cfg.penalty_rounds):
            x = _md_round(x, F, target, rho, l, cfg, cfg.inner_iter)
            rho *= cfg.penalty_growth
        # repair towards the clique ansatz or towards a monochromatic colouring in the dominant colour
        mono = np.zeros_like(x)
        mono[:, int(np.argmax(x.sum(axis=0)))] = 1.0
        cands = [_project_feasible(x, a, F.value, target, cfg.feas_tol) for a in (anchor, mono)]
        costs = [simplex_kl(c, l) for c in cands]
        j = int(np.argmin(costs))
        return cands[j], costs[j]

    results = _run_restarts(run, cfg.restarts, cfg.jobs)
    values = [v for _, v in results]
    best = int(np.argmin(values))
    x, value = results[best]
    if clique.value < value:
        x, value = anchor, clique.value
    T = F.value(x)
    viol = max(0.0, 1.0 - T / target)
    return RateResult(value, x, viol <= cfg.feas_tol, cfg.penalty_rounds * cfg.inner_iter, viol,
                      cfg.restarts, target, E, clique.value, values, float(x.min()))


# ---------------------------------------------------------------------------
# weighted triangle rate


def constant_ansatz(u: float, N: int) -> tuple[float, float]:
    """Constant weight ``s = (u/8)^(1/3)`` meeting the threshold with equality, and its cost."""
    s = (u / 8.0) ** (1.0 / 3.0)
    return s, n_pairs(N) * float(truncexp_kl(lambda_for_mean(s)))


def triangle_rate_cost(y) -> float:
    return float(np.sum(truncexp_kl(lambda_for_mean(np.asarray(y)))))


def rate_function_triangle(u: float, N: int, cfg: MFConfig = MFConfig(), eta: float = 1e-9) -> RateResult:
    """Minimise ``sum KL(nu^{y_ij} || U)`` subject to ``T(y) >= u E[T]`` over ``y in [eta, 1-eta]``.

    Penalised box-constrained descent (L-BFGS-B) per penalty round, then a feasibility
    projection towards the constant ansatz.  The cost gradient is ``-lambda(y)``.
    """
    if not 1.0 < u < 8.0:
        raise ValueError("threshold ratio u must lie in (1, 8)")
    E = triangle_expectation(N)
    target = u * E
    n = n_pairs(N)
    s, ansatz = constant_ansatz(u, N)
    anchor = np.full(n, s)
    bounds = [(eta, 1.0 - eta)] * n

    def start(k, rng):
        if k == 0:
            return anchor.copy()
        if k == 1:
            return np.clip(anchor + 0.05 * rng.standard_normal(n), 0.05, 0.95)
        return rng.uniform(0.3, 0.95, size=n)

    def run(k):
        rng = _restart_rng(cfg.seed, k)
        y = start(k, rng)
        rho = cfg.penalty_init
        iters = 0
        for _ in range(cfg.penalty_rounds):
            def fun(z, rho=rho):
                lam = lambda_for_mean(z)
                cost = float(np.sum(truncexp_kl(lam)))
                T = triangle_count(z)
                v = max(0.0, 1.0 - T / target)
                grad = -lam
                if v > 0:
                    grad = grad - 2.0 * rho * n * v / target * triangle_gradient(z)
                return cost + rho * n * v * v, grad

            res = minimize(fun, y, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": cfg.inner_iter, "ftol": 1e-15, "gtol": 1e-10})
            y = res.x
            iters += res.nit
            rho *= cfg.penalty_growth
        # repair towards the constant ansatz or straight up towards the all-ones corner
        cands = [_project_feasible(y, a, triangle_count, target, cfg.feas_tol) for a in (anchor, np.full(n, 1.0 - eta))]
        costs = [triangle_rate_cost(c) for c in cands]
        j = int(np.argmin(costs))
        return cands[j], costs[j], iters

    results = _run_restarts(run, cfg.restarts, cfg.jobs)
    values = [r[1] for r in results]
    best = int(np.argmin(values))
    y, value, iters = results[best]
    if ansatz < value:
        y, value = anchor, ansatz
    T = triangle_count(y)
    viol = max(0.0, 1.0 - T / target)
    return RateResult(value, y, viol <= cfg.feas_tol, iters, viol, cfg.restarts, target, E, ansatz, values,
                      float(min(y.min(), 1.0 - y.max())))
